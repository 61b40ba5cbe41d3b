//! Run configuration: one declarative file (TOML or JSON) plus flag
//! overrides. Flags always win over the file.

use std::fs;
use std::path::{Path, PathBuf};

use anchorprop::equivariance::AugmentConfig;
use anchorprop::network::NetworkConfig;
use anchorprop::synth::{ClipSpec, FeatureKind, MotionKind};
use anchorprop::tracking::EvalConfig;
use anchorprop::Mode;
use clap::Args;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Clip settings that do not follow from the network shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClipSettings {
    pub image_size: usize,
    pub features: FeatureKind,
    pub motion: MotionKind,
    pub render_images: Option<usize>,
}

impl Default for ClipSettings {
    fn default() -> Self {
        let spec = ClipSpec::default();
        Self {
            image_size: spec.image_size,
            features: spec.features,
            motion: spec.motion,
            render_images: spec.render_images,
        }
    }
}

/// `seed` drives the data (clips, augmentation); the network weights and edit
/// noise use the seeds inside `network`, like a fixed pretrained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub frames: usize,
    pub anchors: usize,
    pub steps: usize,
    pub workers: usize,
    pub mode: Mode,
    pub network: NetworkConfig,
    pub clip: ClipSettings,
    pub tracking: EvalConfig,
    pub augment: AugmentConfig,
    pub output: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            frames: 8,
            anchors: 3,
            steps: 10,
            workers: 1,
            mode: Mode::Anchored,
            network: NetworkConfig::default(),
            clip: ClipSettings::default(),
            tracking: EvalConfig::default(),
            augment: AugmentConfig::default(),
            output: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        let parsed = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => serde_json::from_str(&text).map_err(|e| e.to_string()),
            _ => toml::from_str(&text).map_err(|e| e.to_string()),
        };
        parsed.map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }

    /// The network configuration with the run-level step count applied.
    pub fn network_config(&self) -> NetworkConfig {
        NetworkConfig {
            steps: self.steps,
            ..self.network.clone()
        }
    }

    pub fn clip_spec(&self) -> ClipSpec {
        ClipSpec {
            seed: self.seed,
            n_frames: self.frames,
            grid_h: self.network.grid_h,
            grid_w: self.network.grid_w,
            dim: self.network.dim,
            image_size: self.clip.image_size,
            features: self.clip.features.clone(),
            motion: self.clip.motion.clone(),
            render_images: self.clip.render_images,
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: String| Err(CliError::Data(format!("invalid config: {msg}")));
        if self.frames == 0 {
            return bad("frames must be at least 1".into());
        }
        // more anchors than frames is clamped when a clip is edited
        if self.anchors == 0 {
            return bad("anchors must be at least 1".into());
        }
        if self.workers == 0 {
            return bad("workers must be at least 1".into());
        }
        if self.tracking.thresholds.is_empty() || self.tracking.thresholds.iter().any(|t| !(t.is_finite() && *t > 0.0))
        {
            return bad("tracking thresholds must be positive".into());
        }
        if self.tracking.query_step == 0 || self.tracking.pair_stride == 0 {
            return bad("query_step and pair_stride must be positive".into());
        }
        if self.augment.crop_size == 0 || self.augment.crop_size > self.augment.resize_to {
            return bad("augment crop_size must lie in 1..=resize_to".into());
        }
        self.network_config()
            .validate()
            .map_err(|e| CliError::Data(format!("invalid config: {e}")))?;
        self.clip_spec()
            .validate()
            .map_err(|e| CliError::Data(format!("invalid config: {e}")))?;
        Ok(())
    }
}

/// Flags accepted by every subcommand.
#[derive(Args, Clone, Debug, Default)]
pub struct CommonArgs {
    /// TOML or JSON run configuration.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(short, long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub anchors: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<Mode>,
    /// Square token grid side.
    #[arg(long)]
    pub grid: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub levels: Option<usize>,
    /// Seed of the network weights and edit noise.
    #[arg(long)]
    pub network_seed: Option<u64>,
    #[arg(long)]
    pub image_size: Option<usize>,
    /// `static`, `shift:DX,DY` (whole tokens) or `subshift:DX,DY`.
    #[arg(long, value_parser = parse_motion)]
    pub motion: Option<MotionKind>,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse().map_err(|e: anchorprop::Error| e.to_string())
}

pub fn parse_motion(s: &str) -> Result<MotionKind, String> {
    if s == "static" {
        return Ok(MotionKind::Static);
    }
    let (kind, args) = s.split_once(':').ok_or(format!("unknown motion {s:?}"))?;
    let (a, b) = args.split_once(',').ok_or(format!("motion {s:?} needs two offsets"))?;
    match kind {
        "shift" => Ok(MotionKind::IntegerShift {
            dx: a.trim().parse().map_err(|e| format!("{a:?}: {e}"))?,
            dy: b.trim().parse().map_err(|e| format!("{b:?}: {e}"))?,
        }),
        "subshift" => Ok(MotionKind::SubTokenShift {
            dx: a.trim().parse().map_err(|e| format!("{a:?}: {e}"))?,
            dy: b.trim().parse().map_err(|e| format!("{b:?}: {e}"))?,
        }),
        _ => Err(format!("unknown motion kind {kind:?}")),
    }
}

impl CommonArgs {
    /// Loads the config file, if any, applies the flags and validates.
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(v) = &self.out {
            cfg.output = v.clone();
        }
        macro_rules! set {
            ($($flag:ident => $($field:ident).+),* $(,)?) => {
                $(if let Some(v) = &self.$flag { cfg.$($field).+ = v.clone(); })*
            };
        }
        set!(
            seed => seed,
            frames => frames,
            anchors => anchors,
            steps => steps,
            workers => workers,
            mode => mode,
            dim => network.dim,
            heads => network.num_heads,
            levels => network.levels,
            image_size => clip.image_size,
            motion => clip.motion,
        );
        if let Some(g) = self.grid {
            cfg.network.grid_h = g;
            cfg.network.grid_w = g;
        }
        if let Some(s) = self.network_seed {
            cfg.network.seed = s;
            cfg.network.edit.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
