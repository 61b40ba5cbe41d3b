//! Per-frame and whole-clip editing.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::anchor::{build_anchor_cache_with_outputs, select_anchor_indices, AnchorCache};
use crate::attention::FrameFeatures;
use crate::container::{self, Tensor};
use crate::error::{Error, Result};
use crate::network::{Context, ToyEditNetwork};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Independent,
    Anchored,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "independent" => Ok(Mode::Independent),
            "anchored" => Ok(Mode::Anchored),
            other => Err(Error::Parameter(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub network_seed: u64,
    pub edit_seed: u64,
    pub steps: usize,
    pub num_anchors: usize,
    pub anchor_indices: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EditedVideo {
    pub frames: Vec<FrameFeatures>,
    pub mode: Mode,
    pub provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    mode: Mode,
    provenance: Provenance,
    frame_indices: Vec<usize>,
}

impl EditedVideo {
    /// Writes `frames.apft` (dims `[N, h, w, dim]`) and `provenance.json`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        container::write(dir.join("frames.apft"), &frames_to_tensor(&self.frames)?)?;
        let sidecar = Sidecar {
            mode: self.mode,
            provenance: self.provenance.clone(),
            frame_indices: self.frames.iter().map(|f| f.frame_index).collect(),
        };
        fs::write(dir.join("provenance.json"), serde_json::to_vec_pretty(&sidecar)?)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let sidecar: Sidecar = serde_json::from_slice(&fs::read(dir.join("provenance.json"))?)?;
        let mut frames = frames_from_tensor(&container::read(dir.join("frames.apft"))?)?;
        if frames.len() != sidecar.frame_indices.len() {
            return Err(Error::Format("frame count disagrees with provenance".into()));
        }
        for (f, &i) in frames.iter_mut().zip(&sidecar.frame_indices) {
            f.frame_index = i;
        }
        Ok(Self {
            frames,
            mode: sidecar.mode,
            provenance: sidecar.provenance,
        })
    }
}

/// Packs equally sized frames into one `[N, h, w, dim]` tensor.
pub fn frames_to_tensor(frames: &[FrameFeatures]) -> Result<Tensor> {
    let Some(first) = frames.first() else {
        return Tensor::new(vec![0, 0, 0, 0], Vec::new());
    };
    let (h, w, d) = (first.grid_h, first.grid_w, first.dim());
    let mut data = Vec::with_capacity(frames.len() * h * w * d);
    for f in frames {
        if (f.grid_h, f.grid_w, f.dim()) != (h, w, d) {
            return Err(Error::Shape("frames differ in shape".into()));
        }
        data.extend_from_slice(f.tokens().as_slice());
    }
    Tensor::new(vec![frames.len(), h, w, d], data)
}

/// Inverse of [`frames_to_tensor`]; frame indices are positions.
pub fn frames_from_tensor(t: &Tensor) -> Result<Vec<FrameFeatures>> {
    let [n, h, w, d] = t.dims[..] else {
        return Err(Error::Format(format!("expected 4 dims, got {:?}", t.dims)));
    };
    let per = h * w * d;
    (0..n)
        .map(|i| {
            let tokens = Matrix::new(h * w, d, t.data[i * per..(i + 1) * per].to_vec())?;
            FrameFeatures::new(i, h, w, tokens)
        })
        .collect()
}

/// Edits one frame, attending to the anchor cache when one is given.
pub fn edit_frame(
    frame: &FrameFeatures,
    network: &ToyEditNetwork,
    cache: Option<&AnchorCache>,
) -> Result<FrameFeatures> {
    let ctx = match cache {
        Some(c) => {
            c.check_compatible(network)?;
            Context::Anchored(c)
        }
        None => Context::Independent,
    };
    let mut out = network.run(&[frame], ctx, true, &mut |_, _, _| Ok(()))?;
    Ok(out.pop().expect("one frame in, one frame out"))
}

pub(crate) fn provenance(network: &ToyEditNetwork, anchors: Vec<usize>) -> Provenance {
    let cfg = network.config();
    Provenance {
        config_hash: network.config_hash().to_owned(),
        network_seed: cfg.seed,
        edit_seed: cfg.edit.seed,
        steps: cfg.steps,
        num_anchors: anchors.len(),
        anchor_indices: anchors,
    }
}

/// Selects anchors, runs them as a batch and returns the cache together with
/// the anchors' edited frames keyed by clip position.
pub(crate) fn prepare_anchors(
    clip: &[FrameFeatures],
    network: &ToyEditNetwork,
    num_anchors: usize,
) -> Result<(AnchorCache, Vec<usize>, Vec<FrameFeatures>)> {
    let indices = select_anchor_indices(clip.len(), num_anchors)?;
    let anchors: Vec<FrameFeatures> = indices
        .iter()
        .map(|&i| {
            let mut f = clip[i].clone();
            f.frame_index = i;
            f
        })
        .collect();
    let (cache, outputs) = build_anchor_cache_with_outputs(&anchors, network, network.steps())?;
    Ok((cache, indices, outputs))
}

pub fn edit_video(
    clip: &[FrameFeatures],
    network: &ToyEditNetwork,
    mode: Mode,
    num_anchors: usize,
) -> Result<EditedVideo> {
    if clip.is_empty() {
        return Err(Error::Parameter("clip has no frames".into()));
    }
    match mode {
        Mode::Independent => {
            let frames = clip
                .iter()
                .map(|f| edit_frame(f, network, None))
                .collect::<Result<_>>()?;
            Ok(EditedVideo {
                frames,
                mode,
                provenance: provenance(network, Vec::new()),
            })
        }
        Mode::Anchored => crate::parallel::run_parallel(clip, network, num_anchors, 1),
    }
}
