//! A seeded, layered toy editing network.
//!
//! The network mirrors the shape of an encoder/decoder denoiser: token grids
//! are mean-pooled down `levels` times and duplicated back up, with skip
//! connections from the encoder. Every layer is an attention site. A run
//! repeats the whole pyramid for `steps` refinement iterations, each moving
//! a latent a fraction `step_rate` of the way toward the pyramid's output.
//!
//! The edit is a fixed direction added to every token plus a global "style"
//! vector whose seed is a hash of the frame's content. Identical frames get
//! identical edits, but any change to the input picks a new style, which is
//! what makes independent per-frame editing temporally inconsistent.
//!
//! Query and key projections are shared per layer and orthogonal within each
//! head's column block, so `q . k` is a per-head inner product of the inputs
//! and attention scores peak on matching content.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::{attend_blocks, cross_frame_attention, AttentionConfig, FrameFeatures, ProjectionWeights, Qkv};
use crate::error::{Error, Result};
use crate::rng::{self, content_hash, derive, gaussian_vec, orthogonal, seeded};
use crate::tensor::{matmul, Matrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EditSpec {
    pub seed: u64,
    /// Weight of the shared edit direction.
    pub strength: f32,
    /// Weight of the content-seeded style vector.
    pub noise: f32,
}

impl Default for EditSpec {
    fn default() -> Self {
        Self {
            seed: 1,
            strength: 0.5,
            noise: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub grid_h: usize,
    pub grid_w: usize,
    pub dim: usize,
    pub num_heads: usize,
    /// Number of 2x downsampling stages; the network has `2 * levels + 1` layers.
    pub levels: usize,
    pub steps: usize,
    pub seed: u64,
    /// Overrides the default `sqrt(head_dim)` softmax temperature.
    pub temperature: Option<f32>,
    pub qk_gain: f32,
    /// Fraction of the residual stream replaced by the attention branch.
    pub mix: f32,
    /// Weight of the encoder skip when upsampling.
    pub skip_weight: f32,
    /// Fraction of the latent replaced by the pyramid's output each step.
    pub step_rate: f32,
    pub edit: EditSpec,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            grid_h: 32,
            grid_w: 32,
            dim: 64,
            num_heads: 4,
            levels: 2,
            steps: 10,
            seed: 0,
            temperature: None,
            qk_gain: 2.0,
            mix: 0.5,
            skip_weight: 0.7,
            step_rate: 0.3,
            edit: EditSpec::default(),
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let div = 1usize << self.levels;
        if self.grid_h == 0 || self.grid_w == 0 || !self.grid_h.is_multiple_of(div) || !self.grid_w.is_multiple_of(div)
        {
            return Err(Error::Parameter(format!(
                "grid {}x{} must be a positive multiple of {div} for {} levels",
                self.grid_h, self.grid_w, self.levels
            )));
        }
        if self.steps == 0 {
            return Err(Error::Parameter("steps must be at least 1".into()));
        }
        AttentionConfig::new(self.dim, self.num_heads)?;
        for (name, v) in [
            ("mix", self.mix),
            ("skip_weight", self.skip_weight),
            ("step_rate", self.step_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Parameter(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if !(self.qk_gain.is_finite() && self.qk_gain > 0.0) {
            return Err(Error::Parameter("qk_gain must be positive".into()));
        }
        if !(self.edit.strength.is_finite() && self.edit.noise.is_finite()) {
            return Err(Error::Parameter("edit weights must be finite".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&bytes);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Callback given `(layer, step, per-frame projections)`.
pub(crate) type Observer<'a> = dyn FnMut(usize, usize, &[Qkv]) -> Result<()> + 'a;

#[derive(Clone, Debug)]
pub struct Layer {
    pub grid_h: usize,
    pub grid_w: usize,
    pub attention: AttentionConfig,
    pub projections: ProjectionWeights,
    pub output: Matrix,
}

impl Layer {
    pub fn n_tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }
}

/// How attention sites are resolved during a run.
pub(crate) enum Context<'a> {
    /// Plain self-attention per frame.
    Independent,
    /// Own keys followed by the cached anchor keys for `(layer, step)`.
    Anchored(&'a crate::anchor::AnchorCache),
    /// Every frame attends to itself followed by the whole batch.
    Batch,
}

#[derive(Clone, Debug)]
pub struct ToyEditNetwork {
    config: NetworkConfig,
    layers: Vec<Layer>,
    edit_direction: Vec<f32>,
    hash: String,
}

impl ToyEditNetwork {
    pub fn new(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let mut attention = AttentionConfig::new(config.dim, config.num_heads)?;
        if let Some(t) = config.temperature {
            attention = attention.with_temperature(t)?;
        }
        let hd = attention.head_dim();
        let n_layers = 2 * config.levels + 1;
        let mut layers = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let depth = l.min(n_layers - 1 - l);
            let mut rng = seeded(derive(config.seed, l as u64));
            let mut wqk = Matrix::zeros(config.dim, config.dim);
            for h in 0..config.num_heads {
                let block = orthogonal(&mut rng, hd).map(|x| x * config.qk_gain)?;
                place_block(&mut wqk, h * hd, &block);
            }
            let wv = orthogonal(&mut rng, config.dim);
            let output = wv.transpose();
            layers.push(Layer {
                grid_h: config.grid_h >> depth,
                grid_w: config.grid_w >> depth,
                attention,
                projections: ProjectionWeights {
                    wq: wqk.clone(),
                    wk: wqk,
                    wv,
                },
                output,
            });
        }
        let mut rng = seeded(derive(config.edit.seed, 0xed17));
        let edit_direction = unit_rms(gaussian_vec(&mut rng, config.dim));
        let hash = config.hash();
        Ok(Self {
            config,
            layers,
            edit_direction,
            hash,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn steps(&self) -> usize {
        self.config.steps
    }

    pub fn config_hash(&self) -> &str {
        &self.hash
    }

    pub fn edit_direction(&self) -> &[f32] {
        &self.edit_direction
    }

    /// Index of the lowest-resolution layer.
    pub fn bottleneck_layer(&self) -> usize {
        self.config.levels
    }

    /// Layers running at the input resolution.
    pub fn full_resolution_layers(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&l| self.layers[l].grid_w == self.config.grid_w)
            .collect()
    }

    pub fn check_frame(&self, frame: &FrameFeatures) -> Result<()> {
        if frame.grid_h != self.config.grid_h || frame.grid_w != self.config.grid_w || frame.dim() != self.config.dim {
            return Err(Error::Shape(format!(
                "frame {} is {}x{}x{}, network expects {}x{}x{}",
                frame.frame_index,
                frame.grid_h,
                frame.grid_w,
                frame.dim(),
                self.config.grid_h,
                self.config.grid_w,
                self.config.dim
            )));
        }
        Ok(())
    }

    /// Input tokens plus the edit direction and the content-seeded style.
    pub fn edit_input(&self, frame: &FrameFeatures) -> Result<Matrix> {
        self.check_frame(frame)?;
        let tokens = frame.tokens();
        let style_seed = content_hash(self.config.edit.seed, tokens.as_slice());
        let style = unit_rms(gaussian_vec(&mut rng::seeded(style_seed), self.config.dim));
        let (a, b) = (self.config.edit.strength, self.config.edit.noise);
        let bias: Vec<f32> = self
            .edit_direction
            .iter()
            .zip(&style)
            .map(|(e, s)| a * e + b * s)
            .collect();
        let dim = self.config.dim;
        Matrix::new(
            tokens.rows(),
            dim,
            tokens
                .as_slice()
                .iter()
                .enumerate()
                .map(|(i, &x)| x + bias[i % dim])
                .collect(),
        )
    }

    /// Runs `frames` through every layer and step.
    ///
    /// `observe` sees each layer's projected inputs before attention, keyed by
    /// `(layer, step)`. With `edit` false the raw tokens enter the network,
    /// which is how the unedited clip is analysed.
    pub(crate) fn run(
        &self,
        frames: &[&FrameFeatures],
        ctx: Context<'_>,
        edit: bool,
        observe: &mut Observer<'_>,
    ) -> Result<Vec<FrameFeatures>> {
        let n_layers = self.layers.len();
        let levels = self.config.levels;
        let mut latents: Vec<Matrix> = frames
            .iter()
            .map(|f| {
                if edit {
                    self.edit_input(f)
                } else {
                    self.check_frame(f).map(|_| f.tokens().clone())
                }
            })
            .collect::<Result<_>>()?;
        let mut skips: Vec<Vec<Option<Matrix>>> = vec![vec![None; n_layers]; frames.len()];

        for step in 0..self.config.steps {
            let mut streams = latents.clone();
            for l in 0..n_layers {
                let layer = &self.layers[l];
                if l > 0 {
                    let prev = &self.layers[l - 1];
                    for (x, skip) in streams.iter_mut().zip(&skips) {
                        *x = if layer.grid_w < prev.grid_w {
                            mean_pool(x, prev.grid_h, prev.grid_w)
                        } else {
                            let up = upsample(x, prev.grid_h, prev.grid_w);
                            let s = skip[2 * levels - l].as_ref().expect("encoder ran first");
                            blend(&up, s, self.config.skip_weight)
                        };
                    }
                }
                let qkvs: Vec<Qkv> = streams
                    .iter()
                    .map(|x| {
                        let h = head_rms_norm(x, self.config.num_heads);
                        Qkv::new(
                            matmul(&h, &layer.projections.wq)?,
                            matmul(&h, &layer.projections.wk)?,
                            matmul(&h, &layer.projections.wv)?,
                        )
                    })
                    .collect::<Result<_>>()?;
                observe(l, step, &qkvs)?;
                for (i, x) in streams.iter_mut().enumerate() {
                    let attended = match &ctx {
                        Context::Independent => {
                            attend_blocks(&qkvs[i].q, &[&qkvs[i].k], &[&qkvs[i].v], &layer.attention)?
                        }
                        Context::Anchored(cache) => {
                            let entry = cache.entry(l, step)?;
                            crate::anchor::anchor_attention(&qkvs[i], entry, &layer.attention)?
                        }
                        Context::Batch => {
                            let all: Vec<&Qkv> = qkvs.iter().collect();
                            cross_frame_attention(&qkvs[i], &all, &layer.attention, true)?
                        }
                    };
                    let branch = matmul(&attended, &layer.output)?;
                    *x = residual_mix(x, &branch, self.config.mix)?;
                }
                if l < levels {
                    for (x, skip) in streams.iter().zip(skips.iter_mut()) {
                        skip[l] = Some(x.clone());
                    }
                }
            }
            let r = self.config.step_rate;
            for (z, y) in latents.iter_mut().zip(&streams) {
                *z = blend(z, y, r);
            }
        }

        frames
            .iter()
            .zip(latents)
            .map(|(f, x)| FrameFeatures::new(f.frame_index, f.grid_h, f.grid_w, x))
            .collect()
    }
}

/// Writes a square block onto the diagonal of a square matrix.
fn place_block(dst: &mut Matrix, offset: usize, block: &Matrix) {
    let n = dst.cols();
    let mut data = std::mem::replace(dst, Matrix::zeros(0, 0)).into_vec();
    for r in 0..block.rows() {
        for c in 0..block.cols() {
            data[(offset + r) * n + offset + c] = block.get(r, c);
        }
    }
    *dst = Matrix::from_raw(n, n, data);
}

fn unit_rms(v: Vec<f32>) -> Vec<f32> {
    let ms = v.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>() / v.len().max(1) as f64;
    let s = if ms > 0.0 { 1.0 / ms.sqrt() } else { 0.0 };
    v.into_iter().map(|x| (f64::from(x) * s) as f32).collect()
}

/// Scales each head's column block of each token to unit root-mean-square.
///
/// With per-head orthogonal query/key projections this bounds every logit by
/// the token's score against itself.
pub fn head_rms_norm(x: &Matrix, num_heads: usize) -> Matrix {
    let cols = x.cols();
    let hd = cols / num_heads;
    let mut out = Vec::with_capacity(x.rows() * cols);
    for r in 0..x.rows() {
        for block in x.row(r).chunks(hd) {
            let ms = block.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>() / hd as f64;
            let s = 1.0 / (ms + 1e-6).sqrt();
            out.extend(block.iter().map(|&v| (f64::from(v) * s) as f32));
        }
    }
    Matrix::from_raw(x.rows(), cols, out)
}

/// 2x2 token mean pooling of an `h x w` grid.
pub fn mean_pool(x: &Matrix, h: usize, w: usize) -> Matrix {
    let (oh, ow, d) = (h / 2, w / 2, x.cols());
    let mut out = vec![0.0f32; oh * ow * d];
    for y in 0..oh {
        for xx in 0..ow {
            let dst = &mut out[(y * ow + xx) * d..(y * ow + xx + 1) * d];
            let taps = [
                x.row(2 * y * w + 2 * xx),
                x.row(2 * y * w + 2 * xx + 1),
                x.row((2 * y + 1) * w + 2 * xx),
                x.row((2 * y + 1) * w + 2 * xx + 1),
            ];
            for (c, o) in dst.iter_mut().enumerate() {
                let s: f64 = taps.iter().map(|t| f64::from(t[c])).sum();
                *o = (s * 0.25) as f32;
            }
        }
    }
    Matrix::from_raw(oh * ow, d, out)
}

/// Nearest-neighbour 2x upsampling of an `h x w` grid.
pub fn upsample(x: &Matrix, h: usize, w: usize) -> Matrix {
    let (oh, ow, d) = (h * 2, w * 2, x.cols());
    let mut out = Vec::with_capacity(oh * ow * d);
    for y in 0..oh {
        for xx in 0..ow {
            out.extend_from_slice(x.row((y / 2) * w + xx / 2));
        }
    }
    Matrix::from_raw(oh * ow, d, out)
}

/// `(1 - w) * a + w * b`.
fn blend(a: &Matrix, b: &Matrix, w: f32) -> Matrix {
    let data = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(&x, &y)| (1.0 - w) * x + w * y)
        .collect();
    Matrix::from_raw(a.rows(), a.cols(), data)
}

fn residual_mix(x: &Matrix, branch: &Matrix, mix: f32) -> Result<Matrix> {
    let data = x
        .as_slice()
        .iter()
        .zip(branch.as_slice())
        .map(|(&a, &b)| (1.0 - mix) * a + mix * b.tanh())
        .collect();
    Matrix::new(x.rows(), x.cols(), data)
}
