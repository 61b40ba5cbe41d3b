//! Synthetic clips with exact ground-truth motion.
//!
//! A clip is a feature field on the plane seen through a moving camera. Frame
//! `t` carries the map `A_t` taking frame-0 pixel coordinates to frame-`t`
//! pixel coordinates; the token centred at `c` shows the field at
//! `A_t^{-1}(c)`. The forward correspondence from frame `t` to frame `u` is
//! therefore `A_u ∘ A_t^{-1}`, exact by construction.

use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attention::FrameFeatures;
use crate::container::{self, Tensor};
use crate::equivariance::{AffineParams, Image};
use crate::error::{Error, Result};
use crate::geometry::Affine2;
use crate::propagation::{frames_from_tensor, frames_to_tensor};
use crate::rng::{derive, seeded};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum FeatureKind {
    /// Paired cos/sin random Fourier features of the position, scaled to unit
    /// RMS. Feature dot products depend only on displacement and fall off
    /// over roughly `bandwidth_tokens` tokens.
    Fourier { bandwidth_tokens: f64 },
    /// One basis vector per token cell on a periodic grid. With width 0 every
    /// token is an exact one-hot; otherwise Gaussian bumps of that width.
    /// Needs `dim >= grid_h * grid_w`.
    Basis { width_tokens: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum MotionKind {
    Static,
    /// Whole-token translation per frame.
    IntegerShift {
        dx: i32,
        dy: i32,
    },
    /// Translation per frame in (possibly fractional) tokens.
    SubTokenShift {
        dx: f64,
        dy: f64,
    },
    /// The same affine step applied every frame; the crop fields are unused.
    AffinePath {
        step: AffineParams,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipSpec {
    pub seed: u64,
    pub n_frames: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub dim: usize,
    /// Pixel coordinate extent of a frame; token stride is `image_size / grid_w`.
    pub image_size: usize,
    pub features: FeatureKind,
    pub motion: MotionKind,
    /// Side of the optional rendered grayscale images.
    pub render_images: Option<usize>,
}

impl Default for ClipSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_frames: 8,
            grid_h: 32,
            grid_w: 32,
            dim: 64,
            image_size: 256,
            features: FeatureKind::Fourier { bandwidth_tokens: 1.0 },
            motion: MotionKind::Static,
            render_images: None,
        }
    }
}

impl ClipSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_frames == 0 || self.grid_h == 0 || self.grid_w == 0 || self.dim == 0 {
            return Err(Error::Parameter("frames, grid and dim must be positive".into()));
        }
        if self.image_size == 0
            || !self.image_size.is_multiple_of(self.grid_w)
            || !self.image_size.is_multiple_of(self.grid_h)
        {
            return Err(Error::Parameter(format!(
                "image size {} must be a multiple of the {}x{} grid",
                self.image_size, self.grid_h, self.grid_w
            )));
        }
        match self.features {
            FeatureKind::Fourier { bandwidth_tokens } => {
                if !self.dim.is_multiple_of(2) {
                    return Err(Error::Parameter("Fourier features need an even dim".into()));
                }
                if !(bandwidth_tokens.is_finite() && bandwidth_tokens > 0.0) {
                    return Err(Error::Parameter("bandwidth must be positive".into()));
                }
            }
            FeatureKind::Basis { width_tokens } => {
                if self.dim < self.grid_h * self.grid_w {
                    return Err(Error::Parameter(format!(
                        "basis features need dim >= {} tokens, got {}",
                        self.grid_h * self.grid_w,
                        self.dim
                    )));
                }
                if !(width_tokens.is_finite() && width_tokens >= 0.0) {
                    return Err(Error::Parameter("basis width must be non-negative".into()));
                }
            }
        }
        if self.render_images == Some(0) {
            return Err(Error::Parameter("rendered image size must be positive".into()));
        }
        Ok(())
    }

    pub fn stride(&self) -> (f64, f64) {
        (
            self.image_size as f64 / self.grid_w as f64,
            self.image_size as f64 / self.grid_h as f64,
        )
    }

    /// `A_t` for every frame.
    pub fn motion_path(&self) -> Result<Vec<Affine2>> {
        let (sx, sy) = self.stride();
        let step = match &self.motion {
            MotionKind::Static => Affine2::IDENTITY,
            MotionKind::IntegerShift { dx, dy } => Affine2::translation(f64::from(*dx) * sx, f64::from(*dy) * sy),
            MotionKind::SubTokenShift { dx, dy } => Affine2::translation(dx * sx, dy * sy),
            MotionKind::AffinePath { step } => step.matrix(self.image_size, self.image_size),
        };
        if step.inverse().is_none() {
            return Err(Error::Parameter("motion step is singular".into()));
        }
        let mut path = Vec::with_capacity(self.n_frames);
        let mut a = Affine2::IDENTITY;
        for t in 0..self.n_frames {
            if t > 0 {
                a = match &self.motion {
                    // exact multiples rather than accumulated sums
                    MotionKind::IntegerShift { dx, dy } => {
                        Affine2::translation(f64::from(*dx) * sx * t as f64, f64::from(*dy) * sy * t as f64)
                    }
                    MotionKind::SubTokenShift { dx, dy } => {
                        Affine2::translation(dx * sx * t as f64, dy * sy * t as f64)
                    }
                    _ => step.then_after(&a),
                };
            }
            path.push(a);
        }
        Ok(path)
    }
}

/// Position-to-feature function shared by every frame of a clip.
struct Field {
    kind: FeatureKind,
    grid: (usize, usize),
    dim: usize,
    /// Fourier: `(wx, wy, phase)` per pair, frequencies in radians per token.
    waves: Vec<(f64, f64, f64)>,
}

impl Field {
    fn new(spec: &ClipSpec) -> Self {
        let mut rng = seeded(derive(spec.seed, 0xf1e1d));
        let waves = match spec.features {
            FeatureKind::Fourier { bandwidth_tokens } => (0..spec.dim / 2)
                .map(|_| {
                    let wx: f64 = StandardNormal.sample(&mut rng);
                    let wy: f64 = StandardNormal.sample(&mut rng);
                    let phase = rng.random_range(0.0..TAU);
                    (wx / bandwidth_tokens, wy / bandwidth_tokens, phase)
                })
                .collect(),
            FeatureKind::Basis { .. } => Vec::new(),
        };
        Self {
            kind: spec.features.clone(),
            grid: (spec.grid_h, spec.grid_w),
            dim: spec.dim,
            waves,
        }
    }

    /// Features at `(u, v)` in token units.
    fn at(&self, u: f64, v: f64, out: &mut Vec<f32>) {
        match self.kind {
            FeatureKind::Fourier { .. } => {
                for &(wx, wy, ph) in &self.waves {
                    let (s, c) = (wx * u + wy * v + ph).sin_cos();
                    out.push((c * std::f64::consts::SQRT_2) as f32);
                    out.push((s * std::f64::consts::SQRT_2) as f32);
                }
            }
            FeatureKind::Basis { width_tokens } => {
                let (h, w) = self.grid;
                let start = out.len();
                out.resize(start + self.dim, 0.0);
                let cells = &mut out[start..];
                if width_tokens == 0.0 {
                    let ix = u.floor().rem_euclid(w as f64) as usize;
                    let iy = v.floor().rem_euclid(h as f64) as usize;
                    cells[iy * w + ix] = 1.0;
                } else {
                    let wrap = |d: f64, n: usize| {
                        let d = d.rem_euclid(n as f64);
                        d.min(n as f64 - d)
                    };
                    for iy in 0..h {
                        let dy = wrap(v - (iy as f64 + 0.5), h);
                        for ix in 0..w {
                            let dx = wrap(u - (ix as f64 + 0.5), w);
                            let r2 = (dx * dx + dy * dy) / (width_tokens * width_tokens);
                            cells[iy * w + ix] = (-0.5 * r2).exp() as f32;
                        }
                    }
                }
            }
        }
    }
}

/// Grayscale texture on the plane, values in `[0, 1]`.
struct Texture {
    waves: Vec<(f64, f64, f64)>,
}

impl Texture {
    fn new(seed: u64, image_size: usize) -> Self {
        let mut rng = seeded(derive(seed, 0x7e47));
        let scale = TAU / image_size as f64;
        let waves = (0..12)
            .map(|_| {
                let fx = rng.random_range(1.0..8.0) * scale * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                let fy = rng.random_range(1.0..8.0) * scale * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                (fx, fy, rng.random_range(0.0..TAU))
            })
            .collect();
        Self { waves }
    }

    fn at(&self, x: f64, y: f64) -> f32 {
        let s: f64 = self.waves.iter().map(|&(fx, fy, p)| (fx * x + fy * y + p).cos()).sum();
        (0.5 + 0.5 * s / self.waves.len() as f64).clamp(0.0, 1.0) as f32
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticClip {
    pub spec: ClipSpec,
    pub frames: Vec<FrameFeatures>,
    pub images: Option<Vec<Image>>,
    /// `A_t` per frame.
    pub motion: Vec<Affine2>,
}

#[derive(Serialize, Deserialize)]
struct ClipMeta {
    spec: ClipSpec,
    motion: Vec<Affine2>,
}

impl SyntheticClip {
    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }

    /// Exact pixel map from frame `from` to frame `to`.
    pub fn forward_map(&self, from: usize, to: usize) -> Result<Affine2> {
        let n = self.motion.len();
        if from >= n || to >= n {
            return Err(Error::Bounds(format!("frame pair ({from}, {to}) outside {n} frames")));
        }
        let inv = self.motion[from]
            .inverse()
            .ok_or_else(|| Error::Parameter("motion is singular".into()))?;
        Ok(self.motion[to].then_after(&inv))
    }

    /// The forward map evaluated at every pixel centre, row-major over an
    /// `image_size x image_size` grid, as `[x, y]` pairs.
    pub fn dense_forward_map(&self, from: usize, to: usize) -> Result<Vec<[f64; 2]>> {
        let m = self.forward_map(from, to)?;
        let n = self.spec.image_size;
        let mut out = Vec::with_capacity(n * n);
        for y in 0..n {
            for x in 0..n {
                let (u, v) = m.apply(x as f64 + 0.5, y as f64 + 0.5);
                out.push([u, v]);
            }
        }
        Ok(out)
    }

    /// Writes `features.apft`, `clip.json` and, when rendered, `images.apft`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        container::write(dir.join("features.apft"), &frames_to_tensor(&self.frames)?)?;
        if let Some(images) = &self.images {
            let side = self.spec.render_images.unwrap_or(0);
            let data = images.iter().flat_map(|i| i.pixels().iter().copied()).collect();
            container::write(
                dir.join("images.apft"),
                &Tensor::new(vec![images.len(), side, side, 1], data)?,
            )?;
        }
        let meta = ClipMeta {
            spec: self.spec.clone(),
            motion: self.motion.clone(),
        };
        fs::write(dir.join("clip.json"), serde_json::to_vec_pretty(&meta)?)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta: ClipMeta = serde_json::from_slice(&fs::read(dir.join("clip.json"))?)?;
        meta.spec.validate()?;
        let frames = frames_from_tensor(&container::read(dir.join("features.apft"))?)?;
        if frames.len() != meta.motion.len() {
            return Err(Error::Format(format!(
                "{} frames but {} motion entries",
                frames.len(),
                meta.motion.len()
            )));
        }
        let images = if dir.join("images.apft").exists() {
            let t = container::read(dir.join("images.apft"))?;
            let [n, h, w, c] = t.dims[..] else {
                return Err(Error::Format(format!("image stack needs 4 dims, got {:?}", t.dims)));
            };
            let per = h * w * c;
            Some(
                (0..n)
                    .map(|i| Image::new(h, w, c, t.data[i * per..(i + 1) * per].to_vec()))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        Ok(Self {
            spec: meta.spec,
            frames,
            images,
            motion: meta.motion,
        })
    }
}

pub fn generate_clip(spec: &ClipSpec) -> Result<SyntheticClip> {
    spec.validate()?;
    let motion = spec.motion_path()?;
    let (sx, sy) = spec.stride();
    let size = spec.image_size as f64;
    let field = Field::new(spec);
    let texture = spec.render_images.map(|_| Texture::new(spec.seed, spec.image_size));
    let mut frames = Vec::with_capacity(spec.n_frames);
    let mut images = spec.render_images.map(|_| Vec::with_capacity(spec.n_frames));
    for (t, a) in motion.iter().enumerate() {
        let inv = a
            .inverse()
            .ok_or_else(|| Error::Parameter("motion is singular".into()))?;
        let mut data = Vec::with_capacity(spec.grid_h * spec.grid_w * spec.dim);
        let mut visible = false;
        for ty in 0..spec.grid_h {
            for tx in 0..spec.grid_w {
                let (x, y) = inv.apply((tx as f64 + 0.5) * sx, (ty as f64 + 0.5) * sy);
                visible |= (0.0..size).contains(&x) && (0.0..size).contains(&y);
                field.at(x / sx, y / sy, &mut data);
            }
        }
        if !visible {
            return Err(Error::Parameter(format!(
                "motion moves the scene fully out of view by frame {t}"
            )));
        }
        let tokens = Matrix::new(spec.grid_h * spec.grid_w, spec.dim, data)?;
        frames.push(FrameFeatures::new(t, spec.grid_h, spec.grid_w, tokens)?);
        if let (Some(side), Some(tex), Some(out)) = (spec.render_images, &texture, images.as_mut()) {
            let px = size / side as f64;
            let img = Image::from_fn(side, side, 1, |r, c, _| {
                let (x, y) = inv.apply((c as f64 + 0.5) * px, (r as f64 + 0.5) * px);
                tex.at(x, y)
            })?;
            out.push(img);
        }
    }
    Ok(SyntheticClip {
        spec: spec.clone(),
        frames,
        images,
        motion,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::equivariance::{warp_image, CropParams};

    fn small(motion: MotionKind) -> ClipSpec {
        ClipSpec {
            seed: 3,
            n_frames: 4,
            grid_h: 8,
            grid_w: 8,
            dim: 16,
            image_size: 64,
            motion,
            ..ClipSpec::default()
        }
    }

    #[test]
    fn static_clip_is_constant_with_identity_motion() {
        let clip = generate_clip(&small(MotionKind::Static)).unwrap();
        for f in &clip.frames[1..] {
            assert_eq!(f.tokens(), clip.frames[0].tokens());
        }
        assert!(clip.forward_map(0, 3).unwrap().is_identity());
        let dense = clip.dense_forward_map(1, 2).unwrap();
        assert_eq!(dense[65], [1.5, 1.5]);
    }

    #[test]
    fn integer_shift_is_constant_offset() {
        let clip = generate_clip(&small(MotionKind::IntegerShift { dx: 2, dy: 0 })).unwrap();
        let dense = clip.dense_forward_map(0, 1).unwrap();
        for (i, [x, y]) in dense.iter().enumerate() {
            let (px, py) = ((i % 64) as f64 + 0.5, (i / 64) as f64 + 0.5);
            assert_eq!((*x - px, *y - py), (16.0, 0.0));
        }
        // token content moves two cells right
        let (a, b) = (&clip.frames[0], &clip.frames[1]);
        for ty in 0..8 {
            for tx in 0..6 {
                assert_eq!(a.tokens().row(ty * 8 + tx), b.tokens().row(ty * 8 + tx + 2));
            }
        }
    }

    #[test]
    fn distinct_tokens_are_orthogonal_one_hots() {
        let spec = ClipSpec {
            dim: 16,
            grid_h: 4,
            grid_w: 4,
            image_size: 64,
            features: FeatureKind::Basis { width_tokens: 0.0 },
            ..small(MotionKind::Static)
        };
        let f = &generate_clip(&spec).unwrap().frames[0];
        for i in 0..16 {
            let row = f.tokens().row(i);
            assert_eq!(row.iter().sum::<f32>(), 1.0);
            assert_eq!(row[i], 1.0);
        }
    }

    #[test]
    fn fourier_features_have_unit_rms_and_stationary_kernel() {
        let clip = generate_clip(&small(MotionKind::Static)).unwrap();
        let t = clip.frames[0].tokens();
        for r in 0..t.rows() {
            let ms: f32 = t.row(r).iter().map(|x| x * x).sum::<f32>() / 16.0;
            assert!((ms - 1.0).abs() < 1e-5);
        }
        let dot = |a: usize, b: usize| -> f32 { t.row(a).iter().zip(t.row(b)).map(|(x, y)| x * y).sum() };
        // same displacement, different location
        assert!((dot(0, 1) - dot(9, 10)).abs() < 1e-4);
    }

    #[test]
    fn regeneration_is_bit_identical() {
        let spec = ClipSpec {
            render_images: Some(16),
            ..small(MotionKind::SubTokenShift { dx: 0.5, dy: -0.25 })
        };
        assert_eq!(generate_clip(&spec).unwrap(), generate_clip(&spec).unwrap());
        let other = ClipSpec {
            seed: 4,
            ..spec.clone()
        };
        assert_ne!(
            generate_clip(&other).unwrap().frames,
            generate_clip(&spec).unwrap().frames
        );
    }

    #[test]
    fn leaving_the_view_is_rejected() {
        let spec = ClipSpec {
            n_frames: 6,
            ..small(MotionKind::IntegerShift { dx: 3, dy: 0 })
        };
        assert!(matches!(generate_clip(&spec), Err(Error::Parameter(_))));
    }

    fn step() -> AffineParams {
        AffineParams {
            rotation_deg: 2.0,
            translate_frac: (0.02, -0.01),
            scale: 1.01,
            shear_deg: (1.0, 0.0),
            crop: CropParams {
                resize_to: 64,
                crop_size: 64,
                crop_offset: (0, 0),
            },
        }
    }

    #[test]
    fn affine_path_composes_step_matrices() {
        let clip = generate_clip(&small(MotionKind::AffinePath { step: step() })).unwrap();
        let m = step().matrix(64, 64).m;
        // explicit 3x3 product m * m
        let mut sq = [[0.0f64; 3]; 2];
        for r in 0..2 {
            for c in 0..3 {
                sq[r][c] = m[r][0] * m[0][c] + m[r][1] * m[1][c] + if c == 2 { m[r][2] } else { 0.0 };
            }
        }
        let f = clip.forward_map(1, 3).unwrap().m;
        for r in 0..2 {
            for c in 0..3 {
                assert!((f[r][c] - sq[r][c]).abs() < 1e-5, "{f:?} vs {sq:?}");
            }
        }
    }

    #[test]
    fn affine_path_agrees_with_image_warp() {
        // a bright pixel warped by one step lands where the forward map says
        let img = Image::from_fn(64, 64, 1, |r, c, _| if (r, c) == (20, 40) { 1.0 } else { 0.0 }).unwrap();
        let warped = warp_image(&img, &step()).unwrap();
        let clip = generate_clip(&small(MotionKind::AffinePath { step: step() })).unwrap();
        let (x, y) = clip.forward_map(0, 1).unwrap().apply(40.0, 20.0);
        let (mut best, mut at) = (0.0, (0, 0));
        for r in 0..64 {
            for c in 0..64 {
                if warped.get(r, c, 0) > best {
                    best = warped.get(r, c, 0);
                    at = (c, r);
                }
            }
        }
        assert!(
            (at.0 as f64 - x).abs() <= 1.0 && (at.1 as f64 - y).abs() <= 1.0,
            "{at:?} vs ({x}, {y})"
        );
    }

    #[test]
    fn images_render_in_range_and_roundtrip() {
        let spec = ClipSpec {
            render_images: Some(16),
            ..small(MotionKind::SubTokenShift { dx: 0.5, dy: 0.0 })
        };
        let clip = generate_clip(&spec).unwrap();
        let images = clip.images.as_ref().unwrap();
        assert_eq!(images.len(), 4);
        assert!(images
            .iter()
            .all(|i| i.pixels().iter().all(|p| (0.0..=1.0).contains(p))));
        let dir = tempfile::tempdir().unwrap();
        clip.save(dir.path()).unwrap();
        assert_eq!(SyntheticClip::load(dir.path()).unwrap(), clip);
    }

    #[test]
    fn invalid_specs() {
        let bad_basis = ClipSpec {
            features: FeatureKind::Basis { width_tokens: 0.0 },
            ..small(MotionKind::Static)
        };
        assert!(generate_clip(&bad_basis).is_err());
        assert!(generate_clip(&ClipSpec {
            image_size: 60,
            ..small(MotionKind::Static)
        })
        .is_err());
        assert!(generate_clip(&ClipSpec {
            dim: 15,
            ..small(MotionKind::Static)
        })
        .is_err());
    }
}
