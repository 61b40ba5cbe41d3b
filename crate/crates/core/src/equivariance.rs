//! Paired affine augmentation and an equivariance check for image editors.
//!
//! A warp is resize → affine → crop. The affine part acts about the centre of
//! the resized image and applies rotation, then shear, then scale, then
//! translation, folded into one matrix. Sampling is bilinear; reads outside
//! the resized image are zero.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::container::{self, Tensor};
use crate::error::{Error, Result};
use crate::geometry::Affine2;
use crate::rng::seeded;

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Row-major, channel-interleaved.
    pixels: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || !(channels == 1 || channels == 3) {
            return Err(Error::Parameter(format!(
                "image must be non-empty with 1 or 3 channels, got {height}x{width}x{channels}"
            )));
        }
        if pixels.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "{} values for a {height}x{width}x{channels} image",
                pixels.len()
            )));
        }
        if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Parameter("pixel values must lie in [0, 1]".into()));
        }
        Ok(Self {
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut px = Vec::with_capacity(height * width * channels);
        for r in 0..height {
            for c in 0..width {
                for ch in 0..channels {
                    px.push(f(r, c, ch));
                }
            }
        }
        Self::new(height, width, channels, px)
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, r: usize, c: usize, ch: usize) -> f32 {
        self.pixels[(r * self.width + c) * self.channels + ch]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor {
            dims: vec![self.height, self.width, self.channels],
            data: self.pixels.clone(),
        }
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let [h, w, c] = t.dims[..] else {
            return Err(Error::Format(format!("image tensor needs 3 dims, got {:?}", t.dims)));
        };
        Self::new(h, w, c, t.data.clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropParams {
    pub resize_to: usize,
    pub crop_size: usize,
    /// `(x, y)` of the crop's top-left corner in the resized image.
    pub crop_offset: (usize, usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub rotation_deg: f64,
    /// Fractions of the resized width / height.
    pub translate_frac: (f64, f64),
    pub scale: f64,
    pub shear_deg: (f64, f64),
    pub crop: CropParams,
}

impl AffineParams {
    /// No rotation, shear or translation, unit scale, and a crop that keeps
    /// the whole `size x size` image.
    pub fn identity(size: usize) -> Self {
        Self {
            rotation_deg: 0.0,
            translate_frac: (0.0, 0.0),
            scale: 1.0,
            shear_deg: (0.0, 0.0),
            crop: CropParams {
                resize_to: size,
                crop_size: size,
                crop_offset: (0, 0),
            },
        }
    }

    /// Forward map from resized-image pixel coordinates to warped ones.
    pub fn matrix(&self, width: usize, height: usize) -> Affine2 {
        let (cx, cy) = ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0);
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        let rot = Affine2::linear(c, -s, s, c);
        let shear = Affine2::linear(
            1.0,
            self.shear_deg.0.to_radians().tan(),
            self.shear_deg.1.to_radians().tan(),
            1.0,
        );
        let scale = Affine2::linear(self.scale, 0.0, 0.0, self.scale);
        let about = scale.then_after(&shear).then_after(&rot).about(cx, cy);
        Affine2::translation(
            self.translate_frac.0 * width as f64,
            self.translate_frac.1 * height as f64,
        )
        .then_after(&about)
    }

    /// Checks the augmentation ranges in `cfg`.
    pub fn within(&self, cfg: &AugmentConfig) -> bool {
        let (tx, ty) = self.translate_frac;
        let (sx, sy) = self.shear_deg;
        let (ox, oy) = self.crop.crop_offset;
        self.rotation_deg.abs() < cfg.max_rotation_deg
            && tx.abs() <= cfg.max_translate_frac
            && ty.abs() <= cfg.max_translate_frac
            && (cfg.scale_range.0..=cfg.scale_range.1).contains(&self.scale)
            && sx.abs() <= cfg.max_shear_deg
            && sy.abs() <= cfg.max_shear_deg
            && self.crop.crop_size <= self.crop.resize_to
            && ox + self.crop.crop_size <= self.crop.resize_to
            && oy + self.crop.crop_size <= self.crop.resize_to
    }
}

/// Sampling ranges. Defaults: rotation under 5°, translation ±5%, scale
/// 0.95–1.05, shear ±5° per axis, resize to 288 then crop 256.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub max_rotation_deg: f64,
    pub max_translate_frac: f64,
    pub scale_range: (f64, f64),
    pub max_shear_deg: f64,
    pub resize_to: usize,
    pub crop_size: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            max_rotation_deg: 5.0,
            max_translate_frac: 0.05,
            scale_range: (0.95, 1.05),
            max_shear_deg: 5.0,
            resize_to: 288,
            crop_size: 256,
        }
    }
}

pub fn sample_affine(seed: u64) -> AffineParams {
    sample_affine_with(seed, &AugmentConfig::default())
}

pub fn sample_affine_with(seed: u64, cfg: &AugmentConfig) -> AffineParams {
    let mut rng = seeded(seed);
    let r = cfg.max_rotation_deg;
    // open interval: the rotation bound is strict
    let rotation_deg = loop {
        if r <= 0.0 {
            break 0.0;
        }
        let x: f64 = rng.random_range(-r..r);
        if x.abs() < r {
            break x;
        }
    };
    let t = cfg.max_translate_frac;
    let translate_frac = (rng.random_range(-t..=t), rng.random_range(-t..=t));
    let scale = rng.random_range(cfg.scale_range.0..=cfg.scale_range.1);
    let sh = cfg.max_shear_deg;
    let shear_deg = (rng.random_range(-sh..=sh), rng.random_range(-sh..=sh));
    let slack = cfg.resize_to.saturating_sub(cfg.crop_size);
    let crop_offset = (rng.random_range(0..=slack), rng.random_range(0..=slack));
    AffineParams {
        rotation_deg,
        translate_frac,
        scale,
        shear_deg,
        crop: CropParams {
            resize_to: cfg.resize_to,
            crop_size: cfg.crop_size,
            crop_offset,
        },
    }
}

/// Bilinear resize with half-pixel centres and edge clamping.
pub fn resize_bilinear(img: &Image, height: usize, width: usize) -> Image {
    if height == img.height && width == img.width {
        return img.clone();
    }
    let ch = img.channels;
    let (sy, sx) = (img.height as f64 / height as f64, img.width as f64 / width as f64);
    let mut out = Vec::with_capacity(height * width * ch);
    for r in 0..height {
        let y = ((r as f64 + 0.5) * sy - 0.5).clamp(0.0, (img.height - 1) as f64);
        let (y0, fy) = (y.floor() as usize, y - y.floor());
        let y1 = (y0 + 1).min(img.height - 1);
        for c in 0..width {
            let x = ((c as f64 + 0.5) * sx - 0.5).clamp(0.0, (img.width - 1) as f64);
            let (x0, fx) = (x.floor() as usize, x - x.floor());
            let x1 = (x0 + 1).min(img.width - 1);
            for k in 0..ch {
                let p = |yy: usize, xx: usize| f64::from(img.get(yy, xx, k));
                let v = (1.0 - fy) * ((1.0 - fx) * p(y0, x0) + fx * p(y0, x1))
                    + fy * ((1.0 - fx) * p(y1, x0) + fx * p(y1, x1));
                out.push((v as f32).clamp(0.0, 1.0));
            }
        }
    }
    Image {
        height,
        width,
        channels: ch,
        pixels: out,
    }
}

/// Bilinear read at `(x, y)` with zeros outside the image.
fn sample_zero_pad(img: &Image, x: f64, y: f64, k: usize) -> f64 {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let tap = |xx: f64, yy: f64| -> f64 {
        if xx < 0.0 || yy < 0.0 || xx >= img.width as f64 || yy >= img.height as f64 {
            0.0
        } else {
            f64::from(img.get(yy as usize, xx as usize, k))
        }
    };
    (1.0 - fy) * ((1.0 - fx) * tap(x0, y0) + fx * tap(x0 + 1.0, y0))
        + fy * ((1.0 - fx) * tap(x0, y0 + 1.0) + fx * tap(x0 + 1.0, y0 + 1.0))
}

fn check_crop(crop: &CropParams) -> Result<()> {
    let (ox, oy) = crop.crop_offset;
    if crop.resize_to == 0
        || crop.crop_size == 0
        || ox + crop.crop_size > crop.resize_to
        || oy + crop.crop_size > crop.resize_to
    {
        return Err(Error::Parameter(format!(
            "crop {} at {:?} does not fit a {} image",
            crop.crop_size, crop.crop_offset, crop.resize_to
        )));
    }
    Ok(())
}

pub fn warp_image(img: &Image, params: &AffineParams) -> Result<Image> {
    let crop = params.crop;
    check_crop(&crop)?;
    let resized = resize_bilinear(img, crop.resize_to, crop.resize_to);
    let fwd = params.matrix(crop.resize_to, crop.resize_to);
    let inv = fwd
        .inverse()
        .ok_or_else(|| Error::Parameter("affine transform is singular".into()))?;
    let (n, ch) = (crop.crop_size, img.channels);
    let (ox, oy) = crop.crop_offset;
    let mut out = Vec::with_capacity(n * n * ch);
    for r in 0..n {
        for c in 0..n {
            let (dx, dy) = ((c + ox) as f64, (r + oy) as f64);
            if fwd.is_identity() {
                for k in 0..ch {
                    out.push(resized.get(r + oy, c + ox, k));
                }
                continue;
            }
            let (sx, sy) = inv.apply(dx, dy);
            for k in 0..ch {
                out.push((sample_zero_pad(&resized, sx, sy, k) as f32).clamp(0.0, 1.0));
            }
        }
    }
    Ok(Image {
        height: n,
        width: n,
        channels: ch,
        pixels: out,
    })
}

/// Output pixels whose inverse-mapped source lies inside the resized image.
pub fn valid_mask(params: &AffineParams) -> Result<Vec<bool>> {
    let crop = params.crop;
    check_crop(&crop)?;
    let size = crop.resize_to;
    let inv = params
        .matrix(size, size)
        .inverse()
        .ok_or_else(|| Error::Parameter("affine transform is singular".into()))?;
    let hi = (size - 1) as f64;
    let (ox, oy) = crop.crop_offset;
    let mut mask = Vec::with_capacity(crop.crop_size * crop.crop_size);
    for r in 0..crop.crop_size {
        for c in 0..crop.crop_size {
            let (x, y) = inv.apply((c + ox) as f64, (r + oy) as f64);
            mask.push((0.0..=hi).contains(&x) && (0.0..=hi).contains(&y));
        }
    }
    Ok(mask)
}

/// Warps both images with one sampled transform.
pub fn augment_pair(src: &Image, edited: &Image, rng_seed: u64) -> Result<(Image, Image, AffineParams)> {
    augment_pair_with(src, edited, rng_seed, &AugmentConfig::default())
}

pub fn augment_pair_with(
    src: &Image,
    edited: &Image,
    rng_seed: u64,
    cfg: &AugmentConfig,
) -> Result<(Image, Image, AffineParams)> {
    if (src.height, src.width, src.channels) != (edited.height, edited.width, edited.channels) {
        return Err(Error::Shape(format!(
            "pair sizes differ: {}x{}x{} vs {}x{}x{}",
            src.height, src.width, src.channels, edited.height, edited.width, edited.channels
        )));
    }
    let params = sample_affine_with(rng_seed, cfg);
    Ok((warp_image(src, &params)?, warp_image(edited, &params)?, params))
}

/// Mean absolute difference between `editor(g(src))` and `g(editor(src))` over
/// the valid region of `g`.
pub fn equivariance_deviation<E>(editor: &E, src: &Image, params: &AffineParams) -> Result<f64>
where
    E: Fn(&Image) -> Image + ?Sized,
{
    let a = editor(&warp_image(src, params)?);
    let b = warp_image(&editor(src), params)?;
    if (a.height, a.width, a.channels) != (b.height, b.width, b.channels) {
        return Err(Error::Shape("editor changed the image size".into()));
    }
    let mask = valid_mask(params)?;
    let ch = a.channels;
    let (mut sum, mut count) = (0.0f64, 0usize);
    for (p, &ok) in mask.iter().enumerate() {
        if ok {
            for k in 0..ch {
                sum += (f64::from(a.pixels[p * ch + k]) - f64::from(b.pixels[p * ch + k])).abs();
            }
            count += ch;
        }
    }
    if count == 0 {
        return Err(Error::Parameter("transform leaves no valid pixels".into()));
    }
    Ok(sum / count as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquivarianceReport {
    pub deviations: Vec<f64>,
    pub mean: f64,
    pub max: f64,
    pub tol: f64,
    pub pass: bool,
}

/// Measures the editor against `n_trials` transforms seeded `base_seed + i`.
pub fn verify_equivariance<E>(
    editor: &E,
    src: &Image,
    n_trials: usize,
    tol: f64,
    base_seed: u64,
    cfg: &AugmentConfig,
) -> Result<EquivarianceReport>
where
    E: Fn(&Image) -> Image + ?Sized,
{
    if n_trials == 0 {
        return Err(Error::Parameter("need at least one trial".into()));
    }
    let deviations = (0..n_trials)
        .map(|i| equivariance_deviation(editor, src, &sample_affine_with(base_seed + i as u64, cfg)))
        .collect::<Result<Vec<_>>>()?;
    let mean = deviations.iter().sum::<f64>() / n_trials as f64;
    let max = deviations.iter().cloned().fold(0.0, f64::max);
    Ok(EquivarianceReport {
        deviations,
        mean,
        max,
        tol,
        pass: max <= tol,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub index: usize,
    pub seed: u64,
    pub params: AffineParams,
}

/// Writes each augmented pair as `item_NNNNN_{src,edited}.apft` plus a
/// `manifest.jsonl` with one entry per item. Item `i` uses seed `base_seed + i`.
pub fn emit_augmented_dataset(
    pairs: &[(Image, Image)],
    base_seed: u64,
    cfg: &AugmentConfig,
    out_dir: impl AsRef<Path>,
) -> Result<Vec<ManifestEntry>> {
    let dir = out_dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut manifest = fs::File::create(dir.join("manifest.jsonl"))?;
    let mut entries = Vec::with_capacity(pairs.len());
    for (index, (src, edited)) in pairs.iter().enumerate() {
        let seed = base_seed + index as u64;
        let (a, b, params) = augment_pair_with(src, edited, seed, cfg)?;
        container::write(dir.join(format!("item_{index:05}_src.apft")), &a.to_tensor())?;
        container::write(dir.join(format!("item_{index:05}_edited.apft")), &b.to_tensor())?;
        let entry = ManifestEntry { index, seed, params };
        serde_json::to_writer(&mut manifest, &entry)?;
        manifest.write_all(b"\n")?;
        entries.push(entry);
    }
    Ok(entries)
}

/// Mirror left-right.
pub fn flip_horizontal(img: &Image) -> Image {
    let mut out = Vec::with_capacity(img.pixels.len());
    for r in 0..img.height {
        for c in (0..img.width).rev() {
            for k in 0..img.channels {
                out.push(img.get(r, c, k));
            }
        }
    }
    Image {
        pixels: out,
        ..img.clone()
    }
}

/// `1 - p` per pixel.
pub fn invert(img: &Image) -> Image {
    Image {
        pixels: img.pixels.iter().map(|p| 1.0 - p).collect(),
        ..img.clone()
    }
}
