//! Point correspondence read off attention maps, and δ position accuracy.
//!
//! A query pixel selects the token containing it; the prediction is the
//! centre of the highest-scoring token in that query's attention row.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::{head_avg_scores, AttentionMap, FrameFeatures};
use crate::error::{Error, Result};
use crate::network::{Context, ToyEditNetwork};
use crate::synth::SyntheticClip;
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackQuery {
    pub point: (f64, f64),
    pub source_frame: usize,
    pub target_frame: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackResult {
    pub point: (f64, f64),
    pub token_index: usize,
    pub score: f32,
}

/// Flat token index containing pixel `(x, y)`.
pub fn pixel_to_token(point: (f64, f64), grid: (usize, usize), image_size: usize) -> Result<usize> {
    let (h, w) = grid;
    let (x, y) = point;
    let size = image_size as f64;
    if !(0.0..size).contains(&x) || !(0.0..size).contains(&y) {
        return Err(Error::Bounds(format!(
            "query ({x}, {y}) outside a {image_size}px image"
        )));
    }
    let tx = ((x / (size / w as f64)) as usize).min(w - 1);
    let ty = ((y / (size / h as f64)) as usize).min(h - 1);
    Ok(ty * w + tx)
}

/// Pixel centre of a flat token index.
pub fn token_center(token: usize, grid: (usize, usize), image_size: usize) -> (f64, f64) {
    let (h, w) = grid;
    let (sx, sy) = (image_size as f64 / w as f64, image_size as f64 / h as f64);
    (((token % w) as f64 + 0.5) * sx, ((token / w) as f64 + 0.5) * sy)
}

/// First index of the maximum.
fn argmax(row: &[f32]) -> (usize, f32) {
    let mut best = (0, row[0]);
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

pub fn track_point(
    query: &TrackQuery,
    map: &AttentionMap,
    grid: (usize, usize),
    image_size: usize,
) -> Result<TrackResult> {
    let (h, w) = grid;
    let n = h * w;
    if n == 0 || !image_size.is_multiple_of(w) || !image_size.is_multiple_of(h) {
        return Err(Error::Parameter(format!(
            "image size {image_size} is not a multiple of the {h}x{w} grid"
        )));
    }
    if map.scores.rows() != n || map.scores.cols() != n {
        return Err(Error::Shape(format!(
            "map is {:?}, grid has {n} tokens",
            map.scores.shape()
        )));
    }
    let src = pixel_to_token(query.point, grid, image_size)?;
    let (token_index, score) = argmax(map.scores.row(src));
    Ok(TrackResult {
        point: token_center(token_index, grid, image_size),
        token_index,
        score,
    })
}

/// `(predicted, ground truth)` pixel positions.
pub type PointPair = ((f64, f64), (f64, f64));

/// Fraction of `(predicted, truth)` pairs no further apart than `delta`.
pub fn position_accuracy(predictions: &[PointPair], delta: f64) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::Parameter("no predictions to score".into()));
    }
    if delta.is_nan() || delta <= 0.0 {
        return Err(Error::Parameter(format!("delta must be positive, got {delta}")));
    }
    let hits = predictions
        .iter()
        .filter(|((px, py), (gx, gy))| (px - gx).hypot(py - gy) <= delta)
        .count();
    Ok(hits as f64 / predictions.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub image_size: usize,
    pub thresholds: Vec<f64>,
    /// `None` evaluates every layer.
    pub layers: Option<Vec<usize>>,
    /// `None` evaluates every step.
    pub steps: Option<Vec<usize>>,
    /// Queries sit on the full-resolution token centre nearest the middle of
    /// each `query_step x query_step` block, which keeps them within a few
    /// pixels of coarser token centres too.
    pub query_step: usize,
    /// Frame pairs are `(t, t + 1)` and `(t, t + pair_stride)`.
    pub pair_stride: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            image_size: 256,
            thresholds: vec![16.0, 32.0],
            layers: None,
            steps: None,
            query_step: 4,
            pair_stride: 4,
        }
    }
}

impl EvalConfig {
    /// Consecutive and strided pairs; a single frame is tracked against itself.
    pub fn frame_pairs(&self, n_frames: usize) -> Vec<(usize, usize)> {
        if n_frames == 1 {
            return vec![(0, 0)];
        }
        let mut pairs: Vec<(usize, usize)> = (0..n_frames - 1).map(|t| (t, t + 1)).collect();
        if self.pair_stride > 1 {
            pairs.extend((0..n_frames.saturating_sub(self.pair_stride)).map(|t| (t, t + self.pair_stride)));
        }
        pairs
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackingRow {
    pub layer: usize,
    pub step: usize,
    pub delta: f64,
    pub accuracy: f64,
    pub n_points: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackingTable {
    pub rows: Vec<TrackingRow>,
}

impl TrackingTable {
    pub fn accuracy(&self, layer: usize, step: usize, delta: f64) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.layer == layer && r.step == step && r.delta == delta)
            .map(|r| r.accuracy)
    }

    /// Mean accuracy over steps for one layer and threshold.
    pub fn layer_mean(&self, layer: usize, delta: f64) -> Option<f64> {
        let v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.layer == layer && r.delta == delta)
            .map(|r| r.accuracy)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,step,delta,accuracy,n_points\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{}", r.layer, r.step, r.delta, r.accuracy, r.n_points);
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// One query: source frame, target frame, query pixel, ground-truth pixel.
struct Probe {
    pair: usize,
    point: (f64, f64),
    truth: (f64, f64),
}

/// Tracks a grid of query points between frame pairs of `clip` using the
/// attention the network computes while processing the unedited clip, and
/// scores every evaluated `(layer, step)` at each threshold.
pub fn evaluate_tracking(clip: &SyntheticClip, network: &ToyEditNetwork, cfg: &EvalConfig) -> Result<TrackingTable> {
    if cfg.image_size != clip.spec.image_size {
        return Err(Error::Parameter(format!(
            "evaluation size {} differs from the clip's {}",
            cfg.image_size, clip.spec.image_size
        )));
    }
    if cfg.thresholds.is_empty() || cfg.thresholds.iter().any(|&d| d.is_nan() || d <= 0.0) {
        return Err(Error::Parameter("thresholds must be positive and non-empty".into()));
    }
    if cfg.query_step == 0 {
        return Err(Error::Parameter("query step must be at least 1".into()));
    }
    let n_layers = network.num_layers();
    let layers = cfg.layers.clone().unwrap_or_else(|| (0..n_layers).collect());
    let steps = cfg.steps.clone().unwrap_or_else(|| (0..network.steps()).collect());
    for &l in &layers {
        let layer = network
            .layers()
            .get(l)
            .ok_or_else(|| Error::Bounds(format!("layer {l} of {n_layers}")))?;
        if !cfg.image_size.is_multiple_of(layer.grid_w) || !cfg.image_size.is_multiple_of(layer.grid_h) {
            return Err(Error::Parameter(format!(
                "image size {} not divisible by layer {l}'s {}x{} grid",
                cfg.image_size, layer.grid_h, layer.grid_w
            )));
        }
    }
    if let Some(&t) = steps.iter().find(|&&t| t >= network.steps()) {
        return Err(Error::Bounds(format!("step {t} of {}", network.steps())));
    }

    let pairs = cfg.frame_pairs(clip.n_frames());
    let (gh, gw) = (clip.spec.grid_h, clip.spec.grid_w);
    let size = cfg.image_size as f64;
    let mut probes = Vec::new();
    for (pi, &(t, u)) in pairs.iter().enumerate() {
        let fwd = clip.forward_map(t, u)?;
        let off = cfg.query_step / 2;
        for ty in (off..gh).step_by(cfg.query_step) {
            for tx in (off..gw).step_by(cfg.query_step) {
                let point = token_center(ty * gw + tx, (gh, gw), cfg.image_size);
                let truth = fwd.apply(point.0, point.1);
                // points carried out of view have no ground truth
                if (0.0..size).contains(&truth.0) && (0.0..size).contains(&truth.1) {
                    probes.push(Probe { pair: pi, point, truth });
                }
            }
        }
    }
    if probes.is_empty() {
        return Err(Error::Parameter("no query point stays in view".into()));
    }

    let mut predictions: BTreeMap<(usize, usize), Vec<PointPair>> = BTreeMap::new();
    let frames: Vec<&FrameFeatures> = clip.frames.iter().collect();
    network.run(&frames, Context::Independent, false, &mut |l, step, qkvs| {
        if !layers.contains(&l) || !steps.contains(&step) {
            return Ok(());
        }
        let layer = &network.layers()[l];
        let grid = (layer.grid_h, layer.grid_w);
        let preds = predictions.entry((l, step)).or_default();
        for (pi, &(t, u)) in pairs.iter().enumerate() {
            let mine: Vec<&Probe> = probes.iter().filter(|p| p.pair == pi).collect();
            if mine.is_empty() {
                continue;
            }
            let src: Vec<usize> = mine
                .iter()
                .map(|p| pixel_to_token(p.point, grid, cfg.image_size))
                .collect::<Result<_>>()?;
            let q = &qkvs[t].q;
            let data: Vec<f32> = src.iter().flat_map(|&s| q.row(s).iter().copied()).collect();
            let rows = Matrix::new(src.len(), q.cols(), data)?;
            let map = head_avg_scores(&rows, &qkvs[u].k, &layer.attention)?;
            for (i, p) in mine.iter().enumerate() {
                let (tok, _) = argmax(map.scores.row(i));
                preds.push((token_center(tok, grid, cfg.image_size), p.truth));
            }
        }
        Ok(())
    })?;

    let mut rows = Vec::new();
    for ((layer, step), preds) in &predictions {
        for &delta in &cfg.thresholds {
            rows.push(TrackingRow {
                layer: *layer,
                step: *step,
                delta,
                accuracy: position_accuracy(preds, delta)?,
                n_points: preds.len(),
            });
        }
    }
    Ok(TrackingTable { rows })
}
