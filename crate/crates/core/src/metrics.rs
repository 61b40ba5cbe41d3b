//! Temporal consistency and edit accuracy over frame embeddings.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::FrameFeatures;
use crate::container::{self, Tensor};
use crate::equivariance::Image;
use crate::error::{Error, Result};
use crate::rng::mix64;
use crate::tensor::cosine_sim;

/// Deterministic map from a frame to a fixed-width vector.
pub trait Embedder {
    fn out_dim(&self) -> usize;

    /// `index` is the frame's position in its video and `values` its
    /// flattened contents; an embedder may use either.
    fn embed(&self, index: usize, values: &[f32]) -> Result<Vec<f32>>;

    fn embed_frame(&self, frame: &FrameFeatures) -> Result<Vec<f32>> {
        self.embed(frame.frame_index, frame.tokens().as_slice())
    }

    fn embed_image(&self, index: usize, image: &Image) -> Result<Vec<f32>> {
        self.embed(index, image.pixels())
    }
}

/// Seeded random ±1 projection, scaled by `1 / sqrt(n)`. Signs are derived
/// from a counter hash, so nothing is stored and any input length works.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyEmbedder {
    pub seed: u64,
    pub out_dim: usize,
}

impl Default for ToyEmbedder {
    fn default() -> Self {
        Self { seed: 0, out_dim: 128 }
    }
}

impl Embedder for ToyEmbedder {
    fn out_dim(&self) -> usize {
        self.out_dim
    }

    fn embed(&self, _index: usize, values: &[f32]) -> Result<Vec<f32>> {
        if values.is_empty() {
            return Err(Error::Parameter("cannot embed an empty frame".into()));
        }
        let mut acc = vec![0.0f64; self.out_dim];
        let base = mix64(self.seed);
        for (i, &x) in values.iter().enumerate() {
            let x = f64::from(x);
            let row = mix64(base ^ i as u64);
            for (j, a) in acc.iter_mut().enumerate() {
                // one sign bit per output
                let bits = mix64(row.wrapping_add(j as u64));
                if bits >> 63 == 0 {
                    *a += x;
                } else {
                    *a -= x;
                }
            }
        }
        let s = 1.0 / (values.len() as f64).sqrt();
        Ok(acc.into_iter().map(|a| (a * s) as f32).collect())
    }
}

/// Embeddings supplied from outside, one row per frame index.
#[derive(Clone, Debug, PartialEq)]
pub struct PrecomputedEmbedder {
    rows: Vec<Vec<f32>>,
}

impl PrecomputedEmbedder {
    pub fn new(rows: Vec<Vec<f32>>) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if d == 0 || rows.iter().any(|r| r.len() != d) {
            return Err(Error::Shape("embedding rows must be non-empty and equally wide".into()));
        }
        Ok(Self { rows })
    }

    /// Reads an `[n_frames, dim]` tensor container.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let t = container::read(path)?;
        let [n, d] = t.dims[..] else {
            return Err(Error::Format(format!("embeddings need 2 dims, got {:?}", t.dims)));
        };
        Self::new((0..n).map(|i| t.data[i * d..(i + 1) * d].to_vec()).collect())
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor {
            dims: vec![self.rows.len(), self.rows[0].len()],
            data: self.rows.concat(),
        }
    }
}

impl Embedder for PrecomputedEmbedder {
    fn out_dim(&self) -> usize {
        self.rows[0].len()
    }

    fn embed(&self, index: usize, _values: &[f32]) -> Result<Vec<f32>> {
        self.rows
            .get(index)
            .cloned()
            .ok_or_else(|| Error::Bounds(format!("no embedding for frame {index} of {}", self.rows.len())))
    }
}

pub fn embed_frames(frames: &[FrameFeatures], emb: &dyn Embedder) -> Result<Vec<Vec<f32>>> {
    frames.iter().map(|f| emb.embed_frame(f)).collect()
}

/// Cosine similarity of each successive pair.
pub fn pair_similarities(embeddings: &[Vec<f32>]) -> Result<Vec<f64>> {
    if embeddings.len() < 2 {
        return Err(Error::Parameter(format!(
            "consistency needs at least 2 frames, got {}",
            embeddings.len()
        )));
    }
    embeddings
        .windows(2)
        .map(|w| cosine_sim(&w[0], &w[1]).map(f64::from))
        .collect()
}

/// Mean cosine similarity over successive frame pairs.
pub fn tem_con(frames: &[FrameFeatures], emb: &dyn Embedder) -> Result<f64> {
    tem_con_embeddings(&embed_frames(frames, emb)?)
}

pub fn tem_con_embeddings(embeddings: &[Vec<f32>]) -> Result<f64> {
    let sims = pair_similarities(embeddings)?;
    Ok(sims.iter().sum::<f64>() / sims.len() as f64)
}

/// Fraction of frames strictly closer to `target_ref` than to `source_ref`.
pub fn frame_acc(frames: &[FrameFeatures], emb: &dyn Embedder, source_ref: &[f32], target_ref: &[f32]) -> Result<f64> {
    frame_acc_embeddings(&embed_frames(frames, emb)?, source_ref, target_ref)
}

pub fn frame_acc_embeddings(embeddings: &[Vec<f32>], source_ref: &[f32], target_ref: &[f32]) -> Result<f64> {
    if embeddings.is_empty() {
        return Err(Error::Parameter("no frames to score".into()));
    }
    let mut wins = 0usize;
    for e in embeddings {
        if cosine_sim(e, target_ref)? > cosine_sim(e, source_ref)? {
            wins += 1;
        }
    }
    Ok(wins as f64 / embeddings.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub tem_con: f64,
    pub frame_acc: Option<f64>,
    pub pair_similarities: Vec<f64>,
    pub provenance: serde_json::Value,
}

impl MetricsReport {
    pub fn compute(
        embeddings: &[Vec<f32>],
        refs: Option<(&[f32], &[f32])>,
        provenance: serde_json::Value,
    ) -> Result<Self> {
        let pair_similarities = pair_similarities(embeddings)?;
        let tem_con = pair_similarities.iter().sum::<f64>() / pair_similarities.len() as f64;
        let frame_acc = refs.map(|(s, t)| frame_acc_embeddings(embeddings, s, t)).transpose()?;
        Ok(Self {
            tem_con,
            frame_acc,
            pair_similarities,
            provenance,
        })
    }

    pub fn pairs_csv(&self) -> String {
        let mut s = String::from("pair,similarity\n");
        for (i, v) in self.pair_similarities.iter().enumerate() {
            let _ = writeln!(s, "{i},{v}");
        }
        s
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{gaussian_vec, seeded};
    use crate::tensor::Matrix;
    use proptest::prelude::*;

    fn frame(i: usize, data: Vec<f32>) -> FrameFeatures {
        FrameFeatures::new(i, 2, 2, Matrix::new(4, data.len() / 4, data).unwrap()).unwrap()
    }

    fn random_frames(seed: u64, n: usize) -> Vec<FrameFeatures> {
        (0..n)
            .map(|i| frame(i, gaussian_vec(&mut seeded(seed + i as u64), 32)))
            .collect()
    }

    #[test]
    fn constant_video_scores_one() {
        let f = random_frames(1, 1).remove(0);
        let video: Vec<_> = (0..5).map(|i| frame(i, f.tokens().as_slice().to_vec())).collect();
        let t = tem_con(&video, &ToyEmbedder::default()).unwrap();
        assert!((t - 1.0).abs() <= 1e-6, "{t}");
    }

    #[test]
    fn orthogonal_embeddings_score_zero() {
        let emb = PrecomputedEmbedder::new(vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let video = random_frames(2, 2);
        assert_eq!(tem_con(&video, &emb).unwrap(), 0.0);
        assert!(tem_con(&video[..1], &emb).is_err());
    }

    #[test]
    fn tem_con_matches_pair_loop() {
        let video = random_frames(3, 4);
        let emb = ToyEmbedder { seed: 9, out_dim: 16 };
        let e: Vec<Vec<f32>> = video.iter().map(|f| emb.embed_frame(f).unwrap()).collect();
        let mut total = 0.0f64;
        for t in 0..3 {
            let (a, b) = (&e[t], &e[t + 1]);
            let dot: f64 = a.iter().zip(b).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum();
            let na: f64 = a.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
            total += f64::from((dot / (na * nb)) as f32);
        }
        assert_eq!(tem_con(&video, &emb).unwrap(), total / 3.0);
    }

    #[test]
    fn toy_embedder_projection_oracle() {
        let emb = ToyEmbedder { seed: 4, out_dim: 3 };
        let v = [0.5f32, -1.0, 2.0];
        let got = emb.embed(0, &v).unwrap();
        for (j, g) in got.iter().enumerate() {
            let mut s = 0.0f64;
            for (i, &x) in v.iter().enumerate() {
                let sign = if mix64(mix64(mix64(4) ^ i as u64).wrapping_add(j as u64)) >> 63 == 0 {
                    1.0
                } else {
                    -1.0
                };
                s += sign * f64::from(x);
            }
            assert_eq!(*g, (s / 3f64.sqrt()) as f32);
        }
    }

    #[test]
    fn frame_acc_cases() {
        let video = random_frames(5, 4);
        let e4 = [1.0f32, 0.0, 0.0, 0.0];
        let e1 = [0.0f32, 1.0, 0.0, 0.0];
        // target equals every frame's own embedding
        let rows = vec![e4.to_vec(); 4];
        let emb = PrecomputedEmbedder::new(rows).unwrap();
        assert_eq!(frame_acc(&video, &emb, &e1, &e4).unwrap(), 1.0);
        assert_eq!(frame_acc(&video, &emb, &e4, &e4).unwrap(), 0.0);
        let mixed = PrecomputedEmbedder::new(vec![
            vec![1.0, 0.1, 0.0, 0.0],
            vec![0.9, 0.2, 0.0, 0.0],
            vec![0.1, 1.0, 0.0, 0.0],
            vec![0.7, 0.3, 0.0, 0.0],
        ])
        .unwrap();
        assert_eq!(frame_acc(&video, &mixed, &e1, &e4).unwrap(), 0.75);
        assert!(matches!(
            frame_acc(&video, &mixed, &[0.0; 4], &e4),
            Err(Error::DegenerateVector(_))
        ));
        assert!(frame_acc(&[], &mixed, &e1, &e4).is_err());
    }

    #[test]
    fn precomputed_roundtrip_and_bounds() {
        let emb = PrecomputedEmbedder::new(vec![vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.apft");
        container::write(&path, &emb.to_tensor()).unwrap();
        let back = PrecomputedEmbedder::load(&path).unwrap();
        assert_eq!(back, emb);
        assert!(matches!(back.embed(2, &[]), Err(Error::Bounds(_))));
    }

    #[test]
    fn report_json_and_csv() {
        let e = vec![vec![1.0, 0.0], vec![1.0, 1.0], vec![0.0, 1.0]];
        let r = MetricsReport::compute(&e, None, serde_json::json!({"seed": 1})).unwrap();
        assert_eq!(r.pair_similarities.len(), 2);
        assert!(r.frame_acc.is_none());
        assert!(r.pairs_csv().starts_with("pair,similarity\n0,"));
        let back: MetricsReport = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        assert_eq!(back, r);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn frame_acc_scale_invariant(seed in 0u64..10_000, a in 0.01f32..100.0, b in 0.01f32..100.0) {
            let mut rng = seeded(seed);
            let embs: Vec<Vec<f32>> = (0..6).map(|_| gaussian_vec(&mut rng, 8)).collect();
            let s = gaussian_vec(&mut rng, 8);
            let t = gaussian_vec(&mut rng, 8);
            let base = frame_acc_embeddings(&embs, &s, &t).unwrap();
            prop_assert!((0.0..=1.0).contains(&base));
            let s2: Vec<f32> = s.iter().map(|x| x * a).collect();
            let t2: Vec<f32> = t.iter().map(|x| x * b).collect();
            prop_assert_eq!(frame_acc_embeddings(&embs, &s2, &t2).unwrap(), base);
        }

        #[test]
        fn toy_tem_con_scale_invariant(seed in 0u64..10_000, c in 0.01f32..100.0) {
            let video = random_frames(seed, 3);
            let scaled: Vec<_> = video
                .iter()
                .map(|f| frame(f.frame_index, f.tokens().as_slice().iter().map(|x| x * c).collect()))
                .collect();
            let emb = ToyEmbedder { seed, out_dim: 32 };
            let a = tem_con(&video, &emb).unwrap();
            let b = tem_con(&scaled, &emb).unwrap();
            prop_assert!((a - b).abs() <= 1e-5, "{} vs {}", a, b);
        }
    }
}
