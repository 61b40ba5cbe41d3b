//! Anchor frames and their cached keys/values.
//!
//! A small set of anchor frames is run through the network as one batch in
//! which every anchor attends to itself followed by all anchors. At every
//! `(layer, step)` the anchors' keys and values are recorded, concatenated in
//! ascending frame order. Any other frame can then be edited on its own by
//! attending to `[own K, K_anc]` / `[own V, V_anc]`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::{attend_blocks, AttentionConfig, FrameFeatures, Qkv};
use crate::container::{self, Tensor};
use crate::error::{Error, Result};
use crate::network::{Context, ToyEditNetwork};
use crate::tensor::Matrix;

/// Anchor frame indices spread evenly over `n_frames`.
///
/// One anchor sits at the middle frame; otherwise anchor `i` is
/// `floor(i * (N - 1) / (K - 1))`.
pub fn select_anchor_indices(n_frames: usize, num_anchors: usize) -> Result<Vec<usize>> {
    if num_anchors == 0 || num_anchors > n_frames {
        return Err(Error::Parameter(format!(
            "need 1 <= anchors <= frames, got {num_anchors} anchors for {n_frames} frames"
        )));
    }
    if num_anchors == 1 {
        return Ok(vec![(n_frames - 1) / 2]);
    }
    let mut out: Vec<usize> = (0..num_anchors)
        .map(|i| i * (n_frames - 1) / (num_anchors - 1))
        .collect();
    out.dedup();
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CacheEntry {
    pub k: Matrix,
    pub v: Matrix,
}

impl CacheEntry {
    pub fn rows(&self) -> usize {
        self.k.rows()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CacheMeta {
    network_hash: String,
    steps: usize,
    num_layers: usize,
    dim: usize,
    anchor_frame_indices: Vec<usize>,
    tokens_per_layer: Vec<usize>,
}

/// Immutable store of anchor keys/values indexed by `(layer, step)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorCache {
    meta: CacheMeta,
    entries: BTreeMap<(usize, usize), CacheEntry>,
}

impl AnchorCache {
    /// A cache with no anchors; every entry has zero rows.
    pub fn empty(network: &ToyEditNetwork, steps: usize) -> Self {
        let dim = network.config().dim;
        let mut entries = BTreeMap::new();
        for l in 0..network.num_layers() {
            for t in 0..steps {
                entries.insert(
                    (l, t),
                    CacheEntry {
                        k: Matrix::zeros(0, dim),
                        v: Matrix::zeros(0, dim),
                    },
                );
            }
        }
        Self {
            meta: Self::meta_for(network, steps, Vec::new()),
            entries,
        }
    }

    fn meta_for(network: &ToyEditNetwork, steps: usize, anchors: Vec<usize>) -> CacheMeta {
        CacheMeta {
            network_hash: network.config_hash().to_owned(),
            steps,
            num_layers: network.num_layers(),
            dim: network.config().dim,
            anchor_frame_indices: anchors,
            tokens_per_layer: network.layers().iter().map(|l| l.n_tokens()).collect(),
        }
    }

    pub fn num_anchors(&self) -> usize {
        self.meta.anchor_frame_indices.len()
    }

    pub fn anchor_frame_indices(&self) -> &[usize] {
        &self.meta.anchor_frame_indices
    }

    pub fn steps(&self) -> usize {
        self.meta.steps
    }

    pub fn num_layers(&self) -> usize {
        self.meta.num_layers
    }

    pub fn network_hash(&self) -> &str {
        &self.meta.network_hash
    }

    pub fn entry(&self, layer: usize, step: usize) -> Result<&CacheEntry> {
        self.entries
            .get(&(layer, step))
            .ok_or_else(|| Error::Compatibility(format!("no cache entry for layer {layer}, step {step}")))
    }

    pub fn entries(&self) -> impl Iterator<Item = (&(usize, usize), &CacheEntry)> {
        self.entries.iter()
    }

    /// Fails unless this cache was produced by `network` over its full step count.
    pub fn check_compatible(&self, network: &ToyEditNetwork) -> Result<()> {
        if self.meta.network_hash != network.config_hash() {
            return Err(Error::Compatibility(format!(
                "cache built for network {}, frame pipeline is {}",
                self.meta.network_hash,
                network.config_hash()
            )));
        }
        if self.meta.steps != network.steps() || self.meta.num_layers != network.num_layers() {
            return Err(Error::Compatibility(format!(
                "cache covers {} layers x {} steps, network runs {} x {}",
                self.meta.num_layers,
                self.meta.steps,
                network.num_layers(),
                network.steps()
            )));
        }
        Ok(())
    }

    /// Writes `meta.json` plus one container per key/value block.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        fs::write(dir.join("meta.json"), serde_json::to_vec_pretty(&self.meta)?)?;
        for (&(l, t), e) in &self.entries {
            for (name, m) in [("k", &e.k), ("v", &e.v)] {
                let tensor = Tensor::new(vec![m.rows(), m.cols()], m.as_slice().to_vec())?;
                container::write(dir.join(format!("{name}_l{l}_s{t}.apft")), &tensor)?;
            }
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta: CacheMeta = serde_json::from_slice(&fs::read(dir.join("meta.json"))?)?;
        let mut entries = BTreeMap::new();
        for l in 0..meta.num_layers {
            let expect = meta.anchor_frame_indices.len() * meta.tokens_per_layer[l];
            for t in 0..meta.steps {
                let load = |name: &str| -> Result<Matrix> {
                    let tensor = container::read(dir.join(format!("{name}_l{l}_s{t}.apft")))?;
                    if tensor.dims != [expect, meta.dim] {
                        return Err(Error::Format(format!(
                            "{name} entry ({l}, {t}) has dims {:?}, expected [{expect}, {}]",
                            tensor.dims, meta.dim
                        )));
                    }
                    Matrix::new(expect, meta.dim, tensor.data)
                };
                let k = load("k")?;
                let v = load("v")?;
                entries.insert((l, t), CacheEntry { k, v });
            }
        }
        Ok(Self { meta, entries })
    }
}

/// Runs the anchors jointly and records their keys/values.
pub fn build_anchor_cache(anchors: &[FrameFeatures], network: &ToyEditNetwork, steps: usize) -> Result<AnchorCache> {
    build_anchor_cache_with_outputs(anchors, network, steps).map(|(c, _)| c)
}

/// Like [`build_anchor_cache`], also returning the anchors' edited frames in
/// ascending frame order.
pub fn build_anchor_cache_with_outputs(
    anchors: &[FrameFeatures],
    network: &ToyEditNetwork,
    steps: usize,
) -> Result<(AnchorCache, Vec<FrameFeatures>)> {
    if anchors.is_empty() {
        return Err(Error::Parameter("anchor list is empty".into()));
    }
    if steps != network.steps() {
        return Err(Error::Parameter(format!(
            "cache must cover all {} network steps, asked for {steps}",
            network.steps()
        )));
    }
    let mut sorted: Vec<&FrameFeatures> = anchors.iter().collect();
    sorted.sort_by_key(|f| f.frame_index);
    if sorted.windows(2).any(|w| w[0].frame_index == w[1].frame_index) {
        return Err(Error::Parameter("anchor frame indices must be distinct".into()));
    }
    for f in &sorted {
        network.check_frame(f)?;
    }

    let mut entries = BTreeMap::new();
    let outputs = network.run(&sorted, Context::Batch, true, &mut |l, t, qkvs| {
        let ks: Vec<&Matrix> = qkvs.iter().map(|x| &x.k).collect();
        let vs: Vec<&Matrix> = qkvs.iter().map(|x| &x.v).collect();
        entries.insert(
            (l, t),
            CacheEntry {
                k: Matrix::vstack(&ks)?,
                v: Matrix::vstack(&vs)?,
            },
        );
        Ok(())
    })?;
    let indices = sorted.iter().map(|f| f.frame_index).collect();
    let cache = AnchorCache {
        meta: AnchorCache::meta_for(network, steps, indices),
        entries,
    };
    Ok((cache, outputs))
}

/// `softmax(Q [K, K_anc]^T / temperature) [V, V_anc]`, multi-head.
pub fn anchor_attention(frame: &Qkv, entry: &CacheEntry, cfg: &AttentionConfig) -> Result<Matrix> {
    let n = frame.n_tokens();
    if entry.k.rows() != entry.v.rows() || (n > 0 && !entry.k.rows().is_multiple_of(n)) {
        return Err(Error::Shape(format!(
            "cache entry with {}/{} rows does not fit a {n}-token frame",
            entry.k.rows(),
            entry.v.rows()
        )));
    }
    if entry.rows() > 0 && entry.k.cols() != frame.k.cols() {
        return Err(Error::Shape(format!(
            "cache width {} vs frame width {}",
            entry.k.cols(),
            frame.k.cols()
        )));
    }
    attend_blocks(&frame.q, &[&frame.k, &entry.k], &[&frame.v, &entry.v], cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::self_attention;
    use crate::network::NetworkConfig;
    use crate::rng::{gaussian_vec, seeded};

    fn rand_matrix(seed: u64, rows: usize, cols: usize) -> Matrix {
        Matrix::new(rows, cols, gaussian_vec(&mut seeded(seed), rows * cols)).unwrap()
    }

    fn rand_qkv(seed: u64, n: usize, dim: usize) -> Qkv {
        Qkv::new(
            rand_matrix(seed, n, dim),
            rand_matrix(seed + 1, n, dim),
            rand_matrix(seed + 2, n, dim),
        )
        .unwrap()
    }

    fn small_net(levels: usize, steps: usize) -> ToyEditNetwork {
        ToyEditNetwork::new(NetworkConfig {
            grid_h: 4,
            grid_w: 4,
            dim: 8,
            num_heads: 2,
            levels,
            steps,
            seed: 3,
            ..NetworkConfig::default()
        })
        .unwrap()
    }

    fn frame(seed: u64, index: usize) -> FrameFeatures {
        FrameFeatures::new(index, 4, 4, rand_matrix(seed, 16, 8)).unwrap()
    }

    #[test]
    fn anchor_index_rule() {
        assert_eq!(select_anchor_indices(10, 3).unwrap(), vec![0, 4, 9]);
        assert_eq!(select_anchor_indices(5, 5).unwrap(), vec![0, 1, 2, 3, 4]);
        assert_eq!(select_anchor_indices(120, 3).unwrap(), vec![0, 59, 119]);
        assert_eq!(select_anchor_indices(10, 1).unwrap(), vec![4]);
        assert_eq!(select_anchor_indices(1, 1).unwrap(), vec![0]);
        assert!(select_anchor_indices(3, 4).is_err());
        assert!(select_anchor_indices(3, 0).is_err());
    }

    #[test]
    fn anchor_indices_strictly_increase() {
        for n in 1..40 {
            for k in 1..=n.min(16) {
                let idx = select_anchor_indices(n, k).unwrap();
                assert_eq!(idx.len(), k);
                assert!(idx.windows(2).all(|w| w[0] < w[1]));
                assert!(*idx.last().unwrap() < n);
            }
        }
    }

    #[test]
    fn empty_entry_reduces_to_self_attention() {
        let qkv = rand_qkv(1, 6, 4);
        let cfg = AttentionConfig::new(4, 2).unwrap();
        let entry = CacheEntry {
            k: Matrix::zeros(0, 4),
            v: Matrix::zeros(0, 4),
        };
        assert_eq!(
            anchor_attention(&qkv, &entry, &cfg).unwrap(),
            self_attention(&qkv, &cfg).unwrap()
        );
    }

    #[test]
    fn own_entry_matches_self_attention() {
        let qkv = rand_qkv(2, 6, 4);
        let cfg = AttentionConfig::new(4, 1).unwrap();
        let entry = CacheEntry {
            k: qkv.k.clone(),
            v: qkv.v.clone(),
        };
        let got = anchor_attention(&qkv, &entry, &cfg).unwrap();
        let want = self_attention(&qkv, &cfg).unwrap();
        for (a, b) in got.as_slice().iter().zip(want.as_slice()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn four_plus_four_tokens_match_oracle() {
        let qkv = rand_qkv(3, 4, 4);
        let anc = rand_qkv(4, 4, 4);
        let cfg = AttentionConfig::new(4, 1).unwrap();
        let entry = CacheEntry {
            k: anc.k.clone(),
            v: anc.v.clone(),
        };
        let got = anchor_attention(&qkv, &entry, &cfg).unwrap();
        for i in 0..4 {
            let keys: Vec<&[f32]> = (0..4)
                .map(|j| qkv.k.row(j))
                .chain((0..4).map(|j| anc.k.row(j)))
                .collect();
            let vals: Vec<&[f32]> = (0..4)
                .map(|j| qkv.v.row(j))
                .chain((0..4).map(|j| anc.v.row(j)))
                .collect();
            let logits: Vec<f64> = keys
                .iter()
                .map(|k| {
                    qkv.q
                        .row(i)
                        .iter()
                        .zip(*k)
                        .map(|(a, b)| *a as f64 * *b as f64)
                        .sum::<f64>()
                        / 2.0
                })
                .collect();
            let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
            for c in 0..4 {
                let want: f64 = logits
                    .iter()
                    .zip(&vals)
                    .map(|(l, v)| (l - mx).exp() / z * v[c] as f64)
                    .sum();
                assert!((got.get(i, c) as f64 - want).abs() <= 1e-5 * want.abs().max(1.0));
            }
        }
    }

    #[test]
    fn mismatched_entry_is_shape_error() {
        let qkv = rand_qkv(5, 4, 4);
        let cfg = AttentionConfig::new(4, 1).unwrap();
        let entry = CacheEntry {
            k: rand_matrix(6, 6, 4),
            v: rand_matrix(7, 6, 4),
        };
        assert!(matches!(anchor_attention(&qkv, &entry, &cfg), Err(Error::Shape(_))));
    }

    #[test]
    fn single_anchor_entry_is_own_projection() {
        let net = small_net(0, 1);
        let f = frame(10, 0);
        let cache = build_anchor_cache(std::slice::from_ref(&f), &net, 1).unwrap();
        let x = net.edit_input(&f).unwrap();
        let h = crate::network::head_rms_norm(&x, net.config().num_heads);
        let p = &net.layers()[0].projections;
        let e = cache.entry(0, 0).unwrap();
        assert_eq!(e.k, crate::tensor::matmul(&h, &p.wk).unwrap());
        assert_eq!(e.v, crate::tensor::matmul(&h, &p.wv).unwrap());
    }

    #[test]
    fn identical_anchors_stack_twice() {
        let net = small_net(1, 2);
        let a = frame(20, 0);
        let mut b = a.clone();
        b.frame_index = 5;
        let single = build_anchor_cache(std::slice::from_ref(&a), &net, 2).unwrap();
        let double = build_anchor_cache(&[a, b], &net, 2).unwrap();
        for ((key, one), (_, two)) in single.entries().zip(double.entries()) {
            let n = one.rows();
            assert_eq!(two.rows(), 2 * n, "entry {key:?}");
            let (top, bottom) = two.k.as_slice().split_at(n * 8);
            assert_eq!(top, bottom);
            // duplicated keys leave the softmax weights unchanged up to rounding
            let close = |a: &[f32], b: &[f32]| a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-4 * (1.0 + y.abs()));
            assert!(close(top, one.k.as_slice()), "entry {key:?}");
            assert!(close(&two.v.as_slice()[n * 8..], one.v.as_slice()), "entry {key:?}");
            if *key == (0, 0) {
                assert_eq!(top, one.k.as_slice());
            }
        }
    }

    #[test]
    fn cache_layout_and_determinism() {
        let net = small_net(1, 2);
        let anchors = vec![frame(30, 7), frame(31, 2), frame(32, 4)];
        let a = build_anchor_cache(&anchors, &net, 2).unwrap();
        let b = build_anchor_cache(&anchors, &net, 2).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.anchor_frame_indices(), &[2, 4, 7]);
        for (&(l, _), e) in a.entries() {
            assert_eq!(e.rows(), 3 * net.layers()[l].n_tokens());
        }
        assert_eq!(a.entries().count(), net.num_layers() * 2);
    }

    #[test]
    fn build_errors() {
        let net = small_net(0, 1);
        assert!(matches!(build_anchor_cache(&[], &net, 1), Err(Error::Parameter(_))));
        let f = frame(1, 0);
        assert!(build_anchor_cache(&[f.clone(), f], &net, 1).is_err());
    }

    #[test]
    fn save_load_roundtrip() {
        let net = small_net(1, 2);
        let cache = build_anchor_cache(&[frame(40, 0), frame(41, 3)], &net, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        cache.save(dir.path()).unwrap();
        assert_eq!(AnchorCache::load(dir.path()).unwrap(), cache);
    }
}
