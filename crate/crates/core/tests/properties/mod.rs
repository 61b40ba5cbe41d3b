//! Property checks shared by the invariant tests and the acceptance gate.
//! Each runs a deterministic proptest runner for the requested case count.

use anchorprop::attention::{cross_frame_attention, head_avg_attention_map, self_attention, AttentionConfig, Qkv};
use anchorprop::rng::{gaussian_vec, seeded};
use anchorprop::tensor::{cosine_sim, softmax_rows, Matrix};
use anchorprop::tracking::{position_accuracy, token_center, track_point, TrackQuery};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};
use rand::Rng;

pub fn run<S: Strategy>(
    cases: u32,
    strategy: S,
    test: impl Fn(S::Value) -> Result<(), TestCaseError>,
) -> Result<(), String> {
    let config = Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    };
    let mut runner = TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha));
    runner.run(&strategy, test).map_err(|e| e.to_string())
}

fn matrix(seed: u64, rows: usize, cols: usize, scale: f32) -> Matrix {
    let data = gaussian_vec(&mut seeded(seed), rows * cols)
        .into_iter()
        .map(|x| x * scale)
        .collect();
    Matrix::new(rows, cols, data).unwrap()
}

fn qkv(seed: u64, n: usize, dim: usize) -> Qkv {
    Qkv::new(
        matrix(seed, n, dim, 1.0),
        matrix(seed ^ 0x51, n, dim, 1.0),
        matrix(seed ^ 0xa3, n, dim, 1.0),
    )
    .unwrap()
}

fn close(a: &[f32], b: &[f32], tol: f32) -> bool {
    a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * (1.0 + y.abs()))
}

pub fn softmax_rows_sum_to_one(cases: u32) -> Result<(), String> {
    let s = (any::<u64>(), 1usize..8, 1usize..48, 0.01f32..50.0, 0.05f32..20.0);
    run(cases, s, |(seed, rows, cols, scale, temp)| {
        let p = softmax_rows(&matrix(seed, rows, cols, scale), temp).unwrap();
        for r in 0..rows {
            let row = p.row(r);
            let sum: f64 = row.iter().map(|&x| f64::from(x)).sum();
            prop_assert!((sum - 1.0).abs() <= 1e-5, "row {} sums to {}", r, sum);
            prop_assert!(row.iter().all(|x| (0.0..=1.0).contains(x)));
        }
        Ok(())
    })
}

pub fn softmax_shift_invariant(cases: u32) -> Result<(), String> {
    let s = (any::<u64>(), 1usize..8, 1usize..48, -64.0f32..64.0, 0.25f32..8.0);
    run(cases, s, |(seed, rows, cols, shift, temp)| {
        // quarter-integer inputs and shifts keep x + c exact in f32
        let m = Matrix::from_fn(rows, cols, |r, c| {
            let mut rng = seeded(seed ^ ((r * cols + c) as u64));
            rng.random_range(-40i32..40) as f32 * 0.25
        })
        .unwrap();
        let c = (shift * 4.0).round() * 0.25;
        let shifted = Matrix::from_fn(rows, cols, |r, j| m.get(r, j) + c).unwrap();
        let a = softmax_rows(&m, temp).unwrap();
        let b = softmax_rows(&shifted, temp).unwrap();
        prop_assert!(close(a.as_slice(), b.as_slice(), 1e-6));
        Ok(())
    })
}

/// With one head the tracked token for every query is unchanged by any
/// positive rescaling of the logits.
pub fn argmax_temperature_invariant(cases: u32) -> Result<(), String> {
    let s = (any::<u64>(), 1usize..5, 1usize..5, 1usize..9, 0.2f32..5.0, 0.2f32..5.0);
    run(cases, s, |(seed, h, w, dim, t1, t2)| {
        let n = h * w;
        let (a, b) = (qkv(seed, n, dim), qkv(seed ^ 0x77, n, dim));
        let cfg1 = AttentionConfig::new(dim, 1).unwrap().with_temperature(t1).unwrap();
        let cfg2 = cfg1.with_temperature(t2).unwrap();
        let m1 = head_avg_attention_map(&a, &b, &cfg1).unwrap();
        let m2 = head_avg_attention_map(&a, &b, &cfg2).unwrap();
        let size = 8 * h * w;
        for tok in 0..n {
            let q = TrackQuery {
                point: token_center(tok, (h, w), size),
                source_frame: 0,
                target_frame: 1,
            };
            let r1 = track_point(&q, &m1, (h, w), size).unwrap();
            let r2 = track_point(&q, &m2, (h, w), size).unwrap();
            prop_assert_eq!(r1.token_index, r2.token_index);
        }
        Ok(())
    })
}

/// Permuting a frame's tokens permutes the attention output the same way.
pub fn attention_permutation_equivariant(cases: u32) -> Result<(), String> {
    let s = (
        any::<u64>(),
        1usize..17,
        prop::sample::select(vec![1usize, 2, 4]),
        1usize..5,
    );
    run(cases, s, |(seed, n, heads, hd)| {
        let dim = heads * hd;
        let cfg = AttentionConfig::new(dim, heads).unwrap();
        let x = qkv(seed, n, dim);
        let mut perm: Vec<usize> = (0..n).collect();
        let mut rng = seeded(seed);
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let permute = |m: &Matrix| Matrix::from_fn(n, dim, |r, c| m.get(perm[r], c)).unwrap();
        let px = Qkv::new(permute(&x.q), permute(&x.k), permute(&x.v)).unwrap();
        let out = self_attention(&x, &cfg).unwrap();
        let pout = self_attention(&px, &cfg).unwrap();
        prop_assert!(close(pout.as_slice(), permute(&out).as_slice(), 1e-5));
        Ok(())
    })
}

/// Each output coordinate is a convex combination of the value column.
pub fn attention_convex_bounds(cases: u32) -> Result<(), String> {
    let s = (
        any::<u64>(),
        1usize..17,
        1usize..17,
        prop::sample::select(vec![1usize, 2, 4]),
        1usize..5,
        any::<bool>(),
    );
    run(cases, s, |(seed, n, m, heads, hd, with_self)| {
        let dim = heads * hd;
        let cfg = AttentionConfig::new(dim, heads).unwrap();
        let (a, b) = (qkv(seed, n, dim), qkv(seed ^ 0x99, m, dim));
        let out = cross_frame_attention(&a, &[&b], &cfg, with_self).unwrap();
        for c in 0..dim {
            let mut vals: Vec<f32> = (0..m).map(|j| b.v.get(j, c)).collect();
            if with_self {
                vals.extend((0..n).map(|j| a.v.get(j, c)));
            }
            let lo = vals.iter().cloned().fold(f32::INFINITY, f32::min);
            let hi = vals.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            for r in 0..n {
                let o = out.get(r, c);
                let tol = 1e-5 * (1.0 + lo.abs().max(hi.abs()));
                prop_assert!(o >= lo - tol && o <= hi + tol, "{} outside [{}, {}]", o, lo, hi);
            }
        }
        Ok(())
    })
}

pub fn cosine_scale_invariant(cases: u32) -> Result<(), String> {
    let s = (any::<u64>(), 1usize..64, 1e-3f32..1e3, 1e-3f32..1e3);
    run(cases, s, |(seed, n, a, b)| {
        let u = gaussian_vec(&mut seeded(seed), n);
        let v = gaussian_vec(&mut seeded(seed ^ 1), n);
        let su: Vec<f32> = u.iter().map(|x| x * a).collect();
        let sv: Vec<f32> = v.iter().map(|x| x * b).collect();
        let base = cosine_sim(&u, &v).unwrap();
        prop_assert!((-1.0..=1.0).contains(&base));
        prop_assert!((cosine_sim(&su, &sv).unwrap() - base).abs() <= 1e-6);
        Ok(())
    })
}

pub fn accuracy_monotone_in_delta(cases: u32) -> Result<(), String> {
    let s = (any::<u64>(), 1usize..64, 0.1f64..64.0, 0.0f64..64.0);
    run(cases, s, |(seed, n, d1, extra)| {
        let mut rng = seeded(seed);
        let preds: Vec<_> = (0..n)
            .map(|_| {
                let mut p = || rng.random_range(0.0f64..128.0);
                ((p(), p()), (p(), p()))
            })
            .collect();
        let a = position_accuracy(&preds, d1).unwrap();
        let b = position_accuracy(&preds, d1 + extra).unwrap();
        prop_assert!((0.0..=1.0).contains(&a) && a <= b);
        Ok(())
    })
}

pub type Property = fn(u32) -> Result<(), String>;

/// Every property with its name.
#[allow(dead_code)]
pub fn all() -> Vec<(&'static str, Property)> {
    vec![
        ("softmax row sums", softmax_rows_sum_to_one),
        ("softmax shift invariance", softmax_shift_invariant),
        (
            "single-head argmax temperature invariance",
            argmax_temperature_invariant,
        ),
        ("attention permutation equivariance", attention_permutation_equivariant),
        ("convex-combination bounds", attention_convex_bounds),
        ("cosine scale invariance", cosine_scale_invariant),
        ("accuracy monotone in delta", accuracy_monotone_in_delta),
    ]
}
