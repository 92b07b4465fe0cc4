//! Oracles shared by the integration tests and the acceptance run.
#![allow(dead_code)]

use catnet::attention::{multi_head_attention, AttentionConfig, MhaParams};
use catnet::params::ParamStore;
use catnet::prototype::{double_threshold, masked_average_pooling, ProtoConfig};
use catnet::tensor::{Tape, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const D: usize = 8;

pub fn attention_config() -> AttentionConfig {
    AttentionConfig {
        num_heads: 2,
        ..AttentionConfig::new(D)
    }
}

pub fn attention_params() -> ParamStore<f64> {
    let mut store = ParamStore::new();
    MhaParams::init(&mut store, "mha", &attention_config(), &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
    store
}

pub fn random_tokens(rng: &mut ChaCha8Rng, n: usize) -> Tensor<f64> {
    Tensor::from_fn(&[n, D], |_| rng.random_range(-2.0..2.0)).unwrap()
}

/// Cycles through single-token, full and random-density masks; never empty.
pub fn random_mask(rng: &mut ChaCha8Rng, n: usize, case: usize) -> Vec<f64> {
    match case % 4 {
        0 => {
            let mut m = vec![0.0; n];
            m[rng.random_range(0..n)] = 1.0;
            m
        }
        1 => vec![1.0; n],
        _ => {
            let p = rng.random_range(0.05..0.95);
            let mut m: Vec<f64> = (0..n).map(|_| f64::from(rng.random_bool(p))).collect();
            if m.iter().all(|&v| v == 0.0) {
                m[rng.random_range(0..n)] = 1.0;
            }
            m
        }
    }
}

/// Rows `idx` of a `[T×W]` tensor, in that order.
pub fn rows(t: &Tensor<f64>, idx: &[usize]) -> Tensor<f64> {
    let w = t.dims()[1];
    Tensor::from_fn(&[idx.len(), w], |i| t.data()[idx[i / w] * w + i % w]).unwrap()
}

pub struct Attended {
    pub output: Tensor<f64>,
    pub weights: Vec<Tensor<f64>>,
}

pub fn attend(store: &ParamStore<f64>, dst: &Tensor<f64>, src: &Tensor<f64>, mask: Option<&[f64]>) -> Attended {
    let mut tape = Tape::new();
    let b = store.bind(&mut tape);
    let p = MhaParams::bind(&b, "mha").unwrap();
    let (dv, sv) = (tape.constant(dst.clone()), tape.constant(src.clone()));
    let m = mask.map(|m| Tensor::new(&[m.len()], m.to_vec()).unwrap());
    let out = multi_head_attention(&mut tape, dv, sv, m.as_ref(), &p, &attention_config()).unwrap();
    Attended {
        output: tape.value(out.output).clone(),
        weights: out.weights.iter().map(|&w| tape.value(w).clone()).collect(),
    }
}

#[derive(Debug, Default)]
pub struct AttentionSweep {
    pub cases: usize,
    /// Largest |row sum − 1| over every head and row.
    pub worst_row: f64,
    /// Masked positions that received any weight at all.
    pub masked_nonzero: usize,
    /// Largest output difference against attention over the kept keys only.
    pub worst_delete: f64,
    /// Largest difference after permuting the source tokens.
    pub worst_perm: f64,
}

pub fn attention_sweep(cases: usize, seed: u64) -> AttentionSweep {
    let store = attention_params();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = AttentionSweep { cases, ..AttentionSweep::default() };
    for case in 0..cases {
        let (tq, tk) = (rng.random_range(1..10), rng.random_range(1..20));
        let dst = random_tokens(&mut rng, tq);
        let src = random_tokens(&mut rng, tk);
        let mask = random_mask(&mut rng, tk, case);
        let full = attend(&store, &dst, &src, Some(&mask));

        for w in &full.weights {
            for r in 0..tq {
                let row = &w.data()[r * tk..(r + 1) * tk];
                s.worst_row = s.worst_row.max((row.iter().sum::<f64>() - 1.0).abs());
                s.masked_nonzero += mask.iter().zip(row).filter(|&(&m, &v)| m == 0.0 && v != 0.0).count();
            }
        }

        let kept: Vec<usize> = (0..tk).filter(|&i| mask[i] == 1.0).collect();
        let reduced = attend(&store, &dst, &rows(&src, &kept), None);
        s.worst_delete = s.worst_delete.max(full.output.max_abs_diff(&reduced.output));

        let mut perm: Vec<usize> = (0..tk).collect();
        perm.shuffle(&mut rng);
        let pmask: Vec<f64> = perm.iter().map(|&i| mask[i]).collect();
        let permuted = attend(&store, &dst, &rows(&src, &perm), Some(&pmask));
        s.worst_perm = s.worst_perm.max(full.output.max_abs_diff(&permuted.output));
        for (w, pw) in full.weights.iter().zip(&permuted.weights) {
            for r in 0..tq {
                for (j, &i) in perm.iter().enumerate() {
                    s.worst_perm = s.worst_perm.max((w.at(&[r, i]) - pw.at(&[r, j])).abs());
                }
            }
        }
    }
    s
}

/// Nested-loop masked average pooling of `features[K×D×h×w]` under
/// `masks[K×h×w×C]`; an empty shot contributes zero.
pub fn brute_force_pooling(features: &Tensor<f64>, masks: &Tensor<f64>) -> Vec<Vec<f64>> {
    let [k, d, h, w] = [0, 1, 2, 3].map(|i| features.dims()[i]);
    let classes = masks.dims()[3];
    let mut out = vec![vec![0.0; d]; classes];
    for (c, proto) in out.iter_mut().enumerate() {
        for shot in 0..k {
            let mut count = 0.0;
            let mut sum = vec![0.0; d];
            for y in 0..h {
                for x in 0..w {
                    let m = masks.at(&[shot, y, x, c]);
                    count += m;
                    for (ch, s) in sum.iter_mut().enumerate() {
                        *s += features.at(&[shot, ch, y, x]) * m;
                    }
                }
            }
            if count > 0.0 {
                for (p, s) in proto.iter_mut().zip(&sum) {
                    *p += s / count / k as f64;
                }
            }
        }
    }
    out
}

/// Case 0 a single pixel, case 1 the full grid, otherwise random density.
fn mask_plane(rng: &mut ChaCha8Rng, h: usize, w: usize, case: usize) -> Vec<f64> {
    match case % 3 {
        0 => {
            let mut m = vec![0.0; h * w];
            m[rng.random_range(0..h * w)] = 1.0;
            m
        }
        1 => vec![1.0; h * w],
        _ => {
            let p = rng.random_range(0.0..1.0);
            (0..h * w).map(|_| f64::from(rng.random_bool(p))).collect()
        }
    }
}

#[derive(Debug, Default)]
pub struct PoolingSweep {
    pub cases: usize,
    pub worst: f64,
    pub single_pixel_planes: usize,
    pub full_planes: usize,
}

pub fn pooling_sweep(cases: usize, seed: u64) -> PoolingSweep {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = PoolingSweep { cases, ..PoolingSweep::default() };
    for case in 0..cases {
        let (k, d, h, w, c) = (
            rng.random_range(1..4),
            rng.random_range(1..6),
            rng.random_range(1..7),
            rng.random_range(1..7),
            rng.random_range(1..4),
        );
        let features = Tensor::from_fn(&[k, d, h, w], |_| rng.random_range(-3.0..3.0)).unwrap();
        let planes: Vec<Vec<f64>> = (0..k * c).map(|i| mask_plane(&mut rng, h, w, case + i)).collect();
        for p in &planes {
            let on = p.iter().filter(|&&v| v == 1.0).count();
            s.single_pixel_planes += usize::from(on == 1);
            s.full_planes += usize::from(on == p.len());
        }
        let masks = Tensor::from_fn(&[k, h, w, c], |i| {
            let (shot, rest) = (i / (h * w * c), i % (h * w * c));
            planes[shot * c + rest % c][rest / c]
        })
        .unwrap();

        let mut tape = Tape::new();
        let fv = tape.constant(features.clone());
        let protos = masked_average_pooling(&mut tape, fv, &masks).unwrap();
        assert_eq!(protos.len(), c);
        for (p, e) in protos.iter().zip(brute_force_pooling(&features, &masks)) {
            for (a, b) in tape.value(p.vector).data().iter().zip(&e) {
                s.worst = s.worst.max((a - b).abs());
            }
        }
    }
    s
}

/// Random probability maps and threshold pairs; returns the number of
/// pixels inside the strict mask but outside the dilated one.
pub fn containment_violations(cases: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut violations = 0;
    for case in 0..cases {
        let n = rng.random_range(1..300);
        let probs: Vec<f64> = (0..n)
            .map(|_| match case % 3 {
                0 => rng.random_range(0.0..=1.0),
                1 => [0.0, 0.4, 0.5, 1.0][rng.random_range(0..4)],
                _ => rng.random_range(0.35..0.55),
            })
            .collect();
        let tau = rng.random_range(0.1..0.9);
        let cfg = ProtoConfig { tau, tau_hat: tau * rng.random_range(0.0..1.0), ..ProtoConfig::default() };
        let pair = double_threshold(&Tensor::new(&[1, n], probs).unwrap(), &cfg).unwrap();
        violations += pair
            .mask
            .data()
            .iter()
            .zip(pair.dilated.data())
            .filter(|&(&m, &d)| m > d)
            .count();
    }
    violations
}
