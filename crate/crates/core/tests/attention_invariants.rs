//! Masked attention invariants over random mask patterns.

mod common;

use catnet::attention::{cross_masked_attention, MhaParams, TokenSequence};
use catnet::tensor::{Tape, Tensor};
use common::{attention_config as config, attention_params as params, random_mask, random_tokens, rows};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn masked_attention_invariants_hold_over_random_masks() {
    let s = common::attention_sweep(1000, 2024);
    assert!(s.worst_row <= 1e-6, "row sums off by {}", s.worst_row);
    assert_eq!(s.masked_nonzero, 0);
    assert!(s.worst_delete <= 1e-5, "deletion oracle off by {}", s.worst_delete);
    assert!(s.worst_perm <= 1e-9, "permutation changed the result by {}", s.worst_perm);
}

#[test]
fn cross_block_matches_block_over_foreground_tokens_only() {
    let store = params();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..200 {
        let (tq, tk) = (rng.random_range(1..8), rng.random_range(2..16));
        let dst = random_tokens(&mut rng, tq);
        let src = random_tokens(&mut rng, tk);
        let mask = random_mask(&mut rng, tk, case);
        let kept: Vec<usize> = (0..tk).filter(|&i| mask[i] == 1.0).collect();
        let run = |src: &Tensor<f64>, mask: Vec<f64>| {
            let mut tape = Tape::new();
            let b = store.bind(&mut tape);
            let p = MhaParams::bind(&b, "mha").unwrap();
            let s = TokenSequence { tensor: tape.constant(src.clone()), origin: (1, src.dims()[0]) };
            let d = TokenSequence { tensor: tape.constant(dst.clone()), origin: (1, tq) };
            let m = Tensor::new(&[mask.len()], mask).unwrap();
            let out = cross_masked_attention(&mut tape, &s, &d, &m, &p, &config()).unwrap();
            tape.value(out.tensor).clone()
        };
        let a = run(&src, mask);
        let b = run(&rows(&src, &kept), vec![1.0; kept.len()]);
        assert!(a.max_abs_diff(&b) <= 1e-5, "case {case}");
    }
}

#[test]
fn empty_mask_leaves_destination_unattended() {
    let store = params();
    let mut tape = Tape::new();
    let b = store.bind(&mut tape);
    let p = MhaParams::bind(&b, "mha").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let s = TokenSequence { tensor: tape.constant(random_tokens(&mut rng, 5)), origin: (1, 5) };
    let d = TokenSequence { tensor: tape.constant(random_tokens(&mut rng, 3)), origin: (1, 3) };
    let out = cross_masked_attention(&mut tape, &s, &d, &Tensor::zeros(&[5]).unwrap(), &p, &config()).unwrap();
    assert!(tape.value(out.tensor).is_finite());
    assert_eq!(tape.warnings().total(), 1);
}
