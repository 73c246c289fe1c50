mod common;

use common::*;
use qsnn::autodiff::Tape;
use qsnn::quant::{quantize, QuantSpec};
use qsnn::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn conv2d_matches_nested_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..200 {
        let (n, cin, cout) = (rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(1..5));
        let (kh, kw) = (rng.gen_range(1..6), rng.gen_range(1..6));
        let (h, w) = (kh + rng.gen_range(0..7), kw + rng.gen_range(0..7));
        let x = random_tensor(&[n, cin, h, w], 2.0, &mut rng);
        let k = random_tensor(&[cout, cin, kh, kw], 1.0, &mut rng);
        let b = random_tensor(&[cout], 1.0, &mut rng);
        let mut tape = Tape::new();
        let (xi, ki, bi) = (
            tape.leaf(x.clone()).unwrap(),
            tape.leaf(k.clone()).unwrap(),
            tape.leaf(b.clone()).unwrap(),
        );
        let y = tape.conv2d(xi, ki, bi).unwrap();
        let oracle = conv2d_oracle(&x, &k, &b);
        assert_eq!(tape.value(y).shape(), oracle.shape(), "case {case}");
        for (a, o) in tape.value(y).data().iter().zip(oracle.data()) {
            assert!((a - o).abs() <= 1e-12, "case {case}: {a} vs {o}");
        }
    }
}

#[test]
fn conv2d_on_binary_spike_maps_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..50 {
        let x = Tensor::from_fn(&[2, 3, 9, 9], |_| if rng.gen_bool(0.15) { 1.0 } else { 0.0 });
        let k = random_tensor(&[4, 3, 5, 5], 1.0, &mut rng);
        let b = random_tensor(&[4], 1.0, &mut rng);
        let mut tape = Tape::new();
        let (xi, ki, bi) = (
            tape.leaf(x.clone()).unwrap(),
            tape.leaf(k.clone()).unwrap(),
            tape.leaf(b.clone()).unwrap(),
        );
        let y = tape.conv2d(xi, ki, bi).unwrap();
        for (a, o) in tape.value(y).data().iter().zip(conv2d_oracle(&x, &k, &b).data()) {
            assert!((a - o).abs() <= 1e-12);
        }
    }
}

#[test]
fn quantize_matches_codebook_argmin_on_ten_thousand_tensors() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let spec = QuantSpec::int4();
    for case in 0..10_000 {
        let len = rng.gen_range(1..40);
        let scale = 10f64.powf(rng.gen_range(-3.0..2.0));
        let mut data: Vec<f64> = (0..len).map(|_| rng.gen_range(-scale..scale)).collect();
        if case % 10 == 0 {
            // Exact half-steps exercise the tie rule.
            data = (0..len).map(|i| (i as f64 - len as f64 / 2.0) * 0.5).collect();
        }
        let w = Tensor::new(vec![len], data.clone()).unwrap();
        let q = quantize(&w, &spec);
        assert_eq!(q.data(), quantize_oracle(&data).as_slice(), "case {case}: {data:?}");
    }
}
