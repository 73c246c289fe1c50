mod common;

use common::*;
use qsnn::autodiff::{NodeId, Tape};
use qsnn::model::{parse_architecture, Network, NetworkOptions};
use qsnn::neuron::{LifParams, SpikeMode};
use qsnn::quant::{quantize, quantize_ste, QuantSpec};
use qsnn::rng::{stream, Stream};
use qsnn::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;

/// Check `loss = Σ r ⊙ f(inputs)` against central differences in every input.
fn check_op(name: &str, inputs: Vec<Tensor>, f: impl Fn(&mut Tape, &[NodeId]) -> NodeId) {
    let eval = |inputs: &[Tensor], weights: Option<&Tensor>| -> (f64, Vec<Tensor>, Tensor) {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone()).unwrap()).collect();
        let out = f(&mut tape, &ids);
        let w = weights.cloned().unwrap_or_else(|| {
            let shape = tape.value(out).shape().to_vec();
            Tensor::from_fn(&shape, |i| 0.5 + ((i * 7919) % 13) as f64 / 13.0)
        });
        let wl = tape.leaf(w.clone()).unwrap();
        let prod = tape.mul(out, wl).unwrap();
        let loss = tape.sum(prod).unwrap();
        let g = tape.backward(loss).unwrap();
        let grads = ids.iter().zip(inputs).map(|(&id, t)| g.get_or_zeros(id, t)).collect();
        (tape.value(loss).data()[0], grads, w)
    };
    let (_, analytic, w) = eval(&inputs, None);
    let mut numeric = vec![];
    for (k, t) in inputs.iter().enumerate() {
        let mut g = Tensor::zeros(t.shape());
        for j in 0..t.len() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[j] += H;
            let mut minus = inputs.clone();
            minus[k].data_mut()[j] -= H;
            g.data_mut()[j] = (eval(&plus, Some(&w)).0 - eval(&minus, Some(&w)).0) / (2.0 * H);
        }
        numeric.push(g);
    }
    let err = max_relative_error(&analytic, &numeric, 1e-6);
    assert!(err < 1e-3, "{name}: relative error {err:e}");
}

#[test]
fn builtin_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = random_tensor(&[2, 3], 1.0, &mut rng);
    let b = random_tensor(&[2, 3], 1.0, &mut rng);
    let c = random_tensor(&[2, 3], 1.0, &mut rng);
    check_op("add", vec![a.clone(), b.clone()], |t, i| t.add(i[0], i[1]).unwrap());
    check_op("sub", vec![a.clone(), b.clone()], |t, i| t.sub(i[0], i[1]).unwrap());
    check_op("mul", vec![a.clone(), b.clone()], |t, i| t.mul(i[0], i[1]).unwrap());
    check_op("scale", vec![a.clone()], |t, i| t.scale(i[0], -1.7).unwrap());
    let mask = Tensor::new(vec![2, 3], vec![0.0, 2.0, 2.0, 0.0, 2.0, 0.0]).unwrap();
    check_op("mask_mul", vec![a.clone()], move |t, i| {
        t.mask_mul(i[0], mask.clone()).unwrap()
    });
    check_op("add_n", vec![a.clone(), b.clone(), c.clone()], |t, i| {
        t.add_n(i).unwrap()
    });
    check_op("sum", vec![a.clone()], |t, i| t.sum(i[0]).unwrap());
    check_op("reshape", vec![a.clone()], |t, i| t.reshape(i[0], &[3, 2]).unwrap());

    let x = random_tensor(&[2, 2, 5, 6], 1.0, &mut rng);
    let k = random_tensor(&[3, 2, 3, 2], 1.0, &mut rng);
    let bias = random_tensor(&[3], 1.0, &mut rng);
    check_op("conv2d", vec![x.clone(), k, bias], |t, i| {
        t.conv2d(i[0], i[1], i[2]).unwrap()
    });
    check_op(
        "avgpool2d",
        vec![random_tensor(&[2, 2, 4, 6], 1.0, &mut rng)],
        |t, i| t.avgpool2d(i[0], 2).unwrap(),
    );
    let xd = random_tensor(&[3, 4], 1.0, &mut rng);
    let wd = random_tensor(&[4, 5], 1.0, &mut rng);
    let bd = random_tensor(&[5], 1.0, &mut rng);
    check_op("dense", vec![xd, wd, bd], |t, i| t.dense(i[0], i[1], i[2]).unwrap());
    check_op("lif_update", vec![a.clone(), b.clone(), c.clone()], |t, i| {
        t.lif_update(i[0], i[1], i[2], 0.8, 1.3, false).unwrap()
    });
    let mut tape = Tape::new();
    let (u, cur, z) = (
        tape.leaf(a.clone()).unwrap(),
        tape.leaf(b.clone()).unwrap(),
        tape.leaf(c.clone()).unwrap(),
    );
    let next = tape.lif_update(u, cur, z, 0.8, 1.3, true).unwrap();
    let s = tape.sum(next).unwrap();
    let g = tape.backward(s).unwrap();
    assert!(g.get(z).is_none_or(|g| g.data().iter().all(|&v| v == 0.0)));
    assert!(g.get(u).unwrap().data().iter().all(|&v| v == 0.8));
    let xb = random_tensor(&[3, 2, 2, 2], 1.0, &mut rng);
    let gamma = Tensor::from_vec(vec![1.2, 0.7]).unwrap();
    let shift = Tensor::from_vec(vec![0.1, -0.3]).unwrap();
    check_op(
        "batchnorm(batch stats)",
        vec![xb.clone(), gamma.clone(), shift.clone()],
        |t, i| t.batchnorm(i[0], i[1], i[2], 1e-5, None).unwrap().0,
    );
    check_op("batchnorm(running stats)", vec![xb, gamma, shift], |t, i| {
        t.batchnorm(i[0], i[1], i[2], 1e-5, Some((&[0.2, -0.1], &[1.5, 0.4])))
            .unwrap()
            .0
    });
    let target = random_tensor(&[2, 3], 3.0, &mut rng);
    check_op("squared_error", vec![a], move |t, i| {
        t.squared_error(i[0], target.clone()).unwrap()
    });
}

#[test]
fn bptt_gradients_match_finite_differences_in_smoothed_mode() {
    let steps = 10;
    let mut worst: f64 = 0.0;
    for instance in 0..20u64 {
        let mut net = smoothed_net(instance, instance % 2 == 1);
        let n_params: usize = net.params().iter().map(Tensor::len).sum();
        assert!(n_params <= 200, "{n_params} parameters");
        let mut rng = ChaCha8Rng::seed_from_u64(100 + instance);
        let x = Tensor::from_fn(&[2, 1, 8, 8], |_| rng.gen_range(0.0..1.0));
        let labels = [rng.gen_range(0..3), rng.gen_range(0..3)];
        let analytic = grads_of(&mut net, &x, &labels, steps);
        let numeric = finite_difference(&mut net, &x, &labels, steps, H);
        let err = max_relative_error(&analytic, &numeric, 1e-6);
        worst = worst.max(err);
        assert!(err < 1e-3, "instance {instance}: relative error {err:e}");
    }
    println!("worst relative error over 20 instances: {worst:e}");
}

#[test]
fn ste_gradient_equals_gradient_at_quantized_weights() {
    let arch = parse_architecture("4Conv3-AP2-Dense5", &[1, 8, 8]).unwrap();
    let base = NetworkOptions {
        lif: LifParams::new(0.9, 0.5, 4.0).unwrap(),
        quant: QuantSpec::int4(),
        batchnorm: false,
        dropout: 0.0,
        detach_reset: false,
        spike_mode: SpikeMode::Hard,
    };
    for seed in 0..5 {
        let mut q_net = Network::new(arch.clone(), base, &mut stream(seed, Stream::Init, 0)).unwrap();
        let mut f_net = Network::new(
            arch.clone(),
            NetworkOptions {
                quant: QuantSpec::disabled(),
                ..base
            },
            &mut stream(seed, Stream::Init, 0),
        )
        .unwrap();
        for i in q_net.weight_indices() {
            f_net.params_mut()[i] = quantize(&q_net.params()[i], &QuantSpec::int4());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::from_fn(&[3, 1, 8, 8], |_| rng.gen_range(0.0..2.0));
        let labels = [0, 3, 4];
        let gq = grads_of(&mut q_net, &x, &labels, 6);
        let gf = grads_of(&mut f_net, &x, &labels, 6);
        assert_eq!(gq, gf, "seed {seed}");
        assert!(gq.iter().any(|g| g.data().iter().any(|&v| v != 0.0)));
    }
}

#[test]
fn ste_node_passes_upstream_gradient_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let w = random_tensor(&[4, 3], 1.0, &mut rng);
    let x = random_tensor(&[2, 4], 1.0, &mut rng);
    let b = Tensor::zeros(&[3]);

    let mut t1 = Tape::new();
    let (wl, xl, bl) = (
        t1.leaf(w.clone()).unwrap(),
        t1.leaf(x.clone()).unwrap(),
        t1.leaf(b.clone()).unwrap(),
    );
    let wq = quantize_ste(&mut t1, wl, &QuantSpec::int4()).unwrap();
    let y = t1.dense(xl, wq, bl).unwrap();
    let s = t1.sum(y).unwrap();
    let g1 = t1.backward(s).unwrap();

    let mut t2 = Tape::new();
    let wq_leaf = t2.leaf(quantize(&w, &QuantSpec::int4())).unwrap();
    let (xl2, bl2) = (t2.leaf(x).unwrap(), t2.leaf(b).unwrap());
    let y2 = t2.dense(xl2, wq_leaf, bl2).unwrap();
    let s2 = t2.sum(y2).unwrap();
    let g2 = t2.backward(s2).unwrap();

    assert_eq!(g1.get(wl).unwrap(), g2.get(wq_leaf).unwrap());
    assert_eq!(g1.get(wq).unwrap(), g1.get(wl).unwrap());
}
