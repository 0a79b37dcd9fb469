use super::*;
use crate::seed;
use proptest::prelude::*;
use rand::Rng;

fn layer(w: &[&[f64]], b: &[f64], act: Activation) -> Layer<f64> {
    Layer {
        weight: Matrix::from_rows(w).unwrap(),
        bias: b.to_vec(),
        activation: act,
    }
}

use super::check::{finite_difference, max_rel_err};

#[test]
fn identity_layer_passes_input_through() {
    let net = MlpParams::new(vec![layer(&[&[1.0, 0.0], &[0.0, 1.0]], &[0.0, 0.0], Activation::Identity)]).unwrap();
    assert_eq!(net.forward(&[1.5, -2.0]).unwrap(), vec![1.5, -2.0]);
}

#[test]
fn zero_weights_give_bias() {
    let net = MlpParams::new(vec![layer(&[&[0.0, 0.0, 0.0]], &[0.3], Activation::Identity)]).unwrap();
    assert_eq!(net.forward(&[5.0, -1.0, 9.0]).unwrap(), vec![0.3]);
}

#[test]
fn two_layer_forward_matches_hand_computation() {
    let net = MlpParams::new(vec![
        layer(&[&[0.5, -1.0], &[2.0, 0.25]], &[0.1, -0.2], Activation::Tanh),
        layer(&[&[1.0, -3.0]], &[0.5], Activation::Identity),
    ])
    .unwrap();
    // hidden = tanh([0.5 + 0.1, 2.0 - 0.2]) = tanh([0.6, 1.8])
    let expected = 0.6f64.tanh() - 3.0 * 1.8f64.tanh() + 0.5;
    let got = net.forward(&[1.0, 0.0]).unwrap();
    assert!((got[0] - expected).abs() < 1e-15);
}

#[test]
fn forward_rejects_wrong_input_length() {
    let net = MlpParams::new(vec![layer(&[&[1.0, 0.0]], &[0.0], Activation::Identity)]).unwrap();
    assert!(matches!(net.forward(&[1.0]), Err(NumericsError::Dimension { .. })));
}

#[test]
fn new_rejects_unchained_layers() {
    let r = MlpParams::new(vec![
        layer(&[&[1.0, 0.0]], &[0.0], Activation::Identity),
        layer(&[&[1.0, 0.0]], &[0.0], Activation::Identity),
    ]);
    assert!(matches!(r, Err(NumericsError::InvalidNetwork(_))));
}

#[test]
fn quadratic_gradient_by_hand() {
    let net = MlpParams::new(vec![layer(&[&[2.0, 0.0], &[0.0, 3.0]], &[0.0, 0.0], Activation::Identity)]).unwrap();
    let (loss, g) = grad(&net, |tape, vars| {
        let x = tape.constant(Matrix::row_vector(&[1.0, 0.0]));
        let y = tape.matmul_t(x, vars.layers()[0].0);
        Ok(tape.sum_squares(y))
    })
    .unwrap();
    assert_eq!(loss, 4.0);
    assert_eq!(g.layers()[0].weight.data(), &[4.0, 0.0, 0.0, 0.0]);
    // the bias was never used
    assert_eq!(g.layers()[0].bias, vec![0.0, 0.0]);
}

fn random_net(sizes: &[usize], seed: u64) -> MlpParams<f64> {
    let mut rng = seed::rng_from(seed);
    let mut net = MlpParams::init(sizes, Activation::Tanh, Activation::Identity, &mut rng);
    for l in net.layers_mut() {
        for b in &mut l.bias {
            *b = rng.gen_range(-0.5..0.5);
        }
    }
    net
}

#[test]
fn gradient_matches_finite_differences() {
    let net = random_net(&[2, 16, 16, 2], 11);
    let x = [0.3, -0.7];
    let target = [0.2, 0.9];
    let loss = |p: &MlpParams<f64>, tape: &mut Tape<f64>, vars: &MlpVars| {
        let xv = tape.constant(Matrix::row_vector(&x));
        let y = p.forward_on_tape(tape, vars, xv);
        let t = tape.constant(Matrix::row_vector(&target));
        let d = tape.sub(y, t);
        tape.sum_squares(d)
    };
    let (_, g) = grad(&net, |tape, vars| Ok(loss(&net, tape, vars))).unwrap();
    let f = |p: &MlpParams<f64>| {
        let y = p.forward(&x).unwrap();
        y.iter().zip(&target).map(|(a, b)| (a - b) * (a - b)).sum()
    };
    let fd = finite_difference(&net, &f, 1e-5);
    assert!(max_rel_err(&g, &fd, 1e-6) < 1e-4);
}

#[test]
fn relu_and_bce_gradients_match_finite_differences() {
    let mut rng = seed::rng_from(5);
    let net = MlpParams::<f64>::init(&[3, 8, 1], Activation::Relu, Activation::Identity, &mut rng);
    let rows: Vec<Vec<f64>> = (0..6).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let targets: Vec<f64> = (0..6).map(|i| (i % 2) as f64).collect();
    let x = Matrix::from_rows(&rows).unwrap();
    let (_, g) = grad(&net, |tape, vars| {
        let xv = tape.constant(x.clone());
        let z = net.forward_on_tape(tape, vars, xv);
        Ok(tape.bce_with_logits(z, targets.clone()))
    })
    .unwrap();
    let f = |p: &MlpParams<f64>| {
        let z = p.forward_batch(&x).unwrap();
        z.data()
            .iter()
            .zip(&targets)
            .map(|(&z, &y)| {
                let p = 1.0 / (1.0 + (-z).exp());
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / 6.0
    };
    let fd = finite_difference(&net, &f, 1e-5);
    assert!(max_rel_err(&g, &fd, 1e-6) < 1e-4);
}

#[test]
fn non_finite_intermediate_names_layer() {
    let net = MlpParams::new(vec![
        layer(&[&[1e308]], &[0.0], Activation::Identity),
        layer(&[&[10.0]], &[0.0], Activation::Identity),
    ])
    .unwrap();
    let err = grad(&net, |tape, vars| {
        let x = tape.constant(Matrix::row_vector(&[1.0]));
        let y = net.forward_on_tape(tape, vars, x);
        Ok(tape.sum(y))
    })
    .unwrap_err();
    match err {
        NumericsError::NonFinite { label } => assert!(label.contains("layer 1"), "{label}"),
        e => panic!("unexpected {e:?}"),
    }
}

#[test]
fn adam_zero_gradient_is_noop() {
    let mut p = vec![0.3, -1.2];
    let g = vec![0.0, 0.0];
    let mut st = AdamState::new(&p, AdamConfig::default());
    adam_step(&mut p, &g, &mut st).unwrap();
    assert_eq!(p, vec![0.3, -1.2]);
    assert_eq!(st.step_count(), 1);
}

#[test]
fn adam_first_step_closed_form() {
    let mut p: Vec<f64> = vec![0.0];
    let mut st = AdamState::new(&p, AdamConfig::with_lr(0.1));
    adam_step(&mut p, &vec![1.0], &mut st).unwrap();
    // m̂ = v̂ = 1 after bias correction
    assert!((p[0].abs() - 0.1).abs() < 1e-6);
    assert!(p[0] < 0.0);
}

#[test]
fn adam_two_steps_constant_gradient_do_not_grow() {
    let mut p: Vec<f64> = vec![0.0];
    let mut st = AdamState::new(&p, AdamConfig::with_lr(0.1));
    adam_step(&mut p, &vec![1.0], &mut st).unwrap();
    let d1 = p[0];
    adam_step(&mut p, &vec![1.0], &mut st).unwrap();
    let d2 = p[0] - d1;
    assert!(d2.abs() <= d1.abs() + 1e-9);
    assert_eq!(st.step_count(), 2);
}

#[test]
fn adam_rejects_shape_mismatch() {
    let mut p = vec![0.0, 1.0];
    let mut st = AdamState::new(&vec![0.0], AdamConfig::default());
    assert!(adam_step(&mut p, &vec![1.0, 1.0], &mut st).is_err());
}

#[test]
fn checkpoint_round_trip_and_truncation() {
    let net = random_net(&[3, 4, 2], 1);
    let mut nt = NamedTensors::new();
    net.to_named("pi", &mut nt);
    let bytes = nt.to_bytes();
    assert_eq!(&bytes[..4], b"VLAW");
    let back = NamedTensors::from_bytes(&bytes).unwrap();
    assert_eq!(MlpParams::<f64>::from_named("pi", &back).unwrap(), net);
    let err = NamedTensors::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
    assert!(matches!(err, NumericsError::CorruptCheckpoint { .. }));
    assert!(MlpParams::<f64>::from_named("wm", &back).is_err());
}

#[test]
fn f32_forward_tracks_f64() {
    let net = random_net(&[2, 8, 1], 3);
    let mut nt = NamedTensors::new();
    net.to_named("n", &mut nt);
    let net32 = MlpParams::<f32>::from_named("n", &nt).unwrap();
    let a = net.forward(&[0.25, -0.5]).unwrap()[0];
    let b = net32.forward(&[0.25, -0.5]).unwrap()[0];
    assert!((a - b as f64).abs() < 1e-5);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn grad_matches_fd_on_small_nets(seed in 0u64..10_000, hidden in 2usize..24, inp in 1usize..6, out in 1usize..4) {
        let net = random_net(&[inp, hidden, hidden, out], seed);
        let mut rng = seed::rng_from(seed ^ 0xabc);
        let x: Vec<f64> = (0..inp).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (_, g) = grad(&net, |tape, vars| {
            let xv = tape.constant(Matrix::row_vector(&x));
            let y = net.forward_on_tape(tape, vars, xv);
            Ok(tape.mean_squares(y))
        }).unwrap();
        let f = |p: &MlpParams<f64>| {
            let y = p.forward(&x).unwrap();
            y.iter().map(|v| v * v).sum::<f64>() / y.len() as f64
        };
        let fd = finite_difference(&net, &f, 1e-5);
        prop_assert!(max_rel_err(&g, &fd, 1e-6) < 1e-4);
    }

    #[test]
    fn forward_and_grad_are_deterministic(seed in 0u64..1000) {
        let net = random_net(&[3, 7, 2], seed);
        let x = [0.1, 0.2, -0.3];
        prop_assert_eq!(net.forward(&x).unwrap(), net.forward(&x).unwrap());
        let run = || grad(&net, |tape, vars| {
            let xv = tape.constant(Matrix::row_vector(&x));
            let y = net.forward_on_tape(tape, vars, xv);
            Ok(tape.sum_squares(y))
        }).unwrap();
        prop_assert_eq!(run().1, run().1);
    }

    #[test]
    fn adam_with_zero_lr_is_identity(seed in 0u64..1000) {
        let net = random_net(&[2, 5, 2], seed);
        let g = random_net(&[2, 5, 2], seed + 1);
        let mut p = net.clone();
        let mut st = AdamState::new(&p, AdamConfig::with_lr(0.0));
        adam_step(&mut p, &g, &mut st).unwrap();
        prop_assert_eq!(p, net);
    }
}
