use super::*;
use std::path::Path;
use crate::dropout::honest_mask;

fn random_matrix(rows: usize, cols: usize, rng: &mut RngStream) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.uniform() * 2.0 - 1.0).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

struct Honest<'a>(&'a mut RngStream);

impl DropoutDriver for Honest<'_> {
    fn mask(&mut self, _slot: usize, rate: f64, input: &Matrix) -> Result<DropMask> {
        Ok(honest_mask(rate, input.rows(), input.cols(), self.0)?.mask)
    }
}

fn small_net(widths: &[usize], rate: f64, seed: u64) -> Network {
    let spec = ModelSpec::mlp(widths, rate).unwrap();
    Network::init(spec, &mut RngStream::new(seed)).unwrap()
}

#[test]
fn spec_validation() {
    assert!(ModelSpec::mlp(&[4], 0.5).is_err());
    assert!(ModelSpec::mlp(&[4, 0, 2], 0.5).is_err());
    assert!(ModelSpec::mlp(&[4, 3, 2], 1.0).is_err());
    let bad_slot = ModelSpec {
        widths: vec![4, 3, 2],
        dropout: vec![DropoutSlot {
            after_layer: 1,
            rate: 0.5,
        }],
    };
    assert!(bad_slot.validate().is_err());
    let spec = ModelSpec::mlp(&[784, 512, 256, 128, 10], 0.5).unwrap();
    assert_eq!(spec.dropout.len(), 3);
    assert_eq!(spec.slot_width(2), Some(128));
    assert_eq!(spec.classes(), 10);
}

#[test]
fn init_respects_kaiming_bound_and_zero_bias() {
    let net = small_net(&[50, 20, 3], 0.5, 1);
    let bound = (6.0f64 / 50.0).sqrt();
    let w = net.layers()[0].weights.data();
    assert!(w.iter().all(|v| v.abs() <= bound));
    assert!(w.iter().any(|v| v.abs() > 0.9 * bound));
    assert!(net.layers().iter().all(|l| l.bias.iter().all(|&b| b == 0.0)));
    assert_eq!(net.layers()[1].activation, Activation::Identity);
}

#[test]
fn forward_rejects_wrong_width() {
    let net = small_net(&[5, 4, 2], 0.5, 2);
    let x = Matrix::zeros(3, 4);
    assert!(matches!(net.predict(&x), Err(Error::Shape { .. })));
}

#[test]
fn eval_mode_ignores_driver_and_draws_nothing() {
    let net = small_net(&[6, 5, 4, 3], 0.5, 3);
    let x = random_matrix(7, 6, &mut RngStream::new(9));
    let mut rng = RngStream::new(11);
    let a = net.forward(&x, Mode::Eval, &mut Honest(&mut rng)).unwrap();
    assert_eq!(rng.draws(), 0);
    let b = net.forward(&x, Mode::Eval, &mut NoDropout).unwrap();
    assert_eq!(a.logits(), b.logits());
    assert!(a.masks.iter().all(Option::is_none));
}

#[test]
fn honest_rate_zero_train_equals_eval() {
    let spec = ModelSpec::mlp(&[6, 5, 4, 3], 0.0).unwrap();
    let net = Network::init(spec, &mut RngStream::new(4)).unwrap();
    let x = random_matrix(7, 6, &mut RngStream::new(9));
    let mut rng = RngStream::new(1);
    let train = net.forward(&x, Mode::Train, &mut Honest(&mut rng)).unwrap();
    assert_eq!(train.logits(), &net.predict(&x).unwrap());
}

#[test]
fn fixed_mask_hand_trace() {
    // 2x3 input -> dense 3->2 (ReLU) -> slot r=0.5 -> dense 2->1.
    let spec = ModelSpec {
        widths: vec![3, 2, 1],
        dropout: vec![DropoutSlot {
            after_layer: 0,
            rate: 0.5,
        }],
    };
    let l0 = DenseLayer {
        weights: Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap(),
        bias: vec![0.0, 0.5],
        activation: Activation::Relu,
    };
    let l1 = DenseLayer {
        weights: Matrix::from_rows(&[vec![2.0], vec![-1.0]]).unwrap(),
        bias: vec![0.25],
        activation: Activation::Identity,
    };
    let net = Network::from_parts(spec, vec![l0, l1]).unwrap();
    let x = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![0.5, -1.0, 0.0]]).unwrap();
    let mask = DropMask::from_keep(2, 2, &[true, false, false, true]).unwrap();
    let pass = net.forward(&x, Mode::Train, &mut FixedMasks(vec![mask])).unwrap();
    // hidden = relu(xW + b) = [[4, 5.5], [0.5, 0]]; masked/0.5 = [[8, 0], [0, 0]].
    assert_eq!(pass.outputs[0].data(), &[4.0, 5.5, 0.5, 0.0]);
    assert_eq!(pass.inputs[1].data(), &[8.0, 0.0, 0.0, 0.0]);
    assert_eq!(pass.logits().data(), &[16.25, 0.25]);
}

#[test]
fn loss_uniform_logits_is_ln_classes() {
    let logits = Matrix::filled(3, 10, 0.7);
    let (loss, grad) = softmax_cross_entropy(&logits, &[0, 4, 9]).unwrap();
    assert!((loss - 10f64.ln()).abs() < 1e-12);
    assert!((loss - std::f64::consts::LN_10).abs() < 1e-6);
    for i in 0..3 {
        let s: f64 = grad.row(i).iter().sum();
        assert!(s.abs() < 1e-15);
    }
}

#[test]
fn loss_vanishes_with_margin() {
    let mut last = f64::INFINITY;
    for margin in [1.0, 10.0, 100.0, 1000.0] {
        let logits = Matrix::from_rows(&[vec![margin, 0.0, 0.0]]).unwrap();
        let (loss, _) = softmax_cross_entropy(&logits, &[0]).unwrap();
        assert!(loss.is_finite() && loss >= 0.0 && loss <= last);
        last = loss;
    }
    assert_eq!(last, 0.0);
}

#[test]
fn loss_rejects_bad_labels() {
    let logits = Matrix::zeros(2, 3);
    assert!(softmax_cross_entropy(&logits, &[0]).is_err());
    assert!(softmax_cross_entropy(&logits, &[0, 3]).is_err());
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let logits = random_matrix(4, 3, &mut RngStream::new(21)).map(|v| v * 3.0);
    let labels = [2, 0, 1, 1];
    let (_, grad) = softmax_cross_entropy(&logits, &labels).unwrap();
    let h = 1e-5;
    for k in 0..logits.len() {
        let mut p = logits.clone();
        p.data_mut()[k] += h;
        let mut m = logits.clone();
        m.data_mut()[k] -= h;
        let fd = (softmax_cross_entropy(&p, &labels).unwrap().0
            - softmax_cross_entropy(&m, &labels).unwrap().0)
            / (2.0 * h);
        let a = grad.data()[k];
        assert!((a - fd).abs() / a.abs().max(fd.abs()) < 1e-6, "{k}: {a} vs {fd}");
    }
}

#[test]
fn full_model_gradient_matches_finite_differences() {
    let worst = gradcheck::reference_check(33, 1500).unwrap();
    assert!(worst < 1e-4, "max relative error {worst}");
}

#[test]
fn r_zero_all_ones_mask_matches_plain_network() {
    let spec = ModelSpec::mlp(&[5, 4, 3], 0.0).unwrap();
    let net = Network::init(spec.clone(), &mut RngStream::new(8)).unwrap();
    let plain = Network::from_parts(
        ModelSpec {
            widths: spec.widths.clone(),
            dropout: vec![],
        },
        net.layers().to_vec(),
    )
    .unwrap();
    let x = random_matrix(6, 5, &mut RngStream::new(2));
    let y = [0, 1, 2, 0, 1, 2];
    let with = net
        .forward(&x, Mode::Train, &mut FixedMasks(vec![DropMask::keep_all(6, 4)]))
        .unwrap();
    let without = plain.forward(&x, Mode::Train, &mut NoDropout).unwrap();
    let g1 = net.backward(&with, &softmax_cross_entropy(with.logits(), &y).unwrap().1).unwrap();
    let g2 = plain
        .backward(&without, &softmax_cross_entropy(without.logits(), &y).unwrap().1)
        .unwrap();
    assert_eq!(g1, g2);
}

#[test]
fn dropped_unit_receives_no_gradient() {
    let net = small_net(&[5, 4, 3], 0.5, 12);
    let x = random_matrix(6, 5, &mut RngStream::new(3)).map(|v| v.abs() + 0.1);
    let y = [0, 1, 2, 0, 1, 2];
    // Unit 2 dropped in every row.
    let keep: Vec<bool> = (0..24).map(|k| k % 4 != 2).collect();
    let mask = DropMask::from_keep(6, 4, &keep).unwrap();
    let pass = net.forward(&x, Mode::Train, &mut FixedMasks(vec![mask])).unwrap();
    let g = net.backward(&pass, &softmax_cross_entropy(pass.logits(), &y).unwrap().1).unwrap();
    assert!(g.layers[1].weights.row(2).iter().all(|&v| v == 0.0));
    assert!((0..5).all(|i| g.layers[0].weights.get(i, 2) == 0.0));
    assert_eq!(g.layers[0].bias[2], 0.0);
}

#[test]
fn dropout_gradient_is_mask_over_keep_rate() {
    let mut rng = RngStream::new(5);
    let input = random_matrix(3, 4, &mut rng);
    let rate = 0.3;
    let mask = honest_mask(rate, 3, 4, &mut rng).unwrap().mask;
    let h = 1e-6;
    for k in 0..input.len() {
        let mut p = input.clone();
        p.data_mut()[k] += h;
        let mut m = input.clone();
        m.data_mut()[k] -= h;
        let out_p = apply_mask(&p, &mask, rate).unwrap();
        let out_m = apply_mask(&m, &mask, rate).unwrap();
        let d = (out_p.data()[k] - out_m.data()[k]) / (2.0 * h);
        let expected = mask.matrix().data()[k] / (1.0 - rate);
        assert!((d - expected).abs() < 1e-8);
    }
}

#[test]
fn honest_dropout_is_unbiased_in_expectation() {
    let input = Matrix::from_rows(&[vec![1.0, -2.0, 0.5, 3.0]]).unwrap();
    let mut rng = RngStream::new(99);
    let trials = 20_000;
    let mut acc = [0.0; 4];
    for _ in 0..trials {
        let mask = honest_mask(0.5, 1, 4, &mut rng).unwrap().mask;
        let out = apply_mask(&input, &mask, 0.5).unwrap();
        for (a, v) in acc.iter_mut().zip(out.data()) {
            *a += v;
        }
    }
    for (a, x) in acc.iter().zip(input.data()) {
        let mean = a / trials as f64;
        assert!((mean - x).abs() <= 0.02 * x.abs(), "{mean} vs {x}");
    }
}

#[test]
fn stale_forward_pass_is_rejected() {
    let mut net = small_net(&[5, 4, 3], 0.5, 1);
    let x = random_matrix(2, 5, &mut RngStream::new(3));
    let pass = net.forward(&x, Mode::Eval, &mut NoDropout).unwrap();
    let g = Matrix::zeros(2, 3);
    assert!(net.backward(&pass, &g).is_ok());
    net.layers_mut()[0].bias[0] += 1.0;
    assert!(matches!(net.backward(&pass, &g), Err(Error::Contract(_))));
    assert!(matches!(net.backward(&pass, &Matrix::zeros(3, 3)), Err(Error::Contract(_))));
}

#[test]
fn forward_is_deterministic_for_a_seed() {
    let net = small_net(&[6, 5, 4, 3], 0.5, 3);
    let x = random_matrix(7, 6, &mut RngStream::new(9));
    let run = |seed| {
        let mut rng = RngStream::new(seed);
        net.forward(&x, Mode::Train, &mut Honest(&mut rng)).unwrap().logits().clone()
    };
    assert_eq!(run(4), run(4));
    assert_ne!(run(4), run(5));
}

#[test]
fn adam_zero_gradient_leaves_parameters() {
    let mut p = vec![1.0, -2.0, 3.5];
    let g = vec![0.0; 3];
    let mut st = AdamState::default();
    for _ in 0..5 {
        adam_step(&mut [&mut p], &[&g], &mut st, &AdamConfig::default()).unwrap();
    }
    assert_eq!(p, vec![1.0, -2.0, 3.5]);
    assert_eq!(st.t, 5);
}

#[test]
fn adam_first_step_is_lr_sized() {
    let mut p = vec![0.0];
    let mut st = AdamState::default();
    let cfg = AdamConfig::with_lr(1e-3);
    adam_step(&mut [&mut p], &[&[1.0]], &mut st, &cfg).unwrap();
    // m_hat = 1, v_hat = 1, step = lr / (1 + eps).
    let expected = -1e-3 / (1.0 + 1e-8);
    assert!((p[0] - expected).abs() < 1e-18);
}

#[test]
fn adam_minimizes_a_parabola_like_the_reference() {
    let cfg = AdamConfig::with_lr(0.1);
    let mut x = vec![1.0];
    let mut st = AdamState::default();
    let (mut rm, mut rv, mut rx) = (0.0f64, 0.0f64, 1.0f64);
    for t in 1..=100 {
        let g = 2.0 * x[0];
        adam_step(&mut [&mut x], &[&[g]], &mut st, &cfg).unwrap();
        let rg = 2.0 * rx;
        rm = 0.9 * rm + 0.1 * rg;
        rv = 0.999 * rv + 0.001 * rg * rg;
        let mh = rm / (1.0 - 0.9f64.powi(t));
        let vh = rv / (1.0 - 0.999f64.powi(t));
        rx -= 0.1 * mh / (vh.sqrt() + 1e-8);
    }
    assert!(x[0].abs() < 0.5);
    assert!((x[0] - rx).abs() < 1e-12);
}

#[test]
fn adam_shape_mismatch_is_an_error() {
    let mut p = vec![0.0; 3];
    let mut st = AdamState::default();
    assert!(adam_step(&mut [&mut p], &[&[1.0, 2.0]], &mut st, &AdamConfig::default()).is_err());
}

#[test]
fn checkpoint_round_trips_bit_exactly() {
    let net = small_net(&[7, 5, 3], 0.25, 13);
    let bytes = net.to_bytes();
    let back = Network::from_bytes(&bytes, Path::new("mem")).unwrap();
    assert_eq!(back.to_bytes(), bytes);
    assert_eq!(back.layers(), net.layers());
    assert_eq!(back.spec(), net.spec());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    net.save(&path).unwrap();
    assert_eq!(Network::load(&path).unwrap().layers(), net.layers());
}

#[test]
fn checkpoint_corruption_is_reported() {
    let bytes = small_net(&[4, 3, 2], 0.5, 1).to_bytes();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Network::from_bytes(&bad, Path::new("m")), Err(Error::Format { offset: 0, .. })));
    let cut = &bytes[..bytes.len() - 3];
    assert!(matches!(Network::from_bytes(cut, Path::new("m")), Err(Error::Format { .. })));
    let mut long = bytes.clone();
    long.push(0);
    assert!(Network::from_bytes(&long, Path::new("m")).is_err());
}
