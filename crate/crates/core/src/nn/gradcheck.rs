use super::{softmax_cross_entropy, DropMask, FixedMasks, Mode, Network};
use crate::error::Result;
use crate::rng::RngStream;
use crate::tensor::Matrix;

/// Largest relative error between backprop and central differences of the
/// mean cross-entropy, with dropout pinned to `masks`.
///
/// Tensors with more than `max_per_tensor` entries are checked at that many
/// randomly chosen positions (`usize::MAX` checks everything). Entries where
/// both gradients are below `1e-7` are compared absolutely instead.
pub fn max_relative_error(
    net: &mut Network,
    x: &Matrix,
    labels: &[usize],
    masks: &[DropMask],
    h: f64,
    max_per_tensor: usize,
    rng: &mut RngStream,
) -> Result<f64> {
    let loss = |net: &Network| -> Result<f64> {
        let pass = net.forward(x, Mode::Train, &mut FixedMasks(masks.to_vec()))?;
        Ok(softmax_cross_entropy(pass.logits(), labels)?.0)
    };
    let pass = net.forward(x, Mode::Train, &mut FixedMasks(masks.to_vec()))?;
    let (_, dlogits) = softmax_cross_entropy(pass.logits(), labels)?;
    let analytic: Vec<Vec<f64>> = net.backward(&pass, &dlogits)?.slices().iter().map(|s| s.to_vec()).collect();

    let mut worst = 0.0f64;
    for (t, g) in analytic.iter().enumerate() {
        let positions: Vec<usize> = if g.len() > max_per_tensor {
            (0..max_per_tensor).map(|_| rng.below(g.len())).collect()
        } else {
            (0..g.len()).collect()
        };
        for k in positions {
            let orig = net.parameters_mut()[t][k];
            net.parameters_mut()[t][k] = orig + h;
            let lp = loss(net)?;
            net.parameters_mut()[t][k] = orig - h;
            let lm = loss(net)?;
            net.parameters_mut()[t][k] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let scale = g[k].abs().max(fd.abs());
            let err = if scale > 1e-7 {
                (g[k] - fd).abs() / scale
            } else {
                (g[k] - fd).abs()
            };
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// The standard check: 784-32-10 network, batch of 8, one honest r = 0.5 mask.
pub fn reference_check(seed: u64, max_per_tensor: usize) -> Result<f64> {
    let mut rng = RngStream::new(seed);
    let spec = super::ModelSpec::mlp(&[784, 32, 10], 0.5)?;
    let mut net = Network::init(spec, &mut rng.child("init"))?;
    // Non-zero biases keep the check away from symmetric corner cases.
    for l in net.layers_mut() {
        for b in &mut l.bias {
            *b = rng.uniform() * 0.2 - 0.1;
        }
    }
    let x = Matrix::from_vec(8, 784, (0..8 * 784).map(|_| rng.uniform()).collect())?;
    let labels: Vec<usize> = (0..8).map(|i| (i * 3) % 10).collect();
    let mask = crate::dropout::honest_mask(0.5, 8, 32, &mut rng)?.mask;
    max_relative_error(&mut net, &x, &labels, &[mask], 1e-5, max_per_tensor, &mut rng)
}
