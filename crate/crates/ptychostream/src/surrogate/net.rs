//! The two-headed encoder-decoder and its forward/backward plumbing.
//!
//! Trunk: three [conv, conv, pool] stages at widths (w, 2w, 4w), so an
//! NxN frame leaves at N/8 resolution. Each head upsamples twice and
//! ends in a 1-channel conv: sigmoid for amplitude, pi*tanh for phase,
//! giving K = N/2 output patches. Width 40 lands at 736,282 parameters.

use super::layers::{Layer, LayerGrad};
use super::tensor::{Scalar, Tensor4, Tensor4Of};
use super::SurrogateError;
use rand::Rng as _;
use rand::SeedableRng as _;
use rand_chacha::ChaCha8Rng;

/// Base channel width whose parameter count brackets 0.7M.
pub const DEFAULT_WIDTH: usize = 40;

/// Layer stacks shared by training (f64 checks) and inference (f32).
#[derive(Debug, Clone, PartialEq)]
pub struct Network<S: Scalar> {
    pub trunk: Vec<Layer<S>>,
    pub amp_head: Vec<Layer<S>>,
    pub phase_head: Vec<Layer<S>>,
}

fn he_conv<S: Scalar>(out_c: usize, in_c: usize, rng: &mut ChaCha8Rng) -> Layer<S> {
    let limit = (6.0 / (in_c * 9) as f64).sqrt();
    Layer::Conv3x3 {
        weight: Tensor4Of::from_fn((out_c, in_c, 3, 3), |_, _, _, _| {
            S::from_f64((rng.random::<f64>() * 2.0 - 1.0) * limit)
        }),
        bias: vec![S::zero(); out_c],
    }
}

impl<S: Scalar> Network<S> {
    pub fn encoder_decoder(width: usize, seed: u64) -> Result<Self, SurrogateError> {
        if width == 0 {
            return Err(SurrogateError::BadConfig("width must be positive"));
        }
        let rng = &mut ChaCha8Rng::seed_from_u64(seed);
        let (w, w2, w4) = (width, 2 * width, 4 * width);
        let trunk = vec![
            he_conv(w, 1, rng),
            Layer::LeakyRelu,
            he_conv(w, w, rng),
            Layer::LeakyRelu,
            Layer::MaxPool2,
            he_conv(w2, w, rng),
            Layer::LeakyRelu,
            he_conv(w2, w2, rng),
            Layer::LeakyRelu,
            Layer::MaxPool2,
            he_conv(w4, w2, rng),
            Layer::LeakyRelu,
            he_conv(w4, w4, rng),
            Layer::LeakyRelu,
            Layer::MaxPool2,
        ];
        let head = |rng: &mut ChaCha8Rng, act: Layer<S>| {
            vec![
                Layer::Upsample2Nearest,
                he_conv(w2, w4, rng),
                Layer::LeakyRelu,
                Layer::Upsample2Nearest,
                he_conv(w, w2, rng),
                Layer::LeakyRelu,
                he_conv(1, w, rng),
                act,
            ]
        };
        Ok(Network {
            trunk,
            amp_head: head(rng, Layer::Sigmoid),
            phase_head: head(rng, Layer::ScaledTanh),
        })
    }

    pub fn param_count(&self) -> usize {
        self.layers().map(Layer::param_count).sum()
    }

    /// Trunk, amplitude head, phase head, in serialization order.
    pub fn layers(&self) -> impl Iterator<Item = &Layer<S>> {
        self.trunk.iter().chain(&self.amp_head).chain(&self.phase_head)
    }

    /// Mutable (weights, biases) of every parameterized layer, in the
    /// same order as [`Network::layers`]; the optimizer zips this with
    /// its state, so the order is load-bearing.
    pub fn params_mut(&mut self) -> Vec<(&mut [S], &mut [S])> {
        self.trunk
            .iter_mut()
            .chain(self.amp_head.iter_mut())
            .chain(self.phase_head.iter_mut())
            .filter_map(|l| match l {
                Layer::Conv3x3 { weight, bias } => Some((weight.data_mut(), bias.as_mut_slice())),
                _ => None,
            })
            .collect()
    }

    pub fn forward(&self, input: &Tensor4Of<S>) -> Result<(Tensor4Of<S>, Tensor4Of<S>), SurrogateError> {
        let z = forward_seq(&self.trunk, input)?;
        Ok((forward_seq(&self.amp_head, &z)?, forward_seq(&self.phase_head, &z)?))
    }
}

pub fn forward_seq<S: Scalar>(
    layers: &[Layer<S>],
    input: &Tensor4Of<S>,
) -> Result<Tensor4Of<S>, SurrogateError> {
    let mut cur = input.clone();
    for layer in layers {
        cur = layer.forward(&cur)?;
    }
    Ok(cur)
}

/// Forward keeping every intermediate: cache[0] is the input, cache[i+1]
/// the output of layer i. Backward consumes the cache in reverse.
pub fn forward_seq_cached<S: Scalar>(
    layers: &[Layer<S>],
    input: &Tensor4Of<S>,
) -> Result<Vec<Tensor4Of<S>>, SurrogateError> {
    let mut cache = Vec::with_capacity(layers.len() + 1);
    cache.push(input.clone());
    for layer in layers {
        let next = layer.forward(cache.last().expect("nonempty"))?;
        cache.push(next);
    }
    Ok(cache)
}

/// Accumulates parameter gradients into `grads` (one slot per layer) and
/// returns the gradient with respect to the sequence input.
pub fn backward_seq<S: Scalar>(
    layers: &[Layer<S>],
    cache: &[Tensor4Of<S>],
    grad_out: Tensor4Of<S>,
    grads: &mut [LayerGrad<S>],
) -> Tensor4Of<S> {
    let mut g = grad_out;
    for i in (0..layers.len()).rev() {
        g = layers[i].backward(&cache[i], &cache[i + 1], &g, &mut grads[i]);
    }
    g
}

/// The deployable f32 model: network plus provenance counters.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateModel {
    pub net: Network<f32>,
    /// Monotonically increasing; bumped by each completed training run.
    pub version: u64,
    /// Size of the corpus the current weights were trained on.
    pub trained_on_pairs: u64,
}

impl SurrogateModel {
    pub fn new(width: usize, seed: u64) -> Result<Self, SurrogateError> {
        Ok(SurrogateModel {
            net: Network::encoder_decoder(width, seed)?,
            version: 0,
            trained_on_pairs: 0,
        })
    }

    pub fn param_count(&self) -> usize {
        self.net.param_count()
    }

    /// Runs a (B, 1, N, N) batch through to (B, 1, N/2, N/2) amplitude
    /// and phase patches. N must be divisible by 8 for the three pools.
    pub fn forward(&self, batch: &Tensor4) -> Result<(Tensor4, Tensor4), SurrogateError> {
        let (b, c, h, w) = batch.shape();
        if b == 0 || c != 1 || h != w || h % 8 != 0 || h == 0 {
            return Err(SurrogateError::ShapeMismatch {
                context: "model input must be (B, 1, N, N) with N % 8 == 0",
                expected: (b.max(1), 1, h, h),
                got: batch.shape(),
            });
        }
        self.net.forward(batch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_width_brackets_the_published_size() {
        let model = SurrogateModel::new(DEFAULT_WIDTH, 0).unwrap();
        assert_eq!(model.param_count(), 736_282);
        assert!((500_000..=1_000_000).contains(&model.param_count()));
    }

    #[test]
    fn param_count_matches_closed_form() {
        // 459 w^2 + 47 w + 2, from summing the twelve conv layers
        for width in [2usize, 8, 12] {
            let net = Network::<f32>::encoder_decoder(width, 1).unwrap();
            assert_eq!(net.param_count(), 459 * width * width + 47 * width + 2);
        }
    }

    #[test]
    fn forward_shapes_chain_to_half_size_heads() {
        let model = SurrogateModel::new(8, 3).unwrap();
        let input = Tensor4::zeros((2, 1, 16, 16));
        let (amp, phase) = model.forward(&input).unwrap();
        assert_eq!(amp.shape(), (2, 1, 8, 8));
        assert_eq!(phase.shape(), (2, 1, 8, 8));
    }

    #[test]
    fn zero_input_gives_finite_bounded_outputs() {
        let model = SurrogateModel::new(8, 3).unwrap();
        let (amp, phase) = model.forward(&Tensor4::zeros((1, 1, 16, 16))).unwrap();
        assert!(amp.data().iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
        assert!(phase
            .data()
            .iter()
            .all(|v| v.is_finite() && v.abs() <= std::f32::consts::PI));
    }

    #[test]
    fn batch_forward_equals_concatenated_singles() {
        let model = SurrogateModel::new(6, 9).unwrap();
        let a = Tensor4::from_fn((1, 1, 16, 16), |_, _, y, x| ((y * 16 + x) as f32).sin());
        let b = Tensor4::from_fn((1, 1, 16, 16), |_, _, y, x| ((y + x) as f32 * 0.1).cos());
        let joint = Tensor4::concat_batch(&[&a, &b]).unwrap();
        let (amp_j, phase_j) = model.forward(&joint).unwrap();
        let (amp_a, _) = model.forward(&a).unwrap();
        let (_, phase_b) = model.forward(&b).unwrap();
        for (j, s) in amp_j.batch(0).iter().zip(amp_a.batch(0)) {
            assert!((j - s).abs() < 1e-6);
        }
        for (j, s) in phase_j.batch(1).iter().zip(phase_b.batch(0)) {
            assert!((j - s).abs() < 1e-6);
        }
    }

    #[test]
    fn identical_frames_give_identical_outputs() {
        let one = Tensor4::from_fn((1, 1, 16, 16), |_, _, y, x| ((y ^ x) as f32) * 0.05);
        let batch = Tensor4::concat_batch(&[&one, &one, &one]).unwrap();
        let model = SurrogateModel::new(6, 2).unwrap();
        let (amp, _) = model.forward(&batch).unwrap();
        assert_eq!(amp.batch(0), amp.batch(1));
        assert_eq!(amp.batch(0), amp.batch(2));
    }

    #[test]
    fn rejects_wrong_shapes() {
        let model = SurrogateModel::new(6, 2).unwrap();
        assert!(model.forward(&Tensor4::zeros((1, 2, 16, 16))).is_err());
        assert!(model.forward(&Tensor4::zeros((1, 1, 12, 12))).is_err());
        assert!(model.forward(&Tensor4::zeros((1, 1, 16, 24))).is_err());
    }

    #[test]
    fn deterministic_init_for_fixed_seed() {
        let a = SurrogateModel::new(8, 42).unwrap();
        let b = SurrogateModel::new(8, 42).unwrap();
        assert_eq!(a, b);
        let c = SurrogateModel::new(8, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn gradients_match_finite_differences_f64() {
        super::super::gradcheck::assert_every_kind::<f64>(0..5, 1e-5, 1e-6);
    }

    #[test]
    fn gradients_match_finite_differences_f32() {
        // h trades f32 rounding noise against kink-crossing risk
        super::super::gradcheck::assert_every_kind::<f32>(0..5, 1e-3, 1e-3);
    }

    /// Values recorded from the first implementation; any refactor of the
    /// forward path must reproduce them to 1e-5.
    #[test]
    fn forward_matches_recorded_golden_values() {
        let model = SurrogateModel::new(8, 42).unwrap();
        let input = Tensor4::from_fn((1, 1, 16, 16), |_, _, y, x| {
            (0.3 * y as f32 + 0.7 * x as f32).sin() * 0.5 + 0.5
        });
        let (amp, phase) = model.forward(&input).unwrap();
        let amean: f32 = amp.data().iter().sum::<f32>() / amp.numel() as f32;
        let pmean: f32 = phase.data().iter().sum::<f32>() / phase.numel() as f32;
        assert!((amean - 5.190_038_1e-1).abs() < 1e-5);
        assert!((pmean - 1.023_607_4e-1).abs() < 1e-5);
        let golden = [
            (0, 0, 4.945_584_8e-1, -5.255_103_1e-1),
            (3, 5, 5.542_132_3e-1, -8.292_536_4e-2),
            (7, 7, 4.971_882_7e-1, 1.752_383_6e0),
            (2, 6, 5.044_772_6e-1, -5.771_083_8e-1),
        ];
        for (y, x, a, p) in golden {
            assert!((amp.at(0, 0, y, x) - a).abs() < 1e-5, "amp at ({y},{x})");
            assert!((phase.at(0, 0, y, x) - p).abs() < 1e-5, "phase at ({y},{x})");
        }
    }
}
