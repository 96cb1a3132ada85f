//! Finite-difference verification of the analytic backward passes.
//!
//! Every check runs in `f64`. The scalar under test is the summed softmax
//! cross-entropy of the fragment's output, so analytic gradients come from a
//! full reverse pass and numerical ones from central differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{
    batch_softmax_cross_entropy, ConvParams, Layer, LayerKind, LrnParams, Network, PoolKind,
    Tensor, TensorError,
};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|a - n| / max(|a|, |n|, 1e-8)` over all checked coordinates.
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose ±step probe crossed a relu kink or a max-pool switch.
    pub excluded_kinks: usize,
    pub worst_coordinate: Option<String>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }

    fn merge(&mut self, other: &GradCheckReport) {
        if other.max_rel_error > self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst_coordinate = other.worst_coordinate.clone();
        }
        self.checked += other.checked;
        self.excluded_kinks += other.excluded_kinks;
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn loss_and_signature(
    net: &Network<f64>,
    input: &Tensor<f64>,
    labels: &[usize],
) -> Result<(f64, Vec<u32>), TensorError> {
    let (out, caches) = net.forward(input)?;
    let logits = flatten_batch(out)?;
    let (loss, _) = batch_softmax_cross_entropy(&logits, labels)?;
    let mut sig = Vec::new();
    for c in &caches {
        c.kink_signature(&mut sig);
    }
    Ok((loss, sig))
}

fn flatten_batch(t: Tensor<f64>) -> Result<Tensor<f64>, TensorError> {
    let n = t.batch();
    let f = t.sample_len();
    t.reshape(vec![n, f])
}

/// Compares the analytic gradient of the summed cross-entropy loss with
/// central differences, over every input coordinate and every parameter.
pub fn grad_check(
    net: &Network<f64>,
    input: &Tensor<f64>,
    labels: &[usize],
    tolerance: f64,
) -> Result<GradCheckReport, TensorError> {
    let (out, caches) = net.forward(input)?;
    let out_shape = out.shape().to_vec();
    let logits = flatten_batch(out)?;
    let (_, dlogits) = batch_softmax_cross_entropy(&logits, labels)?;
    let mut grads = net.zero_grads();
    let dlogits = dlogits.reshape(out_shape)?;
    let input_grad = net.backward(&caches, &dlogits, &mut grads);
    let mut base_sig = Vec::new();
    for c in &caches {
        c.kink_signature(&mut base_sig);
    }

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        excluded_kinks: 0,
        worst_coordinate: None,
        tolerance,
    };
    let record = |report: &mut GradCheckReport,
                      name: String,
                      analytic: f64,
                      plus: (f64, Vec<u32>),
                      minus: (f64, Vec<u32>)| {
        if plus.1 != base_sig || minus.1 != base_sig {
            report.excluded_kinks += 1;
            return;
        }
        let numeric = (plus.0 - minus.0) / (2.0 * FD_STEP);
        let err = relative_error(analytic, numeric);
        report.checked += 1;
        if err > report.max_rel_error || report.worst_coordinate.is_none() {
            report.max_rel_error = err;
            report.worst_coordinate =
                Some(format!("{name}: analytic {analytic:.6e} numeric {numeric:.6e}"));
        }
    };

    let mut probe = input.clone();
    for i in 0..input.len() {
        let orig = probe.values()[i];
        probe.values_mut()[i] = orig + FD_STEP;
        let plus = loss_and_signature(net, &probe, labels)?;
        probe.values_mut()[i] = orig - FD_STEP;
        let minus = loss_and_signature(net, &probe, labels)?;
        probe.values_mut()[i] = orig;
        record(&mut report, format!("input[{i}]"), input_grad.values()[i], plus, minus);
    }

    let mut probe_net = net.clone();
    for li in 0..net.len() {
        for (slot, analytic) in [
            (0usize, &grads.layers[li].weights),
            (1usize, &grads.layers[li].bias),
        ] {
            for (j, &a) in analytic.iter().enumerate() {
                let orig = param_value(&probe_net, li, slot, j);
                set_param(&mut probe_net, li, slot, j, orig + FD_STEP);
                let plus = loss_and_signature(&probe_net, input, labels)?;
                set_param(&mut probe_net, li, slot, j, orig - FD_STEP);
                let minus = loss_and_signature(&probe_net, input, labels)?;
                set_param(&mut probe_net, li, slot, j, orig);
                let what = if slot == 0 { "weight" } else { "bias" };
                record(&mut report, format!("layer{li}.{what}[{j}]"), a, plus, minus);
            }
        }
    }
    Ok(report)
}

fn param_value(net: &Network<f64>, layer: usize, slot: usize, j: usize) -> f64 {
    let l = &net.layers()[layer];
    let t = if slot == 0 { &l.weights } else { &l.bias };
    t.as_ref().expect("param present").values()[j]
}

fn set_param(net: &mut Network<f64>, layer: usize, slot: usize, j: usize, v: f64) {
    let l = &mut net.layers_mut()[layer];
    let t = if slot == 0 { &mut l.weights } else { &mut l.bias };
    t.as_mut().expect("param present").values_mut()[j] = v;
}

/// Layer kinds covered by [`run_layer_suite`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckedKind {
    Conv,
    MaxPool,
    AvgPool,
    FullyConnected,
    Relu,
    Lrn,
    SoftmaxCrossEntropy,
}

impl CheckedKind {
    pub const ALL: [CheckedKind; 7] = [
        CheckedKind::Conv,
        CheckedKind::MaxPool,
        CheckedKind::AvgPool,
        CheckedKind::FullyConnected,
        CheckedKind::Relu,
        CheckedKind::Lrn,
        CheckedKind::SoftmaxCrossEntropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CheckedKind::Conv => "conv",
            CheckedKind::MaxPool => "max-pool",
            CheckedKind::AvgPool => "avg-pool",
            CheckedKind::FullyConnected => "fully-connected",
            CheckedKind::Relu => "relu",
            CheckedKind::Lrn => "lrn",
            CheckedKind::SoftmaxCrossEntropy => "softmax-cross-entropy",
        }
    }
}

/// A randomly shaped test fragment: the layer under test followed (except for
/// the bare loss) by a fully-connected read-out into a few classes.
pub struct Fragment {
    pub net: Network<f64>,
    pub input: Tensor<f64>,
    pub labels: Vec<usize>,
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * scale
        })
        .collect()
}

/// Weight scale keeping pre-activations of unit order for unit-order inputs,
/// so the softmax never saturates and gradients stay well above round-off.
fn unit_scale(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

fn randomized(mut layer: Layer<f64>, rng: &mut ChaCha8Rng, scale: f64) -> Layer<f64> {
    for t in layer.weights.iter_mut().chain(layer.bias.iter_mut()) {
        let v = normal_vec(rng, t.len(), scale);
        t.values_mut().copy_from_slice(&v);
    }
    layer
}

pub fn random_fragment(kind: CheckedKind, seed: u64) -> Result<Fragment, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (kind as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let n = rng.random_range(1..=3);
    let classes = rng.random_range(2..=4);
    let c = rng.random_range(1..=4);
    let h = rng.random_range(3..=7);
    let w = rng.random_range(3..=7);

    let head: Layer<f64> = match kind {
        CheckedKind::Conv => {
            let groups = if c % 2 == 0 && rng.random_bool(0.3) { 2 } else { 1 };
            let out_channels = groups * rng.random_range(1..=3);
            let kernel = rng.random_range(1..=3);
            let stride = rng.random_range(1..=2);
            let pad = rng.random_range(0..=1);
            let conv = Layer::conv(ConvParams {
                in_channels: c,
                out_channels,
                kernel,
                stride,
                pad,
                groups,
            })?;
            let fan_in = c / groups * kernel * kernel;
            randomized(conv, &mut rng, unit_scale(fan_in))
        }
        CheckedKind::MaxPool | CheckedKind::AvgPool => {
            let window = rng.random_range(1..=3);
            let stride = rng.random_range(1..=2);
            let pk = if kind == CheckedKind::MaxPool {
                PoolKind::Max
            } else {
                PoolKind::Average
            };
            Layer::pool(pk, window, stride)
        }
        CheckedKind::FullyConnected => {
            let fan_in = c * h * w;
            randomized(Layer::fully_connected(fan_in, classes), &mut rng, unit_scale(fan_in))
        }
        CheckedKind::Relu => Layer::relu(),
        CheckedKind::Lrn => Layer::lrn(LrnParams {
            size: rng.random_range(1..=5),
            alpha: rng.random_range(0.05..1.0),
            beta: rng.random_range(0.5..1.0),
            k: rng.random_range(1.0..2.0),
        }),
        CheckedKind::SoftmaxCrossEntropy => {
            let input = Tensor::new(vec![n, classes], normal_vec(&mut rng, n * classes, 2.0))?;
            let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
            return Ok(Fragment {
                net: Network::new(Vec::new()),
                input,
                labels,
            });
        }
    };

    let mut values = normal_vec(&mut rng, n * c * h * w, 1.0);
    if kind == CheckedKind::Relu {
        // keep probes away from the kink at zero
        for v in &mut values {
            if v.abs() < 1e-2 {
                *v = if *v < 0.0 { -0.5 } else { 0.5 };
            }
        }
    }
    let input = Tensor::new(vec![n, c, h, w], values)?;
    let mut layers = vec![head];
    if !matches!(layers[0].kind, LayerKind::FullyConnected { .. }) {
        let out = layers[0].output_shape(input.shape())?;
        let features: usize = out[1..].iter().product();
        let readout = Layer::fully_connected(features, classes);
        layers.push(randomized(readout, &mut rng, unit_scale(features)));
    }
    let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
    Ok(Fragment {
        net: Network::new(layers),
        input,
        labels,
    })
}

#[derive(Clone, Debug)]
pub struct KindReport {
    pub kind: CheckedKind,
    pub seeds: usize,
    pub report: GradCheckReport,
}

/// Runs [`grad_check`] on `seeds` random fragments per layer kind.
pub fn run_layer_suite(seeds: u64, tolerance: f64) -> Result<Vec<KindReport>, TensorError> {
    CheckedKind::ALL
        .iter()
        .map(|&kind| {
            let mut total = GradCheckReport {
                max_rel_error: 0.0,
                checked: 0,
                excluded_kinks: 0,
                worst_coordinate: None,
                tolerance,
            };
            for seed in 0..seeds {
                let frag = random_fragment(kind, seed)?;
                let r = grad_check(&frag.net, &frag.input, &frag.labels, tolerance)?;
                let mut r = r;
                if let Some(w) = r.worst_coordinate.take() {
                    r.worst_coordinate = Some(format!("seed {seed} {w}"));
                }
                total.merge(&r);
            }
            Ok(KindReport {
                kind,
                seeds: seeds as usize,
                report: total,
            })
        })
        .collect()
}
