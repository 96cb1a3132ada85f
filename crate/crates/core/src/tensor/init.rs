use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::{LayerKind, Layer, Scalar};

/// Weight initialization scheme. Biases always start at zero.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum InitScheme {
    /// Zero-mean Gaussian with standard deviation 0.01.
    #[default]
    Random,
    /// Uniform on `±sqrt(3 / fan_in)`.
    Xavier,
    /// Zero-mean Gaussian with standard deviation `sqrt(2 / fan_in)`.
    Msra,
}

impl InitScheme {
    pub fn as_str(self) -> &'static str {
        match self {
            InitScheme::Random => "random",
            InitScheme::Xavier => "xavier",
            InitScheme::Msra => "msra",
        }
    }
}

impl fmt::Display for InitScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for InitScheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "random" | "gaussian" => Ok(InitScheme::Random),
            "xavier" => Ok(InitScheme::Xavier),
            "msra" => Ok(InitScheme::Msra),
            other => Err(format!("unknown init scheme '{other}'")),
        }
    }
}

fn fan_in(kind: &LayerKind) -> usize {
    match kind {
        LayerKind::Conv(p) => p.in_channels / p.groups * p.kernel * p.kernel,
        LayerKind::FullyConnected { in_features, .. } => *in_features,
        _ => 1,
    }
}

/// Fills the layer's weights per `scheme` and zeroes its bias.
pub fn initialize_layer<T: Scalar, R: Rng + ?Sized>(
    layer: &mut Layer<T>,
    scheme: InitScheme,
    rng: &mut R,
) {
    let fan = fan_in(&layer.kind).max(1) as f64;
    if let Some(w) = layer.weights.as_mut() {
        match scheme {
            InitScheme::Random => fill(w.values_mut(), &Normal::new(0.0, 0.01).unwrap(), rng),
            InitScheme::Xavier => {
                let bound = (3.0 / fan).sqrt();
                fill(w.values_mut(), &Uniform::new_inclusive(-bound, bound).unwrap(), rng)
            }
            InitScheme::Msra => {
                fill(w.values_mut(), &Normal::new(0.0, (2.0 / fan).sqrt()).unwrap(), rng)
            }
        }
        w.clear_grad();
    }
    if let Some(b) = layer.bias.as_mut() {
        b.values_mut().iter_mut().for_each(|v| *v = T::zero());
        b.clear_grad();
    }
}

fn fill<T: Scalar, D: Distribution<f64>, R: Rng + ?Sized>(values: &mut [T], dist: &D, rng: &mut R) {
    for v in values {
        *v = T::from_f64_lossy(dist.sample(rng));
    }
}
