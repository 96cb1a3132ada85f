use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;

use super::eval::{predict, specialty_accuracy, CropMode};
use super::flat::{fit, train_flat, FitHooks, TrainedNet};
use super::{MetricRecord, MetricSink, PipelineError};
use crate::dataio::{Dataset, Preprocessor};
use crate::netspec::{make_generalist, NetSpec, Width};
use crate::rng::{stream_rng, LABELS, SUBSET};
use crate::specialty::{
    build_confusion, elasso_assign, fully_balanced_assign, random_balanced, spectral_assign,
    ConfusionMatrix, LabelMapping, DEFAULT_LAMBDA, DEFAULT_MAX_SWEEPS,
};
use crate::tensor::{batch_softmax_cross_entropy, Network, Scalar, Tensor};

const DEFAULT_SUBSET: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    FullyBalanced,
    Elasso,
    SpectralFixed,
    RandomFixed,
}

impl Method {
    /// Fixed methods choose the mapping once, before training.
    pub fn is_fixed(self) -> bool {
        matches!(self, Method::SpectralFixed | Method::RandomFixed)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Method::FullyBalanced => "fully-balanced",
            Method::Elasso => "elasso",
            Method::SpectralFixed => "spectral-fixed",
            Method::RandomFixed => "random-fixed",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        [Method::FullyBalanced, Method::Elasso, Method::SpectralFixed, Method::RandomFixed]
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown method '{s}' (fully-balanced, elasso, spectral-fixed, random-fixed)"))
    }
}

#[derive(Clone, Debug)]
pub struct GeneralistConfig {
    pub k: usize,
    pub method: Method,
    pub lambda: f64,
    /// Size of the stratified subset S; `None` means `min(10000, |D|)`.
    pub subset_size: Option<usize>,
    /// Label-update period in epochs; fractions update mid-epoch.
    pub update_period: f64,
    /// Label updates stop once this many epochs have started.
    pub updates_until_epoch: Option<usize>,
    pub max_sweeps: usize,
    pub deterministic: bool,
    /// C x C confusion for spectral-fixed; trained from scratch if absent.
    pub class_confusion: Option<ConfusionMatrix>,
}

impl GeneralistConfig {
    pub fn new(k: usize, method: Method) -> Self {
        Self {
            k,
            method,
            lambda: DEFAULT_LAMBDA,
            subset_size: None,
            update_period: 1.0,
            updates_until_epoch: None,
            max_sweeps: DEFAULT_MAX_SWEEPS,
            deterministic: true,
            class_confusion: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    /// On the subset S under the mapping in force at the end of the epoch.
    pub specialty_accuracy: f64,
    pub mapping_hash: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MappingSnapshot {
    pub epoch: usize,
    pub step: usize,
    pub mapping: LabelMapping,
}

#[derive(Clone, Debug)]
pub struct GeneralistResult {
    pub net: TrainedNet,
    pub mapping: LabelMapping,
    pub history: Vec<EpochRecord>,
    /// The initial mapping and every reassignment, in order.
    pub snapshots: Vec<MappingSnapshot>,
    pub step_losses: Vec<f64>,
}

/// The base network with its classifier resized to `k` outputs. Unlike
/// [`make_generalist`], `k = 1` is allowed.
pub fn generalist_spec(base: &NetSpec, k: usize) -> Result<NetSpec, PipelineError> {
    if k >= 2 {
        return Ok(make_generalist(base, k)?);
    }
    if k == 0 {
        return Err(PipelineError::Config("K must be positive".into()));
    }
    let mut layers = base.layers().to_vec();
    let ci = base.classifier_index();
    layers[ci] = layers[ci].with_width(Width::Fixed(1));
    Ok(NetSpec::new(
        format!("{}-generalist", base.name()),
        base.input_shape(),
        layers,
        base.blocks().to_vec(),
        base.policy().clone(),
    )?)
}

/// Mean cross-entropy of the generalist against the specialty targets.
pub fn generalist_loss<T: Scalar>(
    network: &Network<T>,
    batch: &Tensor<T>,
    labels: &[usize],
    mapping: &LabelMapping,
) -> Result<f64, PipelineError> {
    let out = network.predict(batch)?;
    if out.sample_len() != mapping.specialties() {
        return Err(PipelineError::Config(format!(
            "generalist has {} outputs but the mapping has {} specialties",
            out.sample_len(),
            mapping.specialties()
        )));
    }
    let targets = labels
        .iter()
        .map(|&y| {
            (y < mapping.classes())
                .then(|| mapping.specialty_of(y))
                .ok_or_else(|| PipelineError::Config(format!("label {y} outside the mapping")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let (loss, _) = batch_softmax_cross_entropy(&out, &targets)?;
    Ok(loss.to_f64_lossy() / labels.len().max(1) as f64)
}

/// Equal per-class counts, `size / C` each (capped by the rarest class),
/// drawn from the subset stream. Indices come back ascending.
pub fn stratified_subset(ds: &Dataset, size: usize, seed: u64) -> Result<Vec<usize>, PipelineError> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.classes];
    for (i, &y) in ds.labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let rarest = by_class.iter().map(Vec::len).min().unwrap_or(0);
    let per = (size / ds.classes.max(1)).min(rarest);
    if per == 0 {
        return Err(PipelineError::Config(format!(
            "subset of {size} cannot hold a sample of each of {} classes (rarest has {rarest})",
            ds.classes
        )));
    }
    let mut rng = stream_rng(seed, SUBSET);
    let mut out = Vec::with_capacity(per * ds.classes);
    for members in &mut by_class {
        members.shuffle(&mut rng);
        out.extend_from_slice(&members[..per]);
    }
    out.sort_unstable();
    Ok(out)
}

/// Seed for the `n`-th label update.
fn update_seed(seed: u64, n: u64) -> u64 {
    seed ^ n.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Random starting partition; near-equal blocks when K does not divide C.
fn initial_mapping(c: usize, k: usize, seed: u64) -> Result<LabelMapping, PipelineError> {
    if c.is_multiple_of(k) {
        return Ok(random_balanced(c, k, seed)?);
    }
    let mut order: Vec<usize> = (0..c).collect();
    order.shuffle(&mut stream_rng(seed, LABELS));
    let mut assignments = vec![0; c];
    for (pos, &class) in order.iter().enumerate() {
        assignments[class] = pos % k;
    }
    Ok(LabelMapping::new(assignments, k)?)
}

struct Alternation<'a, 'b> {
    method: Method,
    cfg: &'a GeneralistConfig,
    seed: u64,
    classes: usize,
    subset: Dataset,
    pre: &'a Preprocessor,
    period_steps: usize,
    mapping: LabelMapping,
    updates: u64,
    history: Vec<EpochRecord>,
    snapshots: Vec<MappingSnapshot>,
    sink: MetricSink<'b>,
}

impl Alternation<'_, '_> {
    fn reassign(&mut self, net: &Network<f32>, epoch: usize, step: usize) -> Result<(), PipelineError> {
        let preds = predict(net, self.pre, &self.subset, CropMode::Center)?;
        let k = self.mapping.specialties();
        let m = build_confusion(&preds, &self.subset.labels, self.classes, k, None)?;
        self.updates += 1;
        let seed = update_seed(self.seed, self.updates);
        self.mapping = match self.method {
            Method::FullyBalanced => fully_balanced_assign(&m, seed)?,
            Method::Elasso => elasso_assign(&m, self.cfg.lambda, &self.mapping, seed, self.cfg.max_sweeps)?.mapping(),
            Method::SpectralFixed | Method::RandomFixed => unreachable!("fixed methods never reassign"),
        };
        log::debug!("label update {} at step {step}: sizes {:?}", self.updates, self.mapping.sizes());
        self.snapshots.push(MappingSnapshot {
            epoch,
            step,
            mapping: self.mapping.clone(),
        });
        Ok(())
    }
}

impl FitHooks<Network<f32>> for Alternation<'_, '_> {
    fn target(&self, label: usize) -> usize {
        self.mapping.specialty_of(label)
    }

    fn after_step(&mut self, net: &Network<f32>, epoch: usize, step: usize, _: usize) -> Result<(), PipelineError> {
        let open = self.cfg.updates_until_epoch.is_none_or(|e| epoch < e);
        if !self.method.is_fixed() && open && step.is_multiple_of(self.period_steps) {
            self.reassign(net, epoch, step)?;
        }
        Ok(())
    }

    fn end_epoch(&mut self, net: &Network<f32>, epoch: usize, step: usize, loss: f64) -> Result<(), PipelineError> {
        let acc = specialty_accuracy(net, self.pre, &self.subset, &self.mapping)?;
        let hash = self.mapping.hash_hex();
        (self.sink)(&MetricRecord {
            stage: "generalist".into(),
            epoch,
            step,
            loss,
            specialty_accuracy: Some(acc),
            top1: None,
            mapping_hash: hash.clone(),
        });
        self.history.push(EpochRecord {
            epoch,
            step,
            loss,
            specialty_accuracy: acc,
            mapping_hash: hash,
        });
        Ok(())
    }
}

/// Jointly learns a K-way generalist and the class-to-specialty mapping.
pub fn train_generalist(
    train: &Dataset,
    base: &NetSpec,
    cfg: &GeneralistConfig,
    seed: u64,
    sink: MetricSink<'_>,
) -> Result<GeneralistResult, PipelineError> {
    let (c, k) = (train.classes, cfg.k);
    if k == 0 || k > c {
        return Err(PipelineError::Config(format!("K = {k} is invalid for {c} classes")));
    }
    let balanced = matches!(cfg.method, Method::FullyBalanced | Method::RandomFixed);
    if balanced && c % k != 0 {
        return Err(PipelineError::Config(format!(
            "method {} needs K to divide C, got C = {c}, K = {k}",
            cfg.method
        )));
    }
    if !(cfg.update_period > 0.0 && cfg.update_period.is_finite()) {
        return Err(PipelineError::Config(format!("update period {} is not positive", cfg.update_period)));
    }
    let spec = generalist_spec(base, k)?;
    let policy = spec.policy().clone();
    let pre = Preprocessor::from_training_set(train, &policy);
    let subset_size = cfg.subset_size.unwrap_or(DEFAULT_SUBSET.min(train.len()));
    let subset = train.subset(&stratified_subset(train, subset_size, seed)?);

    let mapping = match cfg.method {
        Method::SpectralFixed => {
            let m = match &cfg.class_confusion {
                Some(m) => m.clone(),
                None => {
                    let flat = train_flat(train, base, seed, cfg.deterministic, &mut super::discard_metrics)?;
                    let preds = predict(&flat.network, &flat.preprocessor(&policy)?, &subset, CropMode::Center)?;
                    build_confusion(&preds, &subset.labels, c, c, None)?
                }
            };
            spectral_assign(&m, k, seed)?
        }
        _ => initial_mapping(c, k, seed)?,
    };

    let mut net = TrainedNet::init(&spec, pre.mean().to_vec(), train.image_shape, seed)?;
    let steps_per_epoch = train.len().div_ceil(policy.batch_size);
    let mut alt = Alternation {
        method: cfg.method,
        cfg,
        seed,
        classes: c,
        subset,
        pre: &pre,
        period_steps: ((cfg.update_period * steps_per_epoch as f64).round() as usize).max(1),
        snapshots: vec![MappingSnapshot {
            epoch: 0,
            step: 0,
            mapping: mapping.clone(),
        }],
        mapping,
        updates: 0,
        history: Vec::new(),
        sink,
    };
    let step_losses = fit(&mut net.network, train, &pre, &policy, seed, cfg.deterministic, "generalist", &mut alt)?;
    Ok(GeneralistResult {
        net,
        mapping: alt.mapping,
        history: alt.history,
        snapshots: alt.snapshots,
        step_losses,
    })
}
