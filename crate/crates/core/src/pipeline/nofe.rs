use std::path::Path;

use super::engine::{assign_params, expected_records, records, Model};
use super::flat::{check_input, fit, FitHooks, MEAN_RECORD};
use super::generalist::GeneralistResult;
use super::{MetricRecord, MetricSink, PipelineError};
use crate::dataio::{match_records, read_records, save_checkpoint, DataError, Dataset, Preprocessor, Record, CHECKPOINT_MAGIC};
use crate::netspec::{make_nofe, BranchSpec, NetSpec, NofESpec, TrainPolicy};
use crate::rng::{stream_rng, BRANCH_INIT};
use crate::specialty::LabelMapping;
use crate::tensor::{batch_softmax_cross_entropy, initialize_layer, softmax, Network, NetworkGrads, Scalar, Tensor};

const MAPPING_RECORD: &str = "nofe.mapping";

/// For each class, its branch and its output index within that branch.
/// Classes are numbered ascending within each branch.
pub fn class_slots(mapping: &LabelMapping) -> Vec<(usize, usize)> {
    let mut next = vec![0; mapping.specialties()];
    mapping
        .as_slice()
        .iter()
        .map(|&j| {
            next[j] += 1;
            (j, next[j] - 1)
        })
        .collect()
}

/// Trunk, one branch per specialty, and the class routing between them.
#[derive(Clone, Debug)]
pub struct NofENetwork<T: Scalar = f32> {
    pub spec: NofESpec,
    pub trunk: Network<T>,
    pub branches: Vec<Network<T>>,
    pub mapping: LabelMapping,
    pub class_slots: Vec<(usize, usize)>,
    pub mean: Vec<f32>,
    pub image_shape: [usize; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct NofEGrads<T> {
    pub trunk: NetworkGrads<T>,
    pub branches: Vec<NetworkGrads<T>>,
}

impl NofENetwork<f32> {
    /// Structure for `generalist` and `mapping`, with every parameter freshly
    /// initialized per the tree's policy.
    pub fn init(
        generalist: &NetSpec,
        branch: &BranchSpec,
        mapping: &LabelMapping,
        mean: Vec<f32>,
        image_shape: [usize; 3],
        seed: u64,
    ) -> Result<Self, PipelineError> {
        let mapping = mapping.compact();
        let spec = make_nofe(generalist, branch, &mapping.sizes())?;
        let scheme = spec.policy().init;
        let mut rng = stream_rng(seed, BRANCH_INIT);
        let mut trunk = spec.instantiate_trunk::<f32>()?;
        for layer in &mut trunk {
            initialize_layer(layer, scheme, &mut rng);
        }
        let mut branches = Vec::with_capacity(spec.branches().len());
        for bound in spec.branches() {
            let mut layers = bound.instantiate::<f32>()?;
            for layer in &mut layers {
                initialize_layer(layer, scheme, &mut rng);
            }
            branches.push(Network::new(layers));
        }
        let net = Self {
            trunk: Network::new(trunk),
            branches,
            class_slots: class_slots(&mapping),
            mapping,
            mean,
            image_shape,
            spec,
        };
        net.preprocessor(net.spec.policy())?;
        Ok(net)
    }

    pub fn preprocessor(&self, policy: &TrainPolicy) -> Result<Preprocessor, PipelineError> {
        let pre = Preprocessor::new(self.mean.clone(), self.image_shape, policy);
        check_input(&pre, self.spec.input_shape())?;
        Ok(pre)
    }

    /// Mean image, mapping, then parameters in checkpoint order.
    pub fn records(&self) -> Vec<Record> {
        let [c, h, w] = self.image_shape;
        let mut out = vec![
            Record {
                name: MEAN_RECORD.into(),
                shape: vec![c, h, w],
                values: self.mean.clone(),
            },
            Record {
                name: MAPPING_RECORD.into(),
                shape: vec![self.mapping.classes()],
                values: self.mapping.as_slice().iter().map(|&j| j as f32).collect(),
            },
        ];
        out.extend(records(self));
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), PipelineError> {
        Ok(save_checkpoint(path, &self.records())?)
    }
}

impl<T: Scalar> NofENetwork<T> {
    pub fn cast<U: Scalar>(&self) -> NofENetwork<U> {
        NofENetwork {
            spec: self.spec.clone(),
            trunk: self.trunk.cast(),
            branches: self.branches.iter().map(Network::cast).collect(),
            mapping: self.mapping.clone(),
            class_slots: self.class_slots.clone(),
            mean: self.mean.clone(),
            image_shape: self.image_shape,
        }
    }

    pub fn classes(&self) -> usize {
        self.class_slots.len()
    }

    /// Scatters per-branch outputs into class order, `N x C`.
    fn scatter(&self, outs: &[Tensor<T>]) -> Tensor<T> {
        let n = outs[0].batch();
        let c = self.classes();
        let mut values = vec![T::zero(); n * c];
        for s in 0..n {
            for (class, &(b, slot)) in self.class_slots.iter().enumerate() {
                values[s * c + class] = outs[b].sample(s)[slot];
            }
        }
        Tensor::new(vec![n, c], values).expect("scatter shape")
    }
}

impl<T: Scalar> Model<T> for NofENetwork<T> {
    type Grads = NofEGrads<T>;

    fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>, PipelineError> {
        let features = self.trunk.predict(x)?;
        let outs = self
            .branches
            .iter()
            .map(|b| b.predict(&features))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(self.scatter(&outs))
    }

    fn loss_and_grads(&self, x: &Tensor<T>, targets: &[usize]) -> Result<(T, Self::Grads), PipelineError> {
        let (features, trunk_caches) = self.trunk.forward(x)?;
        let mut outs = Vec::with_capacity(self.branches.len());
        let mut caches = Vec::with_capacity(self.branches.len());
        for b in &self.branches {
            let (o, c) = b.forward(&features)?;
            outs.push(o);
            caches.push(c);
        }
        let (loss, grad) = batch_softmax_cross_entropy(&self.scatter(&outs), targets)?;
        let (n, c) = (x.batch(), self.classes());
        let mut branch_grads = Vec::with_capacity(self.branches.len());
        let mut feature_grad = Tensor::<T>::zeros(features.shape());
        for (b, (net, out)) in self.branches.iter().zip(&outs).enumerate() {
            let width = out.sample_len();
            let mut g = vec![T::zero(); n * width];
            for s in 0..n {
                for (class, &(owner, slot)) in self.class_slots.iter().enumerate() {
                    if owner == b {
                        g[s * width + slot] = grad.values()[s * c + class];
                    }
                }
            }
            let g = Tensor::new(out.shape().to_vec(), g)?;
            let mut grads = net.zero_grads();
            let dx = net.backward(&caches[b], &g, &mut grads);
            for (acc, v) in feature_grad.values_mut().iter_mut().zip(dx.values()) {
                *acc += *v;
            }
            branch_grads.push(grads);
        }
        let mut trunk = self.trunk.zero_grads();
        self.trunk.backward(&trunk_caches, &feature_grad, &mut trunk);
        Ok((
            loss,
            NofEGrads {
                trunk,
                branches: branch_grads,
            },
        ))
    }

    fn add_grads(acc: &mut Self::Grads, other: &Self::Grads) {
        acc.trunk.add_assign(&other.trunk);
        for (a, b) in acc.branches.iter_mut().zip(&other.branches) {
            a.add_assign(b);
        }
    }

    fn grads_finite(g: &Self::Grads) -> bool {
        std::iter::once(&g.trunk)
            .chain(&g.branches)
            .all(<Network<T> as Model<T>>::grads_finite)
    }

    fn load_grads(&mut self, g: &Self::Grads) {
        self.trunk.load_grads(&g.trunk);
        for (b, bg) in self.branches.iter_mut().zip(&g.branches) {
            b.load_grads(bg);
        }
    }

    fn params(&self) -> Vec<&Tensor<T>> {
        let mut out: Vec<&Tensor<T>> = self.trunk.params().collect();
        for b in &self.branches {
            out.extend(b.params());
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = self.trunk.params_mut().collect();
        for b in &mut self.branches {
            out.extend(b.params_mut());
        }
        out
    }

    fn param_names(&self) -> Vec<String> {
        let mut out = self.trunk.param_names("trunk");
        for (j, b) in self.branches.iter().enumerate() {
            out.extend(b.param_names(&format!("branch{j}")));
        }
        out
    }
}

/// Class probabilities, `N x C`: every branch sees the shared trunk features
/// and a single softmax runs over all concatenated branch outputs.
pub fn nofe_forward<T: Scalar>(net: &NofENetwork<T>, batch: &Tensor<T>) -> Result<Tensor<T>, PipelineError> {
    let logits = net.logits(batch)?;
    let c = net.classes();
    let values = (0..logits.batch()).flat_map(|s| softmax(logits.sample(s))).collect();
    Ok(Tensor::new(vec![logits.batch(), c], values)?)
}

/// Assembles the tree from a trained generalist: the trunk is a bit-exact copy
/// of the generalist's convolutional prefix, branches are fresh.
///
/// Empty specialties are dropped first.
pub fn build_nofe(gen: &GeneralistResult, branch: &BranchSpec, seed: u64) -> Result<NofENetwork, PipelineError> {
    let compact = gen.mapping.compact();
    if compact.specialties() < gen.mapping.specialties() {
        log::warn!(
            "dropping {} empty specialties; K is now {}",
            gen.mapping.specialties() - compact.specialties(),
            compact.specialties()
        );
    }
    let mut net = NofENetwork::init(&gen.net.spec, branch, &compact, gen.net.mean.clone(), gen.net.image_shape, seed)?;
    let source = gen.net.network.layers();
    if source.len() < net.trunk.len() {
        return Err(PipelineError::Config("generalist is shorter than its trunk".into()));
    }
    for (dst, src) in net.trunk.layers_mut().iter_mut().zip(source) {
        let same = dst.kind == src.kind
            && dst.weights.as_ref().map(Tensor::shape) == src.weights.as_ref().map(Tensor::shape)
            && dst.bias.as_ref().map(Tensor::shape) == src.bias.as_ref().map(Tensor::shape);
        if !same {
            return Err(PipelineError::Config(format!(
                "generalist layer {} does not match trunk layer {}",
                src.kind.name(),
                dst.kind.name()
            )));
        }
        dst.weights = src.weights.clone();
        dst.bias = src.bias.clone();
    }
    Ok(net)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneResult {
    pub step_losses: Vec<f64>,
    pub epoch_losses: Vec<f64>,
}

struct FinetuneHooks<'a> {
    hash: String,
    epoch_losses: Vec<f64>,
    sink: MetricSink<'a>,
}

impl FitHooks<NofENetwork> for FinetuneHooks<'_> {
    fn target(&self, label: usize) -> usize {
        label
    }

    fn end_epoch(&mut self, _: &NofENetwork, epoch: usize, step: usize, loss: f64) -> Result<(), PipelineError> {
        self.epoch_losses.push(loss);
        (self.sink)(&MetricRecord {
            stage: "finetune".into(),
            epoch,
            step,
            loss,
            specialty_accuracy: None,
            top1: None,
            mapping_hash: self.hash.clone(),
        });
        Ok(())
    }
}

/// End-to-end SGD on the original labels through trunk and all branches.
pub fn finetune_nofe(
    net: &mut NofENetwork,
    train: &Dataset,
    policy: &TrainPolicy,
    seed: u64,
    deterministic: bool,
    sink: MetricSink<'_>,
) -> Result<FinetuneResult, PipelineError> {
    if train.classes != net.classes() {
        return Err(PipelineError::Config(format!(
            "tree has {} outputs for {} classes",
            net.classes(),
            train.classes
        )));
    }
    let pre = net.preprocessor(policy)?;
    let mut hooks = FinetuneHooks {
        hash: net.mapping.hash_hex(),
        epoch_losses: Vec::new(),
        sink,
    };
    let step_losses = fit(net, train, &pre, policy, seed, deterministic, "finetune", &mut hooks)?;
    Ok(FinetuneResult {
        step_losses,
        epoch_losses: hooks.epoch_losses,
    })
}

/// Loads a tree saved by [`NofENetwork::save`]; the mapping stored in the
/// file fixes the branch widths.
pub fn load_nofe(
    path: &Path,
    generalist: &NetSpec,
    branch: &BranchSpec,
    image_shape: [usize; 3],
) -> Result<NofENetwork, PipelineError> {
    let bytes = std::fs::read(path).map_err(|e| DataError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut recs = read_records(&bytes, CHECKPOINT_MAGIC)?;
    if recs.len() < 2 || recs[0].name != MEAN_RECORD || recs[1].name != MAPPING_RECORD {
        return Err(DataError::MissingRecord(format!("{MEAN_RECORD} and {MAPPING_RECORD}")).into());
    }
    let assignments = recs[1]
        .values
        .iter()
        .map(|&v| {
            (v >= 0.0 && v.fract() == 0.0)
                .then_some(v as usize)
                .ok_or_else(|| DataError::Invalid(format!("mapping entry {v}")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let k = assignments.iter().max().map_or(0, |m| m + 1);
    let mapping = LabelMapping::new(assignments, k)?;
    let rest = recs.split_off(2);
    let mean = std::mem::take(&mut recs[0].values);
    if mean.len() != image_shape.iter().product::<usize>() {
        return Err(DataError::ShapeMismatch {
            name: MEAN_RECORD.into(),
            expected: image_shape.to_vec(),
            found: recs[0].shape.clone(),
        }
        .into());
    }
    let mut net = NofENetwork::init(generalist, branch, &mapping, mean, image_shape, 0)?;
    let values = match_records(rest, &expected_records(&net))?;
    assign_params(&mut net, values);
    Ok(net)
}
