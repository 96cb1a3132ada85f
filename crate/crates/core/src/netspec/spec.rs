use std::fmt;

use super::{NetSpecError, SourcePos};
use crate::tensor::{
    conv_output_dim, pool_output_dim, ConvParams, InitScheme, Layer, LrnParams, PoolKind, Scalar,
};

/// Channels x height x width. Flat vectors are `n x 1 x 1`.
pub type Shape = [usize; 3];

/// Output width of a parametric layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Width {
    Fixed(usize),
    /// The `c` placeholder, bound to a specialty size when a branch is attached.
    Classes,
}

impl fmt::Display for Width {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Width::Fixed(n) => write!(f, "{n}"),
            Width::Classes => f.write_str("c"),
        }
    }
}

/// One layer after repetition counts have been expanded.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    Conv {
        filters: Width,
        kernel: usize,
        stride: usize,
        pad: usize,
        groups: usize,
    },
    Pool {
        window: usize,
        stride: usize,
        kind: PoolKind,
    },
    Lrn(LrnParams),
    Fc {
        width: Width,
    },
}

impl LayerSpec {
    /// Convolution with stride 1 and `floor(k / 2)` padding.
    pub fn conv(filters: usize, kernel: usize) -> Self {
        LayerSpec::Conv {
            filters: Width::Fixed(filters),
            kernel,
            stride: 1,
            pad: kernel / 2,
            groups: 1,
        }
    }

    pub fn fc(width: usize) -> Self {
        LayerSpec::Fc {
            width: Width::Fixed(width),
        }
    }

    pub fn is_parametric(&self) -> bool {
        matches!(self, LayerSpec::Conv { .. } | LayerSpec::Fc { .. })
    }

    pub fn width(&self) -> Option<Width> {
        match self {
            LayerSpec::Conv { filters, .. } => Some(*filters),
            LayerSpec::Fc { width } => Some(*width),
            _ => None,
        }
    }

    /// Same layer with its output width replaced; parameter-free layers are returned as is.
    pub fn with_width(&self, w: Width) -> Self {
        let mut out = self.clone();
        match &mut out {
            LayerSpec::Conv { filters, .. } => *filters = w,
            LayerSpec::Fc { width } => *width = w,
            _ => {}
        }
        out
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape, String> {
        let [c, h, w] = input;
        match self {
            LayerSpec::Conv {
                filters,
                kernel,
                stride,
                pad,
                groups,
            } => {
                let Width::Fixed(f) = *filters else {
                    return Err("unbound symbolic width".into());
                };
                if c % groups != 0 || f % groups != 0 {
                    return Err(format!(
                        "{c} input and {f} output channels are not divisible into {groups} groups"
                    ));
                }
                let oh = conv_output_dim(h, *kernel, *stride, *pad);
                let ow = conv_output_dim(w, *kernel, *stride, *pad);
                match (oh, ow) {
                    (Some(oh), Some(ow)) => Ok([f, oh, ow]),
                    _ => Err(format!(
                        "kernel {kernel} does not fit {h}x{w} input with pad {pad}"
                    )),
                }
            }
            LayerSpec::Pool { window, stride, .. } => {
                match (
                    pool_output_dim(h, *window, *stride),
                    pool_output_dim(w, *window, *stride),
                ) {
                    (Some(oh), Some(ow)) => Ok([c, oh, ow]),
                    _ => Err(format!("window {window} larger than {h}x{w} input")),
                }
            }
            LayerSpec::Lrn(_) => Ok(input),
            LayerSpec::Fc { width } => match width {
                Width::Fixed(n) => Ok([*n, 1, 1]),
                Width::Classes => Err("unbound symbolic width".into()),
            },
        }
    }

    /// Weight plus bias element count for the given input shape.
    pub fn param_count(&self, input: Shape) -> u64 {
        let [c, h, w] = input.map(|d| d as u64);
        match self {
            LayerSpec::Conv {
                filters: Width::Fixed(f),
                kernel,
                groups,
                ..
            } => {
                let (f, k, g) = (*f as u64, *kernel as u64, *groups as u64);
                f * (c / g) * k * k + f
            }
            LayerSpec::Fc {
                width: Width::Fixed(n),
            } => {
                let n = *n as u64;
                c * h * w * n + n
            }
            _ => 0,
        }
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Conv {
                filters,
                kernel,
                stride,
                pad,
                groups,
            } => {
                write!(f, "CONV:1x{filters}x{kernel},s={stride},p={pad}")?;
                if *groups != 1 {
                    write!(f, ",g={groups}")?;
                }
                Ok(())
            }
            LayerSpec::Pool {
                window,
                stride,
                kind,
            } => {
                let mode = match kind {
                    PoolKind::Max => "MAX",
                    PoolKind::Average => "AVE",
                };
                write!(f, "POOL:{window},{stride},{mode}")
            }
            LayerSpec::Lrn(p) => write!(f, "LRN:{},{},{},{}", p.size, p.alpha, p.beta, p.k),
            LayerSpec::Fc { width } => write!(f, "FC:{width}"),
        }
    }
}

/// Contiguous run of expanded layers forming one residual block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ResidualBlock {
    pub start: usize,
    pub len: usize,
}

/// Optimization and augmentation settings attached to a spec.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainPolicy {
    /// `(learning_rate, epochs)` phases in order.
    pub schedule: Vec<(f64, usize)>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub init: InitScheme,
    pub batch_size: usize,
    pub mirror: bool,
    pub crop: Option<usize>,
    pub pad: usize,
}

impl Default for TrainPolicy {
    fn default() -> Self {
        Self {
            schedule: vec![(0.01, 10)],
            momentum: 0.9,
            weight_decay: 0.0005,
            init: InitScheme::Random,
            batch_size: 100,
            mirror: false,
            crop: None,
            pad: 0,
        }
    }
}

impl TrainPolicy {
    pub fn total_epochs(&self) -> usize {
        self.schedule.iter().map(|&(_, e)| e).sum()
    }

    /// Learning rate in force during the 0-based `epoch`; the last phase extends forever.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let mut end = 0;
        for &(lr, epochs) in &self.schedule {
            end += epochs;
            if epoch < end {
                return lr;
            }
        }
        self.schedule.last().map_or(0.0, |&(lr, _)| lr)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.schedule.is_empty() {
            return Err("schedule has no phases".into());
        }
        for &(lr, epochs) in &self.schedule {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(format!("learning rate {lr} is not positive"));
            }
            if epochs == 0 {
                return Err("phase with zero epochs".into());
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(format!("weight decay {} is negative", self.weight_decay));
        }
        if self.batch_size == 0 {
            return Err("batch size is zero".into());
        }
        if self.crop == Some(0) {
            return Err("crop size is zero".into());
        }
        Ok(())
    }
}

/// Runs shape inference, reporting the first break.
pub(crate) fn infer_shapes(
    layers: &[LayerSpec],
    input: Shape,
    positions: Option<&[SourcePos]>,
) -> Result<Vec<Shape>, NetSpecError> {
    let mut shapes = Vec::with_capacity(layers.len());
    let mut cur = input;
    for (i, layer) in layers.iter().enumerate() {
        cur = layer
            .output_shape(cur)
            .map_err(|reason| NetSpecError::ShapeChain {
                index: i,
                layer: layer.to_string(),
                reason,
                pos: positions.and_then(|p| p.get(i).copied()),
            })?;
        shapes.push(cur);
    }
    Ok(shapes)
}

/// Index of the last parametric layer.
pub(crate) fn classifier_index(layers: &[LayerSpec]) -> Option<usize> {
    layers.iter().rposition(LayerSpec::is_parametric)
}

/// Checks that the stack ends in a classifier producing a flat output: the last
/// parametric layer is an FC (or a conv when the stack has no FC at all), only
/// pooling may follow it, and the final shape is `n x 1 x 1`.
pub(crate) fn check_terminal(
    layers: &[LayerSpec],
    shapes: &[Shape],
    positions: Option<&[SourcePos]>,
) -> Result<usize, NetSpecError> {
    let pos_of = |i: usize| positions.and_then(|p| p.get(i).copied());
    let last_pos = layers.len().checked_sub(1).and_then(pos_of);
    let Some(ci) = classifier_index(layers) else {
        return Err(NetSpecError::MissingTerminalFc {
            reason: "no parametric layer".into(),
            pos: last_pos,
        });
    };
    let has_fc = layers.iter().any(|l| matches!(l, LayerSpec::Fc { .. }));
    if has_fc && !matches!(layers[ci], LayerSpec::Fc { .. }) {
        return Err(NetSpecError::MissingTerminalFc {
            reason: "a convolution follows the fully-connected layers".into(),
            pos: pos_of(ci),
        });
    }
    if let Some(j) = (ci + 1..layers.len()).find(|&j| !matches!(layers[j], LayerSpec::Pool { .. }))
    {
        return Err(NetSpecError::MissingTerminalFc {
            reason: format!("{} follows the classifier", layers[j]),
            pos: pos_of(j),
        });
    }
    let out = shapes.last().copied().unwrap_or([0, 0, 0]);
    if out[1] != 1 || out[2] != 1 {
        return Err(NetSpecError::MissingTerminalFc {
            reason: format!("final output {}x{}x{} is not flat", out[0], out[1], out[2]),
            pos: last_pos,
        });
    }
    Ok(ci)
}

/// A complete, shape-checked network description.
#[derive(Clone, Debug, PartialEq)]
pub struct NetSpec {
    name: String,
    input_shape: Shape,
    layers: Vec<LayerSpec>,
    blocks: Vec<ResidualBlock>,
    shapes: Vec<Shape>,
    policy: TrainPolicy,
}

impl NetSpec {
    pub fn new(
        name: impl Into<String>,
        input_shape: Shape,
        layers: Vec<LayerSpec>,
        blocks: Vec<ResidualBlock>,
        policy: TrainPolicy,
    ) -> Result<Self, NetSpecError> {
        Self::checked(name.into(), input_shape, layers, blocks, policy, None)
    }

    pub(crate) fn checked(
        name: String,
        input_shape: Shape,
        layers: Vec<LayerSpec>,
        blocks: Vec<ResidualBlock>,
        policy: TrainPolicy,
        positions: Option<&[SourcePos]>,
    ) -> Result<Self, NetSpecError> {
        if let Some(i) = layers.iter().position(|l| l.width() == Some(Width::Classes)) {
            return Err(NetSpecError::UnexpectedSymbolicWidth {
                pos: positions.and_then(|p| p.get(i).copied()),
            });
        }
        let shapes = infer_shapes(&layers, input_shape, positions)?;
        check_terminal(&layers, &shapes, positions)?;
        Ok(Self {
            name,
            input_shape,
            layers,
            blocks,
            shapes,
            policy,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn input_shape(&self) -> Shape {
        self.input_shape
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn blocks(&self) -> &[ResidualBlock] {
        &self.blocks
    }

    /// Output shape of every layer.
    pub fn shapes(&self) -> &[Shape] {
        &self.shapes
    }

    /// Input shape of layer `i`.
    pub fn shape_before(&self, i: usize) -> Shape {
        if i == 0 {
            self.input_shape
        } else {
            self.shapes[i - 1]
        }
    }

    pub fn policy(&self) -> &TrainPolicy {
        &self.policy
    }

    pub fn classifier_index(&self) -> usize {
        classifier_index(&self.layers).expect("validated at construction")
    }

    /// Width of the final output.
    pub fn output_width(&self) -> usize {
        self.shapes.last().expect("validated at construction")[0]
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn with_policy(mut self, policy: TrainPolicy) -> Self {
        self.policy = policy;
        self
    }

    /// Engine layers with freshly zeroed parameters and a relu after every
    /// hidden conv/FC (not after the classifier).
    pub fn instantiate<T: Scalar>(&self) -> Result<Vec<Layer<T>>, NetSpecError> {
        build_stack(
            &self.name,
            &self.layers,
            &self.blocks,
            self.input_shape,
            Some(self.classifier_index()),
        )
    }
}

/// A branch template; the symbolic width is bound per specialty.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchSpec {
    pub name: String,
    pub layers: Vec<LayerSpec>,
    pub blocks: Vec<ResidualBlock>,
    /// Fine-tuning policy for the assembled network, if the file declares one.
    pub policy: Option<TrainPolicy>,
}

impl BranchSpec {
    /// Binds `c` to `width` and runs shape inference from `input`.
    pub fn bind(&self, width: usize, input: Shape) -> Result<BoundBranch, NetSpecError> {
        let ci = classifier_index(&self.layers).ok_or_else(|| NetSpecError::MissingTerminalFc {
            reason: "branch has no parametric layer".into(),
            pos: None,
        })?;
        if self.layers[ci].width() != Some(Width::Classes) {
            return Err(NetSpecError::MissingTerminalFc {
                reason: "branch classifier width is not the symbolic 'c'".into(),
                pos: None,
            });
        }
        let layers: Vec<LayerSpec> = self
            .layers
            .iter()
            .map(|l| match l.width() {
                Some(Width::Classes) => l.with_width(Width::Fixed(width)),
                _ => l.clone(),
            })
            .collect();
        let shapes = infer_shapes(&layers, input, None)?;
        check_terminal(&layers, &shapes, None)?;
        Ok(BoundBranch {
            layers,
            blocks: self.blocks.clone(),
            input_shape: input,
            shapes,
            width,
        })
    }
}

/// A branch with its width bound and shapes inferred.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundBranch {
    layers: Vec<LayerSpec>,
    blocks: Vec<ResidualBlock>,
    input_shape: Shape,
    shapes: Vec<Shape>,
    width: usize,
}

impl BoundBranch {
    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn blocks(&self) -> &[ResidualBlock] {
        &self.blocks
    }

    pub fn shapes(&self) -> &[Shape] {
        &self.shapes
    }

    pub fn input_shape(&self) -> Shape {
        self.input_shape
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn param_count(&self) -> u64 {
        stack_params(&self.layers, self.input_shape, &self.shapes)
    }

    pub fn instantiate<T: Scalar>(&self) -> Result<Vec<Layer<T>>, NetSpecError> {
        build_stack(
            "branch",
            &self.layers,
            &self.blocks,
            self.input_shape,
            classifier_index(&self.layers),
        )
    }
}

/// Trunk plus K bound branches. The global softmax over the concatenated
/// branch outputs carries no weights and is implied.
#[derive(Clone, Debug, PartialEq)]
pub struct NofESpec {
    pub(crate) name: String,
    pub(crate) input_shape: Shape,
    pub(crate) trunk: Vec<LayerSpec>,
    pub(crate) trunk_blocks: Vec<ResidualBlock>,
    pub(crate) trunk_shapes: Vec<Shape>,
    pub(crate) branches: Vec<BoundBranch>,
    pub(crate) specialty_sizes: Vec<usize>,
    pub(crate) policy: TrainPolicy,
}

impl NofESpec {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn input_shape(&self) -> Shape {
        self.input_shape
    }

    pub fn trunk(&self) -> &[LayerSpec] {
        &self.trunk
    }

    pub fn trunk_shapes(&self) -> &[Shape] {
        &self.trunk_shapes
    }

    pub fn trunk_output_shape(&self) -> Shape {
        *self.trunk_shapes.last().expect("trunk is non-empty")
    }

    pub fn branches(&self) -> &[BoundBranch] {
        &self.branches
    }

    pub fn specialty_sizes(&self) -> &[usize] {
        &self.specialty_sizes
    }

    pub fn policy(&self) -> &TrainPolicy {
        &self.policy
    }

    pub fn trunk_param_count(&self) -> u64 {
        stack_params(&self.trunk, self.input_shape, &self.trunk_shapes)
    }

    /// Trunk layers with a relu after every conv/FC.
    pub fn instantiate_trunk<T: Scalar>(&self) -> Result<Vec<Layer<T>>, NetSpecError> {
        build_stack(&self.name, &self.trunk, &self.trunk_blocks, self.input_shape, None)
    }
}

pub(crate) fn stack_params(layers: &[LayerSpec], input: Shape, shapes: &[Shape]) -> u64 {
    layers
        .iter()
        .enumerate()
        .map(|(i, l)| l.param_count(if i == 0 { input } else { shapes[i - 1] }))
        .sum()
}

/// Converts a shape-checked stack into engine layers. Every conv/FC except the
/// one at `classifier` is followed by a relu. Residual blocks are refused.
pub fn build_stack<T: Scalar>(
    name: &str,
    layers: &[LayerSpec],
    blocks: &[ResidualBlock],
    input: Shape,
    classifier: Option<usize>,
) -> Result<Vec<Layer<T>>, NetSpecError> {
    let refuse = |reason: String| NetSpecError::NotInstantiable {
        name: name.to_string(),
        reason,
    };
    if !blocks.is_empty() {
        return Err(refuse(
            "residual blocks need batch normalization, which is not supported".into(),
        ));
    }
    let mut out = Vec::with_capacity(layers.len() * 2);
    let mut shape = input;
    for (i, spec) in layers.iter().enumerate() {
        let next = spec.output_shape(shape).map_err(&refuse)?;
        match spec {
            LayerSpec::Conv {
                kernel,
                stride,
                pad,
                groups,
                ..
            } => {
                let conv = Layer::conv(ConvParams {
                    in_channels: shape[0],
                    out_channels: next[0],
                    kernel: *kernel,
                    stride: *stride,
                    pad: *pad,
                    groups: *groups,
                })
                .map_err(|e| refuse(e.to_string()))?;
                out.push(conv);
            }
            LayerSpec::Pool {
                window,
                stride,
                kind,
            } => out.push(Layer::pool(*kind, *window, *stride)),
            LayerSpec::Lrn(p) => out.push(Layer::lrn(*p)),
            LayerSpec::Fc { .. } => {
                out.push(Layer::fully_connected(shape.iter().product(), next[0]))
            }
        }
        if spec.is_parametric() && classifier != Some(i) {
            out.push(Layer::relu());
        }
        shape = next;
    }
    Ok(out)
}
