//! Declarative classifier construction and forward execution with
//! activation capture.
//!
//! A [`NetworkSpec`] describes the architecture (plain chains, dense
//! blocks, transitions, head). [`Network::build`] compiles it into a flat
//! [`PlanStep`] list — the unrolled computation graph, with dense-block
//! skip connections expressed as explicit concatenations — and
//! initializes parameters. [`Network::forward_capture`] executes the plan
//! on an autodiff graph and records every intermediate needed later for
//! relevance propagation: layer inputs, pool argmax indices, batch-norm
//! statistics and dropout masks.

use crate::autodiff::{BnForward, Graph, Indices, NodeId};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

pub const SPEC_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSpec {
    Conv { in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize },
    Linear { in_dim: usize, out_dim: usize },
    Relu,
    MaxPool { kernel: usize, stride: usize },
    AvgPool { kernel: usize, stride: usize },
    BatchNorm { ch: usize, stab: f64 },
    Dropout { p: f64 },
    Flatten,
}

/// Dense block: each layer computes
/// `BN¹ → ReLU¹ → Conv¹(1x1, bottleneck) → BN² → ReLU² → Conv²(3x3, growth)`
/// on the concatenation of the block input and all previous layer outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseBlockSpec {
    pub layers: usize,
    pub growth: usize,
    pub bottleneck: usize,
    pub stab: f64,
}

/// Transition between dense blocks:
/// `BN¹ → ReLU¹ → Conv¹(1x1) → ReLU² → AvgPool` (the pool halves the
/// spatial dims).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionSpec {
    pub out_ch: usize,
    pub pool_kernel: usize,
    pub pool_stride: usize,
    pub stab: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Segment {
    Plain { layers: Vec<LayerSpec> },
    Dense(DenseBlockSpec),
    Transition(TransitionSpec),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    SingleLabel,
    MultiLabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InputShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

/// Classifier head: flatten, optional dropout, linear to `classes` logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub dropout: f64,
    pub classes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input: InputShape,
    pub segments: Vec<Segment>,
    pub head: HeadSpec,
    pub task: TaskKind,
}

#[derive(Serialize, Deserialize)]
struct VersionedSpec {
    spec_version: u32,
    #[serde(flatten)]
    spec: NetworkSpec,
}

impl NetworkSpec {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&VersionedSpec { spec_version: SPEC_VERSION, spec: self.clone() })
            .expect("network spec serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let v: VersionedSpec = serde_json::from_str(s)?;
        if v.spec_version != SPEC_VERSION {
            return Err(Error::Config(format!("unsupported spec_version {}", v.spec_version)));
        }
        Ok(v.spec)
    }
}

/// Shipped reference architectures.
pub fn preset(name: &str, input: InputShape, classes: usize, task: TaskKind) -> Result<NetworkSpec> {
    match name {
        "plain-small" => Ok(plain_small(input, classes, task)),
        "mini-dense" => Ok(mini_dense(input, classes, task)),
        other => Err(Error::Config(format!(
            "unknown preset '{}' (available: plain-small, mini-dense)",
            other
        ))),
    }
}

/// Three conv/pool stages and a dropout+linear head.
pub fn plain_small(input: InputShape, classes: usize, task: TaskKind) -> NetworkSpec {
    let c = input.channels;
    NetworkSpec {
        input,
        segments: vec![Segment::Plain {
            layers: vec![
                LayerSpec::Conv { in_ch: c, out_ch: 8, kernel: 3, stride: 1, pad: 1 },
                LayerSpec::Relu,
                LayerSpec::MaxPool { kernel: 2, stride: 2 },
                LayerSpec::Conv { in_ch: 8, out_ch: 16, kernel: 3, stride: 1, pad: 1 },
                LayerSpec::Relu,
                LayerSpec::MaxPool { kernel: 2, stride: 2 },
                LayerSpec::Conv { in_ch: 16, out_ch: 32, kernel: 3, stride: 1, pad: 1 },
                LayerSpec::Relu,
                LayerSpec::MaxPool { kernel: 2, stride: 2 },
            ],
        }],
        head: HeadSpec { dropout: 0.5, classes },
        task,
    }
}

/// Miniature densely-connected network: stem, two dense blocks of two
/// layers (growth 8), one transition, final BN+ReLU, dropout+linear head.
pub fn mini_dense(input: InputShape, classes: usize, task: TaskKind) -> NetworkSpec {
    let c = input.channels;
    let stab = 1e-5;
    NetworkSpec {
        input,
        segments: vec![
            Segment::Plain {
                layers: vec![
                    LayerSpec::Conv { in_ch: c, out_ch: 8, kernel: 3, stride: 1, pad: 1 },
                    LayerSpec::BatchNorm { ch: 8, stab },
                    LayerSpec::Relu,
                    LayerSpec::MaxPool { kernel: 2, stride: 2 },
                ],
            },
            Segment::Dense(DenseBlockSpec { layers: 2, growth: 8, bottleneck: 16, stab }),
            Segment::Transition(TransitionSpec { out_ch: 12, pool_kernel: 2, pool_stride: 2, stab }),
            Segment::Dense(DenseBlockSpec { layers: 2, growth: 8, bottleneck: 16, stab }),
            Segment::Plain {
                layers: vec![LayerSpec::BatchNorm { ch: 28, stab }, LayerSpec::Relu],
            },
        ],
        head: HeadSpec { dropout: 0.5, classes },
        task,
    }
}

pub type StepId = usize;
pub type ParamId = usize;

/// One primitive operation of the compiled network. `src` step indices
/// always point at earlier steps; dense-block skip connections appear as
/// [`PlanStep::Concat`] over multiple sources.
#[derive(Debug, Clone, PartialEq)]
pub enum PlanStep {
    Input,
    Conv { kernel: ParamId, bias: ParamId, stride: usize, pad: usize, src: StepId },
    Linear { weight: ParamId, bias: ParamId, src: StepId },
    BatchNorm { gamma: ParamId, beta: ParamId, stab: f64, running: usize, src: StepId },
    Relu { src: StepId },
    MaxPool { kernel: usize, stride: usize, src: StepId },
    AvgPool { kernel: usize, stride: usize, src: StepId },
    Dropout { p: f64, src: StepId },
    Flatten { src: StepId },
    Concat { srcs: Vec<StepId> },
}

impl PlanStep {
    pub fn describe(&self) -> &'static str {
        match self {
            PlanStep::Input => "input",
            PlanStep::Conv { .. } => "conv",
            PlanStep::Linear { .. } => "linear",
            PlanStep::BatchNorm { .. } => "batch_norm",
            PlanStep::Relu { .. } => "relu",
            PlanStep::MaxPool { .. } => "max_pool",
            PlanStep::AvgPool { .. } => "avg_pool",
            PlanStep::Dropout { .. } => "dropout",
            PlanStep::Flatten { .. } => "flatten",
            PlanStep::Concat { .. } => "concat",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-channel running statistics of one batch-norm layer, updated by an
/// exponential moving average during training forwards.
#[derive(Clone)]
pub struct RunningStat<S> {
    pub mean: Tensor<S>,
    pub var: Tensor<S>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum ShapeState {
    Map { c: usize, y: usize, x: usize },
    Flat { dim: usize },
}

struct Compiler {
    steps: Vec<PlanStep>,
    shapes: Vec<ShapeState>,
    params: Vec<(String, Vec<usize>, ParamInit)>,
    running_ch: Vec<usize>,
}

#[derive(Debug, Clone, Copy)]
enum ParamInit {
    HeNormal { fan_in: usize },
    Zero,
    One,
}

impl Compiler {
    fn err(&self, where_: String, what: String) -> Error {
        Error::Config(format!("invalid network spec at {}: {}", where_, what))
    }

    fn shape(&self, s: StepId) -> ShapeState {
        self.shapes[s]
    }

    fn map_shape(&self, s: StepId, where_: &str) -> Result<(usize, usize, usize)> {
        match self.shapes[s] {
            ShapeState::Map { c, y, x } => Ok((c, y, x)),
            ShapeState::Flat { .. } => {
                Err(Error::Config(format!("{}: expected a feature map, found flat features", where_)))
            }
        }
    }

    fn push(&mut self, step: PlanStep, shape: ShapeState) -> StepId {
        self.steps.push(step);
        self.shapes.push(shape);
        self.steps.len() - 1
    }

    fn add_param(&mut self, name: String, shape: Vec<usize>, init: ParamInit) -> ParamId {
        self.params.push((name, shape, init));
        self.params.len() - 1
    }

    fn conv(
        &mut self,
        name: &str,
        src: StepId,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        where_: &str,
    ) -> Result<StepId> {
        let (c, y, x) = self.map_shape(src, where_)?;
        if c != in_ch {
            return Err(self.err(where_.into(), format!("conv expects {} input channels, got {}", in_ch, c)));
        }
        if y + 2 * pad < kernel || x + 2 * pad < kernel {
            return Err(self.err(where_.into(), format!("conv kernel {} too large for {}x{}", kernel, y, x)));
        }
        let oy = (y + 2 * pad - kernel) / stride + 1;
        let ox = (x + 2 * pad - kernel) / stride + 1;
        let k = self.add_param(
            format!("{name}.kernel"),
            vec![in_ch, out_ch, kernel, kernel],
            ParamInit::HeNormal { fan_in: in_ch * kernel * kernel },
        );
        let b = self.add_param(format!("{name}.bias"), vec![out_ch], ParamInit::Zero);
        Ok(self.push(
            PlanStep::Conv { kernel: k, bias: b, stride, pad, src },
            ShapeState::Map { c: out_ch, y: oy, x: ox },
        ))
    }

    fn batchnorm(&mut self, name: &str, src: StepId, ch: usize, stab: f64, where_: &str) -> Result<StepId> {
        let (c, y, x) = self.map_shape(src, where_)?;
        if c != ch {
            return Err(self.err(where_.into(), format!("batch_norm expects {} channels, got {}", ch, c)));
        }
        if stab <= 0.0 {
            return Err(self.err(where_.into(), "batch_norm stab must be > 0".into()));
        }
        // The relevance mirror fuses BN with the operation that produced
        // its input; concatenations only slice, so every producer reached
        // through them must be a convolution or pooling step.
        let mut work = vec![src];
        while let Some(s) = work.pop() {
            match &self.steps[s] {
                PlanStep::Conv { .. } | PlanStep::MaxPool { .. } | PlanStep::AvgPool { .. } => {}
                PlanStep::Concat { srcs } => work.extend(srcs.iter().copied()),
                other => {
                    return Err(self.err(
                        where_.into(),
                        format!(
                            "batch_norm must follow a convolution or pooling (possibly through concatenation), found {}",
                            other.describe()
                        ),
                    ))
                }
            }
        }
        let g = self.add_param(format!("{name}.gamma"), vec![ch], ParamInit::One);
        let b = self.add_param(format!("{name}.beta"), vec![ch], ParamInit::Zero);
        let running = self.running_ch.len();
        self.running_ch.push(ch);
        Ok(self.push(
            PlanStep::BatchNorm { gamma: g, beta: b, stab, running, src },
            ShapeState::Map { c, y, x },
        ))
    }

    fn pool(&mut self, max: bool, src: StepId, kernel: usize, stride: usize, where_: &str) -> Result<StepId> {
        let (c, y, x) = self.map_shape(src, where_)?;
        if y < kernel || x < kernel {
            return Err(self.err(where_.into(), format!("pool window {} too large for {}x{}", kernel, y, x)));
        }
        let oy = (y - kernel) / stride + 1;
        let ox = (x - kernel) / stride + 1;
        let shape = ShapeState::Map { c, y: oy, x: ox };
        Ok(if max {
            self.push(PlanStep::MaxPool { kernel, stride, src }, shape)
        } else {
            self.push(PlanStep::AvgPool { kernel, stride, src }, shape)
        })
    }

    fn plain_layer(&mut self, seg: usize, idx: usize, layer: &LayerSpec, src: StepId) -> Result<StepId> {
        let where_ = format!("segment {} layer {} ({:?})", seg, idx, layer);
        match *layer {
            LayerSpec::Conv { in_ch, out_ch, kernel, stride, pad } => {
                self.conv(&format!("seg{seg}.conv{idx}"), src, in_ch, out_ch, kernel, stride, pad, &where_)
            }
            LayerSpec::Linear { in_dim, out_dim } => {
                let dim = match self.shape(src) {
                    ShapeState::Flat { dim } => dim,
                    ShapeState::Map { .. } => {
                        return Err(self.err(where_, "linear requires flattened input".into()))
                    }
                };
                if dim != in_dim {
                    return Err(self.err(where_, format!("linear expects {} features, got {}", in_dim, dim)));
                }
                let w = self.add_param(
                    format!("seg{seg}.linear{idx}.weight"),
                    vec![in_dim, out_dim],
                    ParamInit::HeNormal { fan_in: in_dim },
                );
                let b = self.add_param(format!("seg{seg}.linear{idx}.bias"), vec![out_dim], ParamInit::Zero);
                Ok(self.push(PlanStep::Linear { weight: w, bias: b, src }, ShapeState::Flat { dim: out_dim }))
            }
            LayerSpec::Relu => {
                let shape = self.shape(src);
                Ok(self.push(PlanStep::Relu { src }, shape))
            }
            LayerSpec::MaxPool { kernel, stride } => self.pool(true, src, kernel, stride, &where_),
            LayerSpec::AvgPool { kernel, stride } => self.pool(false, src, kernel, stride, &where_),
            LayerSpec::BatchNorm { ch, stab } => {
                self.batchnorm(&format!("seg{seg}.bn{idx}"), src, ch, stab, &where_)
            }
            LayerSpec::Dropout { p } => {
                if !(0.0..1.0).contains(&p) {
                    return Err(self.err(where_, "dropout p must lie in [0, 1)".into()));
                }
                let shape = self.shape(src);
                Ok(self.push(PlanStep::Dropout { p, src }, shape))
            }
            LayerSpec::Flatten => {
                let (c, y, x) = self.map_shape(src, &where_)?;
                Ok(self.push(PlanStep::Flatten { src }, ShapeState::Flat { dim: c * y * x }))
            }
        }
    }

    /// Emits one dense layer; returns the step producing its growth-channel
    /// output.
    fn dense_layer(
        &mut self,
        seg: usize,
        layer_idx: usize,
        spec: &DenseBlockSpec,
        inputs: &[StepId],
        where_: &str,
    ) -> Result<StepId> {
        let src = if inputs.len() == 1 {
            inputs[0]
        } else {
            self.concat(inputs, where_)?
        };
        let (c, _, _) = self.map_shape(src, where_)?;
        let name = format!("seg{seg}.dense{layer_idx}");
        let bn1 = self.batchnorm(&format!("{name}.bn1"), src, c, spec.stab, where_)?;
        let relu1 = self.push(PlanStep::Relu { src: bn1 }, self.shape(bn1));
        let conv1 = self.conv(&format!("{name}.conv1"), relu1, c, spec.bottleneck, 1, 1, 0, where_)?;
        let bn2 = self.batchnorm(&format!("{name}.bn2"), conv1, spec.bottleneck, spec.stab, where_)?;
        let relu2 = self.push(PlanStep::Relu { src: bn2 }, self.shape(bn2));
        self.conv(&format!("{name}.conv2"), relu2, spec.bottleneck, spec.growth, 3, 1, 1, where_)
    }

    fn concat(&mut self, srcs: &[StepId], where_: &str) -> Result<StepId> {
        let mut c_total = 0;
        let (_, y0, x0) = self.map_shape(srcs[0], where_)?;
        for &s in srcs {
            let (c, y, x) = self.map_shape(s, where_)?;
            if (y, x) != (y0, x0) {
                return Err(self.err(where_.into(), "concat spatial dims differ".into()));
            }
            c_total += c;
        }
        Ok(self.push(PlanStep::Concat { srcs: srcs.to_vec() }, ShapeState::Map { c: c_total, y: y0, x: x0 }))
    }
}

#[derive(Clone)]
pub struct Network<S> {
    spec: NetworkSpec,
    plan: Vec<PlanStep>,
    params: Vec<Tensor<S>>,
    param_names: Vec<String>,
    running: Vec<RunningStat<S>>,
    /// EMA momentum for running statistics.
    pub bn_momentum: f64,
}

impl<S> std::fmt::Debug for Network<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Network({} steps, {} params)", self.plan.len(), self.params.len())
    }
}

impl<S: Scalar> Network<S> {
    /// Compiles and validates the spec, then initializes parameters
    /// deterministically from `seed` (He fan-in for conv/linear weights,
    /// zero biases, unit-gamma BN).
    pub fn build(spec: &NetworkSpec, seed: u64) -> Result<Network<S>> {
        if spec.head.classes == 0 {
            return Err(Error::Config("head must emit at least one class".into()));
        }
        if !(0.0..1.0).contains(&spec.head.dropout) {
            return Err(Error::Config("head dropout must lie in [0, 1)".into()));
        }
        let mut c =
            Compiler { steps: Vec::new(), shapes: Vec::new(), params: Vec::new(), running_ch: Vec::new() };
        c.push(
            PlanStep::Input,
            ShapeState::Map { c: spec.input.channels, y: spec.input.height, x: spec.input.width },
        );
        let mut cur = 0usize;
        for (si, seg) in spec.segments.iter().enumerate() {
            match seg {
                Segment::Plain { layers } => {
                    for (li, layer) in layers.iter().enumerate() {
                        cur = c.plain_layer(si, li, layer, cur)?;
                    }
                }
                Segment::Dense(d) => {
                    if d.layers == 0 || d.growth == 0 || d.bottleneck == 0 {
                        return Err(Error::Config(format!(
                            "segment {}: dense block layers/growth/bottleneck must be positive",
                            si
                        )));
                    }
                    let mut feeds = vec![cur];
                    for li in 0..d.layers {
                        let where_ = format!("segment {} dense layer {}", si, li);
                        let y = c.dense_layer(si, li, d, &feeds, &where_)?;
                        feeds.push(y);
                    }
                    cur = c.concat(&feeds, &format!("segment {} output", si))?;
                }
                Segment::Transition(t) => {
                    let where_ = format!("segment {} (transition)", si);
                    let (ch, y, x) = c.map_shape(cur, &where_)?;
                    let bn1 = c.batchnorm(&format!("seg{si}.trans.bn1"), cur, ch, t.stab, &where_)?;
                    let relu1 = c.push(PlanStep::Relu { src: bn1 }, c.shape(bn1));
                    let conv1 = c.conv(&format!("seg{si}.trans.conv1"), relu1, ch, t.out_ch, 1, 1, 0, &where_)?;
                    let relu2 = c.push(PlanStep::Relu { src: conv1 }, c.shape(conv1));
                    cur = c.pool(false, relu2, t.pool_kernel, t.pool_stride, &where_)?;
                    let (_, oy, ox) = c.map_shape(cur, &where_)?;
                    if oy * 2 != y || ox * 2 != x {
                        return Err(Error::Config(format!(
                            "segment {}: transition pool must halve spatial dims ({}x{} -> {}x{})",
                            si, y, x, oy, ox
                        )));
                    }
                }
            }
        }
        // Head: flatten, dropout, linear to K logits.
        if let ShapeState::Map { c: ch, y, x } = c.shape(cur) {
            cur = c.push(PlanStep::Flatten { src: cur }, ShapeState::Flat { dim: ch * y * x });
        }
        if spec.head.dropout > 0.0 {
            let shape = c.shape(cur);
            cur = c.push(PlanStep::Dropout { p: spec.head.dropout, src: cur }, shape);
        }
        let dim = match c.shape(cur) {
            ShapeState::Flat { dim } => dim,
            ShapeState::Map { .. } => unreachable!("flattened above"),
        };
        let w = c.add_param("head.weight".into(), vec![dim, spec.head.classes], ParamInit::HeNormal {
            fan_in: dim,
        });
        let b = c.add_param("head.bias".into(), vec![spec.head.classes], ParamInit::Zero);
        c.push(PlanStep::Linear { weight: w, bias: b, src: cur }, ShapeState::Flat {
            dim: spec.head.classes,
        });

        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(c.params.len());
        let mut names = Vec::with_capacity(c.params.len());
        for (name, shape, init) in &c.params {
            let t = match init {
                ParamInit::HeNormal { fan_in } => {
                    Tensor::rand_normal(shape, (2.0 / *fan_in as f64).sqrt(), &mut rng)
                }
                ParamInit::Zero => Tensor::zeros(shape),
                ParamInit::One => Tensor::full(shape, S::one()),
            };
            params.push(t);
            names.push(name.clone());
        }
        let running = c
            .running_ch
            .iter()
            .map(|&ch| RunningStat { mean: Tensor::zeros(&[ch]), var: Tensor::full(&[ch], S::one()) })
            .collect();
        Ok(Network {
            spec: spec.clone(),
            plan: c.steps,
            params,
            param_names: names,
            running,
            bn_momentum: 0.1,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn plan(&self) -> &[PlanStep] {
        &self.plan
    }

    pub fn classes(&self) -> usize {
        self.spec.head.classes
    }

    pub fn param(&self, id: ParamId) -> &Tensor<S> {
        &self.params[id]
    }

    pub fn params(&self) -> &[Tensor<S>] {
        &self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.param_names
    }

    pub fn running_stats(&self) -> &[RunningStat<S>] {
        &self.running
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    pub fn set_param(&mut self, id: ParamId, value: Tensor<S>) -> Result<()> {
        if value.shape() != self.params[id].shape() {
            return Err(Error::shape(
                "set_param",
                format!("{:?} vs {:?}", value.shape(), self.params[id].shape()),
            ));
        }
        self.params[id] = value;
        Ok(())
    }

    pub fn set_running(&mut self, stats: Vec<RunningStat<S>>) -> Result<()> {
        if stats.len() != self.running.len() {
            return Err(Error::Config("running statistic count mismatch".into()));
        }
        self.running = stats;
        Ok(())
    }

    /// Runs the network on `batch`, recording on `graph` everything the
    /// relevance mirror needs. Returns the logits node and the record.
    ///
    /// Train mode samples dropout masks from `rng` and lets batch norm use
    /// (and record) batch statistics, updating the running EMA; eval mode
    /// uses running statistics and identity dropout.
    pub fn forward_capture<R: Rng>(
        &mut self,
        graph: &mut Graph<S>,
        batch: &Tensor<S>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(NodeId, ActivationRecord<S>)> {
        let want = [self.spec.input.channels, self.spec.input.height, self.spec.input.width];
        if batch.rank() != 4 || batch.shape()[1..] != want {
            return Err(Error::shape(
                "forward",
                format!("batch {:?} does not match input (B, {:?})", batch.shape(), want),
            ));
        }
        let batch_size = batch.shape()[0];
        let param_nodes: Vec<NodeId> =
            self.params.iter().map(|p| graph.leaf(p.clone(), true)).collect();
        let input_node = graph.leaf(batch.clone(), false);
        let mut steps: Vec<RecordedStep<S>> = Vec::with_capacity(self.plan.len());
        steps.push(RecordedStep { out: input_node, aux: StepAux::None });

        for (i, step) in self.plan.iter().enumerate().skip(1) {
            let rec = |steps: &[RecordedStep<S>], s: StepId| steps[s].out;
            let (out, aux) = match step {
                PlanStep::Input => unreachable!("input is step 0"),
                PlanStep::Conv { kernel, bias, stride, pad, src } => {
                    let out = graph.conv2d(
                        rec(&steps, *src),
                        param_nodes[*kernel],
                        Some(param_nodes[*bias]),
                        *stride,
                        *pad,
                    )?;
                    (out, StepAux::None)
                }
                PlanStep::Linear { weight, bias, src } => {
                    let out = graph.linear(rec(&steps, *src), param_nodes[*weight], Some(param_nodes[*bias]))?;
                    (out, StepAux::None)
                }
                PlanStep::BatchNorm { gamma, beta, stab, running, src } => {
                    let x = rec(&steps, *src);
                    let bn: BnForward<S> = match mode {
                        Mode::Train => {
                            let bn = graph.batchnorm2d_batch(x, param_nodes[*gamma], param_nodes[*beta], *stab)?;
                            let m = S::from_f64(self.bn_momentum);
                            let one_m = S::one() - m;
                            let stat = &mut self.running[*running];
                            let bmean = graph.value(bn.mean).clone();
                            let bvar = bn.batch_var.clone().expect("batch mode yields variance");
                            let mean = stat
                                .mean
                                .data()
                                .iter()
                                .zip(bmean.data())
                                .map(|(&r, &b)| one_m * r + m * b)
                                .collect();
                            let var = stat
                                .var
                                .data()
                                .iter()
                                .zip(bvar.data())
                                .map(|(&r, &b)| one_m * r + m * b)
                                .collect();
                            stat.mean = Tensor::new(stat.mean.shape(), mean)?;
                            stat.var = Tensor::new(stat.var.shape(), var)?;
                            bn
                        }
                        Mode::Eval => {
                            let stat = &self.running[*running];
                            graph.batchnorm2d_running(
                                x,
                                param_nodes[*gamma],
                                param_nodes[*beta],
                                *stab,
                                &stat.mean,
                                &stat.var,
                            )?
                        }
                    };
                    (bn.y, StepAux::Bn { mean: bn.mean, sigma: bn.sigma })
                }
                PlanStep::Relu { src } => (graph.relu(rec(&steps, *src)), StepAux::None),
                PlanStep::MaxPool { kernel, stride, src } => {
                    let (out, idx) = graph.maxpool2d(rec(&steps, *src), *kernel, *stride)?;
                    (out, StepAux::Pool(idx))
                }
                PlanStep::AvgPool { kernel, stride, src } => {
                    (graph.avgpool2d(rec(&steps, *src), *kernel, *stride)?, StepAux::None)
                }
                PlanStep::Dropout { p, src } => {
                    let x = rec(&steps, *src);
                    match mode {
                        Mode::Train if *p > 0.0 => {
                            let keep = 1.0 - *p;
                            let scale = S::from_f64(1.0 / keep);
                            let shape = graph.value(x).shape().to_vec();
                            let n: usize = shape.iter().product();
                            let mask: Vec<S> = (0..n)
                                .map(|_| if rng.gen::<f64>() < *p { S::zero() } else { scale })
                                .collect();
                            let mask = Tensor::new(&shape, mask)?;
                            let m = graph.constant(mask.clone());
                            (graph.mul(x, m)?, StepAux::Mask(mask))
                        }
                        _ => {
                            let shape = graph.value(x).shape().to_vec();
                            (x, StepAux::Mask(Tensor::full(&shape, S::one())))
                        }
                    }
                }
                PlanStep::Flatten { src } => {
                    let x = rec(&steps, *src);
                    let sh = graph.value(x).shape().to_vec();
                    let flat: usize = sh[1..].iter().product();
                    (graph.reshape(x, &[sh[0], flat])?, StepAux::None)
                }
                PlanStep::Concat { srcs } => {
                    let nodes: Vec<NodeId> = srcs.iter().map(|&s| rec(&steps, s)).collect();
                    (graph.concat_channels(&nodes)?, StepAux::None)
                }
            };
            if !graph.value(out).all_finite() {
                return Err(Error::numeric(
                    "forward",
                    format!("non-finite activation at step {} ({})", i, step.describe()),
                ));
            }
            steps.push(RecordedStep { out, aux });
        }
        let logits = steps.last().expect("plan is non-empty").out;
        Ok((logits, ActivationRecord { steps, param_nodes, input: input_node, batch: batch_size }))
    }
}

/// Captured forward pass: one entry per plan step, holding the graph node
/// of the step output plus whatever the relevance mirror needs (pool
/// argmax indices, batch-norm statistics, dropout masks). Values are
/// frozen snapshots of the forward that produced the logits; reading them
/// through the graph keeps them differentiable.
pub struct ActivationRecord<S> {
    pub steps: Vec<RecordedStep<S>>,
    pub param_nodes: Vec<NodeId>,
    pub input: NodeId,
    pub batch: usize,
}

pub struct RecordedStep<S> {
    pub out: NodeId,
    pub aux: StepAux<S>,
}

pub enum StepAux<S> {
    None,
    Pool(Indices),
    Bn { mean: NodeId, sigma: NodeId },
    Mask(Tensor<S>),
}

/// Copy of `logits` with every column but `k` zeroed — the relevance seed
/// for class `k`.
pub fn select_logit<S: Scalar>(graph: &mut Graph<S>, logits: NodeId, k: usize) -> Result<NodeId> {
    let sh = graph.value(logits).shape().to_vec();
    if sh.len() != 2 {
        return Err(Error::shape("select_logit", format!("logits must be rank 2, got {:?}", sh)));
    }
    if k >= sh[1] {
        return Err(Error::Config(format!("class {} out of range for {} classes", k, sh[1])));
    }
    let mut mask = vec![S::zero(); sh[1]];
    mask[k] = S::one();
    let mask = Tensor::new(&[sh[1]], mask)?;
    let m = graph.constant(mask);
    // Axis-1 broadcast against (B, K).
    graph.mul(logits, m)
}
