//! Network graphs: named layer nodes wired into a DAG, parameter groups, and
//! whole-graph forward/backward.
//!
//! Nodes are stored in topological order (construction only lets a node
//! reference earlier nodes or the reserved input `"data"`), so forward is a
//! single in-order sweep and backward a reverse sweep. Where a node fans out
//! to several consumers, its output gradient is the sum of the consumers'
//! contributions, accumulated in reverse node order.
//!
//! Naming is a contract the rest of the crate relies on: hidden layers are
//! `fc1..fcK` with activations `relu1..reluK`, growth surgery adds
//! `fcK_plus*`, `fca`, `norm{K}`, `norm{K}_plus*`, `concat{K}`, and the
//! output layer is always `classifier` feeding the `loss` node.

mod checkpoint;

pub use checkpoint::{from_bytes, load_checkpoint, save_checkpoint, to_bytes, FORMAT_VERSION};

use std::collections::BTreeMap;

use crate::layers::{
    concat_backward, concat_forward, dense_backward, dense_forward, normscale_backward,
    normscale_forward, relu_apply, relu_backward, softmax_rows, softmax_xent, DenseParams,
    NormScaleParams,
};
use crate::numerics::{Matrix, Rng};
use crate::{Error, Result};

/// Reserved name for the batch input.
pub const INPUT_NAME: &str = "data";

#[derive(Clone, Debug)]
pub enum LayerKind {
    Dense(DenseParams),
    Relu,
    NormScale(NormScaleParams),
    Concat,
    SoftmaxXent,
}

impl LayerKind {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerKind::Dense(_) => "Dense",
            LayerKind::Relu => "Relu",
            LayerKind::NormScale(_) => "NormScale",
            LayerKind::Concat => "Concat",
            LayerKind::SoftmaxXent => "SoftmaxXent",
        }
    }

    /// Number of stored parameters (0 for parameterless kinds).
    pub fn param_count(&self) -> usize {
        match self {
            LayerKind::Dense(p) => p.param_count(),
            LayerKind::NormScale(p) => p.width(),
            _ => 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNode {
    pub name: String,
    pub kind: LayerKind,
    pub inputs: Vec<String>,
    /// Name of the parameter group this node belongs to.
    pub group: String,
}

/// Shared training treatment for a set of nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroup {
    pub name: String,
    pub lr_multiplier: f64,
    pub frozen: bool,
    pub decay_enabled: bool,
}

impl ParamGroup {
    pub fn unit(name: &str) -> ParamGroup {
        ParamGroup {
            name: name.to_string(),
            lr_multiplier: 1.0,
            frozen: false,
            decay_enabled: true,
        }
    }
}

/// Per-node activations from one forward pass. Contains one entry per graph
/// node plus the input under `"data"`; the loss node's entry holds the
/// softmax probabilities.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    outputs: BTreeMap<String, Matrix>,
}

impl ForwardCache {
    pub fn output(&self, name: &str) -> Result<&Matrix> {
        self.outputs
            .get(name)
            .ok_or_else(|| Error::Domain(format!("no cached activation for node {name:?}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.outputs.contains_key(name)
    }
}

/// Parameter gradients from one backward pass, keyed by node name. Every
/// parameterized node gets an entry, frozen or not; freezing is the
/// optimizer's business.
#[derive(Clone, Debug)]
pub enum ParamGrad {
    Dense(Matrix),
    Gamma(Vec<f64>),
}

#[derive(Clone, Debug, Default)]
pub struct GradientMap {
    grads: BTreeMap<String, ParamGrad>,
}

impl GradientMap {
    pub fn get(&self, name: &str) -> Option<&ParamGrad> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamGrad)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    #[cfg(test)]
    pub(crate) fn insert(&mut self, name: impl Into<String>, grad: ParamGrad) {
        self.grads.insert(name.into(), grad);
    }
}

#[derive(Clone, Debug)]
pub struct NetworkGraph {
    nodes: Vec<LayerNode>,
    groups: BTreeMap<String, ParamGroup>,
    input_width: usize,
    /// Name of the SoftmaxXent node.
    output: String,
    /// Name of the representation node the classifier consumes.
    feature_output: String,
    /// Append-only provenance log (construction and surgery events).
    metadata: Vec<String>,
}

fn valid_name(name: &str) -> bool {
    !name.is_empty()
        && name != INPUT_NAME
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

impl NetworkGraph {
    /// Empty graph; callers push nodes in topological order.
    pub fn new(input_width: usize) -> NetworkGraph {
        NetworkGraph {
            nodes: Vec::new(),
            groups: BTreeMap::new(),
            input_width,
            output: String::new(),
            feature_output: String::new(),
            metadata: Vec::new(),
        }
    }

    pub fn input_width(&self) -> usize {
        self.input_width
    }

    pub fn output(&self) -> &str {
        &self.output
    }

    pub fn feature_output(&self) -> &str {
        &self.feature_output
    }

    pub fn set_output(&mut self, name: &str) {
        self.output = name.to_string();
    }

    pub fn set_feature_output(&mut self, name: &str) {
        self.feature_output = name.to_string();
    }

    pub fn metadata(&self) -> &[String] {
        &self.metadata
    }

    pub fn log_event(&mut self, line: impl Into<String>) {
        let line = line.into();
        debug_assert!(!line.contains('\n'));
        self.metadata.push(line);
    }

    pub(crate) fn restore_metadata(&mut self, lines: Vec<String>) {
        self.metadata = lines;
    }

    pub fn nodes(&self) -> &[LayerNode] {
        &self.nodes
    }

    pub fn node(&self, name: &str) -> Option<&LayerNode> {
        self.nodes.iter().find(|n| n.name == name)
    }

    pub fn node_mut(&mut self, name: &str) -> Option<&mut LayerNode> {
        self.nodes.iter_mut().find(|n| n.name == name)
    }

    pub fn node_index(&self, name: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.name == name)
    }

    pub fn groups(&self) -> impl Iterator<Item = &ParamGroup> {
        self.groups.values()
    }

    pub fn group(&self, name: &str) -> Option<&ParamGroup> {
        self.groups.get(name)
    }

    pub fn group_mut(&mut self, name: &str) -> Option<&mut ParamGroup> {
        self.groups.get_mut(name)
    }

    pub fn upsert_group(&mut self, group: ParamGroup) {
        self.groups.insert(group.name.clone(), group);
    }

    /// Group of a node, looked up through the node's group name.
    pub fn group_of(&self, node: &LayerNode) -> Result<&ParamGroup> {
        self.groups
            .get(&node.group)
            .ok_or_else(|| Error::Config(format!("node {:?} references missing group {:?}", node.name, node.group)))
    }

    /// Appends a node; its inputs must already exist (or be `"data"`).
    pub fn push_node(&mut self, node: LayerNode) -> Result<()> {
        self.insert_node(self.nodes.len(), node)
    }

    /// Inserts a node at `index`, which must still respect topological order.
    pub fn insert_node(&mut self, index: usize, node: LayerNode) -> Result<()> {
        if !valid_name(&node.name) {
            return Err(Error::Config(format!("invalid node name {:?}", node.name)));
        }
        if self.node(&node.name).is_some() {
            return Err(Error::Config(format!("duplicate node name {:?}", node.name)));
        }
        if node.inputs.is_empty() {
            return Err(Error::Config(format!("node {:?} has no inputs", node.name)));
        }
        for input in &node.inputs {
            let ok = input == INPUT_NAME
                || self.nodes[..index].iter().any(|n| &n.name == input);
            if !ok {
                return Err(Error::Config(format!(
                    "node {:?} input {:?} does not precede it",
                    node.name, input
                )));
            }
        }
        self.nodes.insert(index, node);
        Ok(())
    }

    /// Drops groups no node references.
    pub fn prune_groups(&mut self) {
        let used: Vec<String> = self.nodes.iter().map(|n| n.group.clone()).collect();
        self.groups.retain(|name, _| used.iter().any(|u| u == name));
    }

    /// Total stored parameter count.
    pub fn param_count(&self) -> usize {
        self.nodes.iter().map(|n| n.kind.param_count()).sum()
    }

    /// Output width of every node (and the input), walking in node order.
    pub fn widths(&self) -> Result<BTreeMap<String, usize>> {
        let mut w = BTreeMap::new();
        w.insert(INPUT_NAME.to_string(), self.input_width);
        for node in &self.nodes {
            let get = |name: &String| -> Result<usize> {
                w.get(name).copied().ok_or_else(|| {
                    Error::Config(format!("node {:?} input {:?} unknown", node.name, name))
                })
            };
            let width = match &node.kind {
                LayerKind::Dense(p) => {
                    let in_w = get(&node.inputs[0])?;
                    if in_w != p.n_in() {
                        return Err(Error::shape(
                            "graph width check",
                            format!("{} feeds width {in_w}", node.inputs[0]),
                            format!("{} expects {}", node.name, p.n_in()),
                        ));
                    }
                    p.n_out()
                }
                LayerKind::Relu => get(&node.inputs[0])?,
                LayerKind::NormScale(p) => {
                    let in_w = get(&node.inputs[0])?;
                    if in_w != p.width() {
                        return Err(Error::shape(
                            "graph width check",
                            format!("{} feeds width {in_w}", node.inputs[0]),
                            format!("{} gamma has {}", node.name, p.width()),
                        ));
                    }
                    in_w
                }
                LayerKind::Concat => {
                    let mut total = 0;
                    for input in &node.inputs {
                        total += get(input)?;
                    }
                    total
                }
                LayerKind::SoftmaxXent => get(&node.inputs[0])?,
            };
            w.insert(node.name.clone(), width);
        }
        Ok(w)
    }

    /// Width of one node's output.
    pub fn width_of(&self, name: &str) -> Result<usize> {
        self.widths()?
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("unknown node {name:?}")))
    }

    /// The classifier Dense node (by naming contract).
    pub fn classifier(&self) -> Result<&LayerNode> {
        self.node("classifier")
            .ok_or_else(|| Error::Config("graph has no classifier node".into()))
    }

    /// Full structural integrity check: wiring, widths, groups, and the
    /// classifier/loss contract.
    pub fn validate(&self) -> Result<()> {
        let mut seen: Vec<&str> = Vec::new();
        for node in &self.nodes {
            if node.inputs.iter().any(|i| i != INPUT_NAME && !seen.contains(&i.as_str())) {
                return Err(Error::Config(format!(
                    "node {:?} consumes a later or unknown node",
                    node.name
                )));
            }
            if seen.contains(&node.name.as_str()) {
                return Err(Error::Config(format!("duplicate node {:?}", node.name)));
            }
            if !self.groups.contains_key(&node.group) {
                return Err(Error::Config(format!(
                    "node {:?} references missing group {:?}",
                    node.name, node.group
                )));
            }
            seen.push(&node.name);
        }
        let widths = self.widths()?;
        let softmax_count = self
            .nodes
            .iter()
            .filter(|n| matches!(n.kind, LayerKind::SoftmaxXent))
            .count();
        if softmax_count != 1 {
            return Err(Error::Config(format!(
                "graph must have exactly one SoftmaxXent node, found {softmax_count}"
            )));
        }
        let loss = self
            .node(&self.output)
            .ok_or_else(|| Error::Config(format!("output node {:?} missing", self.output)))?;
        if !matches!(loss.kind, LayerKind::SoftmaxXent) {
            return Err(Error::Config(format!(
                "output node {:?} is not SoftmaxXent",
                self.output
            )));
        }
        let classifier = self.classifier()?;
        if loss.inputs != [classifier.name.clone()] {
            return Err(Error::Config(
                "loss must consume exactly the classifier".into(),
            ));
        }
        let feat_width = widths
            .get(&self.feature_output)
            .copied()
            .ok_or_else(|| Error::Config(format!("feature_output {:?} missing", self.feature_output)))?;
        match &classifier.kind {
            LayerKind::Dense(p) if p.n_in() == feat_width => Ok(()),
            LayerKind::Dense(p) => Err(Error::shape(
                "classifier width",
                format!("feature_output {:?} width {feat_width}", self.feature_output),
                format!("classifier expects {}", p.n_in()),
            )),
            _ => Err(Error::Config("classifier node is not Dense".into())),
        }
    }

    /// Forward pass. With labels, also returns the mean cross-entropy loss.
    pub fn forward(&self, batch: &Matrix, labels: Option<&[usize]>) -> Result<(ForwardCache, Option<f64>)> {
        if batch.cols() != self.input_width {
            return Err(Error::shape(
                "forward",
                format!("input width {}", self.input_width),
                batch.shape_str(),
            ));
        }
        let mut outputs: BTreeMap<String, Matrix> = BTreeMap::new();
        outputs.insert(INPUT_NAME.to_string(), batch.clone());
        let mut loss = None;
        for node in &self.nodes {
            let out = match &node.kind {
                LayerKind::Dense(p) => dense_forward(p, &outputs[&node.inputs[0]])?,
                LayerKind::Relu => relu_apply(&outputs[&node.inputs[0]]),
                LayerKind::NormScale(p) => normscale_forward(p, &outputs[&node.inputs[0]])?,
                LayerKind::Concat => {
                    let blocks: Vec<&Matrix> = node.inputs.iter().map(|i| &outputs[i]).collect();
                    concat_forward(&blocks)?
                }
                LayerKind::SoftmaxXent => {
                    let logits = &outputs[&node.inputs[0]];
                    if let Some(labels) = labels {
                        let (l, _) = softmax_xent(logits, labels)?;
                        loss = Some(l);
                    }
                    softmax_rows(logits)
                }
            };
            outputs.insert(node.name.clone(), out);
        }
        Ok((ForwardCache { outputs }, loss))
    }

    /// Backward pass from the loss node. Returns one gradient entry per
    /// parameterized node (including frozen ones).
    pub fn backward(&self, cache: &ForwardCache, labels: &[usize]) -> Result<GradientMap> {
        let mut d_out: BTreeMap<String, Matrix> = BTreeMap::new();
        let mut grads = GradientMap::default();
        for node in self.nodes.iter().rev() {
            let d = if let LayerKind::SoftmaxXent = node.kind {
                // d_logits = (softmax - onehot) / batch, from the cached
                // probabilities; this is the start of the chain.
                let probs = cache.output(&node.name)?;
                if labels.len() != probs.rows() {
                    return Err(Error::shape(
                        "backward",
                        probs.shape_str(),
                        format!("{} labels", labels.len()),
                    ));
                }
                let inv_batch = 1.0 / probs.rows() as f64;
                let mut d = probs.clone();
                for b in 0..d.rows() {
                    let y = labels[b];
                    if y >= d.cols() {
                        return Err(Error::Domain(format!(
                            "label {y} out of range for {} classes",
                            d.cols()
                        )));
                    }
                    let row = d.row_mut(b);
                    row[y] -= 1.0;
                    for v in row.iter_mut() {
                        *v *= inv_batch;
                    }
                }
                accumulate(&mut d_out, &node.inputs[0], d);
                continue;
            } else {
                match d_out.remove(&node.name) {
                    Some(d) => d,
                    None => continue, // not on a path to the loss
                }
            };
            match &node.kind {
                LayerKind::Dense(p) => {
                    let input = cache.output(&node.inputs[0])?;
                    let g = dense_backward(p, input, &d)?;
                    grads.grads.insert(node.name.clone(), ParamGrad::Dense(g.d_weights));
                    if node.inputs[0] != INPUT_NAME {
                        accumulate(&mut d_out, &node.inputs[0], g.d_input);
                    }
                }
                LayerKind::Relu => {
                    let input = cache.output(&node.inputs[0])?;
                    let g = relu_backward(input, &d)?;
                    accumulate(&mut d_out, &node.inputs[0], g);
                }
                LayerKind::NormScale(p) => {
                    let input = cache.output(&node.inputs[0])?;
                    let g = normscale_backward(p, input, &d)?;
                    grads.grads.insert(node.name.clone(), ParamGrad::Gamma(g.d_gamma));
                    accumulate(&mut d_out, &node.inputs[0], g.d_input);
                }
                LayerKind::Concat => {
                    let widths: Vec<usize> = node
                        .inputs
                        .iter()
                        .map(|i| cache.output(i).map(Matrix::cols))
                        .collect::<Result<_>>()?;
                    let parts = concat_backward(&d, &widths)?;
                    for (input, part) in node.inputs.iter().zip(parts) {
                        accumulate(&mut d_out, input, part);
                    }
                }
                LayerKind::SoftmaxXent => unreachable!(),
            }
        }
        Ok(grads)
    }
}

fn accumulate(map: &mut BTreeMap<String, Matrix>, name: &str, delta: Matrix) {
    match map.get_mut(name) {
        Some(acc) => {
            for (a, d) in acc.data_mut().iter_mut().zip(delta.data()) {
                *a += d;
            }
        }
        None => {
            map.insert(name.to_string(), delta);
        }
    }
}

/// Weight init for freshly built networks.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MlpInit {
    /// Gaussian(0, stddev) for every layer; stddev 0 gives all-zero weights.
    Gaussian { stddev: f64 },
    /// Gaussian(0, 1/sqrt(n_in)) per layer; sensible default for training
    /// from scratch.
    ScaledGaussian,
}

/// Builds `data -> fc1 -> relu1 -> ... -> fcK -> reluK -> classifier -> loss`.
///
/// `widths[0]` is the input width, `widths.last()` the class count, and the
/// middle entries the hidden layer sizes (at least one). Each hidden layer
/// gets its own parameter group named after it; the classifier gets group
/// `"classifier"`. All groups start unfrozen with lr multiplier 1.
pub fn build_mlp(widths: &[usize], rng: &mut Rng, init: MlpInit) -> Result<NetworkGraph> {
    if widths.len() < 3 {
        return Err(Error::Config(format!(
            "build_mlp needs [input, hidden.., classes], got {} widths",
            widths.len()
        )));
    }
    if widths.iter().any(|&w| w == 0) {
        return Err(Error::Config("layer widths must be positive".into()));
    }
    let stddev_for = |n_in: usize| match init {
        MlpInit::Gaussian { stddev } => stddev,
        MlpInit::ScaledGaussian => 1.0 / (n_in as f64).sqrt(),
    };
    let mut net = NetworkGraph::new(widths[0]);
    let hidden = &widths[1..widths.len() - 1];
    let classes = *widths.last().unwrap();
    let mut prev = INPUT_NAME.to_string();
    let mut prev_width = widths[0];
    for (i, &w) in hidden.iter().enumerate() {
        let fc = format!("fc{}", i + 1);
        let relu = format!("relu{}", i + 1);
        net.upsert_group(ParamGroup::unit(&fc));
        let params = DenseParams::gaussian(rng, w, prev_width, stddev_for(prev_width));
        net.push_node(LayerNode {
            name: fc.clone(),
            kind: LayerKind::Dense(params),
            inputs: vec![prev.clone()],
            group: fc.clone(),
        })?;
        net.push_node(LayerNode {
            name: relu.clone(),
            kind: LayerKind::Relu,
            inputs: vec![fc.clone()],
            group: fc.clone(),
        })?;
        prev = relu;
        prev_width = w;
    }
    net.upsert_group(ParamGroup::unit("classifier"));
    let params = DenseParams::gaussian(rng, classes, prev_width, stddev_for(prev_width));
    net.push_node(LayerNode {
        name: "classifier".into(),
        kind: LayerKind::Dense(params),
        inputs: vec![prev.clone()],
        group: "classifier".into(),
    })?;
    net.push_node(LayerNode {
        name: "loss".into(),
        kind: LayerKind::SoftmaxXent,
        inputs: vec!["classifier".into()],
        group: "classifier".into(),
    })?;
    net.set_output("loss");
    net.set_feature_output(&prev);
    net.log_event(format!(
        "build_mlp widths={widths:?}",
    ));
    net.validate()?;
    Ok(net)
}
