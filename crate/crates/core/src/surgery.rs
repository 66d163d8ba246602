//! Capacity-growth surgery.
//!
//! Four ways of growing a pre-trained network for a new task, plus plain
//! classifier replacement:
//!
//! * deepen: a fresh block (`fca` -> `relua` -> `norma`) on top of the
//!   current representation;
//! * widen: a lateral branch (`fcK_plus` -> `reluK_plus`) reading the host
//!   layer's input, joined with the original block by `concatK`; both blocks
//!   pass through normalize-and-scale (`normK`, `normK_plus`) so neither
//!   side's activations dominate the other's learning pace;
//! * deepen-and-widen: widen, then deepen on the concatenated block;
//! * widen-twice: widen the top two layers. The original upper layer keeps
//!   reading only the original lower block (its activations are preserved
//!   exactly); the new upper branch reads the full lower concatenation.
//!
//! Every operation re-initializes the classifier for the new task and places
//! all added nodes in the `"new"` parameter group (unfrozen, 10x learning
//! rate). Operations are atomic: they mutate a working copy and swap it in
//! only after the grown graph validates, so a failed call leaves the network
//! untouched. Surgery never alters pre-existing parameters or the inputs of
//! pre-existing nodes other than the classifier.

use crate::layers::{DenseParams, NormScaleParams};
use crate::network::{LayerKind, LayerNode, NetworkGraph, ParamGroup};
use crate::numerics::{gaussian_fill, Rng};
use crate::{Error, Result};

/// Stddev for all freshly initialized surgery weights (biases start at 0).
pub const INIT_STDDEV: f64 = 0.01;

/// Default normalize-and-scale target norm ρ.
pub const DEFAULT_GAMMA: f64 = 10.0;

/// Group that holds every surgery-added node, including γ vectors.
pub const NEW_GROUP: &str = "new";

/// Learning-rate multiplier of the `"new"` group.
pub const NEW_GROUP_LR_MULT: f64 = 10.0;

#[derive(Clone, Debug, PartialEq)]
pub enum GrowthKind {
    ReplaceClassifier,
    Deepen {
        size: usize,
    },
    Widen {
        target: String,
        size: usize,
    },
    DeepenAndWiden {
        /// Widened layer; the new top block uses the same size.
        target: String,
        size: usize,
    },
    WidenTwice {
        lower: String,
        lower_size: usize,
        upper: String,
        upper_size: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitPolicy {
    /// Gaussian(0, 0.01), bias 0.
    Random,
    /// Copy the host layer's matrix and add Gaussian(0, 0.01) everywhere;
    /// requires the new block to match the host block's shape.
    CopyPlusNoise,
}

impl InitPolicy {
    fn label(&self) -> &'static str {
        match self {
            InitPolicy::Random => "random",
            InitPolicy::CopyPlusNoise => "copy+noise",
        }
    }
}

#[derive(Clone, Debug)]
pub struct GrowthPlan {
    pub kind: GrowthKind,
    pub init_policy: InitPolicy,
    /// Initial value ρ of every new γ entry.
    pub gamma_init: f64,
    /// When false, blocks feed the concat raw (the ablation condition).
    pub insert_normscale: bool,
}

impl GrowthPlan {
    fn with_kind(kind: GrowthKind) -> GrowthPlan {
        GrowthPlan {
            kind,
            init_policy: InitPolicy::Random,
            gamma_init: DEFAULT_GAMMA,
            insert_normscale: true,
        }
    }

    pub fn replace() -> GrowthPlan {
        Self::with_kind(GrowthKind::ReplaceClassifier)
    }

    pub fn deepen(size: usize) -> GrowthPlan {
        Self::with_kind(GrowthKind::Deepen { size })
    }

    pub fn widen(target: &str, size: usize) -> GrowthPlan {
        Self::with_kind(GrowthKind::Widen {
            target: target.to_string(),
            size,
        })
    }

    pub fn deepen_and_widen(target: &str, size: usize) -> GrowthPlan {
        Self::with_kind(GrowthKind::DeepenAndWiden {
            target: target.to_string(),
            size,
        })
    }

    pub fn widen_twice(
        lower: &str,
        lower_size: usize,
        upper: &str,
        upper_size: usize,
    ) -> GrowthPlan {
        Self::with_kind(GrowthKind::WidenTwice {
            lower: lower.to_string(),
            lower_size,
            upper: upper.to_string(),
            upper_size,
        })
    }

    pub fn without_scaling(mut self) -> GrowthPlan {
        self.insert_normscale = false;
        self
    }

    fn validate(&self) -> Result<()> {
        let sizes: &[usize] = match &self.kind {
            GrowthKind::ReplaceClassifier => &[],
            GrowthKind::Deepen { size }
            | GrowthKind::Widen { size, .. }
            | GrowthKind::DeepenAndWiden { size, .. } => std::slice::from_ref(size),
            GrowthKind::WidenTwice {
                lower_size,
                upper_size,
                ..
            } => &[*lower_size, *upper_size][..2],
        };
        if sizes.iter().any(|&s| s == 0) {
            return Err(Error::Config("growth sizes must be positive".into()));
        }
        if !(self.gamma_init > 0.0 && self.gamma_init.is_finite()) {
            return Err(Error::Config(format!(
                "gamma_init must be positive and finite, got {}",
                self.gamma_init
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct SurgeryReport {
    pub nodes_added: Vec<String>,
    pub nodes_rewired: Vec<String>,
    /// Post-minus-pre stored parameter count (classifier swaps can shrink it).
    pub param_delta: i64,
    /// Provenance lines appended to the network metadata, one per growth site.
    pub provenance: Vec<String>,
}

pub fn apply_plan(
    net: &mut NetworkGraph,
    plan: &GrowthPlan,
    n_classes: usize,
    rng: &mut Rng,
) -> Result<SurgeryReport> {
    match plan.kind {
        GrowthKind::ReplaceClassifier => replace_classifier(net, n_classes, rng),
        GrowthKind::Deepen { .. } => grow_deeper(net, plan, n_classes, rng),
        GrowthKind::Widen { .. } => grow_wider(net, plan, n_classes, rng),
        GrowthKind::DeepenAndWiden { .. } => grow_dwa(net, plan, n_classes, rng),
        GrowthKind::WidenTwice { .. } => grow_wwa(net, plan, n_classes, rng),
    }
}

/// Swap in a freshly initialized classifier for `n_classes`, reading the
/// current feature output. The node moves into the `"new"` group.
pub fn replace_classifier(
    net: &mut NetworkGraph,
    n_classes: usize,
    rng: &mut Rng,
) -> Result<SurgeryReport> {
    let mut work = net.clone();
    let before = work.param_count() as i64;
    reinit_classifier(&mut work, n_classes, rng)?;
    let entry = format!(
        "replace_classifier classes={n_classes} features={}",
        work.feature_output()
    );
    work.log_event(&entry);
    work.validate()?;
    let param_delta = work.param_count() as i64 - before;
    *net = work;
    Ok(SurgeryReport {
        nodes_added: Vec::new(),
        nodes_rewired: vec!["classifier".to_string()],
        param_delta,
        provenance: vec![entry],
    })
}

pub fn grow_deeper(
    net: &mut NetworkGraph,
    plan: &GrowthPlan,
    n_classes: usize,
    rng: &mut Rng,
) -> Result<SurgeryReport> {
    let GrowthKind::Deepen { size } = plan.kind else {
        return Err(Error::Config("grow_deeper requires a Deepen plan".into()));
    };
    plan.validate()?;
    if plan.init_policy == InitPolicy::CopyPlusNoise {
        return Err(Error::Config(
            "a fresh top layer has no units to copy; deepening needs Random init".into(),
        ));
    }
    let mut work = net.clone();
    let before = work.param_count() as i64;
    let (nodes_added, entry) = deepen_internal(&mut work, size, plan, rng)?;
    reinit_classifier(&mut work, n_classes, rng)?;
    work.log_event(&entry);
    work.validate()?;
    let param_delta = work.param_count() as i64 - before;
    *net = work;
    Ok(SurgeryReport {
        nodes_added,
        nodes_rewired: vec!["classifier".to_string()],
        param_delta,
        provenance: vec![entry],
    })
}

pub fn grow_wider(
    net: &mut NetworkGraph,
    plan: &GrowthPlan,
    n_classes: usize,
    rng: &mut Rng,
) -> Result<SurgeryReport> {
    let GrowthKind::Widen { ref target, size } = plan.kind else {
        return Err(Error::Config("grow_wider requires a Widen plan".into()));
    };
    plan.validate()?;
    let mut work = net.clone();
    let before = work.param_count() as i64;
    check_feeds_classifier(&work, target)?;
    let out = widen_internal(&mut work, target, size, plan, None, rng)?;
    work.set_feature_output(&out.concat_name);
    reinit_classifier(&mut work, n_classes, rng)?;
    work.log_event(&out.entry);
    work.validate()?;
    let param_delta = work.param_count() as i64 - before;
    *net = work;
    let mut nodes_rewired = out.rewired;
    nodes_rewired.push("classifier".to_string());
    Ok(SurgeryReport {
        nodes_added: out.added,
        nodes_rewired,
        param_delta,
        provenance: vec![out.entry],
    })
}

pub fn grow_dwa(
    net: &mut NetworkGraph,
    plan: &GrowthPlan,
    n_classes: usize,
    rng: &mut Rng,
) -> Result<SurgeryReport> {
    let GrowthKind::DeepenAndWiden { ref target, size } = plan.kind else {
        return Err(Error::Config("grow_dwa requires a DeepenAndWiden plan".into()));
    };
    plan.validate()?;
    let mut work = net.clone();
    let before = work.param_count() as i64;
    check_feeds_classifier(&work, target)?;
    // Widen first; the new top block then reads the concatenated features.
    // The widen site honors the plan's init policy; the fresh top layer is
    // always Random (there is nothing to copy).
    let widen = widen_internal(&mut work, target, size, plan, None, rng)?;
    work.set_feature_output(&widen.concat_name);
    let (deep_added, deep_entry) = deepen_internal(&mut work, size, plan, rng)?;
    reinit_classifier(&mut work, n_classes, rng)?;
    work.log_event(&widen.entry);
    work.log_event(&deep_entry);
    work.validate()?;
    let param_delta = work.param_count() as i64 - before;
    *net = work;
    let mut nodes_added = widen.added;
    nodes_added.extend(deep_added);
    let mut nodes_rewired = widen.rewired;
    nodes_rewired.push("classifier".to_string());
    Ok(SurgeryReport {
        nodes_added,
        nodes_rewired,
        param_delta,
        provenance: vec![widen.entry, deep_entry],
    })
}

pub fn grow_wwa(
    net: &mut NetworkGraph,
    plan: &GrowthPlan,
    n_classes: usize,
    rng: &mut Rng,
) -> Result<SurgeryReport> {
    let GrowthKind::WidenTwice {
        ref lower,
        lower_size,
        ref upper,
        upper_size,
    } = plan.kind
    else {
        return Err(Error::Config("grow_wwa requires a WidenTwice plan".into()));
    };
    plan.validate()?;
    if plan.init_policy == InitPolicy::CopyPlusNoise {
        return Err(Error::Config(
            "the upper branch reads a widened block of a different width; \
             widening two layers needs Random init"
                .into(),
        ));
    }
    let mut work = net.clone();
    let before = work.param_count() as i64;
    let lower_relu = relu_of(&work, lower)?;
    let upper_node = work
        .node(upper)
        .ok_or_else(|| Error::Config(format!("widen target {upper:?} not found")))?;
    if upper_node.inputs != [lower_relu.clone()] {
        return Err(Error::Config(format!(
            "upper target {upper:?} must consume the lower target's block {lower_relu:?}"
        )));
    }
    check_feeds_classifier(&work, upper)?;
    let low = widen_internal(&mut work, lower, lower_size, plan, None, rng)?;
    // The original upper layer keeps its input untouched; only the new
    // upper branch sees the widened lower representation.
    let up = widen_internal(
        &mut work,
        upper,
        upper_size,
        plan,
        Some(low.concat_name.clone()),
        rng,
    )?;
    work.set_feature_output(&up.concat_name);
    reinit_classifier(&mut work, n_classes, rng)?;
    work.log_event(&low.entry);
    work.log_event(&up.entry);
    work.validate()?;
    let param_delta = work.param_count() as i64 - before;
    *net = work;
    let mut nodes_added = low.added;
    nodes_added.extend(up.added);
    let mut nodes_rewired = low.rewired;
    nodes_rewired.extend(up.rewired);
    nodes_rewired.push("classifier".to_string());
    Ok(SurgeryReport {
        nodes_added,
        nodes_rewired,
        param_delta,
        provenance: vec![low.entry, up.entry],
    })
}

fn ensure_new_group(net: &mut NetworkGraph) {
    if net.group(NEW_GROUP).is_none() {
        net.upsert_group(ParamGroup {
            name: NEW_GROUP.to_string(),
            lr_multiplier: NEW_GROUP_LR_MULT,
            frozen: false,
            decay_enabled: true,
        });
    }
}

fn reinit_classifier(work: &mut NetworkGraph, n_classes: usize, rng: &mut Rng) -> Result<()> {
    if n_classes < 2 {
        return Err(Error::Config(format!(
            "classifier needs at least 2 classes, got {n_classes}"
        )));
    }
    ensure_new_group(work);
    let feat = work.feature_output().to_string();
    let feat_width = structural_width(work, &feat)?;
    let node = work
        .node_mut("classifier")
        .ok_or_else(|| Error::Config("graph has no classifier node".into()))?;
    node.kind = LayerKind::Dense(DenseParams::gaussian(rng, n_classes, feat_width, INIT_STDDEV));
    node.inputs = vec![feat];
    node.group = NEW_GROUP.to_string();
    // The loss follows the classifier, so the old classifier group empties.
    let out_name = work.output().to_string();
    if let Some(loss) = work.node_mut(&out_name) {
        loss.group = NEW_GROUP.to_string();
    }
    work.prune_groups();
    Ok(())
}

/// Output width of one node from its own declaration, following inputs only
/// where the node has no width of its own. Unlike `NetworkGraph::widths`,
/// this tolerates the transient mid-surgery state where a widened concat no
/// longer matches the not-yet-replaced classifier.
fn structural_width(net: &NetworkGraph, name: &str) -> Result<usize> {
    if name == crate::network::INPUT_NAME {
        return Ok(net.input_width());
    }
    let node = net
        .node(name)
        .ok_or_else(|| Error::Config(format!("unknown node {name:?}")))?;
    Ok(match &node.kind {
        LayerKind::Dense(p) => p.n_out(),
        LayerKind::NormScale(p) => p.width(),
        LayerKind::Relu | LayerKind::SoftmaxXent => structural_width(net, &node.inputs[0])?,
        LayerKind::Concat => {
            let mut total = 0;
            for input in &node.inputs {
                total += structural_width(net, input)?;
            }
            total
        }
    })
}

/// Numeric index of a widenable layer, from the `fc<index>` naming scheme.
fn layer_index(target: &str) -> Result<usize> {
    target
        .strip_prefix("fc")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Config(format!("widen target {target:?} must be named fc<index>")))
}

/// The Relu node forming `target`'s block output.
fn relu_of(net: &NetworkGraph, target: &str) -> Result<String> {
    net.nodes()
        .iter()
        .find(|n| matches!(n.kind, LayerKind::Relu) && n.inputs.len() == 1 && n.inputs[0] == target)
        .map(|n| n.name.clone())
        .ok_or_else(|| Error::Config(format!("widen target {target:?} has no relu block")))
}

/// Widening rewires the classifier onto the concat, so the target's block
/// must be exactly what the classifier consumes (directly, or through the
/// concat of an earlier widening).
fn check_feeds_classifier(net: &NetworkGraph, target: &str) -> Result<()> {
    let block = relu_of(net, target)?;
    let concat_name = format!("concat{}", layer_index(target)?);
    if net.feature_output() != block && net.feature_output() != concat_name {
        return Err(Error::Config(format!(
            "widen target {target:?} does not feed the classifier"
        )));
    }
    Ok(())
}

fn ordinal_suffix(ord: usize) -> String {
    if ord == 1 {
        String::new()
    } else {
        ord.to_string()
    }
}

struct WidenOutcome {
    added: Vec<String>,
    rewired: Vec<String>,
    concat_name: String,
    entry: String,
}

/// Adds one lateral branch beside `target` and joins it into `concat<idx>`,
/// creating the concat (and the host block's NormScale) on first widening or
/// extending the existing concat on repeat widenings. Does not touch the
/// feature output or the classifier; callers do.
fn widen_internal(
    work: &mut NetworkGraph,
    target: &str,
    size: usize,
    plan: &GrowthPlan,
    branch_input: Option<String>,
    rng: &mut Rng,
) -> Result<WidenOutcome> {
    ensure_new_group(work);
    let idx = layer_index(target)?;
    let host = work
        .node(target)
        .ok_or_else(|| Error::Config(format!("widen target {target:?} not found")))?;
    let LayerKind::Dense(host_params) = &host.kind else {
        return Err(Error::Config(format!("widen target {target:?} is not Dense")));
    };
    let host_width = host_params.n_out();
    let host_input = host.inputs[0].clone();
    let host_weights = host_params.weights.clone();
    let host_relu = relu_of(work, target)?;

    let branch = branch_input.unwrap_or(host_input);
    let branch_width = structural_width(work, &branch)?;

    let params = match plan.init_policy {
        InitPolicy::Random => DenseParams::gaussian(rng, size, branch_width, INIT_STDDEV),
        InitPolicy::CopyPlusNoise => {
            if size != host_width {
                return Err(Error::Config(format!(
                    "copy+noise widening needs the new block to match the host width \
                     (host {target:?} has {host_width} units, plan asks for {size})"
                )));
            }
            if branch_width + 1 != host_weights.cols() {
                return Err(Error::Config(format!(
                    "copy+noise widening needs the branch to read the host's input \
                     (host consumes width {}, branch {branch:?} feeds {branch_width})",
                    host_weights.cols() - 1
                )));
            }
            let mut weights = host_weights;
            let noise = gaussian_fill(rng, weights.rows(), weights.cols(), 0.0, INIT_STDDEV);
            for (w, n) in weights.data_mut().iter_mut().zip(noise.data()) {
                *w += n;
            }
            DenseParams::new(weights)?
        }
    };

    let mut ord = 1;
    while work
        .node(&format!("fc{idx}_plus{}", ordinal_suffix(ord)))
        .is_some()
    {
        ord += 1;
    }
    let os = ordinal_suffix(ord);
    let fc_name = format!("fc{idx}_plus{os}");
    let relu_name = format!("relu{idx}_plus{os}");
    let norm_plus_name = format!("norm{idx}_plus{os}");
    let norm_host_name = format!("norm{idx}");
    let concat_name = format!("concat{idx}");
    let creating_concat = work.node(&concat_name).is_none();

    // New nodes slot in just before the concat (or the classifier when the
    // concat does not exist yet) so the graph stays topologically ordered.
    let mut at = match work.node_index(&concat_name) {
        Some(i) => i,
        None => work
            .node_index("classifier")
            .ok_or_else(|| Error::Config("graph has no classifier node".into()))?,
    };
    let mut added = Vec::new();
    let mut rewired = Vec::new();
    let mut insert = |work: &mut NetworkGraph, name: &str, kind: LayerKind, inputs: Vec<String>| {
        work.insert_node(
            at,
            LayerNode {
                name: name.to_string(),
                kind,
                inputs,
                group: NEW_GROUP.to_string(),
            },
        )?;
        at += 1;
        added.push(name.to_string());
        Ok::<(), Error>(())
    };

    insert(work, &fc_name, LayerKind::Dense(params), vec![branch])?;
    insert(work, &relu_name, LayerKind::Relu, vec![fc_name.clone()])?;
    let mut old_block = host_relu.clone();
    let mut new_block = relu_name.clone();
    if plan.insert_normscale {
        if creating_concat {
            insert(
                work,
                &norm_host_name,
                LayerKind::NormScale(NormScaleParams::constant(host_width, plan.gamma_init)?),
                vec![host_relu],
            )?;
            old_block = norm_host_name;
        }
        insert(
            work,
            &norm_plus_name,
            LayerKind::NormScale(NormScaleParams::constant(size, plan.gamma_init)?),
            vec![relu_name],
        )?;
        new_block = norm_plus_name;
    }
    if creating_concat {
        insert(
            work,
            &concat_name,
            LayerKind::Concat,
            vec![old_block, new_block],
        )?;
    } else {
        work.node_mut(&concat_name).unwrap().inputs.push(new_block);
        rewired.push(concat_name.clone());
    }

    let entry = format!(
        "grow_wider target={target} size={size} policy={} normscale={} gamma={}",
        plan.init_policy.label(),
        plan.insert_normscale,
        plan.gamma_init
    );
    Ok(WidenOutcome {
        added,
        rewired,
        concat_name,
        entry,
    })
}

/// Stacks `fca` -> `relua` (-> `norma`) on the current feature output and
/// points the feature output at the new top. The classifier is untouched;
/// callers re-initialize it.
fn deepen_internal(
    work: &mut NetworkGraph,
    size: usize,
    plan: &GrowthPlan,
    rng: &mut Rng,
) -> Result<(Vec<String>, String)> {
    ensure_new_group(work);
    for name in ["fca", "relua", "norma"] {
        if work.node(name).is_some() {
            return Err(Error::Config(format!(
                "node {name:?} already exists; the network can be deepened only once"
            )));
        }
    }
    let base = work.feature_output().to_string();
    let base_width = structural_width(work, &base)?;
    let mut at = work
        .node_index("classifier")
        .ok_or_else(|| Error::Config("graph has no classifier node".into()))?;
    let mut added = Vec::new();
    let mut insert = |work: &mut NetworkGraph, name: &str, kind: LayerKind, inputs: Vec<String>| {
        work.insert_node(
            at,
            LayerNode {
                name: name.to_string(),
                kind,
                inputs,
                group: NEW_GROUP.to_string(),
            },
        )?;
        at += 1;
        added.push(name.to_string());
        Ok::<(), Error>(())
    };
    insert(
        work,
        "fca",
        LayerKind::Dense(DenseParams::gaussian(rng, size, base_width, INIT_STDDEV)),
        vec![base.clone()],
    )?;
    insert(work, "relua", LayerKind::Relu, vec!["fca".to_string()])?;
    let mut top = "relua".to_string();
    if plan.insert_normscale {
        insert(
            work,
            "norma",
            LayerKind::NormScale(NormScaleParams::constant(size, plan.gamma_init)?),
            vec![top],
        )?;
        top = "norma".to_string();
    }
    work.set_feature_output(&top);
    let entry = format!(
        "grow_deeper size={size} over={base} normscale={} gamma={}",
        plan.insert_normscale, plan.gamma_init
    );
    Ok((added, entry))
}
