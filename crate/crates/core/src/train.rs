//! SGD fine-tuning: momentum, weight decay, step LR schedule, per-group LR
//! multipliers, freeze scenarios, and classifier relearning.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::harness::dataset::Dataset;
use crate::network::{
    from_bytes, to_bytes, GradientMap, LayerKind, NetworkGraph, ParamGrad, ParamGroup,
};
use crate::numerics::{derive_seed, Matrix, Rng};
use crate::surgery::{self, NEW_GROUP};
use crate::{Error, Result};

/// Which parameter groups a fine-tuning run unfreezes. Ordered from most
/// conservative to full fine-tuning; each level includes the previous one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scenario {
    /// Only the grown layers and the fresh classifier (group "new").
    #[serde(rename = "new-only")]
    NewOnly,
    /// "new" plus the topmost pre-existing Dense block.
    #[serde(rename = "from-top-minus-1")]
    FromTopMinus1,
    /// "new" plus the top two pre-existing Dense blocks.
    #[serde(rename = "from-top-minus-2")]
    FromTopMinus2,
    /// Everything unfrozen.
    #[serde(rename = "all")]
    All,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [
        Scenario::NewOnly,
        Scenario::FromTopMinus1,
        Scenario::FromTopMinus2,
        Scenario::All,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Scenario::NewOnly => "new-only",
            Scenario::FromTopMinus1 => "from-top-minus-1",
            Scenario::FromTopMinus2 => "from-top-minus-2",
            Scenario::All => "all",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Scenario> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.label() == s)
            .ok_or_else(|| Error::Config(format!("unknown scenario {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// LR drops by `step_factor` every `step_epochs` epochs.
    pub step_epochs: usize,
    pub step_factor: f64,
    pub batch_size: usize,
    pub scenario: Scenario,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            base_lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0005,
            epochs: 40,
            step_epochs: 15,
            step_factor: 10.0,
            batch_size: 32,
            scenario: Scenario::All,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// base_lr may be zero: a zero-rate run is the fixpoint sanity check.
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!(
                "base_lr must be a finite nonnegative number, got {}",
                self.base_lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0,1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight_decay must be a finite nonnegative number, got {}",
                self.weight_decay
            )));
        }
        if self.step_factor <= 1.0 || !self.step_factor.is_finite() {
            return Err(Error::Config(format!(
                "step_factor must exceed 1, got {}",
                self.step_factor
            )));
        }
        if self.step_epochs == 0 {
            return Err(Error::Config("step_epochs must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Momentum buffers, keyed by node name, created lazily with zero values.
#[derive(Clone, Debug, Default)]
pub struct OptimState {
    velocity: BTreeMap<String, ParamGrad>,
}

/// Accuracy-over-epoch curves for the blocks feeding a grown classifier,
/// probed separately and together.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockCurves {
    pub old_block: Vec<f64>,
    pub new_block: Vec<f64>,
    pub combined: Vec<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunResult {
    /// Mean training cross-entropy per epoch.
    pub train_loss: Vec<f64>,
    /// Macro-averaged validation accuracy per epoch.
    pub val_accuracy: Vec<f64>,
    /// Filled by the harness after the run, if a test split exists.
    pub test_accuracy: Option<f64>,
    /// Filled by the harness from per-epoch snapshots, when requested.
    pub block_curves: Option<BlockCurves>,
    pub wall_clock_secs: f64,
}

pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> f64 {
    cfg.base_lr / cfg.step_factor.powi((epoch / cfg.step_epochs) as i32)
}

/// One momentum step on a weight matrix. `decay` is already resolved to the
/// effective coefficient (zero when the group opts out).
fn step_dense(weights: &mut Matrix, grad: &Matrix, velocity: &mut Matrix, lr: f64, momentum: f64, decay: f64) {
    let w = weights.data_mut();
    let g = grad.data();
    let v = velocity.data_mut();
    for i in 0..w.len() {
        let g_eff = g[i] + decay * w[i];
        v[i] = momentum * v[i] - lr * g_eff;
        w[i] += v[i];
    }
}

/// Scale vectors never receive weight decay; shrinking a norm target toward
/// zero would defeat its purpose.
fn step_gamma(gamma: &mut [f64], grad: &[f64], velocity: &mut [f64], lr: f64, momentum: f64) {
    for i in 0..gamma.len() {
        velocity[i] = momentum * velocity[i] - lr * grad[i];
        gamma[i] += velocity[i];
    }
}

/// Applies one optimizer step to every unfrozen parameterized node that has
/// a gradient entry. `epoch`/`batch` only feed error diagnostics.
pub fn sgd_step(
    net: &mut NetworkGraph,
    grads: &GradientMap,
    state: &mut OptimState,
    lr_epoch: f64,
    cfg: &TrainConfig,
    epoch: usize,
    batch: usize,
) -> Result<()> {
    // Finiteness first: no tensor is touched if any incoming gradient is bad.
    for (name, grad) in grads.iter() {
        let finite = match grad {
            ParamGrad::Dense(g) => g.all_finite(),
            ParamGrad::Gamma(g) => g.iter().all(|x| x.is_finite()),
        };
        if !finite {
            return Err(Error::NonFiniteGradient {
                tensor: name.clone(),
                epoch,
                batch,
            });
        }
    }
    let groups: BTreeMap<String, ParamGroup> = net
        .groups()
        .map(|g| (g.name.clone(), g.clone()))
        .collect();
    let names: Vec<String> = net.nodes().iter().map(|n| n.name.clone()).collect();
    for name in names {
        let node = net.node_mut(&name).expect("node listed above");
        let group = groups
            .get(&node.group)
            .ok_or_else(|| Error::Config(format!("node {name:?} references missing group")))?;
        if group.frozen {
            continue;
        }
        // A parameterized node off the loss path has no gradient; leave it be.
        let Some(grad) = grads.get(&name) else { continue };
        let lr = lr_epoch * group.lr_multiplier;
        match (&mut node.kind, grad) {
            (LayerKind::Dense(p), ParamGrad::Dense(g)) => {
                if g.rows() != p.weights.rows() || g.cols() != p.weights.cols() {
                    return Err(Error::shape("sgd_step", p.weights.shape_str(), g.shape_str()));
                }
                let v = state
                    .velocity
                    .entry(name.clone())
                    .or_insert_with(|| ParamGrad::Dense(Matrix::zeros(g.rows(), g.cols())));
                let ParamGrad::Dense(v) = v else {
                    return Err(Error::Config(format!("velocity kind mismatch for {name:?}")));
                };
                if v.rows() != g.rows() || v.cols() != g.cols() {
                    return Err(Error::shape("sgd_step velocity", v.shape_str(), g.shape_str()));
                }
                let decay = if group.decay_enabled { cfg.weight_decay } else { 0.0 };
                step_dense(&mut p.weights, g, v, lr, cfg.momentum, decay);
            }
            (LayerKind::NormScale(p), ParamGrad::Gamma(g)) => {
                if g.len() != p.gamma.len() {
                    return Err(Error::shape(
                        "sgd_step",
                        format!("{} scales", p.gamma.len()),
                        format!("{} gradients", g.len()),
                    ));
                }
                let v = state
                    .velocity
                    .entry(name.clone())
                    .or_insert_with(|| ParamGrad::Gamma(vec![0.0; g.len()]));
                let ParamGrad::Gamma(v) = v else {
                    return Err(Error::Config(format!("velocity kind mismatch for {name:?}")));
                };
                step_gamma(&mut p.gamma, g, v, lr, cfg.momentum);
            }
            (LayerKind::Relu | LayerKind::Concat | LayerKind::SoftmaxXent, _) => continue,
            _ => {
                return Err(Error::Config(format!(
                    "gradient kind mismatch for node {name:?}"
                )))
            }
        }
    }
    Ok(())
}

/// Sets every group's frozen flag for the given scenario. All scenarios but
/// `All` require a "new" group, i.e. a net that has been grown (or at least
/// had its classifier replaced).
pub fn apply_scenario(net: &mut NetworkGraph, scenario: Scenario) -> Result<()> {
    let group_names: Vec<String> = net.groups().map(|g| g.name.clone()).collect();
    if scenario == Scenario::All {
        for name in &group_names {
            net.group_mut(name).expect("listed").frozen = false;
        }
        return Ok(());
    }
    if !group_names.iter().any(|n| n == NEW_GROUP) {
        return Err(Error::Config(format!(
            "scenario {scenario} needs a {NEW_GROUP:?} group; grow the net or replace its classifier first"
        )));
    }
    // Host blocks are fc1..fcK; unfreeze from the top down as the scenario
    // deepens.
    let mut fc_indices: Vec<(usize, String)> = group_names
        .iter()
        .filter_map(|n| {
            n.strip_prefix("fc")
                .and_then(|d| d.parse::<usize>().ok())
                .map(|i| (i, n.clone()))
        })
        .collect();
    fc_indices.sort();
    let unfreeze_top = match scenario {
        Scenario::NewOnly => 0,
        Scenario::FromTopMinus1 => 1,
        Scenario::FromTopMinus2 => 2,
        Scenario::All => unreachable!(),
    };
    if fc_indices.len() < unfreeze_top {
        return Err(Error::Config(format!(
            "scenario {scenario} needs {unfreeze_top} host blocks, found {}",
            fc_indices.len()
        )));
    }
    let open: Vec<&String> = fc_indices.iter().rev().take(unfreeze_top).map(|(_, n)| n).collect();
    for name in &group_names {
        let unfrozen = name == NEW_GROUP || open.iter().any(|o| *o == name);
        net.group_mut(name).expect("listed").frozen = !unfrozen;
    }
    Ok(())
}

fn check_dataset(net: &NetworkGraph, ds: &Dataset, what: &str) -> Result<()> {
    if ds.is_empty() {
        return Err(Error::Config(format!("{what} set {:?} is empty", ds.name)));
    }
    if ds.width() != net.input_width() {
        return Err(Error::Config(format!(
            "{what} set {:?} has width {}, net expects {}",
            ds.name,
            ds.width(),
            net.input_width()
        )));
    }
    Ok(())
}

fn classifier_width(net: &NetworkGraph) -> Result<usize> {
    match &net.classifier()?.kind {
        LayerKind::Dense(p) => Ok(p.n_out()),
        _ => Err(Error::Config("classifier node is not Dense".into())),
    }
}

/// Fine-tunes `net` in place under `cfg` and returns the loss/accuracy
/// curves. On divergence the net is rolled back to the end of the last
/// completed epoch before the error is returned.
pub fn train(net: &mut NetworkGraph, train_set: &Dataset, val_set: &Dataset, cfg: &TrainConfig) -> Result<RunResult> {
    let (result, _) = train_impl(net, train_set, val_set, cfg, false)?;
    Ok(result)
}

/// As `train`, but also returns a checkpoint snapshot of the net at the end
/// of every epoch (for post-hoc block curve probing).
pub fn train_retaining(
    net: &mut NetworkGraph,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
) -> Result<(RunResult, Vec<Vec<u8>>)> {
    train_impl(net, train_set, val_set, cfg, true)
}

fn train_impl(
    net: &mut NetworkGraph,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
    keep_snapshots: bool,
) -> Result<(RunResult, Vec<Vec<u8>>)> {
    let started = Instant::now();
    cfg.validate()?;
    check_dataset(net, train_set, "train")?;
    check_dataset(net, val_set, "validation")?;
    let n_out = classifier_width(net)?;
    for (ds, what) in [(train_set, "train"), (val_set, "validation")] {
        if ds.class_count != n_out {
            return Err(Error::Config(format!(
                "{what} set {:?} has {} classes, classifier emits {n_out}",
                ds.name, ds.class_count
            )));
        }
    }
    apply_scenario(net, cfg.scenario)?;

    let mut rng = Rng::new(cfg.seed);
    let mut state = OptimState::default();
    let mut last_good = to_bytes(net)?;
    let mut train_loss = Vec::with_capacity(cfg.epochs);
    let mut val_accuracy = Vec::with_capacity(cfg.epochs);
    let mut snapshots = Vec::new();
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 0..cfg.epochs {
        let lr_epoch = lr_at_epoch(cfg, epoch);
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (features, labels) = train_set.gather(chunk);
            let (cache, loss) = net.forward(&features, Some(&labels))?;
            let loss = loss.expect("labels were supplied");
            if !loss.is_finite() {
                *net = from_bytes(&last_good)?;
                return Err(Error::Diverged { epoch });
            }
            let grads = net.backward(&cache, &labels)?;
            if let Err(e) = sgd_step(net, &grads, &mut state, lr_epoch, cfg, epoch, batch_idx) {
                *net = from_bytes(&last_good)?;
                return Err(e);
            }
            loss_sum += loss * chunk.len() as f64;
        }
        train_loss.push(loss_sum / train_set.len() as f64);
        val_accuracy.push(evaluate(net, val_set)?);
        last_good = to_bytes(net)?;
        if keep_snapshots {
            snapshots.push(last_good.clone());
        }
    }

    let result = RunResult {
        train_loss,
        val_accuracy,
        test_accuracy: None,
        block_curves: None,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    Ok((result, snapshots))
}

/// Row-wise argmax with ties broken toward the lowest class index.
pub(crate) fn argmax_rows(logits: &Matrix) -> Vec<usize> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0;
            for (i, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalDetail {
    /// Mean of per-class accuracies over classes that appear in the set.
    pub macro_accuracy: f64,
    /// Plain fraction of correct predictions.
    pub micro_accuracy: f64,
    /// Per-class accuracy; None for classes with no samples.
    pub per_class: Vec<Option<f64>>,
}

/// Macro-averaged accuracy (the headline metric).
pub fn evaluate(net: &NetworkGraph, ds: &Dataset) -> Result<f64> {
    Ok(evaluate_detail(net, ds)?.macro_accuracy)
}

pub fn evaluate_detail(net: &NetworkGraph, ds: &Dataset) -> Result<EvalDetail> {
    check_dataset(net, ds, "evaluation")?;
    let n_out = classifier_width(net)?;
    if ds.class_count > n_out {
        return Err(Error::Config(format!(
            "evaluation set {:?} has {} classes, classifier emits only {n_out}",
            ds.name, ds.class_count
        )));
    }
    let classifier = net.classifier()?.name.clone();
    let mut correct = vec![0usize; ds.class_count];
    let mut totals = vec![0usize; ds.class_count];
    // Bounded batches keep the activation cache small on big sets.
    let indices: Vec<usize> = (0..ds.len()).collect();
    for chunk in indices.chunks(512) {
        let (features, labels) = ds.gather(chunk);
        let (cache, _) = net.forward(&features, None)?;
        let preds = argmax_rows(cache.output(&classifier)?);
        for (pred, label) in preds.iter().zip(&labels) {
            totals[*label] += 1;
            if pred == label {
                correct[*label] += 1;
            }
        }
    }
    let per_class: Vec<Option<f64>> = correct
        .iter()
        .zip(&totals)
        .map(|(&c, &t)| (t > 0).then(|| c as f64 / t as f64))
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let macro_accuracy = present.iter().sum::<f64>() / present.len() as f64;
    let micro_accuracy =
        correct.iter().sum::<usize>() as f64 / totals.iter().sum::<usize>() as f64;
    Ok(EvalDetail {
        macro_accuracy,
        micro_accuracy,
        per_class,
    })
}

/// The learning-without-forgetting measurement: on a copy of the net, attach
/// a fresh source-width classifier and retrain only it plus whatever the
/// surgery added (the "new" group), then report source validation accuracy.
/// The input net is untouched.
pub fn relearn_source_classifier(
    net: &NetworkGraph,
    source_train: &Dataset,
    source_val: &Dataset,
    cfg: &TrainConfig,
) -> Result<f64> {
    let mut work = net.clone();
    let mut rng = Rng::new(derive_seed(cfg.seed, "relearn"));
    surgery::replace_classifier(&mut work, source_train.class_count, &mut rng)?;
    let mut relearn_cfg = cfg.clone();
    relearn_cfg.scenario = Scenario::NewOnly;
    train(&mut work, source_train, source_val, &relearn_cfg)?;
    evaluate(&work, source_val)
}
