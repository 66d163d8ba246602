//! Experiment grids: pretrain on a source task, grow, fine-tune on a target
//! task, and tabulate accuracies across methods, scenarios, and seeds.

use std::path::Path;

use serde::Serialize;

use crate::harness::dataset::{split, Dataset};
use crate::network::{build_mlp, save_checkpoint, LayerKind, MlpInit, NetworkGraph};
use crate::numerics::{derive_seed, Rng};
use crate::surgery::{apply_plan, GrowthKind, GrowthPlan, InitPolicy};
use crate::train::{
    evaluate, relearn_source_classifier, train, RunResult, Scenario, TrainConfig,
};
use crate::{Error, Result};

/// One growth method in the grid. `name` and `variant` key the result rows;
/// the plan carries everything else (sizes, scaling, init policy).
#[derive(Clone, Debug)]
pub struct MethodSpec {
    pub name: String,
    pub variant: String,
    pub plan: GrowthPlan,
}

impl MethodSpec {
    pub fn new(name: impl Into<String>, plan: GrowthPlan) -> MethodSpec {
        let variant = default_variant(&plan);
        MethodSpec {
            name: name.into(),
            variant,
            plan,
        }
    }

    pub fn with_variant(mut self, variant: impl Into<String>) -> MethodSpec {
        self.variant = variant.into();
        self
    }
}

fn default_variant(plan: &GrowthPlan) -> String {
    let mut v = match &plan.kind {
        GrowthKind::ReplaceClassifier => "-".to_string(),
        GrowthKind::Deepen { size } => format!("s{size}"),
        GrowthKind::Widen { size, .. } => format!("s{size}"),
        GrowthKind::DeepenAndWiden { size, .. } => format!("s{size}"),
        GrowthKind::WidenTwice {
            lower_size,
            upper_size,
            ..
        } => format!("l{lower_size}-u{upper_size}"),
    };
    if !plan.insert_normscale {
        v.push_str("-raw");
    }
    if plan.init_policy == InitPolicy::CopyPlusNoise {
        v.push_str("-copy");
    }
    v
}

#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    /// Input width plus hidden widths; the classifier width follows the task.
    pub arch: Vec<usize>,
    pub methods: Vec<MethodSpec>,
    pub scenarios: Vec<Scenario>,
    pub seeds: Vec<u64>,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub split_fractions: (f64, f64, f64),
    /// When set, the target training split is cut down to this many samples
    /// per class (the scarce-data condition).
    pub target_train_per_class: Option<usize>,
    /// Also measure source accuracy after fine-tuning, by refitting a fresh
    /// source classifier over frozen features plus the grown layers.
    pub measure_relearn: bool,
}

impl ExperimentConfig {
    pub fn new(arch: Vec<usize>, methods: Vec<MethodSpec>) -> ExperimentConfig {
        ExperimentConfig {
            arch,
            methods,
            scenarios: vec![Scenario::All],
            seeds: vec![0],
            pretrain: TrainConfig::default(),
            finetune: TrainConfig::default(),
            split_fractions: (0.5, 0.1, 0.4),
            target_train_per_class: None,
            measure_relearn: false,
        }
    }

    /// The calibrated desk-scale benchmark, sized for the default synthetic
    /// task pair. Pretraining runs long and hot enough that the features
    /// commit to the source manifold; fine-tuning runs under a short budget
    /// so adaptation is optimization-bound, the regime where added capacity
    /// pays and a still-silent unscaled block cannot catch up.
    pub fn benchmark() -> ExperimentConfig {
        ExperimentConfig {
            arch: vec![784, 256, 256],
            methods: vec![
                MethodSpec::new("baseline-ft", GrowthPlan::replace()),
                MethodSpec::new("wa", GrowthPlan::widen("fc2", 128)),
            ],
            scenarios: vec![Scenario::All],
            seeds: (0..10).collect(),
            pretrain: TrainConfig {
                base_lr: 0.05,
                weight_decay: 1e-3,
                epochs: 40,
                step_epochs: 24,
                ..TrainConfig::default()
            },
            finetune: TrainConfig {
                base_lr: 0.002,
                epochs: 8,
                step_epochs: 6,
                ..TrainConfig::default()
            },
            split_fractions: (0.5, 0.1, 0.4),
            target_train_per_class: Some(30),
            measure_relearn: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.arch.len() < 2 || self.arch.iter().any(|&w| w == 0) {
            return Err(Error::Config(format!(
                "arch needs an input width and at least one positive hidden width, got {:?}",
                self.arch
            )));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("no methods configured".into()));
        }
        if self.scenarios.is_empty() {
            return Err(Error::Config("no scenarios configured".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("no seeds configured".into()));
        }
        let mut seen = Vec::new();
        for m in &self.methods {
            let key = (m.name.clone(), m.variant.clone());
            if seen.contains(&key) {
                return Err(Error::Config(format!(
                    "duplicate method cell {}/{}",
                    m.name, m.variant
                )));
            }
            seen.push(key);
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return Err(Error::Config("duplicate seeds".into()));
        }
        self.pretrain.validate()?;
        self.finetune.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ResultRow {
    pub method: String,
    pub variant: String,
    pub scenario: String,
    pub seed: u64,
    /// Which measurement: "val", "test", or "source-relearn".
    pub split: String,
    pub accuracy: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct CellFailure {
    pub method: String,
    pub variant: String,
    pub scenario: String,
    pub seed: u64,
    pub reason: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct Aggregate {
    pub method: String,
    pub variant: String,
    pub scenario: String,
    pub split: String,
    pub mean: f64,
    /// Sample stddev over seeds; 0 when only one seed contributed.
    pub stddev: f64,
    pub n: usize,
}

pub const CSV_HEADER: &str = "method,variant,scenario,seed,split,accuracy";

#[derive(Clone, Debug, Default, Serialize)]
pub struct ResultsTable {
    pub rows: Vec<ResultRow>,
    pub failures: Vec<CellFailure>,
    pub aggregates: Vec<Aggregate>,
}

impl ResultsTable {
    fn push(&mut self, method: &str, variant: &str, scenario: &str, seed: u64, split: &str, accuracy: f64) {
        self.rows.push(ResultRow {
            method: method.to_string(),
            variant: variant.to_string(),
            scenario: scenario.to_string(),
            seed,
            split: split.to_string(),
            accuracy,
        });
    }

    fn fail(&mut self, method: &str, variant: &str, scenario: &str, seed: u64, reason: String) {
        self.failures.push(CellFailure {
            method: method.to_string(),
            variant: variant.to_string(),
            scenario: scenario.to_string(),
            seed,
            reason,
        });
    }

    /// Recomputes mean/stddev per (method, variant, scenario, split) cell
    /// and sorts rows for stable output.
    pub fn finalize(&mut self) {
        self.rows.sort_by(|a, b| {
            (&a.method, &a.variant, &a.scenario, a.seed, &a.split)
                .cmp(&(&b.method, &b.variant, &b.scenario, b.seed, &b.split))
        });
        let mut cells: Vec<(String, String, String, String, Vec<f64>)> = Vec::new();
        for row in &self.rows {
            let key = (&row.method, &row.variant, &row.scenario, &row.split);
            match cells.iter_mut().find(|(m, v, sc, sp, _)| (m, v, sc, sp) == key) {
                Some((_, _, _, _, accs)) => accs.push(row.accuracy),
                None => cells.push((
                    row.method.clone(),
                    row.variant.clone(),
                    row.scenario.clone(),
                    row.split.clone(),
                    vec![row.accuracy],
                )),
            }
        }
        self.aggregates = cells
            .into_iter()
            .map(|(method, variant, scenario, split, accs)| {
                let n = accs.len();
                let mean = accs.iter().sum::<f64>() / n as f64;
                let stddev = if n > 1 {
                    (accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
                } else {
                    0.0
                };
                Aggregate {
                    method,
                    variant,
                    scenario,
                    split,
                    mean,
                    stddev,
                    n,
                }
            })
            .collect();
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.method, r.variant, r.scenario, r.seed, r.split, r.accuracy
            ));
        }
        out
    }

    pub fn mean_of(&self, method: &str, variant: &str, scenario: &str, split: &str) -> Option<f64> {
        self.aggregates
            .iter()
            .find(|a| {
                a.method == method && a.variant == variant && a.scenario == scenario && a.split == split
            })
            .map(|a| a.mean)
    }

    pub fn accuracies_of(&self, method: &str, variant: &str, scenario: &str, split: &str) -> Vec<(u64, f64)> {
        self.rows
            .iter()
            .filter(|r| {
                r.method == method && r.variant == variant && r.scenario == scenario && r.split == split
            })
            .map(|r| (r.seed, r.accuracy))
            .collect()
    }
}

/// Total weights and biases across Dense nodes; the capacity measure used
/// when matching grown nets against scratch-wide ones (scale vectors are
/// bookkeeping, not capacity).
pub fn dense_param_count(net: &NetworkGraph) -> usize {
    net.nodes()
        .iter()
        .map(|n| match &n.kind {
            LayerKind::Dense(p) => p.param_count(),
            _ => 0,
        })
        .sum()
}

fn persist(out_dir: Option<&Path>, file: &str, net: &NetworkGraph) -> Result<()> {
    if let Some(dir) = out_dir {
        save_checkpoint(net, dir.join(file))?;
    }
    Ok(())
}

/// Splits, with the scarcity cut applied to the training part when asked.
pub fn prepare_target(
    cfg: &ExperimentConfig,
    target: &Dataset,
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset)> {
    let (mut tr, va, te) = split(target, cfg.split_fractions, derive_seed(seed, "split-target"))?;
    if let Some(per_class) = cfg.target_train_per_class {
        tr = tr.take_per_class(per_class, derive_seed(seed, "scarcity"), format!("{}/scarce", tr.name))?;
    }
    Ok((tr, va, te))
}

/// Pretrains a fresh net on the source splits. Always the All scenario; the
/// template's scenario field is ignored here.
pub fn pretrain_net(
    cfg: &ExperimentConfig,
    source_train: &Dataset,
    source_val: &Dataset,
    seed: u64,
) -> Result<(NetworkGraph, RunResult)> {
    let mut widths = cfg.arch.clone();
    widths.push(source_train.class_count);
    let mut net = build_mlp(
        &widths,
        &mut Rng::new(derive_seed(seed, "init")),
        MlpInit::ScaledGaussian,
    )?;
    let pre_cfg = TrainConfig {
        scenario: Scenario::All,
        seed: derive_seed(seed, "pretrain"),
        ..cfg.pretrain.clone()
    };
    let run = train(&mut net, source_train, source_val, &pre_cfg)?;
    Ok((net, run))
}

/// The method × scenario × seed grid of the core transfer experiment.
/// Cell failures are recorded and the grid keeps going; only a bad config
/// aborts up front.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    source: &Dataset,
    target: &Dataset,
    out_dir: Option<&Path>,
) -> Result<ResultsTable> {
    cfg.validate()?;
    let mut table = ResultsTable::default();
    for &seed in &cfg.seeds {
        let (s_train, s_val, s_test) = split(source, cfg.split_fractions, derive_seed(seed, "split-source"))?;
        let (t_train, t_val, t_test) = prepare_target(cfg, target, seed)?;

        let pretrained = match pretrain_net(cfg, &s_train, &s_val, seed) {
            Ok((net, _)) => net,
            Err(e) => {
                // Every cell of this seed is down; mark them all.
                for m in &cfg.methods {
                    for sc in &cfg.scenarios {
                        table.fail(&m.name, &m.variant, sc.label(), seed, format!("pretrain failed: {e}"));
                    }
                }
                continue;
            }
        };
        table.push("pretrain", "-", "all", seed, "val", evaluate(&pretrained, &s_val)?);
        table.push("pretrain", "-", "all", seed, "test", evaluate(&pretrained, &s_test)?);
        persist(out_dir, &format!("pretrained_seed{seed}.ckpt"), &pretrained)?;

        for m in &cfg.methods {
            for sc in &cfg.scenarios {
                let cell = format!("{}/{}/{}", m.name, m.variant, sc.label());
                let outcome = run_cell(
                    cfg, &pretrained, m, *sc, seed, &t_train, &t_val, &t_test, &s_train, &s_val,
                );
                match outcome {
                    Ok((net, measurements)) => {
                        for (split_name, acc) in measurements {
                            table.push(&m.name, &m.variant, sc.label(), seed, &split_name, acc);
                        }
                        persist(
                            out_dir,
                            &format!("{}_{}_{}_seed{seed}.ckpt", m.name, m.variant, sc.label()),
                            &net,
                        )?;
                    }
                    Err(e) => table.fail(&m.name, &m.variant, sc.label(), seed, format!("{cell}: {e}")),
                }
            }
        }
    }
    table.finalize();
    Ok(table)
}

#[allow(clippy::too_many_arguments)]
fn run_cell(
    cfg: &ExperimentConfig,
    pretrained: &NetworkGraph,
    m: &MethodSpec,
    scenario: Scenario,
    seed: u64,
    t_train: &Dataset,
    t_val: &Dataset,
    t_test: &Dataset,
    s_train: &Dataset,
    s_val: &Dataset,
) -> Result<(NetworkGraph, Vec<(String, f64)>)> {
    let tag = format!("{}/{}/{}", m.name, m.variant, scenario.label());
    let mut net = pretrained.clone();
    let mut rng = Rng::new(derive_seed(seed, &format!("surgery/{tag}")));
    apply_plan(&mut net, &m.plan, t_train.class_count, &mut rng)?;
    let ft_cfg = TrainConfig {
        scenario,
        seed: derive_seed(seed, &format!("ft/{tag}")),
        ..cfg.finetune.clone()
    };
    train(&mut net, t_train, t_val, &ft_cfg)?;
    let mut measurements = vec![
        ("val".to_string(), evaluate(&net, t_val)?),
        ("test".to_string(), evaluate(&net, t_test)?),
    ];
    if cfg.measure_relearn {
        // Relearning re-fits the source head to convergence over frozen
        // features, so it gets the pretraining budget, not the (often very
        // short) fine-tuning one.
        let relearn_cfg = TrainConfig {
            seed: ft_cfg.seed,
            ..cfg.pretrain.clone()
        };
        let acc = relearn_source_classifier(&net, s_train, s_val, &relearn_cfg)?;
        measurements.push(("source-relearn".to_string(), acc));
    }
    Ok((net, measurements))
}

/// Grow `net` per `plan`, fine-tune on the target under All, record val and
/// test rows, persist.
#[allow(clippy::too_many_arguments)]
fn target_arm(
    table: &mut ResultsTable,
    cfg: &ExperimentConfig,
    name: &str,
    variant: &str,
    seed: u64,
    net: &mut NetworkGraph,
    plan: &GrowthPlan,
    t_train: &Dataset,
    t_val: &Dataset,
    t_test: &Dataset,
    out_dir: Option<&Path>,
) -> Result<()> {
    let mut rng = Rng::new(derive_seed(seed, &format!("surgery/{name}")));
    apply_plan(net, plan, t_train.class_count, &mut rng)?;
    let ft = TrainConfig {
        scenario: Scenario::All,
        seed: derive_seed(seed, &format!("ft/{name}")),
        ..cfg.finetune.clone()
    };
    train(net, t_train, t_val, &ft)?;
    table.push(name, variant, "all", seed, "val", evaluate(net, t_val)?);
    table.push(name, variant, "all", seed, "test", evaluate(net, t_test)?);
    persist(out_dir, &format!("{name}_seed{seed}.ckpt"), net)?;
    Ok(())
}

#[derive(Clone, Debug, Serialize)]
pub struct ProgressiveOutcome {
    pub table: ResultsTable,
    /// Dense parameters of the scratch-wide and grown-wide nets; matched by
    /// construction.
    pub ori_dense_params: usize,
    pub grow_dense_params: usize,
}

/// Fixed-vs-progressive capacity comparison. Three target arms at matched
/// final width (baseline fine-tune, scratch-wide fine-tune, grow-then-
/// fine-tune) plus the source-domain pair (scratch-wide vs grown-wide kept
/// training on source). The first configured method must be a widening plan;
/// every arm trains under the All scenario.
pub fn progressive_vs_fixed(
    cfg: &ExperimentConfig,
    source: &Dataset,
    target: &Dataset,
    out_dir: Option<&Path>,
) -> Result<ProgressiveOutcome> {
    cfg.validate()?;
    let plan = &cfg.methods[0].plan;
    let variant = cfg.methods[0].variant.clone();
    let GrowthKind::Widen { target: ref widen_target, size } = plan.kind else {
        return Err(Error::Config(
            "progressive comparison needs a widening plan as its first method".into(),
        ));
    };
    let layer_idx: usize = widen_target
        .strip_prefix("fc")
        .and_then(|d| d.parse().ok())
        .ok_or_else(|| Error::Config(format!("cannot parse widen target {widen_target:?}")))?;
    if layer_idx == 0 || layer_idx >= cfg.arch.len() {
        return Err(Error::Config(format!(
            "widen target {widen_target:?} outside arch {:?}",
            cfg.arch
        )));
    }
    let mut wide_arch = cfg.arch.clone();
    wide_arch[layer_idx] += size;

    let mut table = ResultsTable::default();
    let mut ori_dense_params = 0;
    let mut grow_dense_params = 0;
    for &seed in &cfg.seeds {
        let (s_train, s_val, s_test) = split(source, cfg.split_fractions, derive_seed(seed, "split-source"))?;
        let (t_train, t_val, t_test) = prepare_target(cfg, target, seed)?;
        let (pretrained, _) = pretrain_net(cfg, &s_train, &s_val, seed)?;
        table.push("pretrain", "-", "all", seed, "test", evaluate(&pretrained, &s_test)?);

        // Arm 1: plain fine-tune at original capacity.
        let mut cnn_ft = pretrained.clone();
        target_arm(
            &mut table, cfg, "cnn-ft", &variant, seed, &mut cnn_ft, &GrowthPlan::replace(),
            &t_train, &t_val, &t_test, out_dir,
        )?;

        // Arm 2: the wide topology trained from scratch on source, then
        // fine-tuned like a baseline.
        let mut ori = {
            let mut widths = wide_arch.clone();
            widths.push(s_train.class_count);
            let mut net = build_mlp(
                &widths,
                &mut Rng::new(derive_seed(seed, "ori-init")),
                MlpInit::ScaledGaussian,
            )?;
            let pre = TrainConfig {
                scenario: Scenario::All,
                seed: derive_seed(seed, "ori-pretrain"),
                ..cfg.pretrain.clone()
            };
            train(&mut net, &s_train, &s_val, &pre)?;
            net
        };
        table.push("wa-ori-source", &variant, "all", seed, "test", evaluate(&ori, &s_test)?);
        target_arm(
            &mut table, cfg, "wa-ori", &variant, seed, &mut ori, &GrowthPlan::replace(),
            &t_train, &t_val, &t_test, out_dir,
        )?;

        // Arm 3: grow the pretrained net, then fine-tune.
        let mut grown = pretrained.clone();
        target_arm(
            &mut table, cfg, "wa-grow", &variant, seed, &mut grown, plan,
            &t_train, &t_val, &t_test, out_dir,
        )?;
        ori_dense_params = dense_param_count(&ori);
        grow_dense_params = dense_param_count(&grown);

        // Source-domain pair: keep the grown net on the source task instead,
        // with the fine-tuning budget, and compare against scratch-wide.
        let mut grown_source = pretrained.clone();
        let mut rng = Rng::new(derive_seed(seed, "surgery/wa-grow-source"));
        apply_plan(&mut grown_source, plan, s_train.class_count, &mut rng)?;
        let cont = TrainConfig {
            scenario: Scenario::All,
            seed: derive_seed(seed, "ft/wa-grow-source"),
            ..cfg.finetune.clone()
        };
        train(&mut grown_source, &s_train, &s_val, &cont)?;
        table.push(
            "wa-grow-source",
            &variant,
            "all",
            seed,
            "test",
            evaluate(&grown_source, &s_test)?,
        );
        persist(out_dir, &format!("wa-grow-source_seed{seed}.ckpt"), &grown_source)?;
    }
    table.finalize();
    Ok(ProgressiveOutcome {
        table,
        ori_dense_params,
        grow_dense_params,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct ContinualOutcome {
    pub table: ResultsTable,
    pub direct_params: usize,
    pub chained_params: usize,
}

/// Continual growth through a task sequence: pretrain on the first task,
/// then widen-and-fine-tune through each later task in order ("chained"),
/// against a single widen-and-fine-tune hop from the first task straight to
/// the last ("direct"). Accuracies are reported on the final task. The
/// scarcity cut applies to the final task only; intermediate tasks keep
/// their full training splits.
pub fn continual_transfer(
    cfg: &ExperimentConfig,
    tasks: &[Dataset],
    out_dir: Option<&Path>,
) -> Result<ContinualOutcome> {
    cfg.validate()?;
    if tasks.len() < 2 {
        return Err(Error::Config(format!(
            "continual transfer needs at least 2 tasks, got {}",
            tasks.len()
        )));
    }
    let plan = &cfg.methods[0].plan;
    if !matches!(plan.kind, GrowthKind::Widen { .. }) {
        return Err(Error::Config(
            "continual transfer needs a widening plan as its first method".into(),
        ));
    }
    let variant = cfg.methods[0].variant.clone();

    let mut table = ResultsTable::default();
    let mut direct_params = 0;
    let mut chained_params = 0;
    for &seed in &cfg.seeds {
        let mut splits = Vec::new();
        for (i, task) in tasks.iter().enumerate() {
            let parts = if i == tasks.len() - 1 {
                prepare_target(cfg, task, seed)?
            } else {
                split(task, cfg.split_fractions, derive_seed(seed, &format!("split-task{i}")))?
            };
            splits.push(parts);
        }
        let (pretrained, _) = pretrain_net(cfg, &splits[0].0, &splits[0].1, seed)?;

        let hop = |net: &mut NetworkGraph, arm: &str, task_idx: usize| -> Result<f64> {
            let (tr, va, _) = &splits[task_idx];
            let tag = format!("{arm}/task{task_idx}");
            let mut rng = Rng::new(derive_seed(seed, &format!("surgery/{tag}")));
            apply_plan(net, plan, tr.class_count, &mut rng)?;
            let ft = TrainConfig {
                scenario: Scenario::All,
                seed: derive_seed(seed, &format!("ft/{tag}")),
                ..cfg.finetune.clone()
            };
            train(net, tr, va, &ft)?;
            evaluate(net, va)
        };

        let last = tasks.len() - 1;
        let mut direct = pretrained.clone();
        let val_acc = hop(&mut direct, "direct", last)?;
        table.push("direct", &variant, "all", seed, "val", val_acc);
        table.push("direct", &variant, "all", seed, "test", evaluate(&direct, &splits[last].2)?);
        persist(out_dir, &format!("direct_seed{seed}.ckpt"), &direct)?;

        let mut chained = pretrained.clone();
        for task_idx in 1..=last {
            let val_acc = hop(&mut chained, "chained", task_idx)?;
            if task_idx == last {
                table.push("chained", &variant, "all", seed, "val", val_acc);
            }
        }
        table.push("chained", &variant, "all", seed, "test", evaluate(&chained, &splits[last].2)?);
        persist(out_dir, &format!("chained_seed{seed}.ckpt"), &chained)?;

        direct_params = dense_param_count(&direct);
        chained_params = dense_param_count(&chained);
    }
    table.finalize();
    Ok(ContinualOutcome {
        table,
        direct_params,
        chained_params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::synth::{synth_task_chain, synth_transfer_tasks, SynthSpec};

    fn tiny_spec() -> SynthSpec {
        SynthSpec {
            source_classes: 3,
            target_classes: 3,
            dim: 10,
            latent: 3,
            source_per_class: 16,
            target_per_class: 16,
            overlap: 0.5,
            separation: 3.0,
            cluster_stddev: 0.6,
            noise: 0.1,
            permute_source_centers: false,
        }
    }

    fn tiny_cfg(methods: Vec<MethodSpec>) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::new(vec![10, 8, 8], methods);
        cfg.pretrain = TrainConfig {
            base_lr: 0.1,
            epochs: 6,
            batch_size: 8,
            ..TrainConfig::default()
        };
        cfg.finetune = TrainConfig {
            base_lr: 0.05,
            epochs: 3,
            batch_size: 8,
            ..TrainConfig::default()
        };
        cfg
    }

    #[test]
    fn grid_arithmetic_and_csv_shape() {
        let methods = vec![
            MethodSpec::new("baseline-ft", GrowthPlan::replace()),
            MethodSpec::new("wa", GrowthPlan::widen("fc2", 4)),
        ];
        let mut cfg = tiny_cfg(methods);
        cfg.seeds = vec![1, 2, 3];
        let (source, target) = synth_transfer_tasks(42, &tiny_spec()).unwrap();
        let table = run_experiment(&cfg, &source, &target, None).unwrap();

        // 2 pretrain rows per seed plus 2 methods x 1 scenario x 2 splits.
        assert_eq!(table.rows.len(), 3 * (2 + 4));
        assert!(table.failures.is_empty());
        // 3 cells (pretrain + 2 methods), each with val and test aggregates.
        assert_eq!(table.aggregates.len(), 6);
        assert!(table.rows.iter().all(|r| (0.0..=1.0).contains(&r.accuracy)));
        for agg in &table.aggregates {
            assert_eq!(agg.n, 3);
        }

        let csv = table.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines.len(), 1 + table.rows.len());
        let mut sorted = lines[1..].to_vec();
        sorted.sort();
        assert_eq!(sorted, lines[1..].to_vec(), "rows come out sorted");
    }

    #[test]
    fn reruns_are_reproducible_cell_by_cell() {
        let methods = vec![MethodSpec::new("wa", GrowthPlan::widen("fc2", 4))];
        let mut cfg = tiny_cfg(methods);
        cfg.seeds = vec![5, 9];
        let (source, target) = synth_transfer_tasks(7, &tiny_spec()).unwrap();
        let full = run_experiment(&cfg, &source, &target, None).unwrap();
        let again = run_experiment(&cfg, &source, &target, None).unwrap();
        assert_eq!(full.to_csv(), again.to_csv());

        // A single-seed rerun reproduces exactly that seed's cells.
        let mut solo_cfg = cfg.clone();
        solo_cfg.seeds = vec![9];
        let solo = run_experiment(&solo_cfg, &source, &target, None).unwrap();
        for split in ["val", "test"] {
            let from_full = full.accuracies_of("wa", "s4", "all", split);
            let from_solo = solo.accuracies_of("wa", "s4", "all", split);
            let full_seed9: Vec<_> = from_full.iter().filter(|(s, _)| *s == 9).collect();
            assert_eq!(full_seed9.len(), 1);
            assert_eq!(from_solo.len(), 1);
            assert_eq!(full_seed9[0].1, from_solo[0].1, "{split}");
        }
    }

    #[test]
    fn cell_failures_are_recorded_and_isolated() {
        let methods = vec![
            MethodSpec::new("baseline-ft", GrowthPlan::replace()),
            MethodSpec::new("wa-bad", GrowthPlan::widen("fc9", 4)),
        ];
        let mut cfg = tiny_cfg(methods);
        cfg.seeds = vec![1];
        let (source, target) = synth_transfer_tasks(11, &tiny_spec()).unwrap();
        let table = run_experiment(&cfg, &source, &target, None).unwrap();
        assert_eq!(table.failures.len(), 1);
        assert_eq!(table.failures[0].method, "wa-bad");
        assert!(!table.failures[0].reason.is_empty());
        // The healthy method still produced its rows.
        assert_eq!(table.accuracies_of("baseline-ft", "-", "all", "test").len(), 1);
    }

    #[test]
    fn config_validation_catches_empty_grids() {
        let ok = tiny_cfg(vec![MethodSpec::new("wa", GrowthPlan::widen("fc2", 4))]);
        ok.validate().unwrap();
        let mut bad = ok.clone();
        bad.seeds.clear();
        assert!(bad.validate().is_err());
        let mut bad = ok.clone();
        bad.methods.clear();
        assert!(bad.validate().is_err());
        let mut bad = ok.clone();
        bad.scenarios.clear();
        assert!(bad.validate().is_err());
        let mut bad = ok.clone();
        bad.seeds = vec![1, 1];
        assert!(bad.validate().is_err());
        let mut bad = ok;
        bad.methods.push(MethodSpec::new("wa", GrowthPlan::widen("fc2", 4)));
        assert!(bad.validate().is_err(), "duplicate method/variant cell");
    }

    #[test]
    fn relearn_measurement_adds_source_rows() {
        let methods = vec![MethodSpec::new("wa", GrowthPlan::widen("fc2", 4))];
        let mut cfg = tiny_cfg(methods);
        cfg.scenarios = vec![crate::train::Scenario::NewOnly];
        cfg.measure_relearn = true;
        let (source, target) = synth_transfer_tasks(3, &tiny_spec()).unwrap();
        let table = run_experiment(&cfg, &source, &target, None).unwrap();
        let relearn = table.accuracies_of("wa", "s4", "new-only", "source-relearn");
        assert_eq!(relearn.len(), 1);
        assert!((0.0..=1.0).contains(&relearn[0].1));
    }

    #[test]
    fn progressive_arms_match_capacity() {
        let methods = vec![MethodSpec::new("wa", GrowthPlan::widen("fc2", 4))];
        let cfg = tiny_cfg(methods);
        let (source, target) = synth_transfer_tasks(19, &tiny_spec()).unwrap();
        let out = progressive_vs_fixed(&cfg, &source, &target, None).unwrap();
        assert_eq!(out.ori_dense_params, out.grow_dense_params);
        for method in ["cnn-ft", "wa-ori", "wa-grow"] {
            assert_eq!(out.table.accuracies_of(method, "s4", "all", "test").len(), 1, "{method}");
        }
        for method in ["wa-ori-source", "wa-grow-source"] {
            assert_eq!(out.table.accuracies_of(method, "s4", "all", "test").len(), 1, "{method}");
        }
        // Non-widening first method is rejected.
        let bad = tiny_cfg(vec![MethodSpec::new("da", GrowthPlan::deepen(4))]);
        assert!(progressive_vs_fixed(&bad, &source, &target, None).is_err());
    }

    #[test]
    fn continual_chain_grows_more_capacity_than_direct() {
        let methods = vec![MethodSpec::new("wa", GrowthPlan::widen("fc2", 3))];
        let cfg = tiny_cfg(methods);
        let tasks = synth_task_chain(23, &tiny_spec(), 3).unwrap();
        let out = continual_transfer(&cfg, &tasks, None).unwrap();
        assert!(
            out.chained_params > out.direct_params,
            "chained {} vs direct {}",
            out.chained_params,
            out.direct_params
        );
        assert_eq!(out.table.accuracies_of("direct", "s3", "all", "test").len(), 1);
        assert_eq!(out.table.accuracies_of("chained", "s3", "all", "test").len(), 1);
        assert!(continual_transfer(&cfg, &tasks[..1], None).is_err());
    }
}
