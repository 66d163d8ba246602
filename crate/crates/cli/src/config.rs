//! TOML config schema and its mapping onto the library types.
//!
//! One config file drives every subcommand; each command reads the sections
//! it needs and ignores the rest. Unknown keys are rejected everywhere so a
//! typo cannot silently fall back to a default.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use growbrain_core::harness::dataset::Dataset;
use growbrain_core::harness::experiment::{ExperimentConfig, MethodSpec};
use growbrain_core::harness::idx::load_idx;
use growbrain_core::harness::synth::{synth_task_chain, synth_transfer_tasks, SynthSpec};
use growbrain_core::surgery::{GrowthPlan, DEFAULT_GAMMA};
use growbrain_core::train::{Scenario, TrainConfig};

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub data: DataConfig,
    pub arch: ArchConfig,
    pub split: SplitConfig,
    /// Note: a partially written [pretrain] or [finetune] section falls back
    /// to the generic training defaults for its missing keys, not to the
    /// benchmark budgets an absent section gets.
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub experiment: ExperimentSection,
    /// Growth methods for the experiment grid. Empty means the default pair
    /// (baseline classifier replacement, and widening the top hidden layer
    /// by half its width).
    pub methods: Vec<MethodTable>,
    /// Growth plan for the `grow` and `curves` subcommands.
    pub grow: Option<MethodTable>,
    pub run: RunSection,
    pub maxact: MaxactSection,
    pub continual: ContinualSection,
}

/// An empty config file is exactly the default benchmark.
impl Default for Config {
    fn default() -> Config {
        let bench = ExperimentConfig::benchmark();
        Config {
            data: DataConfig::default(),
            arch: ArchConfig::default(),
            split: SplitConfig::default(),
            pretrain: bench.pretrain,
            finetune: bench.finetune,
            experiment: ExperimentSection::default(),
            methods: Vec::new(),
            grow: None,
            run: RunSection::default(),
            maxact: MaxactSection::default(),
            continual: ContinualSection::default(),
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// "synth" or "idx".
    pub kind: String,
    /// Dataset generation seed, independent of run seeds so that sweeping
    /// runs does not change the task.
    pub seed: u64,
    pub source_classes: usize,
    pub target_classes: usize,
    pub dim: usize,
    pub latent: usize,
    pub source_per_class: usize,
    pub target_per_class: usize,
    pub overlap: f64,
    pub separation: f64,
    pub cluster_stddev: f64,
    pub noise: f64,
    pub permute_source_centers: bool,
    /// IDX ingestion (kind = "idx"): one image/label file pair, carved into
    /// source and target tasks by class lists.
    pub images: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub source_digits: Vec<usize>,
    pub target_digits: Vec<usize>,
}

impl Default for DataConfig {
    fn default() -> DataConfig {
        let s = SynthSpec::default();
        DataConfig {
            kind: "synth".into(),
            seed: 7,
            source_classes: s.source_classes,
            target_classes: s.target_classes,
            dim: s.dim,
            latent: s.latent,
            source_per_class: s.source_per_class,
            target_per_class: s.target_per_class,
            overlap: s.overlap,
            separation: s.separation,
            cluster_stddev: s.cluster_stddev,
            noise: s.noise,
            permute_source_centers: s.permute_source_centers,
            images: None,
            labels: None,
            source_digits: vec![0, 1, 2, 3, 4],
            target_digits: vec![5, 6, 7, 8, 9],
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    /// Input width plus hidden widths; the classifier is sized by the task.
    pub widths: Vec<usize>,
}

impl Default for ArchConfig {
    fn default() -> ArchConfig {
        ArchConfig {
            widths: vec![784, 256, 256],
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub fractions: [f64; 3],
}

impl Default for SplitConfig {
    fn default() -> SplitConfig {
        SplitConfig {
            fractions: [0.5, 0.1, 0.4],
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub seeds: Vec<u64>,
    pub scenarios: Vec<String>,
    pub target_train_per_class: Option<usize>,
    pub measure_relearn: bool,
    /// "grid" (method x scenario sweep) or "progressive" (fixed-vs-grown
    /// capacity comparison).
    pub mode: String,
}

impl Default for ExperimentSection {
    fn default() -> ExperimentSection {
        ExperimentSection {
            seeds: (0..10).collect(),
            scenarios: vec!["all".into()],
            target_train_per_class: Some(30),
            measure_relearn: false,
            mode: "grid".into(),
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct MethodTable {
    /// Defaults to a kind-derived name (replace -> "baseline-ft", widen ->
    /// "wa", deepen -> "da", ...).
    pub name: Option<String>,
    /// replace | deepen | widen | deepen-widen | widen-twice
    pub kind: String,
    pub target: Option<String>,
    pub size: Option<usize>,
    pub lower: Option<String>,
    pub lower_size: Option<usize>,
    pub upper: Option<String>,
    pub upper_size: Option<usize>,
    pub scaling: bool,
    /// "random" or "copy+noise".
    pub init: String,
    pub gamma: f64,
    pub variant: Option<String>,
}

impl Default for MethodTable {
    fn default() -> MethodTable {
        MethodTable {
            name: None,
            kind: "widen".into(),
            target: None,
            size: None,
            lower: None,
            lower_size: None,
            upper: None,
            upper_size: None,
            scaling: true,
            init: "random".into(),
            gamma: DEFAULT_GAMMA,
            variant: None,
        }
    }
}

impl MethodTable {
    /// `arch` supplies defaults: the top hidden layer as target, half its
    /// width as size.
    pub fn to_spec(&self, arch: &[usize]) -> Result<MethodSpec> {
        let top = format!("fc{}", arch.len().saturating_sub(1));
        let half = arch.last().copied().unwrap_or(0) / 2;
        let tgt = || self.target.clone().unwrap_or_else(|| top.clone());
        let size = || self.size.unwrap_or(half);
        let mut plan = match self.kind.as_str() {
            "replace" => GrowthPlan::replace(),
            "deepen" => GrowthPlan::deepen(size()),
            "widen" => GrowthPlan::widen(&tgt(), size()),
            "deepen-widen" => GrowthPlan::deepen_and_widen(&tgt(), size()),
            "widen-twice" => {
                let lower = self
                    .lower
                    .clone()
                    .ok_or_else(|| anyhow::anyhow!("widen-twice needs `lower`"))?;
                let upper = self
                    .upper
                    .clone()
                    .ok_or_else(|| anyhow::anyhow!("widen-twice needs `upper`"))?;
                GrowthPlan::widen_twice(
                    &lower,
                    self.lower_size.unwrap_or(half),
                    &upper,
                    self.upper_size.unwrap_or(half),
                )
            }
            other => bail!("unknown growth kind {other:?}"),
        };
        plan.init_policy = match self.init.as_str() {
            "random" => growbrain_core::surgery::InitPolicy::Random,
            "copy+noise" => growbrain_core::surgery::InitPolicy::CopyPlusNoise,
            other => bail!("unknown init policy {other:?}"),
        };
        plan.gamma_init = self.gamma;
        if !self.scaling {
            plan = plan.without_scaling();
        }
        let name = self.name.clone().unwrap_or_else(|| {
            match self.kind.as_str() {
                "replace" => "baseline-ft",
                "deepen" => "da",
                "widen" => "wa",
                "deepen-widen" => "dwa",
                "widen-twice" => "wwa",
                other => other,
            }
            .to_string()
        });
        let mut spec = MethodSpec::new(name, plan);
        if let Some(v) = &self.variant {
            spec = spec.with_variant(v.clone());
        }
        Ok(spec)
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    /// Input checkpoint for grow/finetune/eval/maxact/curves.
    pub checkpoint: Option<PathBuf>,
    /// Which task single-run commands use: "source" or "target".
    pub task: String,
    /// Which split eval/maxact read: "train", "val", or "test".
    pub split: String,
}

impl Default for RunSection {
    fn default() -> RunSection {
        RunSection {
            checkpoint: None,
            task: "target".into(),
            split: "test".into(),
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaxactSection {
    pub node: String,
    pub unit: usize,
    pub k: usize,
}

impl Default for MaxactSection {
    fn default() -> MaxactSection {
        MaxactSection {
            node: "relu2".into(),
            unit: 0,
            k: 5,
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContinualSection {
    pub tasks: usize,
}

impl Default for ContinualSection {
    fn default() -> ContinualSection {
        ContinualSection { tasks: 3 }
    }
}

pub fn load_config(path: &Path) -> Result<Config> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let cfg: Config =
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
    Ok(cfg)
}

impl Config {
    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            source_classes: self.data.source_classes,
            target_classes: self.data.target_classes,
            dim: self.data.dim,
            latent: self.data.latent,
            source_per_class: self.data.source_per_class,
            target_per_class: self.data.target_per_class,
            overlap: self.data.overlap,
            separation: self.data.separation,
            cluster_stddev: self.data.cluster_stddev,
            noise: self.data.noise,
            permute_source_centers: self.data.permute_source_centers,
        }
    }

    /// (source, target) task pair per the [data] section.
    pub fn build_tasks(&self) -> Result<(Dataset, Dataset)> {
        match self.data.kind.as_str() {
            "synth" => Ok(synth_transfer_tasks(self.data.seed, &self.synth_spec())?),
            "idx" => {
                let images = self
                    .data
                    .images
                    .as_ref()
                    .context("[data] kind \"idx\" needs `images`")?;
                let labels = self
                    .data
                    .labels
                    .as_ref()
                    .context("[data] kind \"idx\" needs `labels`")?;
                let full = load_idx(images, labels)?;
                let source = full.restrict_classes(&self.data.source_digits, "source")?;
                let target = full.restrict_classes(&self.data.target_digits, "target")?;
                Ok((source, target))
            }
            other => bail!("unknown data kind {other:?}"),
        }
    }

    /// Task sequence for the continual command (synth only).
    pub fn build_chain(&self) -> Result<Vec<Dataset>> {
        if self.data.kind != "synth" {
            bail!("continual transfer needs [data] kind \"synth\"");
        }
        Ok(synth_task_chain(
            self.data.seed,
            &self.synth_spec(),
            self.continual.tasks,
        )?)
    }

    pub fn method_specs(&self) -> Result<Vec<MethodSpec>> {
        if self.methods.is_empty() {
            let half = self.arch.widths.last().copied().unwrap_or(0) / 2;
            let top = format!("fc{}", self.arch.widths.len().saturating_sub(1));
            return Ok(vec![
                MethodSpec::new("baseline-ft", GrowthPlan::replace()),
                MethodSpec::new("wa", GrowthPlan::widen(&top, half)),
            ]);
        }
        self.methods
            .iter()
            .map(|m| m.to_spec(&self.arch.widths))
            .collect()
    }

    pub fn grow_spec(&self) -> Result<MethodSpec> {
        let table = self
            .grow
            .as_ref()
            .context("this command needs a [grow] section")?;
        table.to_spec(&self.arch.widths)
    }

    /// The widening plan driving progressive and continual comparisons:
    /// [grow] when present, otherwise the first widening method.
    pub fn widen_spec(&self) -> Result<MethodSpec> {
        if self.grow.is_some() {
            return self.grow_spec();
        }
        self.method_specs()?
            .into_iter()
            .find(|m| matches!(m.plan.kind, growbrain_core::surgery::GrowthKind::Widen { .. }))
            .context("this command needs a widening plan, via [grow] or a widen method")
    }

    pub fn experiment_config(&self) -> Result<ExperimentConfig> {
        let scenarios: Vec<Scenario> = self
            .experiment
            .scenarios
            .iter()
            .map(|s| s.parse())
            .collect::<growbrain_core::Result<_>>()?;
        let mut cfg = ExperimentConfig::new(self.arch.widths.clone(), self.method_specs()?);
        cfg.scenarios = scenarios;
        cfg.seeds = self.experiment.seeds.clone();
        cfg.pretrain = self.pretrain.clone();
        cfg.finetune = self.finetune.clone();
        cfg.split_fractions = (
            self.split.fractions[0],
            self.split.fractions[1],
            self.split.fractions[2],
        );
        cfg.target_train_per_class = self.experiment.target_train_per_class;
        cfg.measure_relearn = self.experiment.measure_relearn;
        Ok(cfg)
    }

    /// Copies the fully resolved config into the output directory, so every
    /// run records exactly what produced it.
    pub fn write_resolved(&self, out_dir: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self).context("serializing resolved config")?;
        std::fs::write(out_dir.join("config.toml"), text)
            .with_context(|| format!("writing {}", out_dir.join("config.toml").display()))?;
        Ok(())
    }
}
