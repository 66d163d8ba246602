//! Command-line front end over the growbrain library. Every subcommand takes
//! a TOML config, an output directory, and an optional seed override, and
//! drops a copy of the resolved config next to its outputs.

mod config;

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use config::{load_config, Config};
use growbrain_core::harness::analysis::{block_learning_curves, block_norm_ratio, max_activating};
use growbrain_core::harness::dataset::{split, Dataset};
use growbrain_core::harness::experiment::{
    continual_transfer, dense_param_count, prepare_target, pretrain_net, progressive_vs_fixed,
    run_experiment, ResultsTable,
};
use growbrain_core::network::{load_checkpoint, save_checkpoint, NetworkGraph};
use growbrain_core::numerics::{derive_seed, Rng};
use growbrain_core::surgery::apply_plan;
use growbrain_core::train::{evaluate, evaluate_detail, train, train_retaining, RunResult};

/// Transfer learning experiments for networks that grow capacity (deeper or
/// wider) before fine-tuning.
#[derive(Parser)]
#[command(name = "growbrain", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a fresh network on the source task and save a checkpoint.
    Pretrain(RunArgs),
    /// Apply the [grow] plan to a checkpoint, re-sizing the classifier for
    /// the chosen task.
    Grow(RunArgs),
    /// Fine-tune a checkpoint on the chosen task under [finetune].
    Finetune(RunArgs),
    /// Report macro/micro/per-class accuracy of a checkpoint on one split.
    Eval(RunArgs),
    /// Run the method x scenario x seed grid (or the progressive capacity
    /// comparison, per [experiment] mode) and tabulate results.
    Experiment(RunArgs),
    /// Grow, fine-tune, and probe old/new blocks with linear classifiers
    /// after every epoch.
    Curves(RunArgs),
    /// Rank the samples that most activate one unit of one node.
    Maxact(RunArgs),
    /// Compare one growth hop against chained growth over a task sequence.
    Continual(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// TOML config path.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's seed(s): grid commands run this single seed,
    /// single-run commands use it everywhere a seed is drawn.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Pretrain(a) => dispatch(a, cmd_pretrain),
        Cmd::Grow(a) => dispatch(a, cmd_grow),
        Cmd::Finetune(a) => dispatch(a, cmd_finetune),
        Cmd::Eval(a) => dispatch(a, cmd_eval),
        Cmd::Experiment(a) => dispatch(a, cmd_experiment),
        Cmd::Curves(a) => dispatch(a, cmd_curves),
        Cmd::Maxact(a) => dispatch(a, cmd_maxact),
        Cmd::Continual(a) => dispatch(a, cmd_continual),
    }
}

fn dispatch(args: RunArgs, f: impl FnOnce(&Config, Option<u64>, &Path) -> Result<()>) -> Result<()> {
    let cfg = load_config(&args.config)?;
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    cfg.write_resolved(&args.out)?;
    f(&cfg, args.seed, &args.out)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    write_text(path, &format!("{}\n", serde_json::to_string_pretty(value)?))
}

fn load_net(cfg: &Config) -> Result<NetworkGraph> {
    let path = cfg
        .run
        .checkpoint
        .as_ref()
        .context("this command needs [run] checkpoint")?;
    Ok(load_checkpoint(path)?)
}

/// The task splits a single-run command works on, honoring [run] task and the
/// grid's seed derivations so single runs and grid cells see the same data.
fn task_splits(cfg: &Config, seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    let (source, target) = cfg.build_tasks()?;
    match cfg.run.task.as_str() {
        "source" => Ok(split(
            &source,
            (
                cfg.split.fractions[0],
                cfg.split.fractions[1],
                cfg.split.fractions[2],
            ),
            derive_seed(seed, "split-source"),
        )?),
        "target" => Ok(prepare_target(&cfg.experiment_config()?, &target, seed)?),
        other => bail!("[run] task must be \"source\" or \"target\", got {other:?}"),
    }
}

fn pick_split<'a>(cfg: &Config, parts: &'a (Dataset, Dataset, Dataset)) -> Result<&'a Dataset> {
    match cfg.run.split.as_str() {
        "train" => Ok(&parts.0),
        "val" => Ok(&parts.1),
        "test" => Ok(&parts.2),
        other => bail!("[run] split must be train/val/test, got {other:?}"),
    }
}

fn run_curves_csv(run: &RunResult) -> String {
    let mut csv = String::from("epoch,train_loss,val_accuracy\n");
    for (e, (loss, acc)) in run.train_loss.iter().zip(&run.val_accuracy).enumerate() {
        csv.push_str(&format!("{e},{loss},{acc}\n"));
    }
    csv
}

fn print_table(table: &ResultsTable) {
    println!("{:<16} {:<10} {:<16} {:<6} {:>8}  {:>8}  {:>2}", "method", "variant", "scenario", "split", "mean", "stddev", "n");
    for a in &table.aggregates {
        println!(
            "{:<16} {:<10} {:<16} {:<6} {:>8.4}  {:>8.4}  {:>2}",
            a.method, a.variant, a.scenario, a.split, a.mean, a.stddev, a.n
        );
    }
    if !table.failures.is_empty() {
        println!("{} cell(s) failed:", table.failures.len());
        for f in &table.failures {
            println!("  {}/{}/{} seed {}: {}", f.method, f.variant, f.scenario, f.seed, f.reason);
        }
    }
}

fn write_table(out: &Path, cfg: &Config, table: &ResultsTable, extra: serde_json::Value) -> Result<()> {
    write_text(&out.join("results.csv"), &table.to_csv())?;
    let mut doc = json!({ "config": cfg, "results": table });
    if let serde_json::Value::Object(extras) = extra {
        doc.as_object_mut().unwrap().extend(extras);
    }
    write_json(&out.join("results.json"), &doc)
}

fn cmd_pretrain(cfg: &Config, seed: Option<u64>, out: &Path) -> Result<()> {
    let exp = cfg.experiment_config()?;
    exp.validate()?;
    let seed = seed.unwrap_or_else(|| exp.seeds.first().copied().unwrap_or(0));
    let (source, _) = cfg.build_tasks()?;
    let (s_train, s_val, s_test) = split(&source, exp.split_fractions, derive_seed(seed, "split-source"))?;
    let (net, mut run) = pretrain_net(&exp, &s_train, &s_val, seed)?;
    run.test_accuracy = Some(evaluate(&net, &s_test)?);
    save_checkpoint(&net, out.join("pretrained.ckpt"))?;
    write_text(&out.join("curves.csv"), &run_curves_csv(&run))?;
    write_json(
        &out.join("metrics.json"),
        &json!({
            "task": source.name,
            "seed": seed,
            "dense_params": dense_param_count(&net),
            "val": evaluate_detail(&net, &s_val)?,
            "test": evaluate_detail(&net, &s_test)?,
            "run": run,
        }),
    )?;
    println!(
        "pretrained on {} (seed {seed}): val {:.4}, test {:.4} -> {}",
        source.name,
        run.val_accuracy.last().copied().unwrap_or(f64::NAN),
        run.test_accuracy.unwrap(),
        out.join("pretrained.ckpt").display()
    );
    Ok(())
}

fn cmd_grow(cfg: &Config, seed: Option<u64>, out: &Path) -> Result<()> {
    let seed = seed.unwrap_or(0);
    let spec = cfg.grow_spec()?;
    let mut net = load_net(cfg)?;
    let (source, target) = cfg.build_tasks()?;
    let classes = match cfg.run.task.as_str() {
        "source" => source.class_count,
        "target" => target.class_count,
        other => bail!("[run] task must be \"source\" or \"target\", got {other:?}"),
    };
    let mut rng = Rng::new(derive_seed(seed, &format!("surgery/{}/{}", spec.name, spec.variant)));
    let report = apply_plan(&mut net, &spec.plan, classes, &mut rng)?;
    save_checkpoint(&net, out.join("grown.ckpt"))?;
    write_json(&out.join("report.json"), &json!({ "method": spec.name, "variant": spec.variant, "report": report }))?;
    println!(
        "grew {} ({}): +{} node(s), {} rewired, param delta {:+}",
        spec.name,
        spec.variant,
        report.nodes_added.len(),
        report.nodes_rewired.len(),
        report.param_delta
    );
    for line in &report.provenance {
        println!("  {line}");
    }
    Ok(())
}

fn cmd_finetune(cfg: &Config, seed: Option<u64>, out: &Path) -> Result<()> {
    let seed = seed.unwrap_or(cfg.finetune.seed);
    let mut net = load_net(cfg)?;
    let (t_train, t_val, t_test) = task_splits(cfg, seed)?;
    let mut ft = cfg.finetune.clone();
    ft.seed = seed;
    let mut run = train(&mut net, &t_train, &t_val, &ft)?;
    run.test_accuracy = Some(evaluate(&net, &t_test)?);
    save_checkpoint(&net, out.join("finetuned.ckpt"))?;
    write_text(&out.join("curves.csv"), &run_curves_csv(&run))?;
    write_json(
        &out.join("metrics.json"),
        &json!({
            "task": t_train.name,
            "seed": seed,
            "scenario": ft.scenario.label(),
            "dense_params": dense_param_count(&net),
            "val": evaluate_detail(&net, &t_val)?,
            "test": evaluate_detail(&net, &t_test)?,
            "run": run,
        }),
    )?;
    println!(
        "fine-tuned on {} ({}, seed {seed}): val {:.4}, test {:.4}",
        t_train.name,
        ft.scenario.label(),
        run.val_accuracy.last().copied().unwrap_or(f64::NAN),
        run.test_accuracy.unwrap()
    );
    Ok(())
}

fn cmd_eval(cfg: &Config, seed: Option<u64>, out: &Path) -> Result<()> {
    let seed = seed.unwrap_or(0);
    let net = load_net(cfg)?;
    let parts = task_splits(cfg, seed)?;
    let ds = pick_split(cfg, &parts)?;
    let detail = evaluate_detail(&net, ds)?;
    write_json(
        &out.join("eval.json"),
        &json!({ "dataset": ds.name, "split": cfg.run.split, "n": ds.len(), "detail": detail }),
    )?;
    println!(
        "{} [{}]: macro {:.4}, micro {:.4} over {} samples",
        ds.name,
        cfg.run.split,
        detail.macro_accuracy,
        detail.micro_accuracy,
        ds.len()
    );
    for (c, acc) in detail.per_class.iter().enumerate() {
        match acc {
            Some(a) => println!("  class {c}: {a:.4}"),
            None => println!("  class {c}: no samples"),
        }
    }
    Ok(())
}

fn cmd_experiment(cfg: &Config, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut exp = cfg.experiment_config()?;
    if let Some(s) = seed {
        exp.seeds = vec![s];
    }
    let (source, target) = cfg.build_tasks()?;
    match cfg.experiment.mode.as_str() {
        "grid" => {
            let table = run_experiment(&exp, &source, &target, Some(out))?;
            write_table(out, cfg, &table, json!({}))?;
            print_table(&table);
        }
        "progressive" => {
            exp.methods = vec![cfg.widen_spec()?];
            let outcome = progressive_vs_fixed(&exp, &source, &target, Some(out))?;
            write_table(
                out,
                cfg,
                &outcome.table,
                json!({
                    "ori_dense_params": outcome.ori_dense_params,
                    "grow_dense_params": outcome.grow_dense_params,
                }),
            )?;
            println!(
                "dense params: scratch-wide {}, grown {}",
                outcome.ori_dense_params, outcome.grow_dense_params
            );
            print_table(&outcome.table);
        }
        other => bail!("[experiment] mode must be \"grid\" or \"progressive\", got {other:?}"),
    }
    Ok(())
}

fn cmd_curves(cfg: &Config, seed: Option<u64>, out: &Path) -> Result<()> {
    let seed = seed.unwrap_or(0);
    let mut net = load_net(cfg)?;
    let exp = cfg.experiment_config()?;
    let (_, target) = cfg.build_tasks()?;
    let (t_train, t_val, t_test) = prepare_target(&exp, &target, seed)?;
    let spec = cfg.grow_spec()?;
    let mut rng = Rng::new(derive_seed(seed, &format!("surgery/{}/{}", spec.name, spec.variant)));
    apply_plan(&mut net, &spec.plan, t_train.class_count, &mut rng)?;
    let mut ft = cfg.finetune.clone();
    ft.seed = seed;
    let (mut run, snapshots) = train_retaining(&mut net, &t_train, &t_val, &ft)?;
    let curves = block_learning_curves(&snapshots, &t_train, &t_val)?;
    let ratio = block_norm_ratio(&net, &t_train)?;
    run.test_accuracy = Some(evaluate(&net, &t_test)?);
    run.block_curves = Some(curves.clone());
    save_checkpoint(&net, out.join("finetuned.ckpt"))?;
    let mut csv = String::from("epoch,train_loss,val_accuracy,old_block,new_block,combined\n");
    for e in 0..run.train_loss.len() {
        csv.push_str(&format!(
            "{e},{},{},{},{},{}\n",
            run.train_loss[e],
            run.val_accuracy[e],
            curves.old_block[e],
            curves.new_block[e],
            curves.combined[e],
        ));
    }
    write_text(&out.join("curves.csv"), &csv)?;
    write_json(
        &out.join("metrics.json"),
        &json!({
            "method": spec.name,
            "variant": spec.variant,
            "seed": seed,
            "block_norm_ratio": ratio,
            "run": run,
        }),
    )?;
    println!(
        "{} ({}) on {}: test {:.4}, final probes old {:.4} / new {:.4} / combined {:.4}, norm ratio {:.3}",
        spec.name,
        spec.variant,
        t_train.name,
        run.test_accuracy.unwrap(),
        curves.old_block.last().copied().unwrap_or(f64::NAN),
        curves.new_block.last().copied().unwrap_or(f64::NAN),
        curves.combined.last().copied().unwrap_or(f64::NAN),
        ratio
    );
    Ok(())
}

fn cmd_maxact(cfg: &Config, seed: Option<u64>, out: &Path) -> Result<()> {
    let seed = seed.unwrap_or(0);
    let net = load_net(cfg)?;
    let parts = task_splits(cfg, seed)?;
    let ds = pick_split(cfg, &parts)?;
    let top = max_activating(&net, &cfg.maxact.node, cfg.maxact.unit, ds, cfg.maxact.k)?;
    let mut csv = String::from("rank,sample,activation,label\n");
    println!(
        "top {} of {}[{}] on {} [{}]:",
        top.len(),
        cfg.maxact.node,
        cfg.maxact.unit,
        ds.name,
        cfg.run.split
    );
    for (rank, (sample, act)) in top.iter().enumerate() {
        csv.push_str(&format!("{rank},{sample},{act},{}\n", ds.labels[*sample]));
        println!("  #{rank}: sample {sample} (label {}) activation {act:.6}", ds.labels[*sample]);
    }
    write_text(&out.join("maxact.csv"), &csv)?;
    Ok(())
}

fn cmd_continual(cfg: &Config, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut exp = cfg.experiment_config()?;
    exp.methods = vec![cfg.widen_spec()?];
    if let Some(s) = seed {
        exp.seeds = vec![s];
    }
    let chain = cfg.build_chain()?;
    let outcome = continual_transfer(&exp, &chain, Some(out))?;
    write_table(
        out,
        cfg,
        &outcome.table,
        json!({
            "tasks": chain.len(),
            "direct_params": outcome.direct_params,
            "chained_params": outcome.chained_params,
        }),
    )?;
    println!(
        "{} tasks; dense params: direct {}, chained {}",
        chain.len(),
        outcome.direct_params,
        outcome.chained_params
    );
    print_table(&outcome.table);
    Ok(())
}
