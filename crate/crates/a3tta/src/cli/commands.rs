//! Implementations behind the subcommands.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::adapt::{init_adaptation, run_continual, run_stream};
use crate::baselines::{
    fixed_mt_config, init_tent, run_ptbn, run_source_only, run_tent, BaselineSpec,
};
use crate::data::{
    generate_benchmark, load_benchmark_config, manifest, BenchmarkConfig, BenchmarkSplit, Dataset,
    SyntheticTask,
};
use crate::error::{Error, Result};
use crate::metrics::MetricRecord;
use crate::report::{self, RunMeta, StepRecord};
use crate::seeding::rng_for;
use crate::segmodel::{load_checkpoint, save_checkpoint, ArchConfig, SegModel};

use super::{
    resolve_domains, resolve_out_dir, write_resolved_config, AdaptArgs, AdaptSettings,
    ContinualArgs, ContinualSettings, GenDataArgs, MethodKind, PretrainArgs, PretrainSettings,
    ReportArgs,
};

/// Element type of the user-facing pipeline.
type F = f32;

pub(super) fn gen_data(args: &GenDataArgs) -> Result<()> {
    let mut config: BenchmarkConfig = super::load_toml(args.config.as_deref())?;
    if let Some(v) = args.seed {
        config.seed = v;
    }
    if let Some(v) = args.n_train {
        config.n_train = v;
    }
    if let Some(v) = args.n_val {
        config.n_val = v;
    }
    if let Some(v) = args.n_target {
        config.n_target = v;
    }
    if let Some(v) = args.image_size {
        config.task.image_size = v;
    }
    if let Some(v) = args.num_classes {
        config.task.num_classes = v;
    }
    config.validate()?;

    let out = resolve_out_dir(&args.out);
    write_resolved_config(&out, &config)?;
    generate_benchmark::<F>(&out, &config)?;
    println!("benchmark written to {}", out.display());
    println!(
        "  source: {} train / {} val images",
        config.n_train, config.n_val
    );
    for t in &config.targets {
        println!("  target {}: {} images", t.name, config.n_target);
    }
    Ok(())
}

fn arch_for_task(task: &SyntheticTask) -> ArchConfig {
    ArchConfig {
        num_classes: task.num_classes,
        image_height: task.image_size,
        image_width: task.image_size,
        ..ArchConfig::default()
    }
}

fn load_split(root: &Path, bench: &BenchmarkConfig, split: &BenchmarkSplit) -> Result<Dataset<F>> {
    manifest::load_dataset(&bench.split_dir(root, split), bench.task.num_classes)
}

pub(super) fn pretrain(args: &PretrainArgs) -> Result<()> {
    let mut settings: PretrainSettings = super::load_toml(args.config.as_deref())?;
    if let Some(v) = args.epochs {
        settings.pretrain.epochs = v;
    }
    if let Some(v) = args.batch_size {
        settings.pretrain.batch_size = v;
    }
    if let Some(v) = args.learning_rate {
        settings.pretrain.learning_rate = v;
    }
    if let Some(v) = args.seed {
        settings.pretrain.seed = v;
    }

    let bench = load_benchmark_config(&args.data)?;
    let mut arch = settings
        .arch
        .clone()
        .unwrap_or_else(|| arch_for_task(&bench.task));
    if let Some(v) = args.dropout {
        arch.dropout = (v > 0.0).then_some(v);
    }
    arch.validate()?;
    settings.arch = Some(arch.clone());

    let out = resolve_out_dir(&args.out);
    write_resolved_config(&out, &settings)?;

    let train = load_split(&args.data, &bench, &BenchmarkSplit::SourceTrain)?;
    let val = load_split(&args.data, &bench, &BenchmarkSplit::SourceVal)?;
    let mut model = SegModel::<F>::new(arch, settings.pretrain.seed)?;
    let outcome = crate::segmodel::pretrain(
        &mut model,
        &train.images_array()?,
        &train.masks_array()?,
        &val.images_array()?,
        &val.masks_array()?,
        &settings.pretrain,
    )?;

    let ckpt = out.join("checkpoint.ckpt");
    save_checkpoint(&ckpt, &model, None)?;
    let mut history = String::from("epoch,mean_loss,val_dice\n");
    for e in &outcome.history {
        let _ = writeln!(history, "{},{},{}", e.epoch, e.mean_loss, e.val_dice);
    }
    let history_path = out.join("pretrain_history.csv");
    fs::write(&history_path, history).map_err(|e| Error::io(&history_path, e))?;

    println!(
        "best epoch {} with validation dice {:.4}",
        outcome.best_epoch, outcome.best_val_dice
    );
    println!("checkpoint written to {}", ckpt.display());
    Ok(())
}

fn check_model_matches(model: &SegModel<F>, bench: &BenchmarkConfig) -> Result<()> {
    let arch = model.arch();
    let t = &bench.task;
    if arch.num_classes != t.num_classes
        || arch.image_height != t.image_size
        || arch.image_width != t.image_size
        || arch.in_channels != 1
    {
        return Err(Error::Incompatible(format!(
            "checkpoint expects {} classes at {}x{}, benchmark provides {} classes at {}x{}",
            arch.num_classes,
            arch.image_height,
            arch.image_width,
            t.num_classes,
            t.image_size,
            t.image_size
        )));
    }
    Ok(())
}

fn write_run_artifacts(
    out: &Path,
    meta: &RunMeta,
    records: &[MetricRecord],
    steps: &[StepRecord],
    incidents: &[String],
) -> Result<()> {
    report::write_run_meta(out, meta)?;
    report::write_metrics_csv(out, records)?;
    report::write_summary_csv(out, records)?;
    report::write_run_log(out, steps)?;
    report::write_bri_series(out, steps)?;
    report::write_incidents(out, incidents)
}

fn print_summary(records: &[MetricRecord]) -> Result<()> {
    if records.is_empty() {
        println!("no images evaluated");
        return Ok(());
    }
    for (round, domain, g) in report::summarize(records)? {
        println!(
            "round {round}  {domain}: dice {:.4} ± {:.4}  miou {:.4}  (n={})",
            g.dice_mean, g.dice_std, g.miou_mean, g.count
        );
    }
    Ok(())
}

pub(super) fn adapt(args: &AdaptArgs) -> Result<()> {
    let mut settings: AdaptSettings = super::load_toml(args.config.as_deref())?;
    if let Some(v) = args.method {
        settings.method = v;
    }
    if !args.domains.is_empty() {
        settings.domains = args.domains.clone();
    }
    if let Some(v) = args.tent_learning_rate {
        settings.tent_learning_rate = v;
    }
    if let Some(v) = args.fixed_mt_alpha {
        settings.fixed_mt_alpha = v;
    }
    args.engine.apply(&mut settings.engine);
    settings.engine.validate()?;
    match settings.method {
        MethodKind::TentLike => BaselineSpec::TentLike {
            learning_rate: settings.tent_learning_rate,
        }
        .validate()?,
        MethodKind::FixedMt => BaselineSpec::FixedMt {
            alpha: settings.fixed_mt_alpha,
        }
        .validate()?,
        _ => {}
    }

    let bench = load_benchmark_config(&args.data)?;
    let domains = resolve_domains(&settings.domains, &bench)?;
    let (model, _) = load_checkpoint::<F>(&args.checkpoint)?;
    check_model_matches(&model, &bench)?;

    let out = resolve_out_dir(&args.out);
    write_resolved_config(&out, &settings)?;

    let mut records: Vec<MetricRecord> = Vec::new();
    let mut steps: Vec<StepRecord> = Vec::new();
    let mut incidents: Vec<String> = Vec::new();
    let mut failure: Option<String> = None;

    // Each domain adapts independently from the source checkpoint; the
    // carried-state protocol lives under `continual`.
    for (di, name) in domains.iter().enumerate() {
        let ds = load_split(&args.data, &bench, &BenchmarkSplit::Target(name.clone()))?
            .shuffled(&mut rng_for(settings.engine.seed, "stream-order", di as u64));
        let stream = ds.batches(settings.engine.batch_size)?.into_iter().map(Ok);
        let rep = match settings.method {
            MethodKind::A3tta | MethodKind::FixedMt => {
                let cfg = if settings.method == MethodKind::FixedMt {
                    fixed_mt_config(settings.fixed_mt_alpha, &settings.engine)
                } else {
                    settings.engine.clone()
                };
                let mut state = init_adaptation(&model, cfg)?;
                let rep = run_stream(&mut state, stream, 0);
                steps.extend(rep.steps.iter().map(|b| StepRecord::from_batch(b, 0, name)));
                incidents.extend(state.incidents.iter().map(|s| format!("{name}: {s}")));
                report::write_bank_snapshot(&out.join("bank").join(name), &state)?;
                rep
            }
            MethodKind::SourceOnly => run_source_only(&model, stream, 0),
            MethodKind::PtbnLike => run_ptbn(&model, stream, 0),
            MethodKind::TentLike => {
                let mut state = init_tent(&model, settings.tent_learning_rate)?;
                run_tent(&mut state, stream, 0)
            }
        };
        records.extend(rep.records);
        if !rep.complete {
            failure = Some(rep.error.unwrap_or_else(|| "unknown failure".into()));
            break;
        }
    }

    let meta = RunMeta {
        method: settings.method.name().to_string(),
        domains: domains.clone(),
        num_classes: bench.task.num_classes,
        rounds: 1,
        seed: settings.engine.seed,
    };
    write_run_artifacts(&out, &meta, &records, &steps, &incidents)?;
    print_summary(&records)?;
    if let Some(msg) = failure {
        return Err(Error::Runtime(format!("adaptation aborted: {msg}")));
    }
    println!("run written to {}", out.display());
    Ok(())
}

pub(super) fn continual(args: &ContinualArgs) -> Result<()> {
    let mut settings: ContinualSettings = super::load_toml(args.config.as_deref())?;
    if let Some(v) = args.rounds {
        settings.rounds = v;
    }
    if !args.domains.is_empty() {
        settings.domains = args.domains.clone();
    }
    args.engine.apply(&mut settings.engine);
    settings.engine.validate()?;
    if settings.rounds == 0 {
        return Err(Error::Config("rounds must be ≥ 1".into()));
    }

    let bench = load_benchmark_config(&args.data)?;
    let domains = resolve_domains(&settings.domains, &bench)?;
    let (model, _) = load_checkpoint::<F>(&args.checkpoint)?;
    check_model_matches(&model, &bench)?;

    let out = resolve_out_dir(&args.out);
    write_resolved_config(&out, &settings)?;

    let datasets: Vec<Dataset<F>> = domains
        .iter()
        .enumerate()
        .map(|(di, n)| {
            load_split(&args.data, &bench, &BenchmarkSplit::Target(n.clone())).map(|ds| {
                ds.shuffled(&mut rng_for(settings.engine.seed, "stream-order", di as u64))
            })
        })
        .collect::<Result<_>>()?;
    let mut state = init_adaptation(&model, settings.engine.clone())?;
    let creport = run_continual(&mut state, &datasets, settings.rounds)?;

    let mut records: Vec<MetricRecord> = Vec::new();
    let mut steps: Vec<StepRecord> = Vec::new();
    for cell in &creport.cells {
        steps.extend(
            cell.report
                .steps
                .iter()
                .map(|b| StepRecord::from_batch(b, cell.round, &cell.domain)),
        );
        records.extend(cell.report.records.iter().cloned());
    }
    report::write_bank_snapshot(&out.join("bank"), &state)?;

    let meta = RunMeta {
        method: "a3tta".to_string(),
        domains: domains.clone(),
        num_classes: bench.task.num_classes,
        rounds: settings.rounds,
        seed: settings.engine.seed,
    };
    write_run_artifacts(&out, &meta, &records, &steps, &state.incidents)?;
    print_summary(&records)?;
    if !creport.complete {
        let msg = creport
            .cells
            .iter()
            .find_map(|c| c.report.error.clone())
            .unwrap_or_else(|| "unknown failure".into());
        return Err(Error::Runtime(format!("continual run aborted: {msg}")));
    }
    println!("run written to {}", out.display());
    Ok(())
}

pub(super) fn report(args: &ReportArgs) -> Result<()> {
    let runs: Vec<report::LoadedRun> = args
        .runs
        .iter()
        .map(|d| report::load_run(d))
        .collect::<Result<_>>()?;
    let table = report::compare_runs(&runs)?;

    let out = resolve_out_dir(&args.out);
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    report::write_comparison_csv(&out, &table)?;
    let text = report::render_comparison(&table);
    let txt_path = out.join("comparison.txt");
    fs::write(&txt_path, &text).map_err(|e| Error::io(&txt_path, e))?;
    for (label, run) in table.methods.iter().zip(runs.iter()) {
        if !run.steps.is_empty() {
            report::write_bri_series(&out.join("bri").join(label), &run.steps)?;
        }
    }
    print!("{text}");
    println!("comparison written to {}", out.display());
    Ok(())
}
