use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::Serialize;

use milpdl::baselines::BaselineKind;
use milpdl::data::{load_bags_csv, write_bags_csv, Bag, BagDataset, Standardizer};
use milpdl::io::SavedModel;
use milpdl::pdl::InterpolationKind;
use milpdl::train::{
    bag_attention, evaluate, execute_run, fit_run, localization_score, plan_cv, summarize,
    CvSummary, ExperimentConfig, PdlConfig, Regularizer, RunPlan, RunRecord, ScheduleMode, Spread,
};

use crate::config::{DataSource, RawConfig, Settings};

/// Rates swept for the rate-based baselines: 0.00, 0.05, ..., 0.40.
pub fn baseline_rate_grid() -> Vec<f64> {
    (0..=8).map(|i| i as f64 * 0.05).collect()
}

pub struct CommandContext {
    pub raw: RawConfig,
    pub settings: Settings,
    pub command: &'static str,
}

pub fn load_dataset(source: &DataSource) -> Result<BagDataset> {
    match source {
        DataSource::Csv(path) => {
            if !path.exists() {
                bail!("dataset file {} does not exist", path.display());
            }
            load_bags_csv(path).with_context(|| format!("loading {}", path.display()))
        }
        DataSource::Synth(cfg) => Ok(cfg.generate()?),
    }
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    Ok(rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()?)
}

/// Runs every plan under `experiment` on the worker pool; records come back
/// in plan order regardless of scheduling.
fn run_all(
    pool: &rayon::ThreadPool,
    dataset: &BagDataset,
    plans: &[RunPlan],
    experiment: &ExperimentConfig,
) -> Result<Vec<RunRecord>> {
    pool.install(|| {
        plans
            .par_iter()
            .map(|p| execute_run(dataset, p, experiment))
            .collect::<milpdl::Result<Vec<_>>>()
    })
    .map_err(Into::into)
}

fn with_regularizer(base: &ExperimentConfig, reg: Regularizer) -> ExperimentConfig {
    let mut e = base.clone();
    e.train.regularizer = reg;
    e
}

fn fmt_opt(v: Option<f64>) -> String {
    v.filter(|x| x.is_finite())
        .map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"))
}

fn spread_cols(s: &Option<Spread>) -> String {
    match s {
        Some(s) => format!(
            "{:.6},{:.6},{:.6}",
            s.mean, s.std_all_runs, s.std_repeat_means
        ),
        None => "NA,NA,NA".into(),
    }
}

const SPREAD_HEADER: &str = "accuracy_mean,accuracy_std_runs,accuracy_std_repeats,auc_mean,auc_std_runs,auc_std_repeats,localization_mean,localization_std_runs,localization_std_repeats";

fn summary_row(s: &CvSummary) -> String {
    format!(
        "{},{},{}",
        spread_cols(&s.accuracy),
        spread_cols(&s.auc),
        spread_cols(&s.localization)
    )
}

#[derive(Serialize)]
struct TaggedRecord<'a> {
    group: &'a str,
    #[serde(flatten)]
    record: &'a RunRecord,
}

fn write_records(path: &Path, groups: &[(String, Vec<RunRecord>)]) -> Result<()> {
    let mut out = String::new();
    for (group, runs) in groups {
        for r in runs {
            out.push_str(&serde_json::to_string(&TaggedRecord { group, record: r })?);
            out.push('\n');
        }
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config_hash: String,
    train_seed: u64,
    build_version: &'a str,
    dataset: &'a str,
    bags: usize,
    outputs: Vec<&'a str>,
    config: String,
}

fn write_manifest(ctx: &CommandContext, dataset: &BagDataset, outputs: Vec<&str>) -> Result<()> {
    let m = Manifest {
        command: ctx.command,
        config_hash: ctx.raw.hash(),
        train_seed: ctx.settings.experiment.train.seed,
        build_version: env!("CARGO_PKG_VERSION"),
        dataset: &dataset.name,
        bags: dataset.len(),
        outputs,
        config: ctx.raw.canonical_text(),
    };
    let path = ctx.settings.output_dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&m)? + "\n")
        .with_context(|| format!("writing {}", path.display()))
}

fn prepare_output(settings: &Settings) -> Result<()> {
    fs::create_dir_all(&settings.output_dir)
        .with_context(|| format!("creating {}", settings.output_dir.display()))
}

/// Repeated cross-validation, then a final fit on all bags whose parameters
/// are saved for `eval` and `export-attention`.
pub fn cmd_train(ctx: &CommandContext) -> Result<()> {
    let s = &ctx.settings;
    let dataset = load_dataset(&s.data)?;
    prepare_output(s)?;
    let pool = pool(s.workers)?;
    let plans = plan_cv(&dataset, s.folds, s.repeats, s.experiment.train.seed)?;
    let runs = run_all(&pool, &dataset, &plans, &s.experiment)?;
    let method = s.experiment.train.regularizer.to_string();
    let summary = summarize(&method, &runs);

    let all = RunPlan {
        run_id: "final".into(),
        repeat: 0,
        fold: 0,
        seed: s.experiment.train.seed,
        train: (0..dataset.len()).collect(),
        test: Vec::new(),
    };
    let (params, standardizer, final_record) = fit_run(&dataset, &all, &s.experiment)?;
    SavedModel {
        params,
        standardizer: Some(standardizer),
    }
    .save(&s.model_path)?;

    write_records(
        &s.output_dir.join("records.jsonl"),
        &[("cv".into(), runs), ("final".into(), vec![final_record])],
    )?;
    let mut table = format!("method,runs,{SPREAD_HEADER}\n");
    let _ = writeln!(
        table,
        "{method:?},{},{}",
        summary.runs,
        summary_row(&summary)
    );
    fs::write(s.output_dir.join("summary.csv"), table)?;
    write_manifest(
        ctx,
        &dataset,
        vec!["records.jsonl", "summary.csv", "model.params"],
    )?;
    println!(
        "{method}: accuracy {} over {} runs",
        fmt_opt(summary.accuracy.map(|a| a.mean)),
        summary.runs
    );
    Ok(())
}

fn load_model(settings: &Settings) -> Result<SavedModel> {
    let path = &settings.model_path;
    if !path.exists() {
        bail!("model file {} does not exist", path.display());
    }
    SavedModel::load(path).with_context(|| format!("loading {}", path.display()))
}

fn normalized_bags(dataset: &BagDataset, model: &SavedModel) -> Vec<Bag> {
    let s = model
        .standardizer
        .clone()
        .unwrap_or_else(|| Standardizer::identity(dataset.feature_dim));
    dataset.bags.iter().map(|b| s.apply(b)).collect()
}

pub fn cmd_eval(ctx: &CommandContext) -> Result<()> {
    let s = &ctx.settings;
    let dataset = load_dataset(&s.data)?;
    let model = load_model(s)?;
    prepare_output(s)?;
    let bags = normalized_bags(&dataset, &model);
    let m = evaluate(&model.params, &bags)?;
    let labelled = bags
        .iter()
        .filter(|b| b.label)
        .all(|b| b.instance_labels.is_some());
    let loc = if labelled {
        localization_score(&model.params, &bags)?
    } else {
        None
    };
    let table = format!(
        "bags,accuracy,auc,loss,localization\n{},{:.6},{},{:.6},{}\n",
        m.bags,
        m.accuracy,
        fmt_opt(m.auc),
        m.loss,
        fmt_opt(loc)
    );
    fs::write(s.output_dir.join("eval.csv"), &table)?;
    write_manifest(ctx, &dataset, vec!["eval.csv"])?;
    print!("{table}");
    Ok(())
}

/// Cross-validates a family of configurations and returns each one's runs.
fn run_family(
    ctx: &CommandContext,
    dataset: &BagDataset,
    variants: &[(String, Regularizer)],
) -> Result<Vec<(String, Vec<RunRecord>)>> {
    let s = &ctx.settings;
    let pool = pool(s.workers)?;
    let plans = plan_cv(dataset, s.folds, s.repeats, s.experiment.train.seed)?;
    variants
        .iter()
        .map(|(name, reg)| {
            let exp = with_regularizer(&s.experiment, *reg);
            Ok((name.clone(), run_all(&pool, dataset, &plans, &exp)?))
        })
        .collect()
}

fn mean_accuracy(runs: &[RunRecord]) -> f64 {
    summarize("", runs)
        .accuracy
        .map_or(f64::NEG_INFINITY, |a| a.mean)
}

/// No regularizer, the four baselines and PDL on identical splits and
/// seeds. Rate-based baselines are swept over 0–0.4 and the best setting
/// (highest mean accuracy, lowest rate on ties) is reported.
pub fn cmd_compare_dropouts(ctx: &CommandContext) -> Result<()> {
    let s = &ctx.settings;
    let dataset = load_dataset(&s.data)?;
    prepare_output(s)?;

    let mut variants: Vec<(String, Regularizer)> = vec![("none".into(), Regularizer::None)];
    type Ctor = fn(f64) -> BaselineKind;
    let sweeps: [(&str, Ctor); 3] = [
        ("vanilla", |rate| BaselineKind::Vanilla { rate }),
        ("spatial", |rate| BaselineKind::Spatial { rate }),
        ("drop_instance", |rate| BaselineKind::DropInstance { rate }),
    ];
    for (name, ctor) in sweeps {
        for rate in baseline_rate_grid() {
            variants.push((
                format!("{name}@{rate:.2}"),
                Regularizer::Baseline(ctor(rate)),
            ));
        }
    }
    variants.push((
        format!("attention_drop@{:.2}", s.threshold),
        Regularizer::Baseline(BaselineKind::AttentionDrop {
            threshold: s.threshold,
        }),
    ));
    variants.push(("pdl".into(), Regularizer::Pdl(s.pdl)));

    let results = run_family(ctx, &dataset, &variants)?;
    let mut rows: Vec<(String, String, CvSummary)> = Vec::new();
    for method in [
        "none",
        "vanilla",
        "spatial",
        "drop_instance",
        "attention_drop",
        "pdl",
    ] {
        let best = results
            .iter()
            .filter(|(name, _)| name == method || name.starts_with(&format!("{method}@")))
            .fold(None::<&(String, Vec<RunRecord>)>, |best, cand| match best {
                Some(b) if mean_accuracy(&b.1) >= mean_accuracy(&cand.1) => Some(b),
                _ => Some(cand),
            })
            .expect("every method has at least one variant");
        let setting = best.0.split_once('@').map_or("-", |(_, v)| v).to_string();
        rows.push((method.to_string(), setting, summarize(method, &best.1)));
    }

    write_records(&s.output_dir.join("records.jsonl"), &results)?;
    let mut table = format!("method,setting,runs,{SPREAD_HEADER}\n");
    for (method, setting, summary) in &rows {
        let _ = writeln!(
            table,
            "{method},{setting},{},{}",
            summary.runs,
            summary_row(summary)
        );
    }
    fs::write(s.output_dir.join("comparison.csv"), &table)?;
    write_manifest(ctx, &dataset, vec!["records.jsonl", "comparison.csv"])?;
    print!("{table}");
    Ok(())
}

/// PDL with a constant `P_max` against the progressive schedule.
pub fn cmd_scheduler_ablation(ctx: &CommandContext) -> Result<()> {
    let s = &ctx.settings;
    let dataset = load_dataset(&s.data)?;
    prepare_output(s)?;
    let variants: Vec<(String, Regularizer)> = [ScheduleMode::Fixed, ScheduleMode::Progressive]
        .into_iter()
        .map(|mode| {
            let name = match mode {
                ScheduleMode::Fixed => "fixed",
                ScheduleMode::Progressive => "progressive",
            };
            (
                name.to_string(),
                Regularizer::Pdl(PdlConfig {
                    schedule: mode,
                    ..s.pdl
                }),
            )
        })
        .collect();
    let results = run_family(ctx, &dataset, &variants)?;
    write_records(&s.output_dir.join("records.jsonl"), &results)?;
    let mut table = format!("schedule,runs,first_epoch_rate,last_epoch_rate,{SPREAD_HEADER}\n");
    for (name, runs) in &results {
        let summary = summarize(name, runs);
        let first = runs.first().and_then(|r| r.epoch_rate.first()).copied();
        let last = runs.first().and_then(|r| r.epoch_rate.last()).copied();
        let _ = writeln!(
            table,
            "{name},{},{},{},{}",
            summary.runs,
            fmt_opt(first),
            fmt_opt(last),
            summary_row(&summary)
        );
    }
    fs::write(s.output_dir.join("ablation.csv"), &table)?;
    write_manifest(ctx, &dataset, vec!["records.jsonl", "ablation.csv"])?;
    print!("{table}");
    Ok(())
}

/// 3×3 grid of schedule interpolation × per-instance rate interpolation.
pub fn cmd_sweep_interpolation(ctx: &CommandContext) -> Result<()> {
    let s = &ctx.settings;
    let dataset = load_dataset(&s.data)?;
    prepare_output(s)?;
    let mut variants = Vec::new();
    for schedule in InterpolationKind::ALL {
        for rate in InterpolationKind::ALL {
            let mut cfg = s.pdl;
            cfg.schedule_interp.kind = schedule;
            cfg.rate_interp.kind = rate;
            variants.push((format!("{schedule}/{rate}"), Regularizer::Pdl(cfg)));
        }
    }
    let results = run_family(ctx, &dataset, &variants)?;
    write_records(&s.output_dir.join("records.jsonl"), &results)?;
    let mut table = format!("schedule_kind,rate_kind,runs,{SPREAD_HEADER}\n");
    for (name, runs) in &results {
        let (schedule, rate) = name.split_once('/').expect("name built above");
        let summary = summarize(name, runs);
        let _ = writeln!(
            table,
            "{schedule},{rate},{},{}",
            summary.runs,
            summary_row(&summary)
        );
    }
    fs::write(s.output_dir.join("sweep.csv"), &table)?;
    write_manifest(ctx, &dataset, vec!["records.jsonl", "sweep.csv"])?;
    print!("{table}");
    Ok(())
}

/// Per-instance attention of a saved model: aggregator weight and the APBA
/// weight seen by each PDL layer.
pub fn cmd_export_attention(ctx: &CommandContext) -> Result<()> {
    let s = &ctx.settings;
    let dataset = load_dataset(&s.data)?;
    let model = load_model(s)?;
    prepare_output(s)?;
    let bags = normalized_bags(&dataset, &model);
    let n_layers = model.params.projector.layers.len();
    let mut out = String::from("bag_id,bag_label,instance,instance_label,attention");
    for l in 0..n_layers {
        let _ = write!(out, ",layer{l}_apba");
    }
    out.push('\n');
    for bag in &bags {
        let att = bag_attention(&model.params, bag)?;
        for k in 0..bag.len() {
            let inst = bag
                .instance_labels
                .as_ref()
                .map_or("?".to_string(), |l| u8::from(l[k]).to_string());
            let _ = write!(
                out,
                "{},{},{k},{inst},{:.9}",
                bag.id,
                u8::from(bag.label),
                att.aggregator[k]
            );
            for layer in &att.layers {
                let _ = write!(out, ",{:.9}", layer[k]);
            }
            out.push('\n');
        }
    }
    fs::write(s.output_dir.join("attention.csv"), out)?;
    write_manifest(ctx, &dataset, vec!["attention.csv"])?;
    println!("wrote attention for {} instances", dataset.instance_count());
    Ok(())
}

/// Writes the configured dataset in the bag CSV schema.
pub fn cmd_export_data(ctx: &CommandContext) -> Result<()> {
    let s = &ctx.settings;
    let dataset = load_dataset(&s.data)?;
    prepare_output(s)?;
    write_bags_csv(&dataset, s.output_dir.join("bags.csv"))?;
    write_manifest(ctx, &dataset, vec!["bags.csv"])?;
    Ok(())
}
