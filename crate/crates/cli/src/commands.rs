use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::s;
use serde_json::json;

use dmt_core::config::Task;
use dmt_core::init::SplitSpec;
use dmt_core::nn::{read_checkpoint, Network};
use dmt_core::pseudo_label::{
    load_pseudo_label_maps, load_pseudo_label_records, pseudo_label_error_stats,
    save_pseudo_label_maps, save_pseudo_label_records, ErrorReport, LabelSource, Manifest,
    PayloadFormat, MANIFEST_FILE,
};
use dmt_core::runlog::{read_run_log, RUN_LOG_FILE};
use dmt_core::trainer::{eval_classifier, eval_segmenter, predictions, probability_maps, Dataset};
use dmt_core::{
    dynamic_weight_map, run_ablation, AblationVariant, DmtError, ExperimentConfig, Prepared,
    PseudoLabelRecord, RunOptions, RunRecord, RunStore, SelectionPolicy, IGNORE_LABEL,
};

use crate::table::{self, Table};
use crate::{plot, Cli, CliResult, Command, LabelArgs, PlotArgs, PlotKind, PolicyKind};

struct Ctx {
    cfg: ExperimentConfig,
    seeds: Vec<u64>,
    out: PathBuf,
    data_dir: Option<PathBuf>,
    split: Option<SplitSpec>,
}

impl Ctx {
    fn new(cli: &Cli) -> CliResult<Self> {
        let name = cli.config.as_deref().ok_or_else(|| {
            DmtError::Config("--config is required (a preset name or a TOML file)".into())
        })?;
        let cfg = ExperimentConfig::load(name)?;
        let seeds = match cli.seed {
            Some(s) => vec![s],
            None => cfg.seeds.clone(),
        };
        let out = cli
            .out
            .clone()
            .unwrap_or_else(|| Path::new("runs").join(&cfg.name));
        let split = cli.split.as_deref().map(SplitSpec::load).transpose()?;
        Ok(Ctx {
            cfg,
            seeds,
            out,
            data_dir: cli.data_dir.clone(),
            split,
        })
    }

    fn first_seed(&self) -> u64 {
        self.seeds[0]
    }

    fn prepare(&self, seed: u64) -> CliResult<Prepared> {
        Prepared::load(
            &self.cfg,
            seed,
            self.data_dir.as_deref(),
            self.split.clone(),
        )
    }

    fn store(&self) -> CliResult<RunStore> {
        RunStore::open(&self.out, &self.cfg)
    }

    fn plots_dir(&self) -> CliResult<PathBuf> {
        let dir = self.out.join("plots");
        fs::create_dir_all(&dir)?;
        Ok(dir)
    }

    fn run_log(&self) -> CliResult<Vec<RunRecord>> {
        let path = self.out.join(RUN_LOG_FILE);
        if !path.exists() {
            return Err(DmtError::Config(format!(
                "no run log at {}; run `dmt` or `baseline` first",
                path.display()
            )));
        }
        read_run_log(&path)
    }
}

pub fn run(cli: &Cli) -> CliResult<()> {
    let ctx = Ctx::new(cli)?;
    match &cli.command {
        Command::Split => split(&ctx),
        Command::Baseline => train(&ctx, AblationVariant::Dmt, true),
        Command::Label(args) => label(&ctx, args),
        Command::Dmt => train(&ctx, AblationVariant::Dmt, false),
        Command::Ablate { variant } => train(&ctx, *variant, false),
        Command::Eval { checkpoint } => eval(&ctx, checkpoint.as_deref()),
        Command::Stats { labels } => stats(&ctx, labels.as_deref()),
        Command::Plot(args) => plot_cmd(&ctx, args),
    }
}

fn split(ctx: &Ctx) -> CliResult<()> {
    fs::create_dir_all(&ctx.out)?;
    for &seed in &ctx.seeds {
        let prep = ctx.prepare(seed)?;
        let path = ctx.out.join(format!("split-s{seed}.json"));
        prep.split.save(&path)?;
        println!(
            "seed {seed}: {} labeled, {} unlabeled, {} valtiny -> {}",
            prep.split.labeled_ids.len(),
            prep.split.unlabeled_ids.len(),
            prep.split.valtiny_ids.len(),
            path.display()
        );
    }
    Ok(())
}

fn train(ctx: &Ctx, variant: AblationVariant, baseline_only: bool) -> CliResult<()> {
    let mut store = ctx.store()?;
    let opts = RunOptions {
        baseline_only,
        ..Default::default()
    };
    let mut rows = Vec::new();
    let mut finals = Vec::new();
    for &seed in &ctx.seeds {
        let prep = ctx.prepare(seed)?;
        let out = run_ablation(variant, &ctx.cfg, seed, &prep, &mut store, &opts)?;
        rows.extend(out.baseline.iter().cloned());
        rows.extend(out.iterations.iter().cloned());
        finals.push((
            seed,
            out.final_label.clone(),
            out.final_metrics.headline(ctx.cfg.eval_ema),
        ));
    }
    print!("{}", table::records(&rows));
    for (seed, label, value) in finals {
        println!("seed {seed}: final model {label}, {}", table::opt(value));
    }
    println!("records in {}", ctx.out.join(RUN_LOG_FILE).display());
    Ok(())
}

fn policy(kind: PolicyKind, args: &LabelArgs) -> CliResult<SelectionPolicy> {
    let p = match kind {
        PolicyKind::Threshold => SelectionPolicy::FixedThreshold(args.alpha),
        PolicyKind::Top => SelectionPolicy::TopFraction(args.alpha),
        PolicyKind::Balanced => SelectionPolicy::ClassBalancedTopFraction(args.alpha),
        PolicyKind::Cbst => SelectionPolicy::CbstRenormalized(args.alpha),
    };
    p.validate()?;
    Ok(p)
}

fn model_name(path: &Path) -> String {
    path.file_stem()
        .map_or_else(|| "model".into(), |s| s.to_string_lossy().into_owned())
}

fn label(ctx: &Ctx, args: &LabelArgs) -> CliResult<()> {
    let kind = args.policy.unwrap_or(match ctx.cfg.task {
        Task::Classification => PolicyKind::Top,
        Task::Segmentation => PolicyKind::Balanced,
    });
    let policy = policy(kind, args)?;
    let net = read_checkpoint(&args.checkpoint)?;
    let prep = ctx.prepare(ctx.first_seed())?;
    let source = LabelSource::new(model_name(&args.checkpoint), args.iteration);
    let dir = args
        .output
        .clone()
        .unwrap_or_else(|| ctx.out.join("labels"));
    let alpha = (kind != PolicyKind::Threshold).then_some(args.alpha);
    let unlabeled = &prep.split.unlabeled_ids;
    let (kept, total) = match &prep.dataset {
        Dataset::Classification { train, .. } => {
            let preds = predictions(&net, train, unlabeled)?;
            let records = policy.select_records(&preds, &source)?;
            save_pseudo_label_records(&records, &dir, alpha)?;
            (
                records.iter().filter(|r| r.label.is_some()).count(),
                preds.len(),
            )
        }
        Dataset::Segmentation { train, .. } => {
            let probs = probability_maps(&net, train, unlabeled)?;
            let maps = policy.select_maps(&probs, &source)?;
            save_pseudo_label_maps(&maps, &dir, alpha)?;
            let pixels = maps.iter().map(|m| m.height() * m.width()).sum();
            (maps.iter().map(|m| m.labeled_pixels()).sum(), pixels)
        }
    };
    println!("{kept} of {total} pseudo-labeled -> {}", dir.display());
    Ok(())
}

fn eval(ctx: &Ctx, checkpoint: Option<&Path>) -> CliResult<()> {
    let Some(path) = checkpoint else {
        print!("{}", table::records(&ctx.run_log()?));
        return Ok(());
    };
    let net = read_checkpoint(path)?;
    let prep = ctx.prepare(ctx.first_seed())?;
    let mut t = Table::new(&[("checkpoint", 24), ("metric", 12), ("value", 8)]);
    let name = model_name(path);
    match &prep.dataset {
        Dataset::Classification { test, .. } => {
            let (acc, fine) = eval_classifier(&net, test)?;
            t.push(vec![name.clone(), "accuracy".into(), format!("{acc:.4}")]);
            t.push(vec![name, "fine-grained".into(), format!("{fine:.4}")]);
        }
        Dataset::Segmentation { test, .. } => {
            let ids: Vec<usize> = (0..test.len()).collect();
            let miou = eval_segmenter(&net, test, &ids)?;
            t.push(vec![name, "mean-iou".into(), format!("{miou:.4}")]);
        }
    }
    print!("{}", t.render());
    Ok(())
}

fn manifest_format(dir: &Path) -> CliResult<PayloadFormat> {
    let path = dir.join(MANIFEST_FILE);
    let bytes = fs::read(&path).map_err(|e| DmtError::Format {
        file: path.clone(),
        reason: e.to_string(),
    })?;
    let manifest: Manifest = serde_json::from_slice(&bytes)?;
    Ok(manifest.format)
}

/// Error report of a pseudo-label directory against the training labels.
/// Dense maps are scored pixel by pixel.
fn report_for(ctx: &Ctx, dir: &Path) -> CliResult<ErrorReport> {
    let prep = ctx.prepare(ctx.first_seed())?;
    match (&prep.dataset, manifest_format(dir)?) {
        (Dataset::Classification { train, .. }, PayloadFormat::Jsonl) => {
            let (_, records) = load_pseudo_label_records(dir)?;
            let truth: HashMap<String, usize> = (0..train.len())
                .map(|i| (i.to_string(), train.labels[i]))
                .collect();
            pseudo_label_error_stats(&records, &truth)
        }
        (Dataset::Segmentation { train, .. }, PayloadFormat::Dmtl) => {
            let (manifest, maps) = load_pseudo_label_maps(dir)?;
            let source = LabelSource::new(manifest.source_model, manifest.iteration);
            let mut records = Vec::new();
            let mut truth = HashMap::new();
            for m in &maps {
                let index = sample_index(m.sample_id())?;
                for (px, (&l, &c)) in m.labels().iter().zip(m.confidences()).enumerate() {
                    let gt = train.masks[index][px];
                    if l == IGNORE_LABEL || gt == IGNORE_LABEL {
                        continue;
                    }
                    let id = format!("{index}:{px}");
                    truth.insert(id.clone(), gt as usize);
                    records.push(PseudoLabelRecord::new(
                        id,
                        Some(l as usize),
                        c as f64,
                        &source,
                    )?);
                }
            }
            pseudo_label_error_stats(&records, &truth)
        }
        _ => Err(DmtError::Config(format!(
            "{} does not hold pseudo labels for a {} config",
            dir.display(),
            match ctx.cfg.task {
                Task::Classification => "classification",
                Task::Segmentation => "segmentation",
            }
        ))),
    }
}

fn sample_index(id: &str) -> CliResult<usize> {
    id.parse()
        .map_err(|_| DmtError::Validation(format!("sample id {id:?} is not a training index")))
}

fn logged_reports(ctx: &Ctx) -> CliResult<Vec<(String, ErrorReport)>> {
    Ok(ctx
        .run_log()?
        .into_iter()
        .filter_map(|r| {
            let label = format!("{}-s{}-i{}-{}", r.run, r.seed, r.iteration, r.model);
            r.metrics.pseudo_label_errors.map(|e| (label, e))
        })
        .collect())
}

fn stats(ctx: &Ctx, labels: Option<&Path>) -> CliResult<()> {
    let reports = match labels {
        Some(dir) => vec![(model_name(dir), report_for(ctx, dir)?)],
        None => logged_reports(ctx)?,
    };
    if reports.is_empty() {
        return Err(DmtError::Config(
            "the run log holds no pseudo-label error reports; pass --labels".into(),
        ));
    }
    for (name, report) in &reports {
        print!("{}", table::error_report(name, report));
    }
    Ok(())
}

fn plot_cmd(ctx: &Ctx, args: &PlotArgs) -> CliResult<()> {
    let dir = ctx.plots_dir()?;
    match args.kind {
        PlotKind::Quantiles => {
            let (name, report) = match &args.labels {
                Some(d) => (model_name(d), report_for(ctx, d)?),
                None => logged_reports(ctx)?.pop().ok_or_else(|| {
                    DmtError::Config("no pseudo-label error reports to plot; pass --labels".into())
                })?,
            };
            let mut values = vec![report.overall_error_rate.unwrap_or(0.0)];
            values.extend(report.quantiles.iter().map(|q| q.error_rate.unwrap_or(0.0)));
            let top = values.iter().copied().fold(0.0, f64::max);
            let png = dir.join("quantiles.png");
            plot::bars(&png, &values, top * 1.1)?;
            write_json(
                &dir.join("quantiles.json"),
                &json!({
                    "labels": name,
                    "bars": ["all", "top-80%", "top-60%", "top-40%", "top-20%"],
                    "error_rate": values,
                    "y_max": top * 1.1,
                }),
            )?;
            println!("{}", png.display());
        }
        PlotKind::Curves => {
            let records = ctx.run_log()?;
            let mut keys: Vec<(String, u64, String)> = Vec::new();
            for r in &records {
                let k = (r.run.clone(), r.seed, r.model.clone());
                if r.run != "baseline" && !keys.contains(&k) {
                    keys.push(k);
                }
            }
            let value = |r: &RunRecord| r.metrics.headline(ctx.cfg.eval_ema).unwrap_or(f64::NAN);
            let mut series = Vec::new();
            let mut legend = Vec::new();
            for (i, (run, seed, model)) in keys.iter().enumerate() {
                let mut pts: Vec<(f64, f64)> = records
                    .iter()
                    .filter(|r| {
                        r.seed == *seed
                            && r.model == *model
                            && (r.run == *run || (r.run == "baseline" && r.iteration == 0))
                    })
                    .map(|r| (r.iteration as f64, value(r)))
                    .collect();
                pts.sort_by(|a, b| a.0.total_cmp(&b.0));
                pts.dedup_by(|a, b| a.0 == b.0);
                legend.push(json!({
                    "series": format!("{run}-s{seed}-{model}"),
                    "color": plot::color(i).0,
                    "points": pts,
                }));
                series.push(pts);
            }
            let ys: Vec<f64> = series
                .iter()
                .flatten()
                .map(|p| p.1)
                .filter(|y| y.is_finite())
                .collect();
            let lo = ys.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let x_max = series.iter().flatten().map(|p| p.0).fold(0.0, f64::max);
            let pad = ((hi - lo) * 0.1).max(1e-3);
            let png = dir.join("curves.png");
            plot::lines(&png, &series, x_max, (lo - pad, hi + pad))?;
            write_json(
                &dir.join("curves.json"),
                &json!({ "x": "iteration", "y": "headline metric", "y_range": [lo - pad, hi + pad], "series": legend }),
            )?;
            println!("{}", png.display());
        }
        PlotKind::Weights => {
            let (Some(labels), Some(ckpt)) = (&args.labels, &args.checkpoint) else {
                return Err(DmtError::Config(
                    "weights plots need --labels (pseudo-label maps) and --checkpoint".into(),
                ));
            };
            let net: Network = read_checkpoint(ckpt)?;
            let prep = ctx.prepare(ctx.first_seed())?;
            let Dataset::Segmentation { train, .. } = &prep.dataset else {
                return Err(DmtError::Config(
                    "weights plots need a segmentation config".into(),
                ));
            };
            let (_, maps) = load_pseudo_label_maps(labels)?;
            let mut legend = Vec::new();
            for m in maps.iter().take(args.count) {
                let index = sample_index(m.sample_id())?;
                let probs = probability_maps(&net, train, &[index])?;
                let wm = dynamic_weight_map(m, &probs[0], ctx.cfg.gammas())?;
                let png = dir.join(format!("weights-{index}.png"));
                plot::weight_panels(
                    &png,
                    train.images.slice(s![index, .., .., ..]),
                    m.labels(),
                    &wm.weights,
                    4,
                )?;
                let scored: Vec<f64> = m
                    .labels()
                    .iter()
                    .zip(&wm.weights)
                    .filter(|(&l, _)| l != IGNORE_LABEL)
                    .map(|(_, &w)| w)
                    .collect();
                let mean = scored.iter().sum::<f64>() / scored.len().max(1) as f64;
                legend.push(json!({ "image": index, "file": png.file_name().map(|f| f.to_string_lossy().into_owned()), "mean_weight": mean }));
                println!("{}", png.display());
            }
            write_json(
                &dir.join("weights.json"),
                &json!({ "panels": ["image", "pseudo labels", "dynamic weight"], "gammas": [ctx.cfg.gamma1, ctx.cfg.gamma2], "images": legend }),
            )?;
        }
    }
    Ok(())
}

fn write_json(path: &Path, value: &serde_json::Value) -> CliResult<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}
