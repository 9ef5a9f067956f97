use std::collections::HashMap;
use std::time::Instant;

use super::experiment::{
    class_augment, eval_classifier, mixed_composition, predictions, record_outcome,
    supervised_composition, trace_key, train_spec, AblationVariant, Dataset, IterationSchedule,
    Prepared, RunOptions, RunOutput,
};
use super::step::{LossRecipe, StepTrace};
use super::train::{train_classifier, PoolItem, TrainOutcome};
use crate::config::{CbstSelection, ExperimentConfig, TrainingMode};
use crate::data::ClassificationData;
use crate::error::{DmtError, Result};
use crate::init::derive_seed;
use crate::nn::Network;
use crate::pseudo_label::{
    cbst_renormalized_select_records, class_balanced_select_records, pseudo_label_error_stats,
    save_pseudo_label_records, top_fraction_select, LabelSource, PseudoLabelRecord,
};
use crate::runlog::{ModelMetrics, RunRecord, RunStore};

const MODEL: &str = "F";

fn data(prep: &Prepared) -> Result<(&ClassificationData, &ClassificationData)> {
    match &prep.dataset {
        Dataset::Classification { train, test } => Ok((train, test)),
        Dataset::Segmentation { .. } => Err(DmtError::config(
            "task: classification runner given segmentation data",
        )),
    }
}

fn evaluate(
    cfg: &ExperimentConfig,
    net: &Network,
    out: &TrainOutcome,
    test: &ClassificationData,
    m: &mut ModelMetrics,
) -> Result<()> {
    let (acc, fg) = eval_classifier(net, test)?;
    m.accuracy = Some(acc);
    m.fine_grained = Some(fg);
    if let (true, Some(ema)) = (cfg.eval_ema, &out.ema) {
        let (acc, fg) = eval_classifier(ema, test)?;
        m.ema_accuracy = Some(acc);
        m.ema_fine_grained = Some(fg);
    }
    record_outcome(m, out);
    Ok(())
}

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    seed: u64,
    opts: &'a RunOptions,
    traces: Vec<(String, Vec<StepTrace>)>,
}

impl Ctx<'_> {
    fn keep(
        &mut self,
        store: &RunStore,
        run: &str,
        iteration: u32,
        traces: Vec<StepTrace>,
    ) -> Result<()> {
        store.write_traces(run, self.seed, iteration, MODEL, &traces)?;
        if self.opts.keep_traces {
            self.traces.push((trace_key(run, iteration, MODEL), traces));
        }
        Ok(())
    }
}

/// Iteration 0: `F^0` trained on the labeled subset for the baseline
/// epoch budget. Shared by every variant of the same config and seed.
fn baseline(
    ctx: &mut Ctx<'_>,
    prep: &Prepared,
    store: &mut RunStore,
) -> Result<(Network, RunRecord)> {
    if let Some((rec, net)) = store.resume_point("baseline", ctx.seed, 0, MODEL)? {
        log::info!("seed {}: resuming from stored baseline", ctx.seed);
        return Ok((net, rec));
    }
    let cfg = ctx.cfg;
    let (train, test) = data(prep)?;
    let started = Instant::now();
    let labeled = &prep.split.labeled_ids;
    let mut net = Network::new(cfg.architecture(), derive_seed(ctx.seed, "model", 0));
    let spec = train_spec(
        cfg,
        cfg.resolved_baseline_epochs()? as usize,
        supervised_composition(cfg, labeled.len())?,
        LossRecipe::Unit,
        false,
        ctx.opts,
    );
    let out = train_classifier(
        &mut net,
        train,
        labeled,
        &[],
        &class_augment(cfg),
        &spec,
        derive_seed(ctx.seed, "train-F", 0),
    )?;
    let mut m = ModelMetrics::default();
    evaluate(cfg, &net, &out, test, &mut m)?;
    let rec = store.commit(
        "baseline",
        ctx.seed,
        0,
        MODEL,
        m,
        &net,
        started.elapsed().as_secs_f64(),
    )?;
    ctx.keep(store, "baseline", 0, out.traces)?;
    Ok((net, rec))
}

/// Argmax pseudo label for every unlabeled sample, as the error report
/// sees them.
fn full_pool_records(
    preds: &[crate::pseudo_label::Prediction],
    source: &LabelSource,
) -> Result<Vec<PseudoLabelRecord>> {
    preds
        .iter()
        .map(|p| {
            PseudoLabelRecord::new(
                p.sample_id.clone(),
                Some(p.probs.argmax()),
                p.probs.confidence(),
                source,
            )
        })
        .collect()
}

/// Selected records as training items in sample order, so the batch
/// stream does not depend on how the selection ranked them.
fn pool_items(selected: &[PseudoLabelRecord]) -> Result<Vec<PoolItem>> {
    let mut pool = Vec::with_capacity(selected.len());
    for r in selected {
        let Some(label) = r.label else { continue };
        let index = r.sample_id.parse::<usize>().map_err(|_| {
            DmtError::validation(format!("sample id {:?} is not an index", r.sample_id))
        })?;
        pool.push(PoolItem {
            index,
            label: Some(label),
            confidence: r.confidence,
        });
    }
    pool.sort_by_key(|p| p.index);
    Ok(pool)
}

fn select(
    cfg: &ExperimentConfig,
    variant: AblationVariant,
    preds: &[crate::pseudo_label::Prediction],
    alpha: f64,
    source: &LabelSource,
) -> Result<Vec<PseudoLabelRecord>> {
    match (variant, cfg.cbst_selection) {
        (AblationVariant::Cbst, CbstSelection::Direct) => {
            class_balanced_select_records(preds, alpha, source)
        }
        (AblationVariant::Cbst, CbstSelection::Renormalized) => {
            cbst_renormalized_select_records(preds, alpha, source)
        }
        _ => top_fraction_select(preds, alpha, source),
    }
}

/// Iterative offline pseudo-labeling for classification: `F^0` on labeled
/// data, then one round per curriculum fraction in which `F^{i-1}` labels
/// its most confident unlabeled samples and `F^i` trains on both pools.
pub fn run_dmt_classification(
    cfg: &ExperimentConfig,
    variant: AblationVariant,
    seed: u64,
    prep: &Prepared,
    store: &mut RunStore,
    opts: &RunOptions,
) -> Result<RunOutput> {
    let (train, test) = data(prep)?;
    let mut ctx = Ctx {
        cfg,
        seed,
        opts,
        traces: Vec::new(),
    };
    let (f0, base_rec) = baseline(&mut ctx, prep, store)?;
    if opts.baseline_only {
        return Ok(RunOutput {
            variant: None,
            seed,
            final_metrics: base_rec.metrics.clone(),
            baseline: vec![base_rec],
            iterations: Vec::new(),
            final_model: f0,
            final_label: MODEL.into(),
            traces: ctx.traces,
        });
    }
    if variant == AblationVariant::OnlineSt {
        return online(ctx, prep, store, f0, base_rec);
    }
    if variant == AblationVariant::CurriculumLabeling && cfg.training_mode == TrainingMode::FineTune
    {
        log::info!("curriculum labeling re-trains from scratch each iteration");
    }
    let schedule = IterationSchedule::new(cfg.alphas.clone())?;
    let run = variant.name();
    let unlabeled = &prep.split.unlabeled_ids;
    let truth: HashMap<String, usize> = unlabeled
        .iter()
        .map(|&i| (i.to_string(), train.labels[i]))
        .collect();
    let recipe = variant.recipe(cfg);
    let retrain = match variant {
        AblationVariant::Dst => false,
        AblationVariant::CurriculumLabeling => true,
        _ => cfg.training_mode == TrainingMode::ReTrain,
    };

    let mut prev = f0;
    let mut records = Vec::new();
    for (i, &alpha) in schedule.alphas().iter().enumerate() {
        let iteration = i as u32 + 1;
        if let Some((rec, net)) = store.resume_point(run, seed, iteration, MODEL)? {
            prev = net;
            records.push(rec);
            continue;
        }
        let started = Instant::now();
        let source = LabelSource::new(format!("{MODEL}{}", iteration - 1), iteration);
        let preds = predictions(&prev, train, unlabeled)?;
        let selected = select(cfg, variant, &preds, alpha, &source)?;
        if let Some(dir) = store.pseudo_dir(run, seed, iteration, MODEL) {
            save_pseudo_label_records(&selected, &dir, Some(alpha))?;
        }
        let pool = pool_items(&selected)?;

        let mut net = if retrain {
            Network::new(
                cfg.architecture(),
                derive_seed(seed, "model", iteration as u64),
            )
        } else {
            prev.clone()
        };
        let spec = train_spec(
            cfg,
            cfg.epochs_per_iteration,
            mixed_composition(cfg)?,
            recipe,
            retrain && variant.scheduled_gamma(),
            opts,
        );
        let out = train_classifier(
            &mut net,
            train,
            &prep.split.labeled_ids,
            &pool,
            &class_augment(cfg),
            &spec,
            derive_seed(seed, "train-F", iteration as u64),
        )?;

        let mut m = ModelMetrics {
            alpha: Some(alpha),
            labeler: Some(source.model.clone()),
            selected: pool.len() as u64,
            pool: unlabeled.len() as u64,
            pseudo_label_errors: Some(pseudo_label_error_stats(
                &full_pool_records(&preds, &source)?,
                &truth,
            )?),
            ..Default::default()
        };
        evaluate(cfg, &net, &out, test, &mut m)?;
        let rec = store.commit(
            run,
            seed,
            iteration,
            MODEL,
            m,
            &net,
            started.elapsed().as_secs_f64(),
        )?;
        ctx.keep(store, run, iteration, out.traces)?;
        records.push(rec);
        prev = net;
    }
    let last = records.last().expect("schedule is non-empty").clone();
    Ok(RunOutput {
        variant: Some(variant),
        seed,
        baseline: vec![base_rec],
        iterations: records,
        final_model: prev,
        final_label: MODEL.into(),
        final_metrics: last.metrics,
        traces: ctx.traces,
    })
}

/// Online self-training from `F^0`: every step labels the unlabeled part
/// of the batch with the live model, keeping predictions above the
/// threshold.
fn online(
    mut ctx: Ctx<'_>,
    prep: &Prepared,
    store: &mut RunStore,
    f0: Network,
    base_rec: RunRecord,
) -> Result<RunOutput> {
    let cfg = ctx.cfg;
    let seed = ctx.seed;
    let run = AblationVariant::OnlineSt.name();
    let (train, test) = data(prep)?;
    let (net, rec) = match store.resume_point(run, seed, 1, MODEL)? {
        Some((rec, net)) => (net, rec),
        None => {
            let started = Instant::now();
            let pool: Vec<PoolItem> = prep
                .split
                .unlabeled_ids
                .iter()
                .map(|&index| PoolItem {
                    index,
                    label: None,
                    confidence: 0.0,
                })
                .collect();
            let mut net = f0;
            let spec = train_spec(
                cfg,
                cfg.online_epochs,
                mixed_composition(cfg)?,
                AblationVariant::OnlineSt.recipe(cfg),
                false,
                ctx.opts,
            );
            let out = train_classifier(
                &mut net,
                train,
                &prep.split.labeled_ids,
                &pool,
                &class_augment(cfg),
                &spec,
                derive_seed(seed, "train-F", 1),
            )?;
            let mut m = ModelMetrics {
                alpha: Some(1.0),
                labeler: Some("live".into()),
                pool: pool.len() as u64,
                ..Default::default()
            };
            evaluate(cfg, &net, &out, test, &mut m)?;
            m.selected = out.cases.agreement;
            let rec = store.commit(
                run,
                seed,
                1,
                MODEL,
                m,
                &net,
                started.elapsed().as_secs_f64(),
            )?;
            ctx.keep(store, run, 1, out.traces)?;
            (net, rec)
        }
    };
    Ok(RunOutput {
        variant: Some(AblationVariant::OnlineSt),
        seed,
        baseline: vec![base_rec],
        final_metrics: rec.metrics.clone(),
        iterations: vec![rec],
        final_model: net,
        final_label: MODEL.into(),
        traces: ctx.traces,
    })
}
