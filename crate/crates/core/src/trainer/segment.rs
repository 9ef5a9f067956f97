use std::time::Instant;

use super::experiment::{
    eval_segmenter, mixed_composition, probability_maps, record_outcome, seg_augment,
    supervised_composition, trace_key, train_spec, AblationVariant, Dataset, IterationSchedule,
    Prepared, RunOptions, RunOutput,
};
use super::step::{LossRecipe, StepTrace};
use super::train::{train_segmenter, SegPoolItem, TrainOutcome};
use crate::config::{CbstSelection, ExperimentConfig, InitPolicyKind, Pairing};
use crate::data::SegmentationData;
use crate::error::{DmtError, Result};
use crate::init::{derive_seed, init_model_pair, CheckpointRegistry};
use crate::nn::{read_checkpoint, Network};
use crate::pseudo_label::{
    cbst_renormalized_select, class_balanced_select, save_pseudo_label_maps, LabelSource,
    PseudoLabelMap,
};
use crate::runlog::{ModelMetrics, RunRecord, RunStore};

fn data(prep: &Prepared) -> Result<(&SegmentationData, &SegmentationData)> {
    match &prep.dataset {
        Dataset::Segmentation { train, test } => Ok((train, test)),
        Dataset::Classification { .. } => Err(DmtError::config(
            "task: segmentation runner given classification data",
        )),
    }
}

/// Result of training one model for one iteration, before it is committed.
struct Trained {
    net: Network,
    metrics: ModelMetrics,
    traces: Vec<StepTrace>,
    seconds: f64,
    maps: Vec<PseudoLabelMap>,
}

fn evaluate(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    net: &Network,
    out: &TrainOutcome,
    m: &mut ModelMetrics,
) -> Result<()> {
    let (train, test) = data(prep)?;
    let test_ids: Vec<usize> = (0..test.len()).collect();
    m.mean_iou = Some(eval_segmenter(net, test, &test_ids)?);
    if let (true, Some(ema)) = (cfg.eval_ema, &out.ema) {
        m.ema_mean_iou = Some(eval_segmenter(ema, test, &test_ids)?);
    }
    let val = if prep.split.valtiny_ids.is_empty() {
        &prep.split.labeled_ids
    } else {
        &prep.split.valtiny_ids
    };
    m.valtiny_mean_iou = Some(eval_segmenter(net, train, val)?);
    record_outcome(m, out);
    Ok(())
}

fn registry(cfg: &ExperimentConfig) -> Result<CheckpointRegistry> {
    let mut reg = CheckpointRegistry::new();
    if cfg.init_policy == InitPolicyKind::Pretrained {
        for path in &cfg.init_weights {
            reg.insert(path.clone(), read_checkpoint(std::path::Path::new(path))?);
        }
    }
    Ok(reg)
}

fn select(
    cfg: &ExperimentConfig,
    variant: AblationVariant,
    maps: &[crate::prob::ProbabilityMap],
    alpha: f64,
    source: &LabelSource,
) -> Result<Vec<PseudoLabelMap>> {
    match (variant, cfg.cbst_selection) {
        (AblationVariant::Cbst, CbstSelection::Renormalized) => {
            cbst_renormalized_select(maps, alpha, source)
        }
        _ => class_balanced_select(maps, alpha, source),
    }
}

fn pool<'a>(maps: &'a [PseudoLabelMap]) -> Result<Vec<SegPoolItem<'a>>> {
    let mut items = Vec::with_capacity(maps.len());
    for m in maps.iter().filter(|m| m.labeled_pixels() > 0) {
        let index = m.sample_id().parse::<usize>().map_err(|_| {
            DmtError::validation(format!("sample id {:?} is not an index", m.sample_id()))
        })?;
        items.push(SegPoolItem {
            index,
            map: Some(m),
        });
    }
    items.sort_by_key(|p| p.index);
    Ok(items)
}

/// Supervised iteration 0 of one model on its labeled subset.
fn train_initial(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    seed: u64,
    name: &str,
    mut net: Network,
    subset: &[usize],
    opts: &RunOptions,
) -> Result<Trained> {
    let started = Instant::now();
    let (train, _) = data(prep)?;
    let spec = train_spec(
        cfg,
        cfg.resolved_baseline_epochs()? as usize,
        supervised_composition(cfg, subset.len())?,
        LossRecipe::Unit,
        false,
        opts,
    );
    let out = train_segmenter(
        &mut net,
        train,
        subset,
        &[],
        &seg_augment(cfg),
        &spec,
        derive_seed(seed, &format!("train-{name}"), 0),
    )?;
    let mut metrics = ModelMetrics::default();
    evaluate(cfg, prep, &net, &out, &mut metrics)?;
    Ok(Trained {
        net,
        metrics,
        traces: out.traces,
        seconds: started.elapsed().as_secs_f64(),
        maps: Vec::new(),
    })
}

/// Fine-tunes `student` on labeled data plus pseudo labels produced by the
/// frozen `labeler`.
#[allow(clippy::too_many_arguments)]
fn train_round(
    cfg: &ExperimentConfig,
    variant: AblationVariant,
    prep: &Prepared,
    seed: u64,
    iteration: u32,
    alpha: f64,
    name: &str,
    student: &Network,
    labeler: (&str, &Network),
    opts: &RunOptions,
) -> Result<Trained> {
    let started = Instant::now();
    let (train, _) = data(prep)?;
    let unlabeled = &prep.split.unlabeled_ids;
    let source = LabelSource::new(format!("{}{}", labeler.0, iteration - 1), iteration);
    let probs = probability_maps(labeler.1, train, unlabeled)?;
    let maps = select(cfg, variant, &probs, alpha, &source)?;
    drop(probs);
    let items = pool(&maps)?;
    let mut net = student.clone();
    let spec = train_spec(
        cfg,
        cfg.epochs_per_iteration,
        mixed_composition(cfg)?,
        variant.recipe(cfg),
        // fine-tuning keeps gamma constant
        false,
        opts,
    );
    let out = train_segmenter(
        &mut net,
        train,
        &prep.split.labeled_ids,
        &items,
        &seg_augment(cfg),
        &spec,
        derive_seed(seed, &format!("train-{name}"), iteration as u64),
    )?;
    let mut metrics = ModelMetrics {
        alpha: Some(alpha),
        labeler: Some(source.model.clone()),
        selected: maps.iter().map(|m| m.labeled_pixels() as u64).sum(),
        pool: (unlabeled.len() * train.height() * train.width()) as u64,
        ..Default::default()
    };
    evaluate(cfg, prep, &net, &out, &mut metrics)?;
    drop(items);
    Ok(Trained {
        net,
        metrics,
        traces: out.traces,
        seconds: started.elapsed().as_secs_f64(),
        maps,
    })
}

/// Online self-training of one model from its iteration-0 state.
fn train_online(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    seed: u64,
    student: &Network,
    opts: &RunOptions,
) -> Result<Trained> {
    let started = Instant::now();
    let (train, _) = data(prep)?;
    let items: Vec<SegPoolItem<'_>> = prep
        .split
        .unlabeled_ids
        .iter()
        .map(|&index| SegPoolItem { index, map: None })
        .collect();
    let mut net = student.clone();
    let spec = train_spec(
        cfg,
        cfg.online_epochs,
        mixed_composition(cfg)?,
        AblationVariant::OnlineSt.recipe(cfg),
        false,
        opts,
    );
    let out = train_segmenter(
        &mut net,
        train,
        &prep.split.labeled_ids,
        &items,
        &seg_augment(cfg),
        &spec,
        derive_seed(seed, "train-A", 1),
    )?;
    let mut metrics = ModelMetrics {
        alpha: Some(1.0),
        labeler: Some("live".into()),
        selected: out.cases.agreement,
        pool: (items.len() * train.height() * train.width()) as u64,
        ..Default::default()
    };
    evaluate(cfg, prep, &net, &out, &mut metrics)?;
    Ok(Trained {
        net,
        metrics,
        traces: out.traces,
        seconds: started.elapsed().as_secs_f64(),
        maps: Vec::new(),
    })
}

/// Runs the jobs in order, or on scoped threads when `parallel`. Each job
/// reads only frozen inputs, so both schedules give the same results.
fn run_jobs<'a, F>(parallel: bool, jobs: Vec<F>) -> Vec<Result<Trained>>
where
    F: FnOnce() -> Result<Trained> + Send + 'a,
{
    if parallel && jobs.len() > 1 {
        std::thread::scope(|s| {
            let handles: Vec<_> = jobs.into_iter().map(|j| s.spawn(j)).collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("training thread panicked"))
                .collect()
        })
    } else {
        jobs.into_iter().map(|j| j()).collect()
    }
}

struct Committer<'a> {
    seed: u64,
    opts: &'a RunOptions,
    traces: Vec<(String, Vec<StepTrace>)>,
}

impl Committer<'_> {
    fn commit(
        &mut self,
        store: &mut RunStore,
        run: &str,
        iteration: u32,
        name: &str,
        t: Trained,
        alpha: Option<f64>,
    ) -> Result<(RunRecord, Network)> {
        if let Some(dir) = store.pseudo_dir(run, self.seed, iteration, name) {
            if !t.maps.is_empty() {
                save_pseudo_label_maps(&t.maps, &dir, alpha)?;
            }
        }
        let rec = store.commit(
            run, self.seed, iteration, name, t.metrics, &t.net, t.seconds,
        )?;
        store.write_traces(run, self.seed, iteration, name, &t.traces)?;
        if self.opts.keep_traces {
            self.traces
                .push((trace_key(run, iteration, name), t.traces));
        }
        Ok((rec, t.net))
    }
}

/// Iterative mutual fine-tuning for segmentation. Two differently
/// initialized models are trained on labeled data; in every later
/// iteration each one is fine-tuned on class-balanced pseudo labels from
/// the frozen previous checkpoint of its partner (or of itself, with self
/// pairing). The better final model on valtiny is returned. Single-model
/// variants run the same loop with model `A` only.
pub fn run_dmt_segmentation(
    cfg: &ExperimentConfig,
    variant: AblationVariant,
    seed: u64,
    prep: &Prepared,
    store: &mut RunStore,
    opts: &RunOptions,
) -> Result<RunOutput> {
    data(prep)?;
    if variant == AblationVariant::CurriculumLabeling {
        return Err(DmtError::config(
            "variant: curriculum labeling ranks whole samples and applies to classification only",
        ));
    }
    let paired = matches!(
        variant,
        AblationVariant::Dmt | AblationVariant::DmtNaive | AblationVariant::DmtFlip
    );
    let names: &[&str] = if paired { &["A", "B"] } else { &["A"] };
    let mut committer = Committer {
        seed,
        opts,
        traces: Vec::new(),
    };

    // iteration 0
    let init = init_model_pair(
        &cfg.init_policy_for(seed)?,
        &cfg.architecture(),
        &prep.split.labeled_ids,
        &registry(cfg)?,
    )?;
    let mut prev: Vec<Network> = Vec::new();
    let mut baseline = Vec::new();
    for &name in names {
        if let Some((rec, net)) = store.resume_point("baseline", seed, 0, name)? {
            prev.push(net);
            baseline.push(rec);
            continue;
        }
        let (net, subset) = if name == "A" {
            (init.model_a.clone(), &init.subset_a)
        } else {
            (init.model_b.clone(), &init.subset_b)
        };
        let t = train_initial(cfg, prep, seed, name, net, subset, opts)?;
        let (rec, net) = committer.commit(store, "baseline", 0, name, t, None)?;
        prev.push(net);
        baseline.push(rec);
    }

    let run = variant.name();
    let mut last: Vec<RunRecord> = baseline.clone();
    let mut iterations = Vec::new();
    if !opts.baseline_only {
        let alphas = if variant == AblationVariant::OnlineSt {
            vec![1.0]
        } else {
            IterationSchedule::new(cfg.alphas.clone())?
                .alphas()
                .to_vec()
        };
        for (i, &alpha) in alphas.iter().enumerate() {
            let iteration = i as u32 + 1;
            let mut done: Vec<Option<(RunRecord, Network)>> = names
                .iter()
                .map(|n| store.resume_point(run, seed, iteration, n))
                .collect::<Result<_>>()?;
            let frozen = &prev;
            let jobs: Vec<_> = names
                .iter()
                .enumerate()
                .filter(|(k, _)| done[*k].is_none())
                .map(|(k, &name)| {
                    let labeler = match (cfg.pairing, names.len()) {
                        (Pairing::Cross, 2) => 1 - k,
                        _ => k,
                    };
                    move || -> Result<Trained> {
                        if variant == AblationVariant::OnlineSt {
                            train_online(cfg, prep, seed, &frozen[k], opts)
                        } else {
                            train_round(
                                cfg,
                                variant,
                                prep,
                                seed,
                                iteration,
                                alpha,
                                name,
                                &frozen[k],
                                (names[labeler], &frozen[labeler]),
                                opts,
                            )
                        }
                    }
                })
                .collect();
            let pending: Vec<usize> = (0..names.len()).filter(|&k| done[k].is_none()).collect();
            let results = run_jobs(cfg.parallel, jobs);
            for (k, res) in pending.into_iter().zip(results) {
                done[k] =
                    Some(committer.commit(store, run, iteration, names[k], res?, Some(alpha))?);
            }
            let (recs, nets): (Vec<_>, Vec<_>) = done
                .into_iter()
                .map(|d| d.expect("every model trained"))
                .unzip();
            prev = nets;
            iterations.extend(recs.iter().cloned());
            last = recs;
        }
    }

    // best of the final models on valtiny; ties keep A
    let mut best = 0;
    for k in 1..last.len() {
        if last[k].metrics.valtiny_mean_iou > last[best].metrics.valtiny_mean_iou {
            best = k;
        }
    }
    Ok(RunOutput {
        variant: (!opts.baseline_only).then_some(variant),
        seed,
        baseline,
        iterations,
        final_label: names[best].to_string(),
        final_metrics: last[best].metrics.clone(),
        final_model: prev.swap_remove(best),
        traces: committer.traces,
    })
}
