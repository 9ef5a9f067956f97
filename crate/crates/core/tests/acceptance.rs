//! Acceptance checks, one line per criterion.
//!
//! Runs with its own harness so every line reaches the `cargo test` output.
//! Criteria that need CIFAR-10 read the binaries from `DMT_DATA_DIR`; without
//! them they report FAIL as not evaluated and only fail the process when
//! `DMT_ACCEPTANCE_STRICT` is set.

use std::collections::HashMap;
use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dmt_core::config::Pairing;
use dmt_core::init::{derive_seed, difference_maximized_sampling};
use dmt_core::loss::{
    combined_loss_from_logits, combined_loss_logit_grad, gamma_schedule, LogitSample,
    WeightGradient,
};
use dmt_core::pseudo_label::{
    class_balanced_select, pseudo_label_error_stats, renormalize_with_thresholds,
    top_fraction_select, LabelSource, Prediction,
};
use dmt_core::trainer::{
    predictions, probability_maps, train_segmenter, Dataset, LossRecipe, SegAugment, SegPoolItem,
    StepTrace, TrainSpec,
};
use dmt_core::{
    accuracy, baseline_epochs, dynamic_weight, dynamic_weight_map, fine_grained_score, mean_iou,
    run_ablation, AblationVariant, BatchComposition, ConfusionMatrix, ExperimentConfig, GammaPair,
    Prepared, ProbabilityMap, ProbabilityVector, PseudoLabelMap, PseudoLabelRecord, Result,
    RunOptions, RunOutput, RunStore, IGNORE_LABEL,
};

const WEIGHT_TUPLES: usize = 10_000;
const WEIGHT_REL_TOL: f64 = 1e-12;
const WEIGHT_SECONDS: f64 = 10.0;
const GRAD_REL_TOL: f64 = 1e-4;
const GRAD_STEP: f64 = 1e-6;
const SELECTION_INSTANCES: usize = 100;
const OVERLAP_DRAWS: usize = 1_000;
const GAMMA_END_TOL: f64 = 1e-12;
const GAMMA_START_REL_TOL: f64 = 1e-9;
const GAMMA_GRID: u64 = 100;
const FINE_GRAINED_SETS: usize = 1_000;
const MOONS_MARGIN: f64 = 0.03;
const MOONS_SECONDS_PER_SEED: f64 = 180.0;
const CIFAR_MARGIN: f64 = 0.03;
const CORRUPT_FRACTION: f64 = 0.2;
const TRACE_REL_TOL: f64 = 1e-9;

struct Outcome {
    pass: bool,
    evaluated: bool,
    detail: String,
}

impl Outcome {
    fn check(pass: bool, detail: String) -> Self {
        Outcome {
            pass,
            evaluated: true,
            detail,
        }
    }

    fn not_evaluated(detail: String) -> Self {
        Outcome {
            pass: false,
            evaluated: false,
            detail,
        }
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

fn random_simplex(rng: &mut ChaCha8Rng, classes: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..classes)
        .map(|_| -rng.random::<f64>().max(1e-300).ln())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / total).collect()
}

// ---------------------------------------------------------------- 1

fn oracle_weight(y_a: usize, c_a: f64, p_b: &[f64], g1: f64, g2: f64) -> f64 {
    let mut y_b = 0;
    for k in 1..p_b.len() {
        if p_b[k] > p_b[y_b] {
            y_b = k;
        }
    }
    if y_b == y_a {
        return p_b[y_a].powf(g1);
    }
    if c_a >= p_b[y_b] {
        p_b[y_a].powf(g2)
    } else {
        0.0
    }
}

fn weight_oracle() -> Result<Outcome> {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    let mut zeros = 0;
    let mut mismatches = 0;
    for i in 0..WEIGHT_TUPLES {
        let classes = rng.random_range(2..=12);
        let p = random_simplex(&mut rng, classes);
        let y_a = rng.random_range(0..classes);
        let max_p = p.iter().copied().fold(0.0, f64::max);
        // every fifth tuple sits exactly on the c_A = max p_B boundary
        let c_a = if i % 5 == 0 {
            max_p
        } else {
            rng.random_range(1.0 / classes as f64..=1.0)
        };
        let g1 = rng.random_range(0.0..8.0);
        let g2 = rng.random_range(0.0..8.0);
        let got = dynamic_weight(
            y_a,
            c_a,
            &ProbabilityVector::new(p.clone())?,
            GammaPair::new(g1, g2)?,
        )?
        .weight;
        let want = oracle_weight(y_a, c_a, &p, g1, g2);
        if want == 0.0 {
            zeros += 1;
            if got.to_bits() != want.to_bits() {
                mismatches += 1;
            }
        } else {
            let e = rel_err(got, want);
            worst = worst.max(e);
            if e > WEIGHT_REL_TOL {
                mismatches += 1;
            }
        }
    }
    let secs = started.elapsed().as_secs_f64();
    Ok(Outcome::check(
        mismatches == 0 && secs < WEIGHT_SECONDS,
        format!(
            "{WEIGHT_TUPLES} tuples ({zeros} zero-weight), {mismatches} mismatches, max rel err {worst:.1e} (tol {WEIGHT_REL_TOL:.0e}), {secs:.2}s (limit {WEIGHT_SECONDS}s)"
        ),
    ))
}

// ---------------------------------------------------------------- 2

fn gradient_check() -> Result<Outcome> {
    let gammas = GammaPair::new(2.0, 3.0)?;
    // labeled, agreement, negative disagreement, positive disagreement
    let batch = vec![
        LogitSample::Labeled {
            label: 2,
            logits: vec![0.3, -1.2, 0.8],
        },
        LogitSample::Pseudo {
            label: 0,
            confidence: 0.7,
            logits: vec![1.5, 0.2, -0.4],
        },
        LogitSample::Pseudo {
            label: 1,
            confidence: 0.9,
            logits: vec![1.0, 0.1, -0.3],
        },
        LogitSample::Pseudo {
            label: 2,
            confidence: 0.4,
            logits: vec![-0.5, 2.0, 0.1],
        },
    ];
    let analytic = combined_loss_logit_grad(&batch, gammas, WeightGradient::Full)?;
    let mut worst = 0.0f64;
    for (s, row) in analytic.iter().enumerate() {
        for (k, &a) in row.iter().enumerate() {
            let shifted = |h: f64| {
                let mut b = batch.clone();
                match &mut b[s] {
                    LogitSample::Labeled { logits, .. } | LogitSample::Pseudo { logits, .. } => {
                        logits[k] += h
                    }
                }
                combined_loss_from_logits(&b, gammas)
            };
            let numeric = (shifted(GRAD_STEP)? - shifted(-GRAD_STEP)?) / (2.0 * GRAD_STEP);
            let e = if a == 0.0 && numeric.abs() < 1e-10 {
                0.0
            } else {
                rel_err(a, numeric)
            };
            worst = worst.max(e);
        }
    }
    Ok(Outcome::check(
        worst < GRAD_REL_TOL,
        format!(
            "3 classes x 4 samples, one per case, max rel err {worst:.2e} (tol {GRAD_REL_TOL:.0e})"
        ),
    ))
}

// ---------------------------------------------------------------- 3

fn renormalization_fixture() -> Result<Outcome> {
    let (class, value) = renormalize_with_thresholds(&[0.6, 0.4], &[0.61, 0.39]);
    Ok(Outcome::check(
        class == 1,
        format!("[0.6, 0.4] / [0.61, 0.39] -> class {class} (value {value:.4})"),
    ))
}

// ---------------------------------------------------------------- 4

/// Probabilities built from small integer weights so confidence ties are common.
fn quantized_simplex(rng: &mut ChaCha8Rng, classes: usize) -> Vec<f64> {
    let w: Vec<u32> = (0..classes).map(|_| rng.random_range(1..=4)).collect();
    let total: u32 = w.iter().sum();
    w.into_iter().map(|x| x as f64 / total as f64).collect()
}

fn first_max<T: PartialOrd + Copy>(v: &[T]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

fn sort_desc_then_index(v: &mut [(f64, usize)]) {
    v.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
}

fn selection_oracles() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let source = LabelSource::new("A0", 1);
    let mut bad_top = 0;
    for _ in 0..SELECTION_INSTANCES {
        let n = rng.random_range(1..200);
        let classes = rng.random_range(2..8);
        let twentieths = rng.random_range(1..=20u64);
        let alpha = twentieths as f64 / 20.0;
        let preds: Vec<Prediction> = (0..n)
            .map(|i| {
                Ok(Prediction {
                    sample_id: format!("s{i}"),
                    probs: ProbabilityVector::new(quantized_simplex(&mut rng, classes))?,
                })
            })
            .collect::<Result<_>>()?;
        let got = top_fraction_select(&preds, alpha, &source)?;

        let mut order: Vec<(f64, usize)> = preds
            .iter()
            .enumerate()
            .map(|(i, p)| (p.probs.as_slice().iter().copied().fold(0.0, f64::max), i))
            .collect();
        sort_desc_then_index(&mut order);
        let k = (twentieths as usize * n) / 20;
        let want: Vec<(String, usize)> = order[..k]
            .iter()
            .map(|&(_, i)| (format!("s{i}"), first_max(preds[i].probs.as_slice())))
            .collect();
        let got: Vec<(String, usize)> = got
            .iter()
            .map(|r| (r.sample_id.clone(), r.label.unwrap_or(usize::MAX)))
            .collect();
        if got != want {
            bad_top += 1;
        }
    }

    let mut bad_balanced = 0;
    let (h, w, classes) = (16, 16, 3);
    for _ in 0..SELECTION_INSTANCES {
        let images = rng.random_range(1..=4);
        let twentieths = rng.random_range(1..=20u64);
        let alpha = twentieths as f64 / 20.0;
        let maps: Vec<ProbabilityMap> = (0..images)
            .map(|m| {
                let mut data = vec![0f32; classes * h * w];
                for px in 0..h * w {
                    let p = quantized_simplex(&mut rng, classes);
                    for c in 0..classes {
                        data[c * h * w + px] = p[c] as f32;
                    }
                }
                ProbabilityMap::new(format!("m{m}"), classes, h, w, data)
            })
            .collect::<Result<_>>()?;
        let got = class_balanced_select(&maps, alpha, &source)?;

        let mut per_class: Vec<Vec<(f64, usize)>> = vec![Vec::new(); classes];
        let mut argmax = Vec::new();
        for m in &maps {
            for px in 0..h * w {
                let p: Vec<f32> = (0..classes).map(|c| m.data()[c * h * w + px]).collect();
                let c = first_max(&p);
                per_class[c].push((p[c] as f64, argmax.len()));
                argmax.push(c as u8);
            }
        }
        let mut want = vec![IGNORE_LABEL; argmax.len()];
        for mut members in per_class {
            let k = (twentieths as usize * members.len()) / 20;
            sort_desc_then_index(&mut members);
            for &(_, g) in &members[..k] {
                want[g] = argmax[g];
            }
        }
        let got: Vec<u8> = got.iter().flat_map(|m| m.labels().to_vec()).collect();
        if got != want {
            bad_balanced += 1;
        }
    }
    Ok(Outcome::check(
        bad_top == 0 && bad_balanced == 0,
        format!(
            "top-fraction {}/{SELECTION_INSTANCES} match, class-balanced 3x16x16 maps {}/{SELECTION_INSTANCES} match",
            SELECTION_INSTANCES - bad_top,
            SELECTION_INSTANCES - bad_balanced
        ),
    ))
}

// ---------------------------------------------------------------- 5

fn overlap_property() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut bad = 0;
    for draw in 0..OVERLAP_DRAWS {
        let n = rng.random_range(1..=500);
        let k = rng.random_range(1..=n);
        let ids: Vec<usize> = (0..n).collect();
        let (a, b) = difference_maximized_sampling(&ids, k, draw as u64)?;
        let mut in_a = vec![false; n];
        for &i in &a {
            in_a[i] = true;
        }
        let overlap = b.iter().filter(|&&i| in_a[i]).count();
        let distinct_a = in_a.iter().filter(|&&x| x).count();
        let mut in_b = vec![false; n];
        for &i in &b {
            in_b[i] = true;
        }
        let distinct_b = in_b.iter().filter(|&&x| x).count();
        let expected = (2 * k).saturating_sub(n);
        if overlap != expected || distinct_a != k || distinct_b != k {
            bad += 1;
        }
    }
    Ok(Outcome::check(
        bad == 0,
        format!("{} / {OVERLAP_DRAWS} draws have |A|=|B|=k and overlap max(0, 2k-n), the fewest any pair of k-subsets can share", OVERLAP_DRAWS - bad),
    ))
}

// ---------------------------------------------------------------- 6

fn gamma_endpoints() -> Result<Outcome> {
    let t_max = 99 * 1000;
    let mut end_err = 0.0f64;
    let mut start_err = 0.0f64;
    let mut decreasing = true;
    for gmax in [0.5, 1.0, 4.0, 5.0] {
        end_err = end_err.max((gamma_schedule(t_max, t_max, gmax)? - gmax).abs());
        start_err = start_err.max(rel_err(gamma_schedule(0, t_max, gmax)?, gmax * 5f64.exp()));
        let grid: Vec<f64> = (0..GAMMA_GRID)
            .map(|i| gamma_schedule(i * t_max / (GAMMA_GRID - 1), t_max, gmax))
            .collect::<Result<_>>()?;
        decreasing &= grid.windows(2).all(|w| w[1] < w[0]);
    }
    Ok(Outcome::check(
        end_err <= GAMMA_END_TOL && start_err <= GAMMA_START_REL_TOL && decreasing,
        format!(
            "end abs err {end_err:.1e} (tol {GAMMA_END_TOL:.0e}), start rel err {start_err:.1e} (tol {GAMMA_START_REL_TOL:.0e}), strictly decreasing on {GAMMA_GRID} points: {decreasing}"
        ),
    ))
}

// ---------------------------------------------------------------- 7

fn metric_fixtures() -> Result<Outcome> {
    let miou = mean_iou(&ConfusionMatrix::from_rows(&[vec![3, 1], vec![1, 3]])?)?;
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let mut violations = 0;
    for _ in 0..FINE_GRAINED_SETS {
        let n = rng.random_range(1..50);
        let classes = rng.random_range(2..10);
        let preds: Vec<ProbabilityVector> = (0..n)
            .map(|_| ProbabilityVector::new(random_simplex(&mut rng, classes)))
            .collect::<Result<_>>()?;
        let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        if fine_grained_score(&preds, &truth)? > accuracy(&preds, &truth)? {
            violations += 1;
        }
    }
    let e30 = baseline_epochs(1.0 / 8.0, 30)?;
    let e60 = baseline_epochs(1.0 / 8.0, 60)?;
    Ok(Outcome::check(
        miou == 0.6 && violations == 0 && e30 == 85 && e60 == 170,
        format!(
            "mIoU [[3,1],[1,3]] = {miou}, fine-grained > accuracy in {violations}/{FINE_GRAINED_SETS} sets, baseline epochs (1/8, 30) = {e30}, (1/8, 60) = {e60}"
        ),
    ))
}

// ---------------------------------------------------------------- 8

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn headline(out: &RunOutput, use_ema: bool) -> f64 {
    out.final_metrics.headline(use_ema).unwrap_or(f64::NAN)
}

fn moons_direction() -> Result<Outcome> {
    let cfg = ExperimentConfig::preset("moons")?;
    let ema = cfg.eval_ema;
    let opts = RunOptions::default();
    let (mut base, mut dmt, mut online, mut cbst) = (vec![], vec![], vec![], vec![]);
    let mut slowest = 0.0f64;
    let mut labeled = 0;
    for &seed in &cfg.seeds {
        let started = Instant::now();
        let prep = Prepared::load(&cfg, seed, None, None)?;
        labeled = prep.split.labeled_ids.len();
        let mut store = RunStore::in_memory(&cfg);
        let d = run_ablation(AblationVariant::Dmt, &cfg, seed, &prep, &mut store, &opts)?;
        let o = run_ablation(
            AblationVariant::OnlineSt,
            &cfg,
            seed,
            &prep,
            &mut store,
            &opts,
        )?;
        slowest = slowest.max(started.elapsed().as_secs_f64());
        let c = run_ablation(AblationVariant::Cbst, &cfg, seed, &prep, &mut store, &opts)?;
        base.push(d.baseline[0].metrics.headline(ema).unwrap_or(f64::NAN));
        dmt.push(headline(&d, ema));
        online.push(headline(&o, ema));
        cbst.push(headline(&c, ema));
    }
    let (b, d, o, c) = (mean(&base), mean(&dmt), mean(&online), mean(&cbst));
    println!(
        "    moons per seed: baseline {base:.4?} dmt {dmt:.4?} online-st {online:.4?} cbst {cbst:.4?}"
    );
    println!(
        "    moons ordering (informational): dmt {d:.4} {} cbst {c:.4} {} online-st {o:.4} {} baseline {b:.4}",
        if d > c { ">" } else { "<=" },
        if c > o { ">" } else { "<=" },
        if o > b { ">" } else { "<=" },
    );
    Ok(Outcome::check(
        d >= b + MOONS_MARGIN && d >= o && slowest < MOONS_SECONDS_PER_SEED,
        format!(
            "{} seeds, {labeled} labeled: dmt {d:.4} vs baseline {b:.4} (+{:.2} pts, need +{:.0}), online-st {o:.4}; slowest seed {slowest:.0}s (limit {MOONS_SECONDS_PER_SEED:.0}s)",
            cfg.seeds.len(),
            100.0 * (d - b),
            100.0 * MOONS_MARGIN
        ),
    ))
}

// ---------------------------------------------------------------- 9, 10

fn cifar_dir() -> Option<PathBuf> {
    std::env::var_os("DMT_DATA_DIR").map(PathBuf::from)
}

fn cifar_missing() -> Outcome {
    Outcome::not_evaluated(
        "not evaluated: CIFAR-10 binaries not available (set DMT_DATA_DIR)".into(),
    )
}

fn cifar_error_shape() -> Result<Outcome> {
    let Some(dir) = cifar_dir() else {
        return Ok(cifar_missing());
    };
    let cfg = ExperimentConfig::preset("cifar10-desk")?;
    let seed = cfg.seeds[0];
    let prep = Prepared::load(&cfg, seed, Some(&dir), None)?;
    let mut store = RunStore::in_memory(&cfg);
    let opts = RunOptions {
        baseline_only: true,
        ..Default::default()
    };
    let out = run_ablation(AblationVariant::Dmt, &cfg, seed, &prep, &mut store, &opts)?;
    let Dataset::Classification { train, .. } = &prep.dataset else {
        unreachable!("cifar is a classification set")
    };
    let unlabeled = &prep.split.unlabeled_ids;
    let source = LabelSource::new("F0", 1);
    let records: Vec<PseudoLabelRecord> = predictions(&out.final_model, train, unlabeled)?
        .into_iter()
        .map(|p| {
            PseudoLabelRecord::new(
                p.sample_id,
                Some(p.probs.argmax()),
                p.probs.confidence(),
                &source,
            )
        })
        .collect::<Result<_>>()?;
    let truth: HashMap<String, usize> = unlabeled
        .iter()
        .map(|&i| (i.to_string(), train.labels[i]))
        .collect();
    let report = pseudo_label_error_stats(&records, &truth)?;
    let rates: Vec<f64> = report
        .quantiles
        .iter()
        .map(|q| q.error_rate.unwrap_or(f64::NAN))
        .collect();
    let monotone = rates.windows(2).all(|w| w[1] <= w[0]);
    let tight = *rates.last().unwrap_or(&f64::NAN);
    Ok(Outcome::check(
        monotone && tight > 0.0,
        format!(
            "error rate top-80/60/40/20% = {rates:.4?}, overall {:.4}",
            report.overall_error_rate.unwrap_or(f64::NAN)
        ),
    ))
}

fn cifar_direction() -> Result<Outcome> {
    let Some(dir) = cifar_dir() else {
        return Ok(cifar_missing());
    };
    let cfg = ExperimentConfig::preset("cifar10-desk")?;
    let ema = cfg.eval_ema;
    let opts = RunOptions::default();
    let (mut base, mut dmt, mut cl) = (vec![], vec![], vec![]);
    for &seed in &cfg.seeds {
        let prep = Prepared::load(&cfg, seed, Some(&dir), None)?;
        let mut store = RunStore::in_memory(&cfg);
        let d = run_ablation(AblationVariant::Dmt, &cfg, seed, &prep, &mut store, &opts)?;
        let c = run_ablation(
            AblationVariant::CurriculumLabeling,
            &cfg,
            seed,
            &prep,
            &mut store,
            &opts,
        )?;
        base.push(d.baseline[0].metrics.headline(ema).unwrap_or(f64::NAN));
        dmt.push(headline(&d, ema));
        cl.push(headline(&c, ema));
    }
    let (b, d, c) = (mean(&base), mean(&dmt), mean(&cl));
    Ok(Outcome::check(
        d >= b + CIFAR_MARGIN && d >= c,
        format!(
            "{} seeds: dmt {d:.4} vs baseline {b:.4} (+{:.2} pts), cl {c:.4}",
            cfg.seeds.len(),
            100.0 * (d - b)
        ),
    ))
}

// ---------------------------------------------------------------- 11

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn toyseg(seed_epochs: usize) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::preset("toyseg")?;
    cfg.epochs_per_iteration = seed_epochs;
    cfg.alphas = vec![1.0];
    cfg.seeds = vec![1];
    cfg.validate()?;
    Ok(cfg)
}

fn noise_suppression() -> Result<Outcome> {
    let cfg = toyseg(1)?;
    let seed = cfg.seeds[0];
    let prep = Prepared::load(&cfg, seed, None, None)?;
    let Dataset::Segmentation { train, .. } = &prep.dataset else {
        unreachable!("toyseg is a segmentation set")
    };
    let mut store = RunStore::in_memory(&cfg);
    let opts = RunOptions {
        baseline_only: true,
        ..Default::default()
    };
    run_ablation(AblationVariant::Dmt, &cfg, seed, &prep, &mut store, &opts)?;
    let (_, a0) = store
        .resume_point("baseline", seed, 0, "A")?
        .expect("baseline A");
    let (_, b0) = store
        .resume_point("baseline", seed, 0, "B")?
        .expect("baseline B");

    // A0 labels every unlabeled pixel; a fifth of them get a wrong class
    let unlabeled = &prep.split.unlabeled_ids;
    let source = LabelSource::new("A0", 1);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "corrupt", 0));
    let classes = cfg.seg_classes;
    let mut corrupted = Vec::new();
    let maps: Vec<PseudoLabelMap> =
        class_balanced_select(&probability_maps(&a0, train, unlabeled)?, 1.0, &source)?
            .into_iter()
            .map(|m| {
                let mut labels = m.labels().to_vec();
                let mut flags = vec![false; labels.len()];
                for (l, f) in labels.iter_mut().zip(flags.iter_mut()) {
                    if *l != IGNORE_LABEL && rng.random::<f64>() < CORRUPT_FRACTION {
                        *l = ((*l as usize + rng.random_range(1..classes)) % classes) as u8;
                        *f = true;
                    }
                }
                corrupted.push(flags);
                PseudoLabelMap::new(
                    m.sample_id(),
                    m.height(),
                    m.width(),
                    labels,
                    m.confidences().to_vec(),
                    &source,
                )
            })
            .collect::<Result<_>>()?;
    let pool: Vec<SegPoolItem> = unlabeled
        .iter()
        .zip(&maps)
        .map(|(&index, m)| SegPoolItem {
            index,
            map: Some(m),
        })
        .collect();

    let (u, l) = cfg.ratio_parts()?;
    let spec = TrainSpec {
        epochs: 1,
        composition: BatchComposition::from_ratio(cfg.batch_size, u, l)?,
        learning_rate: cfg.learning_rate,
        lr_schedule: cfg.lr(),
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
        recipe: LossRecipe::Dynamic(cfg.gammas()),
        gamma_schedule: None,
        shadow: None,
        mixup_alpha: None,
        ema_decay: None,
        max_seconds: None,
    };
    let mut b1 = b0.clone();
    train_segmenter(
        &mut b1,
        train,
        &prep.split.labeled_ids,
        &pool,
        &SegAugment::standard(cfg.crop_size),
        &spec,
        derive_seed(seed, "train-B", 1),
    )?;

    let (mut bad, mut good) = (Vec::new(), Vec::new());
    for ((m, flags), p) in maps
        .iter()
        .zip(&corrupted)
        .zip(probability_maps(&b1, train, unlabeled)?)
    {
        let wm = dynamic_weight_map(m, &p, cfg.gammas())?;
        for (px, &w) in wm.weights.iter().enumerate() {
            if m.labels()[px] == IGNORE_LABEL {
                continue;
            }
            if flags[px] {
                bad.push(w);
            } else {
                good.push(w);
            }
        }
    }
    let share = bad.len() as f64 / (bad.len() + good.len()) as f64;
    let (mb, mg) = (median(bad), median(good));
    Ok(Outcome::check(
        mb < mg,
        format!(
            "{:.1}% of pixels corrupted; median weight corrupted {mb:.3e} vs clean {mg:.3e}",
            100.0 * share
        ),
    ))
}

// ---------------------------------------------------------------- 12

fn traces<'a>(out: &'a RunOutput, key: &str) -> &'a [StepTrace] {
    out.traces
        .iter()
        .find(|(k, _)| k == key)
        .map(|(_, t)| t.as_slice())
        .unwrap_or_else(|| panic!("no trace {key}"))
}

fn zero_gamma_degeneracy() -> Result<Outcome> {
    let mut cfg = toyseg(2)?;
    cfg.gamma1 = 0.0;
    cfg.gamma2 = 0.0;
    cfg.pairing = Pairing::SelfPaired;
    cfg.cbst_selection = dmt_core::config::CbstSelection::Direct;
    cfg.validate()?;
    let seed = cfg.seeds[0];
    let prep = Prepared::load(&cfg, seed, None, None)?;
    let mut store = RunStore::in_memory(&cfg);
    let opts = RunOptions {
        keep_traces: true,
        shadow: Some(LossRecipe::Unit),
        baseline_only: false,
    };
    let dmt = run_ablation(AblationVariant::Dmt, &cfg, seed, &prep, &mut store, &opts)?;
    let cbst = run_ablation(AblationVariant::Cbst, &cfg, seed, &prep, &mut store, &opts)?;
    let d = traces(&dmt, "dmt-i1-A");
    let c = traces(&cbst, "cbst-i1-A");

    // every step: weighted loss = unit loss minus the dropped elements' CE
    let mut worst = 0.0f64;
    let mut positive_steps = 0;
    for t in d {
        let shadow = t.shadow_unlabeled_loss.expect("shadow recorded");
        worst = worst.max(rel_err(t.unlabeled_loss, shadow - t.positive_ce));
        if t.cases.positive > 0 {
            positive_steps += 1;
        }
    }
    // identical runs up to the first step with a dropped element
    let same_len = d.len() == c.len();
    let first_positive = d
        .iter()
        .position(|t| t.cases.positive > 0)
        .unwrap_or(d.len());
    let mut prefix_worst = 0.0f64;
    for (a, b) in d.iter().zip(c).take(first_positive + 1) {
        prefix_worst =
            prefix_worst.max(rel_err(a.shadow_unlabeled_loss.unwrap(), b.unlabeled_loss));
        prefix_worst = prefix_worst.max(rel_err(a.labeled_loss, b.labeled_loss));
    }
    for (a, b) in d.iter().zip(c).take(first_positive) {
        prefix_worst = prefix_worst.max(rel_err(a.unlabeled_loss, b.unlabeled_loss));
    }
    Ok(Outcome::check(
        worst <= TRACE_REL_TOL && prefix_worst <= TRACE_REL_TOL && same_len,
        format!(
            "{} steps, {positive_steps} with dropped elements; max rel err dmt = unit - dropped CE {worst:.1e}; cbst matches dmt through step {first_positive} (max rel err {prefix_worst:.1e}, tol {TRACE_REL_TOL:.0e})",
            d.len()
        ),
    ))
}

type Criterion = (u32, &'static str, fn() -> Result<Outcome>);

fn main() {
    let only: Option<u32> = std::env::args().skip(1).find_map(|a| a.parse().ok());
    let strict = std::env::var_os("DMT_ACCEPTANCE_STRICT").is_some();
    let criteria: [Criterion; 12] = [
        (1, "dynamic weight oracle", weight_oracle),
        (2, "logit gradient", gradient_check),
        (3, "threshold renormalization", renormalization_fixture),
        (4, "selection oracles", selection_oracles),
        (5, "difference-maximized overlap", overlap_property),
        (6, "gamma schedule endpoints", gamma_endpoints),
        (7, "metric fixtures", metric_fixtures),
        (8, "two-moons direction", moons_direction),
        (
            9,
            "cifar-10 error by confidence quantile",
            cifar_error_shape,
        ),
        (10, "cifar-10 accuracy direction", cifar_direction),
        (11, "corrupted-pixel weights", noise_suppression),
        (12, "zero-gamma degeneracy", zero_gamma_degeneracy),
    ];
    let (mut passed, mut failed, mut skipped) = (0, 0, 0);
    for (n, name, run) in criteria {
        if only.is_some_and(|o| o != n) {
            continue;
        }
        let started = Instant::now();
        let outcome = run().unwrap_or_else(|e| Outcome::check(false, format!("error: {e}")));
        let status = if outcome.pass { "PASS" } else { "FAIL" };
        println!(
            "acceptance {n:>2} {status} {name}: {} [{:.1}s]",
            outcome.detail,
            started.elapsed().as_secs_f64()
        );
        match (outcome.pass, outcome.evaluated) {
            (true, _) => passed += 1,
            (false, true) => failed += 1,
            (false, false) => skipped += 1,
        }
    }
    println!("acceptance summary: {passed} passed, {failed} failed, {skipped} not evaluated");
    if failed > 0 || (strict && skipped > 0) {
        std::process::exit(1);
    }
}
