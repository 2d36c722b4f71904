//! Acceptance suite for the standard benchmark (50 classes, 200 samples in
//! the largest class, imbalance ratio 100, 20% symmetric label noise).
//! Prints one PASS/FAIL line per criterion and exits non-zero if any fails.

mod common;

use std::fs;
use std::time::Instant;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use tailforge::cleanse::{
    confidence_histogram, histogram_csv, iterative_clean, score_training_set, CleanContext, CleaningConfig,
};
use tailforge::decouple::{apply_tau, retrain_classifier, tau_normalize, RebalanceConfig};
use tailforge::ensemble::{
    ensemble_average, ensemble_sets, eval_report, mean_class_error_rate, truncate_topk, EvalReport,
    PredictionRecord,
};
use tailforge::imageops::{fixres_tta_predict, fixres_tta_predict_batch, CropMode, Image, TtaConfig};
use tailforge::nnkernel::{gradcheck, load_checkpoint, predict_proba_one, save_checkpoint, ModelParams};
use tailforge::rng;
use tailforge::runner::{run_experiment, run_ladder, ExperimentConfig, Stage};
use tailforge::sampling::{class_balanced_epoch, instance_balanced_epoch};
use tailforge::synthbench::{gen_dataset, read_dataset, write_dataset, Benchmark, DatasetSpec};
use tailforge::threads::with_threads;
use tailforge::train::{init_params, predict_dataset, train, ModelConfig, TrainPlan, TrainView};

const SEEDS: u64 = 5;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn row_norm(row: &[f64]) -> f64 {
    row.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Per-seed pipeline on the standard benchmark: IBS baseline, three cleaning
/// rounds, CBS classifier retraining.
struct SeedRun {
    bench: Benchmark,
    counts: Vec<usize>,
    baseline: ModelParams<f32>,
    baseline_report: EvalReport,
    cleaned: ModelParams<f32>,
    cleaned_report: EvalReport,
    round1_precision: f64,
    clean_seconds: f64,
    retrained_report: EvalReport,
    retrained: ModelParams<f32>,
}

fn seed_run(seed: u64) -> SeedRun {
    let spec = DatasetSpec { seed, ..DatasetSpec::default() };
    let bench = gen_dataset(&spec).unwrap();
    let counts = bench.train.nominal_counts();
    let exp = ExperimentConfig::default();
    let plan = exp.train_plan();
    let model = ModelConfig::default();
    let eval = |p: &ModelParams<f32>| eval_report(&predict_dataset(p, &bench.val).unwrap(), &bench.val.labels, &counts).unwrap();

    let start = Instant::now();
    let mut baseline = init_params(&model, spec.num_classes, seed).unwrap();
    let all: Vec<usize> = (0..bench.train.len()).collect();
    train(&mut baseline, TrainView::new(&bench.train, &all, &bench.train.labels).unwrap(), &plan, seed).unwrap();
    let cleaning = CleaningConfig { rounds: 3, ..CleaningConfig::default() };
    let ctx = CleanContext { train: &bench.train, val: &bench.val, model: &model, plan: &plan, cfg: &cleaning };
    let out = iterative_clean(ctx, Some(baseline.clone()), seed).unwrap();
    let clean_seconds = start.elapsed().as_secs_f64();

    let view = TrainView::new(&bench.train, &out.kept, &out.labels).unwrap();
    let retrained = retrain_classifier(&out.params, view, &plan, &RebalanceConfig::default(), seed).unwrap();
    SeedRun {
        baseline_report: eval(&baseline),
        cleaned_report: eval(&out.params),
        retrained_report: eval(&retrained),
        round1_precision: out.history.rounds[0].oracle_precision,
        clean_seconds,
        baseline,
        cleaned: out.params,
        retrained,
        counts,
        bench,
    }
}

fn criterion_1() -> Verdict {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let (params, batch) = common::gradcheck_draw(seed);
        worst = worst.max(gradcheck(&params, &batch, 1e-5, seed).unwrap());
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(worst < 1e-5 && secs < 60.0, format!("max relative error {worst:.2e} over 20 draws, {secs:.1}s"))
}

fn criterion_2() -> Verdict {
    let mut r = rng::seeded(2);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let (mut identity, mut unit_err, mut ratio_err) = (true, 0.0f64, 0.0f64);
    for _ in 0..100 {
        let c = r.random_range(2..12);
        let d = r.random_range(1..16);
        let scales: Vec<f64> = (0..c).map(|_| r.random_range(0.05..5.0)).collect();
        let w: Vec<f64> = (0..c * d).map(|i| scales[i / d] * normal.sample(&mut r)).collect();
        let zero = tau_normalize(&w, c, 0.0).unwrap();
        identity &= zero.iter().zip(&w).all(|(a, b)| a.to_bits() == b.to_bits());
        let unit = tau_normalize(&w, c, 1.0).unwrap();
        for row in unit.chunks(d) {
            unit_err = unit_err.max((row_norm(row) - 1.0).abs());
        }
        let tau = r.random_range(0.0..2.0);
        let out = tau_normalize(&w, c, tau).unwrap();
        for i in 0..c {
            for j in 0..c {
                let lhs = row_norm(&out[i * d..(i + 1) * d]) / row_norm(&out[j * d..(j + 1) * d]);
                let rhs = (row_norm(&w[i * d..(i + 1) * d]) / row_norm(&w[j * d..(j + 1) * d])).powf(1.0 - tau);
                ratio_err = ratio_err.max((lhs - rhs).abs() / rhs.max(1.0));
            }
        }
    }
    verdict(
        identity && unit_err <= 1e-12 && ratio_err <= 1e-9,
        format!("tau=0 bitwise identity {identity}, unit-norm error {unit_err:.1e}, ratio-law error {ratio_err:.1e}"),
    )
}

fn criterion_3() -> Verdict {
    let counts = [1000usize, 464, 215, 100, 46, 22, 10, 5, 2, 1];
    let mut offset = 0;
    let groups: Vec<Vec<usize>> = counts
        .iter()
        .map(|&n| {
            let g = (offset..offset + n).collect();
            offset += n;
            g
        })
        .collect();
    let mut owner = vec![0usize; offset];
    for (c, g) in groups.iter().enumerate() {
        g.iter().for_each(|&i| owner[i] = c);
    }
    let draws = 100_000;
    let picks = class_balanced_epoch(&groups, draws, &mut rng::seeded(3)).unwrap();
    let mut observed = [0usize; 10];
    picks.iter().for_each(|&i| observed[owner[i]] += 1);
    let expected = draws as f64 / 10.0;
    let chi2: f64 = observed.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
    let mut perm = instance_balanced_epoch(offset, &mut rng::seeded(4));
    perm.sort_unstable();
    let is_perm = perm == (0..offset).collect::<Vec<_>>();
    verdict(chi2 < 27.88 && is_perm, format!("CBS chi-square {chi2:.2} (< 27.88), IBS permutation {is_perm}"))
}

fn criterion_4(runs: &[SeedRun]) -> Verdict {
    let precision = mean(runs.iter().map(|r| r.round1_precision));
    let min_precision = runs.iter().map(|r| r.round1_precision).fold(1.0, f64::min);
    let base = mean(runs.iter().map(|r| r.baseline_report.top1_accuracy));
    let cleaned = mean(runs.iter().map(|r| r.cleaned_report.top1_accuracy));
    let secs: f64 = runs.iter().map(|r| r.clean_seconds).sum();
    verdict(
        precision >= 0.7 && cleaned >= base + 0.02 && secs < 600.0,
        format!(
            "round-1 precision {precision:.3} (min {min_precision:.3}), val top-1 {base:.4} -> {cleaned:.4} ({:+.1} points), {secs:.0}s",
            100.0 * (cleaned - base)
        ),
    )
}

fn criterion_5(runs: &[SeedRun]) -> Verdict {
    let ibs = mean(runs.iter().map(|r| r.cleaned_report.top1_accuracy));
    let cbs = mean(runs.iter().map(|r| r.retrained_report.top1_accuracy));
    let grid = RebalanceConfig::default().tau_grid;
    // Mean MCER and tail accuracy per tau, on the instance-balanced model.
    let curve: Vec<(f64, f64, f64, f64)> = grid
        .iter()
        .map(|&tau| {
            let reports: Vec<EvalReport> = runs
                .iter()
                .map(|r| {
                    let p = apply_tau(&r.cleaned, tau).unwrap();
                    eval_report(&predict_dataset(&p, &r.bench.val).unwrap(), &r.bench.val.labels, &r.counts).unwrap()
                })
                .collect();
            (
                tau,
                mean(reports.iter().map(|x| x.mean_class_error_rate)),
                mean(reports.iter().map(|x| x.split_accuracy[2])),
                mean(reports.iter().map(|x| x.split_accuracy[0])),
            )
        })
        .collect();
    let at_zero = curve[0];
    let best = curve[1..]
        .iter()
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.total_cmp(&b.0)))
        .copied()
        .unwrap();
    verdict(
        cbs > ibs && best.1 < at_zero.1 && best.2 > at_zero.2,
        format!(
            "CBS retraining top-1 {ibs:.4} -> {cbs:.4}; tau={} MCER {:.4} vs {:.4} at tau=0, tail {:.3} vs {:.3}, head {:.3} vs {:.3}",
            best.0, best.1, at_zero.1, best.2, at_zero.2, best.3, at_zero.3
        ),
    )
}

fn criterion_6(runs: &[SeedRun]) -> Verdict {
    let ten = TtaConfig::default();
    let (mut center_acc, mut ten_acc) = (Vec::new(), Vec::new());
    for r in runs {
        let images: Vec<Image> = (0..r.bench.val.len()).map(|i| r.bench.val.image_owned(i)).collect();
        let center = predict_dataset(&r.retrained, &r.bench.val).unwrap();
        center_acc.push(eval_report(&center, &r.bench.val.labels, &r.counts).unwrap().top1_accuracy);
        let tta = fixres_tta_predict_batch(&r.retrained, &images, &ten).unwrap();
        ten_acc.push(eval_report(&tta, &r.bench.val.labels, &r.counts).unwrap().top1_accuracy);
    }
    let collapse = TtaConfig { enlarge_factor: 1.0, crops: CropMode::CenterOnly, ..TtaConfig::default() };
    let r = &runs[0];
    let mut gap = 0.0f64;
    for i in 0..r.bench.val.len() {
        let img = r.bench.val.image_owned(i);
        let a = fixres_tta_predict(&r.retrained, &img, &collapse).unwrap();
        let b = predict_proba_one(&r.retrained, img.pixels(), img.height(), img.width());
        gap = a.iter().zip(&b).fold(gap, |g, (x, y)| g.max((x - y).abs()));
    }
    let (c, t) = (mean(center_acc), mean(ten_acc));
    verdict(
        t >= c && gap <= 1e-12,
        format!("ten-crop top-1 {t:.4} vs center {c:.4}; collapse gap {gap:.1e}"),
    )
}

fn criterion_7(runs: &[SeedRun]) -> Verdict {
    let plan: TrainPlan = ExperimentConfig::default().train_plan();
    let model = ModelConfig::default();
    let mut fixed_point = true;
    let (mut ens_acc, mut best_single) = (Vec::new(), Vec::new());
    for (rep, r) in runs.iter().enumerate() {
        let val = &r.bench.val;
        let mut sets: Vec<Vec<PredictionRecord>> = Vec::new();
        let mut singles = Vec::new();
        for k in 0..3u64 {
            let seed = rep as u64 + k;
            let params = if k == 0 {
                r.baseline.clone()
            } else {
                let mut p = init_params(&model, 50, seed).unwrap();
                let all: Vec<usize> = (0..r.bench.train.len()).collect();
                train(&mut p, TrainView::new(&r.bench.train, &all, &r.bench.train.labels).unwrap(), &plan, seed).unwrap();
                p
            };
            let probs = predict_dataset(&params, val).unwrap();
            let records: Vec<PredictionRecord> =
                probs.iter().enumerate().map(|(i, p)| truncate_topk(i as u64, p, 10)).collect();
            let single = ensemble_sets(std::slice::from_ref(&records), 50).unwrap();
            singles.push(eval_report(&single, &val.labels, &r.counts).unwrap().top1_accuracy);
            if k == 0 {
                let twice = ensemble_sets(&[records.clone(), records.clone()], 50).unwrap();
                fixed_point &= twice == single;
                fixed_point &= records.iter().all(|rec| ensemble_average(&[rec, rec, rec], 50).unwrap() == ensemble_average(&[rec], 50).unwrap());
            }
            sets.push(records);
        }
        let ens = ensemble_sets(&sets, 50).unwrap();
        ens_acc.push(eval_report(&ens, &val.labels, &r.counts).unwrap().top1_accuracy);
        best_single.push(singles.iter().copied().fold(0.0, f64::max));
    }
    let (e, s) = (mean(ens_acc), mean(best_single));
    verdict(
        fixed_point && e >= s,
        format!("self-ensemble fixed point {fixed_point}; 3-seed ensemble top-1 {e:.4} vs best single {s:.4}"),
    )
}

fn criterion_8(runs: &[SeedRun]) -> Verdict {
    let hand = mean_class_error_rate(&[0, 1, 1], &[0, 1, 1], 2).unwrap() == 0.0
        && mean_class_error_rate(&[0, 1, 0, 1], &[0, 0, 1, 1], 2).unwrap() == 0.5
        && mean_class_error_rate(&[0, 0, 1, 0], &[0, 0, 1, 1], 2).unwrap() == 0.25;
    let single = eval_report(&[vec![1.0], vec![1.0]], &[0, 0], &[2]).unwrap();
    let single_ok = single.mean_class_error_rate == 1.0 - single.top1_accuracy;
    let mut balanced_ok = true;
    for r in runs {
        for rep in [&r.baseline_report, &r.cleaned_report, &r.retrained_report] {
            balanced_ok &= rep.mean_class_error_rate == 1.0 - rep.top1_accuracy;
        }
    }
    verdict(
        hand && single_ok && balanced_ok,
        format!("hand values {hand}, single class {single_ok}, MCER = 1 - top-1 on balanced validation {balanced_ok}"),
    )
}

fn criterion_9(runs: &[SeedRun]) -> Verdict {
    let cfg = ExperimentConfig {
        stages: vec![Stage::Train, Stage::Clean, Stage::RetrainClassifier, Stage::TauNorm, Stage::TtaEval],
        optim: tailforge::optimizer::OptimConfig { total_epochs: 3, decay_epochs: vec![2], warmup_epochs: 1, ..Default::default() },
        cleaning: CleaningConfig { rounds: 1, retrain_epochs_per_round: Some(2), ..Default::default() },
        rebalance: RebalanceConfig { finetune_epochs: 2, ..Default::default() },
        ..ExperimentConfig::default()
    };
    let manifests: Vec<Vec<u8>> = [1usize, 4]
        .iter()
        .map(|&t| {
            let out = with_threads(t, || run_experiment(&cfg)).unwrap().unwrap();
            serde_json::to_vec_pretty(&out.manifest).unwrap()
        })
        .collect();
    let manifests_equal = manifests[0] == manifests[1];

    let dir = tempfile::tempdir().unwrap();
    let r = &runs[0];
    write_dataset(&r.bench.train, &dir.path().join("train")).unwrap();
    let back = read_dataset(&dir.path().join("train")).unwrap();
    let data_ok = back == r.bench.train;
    save_checkpoint(&r.retrained, &dir.path().join("ckpt")).unwrap();
    let ckpt = load_checkpoint(&dir.path().join("ckpt")).unwrap();
    let bits = |p: &ModelParams<f32>| -> Vec<u32> {
        let mut v: Vec<u32> = p.trainable().iter().flat_map(|t| t.2.iter().map(|x| x.to_bits())).collect();
        v.extend(p.bn_running_mean.iter().chain(&p.bn_running_var).map(|x| x.to_bits()));
        v
    };
    let ckpt_ok = bits(&ckpt) == bits(&r.retrained);

    let all: Vec<usize> = (0..r.bench.train.len()).collect();
    let records = score_training_set(&r.baseline, &r.bench.train, &all, 10).unwrap();
    let hist = confidence_histogram(&records, &r.bench.train.labels, 10).unwrap();
    let csv = histogram_csv(&hist);
    fs::write(dir.path().join("hist.csv"), &csv).unwrap();
    let (mut agree, mut disagree) = ((0.0, 0.0), (0.0, 0.0));
    for line in fs::read_to_string(dir.path().join("hist.csv")).unwrap().lines().skip(1) {
        let f: Vec<f64> = line.split(',').map(|x| x.parse().unwrap()).collect();
        let mid = (f[0] + f[1]) / 2.0;
        agree = (agree.0 + mid * f[2], agree.1 + f[2]);
        disagree = (disagree.0 + mid * f[3], disagree.1 + f[3]);
    }
    let (ma, md) = (agree.0 / agree.1, disagree.0 / disagree.1);
    verdict(
        manifests_equal && data_ok && ckpt_ok && md < ma,
        format!(
            "manifests identical for 1/4 threads {manifests_equal}, dataset roundtrip {data_ok}, checkpoint roundtrip {ckpt_ok}, histogram mean confidence disagree {md:.3} < agree {ma:.3}"
        ),
    )
}

fn criterion_10() -> Verdict {
    let start = Instant::now();
    let ladder = run_ladder(&ExperimentConfig::default()).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let first = ladder.rows.first().unwrap().top1;
    let last = ladder.rows.last().unwrap().top1;
    let rows: Vec<String> = ladder.rows.iter().map(|r| format!("{} {:.3}", r.stage, r.top1)).collect();
    verdict(secs < 1800.0 && last > first, format!("ladder in {secs:.0}s: {}", rows.join(", ")))
}

fn report(id: usize, name: &str, v: &Verdict) {
    let tag = if v.pass { "PASS" } else { "FAIL" };
    println!("[{tag}] criterion {id:>2} {name}: {}", v.detail);
}

fn main() {
    let start = Instant::now();
    let mut all_pass = true;
    let mut record = |id: usize, name: &str, v: Verdict| {
        report(id, name, &v);
        all_pass &= v.pass;
    };
    record(1, "gradient exactness", criterion_1());
    record(2, "tau-norm algebra", criterion_2());
    record(3, "sampler statistics", criterion_3());
    let runs: Vec<SeedRun> = (0..SEEDS).map(seed_run).collect();
    record(4, "cleaning oracle", criterion_4(&runs));
    record(5, "rebalancing direction", criterion_5(&runs));
    record(6, "test-time augmentation", criterion_6(&runs));
    record(7, "ensemble sanity", criterion_7(&runs));
    record(8, "metric correctness", criterion_8(&runs));
    record(9, "determinism and formats", criterion_9(&runs));
    record(10, "end-to-end budget", criterion_10());
    println!("acceptance finished in {:.0}s", start.elapsed().as_secs_f64());
    if !all_pass {
        std::process::exit(1);
    }
}
