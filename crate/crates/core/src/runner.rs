//! Staged experiments: a validated config drives a fold over pipeline stages,
//! evaluating on the fixed validation split after each one, and writes a
//! deterministic manifest plus artifacts.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cleanse::{self, CleanContext, CleaningConfig, CleaningHistory};
use crate::decouple::{self, RebalanceConfig, TauSearch};
use crate::ensemble::{self, EvalReport, PredictionRecord, DEFAULT_TOP_K};
use crate::imageops::{fixres_tta_predict_batch, AugmentConfig, Image, TtaConfig};
use crate::nnkernel::{save_checkpoint, ModelParams};
use crate::optimizer::{OptimConfig, UpdateScope};
use crate::rng;
use crate::sampling::{SamplerConfig, SamplerKind};
use crate::synthbench::{gen_dataset, gen_validation, Dataset, DatasetSpec};
use crate::train::{init_params, predict_dataset, train, ModelConfig, TrainPlan, TrainView};
use crate::{Error, Result};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Train,
    Clean,
    RetrainClassifier,
    SubsetFinetune,
    HighresFinetune,
    TauNorm,
    TtaEval,
    Eval,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Train => "train",
            Stage::Clean => "clean",
            Stage::RetrainClassifier => "retrain_classifier",
            Stage::SubsetFinetune => "subset_finetune",
            Stage::HighresFinetune => "highres_finetune",
            Stage::TauNorm => "tau_norm",
            Stage::TtaEval => "tta_eval",
            Stage::Eval => "eval",
        }
    }
}

/// Full-network finetuning on the training set re-rendered at a higher
/// resolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HighresConfig {
    pub resolution: usize,
    pub epochs: usize,
    pub sampler: SamplerKind,
    pub lr_scale: f64,
}

impl Default for HighresConfig {
    fn default() -> Self {
        Self { resolution: 36, epochs: 5, sampler: SamplerKind::Cbs, lr_scale: 1.0 }
    }
}

impl HighresConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resolution < 8 {
            return Err(Error::config("highres.resolution must be at least 8"));
        }
        if !(self.lr_scale > 0.0) || !self.lr_scale.is_finite() {
            return Err(Error::config("highres.lr_scale must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub sampler: SamplerKind,
    pub augment: AugmentConfig,
    pub cleaning: CleaningConfig,
    pub rebalance: RebalanceConfig,
    pub highres: HighresConfig,
    pub tta: TtaConfig,
    pub ensemble_k: usize,
    pub stages: Vec<Stage>,
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSpec::default(),
            model: ModelConfig::default(),
            optim: OptimConfig::default(),
            sampler: SamplerKind::Ibs,
            augment: AugmentConfig::default(),
            cleaning: CleaningConfig::default(),
            rebalance: RebalanceConfig::default(),
            highres: HighresConfig::default(),
            tta: TtaConfig::default(),
            ensemble_k: DEFAULT_TOP_K,
            stages: vec![Stage::Train, Stage::Eval],
            seed: 0,
            out_dir: None,
        }
    }
}

/// Every stage but `train` needs a model; `train` and `highres_finetune` may
/// run once.
pub fn validate_stages(stages: &[Stage]) -> Result<()> {
    let first = stages.first().ok_or_else(|| Error::config("stage list is empty"))?;
    if *first != Stage::Train {
        return Err(Error::config(format!("stage order: `{}` before `train`", first.name())));
    }
    for (i, s) in stages.iter().enumerate().skip(1) {
        if matches!(s, Stage::Train | Stage::HighresFinetune) {
            if let Some(prev) = stages[..i].iter().find(|p| *p == s) {
                return Err(Error::config(format!("stage order: `{}` after `{}`", s.name(), prev.name())));
            }
        }
    }
    Ok(())
}

impl ExperimentConfig {
    /// Parses a JSON document; unknown keys are rejected.
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        validate_stages(&self.stages)?;
        self.dataset.validate()?;
        self.model.validate()?;
        self.optim.validate()?;
        self.augment.validate()?;
        self.cleaning.validate()?;
        self.rebalance.validate()?;
        self.highres.validate()?;
        self.tta.validate()?;
        if self.ensemble_k == 0 {
            return Err(Error::config("ensemble_k must be positive"));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn train_plan(&self) -> TrainPlan {
        TrainPlan {
            optim: self.optim.clone(),
            sampler: SamplerConfig { kind: self.sampler, epoch_size: None },
            augment: self.augment.clone(),
            label_smoothing: self.model.label_smoothing,
            mixup_alpha: self.model.mixup_alpha,
            scope: UpdateScope::Full,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageEntry {
    pub stage: Stage,
    pub resolution: usize,
    pub tau: Option<f64>,
    pub tta: bool,
    pub report: EvalReport,
}

/// Everything needed to re-run and audit an experiment. Wall-clock timings
/// live in a separate file so that the manifest is reproducible bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub stages: Vec<StageEntry>,
    pub cleaning: Option<CleaningHistory>,
    pub tau_search: Option<TauSearch>,
    /// Artifact name to path relative to the output directory.
    pub artifacts: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }

    pub fn final_top1(&self) -> f64 {
        self.stages.last().map_or(0.0, |s| s.report.top1_accuracy)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: Stage,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub manifest: RunManifest,
    pub timings: Vec<StageTiming>,
    /// Final-stage validation predictions, truncated to `ensemble_k`.
    pub records: Vec<PredictionRecord>,
    pub params: ModelParams<f32>,
}

struct RunState {
    train: Dataset,
    val: Dataset,
    params: Option<ModelParams<f32>>,
    survivors: Vec<usize>,
    labels: Vec<u32>,
    tau: Option<f64>,
    tta: bool,
}

impl RunState {
    fn params(&self) -> &ModelParams<f32> {
        self.params.as_ref().expect("stage order guarantees a trained model")
    }

    fn view(&self) -> Result<TrainView<'_>> {
        TrainView::new(&self.train, &self.survivors, &self.labels)
    }

    fn eval_params(&self) -> Result<ModelParams<f32>> {
        match self.tau {
            Some(t) => decouple::apply_tau(self.params(), t),
            None => Ok(self.params().clone()),
        }
    }

    fn val_probs(&self, tta: &TtaConfig) -> Result<Vec<Vec<f64>>> {
        let params = self.eval_params()?;
        if self.tta {
            let cfg = TtaConfig { train_res: self.train.resolution, ..tta.clone() };
            let images: Vec<Image> = (0..self.val.len()).map(|i| self.val.image_owned(i)).collect();
            fixres_tta_predict_batch(&params, &images, &cfg)
        } else {
            predict_dataset(&params, &self.val)
        }
    }
}

struct Artifacts<'a> {
    dir: Option<&'a Path>,
    paths: BTreeMap<String, String>,
}

impl Artifacts<'_> {
    fn write(&mut self, name: &str, rel: &str, bytes: &[u8]) -> Result<()> {
        if let Some(dir) = self.dir {
            let path = dir.join(rel);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent)?;
            }
            fs::write(path, bytes)?;
            self.paths.insert(name.into(), rel.into());
        }
        Ok(())
    }
}

fn records_for(probs: &[Vec<f64>], k: usize) -> Vec<PredictionRecord> {
    probs.iter().enumerate().map(|(i, p)| ensemble::truncate_topk(i as u64, p, k)).collect()
}

/// Runs `cfg.stages` in order. With `out_dir` set, artifacts, the manifest
/// and a `timings.json` sidecar are written there.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let bench = gen_dataset(&cfg.dataset)?;
    let class_counts = bench.train.nominal_counts();
    let n = bench.train.len();
    let mut state = RunState {
        labels: bench.train.labels.clone(),
        train: bench.train,
        val: bench.val,
        params: None,
        survivors: (0..n).collect(),
        tau: None,
        tta: false,
    };
    if let Some(dir) = &cfg.out_dir {
        fs::create_dir_all(dir)?;
    }
    let mut art = Artifacts { dir: cfg.out_dir.as_deref(), paths: BTreeMap::new() };
    let plan = cfg.train_plan();
    let mut entries = Vec::new();
    let mut timings = Vec::new();
    let mut cleaning = None;
    let mut tau_search = None;
    let mut last_probs = Vec::new();

    for (i, &stage) in cfg.stages.iter().enumerate() {
        let start = Instant::now();
        let seed = rng::derive(cfg.seed, &format!("{i}-{}", stage.name()));
        match stage {
            Stage::Train => {
                let mut p = init_params(&cfg.model, cfg.dataset.num_classes, seed)?;
                train(&mut p, state.view()?, &plan, seed)?;
                let records =
                    cleanse::score_training_set(&p, &state.train, &state.survivors, cfg.ensemble_k)?;
                let given: Vec<u32> = state.survivors.iter().map(|&j| state.labels[j]).collect();
                let hist = cleanse::confidence_histogram(&records, &given, 10)?;
                art.write("confidence_histogram", "confidence_histogram.csv", cleanse::histogram_csv(&hist).as_bytes())?;
                state.params = Some(p);
            }
            Stage::Clean => {
                let ctx = CleanContext {
                    train: &state.train,
                    val: &state.val,
                    model: &cfg.model,
                    plan: &plan,
                    cfg: &cfg.cleaning,
                };
                let out = cleanse::iterative_clean(ctx, state.params.take(), seed)?;
                if let Some(dir) = &cfg.out_dir {
                    cleanse::write_outcome(&dir.join("cleaning"), &out)?;
                    art.paths.insert("cleaning".into(), "cleaning".into());
                }
                state.survivors = out.kept;
                state.labels = out.labels;
                state.params = Some(out.params);
                cleaning = Some(out.history);
            }
            Stage::RetrainClassifier => {
                let p = decouple::retrain_classifier(state.params(), state.view()?, &plan, &cfg.rebalance, seed)?;
                state.params = Some(p);
            }
            Stage::SubsetFinetune => {
                let mut images = Vec::with_capacity(state.survivors.len() * state.train.pixels_per_image());
                for &j in &state.survivors {
                    images.extend_from_slice(state.train.image(j));
                }
                let c = cfg.dataset.num_classes;
                let res = state.train.resolution;
                let flat = crate::nnkernel::predict_proba(state.params(), &images, res, res)?;
                let probs: Vec<Vec<f64>> = flat.chunks(c).map(<[f64]>::to_vec).collect();
                let labels: Vec<u32> = state.survivors.iter().map(|&j| state.labels[j]).collect();
                let picked = decouple::build_balanced_subset(
                    &labels,
                    &probs,
                    cfg.rebalance.subset_per_class,
                    cfg.rebalance.subset_rank,
                );
                let subset: Vec<usize> = picked.iter().map(|&k| state.survivors[k]).collect();
                let p = decouple::finetune_on_subset(
                    state.params(),
                    &state.train,
                    &subset,
                    &state.labels,
                    &plan,
                    &cfg.rebalance,
                    seed,
                )?;
                state.params = Some(p);
            }
            Stage::HighresFinetune => {
                let hr = &cfg.highres;
                state.train = state.train.rerender(hr.resolution)?;
                state.val = state.val.rerender(hr.resolution)?;
                let mut optim = cfg.optim.rescaled(hr.epochs);
                optim.base_lr_per_256 *= hr.lr_scale;
                let hplan = TrainPlan {
                    optim,
                    sampler: SamplerConfig { kind: hr.sampler, epoch_size: None },
                    ..plan.clone()
                };
                let mut p = state.params.take().expect("stage order guarantees a trained model");
                train(&mut p, TrainView::new(&state.train, &state.survivors, &state.labels)?, &hplan, seed)?;
                state.params = Some(p);
            }
            Stage::TauNorm => {
                let tau = if cfg.rebalance.search_tau {
                    let search = decouple::grid_search_tau(state.params(), &state.val, &cfg.rebalance.tau_grid)?;
                    art.write("tau_curve", "tau_curve.csv", search.csv().as_bytes())?;
                    let best = search.best_tau;
                    tau_search = Some(search);
                    best
                } else {
                    cfg.rebalance.tau
                };
                state.tau = Some(tau);
            }
            Stage::TtaEval => state.tta = true,
            Stage::Eval => {}
        }
        last_probs = state.val_probs(&cfg.tta)?;
        entries.push(StageEntry {
            stage,
            resolution: state.train.resolution,
            tau: state.tau,
            tta: state.tta,
            report: ensemble::eval_report(&last_probs, &state.val.labels, &class_counts)?,
        });
        timings.push(StageTiming { stage, seconds: start.elapsed().as_secs_f64() });
    }

    let records = records_for(&last_probs, cfg.ensemble_k);
    let params = state.params.take().expect("train stage ran");
    if let Some(dir) = &cfg.out_dir {
        ensemble::write_records(&dir.join("val_predictions.jsonl"), &records)?;
        art.paths.insert("val_predictions".into(), "val_predictions.jsonl".into());
        let last = &entries.last().expect("stages are non-empty").report;
        art.write("per_class", "per_class.csv", ensemble::per_class_csv(last, &class_counts).as_bytes())?;
        save_checkpoint(&params, &dir.join("checkpoint"))?;
        art.paths.insert("checkpoint".into(), "checkpoint".into());
    }
    let manifest = RunManifest {
        tool_version: TOOL_VERSION.into(),
        config_hash: cfg.hash(),
        config: cfg.clone(),
        stages: entries,
        cleaning,
        tau_search,
        artifacts: art.paths,
    };
    if let Some(dir) = &cfg.out_dir {
        fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
        fs::write(dir.join("timings.json"), serde_json::to_vec_pretty(&timings)?)?;
    }
    Ok(RunOutcome { manifest, timings, records, params })
}

/// Ensemble of several runs over the same validation split, from their
/// saved prediction files.
pub fn ensemble_runs(run_dirs: &[PathBuf]) -> Result<EvalReport> {
    if run_dirs.len() < 2 {
        return Err(Error::config("ensembling needs at least two runs"));
    }
    let manifests = run_dirs
        .iter()
        .map(|d| RunManifest::load(&d.join("manifest.json")))
        .collect::<Result<Vec<_>>>()?;
    let spec = &manifests[0].config.dataset;
    if let Some(m) = manifests.iter().find(|m| m.config.dataset.validation_spec() != spec.validation_spec()) {
        return Err(Error::IdMismatch(format!(
            "run {} was evaluated on a different validation split",
            m.config_hash
        )));
    }
    let sets = run_dirs
        .iter()
        .zip(&manifests)
        .map(|(d, m)| {
            let rel = m
                .artifacts
                .get("val_predictions")
                .ok_or_else(|| Error::MissingFile(d.join("val_predictions.jsonl")))?;
            ensemble::read_records(&d.join(rel))
        })
        .collect::<Result<Vec<_>>>()?;
    let val = gen_validation(spec)?;
    let counts = spec.class_counts()?;
    ensemble_sets_report(&sets, &val, &counts)
}

fn ensemble_sets_report(sets: &[Vec<PredictionRecord>], val: &Dataset, counts: &[usize]) -> Result<EvalReport> {
    for set in sets {
        if set.len() != val.len() || set.iter().enumerate().any(|(i, r)| r.sample_id != i as u64) {
            return Err(Error::IdMismatch("prediction records do not match the validation split".into()));
        }
    }
    let probs = ensemble::ensemble_sets(sets, counts.len())?;
    ensemble::eval_report(&probs, &val.labels, counts)
}

/// Stage sequence of the cumulative ladder.
pub const LADDER_STAGES: [Stage; 7] = [
    Stage::Train,
    Stage::Clean,
    Stage::RetrainClassifier,
    Stage::TauNorm,
    Stage::TtaEval,
    Stage::HighresFinetune,
    Stage::Eval,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LadderRow {
    pub stage: String,
    pub top1: f64,
    pub delta: f64,
}

#[derive(Debug, Clone)]
pub struct Ladder {
    pub rows: Vec<LadderRow>,
    pub runs: Vec<RunOutcome>,
}

impl Ladder {
    pub fn csv(&self) -> String {
        let mut out = String::from("stage,top1,delta\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{}\n", r.stage, r.top1, r.delta));
        }
        out
    }
}

/// Runs the cumulative pipeline for seeds `seed`, `seed + 1` and `seed + 2`
/// and reports the validation top-1 after each addition: baseline, one
/// cleaning round, all cleaning rounds, classifier retraining, tau-norm,
/// ten-crop test-time augmentation, high-resolution finetuning and the
/// three-model ensemble. Cleaning rounds share their retraining seed, so the
/// single-round row is the first round of the iterative run.
pub fn run_ladder(cfg: &ExperimentConfig) -> Result<Ladder> {
    let mut runs = Vec::new();
    for k in 0..3u64 {
        let seed = cfg.seed.wrapping_add(k);
        let run_cfg = ExperimentConfig {
            stages: LADDER_STAGES.to_vec(),
            seed,
            out_dir: cfg.out_dir.as_ref().map(|d| d.join(format!("seed-{seed}"))),
            ..cfg.clone()
        };
        runs.push(run_experiment(&run_cfg)?);
    }
    let main = &runs[0].manifest;
    let top1 = |s: Stage| {
        main.stages
            .iter()
            .find(|e| e.stage == s)
            .map(|e| e.report.top1_accuracy)
            .expect("ladder stage ran")
    };
    let history = main.cleaning.as_ref().expect("ladder cleans");
    let mut values = vec![
        ("baseline", top1(Stage::Train)),
        ("data_cleaning", history.rounds[0].post_retrain_val_top1),
        ("iterative_cleaning", top1(Stage::Clean)),
        ("retrain_classifier", top1(Stage::RetrainClassifier)),
        ("tau_norm", top1(Stage::TauNorm)),
        ("tta", top1(Stage::TtaEval)),
        ("highres_finetune", top1(Stage::HighresFinetune)),
    ];
    let val = gen_validation(&cfg.dataset)?;
    let counts = cfg.dataset.class_counts()?;
    let sets: Vec<Vec<PredictionRecord>> = runs.iter().map(|r| r.records.clone()).collect();
    values.push(("ensemble", ensemble_sets_report(&sets, &val, &counts)?.top1_accuracy));

    let mut rows = Vec::new();
    let mut prev = values[0].1;
    for (stage, top1) in values {
        rows.push(LadderRow { stage: stage.into(), top1, delta: top1 - prev });
        prev = top1;
    }
    let ladder = Ladder { rows, runs };
    if let Some(dir) = &cfg.out_dir {
        fs::write(dir.join("ladder.csv"), ladder.csv())?;
    }
    Ok(ladder)
}
