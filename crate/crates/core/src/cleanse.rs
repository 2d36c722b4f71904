//! Confidence-based label cleaning: score the training set with the current
//! model, drop (or relabel) suspicious samples, retrain, repeat.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ensemble::{argmax, truncate_topk, PredictionRecord, DEFAULT_TOP_K};
use crate::nnkernel::{predict_proba, ModelParams};
use crate::rng;
use crate::synthbench::{count_labels, Dataset};
use crate::train::{init_params, predict_dataset, train, ModelConfig, TrainPlan, TrainView};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CleaningRule {
    /// Drop when the top-1 class disagrees with the label and its
    /// probability is below the threshold.
    DropMismatchLowconf,
    /// Drop when the top-1 class disagrees with the label and the
    /// probability of the label is below the threshold.
    DropLowlabelprob,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    Absolute,
    /// The threshold is a quantile of the rule's score among mismatched
    /// samples.
    Quantile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CleaningConfig {
    pub rounds: usize,
    pub rule: CleaningRule,
    pub conf_threshold: f64,
    pub threshold_mode: ThresholdMode,
    pub relabel_enabled: bool,
    pub relabel_threshold: f64,
    /// Epochs for each retraining; `None` keeps the full schedule.
    pub retrain_epochs_per_round: Option<usize>,
    /// Continue from the previous round's model instead of a fresh init.
    pub warm_start: bool,
    /// Instead of failing, keep the most label-consistent sample of a class
    /// that a round would otherwise empty.
    pub protect_last_per_class: bool,
    /// Classes kept per scored sample.
    pub top_k: usize,
}

impl Default for CleaningConfig {
    fn default() -> Self {
        Self {
            rounds: 3,
            rule: CleaningRule::DropLowlabelprob,
            conf_threshold: 0.05,
            threshold_mode: ThresholdMode::Absolute,
            relabel_enabled: false,
            relabel_threshold: 0.9,
            retrain_epochs_per_round: None,
            warm_start: false,
            protect_last_per_class: true,
            top_k: DEFAULT_TOP_K,
        }
    }
}

impl CleaningConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::config("cleaning needs at least one round"));
        }
        if !(self.conf_threshold > 0.0 && self.conf_threshold < 1.0) {
            return Err(Error::config("conf_threshold must be in (0, 1)"));
        }
        if self.relabel_enabled {
            if !(self.relabel_threshold > 0.0 && self.relabel_threshold <= 1.0) {
                return Err(Error::config("relabel_threshold must be in (0, 1]"));
            }
            if self.threshold_mode == ThresholdMode::Absolute && self.relabel_threshold < self.conf_threshold {
                return Err(Error::config("relabel_threshold must not be below conf_threshold"));
            }
        }
        if self.top_k == 0 {
            return Err(Error::config("top_k must be positive"));
        }
        if self.retrain_epochs_per_round == Some(0) {
            return Err(Error::config("retrain_epochs_per_round must be positive"));
        }
        Ok(())
    }
}

/// Top-k records for the dataset positions in `positions`; record ids are
/// dataset positions.
pub fn score_training_set(
    params: &ModelParams<f32>,
    data: &Dataset,
    positions: &[usize],
    top_k: usize,
) -> Result<Vec<PredictionRecord>> {
    let mut images = Vec::with_capacity(positions.len() * data.pixels_per_image());
    for &i in positions {
        images.extend_from_slice(data.image(i));
    }
    let c = params.num_classes();
    let flat = predict_proba(params, &images, data.resolution, data.resolution)?;
    Ok(flat
        .chunks(c)
        .zip(positions)
        .map(|(row, &i)| truncate_topk(i as u64, row, top_k))
        .collect())
}

fn rule_score(rule: CleaningRule, record: &PredictionRecord, label: u32) -> f64 {
    match rule {
        CleaningRule::DropMismatchLowconf => record.top1().map_or(0.0, |t| t.1),
        CleaningRule::DropLowlabelprob => record.prob_of(label),
    }
}

fn mismatched(record: &PredictionRecord, label: u32) -> bool {
    record.top1().is_none_or(|t| t.0 != label)
}

/// Linear-interpolated quantile of unsorted values.
fn quantile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let pos = q * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    values[lo] + (values[hi] - values[lo]) * (pos - lo as f64)
}

/// Absolute drop threshold for this scoring pass.
pub fn resolve_threshold(records: &[PredictionRecord], labels: &[u32], cfg: &CleaningConfig) -> f64 {
    match cfg.threshold_mode {
        ThresholdMode::Absolute => cfg.conf_threshold,
        ThresholdMode::Quantile => {
            let mut scores: Vec<f64> = records
                .iter()
                .zip(labels)
                .filter(|(r, &l)| mismatched(r, l))
                .map(|(r, &l)| rule_score(cfg.rule, r, l))
                .collect();
            if scores.is_empty() {
                0.0
            } else {
                quantile(&mut scores, cfg.conf_threshold)
            }
        }
    }
}

/// Per-sample decision of one scoring pass, aligned with the input records.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub drop: Vec<bool>,
    pub relabel: Vec<Option<u32>>,
}

impl Selection {
    pub fn dropped(&self) -> usize {
        self.drop.iter().filter(|d| **d).count()
    }

    pub fn relabeled(&self) -> usize {
        self.relabel.iter().filter(|r| r.is_some()).count()
    }
}

/// Applies the configured rule. Samples whose top-1 class matches their
/// label are never touched. With relabeling on, a mismatched sample whose
/// top-1 probability reaches the relabel threshold takes that class instead
/// of being dropped.
pub fn select_noisy(records: &[PredictionRecord], labels: &[u32], cfg: &CleaningConfig) -> Result<Selection> {
    cfg.validate()?;
    if records.len() != labels.len() {
        return Err(Error::Shape("records and labels differ in length".into()));
    }
    let theta = resolve_threshold(records, labels, cfg);
    if cfg.relabel_enabled && cfg.relabel_threshold < theta {
        return Err(Error::config("resolved drop threshold exceeds relabel_threshold"));
    }
    let mut drop = vec![false; records.len()];
    let mut relabel = vec![None; records.len()];
    for (i, (r, &l)) in records.iter().zip(labels).enumerate() {
        if !mismatched(r, l) {
            continue;
        }
        let Some((top, p_top)) = r.top1() else {
            drop[i] = true;
            continue;
        };
        if cfg.relabel_enabled && p_top >= cfg.relabel_threshold {
            relabel[i] = Some(top);
        } else if rule_score(cfg.rule, r, l) < theta {
            drop[i] = true;
        }
    }
    Ok(Selection { drop, relabel })
}

/// Agreement/disagreement counts of top-1 confidence in `bins` equal-width
/// bins over [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub bin_low: f64,
    pub bin_high: f64,
    pub agree: usize,
    pub disagree: usize,
}

pub fn confidence_histogram(records: &[PredictionRecord], labels: &[u32], bins: usize) -> Result<Vec<HistogramBin>> {
    if bins < 2 {
        return Err(Error::config("histogram needs at least two bins"));
    }
    if records.len() != labels.len() {
        return Err(Error::Shape("records and labels differ in length".into()));
    }
    let mut hist: Vec<HistogramBin> = (0..bins)
        .map(|b| HistogramBin {
            bin_low: b as f64 / bins as f64,
            bin_high: (b + 1) as f64 / bins as f64,
            agree: 0,
            disagree: 0,
        })
        .collect();
    for (r, &l) in records.iter().zip(labels) {
        let p = r.top1().map_or(0.0, |t| t.1);
        let b = ((p * bins as f64) as usize).min(bins - 1);
        if mismatched(r, l) {
            hist[b].disagree += 1;
        } else {
            hist[b].agree += 1;
        }
    }
    Ok(hist)
}

/// Mean top-1 confidence of agreeing and of disagreeing samples.
pub fn mean_confidence_by_agreement(records: &[PredictionRecord], labels: &[u32]) -> (Option<f64>, Option<f64>) {
    let (mut sa, mut na, mut sd, mut nd) = (0.0, 0usize, 0.0, 0usize);
    for (r, &l) in records.iter().zip(labels) {
        let p = r.top1().map_or(0.0, |t| t.1);
        if mismatched(r, l) {
            sd += p;
            nd += 1;
        } else {
            sa += p;
            na += 1;
        }
    }
    ((na > 0).then(|| sa / na as f64), (nd > 0).then(|| sd / nd as f64))
}

pub fn histogram_csv(hist: &[HistogramBin]) -> String {
    let mut out = String::from("bin_low,bin_high,agree,disagree\n");
    for b in hist {
        out.push_str(&format!("{},{},{},{}\n", b.bin_low, b.bin_high, b.agree, b.disagree));
    }
    out
}

/// Oracle bookkeeping for one round. Precision is the share of dropped
/// samples whose label was wrong (1 when nothing was dropped); recall is the
/// share of wrongly labelled survivors that were dropped (1 when there were
/// none).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleaningRound {
    pub round: usize,
    pub threshold: f64,
    pub kept: usize,
    pub dropped: usize,
    pub relabeled: usize,
    pub relabeled_correct: usize,
    pub protected: usize,
    pub oracle_precision: f64,
    pub oracle_recall: f64,
    pub post_retrain_val_top1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleaningHistory {
    pub initial_val_top1: f64,
    pub rounds: Vec<CleaningRound>,
    /// Surviving dataset positions after the last round.
    pub survivors: Vec<usize>,
    /// Dataset position to new label, for every relabeled sample.
    pub relabels: BTreeMap<usize, u32>,
}

#[derive(Debug, Clone)]
pub struct CleanOutcome {
    /// Surviving dataset positions, ascending.
    pub kept: Vec<usize>,
    /// Effective label of every dataset position.
    pub labels: Vec<u32>,
    /// Per round, which dataset positions that round dropped.
    pub round_drops: Vec<Vec<bool>>,
    pub history: CleaningHistory,
    pub params: ModelParams<f32>,
}

/// Top-1 accuracy of `params` against `data`'s given labels.
pub fn top1_accuracy(params: &ModelParams<f32>, data: &Dataset) -> Result<f64> {
    let probs = predict_dataset(params, data)?;
    let hits = probs.iter().zip(&data.labels).filter(|(p, &l)| argmax(p) == l as usize).count();
    Ok(hits as f64 / data.len().max(1) as f64)
}

/// Restores, for every class a selection would empty, the sample with the
/// highest probability for that class. Returns how many were restored.
fn protect_classes(records: &[PredictionRecord], labels: &[u32], sel: &mut Selection, num_classes: usize) -> usize {
    let mut protected = 0;
    loop {
        let after: Vec<u32> = labels
            .iter()
            .enumerate()
            .filter(|(j, _)| !sel.drop[*j])
            .map(|(j, &l)| sel.relabel[j].unwrap_or(l))
            .collect();
        let counts = count_labels(&after, num_classes);
        let before = count_labels(labels, num_classes);
        let Some(class) = (0..num_classes).find(|&c| before[c] > 0 && counts[c] == 0) else {
            return protected;
        };
        let best = (0..labels.len())
            .filter(|&j| labels[j] == class as u32)
            .max_by(|&a, &b| {
                records[a]
                    .prob_of(class as u32)
                    .total_cmp(&records[b].prob_of(class as u32))
                    .then(b.cmp(&a))
            })
            .expect("class had samples before the round");
        sel.drop[best] = false;
        sel.relabel[best] = None;
        protected += 1;
    }
}

fn exhausted_class(labels: &[u32], sel: &Selection, num_classes: usize) -> Option<usize> {
    let before = count_labels(labels, num_classes);
    let after: Vec<u32> = labels
        .iter()
        .enumerate()
        .filter(|(j, _)| !sel.drop[*j])
        .map(|(j, &l)| sel.relabel[j].unwrap_or(l))
        .collect();
    let after = count_labels(&after, num_classes);
    (0..num_classes).find(|&c| before[c] > 0 && after[c] == 0)
}

/// Inputs shared by every round of [`iterative_clean`].
#[derive(Debug, Clone, Copy)]
pub struct CleanContext<'a> {
    pub train: &'a Dataset,
    pub val: &'a Dataset,
    pub model: &'a ModelConfig,
    pub plan: &'a TrainPlan,
    pub cfg: &'a CleaningConfig,
}

/// Runs `cfg.rounds` score/select/apply/retrain rounds. `initial` is the
/// model that scores the first round; without one, a model is trained on
/// the full set first.
pub fn iterative_clean(ctx: CleanContext<'_>, initial: Option<ModelParams<f32>>, seed: u64) -> Result<CleanOutcome> {
    let CleanContext { train: data, val, model, plan, cfg } = ctx;
    cfg.validate()?;
    model.validate()?;
    let c = data.num_classes();
    let mut labels = data.labels.clone();
    let mut kept: Vec<usize> = (0..data.len()).collect();
    let round_plan = match cfg.retrain_epochs_per_round {
        Some(e) => TrainPlan { optim: plan.optim.rescaled(e), ..plan.clone() },
        None => plan.clone(),
    };
    let mut params = match initial {
        Some(p) => p,
        None => {
            let s = rng::derive(seed, "clean-round0");
            let mut p = init_params(model, c, s)?;
            train(&mut p, TrainView::new(data, &kept, &labels)?, plan, s)?;
            p
        }
    };
    let mut history = CleaningHistory {
        initial_val_top1: top1_accuracy(&params, val)?,
        rounds: Vec::new(),
        survivors: Vec::new(),
        relabels: BTreeMap::new(),
    };
    let mut round_drops = Vec::new();
    for round in 1..=cfg.rounds {
        let records = score_training_set(&params, data, &kept, cfg.top_k)?;
        let current: Vec<u32> = kept.iter().map(|&i| labels[i]).collect();
        let mut sel = select_noisy(&records, &current, cfg)?;
        let protected = if cfg.protect_last_per_class {
            protect_classes(&records, &current, &mut sel, c)
        } else {
            0
        };
        if let Some(class) = exhausted_class(&current, &sel, c) {
            return Err(Error::ClassExhausted { class });
        }

        let wrong = |j: usize| current[j] != data.true_labels[kept[j]];
        let wrong_total = (0..kept.len()).filter(|&j| wrong(j)).count();
        let dropped = sel.dropped();
        let true_drops = (0..kept.len()).filter(|&j| sel.drop[j] && wrong(j)).count();
        let relabeled_correct = (0..kept.len())
            .filter(|&j| sel.relabel[j] == Some(data.true_labels[kept[j]]))
            .count();

        let mut mask = vec![false; data.len()];
        let mut next = Vec::with_capacity(kept.len() - dropped);
        for (j, &i) in kept.iter().enumerate() {
            if sel.drop[j] {
                mask[i] = true;
            } else {
                if let Some(new) = sel.relabel[j] {
                    labels[i] = new;
                    history.relabels.insert(i, new);
                }
                next.push(i);
            }
        }
        kept = next;

        let s = rng::derive(seed, "clean-retrain");
        if !cfg.warm_start {
            params = init_params(model, c, s)?;
        }
        train(&mut params, TrainView::new(data, &kept, &labels)?, &round_plan, s)?;

        history.rounds.push(CleaningRound {
            round,
            threshold: resolve_threshold(&records, &current, cfg),
            kept: kept.len(),
            dropped,
            relabeled: sel.relabeled(),
            relabeled_correct,
            protected,
            oracle_precision: if dropped == 0 { 1.0 } else { true_drops as f64 / dropped as f64 },
            oracle_recall: if wrong_total == 0 { 1.0 } else { true_drops as f64 / wrong_total as f64 },
            post_retrain_val_top1: top1_accuracy(&params, val)?,
        });
        round_drops.push(mask);
    }
    history.survivors = kept.clone();
    Ok(CleanOutcome { kept, labels, round_drops, history, params })
}

/// Writes `history.json`, `drop_mask_round{r}.u8` (one byte per sample) and
/// `labels.u32` (little-endian effective labels) into `dir`.
pub fn write_outcome(dir: &Path, outcome: &CleanOutcome) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("history.json"), serde_json::to_vec_pretty(&outcome.history)?)?;
    for (r, mask) in outcome.round_drops.iter().enumerate() {
        let bytes: Vec<u8> = mask.iter().map(|&d| d as u8).collect();
        fs::write(dir.join(format!("drop_mask_round{}.u8", r + 1)), bytes)?;
    }
    let labels: Vec<u8> = outcome.labels.iter().flat_map(|l| l.to_le_bytes()).collect();
    fs::write(dir.join("labels.u32"), labels)?;
    Ok(())
}
