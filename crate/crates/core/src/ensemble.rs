//! Truncated top-k prediction records, multi-model averaging and the
//! evaluation metrics (mean class error rate, top-1/top-5, head/medium/tail).

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Default number of classes kept per sample.
pub const DEFAULT_TOP_K: usize = 10;

/// The `k` most probable classes of one sample, most probable first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    #[serde(rename = "id")]
    pub sample_id: u64,
    pub top: Vec<(u32, f64)>,
}

impl PredictionRecord {
    /// Probability listed for `class`, zero when it fell outside the top-k.
    pub fn prob_of(&self, class: u32) -> f64 {
        self.top.iter().find(|(c, _)| *c == class).map_or(0.0, |(_, p)| *p)
    }

    pub fn top1(&self) -> Option<(u32, f64)> {
        self.top.first().copied()
    }
}

/// Index of the largest entry; ties go to the lower index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Keeps the `k` largest non-zero probabilities, descending, ties by lower
/// class index.
pub fn truncate_topk(sample_id: u64, probs: &[f64], k: usize) -> PredictionRecord {
    let mut order: Vec<usize> = (0..probs.len()).filter(|&c| probs[c] > 0.0).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    order.truncate(k.max(1));
    PredictionRecord { sample_id, top: order.into_iter().map(|c| (c as u32, probs[c])).collect() }
}

/// Uniform average of per-model records for one sample. Classes missing from
/// a model's top-k contribute zero; the result is renormalized to sum to one.
pub fn ensemble_average(records: &[&PredictionRecord], num_classes: usize) -> Result<Vec<f64>> {
    let weights = vec![1.0; records.len()];
    ensemble_average_weighted(records, &weights, num_classes)
}

/// Weighted variant of [`ensemble_average`]; weights need not sum to one.
pub fn ensemble_average_weighted(records: &[&PredictionRecord], weights: &[f64], num_classes: usize) -> Result<Vec<f64>> {
    let first = records.first().ok_or_else(|| Error::config("ensemble needs at least one record"))?;
    if weights.len() != records.len() || weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(Error::config("one finite non-negative weight per model is required"));
    }
    if let Some(r) = records.iter().find(|r| r.sample_id != first.sample_id) {
        return Err(Error::IdMismatch(format!("records for samples {} and {}", first.sample_id, r.sample_id)));
    }
    if !(weights.iter().sum::<f64>() > 0.0) {
        return Err(Error::config("ensemble weights sum to zero"));
    }
    // Running weighted mean: identical inputs come back bit-for-bit.
    let mut acc = vec![0.0f64; num_classes];
    let mut dense = vec![0.0f64; num_classes];
    let mut seen = 0.0f64;
    for (r, &w) in records.iter().zip(weights) {
        dense.iter_mut().for_each(|d| *d = 0.0);
        for &(c, p) in &r.top {
            *dense
                .get_mut(c as usize)
                .ok_or_else(|| Error::Validation(format!("class {c} out of range for {num_classes} classes")))? = p;
        }
        if w == 0.0 {
            continue;
        }
        seen += w;
        let step = w / seen;
        for (a, &d) in acc.iter_mut().zip(&dense) {
            *a += step * (d - *a);
        }
    }
    let sum: f64 = acc.iter().sum();
    if !(sum > 0.0) {
        return Err(Error::Numeric(format!("sample {} has no probability mass", first.sample_id)));
    }
    Ok(acc.into_iter().map(|a| a / sum).collect())
}

/// Averages aligned record sets from several models, sample by sample.
pub fn ensemble_sets(sets: &[Vec<PredictionRecord>], num_classes: usize) -> Result<Vec<Vec<f64>>> {
    let n = sets.first().map_or(0, Vec::len);
    if sets.iter().any(|s| s.len() != n) {
        return Err(Error::IdMismatch("record files hold different numbers of samples".into()));
    }
    (0..n)
        .map(|i| {
            let rows: Vec<&PredictionRecord> = sets.iter().map(|s| &s[i]).collect();
            ensemble_average(&rows, num_classes)
        })
        .collect()
}

/// `1 − mean over present classes of (correct_c / count_c)`.
pub fn mean_class_error_rate(predictions: &[u32], labels: &[u32], num_classes: usize) -> Result<f64> {
    let tally = tally(predictions, labels, num_classes)?;
    Ok(mcer_from_tally(&tally))
}

struct Tally {
    correct: Vec<usize>,
    count: Vec<usize>,
}

impl Tally {
    fn per_class(&self) -> Vec<Option<f64>> {
        self.correct
            .iter()
            .zip(&self.count)
            .map(|(&c, &n)| (n > 0).then(|| c as f64 / n as f64))
            .collect()
    }
}

/// With equal class counts the class mean is the pooled rate, computed the
/// same way as top-1 so that the two agree bitwise.
fn mcer_from_tally(t: &Tally) -> f64 {
    let present: Vec<usize> = (0..t.count.len()).filter(|&c| t.count[c] > 0).collect();
    let n0 = t.count[present[0]];
    if present.iter().all(|&c| t.count[c] == n0) {
        let correct: usize = present.iter().map(|&c| t.correct[c]).sum();
        let total: usize = present.iter().map(|&c| t.count[c]).sum();
        return 1.0 - correct as f64 / total as f64;
    }
    let accs: Vec<f64> = t.per_class().into_iter().flatten().collect();
    1.0 - accs.iter().sum::<f64>() / accs.len() as f64
}

fn tally(predictions: &[u32], labels: &[u32], num_classes: usize) -> Result<Tally> {
    if labels.is_empty() {
        return Err(Error::config("cannot evaluate an empty prediction set"));
    }
    if predictions.len() != labels.len() {
        return Err(Error::Shape("predictions and labels differ in length".into()));
    }
    let mut correct = vec![0usize; num_classes];
    let mut count = vec![0usize; num_classes];
    for (&p, &l) in predictions.iter().zip(labels) {
        let l = l as usize;
        if l >= num_classes {
            return Err(Error::Validation(format!("label {l} out of range for {num_classes} classes")));
        }
        count[l] += 1;
        if p as usize == l {
            correct[l] += 1;
        }
    }
    Ok(Tally { correct, count })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Head,
    Medium,
    Tail,
}

/// Head/medium/tail membership by descending training count. Nominal
/// boundaries sit at ⌈C/3⌉ and ⌈2C/3⌉; a class tied in count with the last
/// class of a headier split joins that split.
pub fn tercile_splits(class_counts: &[usize]) -> Vec<Split> {
    let c = class_counts.len();
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| class_counts[b].cmp(&class_counts[a]).then(a.cmp(&b)));
    let extend = |mut b: usize| {
        while b > 0 && b < c && class_counts[order[b]] == class_counts[order[b - 1]] {
            b += 1;
        }
        b
    };
    let b1 = extend(c.div_ceil(3));
    let b2 = extend((2 * c).div_ceil(3).max(b1));
    let mut splits = vec![Split::Tail; c];
    for (rank, &class) in order.iter().enumerate() {
        splits[class] = if rank < b1 {
            Split::Head
        } else if rank < b2 {
            Split::Medium
        } else {
            Split::Tail
        };
    }
    splits
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mean_class_error_rate: f64,
    pub top1_accuracy: f64,
    pub top5_accuracy: f64,
    /// `None` for classes without evaluation samples.
    pub per_class_accuracy: Vec<Option<f64>>,
    /// Mean per-class accuracy of the head, medium and tail splits.
    pub split_accuracy: [f64; 3],
}

fn top5_hit(row: &[f64], label: usize) -> bool {
    let p = row[label];
    // Rank under the argmax tie rule: strictly larger, or equal at a lower index.
    let ahead = row.iter().enumerate().filter(|(c, v)| **v > p || (**v == p && *c < label)).count();
    ahead < 5
}

/// Full report from dense probability rows.
pub fn eval_report(probs: &[Vec<f64>], labels: &[u32], class_counts: &[usize]) -> Result<EvalReport> {
    let c = class_counts.len();
    if probs.len() != labels.len() {
        return Err(Error::Shape("probability rows and labels differ in length".into()));
    }
    if probs.iter().any(|r| r.len() != c) {
        return Err(Error::Shape(format!("probability rows must have {c} entries")));
    }
    let preds: Vec<u32> = probs.iter().map(|r| argmax(r) as u32).collect();
    let tally = tally(&preds, labels, c)?;
    let per_class = tally.per_class();
    let n = labels.len() as f64;
    let top1 = preds.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / n;
    let top5 = probs.iter().zip(labels).filter(|(r, &l)| top5_hit(r, l as usize)).count() as f64 / n;
    let splits = tercile_splits(class_counts);
    let mut split_accuracy = [0.0; 3];
    for (k, s) in [Split::Head, Split::Medium, Split::Tail].into_iter().enumerate() {
        let accs: Vec<f64> = (0..c).filter(|&i| splits[i] == s).filter_map(|i| per_class[i]).collect();
        split_accuracy[k] = if accs.is_empty() { 0.0 } else { accs.iter().sum::<f64>() / accs.len() as f64 };
    }
    Ok(EvalReport {
        mean_class_error_rate: mcer_from_tally(&tally),
        top1_accuracy: top1,
        top5_accuracy: top5,
        per_class_accuracy: per_class,
        split_accuracy,
    })
}

/// Report from sparse records (densified with the zero-fill rule).
pub fn eval_report_records(records: &[PredictionRecord], labels: &[u32], class_counts: &[usize]) -> Result<EvalReport> {
    let probs = records
        .iter()
        .map(|r| ensemble_average(&[r], class_counts.len()))
        .collect::<Result<Vec<_>>>()?;
    eval_report(&probs, labels, class_counts)
}

/// Per-class table: `class,count,accuracy,split`.
pub fn per_class_csv(report: &EvalReport, class_counts: &[usize]) -> String {
    let splits = tercile_splits(class_counts);
    let mut out = String::from("class,count,accuracy,split\n");
    for (c, acc) in report.per_class_accuracy.iter().enumerate() {
        let split = match splits[c] {
            Split::Head => "head",
            Split::Medium => "medium",
            Split::Tail => "tail",
        };
        let acc = acc.map_or_else(String::new, |a| a.to_string());
        out.push_str(&format!("{c},{},{acc},{split}\n", class_counts[c]));
    }
    out
}

/// One JSON object per line: `{"id": int, "top": [[class, prob], …]}`.
pub fn write_records(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<PredictionRecord>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut records = Vec::new();
    for line in BufReader::new(fs::File::open(path)?).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line)?);
    }
    Ok(records)
}
