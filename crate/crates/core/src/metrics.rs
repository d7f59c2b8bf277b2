//! AUC, threshold metrics, ROC points and stratified fold assignment.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("both classes are required, only class {0} present")]
    OneClassOnly(u8),
    #[error("empty example list")]
    Empty,
    #[error("class {class} has {have} {unit}, need at least {need} for {need}-fold splitting")]
    TooFewExamples { class: u8, have: usize, need: usize, unit: &'static str },
    #[error("invalid argument: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScoredExample {
    /// Probability of class 1.
    pub score: f64,
    pub label: u8,
    pub subject_id: String,
}

impl ScoredExample {
    pub fn new(score: f64, label: u8) -> Self {
        Self { score, label, subject_id: String::new() }
    }
}

fn check_classes(ex: &[ScoredExample]) -> Result<(usize, usize), MetricsError> {
    let first = ex.first().ok_or(MetricsError::Empty)?.label;
    let pos = ex.iter().filter(|e| e.label == 1).count();
    let neg = ex.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(MetricsError::OneClassOnly(first));
    }
    Ok((pos, neg))
}

/// Mann-Whitney AUC from average ranks; tied pairs count one half.
pub fn auc(ex: &[ScoredExample]) -> Result<f64, MetricsError> {
    let (pos, neg) = check_classes(ex)?;
    let mut idx: Vec<usize> = (0..ex.len()).collect();
    idx.sort_by(|&a, &b| ex[a].score.total_cmp(&ex[b].score));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && ex[idx[j + 1]].score == ex[idx[i]].score {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their average
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += avg * idx[i..=j].iter().filter(|&&k| ex[k].label == 1).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ConfusionMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

fn ratio(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        0.0
    } else {
        a / b
    }
}

/// Predicts class 1 iff `score >= threshold`; 0/0 ratios are 0.
pub fn confusion_metrics(ex: &[ScoredExample], threshold: f64) -> Result<ConfusionMetrics, MetricsError> {
    if ex.is_empty() {
        return Err(MetricsError::Empty);
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for e in ex {
        match (e.score >= threshold, e.label == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let precision = ratio(tp as f64, (tp + fp) as f64);
    let recall = ratio(tp as f64, (tp + fn_) as f64);
    Ok(ConfusionMetrics {
        accuracy: (tp + tn) as f64 / ex.len() as f64,
        precision,
        recall,
        f1: ratio(2.0 * precision * recall, precision + recall),
        tp,
        fp,
        tn,
        fn_,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    pub threshold: f64,
}

/// ROC curve from (0,0) at threshold +inf through every distinct score.
pub fn roc_points(ex: &[ScoredExample]) -> Result<Vec<RocPoint>, MetricsError> {
    let (pos, neg) = check_classes(ex)?;
    let mut sorted: Vec<&ScoredExample> = ex.iter().collect();
    sorted.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut out = vec![RocPoint { fpr: 0.0, tpr: 0.0, threshold: f64::INFINITY }];
    let (mut tp, mut fp) = (0usize, 0usize);
    for (i, e) in sorted.iter().enumerate() {
        if e.label == 1 {
            tp += 1;
        } else {
            fp += 1;
        }
        if i + 1 == sorted.len() || sorted[i + 1].score != e.score {
            out.push(RocPoint { fpr: fp as f64 / neg as f64, tpr: tp as f64 / pos as f64, threshold: e.score });
        }
    }
    Ok(out)
}

pub fn write_roc_csv(path: &Path, points: &[RocPoint]) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "fpr,tpr,threshold")?;
    for p in points {
        writeln!(f, "{:.6},{:.6},{}", p.fpr, p.tpr, if p.threshold.is_finite() { format!("{:.6}", p.threshold) } else { "inf".into() })?;
    }
    f.flush()
}

/// One row of the cross-validation report.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub auc: f64,
    pub acc: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub n_train: usize,
    pub n_test: usize,
}

/// Population mean and standard deviation of each metric column.
pub fn summarize(rows: &[FoldMetrics]) -> ([f64; 5], [f64; 5]) {
    let n = rows.len().max(1) as f64;
    let cols = |r: &FoldMetrics| [r.auc, r.acc, r.precision, r.recall, r.f1];
    let mut mean = [0.0; 5];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(cols(r)) {
            *m += v / n;
        }
    }
    let mut std = [0.0; 5];
    for r in rows {
        for ((s, v), m) in std.iter_mut().zip(cols(r)).zip(mean) {
            *s += (v - m).powi(2) / n;
        }
    }
    (mean, std.map(f64::sqrt))
}

/// `fold,auc,acc,precision,recall,f1,n_train,n_test` with `mean` and `std` footer rows.
pub fn write_metrics_csv(path: &Path, rows: &[FoldMetrics]) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "fold,auc,acc,precision,recall,f1,n_train,n_test")?;
    for r in rows {
        writeln!(f, "{},{:.6},{:.6},{:.6},{:.6},{:.6},{},{}", r.fold, r.auc, r.acc, r.precision, r.recall, r.f1, r.n_train, r.n_test)?;
    }
    let (mean, std) = summarize(rows);
    let n_train = rows.iter().map(|r| r.n_train).sum::<usize>() as f64 / rows.len().max(1) as f64;
    let n_test = rows.iter().map(|r| r.n_test).sum::<usize>() as f64 / rows.len().max(1) as f64;
    writeln!(f, "mean,{:.6},{:.6},{:.6},{:.6},{:.6},{:.1},{:.1}", mean[0], mean[1], mean[2], mean[3], mean[4], n_train, n_test)?;
    writeln!(f, "std,{:.6},{:.6},{:.6},{:.6},{:.6},,", std[0], std[1], std[2], std[3], std[4])?;
    f.flush()
}

/// `fold_of[i]` is the fold of example `i`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldAssignment {
    pub k: usize,
    pub fold_of: Vec<usize>,
}

impl FoldAssignment {
    pub fn members(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_of.len()).filter(|&i| self.fold_of[i] == fold).collect()
    }

    pub fn complement(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_of.len()).filter(|&i| self.fold_of[i] != fold).collect()
    }
}

/// Stratified k-fold assignment. Each class is shuffled with the seed and
/// dealt round-robin, the dealing position carrying over between classes so
/// fold sizes stay balanced. With `groups`, whole subjects are dealt instead:
/// a subject's class is the majority label of its examples and each subject
/// goes to the fold currently holding the fewest examples of that class.
pub fn stratified_folds(labels: &[u8], k: usize, seed: u64, groups: Option<&[String]>) -> Result<FoldAssignment, MetricsError> {
    if k < 2 {
        return Err(MetricsError::Invalid(format!("k must be >= 2, got {k}")));
    }
    if let Some(g) = groups {
        if g.len() != labels.len() {
            return Err(MetricsError::Invalid("groups and labels differ in length".into()));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold_of = vec![usize::MAX; labels.len()];
    match groups {
        None => {
            let mut next = 0;
            for class in [0u8, 1] {
                let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
                if idx.len() < k {
                    return Err(MetricsError::TooFewExamples { class, have: idx.len(), need: k, unit: "examples" });
                }
                idx.shuffle(&mut rng);
                for i in idx {
                    fold_of[i] = next;
                    next = (next + 1) % k;
                }
            }
        }
        Some(groups) => {
            // BTreeMap keeps the pre-shuffle order independent of hashing
            let mut members: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
            for (i, g) in groups.iter().enumerate() {
                members.entry(g.as_str()).or_default().push(i);
            }
            let mut by_class: [Vec<Vec<usize>>; 2] = [Vec::new(), Vec::new()];
            for (_, m) in members {
                let ones = m.iter().filter(|&&i| labels[i] == 1).count();
                by_class[usize::from(2 * ones > m.len())].push(m);
            }
            let mut load = vec![[0usize; 2]; k];
            let mut total = vec![0usize; k];
            for class in [0u8, 1] {
                let gs = &mut by_class[class as usize];
                if gs.len() < k {
                    return Err(MetricsError::TooFewExamples { class, have: gs.len(), need: k, unit: "subjects" });
                }
                gs.shuffle(&mut rng);
                for g in gs.iter() {
                    let f = (0..k).min_by_key(|&f| (load[f][class as usize], total[f], f)).unwrap();
                    for &i in g {
                        fold_of[i] = f;
                        load[f][labels[i] as usize] += 1;
                    }
                    total[f] += g.len();
                }
            }
        }
    }
    Ok(FoldAssignment { k, fold_of })
}
