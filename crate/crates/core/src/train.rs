//! AdamW, class-balanced sampling, early stopping and the cross-validation driver.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Real, Tensor};
use crate::metrics::{self, FoldMetrics, MetricsError, ScoredExample};
use crate::model::{self, LossConfig, ModelConfig, ModelError, ModelInput, ModelParams};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("gradient for `{name}` has shape {got:?}, parameter has {want:?}")]
    ShapeMismatch { name: String, got: Vec<usize>, want: Vec<usize> },
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("fold {fold}: {source}")]
    Fold { fold: usize, source: Box<TrainError> },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub weight_decay: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    pub seed: u64,
    pub lambda_cls: f64,
    pub lambda_temp: f64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            batch_size: 4,
            max_epochs: 200,
            patience: 10,
            weight_decay: 0.01,
            betas: [0.9, 0.999],
            eps: 1e-8,
            seed: 0,
            lambda_cls: 1.0,
            lambda_temp: 0.1,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.patience < 1 {
            return bad("patience must be at least 1".into());
        }
        if self.batch_size < 1 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if self.betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return bad(format!("betas must lie in [0, 1), got {:?}", self.betas));
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return bad(format!("eps must be positive, got {}", self.eps));
        }
        self.loss_config().validate()?;
        Ok(())
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig { lambda_cls: self.lambda_cls, lambda_temp: self.lambda_temp }
    }
}

/// SplitMix64 finalizer, used to give every fold, split and epoch its own stream.
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    let mut z = base ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x6A09_E667_F3BC_C909);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<F> {
    pub m: BTreeMap<String, Tensor<F>>,
    pub v: BTreeMap<String, Tensor<F>>,
    pub t: u64,
}

impl<F: Real> OptimizerState<F> {
    pub fn new(params: &ModelParams<F>) -> Self {
        let zeros: BTreeMap<_, _> = params.tensors.iter().map(|(k, t)| (k.clone(), Tensor::zeros(t.shape()))).collect();
        Self { m: zeros.clone(), v: zeros, t: 0 }
    }
}

/// One AdamW update with decoupled weight decay.
pub fn adamw_step<F: Real>(
    params: &mut ModelParams<F>,
    grads: &BTreeMap<String, Tensor<F>>,
    state: &mut OptimizerState<F>,
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    for (name, p) in &params.tensors {
        let g = grads.get(name).ok_or_else(|| TrainError::ShapeMismatch { name: name.clone(), got: vec![], want: p.shape().to_vec() })?;
        if g.shape() != p.shape() {
            return Err(TrainError::ShapeMismatch { name: name.clone(), got: g.shape().to_vec(), want: p.shape().to_vec() });
        }
    }
    state.t += 1;
    let f = F::from_f64_lossy;
    let (b1, b2) = (f(cfg.betas[0]), f(cfg.betas[1]));
    let c1 = F::one() - b1.powi(state.t as i32);
    let c2 = F::one() - b2.powi(state.t as i32);
    let (lr, eps, wd) = (f(cfg.lr), f(cfg.eps), f(cfg.weight_decay));
    for (name, p) in params.tensors.iter_mut() {
        let g = grads[name].data();
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape())).data_mut();
        let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape())).data_mut();
        for (((theta, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + (F::one() - b1) * gi;
            *vi = b2 * *vi + (F::one() - b2) * gi * gi;
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            *theta -= lr * (mhat / (vhat.sqrt() + eps) + wd * *theta);
        }
    }
    Ok(())
}

/// `n_draws` indices drawn with replacement, each with probability inversely
/// proportional to the size of its class.
pub fn weighted_sampler(labels: &[u8], seed: u64, n_draws: usize) -> Result<Vec<usize>, MetricsError> {
    let first = *labels.first().ok_or(MetricsError::Empty)?;
    let ones = labels.iter().filter(|&&l| l == 1).count();
    let zeros = labels.len() - ones;
    if ones == 0 || zeros == 0 {
        return Err(MetricsError::OneClassOnly(first));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(MetricsError::Invalid("labels must be 0 or 1".into()));
    }
    let weights: Vec<f64> = labels.iter().map(|&l| 1.0 / if l == 1 { ones } else { zeros } as f64).collect();
    let dist = WeightedIndex::new(&weights).map_err(|e| MetricsError::Invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n_draws).map(|_| dist.sample(&mut rng)).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StopDecision {
    pub stop: bool,
    pub best_epoch: usize,
}

/// Stops once `patience` epochs have passed without a strict improvement on
/// the best validation AUC; the best epoch is the earliest maximum.
pub fn early_stopping(history: &[f64], patience: usize) -> StopDecision {
    assert!(!history.is_empty(), "early_stopping needs at least one epoch");
    let mut best_epoch = 0;
    for (i, &v) in history.iter().enumerate() {
        if v > history[best_epoch] {
            best_epoch = i;
        }
    }
    StopDecision { stop: history.len() - 1 - best_epoch >= patience, best_epoch }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auc: f64,
    pub wall_seconds: f64,
}

/// One labelled utterance ready for the model.
#[derive(Clone, Debug)]
pub struct Example<F> {
    pub id: String,
    pub subject_id: String,
    pub label: u8,
    pub input: ModelInput<F>,
}

fn check_split<F>(set: &[Example<F>], what: &str) -> Result<(), TrainError> {
    let ones = set.iter().filter(|e| e.label == 1).count();
    if set.is_empty() {
        return Err(TrainError::Metrics(MetricsError::Empty));
    }
    if ones == 0 || ones == set.len() {
        log::warn!("{what} set holds a single class");
        return Err(TrainError::Metrics(MetricsError::OneClassOnly(set[0].label)));
    }
    Ok(())
}

/// Probability of class 1 for every example, in order.
pub fn score_examples<F: Real>(params: &ModelParams<F>, set: &[Example<F>]) -> Result<Vec<ScoredExample>, TrainError> {
    set.par_iter()
        .map(|e| {
            let (y, _) = model::forward(params, &e.input)?;
            Ok(ScoredExample { score: y[1].as_f64(), label: e.label, subject_id: e.subject_id.clone() })
        })
        .collect()
}

fn batch_gradient<F: Real>(
    params: &ModelParams<F>,
    batch: &[&Example<F>],
    loss_cfg: &LossConfig,
) -> Result<(f64, BTreeMap<String, Tensor<F>>), TrainError> {
    let parts: Vec<model::LossGrad<F>> =
        batch.par_iter().map(|e| model::loss_and_grad(params, &e.input, e.label, loss_cfg)).collect::<Result<_, _>>()?;
    let scale = F::one() / F::from_f64_lossy(batch.len() as f64);
    let mut iter = parts.into_iter();
    let first = iter.next().expect("batch is nonempty");
    let mut loss = first.loss.as_f64();
    let mut grads = first.grads;
    for part in iter {
        loss += part.loss.as_f64();
        for (name, g) in part.grads {
            let acc = grads.get_mut(&name).expect("same parameter set");
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += *b;
            }
        }
    }
    for g in grads.values_mut() {
        for a in g.data_mut() {
            *a *= scale;
        }
    }
    Ok((loss / batch.len() as f64, grads))
}

/// Trains from `initial`, returning the parameters of the best validation
/// epoch and the per-epoch history.
pub fn train_from<F: Real>(
    initial: ModelParams<F>,
    train: &[Example<F>],
    val: &[Example<F>],
    cfg: &TrainConfig,
) -> Result<(ModelParams<F>, Vec<EpochRecord>), TrainError> {
    cfg.validate()?;
    check_split(train, "training")?;
    check_split(val, "validation")?;
    let loss_cfg = cfg.loss_config();
    let labels: Vec<u8> = train.iter().map(|e| e.label).collect();
    let n_batches = train.len().div_ceil(cfg.batch_size);

    let mut params = initial;
    let mut best = params.clone();
    let mut state = OptimizerState::new(&params);
    let mut history: Vec<EpochRecord> = Vec::new();
    let mut aucs = Vec::new();
    for epoch in 0..cfg.max_epochs {
        let start = Instant::now();
        let draws = weighted_sampler(&labels, derive_seed(cfg.seed, 1000 + epoch as u64), n_batches * cfg.batch_size)?;
        let mut total = 0.0;
        for chunk in draws.chunks(cfg.batch_size) {
            let batch: Vec<&Example<F>> = chunk.iter().map(|&i| &train[i]).collect();
            let (loss, grads) = batch_gradient(&params, &batch, &loss_cfg)?;
            total += loss;
            adamw_step(&mut params, &grads, &mut state, cfg)?;
        }
        let val_auc = metrics::auc(&score_examples(&params, val)?)?;
        aucs.push(val_auc);
        let decision = early_stopping(&aucs, cfg.patience);
        if decision.best_epoch == epoch {
            best = params.clone();
        }
        let record = EpochRecord { epoch, train_loss: total / n_batches as f64, val_auc, wall_seconds: start.elapsed().as_secs_f64() };
        log::info!("epoch {epoch}: loss {:.5} val auc {:.4}", record.train_loss, val_auc);
        history.push(record);
        if decision.stop {
            break;
        }
    }
    Ok((best, history))
}

/// Initializes a model from `cfg.seed` and trains it.
pub fn train_one_fold<F: Real>(
    model_cfg: ModelConfig,
    train: &[Example<F>],
    val: &[Example<F>],
    cfg: &TrainConfig,
) -> Result<(ModelParams<F>, Vec<EpochRecord>), TrainError> {
    let initial = ModelParams::init(model_cfg, derive_seed(cfg.seed, 1))?;
    train_from(initial, train, val, cfg)
}

/// Splits `indices` into (train, validation), holding out one fifth of the
/// examples, stratified by label and grouped by subject.
pub fn validation_split<F>(data: &[Example<F>], indices: &[usize], seed: u64) -> Result<(Vec<usize>, Vec<usize>), TrainError> {
    let labels: Vec<u8> = indices.iter().map(|&i| data[i].label).collect();
    let groups: Vec<String> = indices.iter().map(|&i| data[i].subject_id.clone()).collect();
    let folds = metrics::stratified_folds(&labels, 5, seed, Some(&groups))?;
    let val = folds.members(0).into_iter().map(|j| indices[j]).collect();
    let train = folds.complement(0).into_iter().map(|j| indices[j]).collect();
    Ok((train, val))
}

pub struct FoldResult<F> {
    pub metrics: FoldMetrics,
    pub history: Vec<EpochRecord>,
    pub scores: Vec<(String, ScoredExample)>,
    pub params: ModelParams<F>,
}

pub struct CvReport<F> {
    pub folds: Vec<FoldResult<F>>,
    pub mean: [f64; 5],
    pub std: [f64; 5],
}

fn run_fold<F: Real>(
    data: &[Example<F>],
    fold: usize,
    test_idx: &[usize],
    train_idx: &[usize],
    model_cfg: ModelConfig,
    cfg: &TrainConfig,
) -> Result<FoldResult<F>, TrainError> {
    let (fit_idx, val_idx) = validation_split(data, train_idx, derive_seed(cfg.seed, 100 + fold as u64))?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| data[i].clone()).collect::<Vec<_>>();
    let (fit, val, test) = (pick(&fit_idx), pick(&val_idx), pick(test_idx));
    let fold_cfg = TrainConfig { seed: derive_seed(cfg.seed, 200 + fold as u64), ..cfg.clone() };
    let (params, history) = train_one_fold(model_cfg, &fit, &val, &fold_cfg)?;
    check_split(&test, "test")?;
    let scored = score_examples(&params, &test)?;
    let auc = metrics::auc(&scored)?;
    let cm = metrics::confusion_metrics(&scored, 0.5)?;
    let metrics = FoldMetrics {
        fold,
        auc,
        acc: cm.accuracy,
        precision: cm.precision,
        recall: cm.recall,
        f1: cm.f1,
        n_train: train_idx.len(),
        n_test: test.len(),
    };
    let scores = test.iter().map(|e| e.id.clone()).zip(scored).collect();
    Ok(FoldResult { metrics, history, scores, params })
}

/// Stratified, subject-grouped k-fold cross-validation. Folds run in
/// parallel; each trains on the other folds minus a fifth held out for early
/// stopping. When `out_dir` is given, writes `metrics.csv` and per-fold
/// `fold<k>/{params.bin, epochs.csv, scores.csv, roc.csv}`.
pub fn run_cv<F: Real>(
    data: &[Example<F>],
    model_cfg: ModelConfig,
    cfg: &TrainConfig,
    k: usize,
    out_dir: Option<&Path>,
) -> Result<CvReport<F>, TrainError> {
    cfg.validate()?;
    model_cfg.validate()?;
    let labels: Vec<u8> = data.iter().map(|e| e.label).collect();
    let groups: Vec<String> = data.iter().map(|e| e.subject_id.clone()).collect();
    let assignment = metrics::stratified_folds(&labels, k, cfg.seed, Some(&groups))?;
    let folds: Vec<FoldResult<F>> = (0..k)
        .into_par_iter()
        .map(|fold| {
            run_fold(data, fold, &assignment.members(fold), &assignment.complement(fold), model_cfg, cfg)
                .map_err(|e| TrainError::Fold { fold, source: Box::new(e) })
        })
        .collect::<Result<_, _>>()?;
    let rows: Vec<FoldMetrics> = folds.iter().map(|f| f.metrics.clone()).collect();
    let (mean, std) = metrics::summarize(&rows);
    if let Some(dir) = out_dir {
        write_cv_outputs(dir, &folds)?;
    }
    Ok(CvReport { folds, mean, std })
}

pub fn fold_dir(run_dir: &Path, fold: usize) -> PathBuf {
    run_dir.join(format!("fold{fold}"))
}

fn write_cv_outputs<F: Real>(dir: &Path, folds: &[FoldResult<F>]) -> Result<(), TrainError> {
    std::fs::create_dir_all(dir)?;
    for f in folds {
        let fd = fold_dir(dir, f.metrics.fold);
        std::fs::create_dir_all(&fd)?;
        model::save_params(&f.params, &fd.join("params.bin"))?;
        write_epochs_csv(&fd.join("epochs.csv"), &f.history)?;
        write_scores_csv(&fd.join("scores.csv"), &f.scores)?;
        let ex: Vec<ScoredExample> = f.scores.iter().map(|(_, s)| s.clone()).collect();
        metrics::write_roc_csv(&fd.join("roc.csv"), &metrics::roc_points(&ex)?)?;
    }
    let rows: Vec<FoldMetrics> = folds.iter().map(|f| f.metrics.clone()).collect();
    metrics::write_metrics_csv(&dir.join("metrics.csv"), &rows)?;
    Ok(())
}

pub fn write_epochs_csv(path: &Path, history: &[EpochRecord]) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "epoch,train_loss,val_auc,wall_seconds")?;
    for r in history {
        writeln!(f, "{},{:.8},{:.6},{:.3}", r.epoch, r.train_loss, r.val_auc, r.wall_seconds)?;
    }
    f.flush()
}

/// `id,subject_id,label,score`, score printed with full precision.
pub fn write_scores_csv(path: &Path, scores: &[(String, ScoredExample)]) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "id,subject_id,label,score")?;
    for (id, s) in scores {
        writeln!(f, "{id},{},{},{:?}", s.subject_id, s.label, s.score)?;
    }
    f.flush()
}

/// Reads a file written by [`write_scores_csv`].
pub fn read_scores_csv(path: &Path) -> Result<Vec<(String, ScoredExample)>, TrainError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| std::io::Error::other(e.to_string()))?;
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| std::io::Error::other(e.to_string()))?;
        let bad = || TrainError::InvalidConfig(format!("malformed score row in {}", path.display()));
        let label: u8 = row.get(2).and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        let score: f64 = row.get(3).and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        out.push((row[0].to_string(), ScoredExample { score, label, subject_id: row[1].to_string() }));
    }
    Ok(out)
}
