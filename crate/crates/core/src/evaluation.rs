//! Fused sliding-window inference, scoring metrics and leave-one-subject-out
//! cross-validation.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{StageLabel, N_CLASSES};
use crate::network::{epoch_features, predict_from_features, HyperParams, ModelParams, NetworkError};
use crate::numerics::Tensor;
use crate::rng::substream;
use crate::spectrogram::{EpochImage, PreparedRecording};
use crate::training::TrainConfig;
use crate::transfer::{run_regime, train_from_scratch, Regime};

/// Clamp applied to every probability before taking its log.
pub const FUSION_FLOOR: f64 = 1e-12;
const FEATURE_CHUNK: usize = 256;
const WINDOW_CHUNK: usize = 128;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no decisions to fuse")]
    EmptyDecisionSet,
    #[error("confusion matrix is empty")]
    EmptyConfusion,
    #[error("recording {subject} has {n_epochs} epochs, fewer than the sequence length {seq_len}")]
    TooShortRecording {
        subject: String,
        n_epochs: usize,
        seq_len: usize,
    },
    #[error("cohort of {0} subjects is too small for leave-one-subject-out (need at least 3)")]
    CohortTooSmall(usize),
    #[error("could not build a worker pool: {0}")]
    ThreadPool(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

pub type Probs = [f64; N_CLASSES];

/// Product of the decisions renormalized to sum 1, computed in log space
/// with every entry clamped to at least [`FUSION_FLOOR`].
pub fn multiplicative_fuse(decisions: &[Probs]) -> Result<Probs, EvalError> {
    if decisions.is_empty() {
        return Err(EvalError::EmptyDecisionSet);
    }
    let mut logs = [0.0; N_CLASSES];
    for d in decisions {
        for (l, p) in logs.iter_mut().zip(d) {
            *l += p.max(FUSION_FLOOR).ln();
        }
    }
    let mx = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out = logs.map(|l| (l - mx).exp());
    let z: f64 = out.iter().sum();
    for v in &mut out {
        *v /= z;
    }
    Ok(out)
}

/// Index of the largest entry; ties go to the lower index.
pub fn argmax(p: &Probs) -> usize {
    let mut best = 0;
    for i in 1..N_CLASSES {
        if p[i] > p[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct SlidingOutput {
    pub subject_id: String,
    /// Fused probabilities per epoch.
    pub fused: Vec<Probs>,
    pub predicted: Vec<StageLabel>,
    pub reference: Vec<StageLabel>,
    /// Number of windows covering each epoch.
    pub decisions: Vec<usize>,
}

fn features_for<S: crate::numerics::Real>(
    params: &ModelParams<S>,
    hp: &HyperParams,
    images: &[EpochImage],
) -> Result<Tensor<S>, EvalError> {
    let mut data = Vec::new();
    let mut width = 0;
    for chunk in images.chunks(FEATURE_CHUNK) {
        let refs: Vec<&EpochImage> = chunk.iter().collect();
        let f = epoch_features(params, hp, &refs)?;
        width = f.dims2().1;
        data.extend_from_slice(f.data());
    }
    Ok(Tensor::new(vec![images.len(), width], data).map_err(NetworkError::from)?)
}

/// Classifies every stride-1 window of length `seq_len`, gives each epoch
/// the decisions of all windows covering it and fuses them.
pub fn sliding_infer(
    params: &ModelParams<f32>,
    hp: &HyperParams,
    rec: &PreparedRecording,
    seq_len: usize,
) -> Result<SlidingOutput, EvalError> {
    let n = rec.n_epochs();
    if seq_len == 0 || n < seq_len {
        return Err(EvalError::TooShortRecording {
            subject: rec.subject_id.clone(),
            n_epochs: n,
            seq_len,
        });
    }
    let features = features_for(params, hp, &rec.images)?;
    let starts: Vec<usize> = (0..=n - seq_len).collect();
    let mut per_epoch: Vec<Vec<Probs>> = vec![Vec::new(); n];
    for chunk in starts.chunks(WINDOW_CHUNK) {
        let probs = predict_from_features(params, &features, chunk, seq_len)?;
        for (&s, window) in chunk.iter().zip(probs) {
            for (i, p) in window.into_iter().enumerate() {
                per_epoch[s + i].push(p);
            }
        }
    }
    let fused = per_epoch
        .iter()
        .map(|d| multiplicative_fuse(d))
        .collect::<Result<Vec<_>, _>>()?;
    let predicted = fused
        .iter()
        .map(|p| StageLabel::from_index(argmax(p)).expect("class index"))
        .collect();
    Ok(SlidingOutput {
        subject_id: rec.subject_id.clone(),
        fused,
        predicted,
        reference: rec.labels.clone(),
        decisions: per_epoch.iter().map(Vec::len).collect(),
    })
}

/// Counts with rows = reference and columns = prediction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion(pub [[u64; N_CLASSES]; N_CLASSES]);

impl Confusion {
    pub fn from_pairs(reference: &[StageLabel], predicted: &[StageLabel]) -> Self {
        let mut c = Self::default();
        for (r, p) in reference.iter().zip(predicted) {
            c.0[r.index()][p.index()] += 1;
        }
        c
    }

    pub fn add(&mut self, other: &Confusion) {
        for i in 0..N_CLASSES {
            for j in 0..N_CLASSES {
                self.0[i][j] += other.0[i][j];
            }
        }
    }

    pub fn total(&self) -> u64 {
        self.0.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..N_CLASSES).map(|i| self.0[i][i]).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub confusion: Confusion,
    pub accuracy: f64,
    pub kappa: f64,
    pub mf1: f64,
    /// Macro-averaged one-vs-rest recall.
    pub sensitivity: f64,
    /// Macro-averaged one-vs-rest true-negative rate.
    pub specificity: f64,
    pub per_class_f1: [f64; N_CLASSES],
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// All metrics from the confusion matrix alone. Undefined ratios (0/0) are
/// taken as 0; kappa is 1 when chance agreement is already perfect and the
/// observed agreement is too.
pub fn compute_metrics(confusion: &Confusion) -> Result<EvalReport, EvalError> {
    let total = confusion.total() as f64;
    if total == 0.0 {
        return Err(EvalError::EmptyConfusion);
    }
    let c = |i: usize, j: usize| confusion.0[i][j] as f64;
    let row = |i: usize| (0..N_CLASSES).map(|j| c(i, j)).sum::<f64>();
    let col = |j: usize| (0..N_CLASSES).map(|i| c(i, j)).sum::<f64>();
    let p_o = confusion.trace() as f64 / total;
    let p_e: f64 = (0..N_CLASSES).map(|k| row(k) * col(k)).sum::<f64>() / (total * total);
    let kappa = if (1.0 - p_e).abs() < f64::EPSILON {
        if p_o >= 1.0 { 1.0 } else { 0.0 }
    } else {
        (p_o - p_e) / (1.0 - p_e)
    };
    let mut f1 = [0.0; N_CLASSES];
    let mut sens = 0.0;
    let mut spec = 0.0;
    for k in 0..N_CLASSES {
        let tp = c(k, k);
        let fn_ = row(k) - tp;
        let fp = col(k) - tp;
        let tn = total - tp - fn_ - fp;
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        f1[k] = ratio(2.0 * precision * recall, precision + recall);
        sens += recall;
        spec += ratio(tn, tn + fp);
    }
    let n = N_CLASSES as f64;
    Ok(EvalReport {
        confusion: *confusion,
        accuracy: p_o,
        kappa,
        mf1: f1.iter().sum::<f64>() / n,
        sensitivity: sens / n,
        specificity: spec / n,
        per_class_f1: f1,
    })
}

impl EvalReport {
    /// `key: value` lines followed by the confusion matrix as tab-separated
    /// rows (reference stage first).
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "epochs: {}", self.confusion.total());
        let _ = writeln!(s, "accuracy: {:.6}", self.accuracy);
        let _ = writeln!(s, "kappa: {:.6}", self.kappa);
        let _ = writeln!(s, "mf1: {:.6}", self.mf1);
        let _ = writeln!(s, "sensitivity: {:.6}", self.sensitivity);
        let _ = writeln!(s, "specificity: {:.6}", self.specificity);
        for (k, f) in StageLabel::ALL.iter().zip(self.per_class_f1) {
            let _ = writeln!(s, "f1_{}: {:.6}", k.name(), f);
        }
        s.push_str("confusion:\n");
        let names: Vec<&str> = StageLabel::ALL.iter().map(|l| l.name()).collect();
        let _ = writeln!(s, "ref\\pred\t{}", names.join("\t"));
        for (k, r) in StageLabel::ALL.iter().zip(self.confusion.0) {
            let cells: Vec<String> = r.iter().map(u64::to_string).collect();
            let _ = writeln!(s, "{}\t{}", k.name(), cells.join("\t"));
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// One stage index per line.
pub fn format_hypnogram(labels: &[StageLabel]) -> String {
    labels.iter().map(|l| format!("{}\n", l.index())).collect()
}

/// Fused inference over every recording, pooled into one report.
pub fn evaluate_cohort(
    params: &ModelParams<f32>,
    hp: &HyperParams,
    cohort: &[PreparedRecording],
) -> Result<(EvalReport, Vec<SlidingOutput>), EvalError> {
    let mut confusion = Confusion::default();
    let mut outputs = Vec::with_capacity(cohort.len());
    for rec in cohort {
        let out = sliding_infer(params, hp, rec, hp.seq_len)?;
        confusion.add(&Confusion::from_pairs(&out.reference, &out.predicted));
        outputs.push(out);
    }
    Ok((compute_metrics(&confusion)?, outputs))
}

/// Pooled fused-inference accuracy.
pub fn cohort_accuracy(params: &ModelParams<f32>, hp: &HyperParams, cohort: &[PreparedRecording]) -> Result<f64, EvalError> {
    Ok(evaluate_cohort(params, hp, cohort)?.0.accuracy)
}

/// Subject counts `(finetune, validation)` for the subjects left after
/// holding one out: the 15/4 proportion, with at least one of each.
pub fn split_sizes(n_rest: usize) -> (usize, usize) {
    let val = ((n_rest as f64 * 4.0 / 19.0).round() as usize).clamp(1, n_rest.saturating_sub(1).max(1));
    (n_rest - val, val)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fold {
    pub test: usize,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

/// Leave-one-subject-out folds with a seeded finetune/validation split.
pub fn loso_folds(n_subjects: usize, seed: u64) -> Result<Vec<Fold>, EvalError> {
    if n_subjects < 3 {
        return Err(EvalError::CohortTooSmall(n_subjects));
    }
    Ok((0..n_subjects)
        .map(|test| {
            let mut rest: Vec<usize> = (0..n_subjects).filter(|&s| s != test).collect();
            rest.shuffle(&mut substream(seed, "split", test as u64));
            let (n_train, _) = split_sizes(rest.len());
            let validation = rest.split_off(n_train);
            rest.sort_unstable();
            let mut validation = validation;
            validation.sort_unstable();
            Fold {
                test,
                train: rest,
                validation,
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub subject_id: String,
    pub fold: Fold,
    pub steps: usize,
    pub report: EvalReport,
    pub hypnogram: Vec<StageLabel>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LosoReport {
    pub folds: Vec<FoldReport>,
    /// Metrics of the summed confusion matrices.
    pub pooled: EvalReport,
    /// Unweighted mean of the per-fold accuracies.
    pub mean_fold_accuracy: f64,
}

/// How each fold obtains its network.
#[derive(Clone, Copy, Debug)]
pub enum FoldStart<'a> {
    Transfer(&'a ModelParams<f32>, Regime),
    /// Fresh initialization, every tensor trainable.
    Scratch,
}

/// Runs every fold (at most `jobs` at once) and pools the results. Each
/// fold derives its own seed from `cfg.seed`, so the outcome does not
/// depend on `jobs`.
pub fn loso_cv(
    cohort: &[PreparedRecording],
    start: FoldStart<'_>,
    hp: &HyperParams,
    cfg: &TrainConfig,
    jobs: usize,
) -> Result<LosoReport, crate::Error> {
    let folds = loso_folds(cohort.len(), cfg.seed)?;
    let run_fold = |fold: &Fold| -> Result<FoldReport, crate::Error> {
        let pick = |ix: &[usize]| ix.iter().map(|&i| cohort[i].clone()).collect::<Vec<_>>();
        let train = pick(&fold.train);
        let val = pick(&fold.validation);
        let test = &cohort[fold.test..fold.test + 1];
        let fold_cfg = TrainConfig {
            seed: substream(cfg.seed, "fold", fold.test as u64).random(),
            ..cfg.clone()
        };
        let result = match start {
            FoldStart::Transfer(p, regime) => run_regime(regime, p, hp, &train, &val, test, &fold_cfg)?,
            FoldStart::Scratch => train_from_scratch(hp, &train, &val, test, &fold_cfg)?,
        };
        Ok(FoldReport {
            subject_id: cohort[fold.test].subject_id.clone(),
            fold: fold.clone(),
            steps: result.steps,
            report: result.report,
            hypnogram: result.outputs.into_iter().flat_map(|o| o.predicted).collect(),
        })
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| EvalError::ThreadPool(e.to_string()))?;
    let reports: Vec<FoldReport> = pool.install(|| folds.par_iter().map(run_fold).collect::<Result<_, _>>())?;
    let mut confusion = Confusion::default();
    for f in &reports {
        confusion.add(&f.report.confusion);
    }
    let mean_fold_accuracy = reports.iter().map(|f| f.report.accuracy).sum::<f64>() / reports.len() as f64;
    Ok(LosoReport {
        pooled: compute_metrics(&confusion)?,
        folds: reports,
        mean_fold_accuracy,
    })
}
