//! Sequence sampling, Adam, pretraining and early-stopped finetuning.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{StageLabel, N_CLASSES};
use crate::evaluation::{self, EvalError};
use crate::network::{
    sequence_loss, Dropout, HyperParams, ModelParams, Mode, NetworkError, SequenceRef, N_TENSORS,
};
use crate::rng::substream;
use crate::spectrogram::{EpochImage, PreparedRecording};

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error("recording {subject} has {n_epochs} epochs, fewer than the sequence length {seq_len}")]
    TooShortRecording {
        subject: String,
        n_epochs: usize,
        seq_len: usize,
    },
    #[error("no training sequences")]
    EmptyCohort,
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Evaluation(#[from] Box<EvalError>),
}

impl From<EvalError> for TrainingError {
    fn from(e: EvalError) -> Self {
        TrainingError::Evaluation(Box::new(e))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Passes over the sequence pool.
    pub epochs: usize,
    /// Sequences per minibatch.
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip applied before each step.
    pub clip_norm: f64,
    /// Training steps without a validation improvement before stopping.
    pub early_stop_patience: usize,
    /// Validation cadence in steps.
    pub eval_every: usize,
    /// Hard cap on optimizer steps (0 disables it).
    pub max_steps: usize,
    pub seed: u64,
    /// Start finetuning from zero Adam moments.
    pub reset_optimizer: bool,
    /// Weight the loss by inverse class frequency.
    pub class_balanced: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 5.0,
            early_stop_patience: 50,
            eval_every: 10,
            max_steps: 0,
            seed: 0,
            reset_optimizer: true,
            class_balanced: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainingError> {
        let bad = |m: &str| Err(TrainingError::InvalidConfig(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.eval_every == 0 {
            return bad("eval_every must be positive");
        }
        if !(self.lr > 0.0) || !(self.eps > 0.0) || !(self.clip_norm > 0.0) {
            return bad("lr, eps and clip_norm must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        Ok(())
    }
}

/// `L` consecutive epochs of one recording.
#[derive(Clone, Copy, Debug)]
pub struct SequenceSample<'a> {
    pub recording: &'a PreparedRecording,
    pub start: usize,
    pub len: usize,
}

impl<'a> SequenceSample<'a> {
    pub fn images(&self) -> &'a [EpochImage] {
        &self.recording.images[self.start..self.start + self.len]
    }

    pub fn labels(&self) -> &'a [StageLabel] {
        &self.recording.labels[self.start..self.start + self.len]
    }

    fn as_ref(&self) -> SequenceRef<'a> {
        SequenceRef {
            images: self.images(),
            labels: self.labels(),
        }
    }
}

/// Every stride-1 window of length `seq_len`.
pub fn make_sequences(rec: &PreparedRecording, seq_len: usize) -> Result<Vec<SequenceSample<'_>>, TrainingError> {
    let n = rec.n_epochs();
    if seq_len == 0 || n < seq_len {
        return Err(TrainingError::TooShortRecording {
            subject: rec.subject_id.clone(),
            n_epochs: n,
            seq_len,
        });
    }
    Ok((0..=n - seq_len)
        .map(|start| SequenceSample {
            recording: rec,
            start,
            len: seq_len,
        })
        .collect())
}

fn sequence_pool(cohort: &[PreparedRecording], seq_len: usize) -> Result<Vec<SequenceSample<'_>>, TrainingError> {
    let mut pool = Vec::new();
    for rec in cohort {
        pool.extend(make_sequences(rec, seq_len)?);
    }
    if pool.is_empty() {
        return Err(TrainingError::EmptyCohort);
    }
    Ok(pool)
}

/// Adam moments for every canonical tensor.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    /// Little-endian `t`, then every first moment, then every second
    /// moment, all in canonical tensor order.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = self.t.to_le_bytes().to_vec();
        for v in self.m.iter().chain(&self.v).flatten() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Inverse of [`AdamState::encode`] for parameters shaped like `params`.
    pub fn decode(bytes: &[u8], params: &ModelParams<f32>) -> Result<Self, TrainingError> {
        let mut state = Self::new(params);
        let n: usize = state.m.iter().map(Vec::len).sum();
        if bytes.len() != 8 + 16 * n {
            return Err(TrainingError::InvalidConfig(format!(
                "optimizer state has {} bytes, expected {}",
                bytes.len(),
                8 + 16 * n
            )));
        }
        state.t = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
        let mut words = bytes[8..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        for v in state.m.iter_mut().chain(state.v.iter_mut()).flatten() {
            *v = words.next().expect("length checked");
        }
        Ok(state)
    }

    pub fn new(params: &ModelParams<f32>) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One Adam step with bias correction, after clipping the global gradient
/// norm of the present gradients to `cfg.clip_norm`. Tensors whose gradient
/// is `None` are not touched. Returns the pre-clip norm.
pub fn adam_step(
    params: &mut ModelParams<f32>,
    grads: &[Option<Vec<f64>>],
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .map(|g| g.iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    let scale = if norm > cfg.clip_norm { cfg.clip_norm / norm } else { 1.0 };
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for (i, tensor) in params.tensors_mut().into_iter().enumerate() {
        let Some(g) = &grads[i] else { continue };
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (k, p) in tensor.data_mut().iter_mut().enumerate() {
            let gk = g[k] * scale;
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gk;
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gk * gk;
            let step = cfg.lr * (m[k] / bc1) / ((v[k] / bc2).sqrt() + cfg.eps);
            *p = (*p as f64 - step) as f32;
        }
    }
    norm
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: f64,
    pub val_acc: Option<f64>,
}

pub fn format_log(log: &[StepLog]) -> String {
    let mut out = String::from("step\tepoch\tloss\ttrain_acc\tval_acc\n");
    for r in log {
        let val = r.val_acc.map_or(String::new(), |v| format!("{v:.6}"));
        let _ = writeln!(out, "{}\t{}\t{:.6}\t{:.6}\t{}", r.step, r.epoch, r.loss, r.train_acc, val);
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams<f32>,
    pub log: Vec<StepLog>,
    pub steps: usize,
    /// Validation accuracy of the returned parameters, when validation ran.
    pub best_val_acc: Option<f64>,
    /// Every validation evaluation as `(step, accuracy)`.
    pub evaluations: Vec<(usize, f64)>,
    /// Optimizer state after the last step taken.
    pub optimizer: AdamState,
}

fn class_weights(pool: &[SequenceSample<'_>]) -> [f64; N_CLASSES] {
    let mut counts = [0usize; N_CLASSES];
    for s in pool {
        for l in s.labels() {
            counts[l.index()] += 1;
        }
    }
    let total: usize = counts.iter().sum();
    let present = counts.iter().filter(|&&c| c > 0).count().max(1);
    counts.map(|c| if c == 0 { 0.0 } else { total as f64 / (present as f64 * c as f64) })
}

struct Validation<'a> {
    cohort: &'a [PreparedRecording],
}

fn train_loop(
    mut params: ModelParams<f32>,
    hp: &HyperParams,
    trainable: &[bool; N_TENSORS],
    train: &[PreparedRecording],
    validation: Option<Validation<'_>>,
    optimizer: Option<&AdamState>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainingError> {
    hp.validate()?;
    cfg.validate()?;
    let mut adam = match optimizer {
        Some(st) if st.m.len() == N_TENSORS => st.clone(),
        Some(_) => return Err(TrainingError::InvalidConfig("optimizer state does not match the model".into())),
        None => AdamState::new(&params),
    };
    let mut log = Vec::new();
    let mut evaluations = Vec::new();
    let mut best: Option<(f64, usize, ModelParams<f32>)> = None;
    let validation = validation.filter(|v| !v.cohort.is_empty());
    let evaluate = |p: &ModelParams<f32>| -> Result<f64, TrainingError> {
        let v = validation.as_ref().expect("validation present");
        Ok(evaluation::cohort_accuracy(p, hp, v.cohort)?)
    };
    if validation.is_some() {
        let acc = evaluate(&params)?;
        evaluations.push((0, acc));
        best = Some((acc, 0, params.clone()));
    }
    if cfg.epochs == 0 || !trainable.iter().any(|&t| t) {
        return Ok(TrainOutcome {
            best_val_acc: best.as_ref().map(|b| b.0),
            params: best.map_or(params, |b| b.2),
            log,
            steps: 0,
            evaluations,
            optimizer: adam,
        });
    }
    let pool = sequence_pool(train, hp.seq_len)?;
    let weights = cfg.class_balanced.then(|| class_weights(&pool));
    let mut step = 0usize;
    'outer: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..pool.len()).collect();
        order.shuffle(&mut substream(cfg.seed, "shuffle", epoch as u64));
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<SequenceRef<'_>> = chunk.iter().map(|&i| pool[i].as_ref()).collect();
            let mut drop_rng = substream(cfg.seed, "dropout", step as u64);
            let dropout = Dropout::new(Mode::Train, hp.dropout, Some(&mut drop_rng));
            let out = sequence_loss(&params, hp, &batch, trainable, weights.as_ref(), dropout)?;
            adam_step(&mut params, &out.grads, &mut adam, cfg);
            step += 1;
            let mut row = StepLog {
                step,
                epoch,
                loss: out.loss,
                train_acc: out.correct as f64 / out.total as f64,
                val_acc: None,
            };
            let mut stop = cfg.max_steps > 0 && step >= cfg.max_steps;
            if validation.is_some() && step % cfg.eval_every == 0 {
                let acc = evaluate(&params)?;
                row.val_acc = Some(acc);
                evaluations.push((step, acc));
                let b = best.as_mut().expect("initial evaluation");
                if acc > b.0 {
                    *b = (acc, step, params.clone());
                }
                if step - b.1 >= cfg.early_stop_patience {
                    stop = true;
                }
            }
            log.push(row);
            if stop {
                break 'outer;
            }
        }
    }
    Ok(TrainOutcome {
        best_val_acc: best.as_ref().map(|b| b.0),
        params: best.map_or(params, |b| b.2),
        log,
        steps: step,
        evaluations,
        optimizer: adam,
    })
}

/// Trains a freshly initialized network on the whole cohort for
/// `cfg.epochs` passes and returns the final parameters.
pub fn pretrain(cohort: &[PreparedRecording], hp: &HyperParams, cfg: &TrainConfig) -> Result<TrainOutcome, TrainingError> {
    hp.validate()?;
    if cohort.is_empty() {
        return Err(TrainingError::EmptyCohort);
    }
    let init = ModelParams::init(hp, &mut substream(cfg.seed, "init", 0));
    train_loop(init, hp, &[true; N_TENSORS], cohort, None, None, cfg)
}

/// Continues training from `init`, updating only the tensors marked
/// trainable, and returns the best parameters on the validation cohort
/// (the input itself if nothing improves on it). With an empty validation
/// cohort there is no early stopping and the final parameters are returned.
pub fn finetune(
    init: &ModelParams<f32>,
    hp: &HyperParams,
    trainable: &[bool; N_TENSORS],
    train: &[PreparedRecording],
    validation: &[PreparedRecording],
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainingError> {
    finetune_from(init, None, hp, trainable, train, validation, cfg)
}

/// [`finetune`] that continues from saved optimizer moments unless
/// `cfg.reset_optimizer` is set.
pub fn finetune_from(
    init: &ModelParams<f32>,
    optimizer: Option<&AdamState>,
    hp: &HyperParams,
    trainable: &[bool; N_TENSORS],
    train: &[PreparedRecording],
    validation: &[PreparedRecording],
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainingError> {
    let expected = ModelParams::<f32>::expected_shapes(hp);
    for ((t, want), name) in init.tensors().iter().zip(&expected).zip(crate::network::CANONICAL_NAMES) {
        if t.shape() != want.as_slice() {
            return Err(NetworkError::ShapeMismatch {
                what: name.into(),
                expected: want.clone(),
                found: t.shape().to_vec(),
            }
            .into());
        }
    }
    train_loop(
        init.clone(),
        hp,
        trainable,
        train,
        Some(Validation { cohort: validation }),
        if cfg.reset_optimizer { None } else { optimizer },
        cfg,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn fake_recording(n: usize) -> PreparedRecording {
        let img = EpochImage::new(2, 2, vec![0.0; 4]).unwrap();
        PreparedRecording {
            subject_id: "X".into(),
            images: vec![img; n],
            labels: vec![StageLabel::N2; n],
        }
    }

    #[test]
    fn sequence_counts() {
        assert_eq!(make_sequences(&fake_recording(20), 20).unwrap().len(), 1);
        assert_eq!(make_sequences(&fake_recording(25), 20).unwrap().len(), 6);
        assert!(matches!(
            make_sequences(&fake_recording(19), 20),
            Err(TrainingError::TooShortRecording { n_epochs: 19, .. })
        ));
    }

    #[test]
    fn sequences_stay_inside_the_recording() {
        let rec = fake_recording(30);
        let seqs = make_sequences(&rec, 7).unwrap();
        let mut cover = vec![0usize; 30];
        for s in &seqs {
            assert_eq!(s.images().len(), 7);
            for c in &mut cover[s.start..s.start + 7] {
                *c += 1;
            }
        }
        assert!(cover.iter().all(|&c| (1..=7).contains(&c)));
        assert_eq!(cover[15], 7);
    }

    fn tiny_params() -> (HyperParams, ModelParams<f32>) {
        let hp = HyperParams {
            n_freq: 8,
            n_filters: 2,
            ernn_hidden: 2,
            attention_size: 2,
            seqrnn_hidden: 2,
            seq_len: 2,
            dropout: 0.0,
            l2: 0.0,
        };
        let p = ModelParams::init(&hp, &mut substream(1, "init", 0));
        (hp, p)
    }

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        let (_, mut p) = tiny_params();
        let before = p.clone();
        let grads: Vec<Option<Vec<f64>>> = p.tensors().iter().map(|t| Some(vec![0.0; t.len()])).collect();
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &grads, &mut st, &TrainConfig::default());
        assert_eq!(p, before);
    }

    #[test]
    fn frozen_tensor_is_untouched() {
        let (_, mut p) = tiny_params();
        let before = p.clone();
        let mut grads: Vec<Option<Vec<f64>>> = p.tensors().iter().map(|t| Some(vec![0.5; t.len()])).collect();
        grads[0] = None;
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &grads, &mut st, &TrainConfig::default());
        assert_eq!(p.filterbank, before.filterbank);
        assert_ne!(p.softmax, before.softmax);
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        // f(w) = w²/2 at w = 1 has gradient 1; the bias-corrected first step
        // is lr · 1 / (1 + eps).
        let (_, mut p) = tiny_params();
        let cfg = TrainConfig { lr: 1e-2, ..TrainConfig::default() };
        p.softmax.b = Tensor::new(vec![5], vec![1.0; 5]).unwrap();
        let grads: Vec<Option<Vec<f64>>> = (0..N_TENSORS)
            .map(|i| (i == 45).then(|| p.softmax.b.data().iter().map(|&w| w as f64).collect()))
            .collect();
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &grads, &mut st, &cfg);
        let want = 1.0 - 1e-2 / (1.0 + 1e-8);
        for &w in p.softmax.b.data() {
            assert!((w as f64 - want).abs() < 1e-7, "{w}");
        }
    }

    #[test]
    fn global_norm_is_clipped() {
        let (_, mut p) = tiny_params();
        let cfg = TrainConfig { lr: 1.0, beta1: 0.0, beta2: 0.0, ..TrainConfig::default() };
        let grads: Vec<Option<Vec<f64>>> = (0..N_TENSORS).map(|i| (i == 45).then(|| vec![100.0; 5])).collect();
        let mut st = AdamState::new(&p);
        let norm = adam_step(&mut p, &grads, &mut st, &cfg);
        assert!((norm - 100.0 * 5f64.sqrt()).abs() < 1e-9);
        // with beta1 = beta2 = 0 the stored moments are the clipped gradient
        assert!((st.m[45][0] - 5.0 / 5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn optimizer_state_round_trips() {
        let (_, mut p) = tiny_params();
        let grads: Vec<Option<Vec<f64>>> = p.tensors().iter().map(|t| Some(vec![0.3; t.len()])).collect();
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &grads, &mut st, &TrainConfig::default());
        let back = AdamState::decode(&st.encode(), &p).unwrap();
        assert_eq!(back.t, 1);
        assert_eq!((back.m, back.v), (st.m.clone(), st.v.clone()));
        assert!(AdamState::decode(&st.encode()[1..], &p).is_err());
    }

    #[test]
    fn log_is_tab_separated() {
        let log = [StepLog { step: 1, epoch: 0, loss: 1.5, train_acc: 0.25, val_acc: None }];
        let text = format_log(&log);
        assert_eq!(text.lines().nth(1).unwrap(), "1\t0\t1.500000\t0.250000\t");
    }

    #[test]
    fn inverse_frequency_weights_average_to_one() {
        let mut rec = fake_recording(10);
        for l in &mut rec.labels[..3] {
            *l = StageLabel::W;
        }
        let pool = make_sequences(&rec, 1).unwrap();
        let w = class_weights(&pool);
        let mean: f64 = rec.labels.iter().map(|l| w[l.index()]).sum::<f64>() / 10.0;
        assert!((mean - 1.0).abs() < 1e-12);
        assert_eq!(w[StageLabel::N3.index()], 0.0);
    }
}
