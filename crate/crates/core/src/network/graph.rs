//! Builders that lay the model out on a [`Tape`]. Batches are processed as
//! row blocks: an epoch batch of `n` images becomes `T` blocks of `n` rows
//! (row `t * n + e`), and a batch of `B` sequences of length `L` orders its
//! epochs as `i * B + b`, so every recurrence step is a contiguous slice.

use rand_chacha::ChaCha8Rng;

use super::params::{idx, ModelParams, N_TENSORS};
use super::{HyperParams, NetworkError, N_OUT};
use crate::numerics::{Axis, Real, Tape, Tensor, Var};
use crate::spectrogram::EpochImage;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Dropout source for one forward pass. Inference or a zero rate never
/// draws from the generator.
pub struct Dropout<'a> {
    rate: f64,
    rng: Option<&'a mut ChaCha8Rng>,
}

impl<'a> Dropout<'a> {
    pub fn off() -> Self {
        Self { rate: 0.0, rng: None }
    }

    pub fn new(mode: Mode, rate: f64, rng: Option<&'a mut ChaCha8Rng>) -> Self {
        match (mode, rng) {
            (Mode::Train, Some(rng)) if rate > 0.0 => Self { rate, rng: Some(rng) },
            _ => Self::off(),
        }
    }

    pub(crate) fn apply<S: Real>(&mut self, tape: &mut Tape<S>, x: Var) -> Result<Var, NetworkError> {
        match self.rng.as_deref_mut() {
            Some(rng) => Ok(tape.dropout(x, self.rate, rng)?),
            None => Ok(x),
        }
    }
}

/// Tape handles for every canonical parameter tensor.
pub(crate) struct ParamVars {
    pub vars: Vec<Var>,
}

impl ParamVars {
    pub fn register<S: Real>(tape: &mut Tape<S>, params: &ModelParams<S>, trainable: &[bool]) -> Self {
        debug_assert_eq!(trainable.len(), N_TENSORS);
        let vars = params
            .tensors()
            .into_iter()
            .zip(trainable)
            .map(|(t, &g)| tape.leaf(t.clone(), g))
            .collect();
        Self { vars }
    }

    pub fn gru(&self, base: usize) -> GruVars {
        let v = &self.vars[base..base + 9];
        GruVars {
            w: [v[0], v[3], v[6]],
            u: [v[1], v[4], v[7]],
            b: [v[2], v[5], v[8]],
        }
    }

    pub fn at(&self, i: usize) -> Var {
        self.vars[i]
    }
}

/// Update / reset / candidate handles of one GRU direction.
#[derive(Clone, Copy)]
pub(crate) struct GruVars {
    pub w: [Var; 3],
    pub u: [Var; 3],
    pub b: [Var; 3],
}

/// Fused views `[Wz|Wr|Wh]`, `[Uz|Ur|Uh]`, `[bz|br|bh]`.
struct FusedGru {
    w: Var,
    u: Var,
    b: Var,
    hidden: usize,
}

fn fuse<S: Real>(tape: &mut Tape<S>, g: GruVars) -> Result<FusedGru, NetworkError> {
    let hidden = tape.value(g.u[0]).dims2().0;
    Ok(FusedGru {
        w: tape.concat(&g.w, Axis::Cols)?,
        u: tape.concat(&g.u, Axis::Cols)?,
        b: tape.concat(&g.b, Axis::Cols)?,
        hidden,
    })
}

/// One GRU update given the precomputed input term `x W + b` (n × 3H):
/// `z = σ(xz + h Uz)`, `r = σ(xr + h Ur)`, `h̃ = tanh(xh + r ⊙ (h Uh))`,
/// `h' = (1 − z) ⊙ h + z ⊙ h̃`.
pub(crate) fn gru_update<S: Real>(
    tape: &mut Tape<S>,
    xp: Var,
    h: Var,
    u_all: Var,
    hidden: usize,
) -> Result<Var, NetworkError> {
    let hu = tape.matmul(h, u_all)?;
    let xz = tape.slice(xp, Axis::Cols, 0, hidden)?;
    let xr = tape.slice(xp, Axis::Cols, hidden, hidden)?;
    let xh = tape.slice(xp, Axis::Cols, 2 * hidden, hidden)?;
    let uz = tape.slice(hu, Axis::Cols, 0, hidden)?;
    let ur = tape.slice(hu, Axis::Cols, hidden, hidden)?;
    let uh = tape.slice(hu, Axis::Cols, 2 * hidden, hidden)?;
    let z_pre = tape.add(xz, uz)?;
    let z = tape.sigmoid(z_pre)?;
    let r_pre = tape.add(xr, ur)?;
    let r = tape.sigmoid(r_pre)?;
    let gated = tape.mul(r, uh)?;
    let c_pre = tape.add(xh, gated)?;
    let cand = tape.tanh(c_pre)?;
    let delta = tape.sub(cand, h)?;
    let step = tape.mul(z, delta)?;
    Ok(tape.add(h, step)?)
}

/// Runs both directions of a bidirectional GRU over `steps` row blocks of
/// `n` rows each, starting from zero states. Returns `[h_b ⊕ h_f]` per step.
pub(crate) fn bigru<S: Real>(
    tape: &mut Tape<S>,
    inputs: Var,
    n: usize,
    steps: usize,
    fwd: GruVars,
    bwd: GruVars,
) -> Result<Vec<Var>, NetworkError> {
    let run = |tape: &mut Tape<S>, g: GruVars, reverse: bool| -> Result<Vec<Var>, NetworkError> {
        let fused = fuse(tape, g)?;
        let proj = tape.matmul(inputs, fused.w)?;
        let proj = tape.add_bias(proj, fused.b)?;
        let mut h = tape.constant(Tensor::zeros(vec![n, fused.hidden]));
        let mut states = vec![h; steps];
        let order: Vec<usize> = if reverse {
            (0..steps).rev().collect()
        } else {
            (0..steps).collect()
        };
        for t in order {
            let xp = tape.slice(proj, Axis::Rows, t * n, n)?;
            h = gru_update(tape, xp, h, fused.u, fused.hidden)?;
            states[t] = h;
        }
        Ok(states)
    };
    let hf = run(tape, fwd, false)?;
    let hb = run(tape, bwd, true)?;
    hb.into_iter()
        .zip(hf)
        .map(|(b, f)| Ok(tape.concat(&[b, f], Axis::Cols)?))
        .collect()
}

/// Stacks per-step blocks and applies `W · + b` to all of them at once.
pub(crate) fn project_steps<S: Real>(
    tape: &mut Tape<S>,
    states: &[Var],
    w: Var,
    b: Var,
) -> Result<Var, NetworkError> {
    let stacked = tape.concat(states, Axis::Rows)?;
    let y = tape.matmul(stacked, w)?;
    Ok(tape.add_bias(y, b)?)
}

/// Additive attention over `steps` blocks of `n` rows of `a` (stacked).
/// Returns the pooled features (n × width) and weights (n × steps).
pub(crate) fn attend<S: Real>(
    tape: &mut Tape<S>,
    a_all: Var,
    n: usize,
    steps: usize,
    w: Var,
    b: Var,
    u: Var,
) -> Result<(Var, Var), NetworkError> {
    let proj = tape.matmul(a_all, w)?;
    let proj = tape.add_bias(proj, b)?;
    let act = tape.tanh(proj)?;
    let scores = tape.matmul(act, u)?;
    let mut cols = Vec::with_capacity(steps);
    let mut blocks = Vec::with_capacity(steps);
    for t in 0..steps {
        cols.push(tape.slice(scores, Axis::Rows, t * n, n)?);
        blocks.push(tape.slice(a_all, Axis::Rows, t * n, n)?);
    }
    let e = tape.concat(&cols, Axis::Cols)?;
    let alpha = tape.softmax(e, Axis::Cols)?;
    let x = tape.weighted_sum(&blocks, alpha)?;
    Ok((x, alpha))
}

/// Filterbank input: `T` blocks of `n` rows, row `t * n + e` holding frame
/// `t` of image `e`.
pub(crate) fn frame_matrix<S: Real>(images: &[&EpochImage], n_freq: usize) -> Result<(Tensor<S>, usize), NetworkError> {
    let first = images.first().ok_or(NetworkError::EmptyBatch)?;
    let frames = first.n_frames();
    for img in images {
        if img.n_freq() != n_freq || img.n_frames() != frames {
            return Err(NetworkError::ShapeMismatch {
                what: "epoch image".into(),
                expected: vec![n_freq, frames],
                found: vec![img.n_freq(), img.n_frames()],
            });
        }
    }
    if frames == 0 {
        return Err(NetworkError::EmptyBatch);
    }
    let n = images.len();
    let mut data = vec![S::default(); frames * n * n_freq];
    for (e, img) in images.iter().enumerate() {
        let v = img.values();
        for t in 0..frames {
            let row = (t * n + e) * n_freq;
            for f in 0..n_freq {
                data[row + f] = S::from_f64(v[f * frames + t] as f64);
            }
        }
    }
    Ok((Tensor::new(vec![frames * n, n_freq], data)?, frames))
}

pub(crate) struct ArnnOut {
    pub x: Var,
    pub alpha: Var,
}

/// Filterbank → epoch-level bi-GRU → attention for a batch of images.
pub(crate) fn arnn<S: Real>(
    tape: &mut Tape<S>,
    pv: &ParamVars,
    hp: &HyperParams,
    images: &[&EpochImage],
    dropout: &mut Dropout<'_>,
) -> Result<ArnnOut, NetworkError> {
    let (frames_tensor, frames) = frame_matrix::<S>(images, hp.n_freq)?;
    let n = images.len();
    let input = tape.constant(frames_tensor);
    let w_fb = tape.softplus(pv.at(idx::FILTERBANK))?;
    let z = tape.matmul(input, w_fb)?;
    let z = dropout.apply(tape, z)?;
    let states = bigru(tape, z, n, frames, pv.gru(idx::ERNN_FWD), pv.gru(idx::ERNN_BWD))?;
    let a_all = project_steps(tape, &states, pv.at(idx::ERNN_OUT), pv.at(idx::ERNN_OUT + 1))?;
    let (x, alpha) = attend(
        tape,
        a_all,
        n,
        frames,
        pv.at(idx::ATT),
        pv.at(idx::ATT + 1),
        pv.at(idx::ATT + 2),
    )?;
    let x = dropout.apply(tape, x)?;
    Ok(ArnnOut { x, alpha })
}

/// Sequence-level bi-GRU over `seq_len` blocks of `batch` rows of `x`,
/// followed by the output projection. With `bypass` the recurrence is
/// replaced by the identity (`o_i = x_i`).
pub(crate) fn seqrnn<S: Real>(
    tape: &mut Tape<S>,
    pv: &ParamVars,
    x: Var,
    batch: usize,
    seq_len: usize,
    dropout: &mut Dropout<'_>,
    bypass: bool,
) -> Result<Var, NetworkError> {
    let o = if bypass {
        x
    } else {
        let states = bigru(tape, x, batch, seq_len, pv.gru(idx::SEQ_FWD), pv.gru(idx::SEQ_BWD))?;
        project_steps(tape, &states, pv.at(idx::SEQ_OUT), pv.at(idx::SEQ_OUT + 1))?
    };
    dropout.apply(tape, o)
}

pub(crate) fn logits<S: Real>(tape: &mut Tape<S>, pv: &ParamVars, o: Var) -> Result<Var, NetworkError> {
    let y = tape.matmul(o, pv.at(idx::SOFTMAX))?;
    Ok(tape.add_bias(y, pv.at(idx::SOFTMAX + 1))?)
}

/// Full forward pass for `B` equal-length sequences. Returns logits with
/// row `i * B + b` for epoch `i` of sequence `b`.
pub(crate) fn forward_sequences<S: Real>(
    tape: &mut Tape<S>,
    pv: &ParamVars,
    hp: &HyperParams,
    sequences: &[&[EpochImage]],
    dropout: &mut Dropout<'_>,
    bypass_seqrnn: bool,
) -> Result<Var, NetworkError> {
    let batch = sequences.len();
    let seq_len = sequences.first().map(|s| s.len()).ok_or(NetworkError::EmptyBatch)?;
    if seq_len == 0 || sequences.iter().any(|s| s.len() != seq_len) {
        return Err(NetworkError::EmptyBatch);
    }
    let mut images = Vec::with_capacity(batch * seq_len);
    for i in 0..seq_len {
        for s in sequences {
            images.push(&s[i]);
        }
    }
    let out = arnn(tape, pv, hp, &images, dropout)?;
    let o = seqrnn(tape, pv, out.x, batch, seq_len, dropout, bypass_seqrnn)?;
    let z = logits(tape, pv, o)?;
    debug_assert_eq!(tape.value(z).dims2(), (batch * seq_len, N_OUT));
    Ok(z)
}
