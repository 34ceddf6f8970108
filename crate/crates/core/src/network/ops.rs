use rand_chacha::ChaCha8Rng;

use super::graph::{self, Dropout, GruVars, Mode, ParamVars};
use super::params::{AttentionParams, FilterbankParams, GruCellParams, ModelParams, Projection, N_TENSORS};
use super::{HyperParams, NetworkError, N_OUT};
use crate::dataio::StageLabel;
use crate::numerics::{Axis, Real, Tape, Tensor, Var};
use crate::spectrogram::EpochImage;

fn rows_of<S: Real>(t: &Tensor<S>) -> Vec<Vec<S>> {
    let (_, c) = t.dims2();
    t.data().chunks(c.max(1)).map(|r| r.to_vec()).collect()
}

fn row_tensor<S: Real>(v: &[S]) -> Tensor<S> {
    Tensor::new(vec![1, v.len()], v.to_vec()).expect("row")
}

fn stack_rows<S: Real>(rows: &[Vec<S>]) -> Result<Tensor<S>, NetworkError> {
    let width = rows.first().map(Vec::len).ok_or(NetworkError::EmptyBatch)?;
    if rows.iter().any(|r| r.len() != width) {
        return Err(NetworkError::EmptyBatch);
    }
    Ok(Tensor::new(vec![rows.len(), width], rows.concat())?)
}

fn gru_consts<S: Real>(tape: &mut Tape<S>, p: &GruCellParams<S>) -> GruVars {
    let c = |tape: &mut Tape<S>, t: &Tensor<S>| tape.constant(t.clone());
    GruVars {
        w: [c(tape, &p.wz), c(tape, &p.wr), c(tape, &p.wh)],
        u: [c(tape, &p.uz), c(tape, &p.ur), c(tape, &p.uh)],
        b: [c(tape, &p.bz), c(tape, &p.br), c(tape, &p.bh)],
    }
}

/// `W_fbᵀ · image`, an `M × T` matrix.
pub fn filterbank_apply<S: Real>(
    image: &EpochImage,
    fb: &FilterbankParams<S>,
) -> Result<Tensor<S>, NetworkError> {
    let (f, m) = fb.v.dims2();
    let (frames, t) = graph::frame_matrix::<S>(&[image], f)?;
    let mut tape = Tape::new();
    let x = tape.constant(frames);
    let v = tape.constant(fb.v.clone());
    let w = tape.softplus(v)?;
    let z = tape.matmul(x, w)?;
    let zt = tape.value(z);
    let mut out = vec![S::default(); m * t];
    for ti in 0..t {
        for mi in 0..m {
            out[mi * t + ti] = zt.get2(ti, mi);
        }
    }
    Ok(Tensor::new(vec![m, t], out)?)
}

/// One GRU step on single vectors.
pub fn gru_step<S: Real>(x: &[S], h_prev: &[S], p: &GruCellParams<S>) -> Result<Vec<S>, NetworkError> {
    let hidden = p.hidden();
    if h_prev.len() != hidden {
        return Err(NetworkError::ShapeMismatch {
            what: "h_prev".into(),
            expected: vec![hidden],
            found: vec![h_prev.len()],
        });
    }
    let mut tape = Tape::new();
    let g = gru_consts(&mut tape, p);
    let xv = tape.constant(row_tensor(x));
    let h = tape.constant(row_tensor(h_prev));
    let w = tape.concat(&g.w, Axis::Cols)?;
    let u = tape.concat(&g.u, Axis::Cols)?;
    let b = tape.concat(&g.b, Axis::Cols)?;
    let xp = tape.matmul(xv, w)?;
    let xp = tape.add_bias(xp, b)?;
    let h_next = graph::gru_update(&mut tape, xp, h, u, hidden)?;
    Ok(tape.value(h_next).data().to_vec())
}

/// Epoch-level bidirectional encoding of filterbank output (`M × T`) into
/// `a_1..a_T`.
pub fn ernn_encode<S: Real>(
    fb_out: &Tensor<S>,
    fwd: &GruCellParams<S>,
    bwd: &GruCellParams<S>,
    out: &Projection<S>,
) -> Result<Vec<Vec<S>>, NetworkError> {
    let (m, t) = fb_out.dims2();
    let mut cols = vec![S::default(); m * t];
    for mi in 0..m {
        for ti in 0..t {
            cols[ti * m + mi] = fb_out.get2(mi, ti);
        }
    }
    let mut tape = Tape::new();
    let input = tape.constant(Tensor::new(vec![t, m], cols)?);
    let gf = gru_consts(&mut tape, fwd);
    let gb = gru_consts(&mut tape, bwd);
    let states = graph::bigru(&mut tape, input, 1, t, gf, gb)?;
    let w = tape.constant(out.w.clone());
    let b = tape.constant(out.b.clone());
    let a = graph::project_steps(&mut tape, &states, w, b)?;
    Ok(rows_of(tape.value(a)))
}

/// Attention pooling of `a_1..a_T`. Returns the pooled vector and weights.
pub fn attention_pool<S: Real>(
    a: &[Vec<S>],
    p: &AttentionParams<S>,
) -> Result<(Vec<S>, Vec<S>), NetworkError> {
    let mut tape = Tape::new();
    let a_all = tape.constant(stack_rows(a)?);
    let w = tape.constant(p.w.clone());
    let b = tape.constant(p.b.clone());
    let u = tape.constant(p.u.clone());
    let (x, alpha) = graph::attend(&mut tape, a_all, 1, a.len(), w, b, u)?;
    Ok((tape.value(x).data().to_vec(), tape.value(alpha).data().to_vec()))
}

fn frozen_vars<S: Real>(tape: &mut Tape<S>, params: &ModelParams<S>) -> ParamVars {
    ParamVars::register(tape, params, &[false; N_TENSORS])
}

/// Epoch feature vector `x` of one image.
pub fn arnn_forward<S: Real>(
    image: &EpochImage,
    params: &ModelParams<S>,
    hp: &HyperParams,
    mode: Mode,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Vec<S>, NetworkError> {
    let mut tape = Tape::new();
    let pv = frozen_vars(&mut tape, params);
    let mut dropout = Dropout::new(mode, hp.dropout, rng);
    let out = graph::arnn(&mut tape, &pv, hp, &[image], &mut dropout)?;
    Ok(tape.value(out.x).data().to_vec())
}

/// SeqRNN outputs `o_1..o_L` for epoch features `x_1..x_L`.
pub fn seqrnn_forward<S: Real>(xs: &[Vec<S>], params: &ModelParams<S>) -> Result<Vec<Vec<S>>, NetworkError> {
    let mut tape = Tape::new();
    let pv = frozen_vars(&mut tape, params);
    let x = tape.constant(stack_rows(xs)?);
    let o = graph::seqrnn(&mut tape, &pv, x, 1, xs.len(), &mut Dropout::off(), false)?;
    Ok(rows_of(tape.value(o)))
}

/// Class probabilities `softmax(W o + b)`.
pub fn classify<S: Real>(o: &[S], softmax: &Projection<S>) -> Result<Vec<f64>, NetworkError> {
    let mut tape = Tape::new();
    let x = tape.constant(row_tensor(o));
    let w = tape.constant(softmax.w.clone());
    let b = tape.constant(softmax.b.clone());
    let z = tape.matmul(x, w)?;
    let z = tape.add_bias(z, b)?;
    let p = tape.softmax(z, Axis::Cols)?;
    Ok(tape.value(p).to_f64_vec())
}

/// One training sequence: `L` consecutive images and their labels.
#[derive(Clone, Copy, Debug)]
pub struct SequenceRef<'a> {
    pub images: &'a [EpochImage],
    pub labels: &'a [StageLabel],
}

#[derive(Clone, Debug)]
pub struct LossOutput {
    pub loss: f64,
    /// Cross-entropy part, already divided by `L`.
    pub data_loss: f64,
    /// `(λ/2) · Σθ²` over trainable tensors.
    pub reg_loss: f64,
    /// Gradient per canonical tensor; `None` for frozen tensors.
    pub grads: Vec<Option<Vec<f64>>>,
    /// Epochs whose logit argmax matches the label.
    pub correct: usize,
    pub total: usize,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Sequence classification loss over a minibatch:
/// `−(1/L) Σ_n Σ_i y_i · log ŷ_i + (λ/2) ‖θ_trainable‖²`, with gradients
/// for every trainable tensor.
pub fn sequence_loss<S: Real>(
    params: &ModelParams<S>,
    hp: &HyperParams,
    batch: &[SequenceRef<'_>],
    trainable: &[bool],
    class_weights: Option<&[f64; N_OUT]>,
    mut dropout: Dropout<'_>,
) -> Result<LossOutput, NetworkError> {
    if trainable.len() != N_TENSORS {
        return Err(NetworkError::ShapeMismatch {
            what: "freeze mask".into(),
            expected: vec![N_TENSORS],
            found: vec![trainable.len()],
        });
    }
    let b = batch.len();
    let seq_len = batch.first().map(|s| s.images.len()).ok_or(NetworkError::EmptyBatch)?;
    if batch
        .iter()
        .any(|s| s.images.len() != seq_len || s.labels.len() != seq_len)
    {
        return Err(NetworkError::EmptyBatch);
    }
    let mut tape = Tape::new();
    let pv = ParamVars::register(&mut tape, params, trainable);
    let seqs: Vec<&[EpochImage]> = batch.iter().map(|s| s.images).collect();
    let z = graph::forward_sequences(&mut tape, &pv, hp, &seqs, &mut dropout, false)?;

    let mut targets = vec![0.0; b * seq_len * N_OUT];
    let mut labels = Vec::with_capacity(b * seq_len);
    for i in 0..seq_len {
        for (bi, s) in batch.iter().enumerate() {
            let row = i * b + bi;
            let c = s.labels[i].index();
            targets[row * N_OUT + c] = class_weights.map_or(1.0, |w| w[c]);
            labels.push(c);
        }
    }
    let ce = tape.cross_entropy(z, &targets)?;
    let data = tape.scale(ce, 1.0 / seq_len as f64)?;

    let reg_terms: Vec<Var> = pv
        .vars
        .iter()
        .zip(trainable)
        .filter(|(_, &t)| t)
        .map(|(&v, _)| tape.l2_norm_squared(v))
        .collect::<Result<_, _>>()?;
    let (total, reg) = if hp.l2 > 0.0 && !reg_terms.is_empty() {
        let mut acc = reg_terms[0];
        for &r in &reg_terms[1..] {
            acc = tape.add(acc, r)?;
        }
        let reg = tape.scale(acc, hp.l2 / 2.0)?;
        (tape.add(data, reg)?, Some(reg))
    } else {
        (data, None)
    };

    let mut grads_all = tape.backward(total)?;
    let grads = pv
        .vars
        .iter()
        .zip(trainable)
        .map(|(&v, &t)| {
            if t {
                Some(grads_all.take(v).unwrap_or_else(|| vec![0.0; tape.value(v).len()]))
            } else {
                None
            }
        })
        .collect();

    let zv = tape.value(z).to_f64_vec();
    let correct = labels
        .iter()
        .enumerate()
        .filter(|(row, &c)| argmax(&zv[row * N_OUT..(row + 1) * N_OUT]) == c)
        .count();
    Ok(LossOutput {
        loss: tape.value(total).data()[0].to_f64(),
        data_loss: tape.value(data).data()[0].to_f64(),
        reg_loss: reg.map_or(0.0, |r| tape.value(r).data()[0].to_f64()),
        grads,
        correct,
        total: labels.len(),
    })
}

fn probs_by_sequence<S: Real>(tape: &mut Tape<S>, z: Var, batch: usize, seq_len: usize) -> Result<Vec<Vec<[f64; N_OUT]>>, NetworkError> {
    let p = tape.softmax(z, Axis::Cols)?;
    let pv = tape.value(p).to_f64_vec();
    let mut out = vec![Vec::with_capacity(seq_len); batch];
    for i in 0..seq_len {
        for (b, seq) in out.iter_mut().enumerate() {
            let row = i * batch + b;
            let mut probs = [0.0; N_OUT];
            probs.copy_from_slice(&pv[row * N_OUT..(row + 1) * N_OUT]);
            seq.push(probs);
        }
    }
    Ok(out)
}

/// Inference-mode class probabilities for each epoch of each sequence.
/// With `bypass_seqrnn` the sequence model is replaced by the identity,
/// which requires `2 · ernn_hidden == 2 · seqrnn_hidden`.
pub fn predict_sequences<S: Real>(
    params: &ModelParams<S>,
    hp: &HyperParams,
    sequences: &[&[EpochImage]],
    bypass_seqrnn: bool,
) -> Result<Vec<Vec<[f64; N_OUT]>>, NetworkError> {
    let mut tape = Tape::new();
    let pv = frozen_vars(&mut tape, params);
    let z = graph::forward_sequences(&mut tape, &pv, hp, sequences, &mut Dropout::off(), bypass_seqrnn)?;
    let seq_len = sequences[0].len();
    probs_by_sequence(&mut tape, z, sequences.len(), seq_len)
}

/// Inference-mode ARNN features, one row per image.
pub fn epoch_features<S: Real>(
    params: &ModelParams<S>,
    hp: &HyperParams,
    images: &[&EpochImage],
) -> Result<Tensor<S>, NetworkError> {
    let mut tape = Tape::new();
    let pv = frozen_vars(&mut tape, params);
    let out = graph::arnn(&mut tape, &pv, hp, images, &mut Dropout::off())?;
    Ok(tape.value(out.x).clone())
}

/// Inference-mode attention weights over the `T` frames of each image.
pub fn attention_weights<S: Real>(
    params: &ModelParams<S>,
    hp: &HyperParams,
    images: &[&EpochImage],
) -> Result<Vec<Vec<f64>>, NetworkError> {
    let mut tape = Tape::new();
    let pv = frozen_vars(&mut tape, params);
    let out = graph::arnn(&mut tape, &pv, hp, images, &mut Dropout::off())?;
    let alpha = tape.value(out.alpha);
    Ok(rows_of(alpha).into_iter().map(|r| r.iter().map(|v| v.to_f64()).collect()).collect())
}

/// SeqRNN + softmax over windows of precomputed features: window `k`
/// covers feature rows `starts[k] .. starts[k] + seq_len`.
pub fn predict_from_features<S: Real>(
    params: &ModelParams<S>,
    features: &Tensor<S>,
    starts: &[usize],
    seq_len: usize,
) -> Result<Vec<Vec<[f64; N_OUT]>>, NetworkError> {
    let (n, width) = features.dims2();
    let batch = starts.len();
    if batch == 0 || seq_len == 0 {
        return Err(NetworkError::EmptyBatch);
    }
    if starts.iter().any(|&s| s + seq_len > n) {
        return Err(NetworkError::ShapeMismatch {
            what: "window".into(),
            expected: vec![n],
            found: vec![starts.iter().max().copied().unwrap_or(0) + seq_len],
        });
    }
    let src = features.data();
    let mut data = Vec::with_capacity(batch * seq_len * width);
    for i in 0..seq_len {
        for &s in starts {
            data.extend_from_slice(&src[(s + i) * width..(s + i + 1) * width]);
        }
    }
    let mut tape = Tape::new();
    let pv = frozen_vars(&mut tape, params);
    let x = tape.constant(Tensor::new(vec![batch * seq_len, width], data)?);
    let o = graph::seqrnn(&mut tape, &pv, x, batch, seq_len, &mut Dropout::off(), false)?;
    let z = graph::logits(&mut tape, &pv, o)?;
    probs_by_sequence(&mut tape, z, batch, seq_len)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::CANONICAL_NAMES;
    use crate::numerics::gradcheck::{central_differences, max_relative_error};
    use crate::rng::substream;
    use rand::Rng;

    fn tiny_hp() -> HyperParams {
        HyperParams {
            n_freq: 16,
            n_filters: 4,
            ernn_hidden: 4,
            attention_size: 4,
            seqrnn_hidden: 4,
            seq_len: 3,
            dropout: 0.0,
            l2: 0.01,
        }
    }

    fn random_image(rng: &mut impl Rng, f: usize, t: usize) -> EpochImage {
        let v = (0..f * t).map(|_| rng.random_range(-2.0..1.0f32)).collect();
        EpochImage::new(f, t, v).unwrap()
    }

    fn jittered<S: Real>(hp: &HyperParams, seed: u64) -> ModelParams<S> {
        let mut rng = substream(seed, "init", 0);
        let mut p = ModelParams::<S>::init(hp, &mut rng);
        for t in p.tensors_mut() {
            for v in t.data_mut() {
                *v = S::from_f64(v.to_f64() + rng.random_range(-0.2..0.2));
            }
        }
        p
    }

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    fn vec_mat(x: &[f64], m: &Tensor<f64>) -> Vec<f64> {
        let (r, c) = m.dims2();
        (0..c).map(|j| (0..r).map(|i| x[i] * m.get2(i, j)).sum()).collect()
    }

    #[test]
    fn filterbank_matches_explicit_sums() {
        let mut rng = substream(1, "t", 0);
        let img = random_image(&mut rng, 16, 5);
        let fb = FilterbankParams::<f64>::triangular(16, 4);
        let w = fb.weights();
        let out = filterbank_apply(&img, &fb).unwrap();
        assert_eq!(out.shape(), &[4, 5]);
        for m in 0..4 {
            for t in 0..5 {
                let want: f64 = (0..16).map(|f| w.get2(f, m) * img.get(f, t) as f64).sum();
                assert!((out.get2(m, t) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gru_step_matches_scalar_formula() {
        let mut rng = substream(2, "t", 0);
        let p = GruCellParams::<f64>::init(3, 2, &mut rng);
        let x = [0.3, -1.2, 0.5];
        let h = [0.1, -0.4];
        let got = gru_step(&x, &h, &p).unwrap();
        let xz = vec_mat(&x, &p.wz);
        let hz = vec_mat(&h, &p.uz);
        let xr = vec_mat(&x, &p.wr);
        let hr = vec_mat(&h, &p.ur);
        let xh = vec_mat(&x, &p.wh);
        let hh = vec_mat(&h, &p.uh);
        for j in 0..2 {
            let z = sigmoid(xz[j] + hz[j] + p.bz.data()[j]);
            let r = sigmoid(xr[j] + hr[j] + p.br.data()[j]);
            let cand = (xh[j] + p.bh.data()[j] + r * hh[j]).tanh();
            let want = (1.0 - z) * h[j] + z * cand;
            assert!((got[j] - want).abs() < 1e-12, "{j}: {} vs {want}", got[j]);
        }
    }

    #[test]
    fn attention_pool_matches_explicit_softmax() {
        let mut rng = substream(3, "t", 0);
        let a: Vec<Vec<f64>> = (0..6)
            .map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let p = AttentionParams {
            w: Tensor::from_f64(vec![4, 3], &(0..12).map(|i| (i as f64 * 0.37).sin()).collect::<Vec<_>>()).unwrap(),
            b: Tensor::from_f64(vec![3], &[0.1, -0.2, 0.05]).unwrap(),
            u: Tensor::from_f64(vec![3, 1], &[0.7, -0.3, 1.1]).unwrap(),
        };
        let (x, alpha) = attention_pool(&a, &p).unwrap();
        let scores: Vec<f64> = a
            .iter()
            .map(|at| {
                let proj = vec_mat(at, &p.w);
                (0..3).map(|k| (proj[k] + p.b.data()[k]).tanh() * p.u.data()[k]).sum()
            })
            .collect();
        let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
        let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
        let want_alpha: Vec<f64> = scores.iter().map(|s| (s - mx).exp() / z).collect();
        for (g, w) in alpha.iter().zip(&want_alpha) {
            assert!((g - w).abs() < 1e-12);
        }
        for k in 0..4 {
            let want: f64 = (0..6).map(|t| want_alpha[t] * a[t][k]).sum();
            assert!((x[k] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn ernn_encode_output_width_is_twice_hidden() {
        let mut rng = substream(4, "t", 0);
        let hp = tiny_hp();
        let p = ModelParams::<f64>::init(&hp, &mut rng);
        let img = random_image(&mut rng, 16, 5);
        let fb = filterbank_apply(&img, &p.filterbank).unwrap();
        let a = ernn_encode(&fb, &p.ernn_fwd, &p.ernn_bwd, &p.ernn_out).unwrap();
        assert_eq!(a.len(), 5);
        assert!(a.iter().all(|r| r.len() == 8));
        let (x, alpha) = attention_pool(&a, &p.attention).unwrap();
        let direct = arnn_forward(&img, &p, &hp, Mode::Infer, None).unwrap();
        for (u, v) in x.iter().zip(&direct) {
            assert!((u - v).abs() < 1e-12);
        }
        assert!((alpha.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let o = seqrnn_forward(&[x.clone(), x.clone(), x], &p).unwrap();
        assert_eq!(o.len(), 3);
        let probs = classify(&o[1], &p.softmax).unwrap();
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    fn tiny_batch(seed: u64) -> (Vec<Vec<EpochImage>>, Vec<Vec<StageLabel>>) {
        let mut rng = substream(seed, "batch", 0);
        let images = (0..2)
            .map(|_| (0..3).map(|_| random_image(&mut rng, 16, 5)).collect())
            .collect();
        let labels = vec![
            vec![StageLabel::W, StageLabel::N2, StageLabel::Rem],
            vec![StageLabel::N3, StageLabel::N1, StageLabel::N2],
        ];
        (images, labels)
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        let hp = tiny_hp();
        let params = jittered::<f64>(&hp, 5);
        let (images, labels) = tiny_batch(6);
        let batch: Vec<SequenceRef> = images
            .iter()
            .zip(&labels)
            .map(|(i, l)| SequenceRef { images: i, labels: l })
            .collect();
        let all = [true; N_TENSORS];
        let out = sequence_loss(&params, &hp, &batch, &all, None, Dropout::off()).unwrap();
        let analytic: Vec<Vec<f64>> = out.grads.into_iter().map(Option::unwrap).collect();
        let inputs: Vec<Tensor<f64>> = params.tensors().into_iter().cloned().collect();
        let numeric = central_differences(
            |ts| {
                let p = ModelParams::from_tensors(&hp, ts.to_vec()).unwrap();
                sequence_loss(&p, &hp, &batch, &all, None, Dropout::off()).unwrap().loss
            },
            &inputs,
            1e-5,
        );
        let (err, ti, k) = max_relative_error(&analytic, &numeric);
        assert!(err <= 1e-3, "{} [{k}]: {err}", CANONICAL_NAMES[ti]);
        for (g, name) in analytic.iter().zip(CANONICAL_NAMES) {
            assert!(g.iter().any(|v| v.abs() > 1e-9), "{name} has an all-zero gradient");
        }
    }

    #[test]
    fn frozen_tensors_get_no_gradient_and_no_penalty() {
        let hp = tiny_hp();
        let params = jittered::<f64>(&hp, 7);
        let (images, labels) = tiny_batch(8);
        let batch = [SequenceRef { images: &images[0], labels: &labels[0] }];
        let mut mask = [false; N_TENSORS];
        mask[44] = true;
        mask[45] = true;
        let out = sequence_loss(&params, &hp, &batch, &mask, None, Dropout::off()).unwrap();
        for (i, g) in out.grads.iter().enumerate() {
            assert_eq!(g.is_some(), mask[i]);
        }
        let expect = hp.l2 / 2.0 * (params.softmax.w.sum_squares() + params.softmax.b.sum_squares());
        assert!((out.reg_loss - expect).abs() < 1e-12);
    }

    #[test]
    fn uniform_prediction_loss_is_ln5() {
        let mut hp = tiny_hp();
        hp.l2 = 0.0;
        let mut params = jittered::<f64>(&hp, 9);
        params.softmax = Projection {
            w: Tensor::zeros(vec![8, N_OUT]),
            b: Tensor::zeros(vec![N_OUT]),
        };
        let (images, labels) = tiny_batch(10);
        let batch = [SequenceRef { images: &images[0], labels: &labels[0] }];
        let out = sequence_loss(&params, &hp, &batch, &[true; N_TENSORS], None, Dropout::off()).unwrap();
        assert!((out.loss - 5f64.ln()).abs() < 1e-12, "{}", out.loss);
    }

    #[test]
    fn predictions_do_not_depend_on_batch_composition() {
        let hp = tiny_hp();
        let params = jittered::<f32>(&hp, 11);
        let (images, _) = tiny_batch(12);
        let seqs: Vec<&[EpochImage]> = images.iter().map(|v| v.as_slice()).collect();
        let together = predict_sequences(&params, &hp, &seqs, false).unwrap();
        for (b, seq) in seqs.iter().enumerate() {
            let alone = predict_sequences(&params, &hp, &[seq], false).unwrap();
            assert_eq!(alone[0], together[b]);
        }
        let flat: Vec<&EpochImage> = images.iter().flatten().collect();
        let feats = epoch_features(&params, &hp, &flat).unwrap();
        let via_features = predict_from_features(&params, &feats, &[0, 3], 3).unwrap();
        assert_eq!(via_features, together);
    }

    #[test]
    fn attention_weights_sum_to_one() {
        let hp = tiny_hp();
        let params = jittered::<f32>(&hp, 13);
        let (images, _) = tiny_batch(14);
        let imgs: Vec<&EpochImage> = images[0].iter().collect();
        for row in attention_weights(&params, &hp, &imgs).unwrap() {
            assert_eq!(row.len(), 5);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn ragged_batch_is_rejected() {
        let hp = tiny_hp();
        let params = jittered::<f32>(&hp, 15);
        let (images, labels) = tiny_batch(16);
        let batch = [
            SequenceRef { images: &images[0], labels: &labels[0] },
            SequenceRef { images: &images[1][..2], labels: &labels[1][..2] },
        ];
        let r = sequence_loss(&params, &hp, &batch, &[true; N_TENSORS], None, Dropout::off());
        assert!(matches!(r, Err(NetworkError::EmptyBatch)));
    }
}
