use rand::Rng;

use super::{HyperParams, N_OUT};
use crate::numerics::{Real, Tensor};

/// Canonical parameter-tensor names in checkpoint order.
pub const CANONICAL_NAMES: [&str; 46] = [
    "filterbank.V",
    "ernn.fwd.Wz",
    "ernn.fwd.Uz",
    "ernn.fwd.bz",
    "ernn.fwd.Wr",
    "ernn.fwd.Ur",
    "ernn.fwd.br",
    "ernn.fwd.Wh",
    "ernn.fwd.Uh",
    "ernn.fwd.bh",
    "ernn.bwd.Wz",
    "ernn.bwd.Uz",
    "ernn.bwd.bz",
    "ernn.bwd.Wr",
    "ernn.bwd.Ur",
    "ernn.bwd.br",
    "ernn.bwd.Wh",
    "ernn.bwd.Uh",
    "ernn.bwd.bh",
    "ernn.out.W_ha",
    "ernn.out.b_a",
    "att.W",
    "att.b",
    "att.u",
    "seqrnn.fwd.Wz",
    "seqrnn.fwd.Uz",
    "seqrnn.fwd.bz",
    "seqrnn.fwd.Wr",
    "seqrnn.fwd.Ur",
    "seqrnn.fwd.br",
    "seqrnn.fwd.Wh",
    "seqrnn.fwd.Uh",
    "seqrnn.fwd.bh",
    "seqrnn.bwd.Wz",
    "seqrnn.bwd.Uz",
    "seqrnn.bwd.bz",
    "seqrnn.bwd.Wr",
    "seqrnn.bwd.Ur",
    "seqrnn.bwd.br",
    "seqrnn.bwd.Wh",
    "seqrnn.bwd.Uh",
    "seqrnn.bwd.bh",
    "seqrnn.out.W_ho",
    "seqrnn.out.b_o",
    "softmax.W",
    "softmax.b",
];

pub const N_TENSORS: usize = CANONICAL_NAMES.len();

pub(crate) mod idx {
    pub const FILTERBANK: usize = 0;
    pub const ERNN_FWD: usize = 1;
    pub const ERNN_BWD: usize = 10;
    pub const ERNN_OUT: usize = 19;
    pub const ATT: usize = 21;
    pub const SEQ_FWD: usize = 24;
    pub const SEQ_BWD: usize = 33;
    pub const SEQ_OUT: usize = 42;
    pub const SOFTMAX: usize = 44;
}

/// Position of a canonical name, if it is one.
pub fn canonical_index(name: &str) -> Option<usize> {
    CANONICAL_NAMES.iter().position(|n| *n == name)
}

fn glorot<S: Real, R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor<S> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| S::from_f64(rng.random_range(-limit..limit)))
        .collect();
    Tensor::new(vec![rows, cols], data).expect("glorot shape")
}

fn filled<S: Real>(n: usize, v: f64) -> Tensor<S> {
    Tensor::new(vec![n], vec![S::from_f64(v); n]).expect("vector shape")
}

/// `log(exp(w) − 1)`, the inverse of softplus, for `w > 0`.
pub(crate) fn inverse_softplus(w: f64) -> f64 {
    if w > 30.0 {
        w
    } else {
        w.exp_m1().ln()
    }
}

pub(crate) fn softplus(v: f64) -> f64 {
    v.max(0.0) + (-v.abs()).exp().ln_1p()
}

/// `n_freq × n_filters` triangular filters with centers linearly spaced over
/// 0..fs/2, each column normalized to unit sum.
pub fn triangular_filterbank(n_freq: usize, n_filters: usize, nyquist_hz: f64) -> Vec<f64> {
    let mut w = vec![0.0; n_freq * n_filters];
    if n_freq == 0 || n_filters == 0 {
        return w;
    }
    let bin_hz = if n_freq > 1 { nyquist_hz / (n_freq - 1) as f64 } else { 0.0 };
    let spacing = nyquist_hz / (n_filters + 1) as f64;
    for m in 0..n_filters {
        let (left, center, right) = (m as f64 * spacing, (m + 1) as f64 * spacing, (m + 2) as f64 * spacing);
        let mut sum = 0.0;
        for k in 0..n_freq {
            let f = k as f64 * bin_hz;
            let v = if f > left && f <= center {
                (f - left) / (center - left)
            } else if f > center && f < right {
                (right - f) / (right - center)
            } else {
                0.0
            };
            w[k * n_filters + m] = v;
            sum += v;
        }
        if sum == 0.0 {
            let k = ((center / bin_hz.max(f64::MIN_POSITIVE)).round() as usize).min(n_freq - 1);
            w[k * n_filters + m] = 1.0;
            sum = 1.0;
        }
        for k in 0..n_freq {
            w[k * n_filters + m] /= sum;
        }
    }
    w
}

/// Learnable nonnegative `F × M` filterbank, stored through its softplus
/// preimage `V` so that `W_fb = softplus(V) ≥ 0` always holds.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterbankParams<S: Real = f32> {
    pub v: Tensor<S>,
}

/// Smallest weight representable through `V` at initialization.
const MIN_INIT_WEIGHT: f64 = 1e-3;

impl<S: Real> FilterbankParams<S> {
    pub fn triangular(n_freq: usize, n_filters: usize) -> Self {
        let w = triangular_filterbank(n_freq, n_filters, 50.0);
        let v: Vec<f64> = w.iter().map(|&x| inverse_softplus(x.max(MIN_INIT_WEIGHT))).collect();
        Self {
            v: Tensor::from_f64(vec![n_freq, n_filters], &v).expect("filterbank shape"),
        }
    }

    /// Parameterization reproducing the given nonnegative weights; exact
    /// zeros map to a preimage whose softplus is below 1e-17.
    pub fn from_weights(weights: &Tensor<S>) -> Self {
        let v: Vec<f64> = weights
            .data()
            .iter()
            .map(|w| {
                let w = w.to_f64();
                if w <= 0.0 {
                    -40.0
                } else {
                    inverse_softplus(w)
                }
            })
            .collect();
        Self {
            v: Tensor::from_f64(weights.shape().to_vec(), &v).expect("same shape"),
        }
    }

    pub fn weights(&self) -> Tensor<S> {
        let w: Vec<f64> = self.v.data().iter().map(|v| softplus(v.to_f64())).collect();
        Tensor::from_f64(self.v.shape().to_vec(), &w).expect("same shape")
    }
}

/// One direction of a GRU: input matrices `W*` (in × H), recurrent
/// matrices `U*` (H × H) and biases `b*` for the update, reset and
/// candidate paths.
#[derive(Clone, Debug, PartialEq)]
pub struct GruCellParams<S: Real = f32> {
    pub wz: Tensor<S>,
    pub uz: Tensor<S>,
    pub bz: Tensor<S>,
    pub wr: Tensor<S>,
    pub ur: Tensor<S>,
    pub br: Tensor<S>,
    pub wh: Tensor<S>,
    pub uh: Tensor<S>,
    pub bh: Tensor<S>,
}

/// Initial update-gate bias.
pub const UPDATE_GATE_BIAS: f64 = 1.0;

impl<S: Real> GruCellParams<S> {
    pub fn init<R: Rng>(input: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            wz: glorot(input, hidden, rng),
            uz: glorot(hidden, hidden, rng),
            bz: filled(hidden, UPDATE_GATE_BIAS),
            wr: glorot(input, hidden, rng),
            ur: glorot(hidden, hidden, rng),
            br: filled(hidden, 0.0),
            wh: glorot(input, hidden, rng),
            uh: glorot(hidden, hidden, rng),
            bh: filled(hidden, 0.0),
        }
    }

    pub fn zeros(input: usize, hidden: usize) -> Self {
        let m = |r, c| Tensor::zeros(vec![r, c]);
        Self {
            wz: m(input, hidden),
            uz: m(hidden, hidden),
            bz: Tensor::zeros(vec![hidden]),
            wr: m(input, hidden),
            ur: m(hidden, hidden),
            br: Tensor::zeros(vec![hidden]),
            wh: m(input, hidden),
            uh: m(hidden, hidden),
            bh: Tensor::zeros(vec![hidden]),
        }
    }

    pub fn hidden(&self) -> usize {
        self.uz.dims2().0
    }

    fn tensors(&self) -> [&Tensor<S>; 9] {
        [&self.wz, &self.uz, &self.bz, &self.wr, &self.ur, &self.br, &self.wh, &self.uh, &self.bh]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor<S>; 9] {
        [
            &mut self.wz,
            &mut self.uz,
            &mut self.bz,
            &mut self.wr,
            &mut self.ur,
            &mut self.br,
            &mut self.wh,
            &mut self.uh,
            &mut self.bh,
        ]
    }
}

/// Additive attention: `e_t = uᵀ tanh(W a_t + b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<S: Real = f32> {
    pub w: Tensor<S>,
    pub b: Tensor<S>,
    pub u: Tensor<S>,
}

/// Affine map `y = x W + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection<S: Real = f32> {
    pub w: Tensor<S>,
    pub b: Tensor<S>,
}

impl<S: Real> Projection<S> {
    fn init<R: Rng>(input: usize, output: usize, rng: &mut R) -> Self {
        Self {
            w: glorot(input, output, rng),
            b: filled(output, 0.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<S: Real = f32> {
    pub filterbank: FilterbankParams<S>,
    pub ernn_fwd: GruCellParams<S>,
    pub ernn_bwd: GruCellParams<S>,
    pub ernn_out: Projection<S>,
    pub attention: AttentionParams<S>,
    pub seqrnn_fwd: GruCellParams<S>,
    pub seqrnn_bwd: GruCellParams<S>,
    pub seqrnn_out: Projection<S>,
    pub softmax: Projection<S>,
}

impl<S: Real> ModelParams<S> {
    /// Glorot-uniform matrices, zero biases (update gates at 1.0) and a
    /// triangular filterbank.
    pub fn init<R: Rng>(hp: &HyperParams, rng: &mut R) -> Self {
        let feat = hp.feature_width();
        let seq_out = hp.seq_output_width();
        Self {
            filterbank: FilterbankParams::triangular(hp.n_freq, hp.n_filters),
            ernn_fwd: GruCellParams::init(hp.n_filters, hp.ernn_hidden, rng),
            ernn_bwd: GruCellParams::init(hp.n_filters, hp.ernn_hidden, rng),
            ernn_out: Projection::init(feat, feat, rng),
            attention: AttentionParams {
                w: glorot(feat, hp.attention_size, rng),
                b: filled(hp.attention_size, 0.0),
                u: glorot(hp.attention_size, 1, rng),
            },
            seqrnn_fwd: GruCellParams::init(feat, hp.seqrnn_hidden, rng),
            seqrnn_bwd: GruCellParams::init(feat, hp.seqrnn_hidden, rng),
            seqrnn_out: Projection::init(seq_out, seq_out, rng),
            softmax: Projection::init(seq_out, N_OUT, rng),
        }
    }

    /// Expected shape of every canonical tensor, in canonical order.
    pub fn expected_shapes(hp: &HyperParams) -> Vec<Vec<usize>> {
        let feat = hp.feature_width();
        let seq_out = hp.seq_output_width();
        let gru = |input: usize, h: usize| {
            vec![
                vec![input, h],
                vec![h, h],
                vec![h],
                vec![input, h],
                vec![h, h],
                vec![h],
                vec![input, h],
                vec![h, h],
                vec![h],
            ]
        };
        let mut s = vec![vec![hp.n_freq, hp.n_filters]];
        s.extend(gru(hp.n_filters, hp.ernn_hidden));
        s.extend(gru(hp.n_filters, hp.ernn_hidden));
        s.extend([vec![feat, feat], vec![feat]]);
        s.extend([
            vec![feat, hp.attention_size],
            vec![hp.attention_size],
            vec![hp.attention_size, 1],
        ]);
        s.extend(gru(feat, hp.seqrnn_hidden));
        s.extend(gru(feat, hp.seqrnn_hidden));
        s.extend([vec![seq_out, seq_out], vec![seq_out]]);
        s.extend([vec![seq_out, N_OUT], vec![N_OUT]]);
        s
    }

    pub fn tensors(&self) -> Vec<&Tensor<S>> {
        let mut out: Vec<&Tensor<S>> = vec![&self.filterbank.v];
        out.extend(self.ernn_fwd.tensors());
        out.extend(self.ernn_bwd.tensors());
        out.extend([&self.ernn_out.w, &self.ernn_out.b]);
        out.extend([&self.attention.w, &self.attention.b, &self.attention.u]);
        out.extend(self.seqrnn_fwd.tensors());
        out.extend(self.seqrnn_bwd.tensors());
        out.extend([&self.seqrnn_out.w, &self.seqrnn_out.b]);
        out.extend([&self.softmax.w, &self.softmax.b]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out: Vec<&mut Tensor<S>> = vec![&mut self.filterbank.v];
        out.extend(self.ernn_fwd.tensors_mut());
        out.extend(self.ernn_bwd.tensors_mut());
        out.extend([&mut self.ernn_out.w, &mut self.ernn_out.b]);
        out.extend([&mut self.attention.w, &mut self.attention.b, &mut self.attention.u]);
        out.extend(self.seqrnn_fwd.tensors_mut());
        out.extend(self.seqrnn_bwd.tensors_mut());
        out.extend([&mut self.seqrnn_out.w, &mut self.seqrnn_out.b]);
        out.extend([&mut self.softmax.w, &mut self.softmax.b]);
        out
    }

    pub fn named(&self) -> impl Iterator<Item = (&'static str, &Tensor<S>)> {
        CANONICAL_NAMES.iter().copied().zip(self.tensors())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        canonical_index(name).map(|i| self.tensors()[i])
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn cast<T: Real>(&self) -> ModelParams<T> {
        let mut out = ModelParams::<T>::zeros_like_shapes(self);
        for (dst, src) in out.tensors_mut().into_iter().zip(self.tensors()) {
            *dst = src.cast();
        }
        out
    }

    fn zeros_like_shapes<U: Real>(other: &ModelParams<U>) -> Self {
        let z = |t: &Tensor<U>| Tensor::<S>::zeros(t.shape().to_vec());
        let gru = |g: &GruCellParams<U>| GruCellParams {
            wz: z(&g.wz),
            uz: z(&g.uz),
            bz: z(&g.bz),
            wr: z(&g.wr),
            ur: z(&g.ur),
            br: z(&g.br),
            wh: z(&g.wh),
            uh: z(&g.uh),
            bh: z(&g.bh),
        };
        let proj = |p: &Projection<U>| Projection { w: z(&p.w), b: z(&p.b) };
        Self {
            filterbank: FilterbankParams { v: z(&other.filterbank.v) },
            ernn_fwd: gru(&other.ernn_fwd),
            ernn_bwd: gru(&other.ernn_bwd),
            ernn_out: proj(&other.ernn_out),
            attention: AttentionParams {
                w: z(&other.attention.w),
                b: z(&other.attention.b),
                u: z(&other.attention.u),
            },
            seqrnn_fwd: gru(&other.seqrnn_fwd),
            seqrnn_bwd: gru(&other.seqrnn_bwd),
            seqrnn_out: proj(&other.seqrnn_out),
            softmax: proj(&other.softmax),
        }
    }

    /// Builds parameters from tensors listed in canonical order.
    pub fn from_tensors(hp: &HyperParams, tensors: Vec<Tensor<S>>) -> Result<Self, super::NetworkError> {
        let shapes = Self::expected_shapes(hp);
        if tensors.len() != N_TENSORS {
            return Err(super::NetworkError::ShapeMismatch {
                what: "parameter count".into(),
                expected: vec![N_TENSORS],
                found: vec![tensors.len()],
            });
        }
        for ((t, s), name) in tensors.iter().zip(&shapes).zip(CANONICAL_NAMES) {
            if t.shape() != s.as_slice() {
                return Err(super::NetworkError::ShapeMismatch {
                    what: name.into(),
                    expected: s.clone(),
                    found: t.shape().to_vec(),
                });
            }
        }
        let mut out = Self::zeros(hp);
        for (dst, src) in out.tensors_mut().into_iter().zip(tensors) {
            *dst = src;
        }
        Ok(out)
    }

    pub fn zeros(hp: &HyperParams) -> Self {
        let feat = hp.feature_width();
        let seq_out = hp.seq_output_width();
        Self {
            filterbank: FilterbankParams {
                v: Tensor::zeros(vec![hp.n_freq, hp.n_filters]),
            },
            ernn_fwd: GruCellParams::zeros(hp.n_filters, hp.ernn_hidden),
            ernn_bwd: GruCellParams::zeros(hp.n_filters, hp.ernn_hidden),
            ernn_out: Projection {
                w: Tensor::zeros(vec![feat, feat]),
                b: Tensor::zeros(vec![feat]),
            },
            attention: AttentionParams {
                w: Tensor::zeros(vec![feat, hp.attention_size]),
                b: Tensor::zeros(vec![hp.attention_size]),
                u: Tensor::zeros(vec![hp.attention_size, 1]),
            },
            seqrnn_fwd: GruCellParams::zeros(feat, hp.seqrnn_hidden),
            seqrnn_bwd: GruCellParams::zeros(feat, hp.seqrnn_hidden),
            seqrnn_out: Projection {
                w: Tensor::zeros(vec![seq_out, seq_out]),
                b: Tensor::zeros(vec![seq_out]),
            },
            softmax: Projection {
                w: Tensor::zeros(vec![seq_out, N_OUT]),
                b: Tensor::zeros(vec![N_OUT]),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    #[test]
    fn canonical_layout_matches_index_constants() {
        assert_eq!(CANONICAL_NAMES[idx::FILTERBANK], "filterbank.V");
        assert_eq!(CANONICAL_NAMES[idx::ERNN_FWD], "ernn.fwd.Wz");
        assert_eq!(CANONICAL_NAMES[idx::ERNN_BWD + 8], "ernn.bwd.bh");
        assert_eq!(CANONICAL_NAMES[idx::ERNN_OUT], "ernn.out.W_ha");
        assert_eq!(CANONICAL_NAMES[idx::ATT + 2], "att.u");
        assert_eq!(CANONICAL_NAMES[idx::SEQ_FWD], "seqrnn.fwd.Wz");
        assert_eq!(CANONICAL_NAMES[idx::SEQ_BWD], "seqrnn.bwd.Wz");
        assert_eq!(CANONICAL_NAMES[idx::SEQ_OUT + 1], "seqrnn.out.b_o");
        assert_eq!(CANONICAL_NAMES[idx::SOFTMAX + 1], "softmax.b");
    }

    #[test]
    fn init_shapes_match_expected() {
        let hp = HyperParams::default();
        let p: ModelParams = ModelParams::init(&hp, &mut substream(1, "init", 0));
        let shapes: Vec<Vec<usize>> = p.tensors().iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(shapes, ModelParams::<f32>::expected_shapes(&hp));
        assert_eq!(p.ernn_fwd.bz.data(), vec![1.0f32; hp.ernn_hidden].as_slice());
    }

    #[test]
    fn triangular_filters_are_nonnegative_unit_mass() {
        let w = triangular_filterbank(129, 32, 50.0);
        for m in 0..32 {
            let col: f64 = (0..129).map(|k| w[k * 32 + m]).sum();
            assert!((col - 1.0).abs() < 1e-12);
        }
        assert!(w.iter().all(|v| *v >= 0.0));
        let fb = FilterbankParams::<f64>::triangular(129, 32);
        assert!(fb.weights().data().iter().all(|v| *v > 0.0));
    }

    #[test]
    fn from_weights_round_trips() {
        let w = Tensor::<f64>::from_f64(vec![2, 2], &[0.0, 0.5, 2.0, 1e-3]).unwrap();
        let back = FilterbankParams::from_weights(&w).weights();
        for (a, b) in back.data().iter().zip(w.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
