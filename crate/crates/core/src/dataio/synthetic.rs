//! Synthetic cohorts: colored-noise epochs whose band powers follow a
//! per-stage profile, stage sequences from a sticky Markov chain, and an
//! optional domain shift standing in for a different recording channel.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::{DataError, Recording, StageLabel, EPOCH_SAMPLES, N_CLASSES, TARGET_RATE};
use crate::rng::substream;

/// Probability of staying in the same stage from one epoch to the next.
pub const SELF_TRANSITION: f64 = 0.85;

/// Mean and variance of one band's power.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BandPower {
    pub mean: f64,
    pub variance: f64,
}

impl BandPower {
    /// Power with a given coefficient of variation.
    pub fn with_cv(mean: f64, cv: f64) -> Self {
        Self {
            mean,
            variance: (cv * mean).powi(2),
        }
    }
}

/// Frequency bands in Hz and per-stage band powers (stage order W..REM).
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralProfile {
    pub bands: Vec<(f64, f64)>,
    pub stages: [Vec<BandPower>; N_CLASSES],
}

const EEG_BANDS: [(f64, f64); 5] = [(0.5, 4.0), (4.0, 8.0), (8.0, 12.0), (12.0, 16.0), (16.0, 30.0)];

impl SpectralProfile {
    fn from_table(table: [[f64; 5]; N_CLASSES], cv: f64) -> Self {
        let stages = table.map(|row| row.iter().map(|&m| BandPower::with_cv(m, cv)).collect());
        Self {
            bands: EEG_BANDS.to_vec(),
            stages,
        }
    }

    /// Delta / theta / alpha / sigma / beta powers loosely shaped after
    /// scalp EEG: alpha in wake, theta in N1, spindles in N2, slow waves in
    /// N3, and a low-voltage mixed pattern in REM.
    pub fn eeg_like() -> Self {
        Self::from_table(
            [
                [20.0, 10.0, 40.0, 6.0, 30.0],
                [30.0, 30.0, 8.0, 5.0, 8.0],
                [80.0, 20.0, 8.0, 25.0, 6.0],
                [300.0, 30.0, 6.0, 6.0, 3.0],
                [25.0, 22.0, 6.0, 3.0, 14.0],
            ],
            0.5,
        )
    }

    /// Profiles with one dominant band per stage and little spread; easy to
    /// separate from a single epoch.
    pub fn separable() -> Self {
        Self::from_table(
            [
                [5.0, 5.0, 5.0, 5.0, 120.0],
                [5.0, 60.0, 5.0, 5.0, 5.0],
                [5.0, 5.0, 5.0, 60.0, 5.0],
                [200.0, 5.0, 5.0, 5.0, 5.0],
                [5.0, 5.0, 60.0, 5.0, 5.0],
            ],
            0.2,
        )
    }

    pub fn by_name(name: &str) -> Result<Self, DataError> {
        match name {
            "eeg_like" | "eeg-like" => Ok(Self::eeg_like()),
            "separable" => Ok(Self::separable()),
            other => Err(DataError::InvalidConfig(format!(
                "unknown profile {other:?} (expected eeg_like or separable)"
            ))),
        }
    }

    fn validate(&self) -> Result<(), DataError> {
        let nb = self.bands.len();
        if nb == 0 {
            return Err(DataError::InvalidConfig("no frequency bands".into()));
        }
        for &(lo, hi) in &self.bands {
            if !(lo >= 0.0 && hi > lo && hi <= TARGET_RATE as f64 / 2.0) {
                return Err(DataError::InvalidConfig(format!("bad band {lo}..{hi} Hz")));
            }
        }
        for (s, row) in self.stages.iter().enumerate() {
            if row.len() != nb {
                return Err(DataError::InvalidConfig(format!(
                    "stage {s} has {} band powers for {nb} bands",
                    row.len()
                )));
            }
            if row.iter().any(|b| !(b.mean > 0.0) || !(b.variance >= 0.0)) {
                return Err(DataError::InvalidConfig(format!(
                    "stage {s} has a non-positive band power"
                )));
            }
        }
        Ok(())
    }
}

/// Channel mismatch model applied to the clean stage spectrum: band powers
/// are mixed (`p' = A p`), the spectrum is warped in frequency
/// (`S'(f) = S(f / warp) / warp`), and a white noise floor is added.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainShift {
    pub warp: f64,
    pub mixing: Vec<Vec<f64>>,
    pub noise_floor: f64,
}

impl DomainShift {
    pub fn identity(n_bands: usize) -> Self {
        let mixing = (0..n_bands)
            .map(|i| (0..n_bands).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        Self {
            warp: 1.0,
            mixing,
            noise_floor: 0.0,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.warp == 1.0 && self.noise_floor == 0.0 && *self == Self::identity(self.mixing.len())
    }

    /// Each band keeps `keep` of its power and passes the rest to the next
    /// band up (cyclically).
    pub fn cyclic_mixing(n_bands: usize, keep: f64) -> Vec<Vec<f64>> {
        let mut m = vec![vec![0.0; n_bands]; n_bands];
        for j in 0..n_bands {
            m[j][j] += keep;
            m[(j + 1) % n_bands][j] += 1.0 - keep;
        }
        m
    }

    /// Band order reversed: the lowest band's power appears in the highest.
    pub fn reversed_mixing(n_bands: usize) -> Vec<Vec<f64>> {
        (0..n_bands)
            .map(|i| (0..n_bands).map(|j| if i + j == n_bands - 1 { 1.0 } else { 0.0 }).collect())
            .collect()
    }

    /// Mild mismatch, as between two scalp EEG derivations: a small
    /// frequency stretch, a little leakage into the next band and a faint
    /// noise floor.
    pub fn slight(n_bands: usize) -> Self {
        Self {
            warp: 1.05,
            mixing: Self::cyclic_mixing(n_bands, 0.9),
            noise_floor: 0.01,
        }
    }

    /// Strong mismatch, as between EEG and EOG: most of each band's power
    /// moves to the next band up and the spectrum is stretched by 30%.
    pub fn heavy(n_bands: usize) -> Self {
        Self {
            warp: 1.3,
            mixing: Self::cyclic_mixing(n_bands, 0.2),
            noise_floor: 0.0,
        }
    }

    /// Parses `none`, `slight`, `heavy`, or comma-separated overrides of the
    /// identity such as `warp=1.3,floor=0.05,mixing=reversed` (mixing is
    /// `identity`, `reversed` or `cyclic:<keep>`).
    pub fn parse(text: &str, n_bands: usize) -> Result<Self, DataError> {
        let bad = |m: String| DataError::InvalidConfig(format!("mismatch {text:?}: {m}"));
        let shift = match text.trim() {
            "" | "none" | "identity" => Self::identity(n_bands),
            "slight" => Self::slight(n_bands),
            "heavy" => Self::heavy(n_bands),
            list => {
                let mut shift = Self::identity(n_bands);
                for item in list.split(',') {
                    let (k, v) = item.split_once('=').ok_or_else(|| bad(format!("expected key=value, got {item:?}")))?;
                    let num = |v: &str| v.trim().parse::<f64>().map_err(|_| bad(format!("bad number {v:?}")));
                    match k.trim() {
                        "warp" => shift.warp = num(v)?,
                        "floor" | "noise_floor" => shift.noise_floor = num(v)?,
                        "mixing" => {
                            shift.mixing = match v.trim() {
                                "identity" => Self::identity(n_bands).mixing,
                                "reversed" => Self::reversed_mixing(n_bands),
                                c => match c.strip_prefix("cyclic:") {
                                    Some(keep) => Self::cyclic_mixing(n_bands, num(keep)?),
                                    None => return Err(bad(format!("unknown mixing {c:?}"))),
                                },
                            }
                        }
                        other => return Err(bad(format!("unknown key {other:?}"))),
                    }
                }
                shift
            }
        };
        shift.validate(n_bands)?;
        Ok(shift)
    }

    fn validate(&self, n_bands: usize) -> Result<(), DataError> {
        if !(self.warp > 0.0) || !(self.noise_floor >= 0.0) {
            return Err(DataError::InvalidConfig(format!(
                "warp {} / noise floor {} out of range",
                self.warp, self.noise_floor
            )));
        }
        if self.mixing.len() != n_bands
            || self.mixing.iter().any(|r| r.len() != n_bands)
            || self.mixing.iter().flatten().any(|v| !(*v >= 0.0))
        {
            return Err(DataError::InvalidConfig(format!(
                "mixing must be a nonnegative {n_bands}x{n_bands} matrix"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCohortConfig {
    pub n_subjects: usize,
    pub epochs_per_subject: usize,
    pub profile: SpectralProfile,
    pub mismatch: DomainShift,
    /// White background density present in every epoch before any shift.
    pub background: f64,
    /// Log-normal spread of a per-subject amplitude gain.
    pub subject_gain_sd: f64,
    /// Amplitude applied to the synthesized signal.
    pub signal_scale: f64,
    pub rng_seed: u64,
    pub channel: String,
    pub subject_prefix: String,
}

impl SyntheticCohortConfig {
    pub fn new(n_subjects: usize, epochs_per_subject: usize, rng_seed: u64) -> Self {
        let profile = SpectralProfile::eeg_like();
        let nb = profile.bands.len();
        Self {
            n_subjects,
            epochs_per_subject,
            profile,
            mismatch: DomainShift::identity(nb),
            background: 0.05,
            subject_gain_sd: 0.1,
            signal_scale: 0.1,
            rng_seed,
            channel: "EEG".into(),
            subject_prefix: "S".into(),
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.n_subjects < 2 {
            return Err(DataError::InvalidConfig("need at least 2 subjects".into()));
        }
        if self.epochs_per_subject == 0 {
            return Err(DataError::InvalidConfig("need at least 1 epoch per subject".into()));
        }
        if !(self.background >= 0.0 && self.subject_gain_sd >= 0.0 && self.signal_scale > 0.0) {
            return Err(DataError::InvalidConfig("negative background, gain spread or scale".into()));
        }
        self.profile.validate()?;
        self.mismatch.validate(self.profile.bands.len())
    }
}

/// Draws band powers for one epoch: log-normal with the configured mean and
/// variance.
fn draw_band_powers<R: Rng>(stage: &[BandPower], rng: &mut R) -> Vec<f64> {
    stage
        .iter()
        .map(|b| {
            let s2 = (1.0 + b.variance / (b.mean * b.mean)).ln();
            let mu = b.mean.ln() - s2 / 2.0;
            let z: f64 = StandardNormal.sample(rng);
            (mu + s2.sqrt() * z).exp()
        })
        .collect()
}

/// One-sided power density of an epoch at frequency `f`.
fn density(cfg: &SyntheticCohortConfig, powers: &[f64], f: f64) -> f64 {
    let shift = &cfg.mismatch;
    let src_f = f / shift.warp;
    let mut s = 0.0;
    for (i, &(lo, hi)) in cfg.profile.bands.iter().enumerate() {
        if src_f >= lo && src_f < hi {
            let mixed: f64 = (0..powers.len()).map(|j| shift.mixing[i][j] * powers[j]).sum();
            s += mixed / (hi - lo);
        }
    }
    s / shift.warp + cfg.background + shift.noise_floor
}

fn next_stage<R: Rng>(current: StageLabel, rng: &mut R) -> StageLabel {
    if rng.random::<f64>() < SELF_TRANSITION {
        return current;
    }
    let others: Vec<StageLabel> = StageLabel::ALL.iter().copied().filter(|&s| s != current).collect();
    others[rng.random_range(0..others.len())]
}

fn synthesize_epoch<R: Rng>(
    cfg: &SyntheticCohortConfig,
    stage: StageLabel,
    gain: f64,
    fft: &Arc<dyn Fft<f64>>,
    rng: &mut R,
) -> Vec<f32> {
    let n = EPOCH_SAMPLES;
    let df = TARGET_RATE as f64 / n as f64;
    let powers = draw_band_powers(&cfg.profile.stages[stage.index()], rng);
    let mut spec = vec![Complex::new(0.0, 0.0); n];
    for k in 1..n / 2 {
        let amp = (density(cfg, &powers, k as f64 * df) * df).sqrt() * n as f64 / 2.0;
        let a: f64 = StandardNormal.sample(rng);
        let b: f64 = StandardNormal.sample(rng);
        spec[k] = Complex::new(amp * a, -amp * b);
        spec[n - k] = spec[k].conj();
    }
    fft.process(&mut spec);
    let scale = cfg.signal_scale * gain / n as f64;
    spec.iter().map(|c| (c.re * scale) as f32).collect()
}

/// Generates `n_subjects` recordings. Every subject draws from its own
/// substream, so results are bit-identical for equal configs.
pub fn generate_synthetic_cohort(cfg: &SyntheticCohortConfig) -> Result<Vec<Recording>, DataError> {
    cfg.validate()?;
    let fft = FftPlanner::<f64>::new().plan_fft_inverse(EPOCH_SAMPLES);
    let gain_dist = Normal::new(0.0, cfg.subject_gain_sd)
        .map_err(|e| DataError::InvalidConfig(e.to_string()))?;
    let mut out = Vec::with_capacity(cfg.n_subjects);
    for s in 0..cfg.n_subjects {
        let mut rng = substream(cfg.rng_seed, "synthetic-subject", s as u64);
        let gain = gain_dist.sample(&mut rng).exp();
        let mut stage = StageLabel::ALL[rng.random_range(0..N_CLASSES)];
        let mut samples = Vec::with_capacity(cfg.epochs_per_subject * EPOCH_SAMPLES);
        let mut labels = Vec::with_capacity(cfg.epochs_per_subject);
        for e in 0..cfg.epochs_per_subject {
            if e > 0 {
                stage = next_stage(stage, &mut rng);
            }
            samples.extend(synthesize_epoch(cfg, stage, gain, &fft, &mut rng));
            labels.push(stage);
        }
        out.push(Recording::new(
            format!("{}{:02}", cfg.subject_prefix, s + 1),
            cfg.channel.clone(),
            TARGET_RATE,
            samples,
            labels,
        )?);
    }
    Ok(out)
}
