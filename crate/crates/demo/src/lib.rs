//! Browser bindings: a synthetic epoch's log-power image under a chosen
//! channel mismatch, the filterbank's starting weights, and multiplicative
//! fusion of per-window class probabilities.

use seqsleep::dataio::{generate_synthetic_cohort, DomainShift, SpectralProfile, StageLabel, SyntheticCohortConfig};
use seqsleep::evaluation::multiplicative_fuse;
use seqsleep::network::triangular_filterbank;
use seqsleep::spectrogram::stft_logpower;
use wasm_bindgen::prelude::*;

pub const N_FREQ: usize = 129;
pub const N_FRAMES: usize = 29;
const NYQUIST_HZ: f64 = 50.0;

/// Log-power image (frequency-major, 129 x 29) of the first synthetic
/// epoch scored as `stage` (0 = W .. 4 = REM). `mismatch` takes the same
/// strings as the command line, e.g. `heavy` or `warp=1.2,floor=0.02`.
#[wasm_bindgen]
pub fn synthetic_epoch_image(stage: usize, profile: &str, mismatch: &str, seed: u64) -> Result<Vec<f32>, String> {
    let stage = StageLabel::from_index(stage).ok_or_else(|| format!("stage {stage} is not in 0..5"))?;
    let mut cfg = SyntheticCohortConfig::new(2, 60, seed);
    cfg.profile = SpectralProfile::by_name(profile).map_err(|e| e.to_string())?;
    cfg.mismatch = DomainShift::parse(mismatch, cfg.profile.bands.len()).map_err(|e| e.to_string())?;
    let recs = generate_synthetic_cohort(&cfg).map_err(|e| e.to_string())?;
    let (rec, i) = recs
        .iter()
        .flat_map(|r| (0..r.n_epochs()).map(move |i| (r, i)))
        .find(|(r, i)| r.epoch_labels[*i] == stage)
        .ok_or_else(|| format!("no {stage} epoch for seed {seed}; try another seed"))?;
    let image = stft_logpower(rec.epoch(i)).map_err(|e| e.to_string())?;
    Ok(image.values().to_vec())
}

/// Starting filterbank weights, frequency-major (129 x `n_filters`).
#[wasm_bindgen]
pub fn filterbank_weights(n_filters: usize) -> Result<Vec<f64>, String> {
    if n_filters == 0 || n_filters > N_FREQ {
        return Err(format!("n_filters must be in 1..={N_FREQ}"));
    }
    Ok(triangular_filterbank(N_FREQ, n_filters, NYQUIST_HZ))
}

/// Fuses concatenated 5-class probability vectors into one distribution.
#[wasm_bindgen]
pub fn fuse(flat: &[f64]) -> Result<Vec<f64>, String> {
    if flat.is_empty() || flat.len() % 5 != 0 {
        return Err("expected a non-empty multiple of 5 values".into());
    }
    let decisions: Vec<[f64; 5]> = flat
        .chunks(5)
        .map(|c| {
            let z: f64 = c.iter().sum();
            std::array::from_fn(|k| if z > 0.0 { c[k] / z } else { 0.2 })
        })
        .collect();
    multiplicative_fuse(&decisions)
        .map(|p| p.to_vec())
        .map_err(|e| e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_has_the_model_shape_and_depends_on_mismatch() {
        let a = synthetic_epoch_image(2, "eeg_like", "none", 3).unwrap();
        let b = synthetic_epoch_image(2, "eeg_like", "heavy", 3).unwrap();
        assert_eq!(a.len(), N_FREQ * N_FRAMES);
        assert_ne!(a, b);
        assert!(synthetic_epoch_image(7, "eeg_like", "none", 3).is_err());
        assert!(synthetic_epoch_image(0, "eeg_like", "sideways", 3).is_err());
    }

    #[test]
    fn filterbank_columns_are_nonnegative() {
        let w = filterbank_weights(20).unwrap();
        assert_eq!(w.len(), N_FREQ * 20);
        assert!(w.iter().all(|&v| v >= 0.0));
        assert!(filterbank_weights(0).is_err());
    }

    #[test]
    fn fusion_sharpens_agreeing_votes() {
        let p = fuse(&[0.8, 0.05, 0.05, 0.05, 0.05, 0.8, 0.05, 0.05, 0.05, 0.05]).unwrap();
        assert!((p[0] - 0.64 / 0.65).abs() < 1e-12);
        assert!(fuse(&[1.0, 2.0]).is_err());
    }
}
