//! Log-power time-frequency images of 30 s epochs.
//!
//! Frames are 200 samples (2 s at 100 Hz) with a hop of 100, Hamming
//! windowed and zero-padded to a 256-point FFT. The one-sided power of bins
//! 0..=128 is log-scaled as `ln(power + 1e-12)`, giving a 129×29 image.

use std::io::Write;
use std::sync::{Arc, OnceLock};

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use thiserror::Error;

use crate::dataio::{Recording, StageLabel, EPOCH_SAMPLES, TARGET_RATE};

pub const N_FFT: usize = 256;
pub const FRAME_LEN: usize = 200;
pub const HOP: usize = 100;
pub const N_FREQ: usize = N_FFT / 2 + 1;
pub const N_FRAMES: usize = (EPOCH_SAMPLES - FRAME_LEN) / HOP + 1;
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum SpectrogramError {
    #[error("epoch has {0} samples, expected 3000")]
    WrongEpochLength(usize),
    #[error("recording must be sampled at 100 Hz, got {0} Hz")]
    WrongRate(u32),
    #[error("image values must be finite and {0} long")]
    BadImage(usize),
}

/// An F×T real image stored frequency-major (`values[f * T + t]`).
#[derive(Clone, Debug, PartialEq)]
pub struct EpochImage {
    n_freq: usize,
    n_frames: usize,
    values: Vec<f32>,
}

impl EpochImage {
    pub fn new(n_freq: usize, n_frames: usize, values: Vec<f32>) -> Result<Self, SpectrogramError> {
        if values.len() != n_freq * n_frames || values.iter().any(|v| !v.is_finite()) {
            return Err(SpectrogramError::BadImage(n_freq * n_frames));
        }
        Ok(Self {
            n_freq,
            n_frames,
            values,
        })
    }

    pub fn n_freq(&self) -> usize {
        self.n_freq
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, f: usize, t: usize) -> f32 {
        self.values[f * self.n_frames + t]
    }

    /// Writes rows = frequency bins, columns = frames.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for f in 0..self.n_freq {
            let row: Vec<String> = (0..self.n_frames).map(|t| self.get(f, t).to_string()).collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

fn hamming() -> &'static [f64] {
    static W: OnceLock<Vec<f64>> = OnceLock::new();
    W.get_or_init(|| {
        (0..FRAME_LEN)
            .map(|n| {
                0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / (FRAME_LEN - 1) as f64).cos()
            })
            .collect()
    })
}

fn fft() -> &'static Arc<dyn Fft<f64>> {
    static PLAN: OnceLock<Arc<dyn Fft<f64>>> = OnceLock::new();
    PLAN.get_or_init(|| FftPlanner::new().plan_fft_forward(N_FFT))
}

pub fn stft_logpower(epoch: &[f32]) -> Result<EpochImage, SpectrogramError> {
    if epoch.len() != EPOCH_SAMPLES {
        return Err(SpectrogramError::WrongEpochLength(epoch.len()));
    }
    let window = hamming();
    let plan = fft();
    let mut values = vec![0.0f32; N_FREQ * N_FRAMES];
    let mut buf = vec![Complex::new(0.0, 0.0); N_FFT];
    for t in 0..N_FRAMES {
        let frame = &epoch[t * HOP..t * HOP + FRAME_LEN];
        for (i, slot) in buf.iter_mut().enumerate() {
            *slot = if i < FRAME_LEN {
                Complex::new(frame[i] as f64 * window[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        plan.process(&mut buf);
        for f in 0..N_FREQ {
            values[f * N_FRAMES + t] = (buf[f].norm_sqr() + LOG_FLOOR).ln() as f32;
        }
    }
    EpochImage::new(N_FREQ, N_FRAMES, values)
}

/// A recording reduced to what the network consumes: one image and one
/// label per epoch.
#[derive(Clone, Debug)]
pub struct PreparedRecording {
    pub subject_id: String,
    pub images: Vec<EpochImage>,
    pub labels: Vec<StageLabel>,
}

impl PreparedRecording {
    pub fn from_recording(rec: &Recording) -> Result<Self, SpectrogramError> {
        if rec.sample_rate != TARGET_RATE {
            return Err(SpectrogramError::WrongRate(rec.sample_rate));
        }
        let images = (0..rec.n_epochs())
            .map(|i| stft_logpower(rec.epoch(i)))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            subject_id: rec.subject_id.clone(),
            images,
            labels: rec.epoch_labels.clone(),
        })
    }

    pub fn n_epochs(&self) -> usize {
        self.labels.len()
    }
}

pub fn prepare_all(recs: &[Recording]) -> Result<Vec<PreparedRecording>, SpectrogramError> {
    recs.iter().map(PreparedRecording::from_recording).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, amp: f64) -> Vec<f32> {
        (0..EPOCH_SAMPLES)
            .map(|i| (amp * (2.0 * std::f64::consts::PI * freq * i as f64 / 100.0).sin()) as f32)
            .collect()
    }

    /// Direct DFT power of one windowed, zero-padded frame.
    fn dft_power(frame: &[f32], bin: usize) -> f64 {
        let mut re = 0.0;
        let mut im = 0.0;
        for (n, &x) in frame.iter().enumerate() {
            let w = 0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / 199.0).cos();
            let a = -2.0 * std::f64::consts::PI * (bin * n) as f64 / 256.0;
            re += x as f64 * w * a.cos();
            im += x as f64 * w * a.sin();
        }
        re * re + im * im
    }

    #[test]
    fn image_is_129_by_29() {
        let img = stft_logpower(&sine(3.0, 1.0)).unwrap();
        assert_eq!((img.n_freq(), img.n_frames()), (129, 29));
        assert_eq!(img.values().len(), 129 * 29);
    }

    #[test]
    fn zero_epoch_is_log_floor_everywhere() {
        let img = stft_logpower(&vec![0.0; EPOCH_SAMPLES]).unwrap();
        let floor = (LOG_FLOOR.ln()) as f32;
        assert!(img.values().iter().all(|&v| v == floor));
    }

    #[test]
    fn ten_hz_sine_peaks_at_bin_26() {
        let x = sine(10.0, 1.0);
        let img = stft_logpower(&x).unwrap();
        for t in 1..N_FRAMES - 1 {
            let best = (0..N_FREQ)
                .max_by(|&a, &b| img.get(a, t).partial_cmp(&img.get(b, t)).unwrap())
                .unwrap();
            assert_eq!(best, 26, "frame {t}");
            let oracle = (0..N_FREQ)
                .max_by(|&a, &b| {
                    dft_power(&x[t * HOP..t * HOP + FRAME_LEN], a)
                        .partial_cmp(&dft_power(&x[t * HOP..t * HOP + FRAME_LEN], b))
                        .unwrap()
                })
                .unwrap();
            assert_eq!(best, oracle);
        }
    }

    #[test]
    fn matches_direct_dft_values() {
        let x = sine(7.3, 2.0);
        let img = stft_logpower(&x).unwrap();
        for &(f, t) in &[(0usize, 0usize), (19, 4), (64, 28), (128, 13)] {
            let p = dft_power(&x[t * HOP..t * HOP + FRAME_LEN], f);
            let expect = (p + LOG_FLOOR).ln();
            assert!((img.get(f, t) as f64 - expect).abs() < 1e-4 * expect.abs().max(1.0));
        }
    }

    #[test]
    fn doubling_amplitude_adds_ln4() {
        let a = stft_logpower(&sine(5.0, 1.0)).unwrap();
        let b = stft_logpower(&sine(5.0, 2.0)).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            if *x > -10.0 {
                assert!(((y - x) as f64 - 4f64.ln()).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn shifting_by_one_hop_shifts_one_column() {
        let long: Vec<f32> = (0..EPOCH_SAMPLES + HOP)
            .map(|i| ((i as f64 * 0.37).sin() + (i as f64 * 0.011).cos()) as f32)
            .collect();
        let a = stft_logpower(&long[..EPOCH_SAMPLES]).unwrap();
        let b = stft_logpower(&long[HOP..]).unwrap();
        for f in 0..N_FREQ {
            for t in 0..N_FRAMES - 1 {
                assert!((a.get(f, t + 1) - b.get(f, t)).abs() as f64 <= 1e-10);
            }
        }
    }

    #[test]
    fn wrong_length_is_rejected() {
        assert_eq!(
            stft_logpower(&[0.0; 2999]).unwrap_err(),
            SpectrogramError::WrongEpochLength(2999)
        );
    }

    #[test]
    fn csv_has_129_rows_of_29() {
        let img = stft_logpower(&sine(1.0, 1.0)).unwrap();
        let mut out = Vec::new();
        img.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().count(), 129);
        assert!(text.lines().all(|l| l.split(',').count() == 29));
    }
}
