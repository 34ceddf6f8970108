//! Recordings, stage labels, and the preparation steps that turn raw
//! polysomnography channels into 100 Hz, 30 s-epoch, in-bed recordings.

mod format;
mod resample;
mod synthetic;

pub use format::{load_cohort, load_recording, save_cohort, save_recording, MANIFEST_NAME};
pub use resample::resample_to_100hz;
pub use synthetic::{
    generate_synthetic_cohort, BandPower, DomainShift, SpectralProfile, SyntheticCohortConfig,
};

use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Sampling rate of every prepared recording.
pub const TARGET_RATE: u32 = 100;
/// Samples in one prepared 30 s epoch.
pub const EPOCH_SAMPLES: usize = 3000;
pub const EPOCH_SECONDS: usize = 30;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("malformed header field `{field}`: {reason}")]
    MalformedHeader { field: String, reason: String },
    #[error("sample count mismatch: expected {expected}, found {found}")]
    SampleCountMismatch { expected: usize, found: usize },
    #[error("unknown label code {code} at epoch {epoch}")]
    UnknownLabelCode { epoch: usize, code: String },
    #[error("lights index `{field}` = {index} is not a multiple of the epoch length")]
    MisalignedLightsIndex { field: &'static str, index: usize },
    #[error("unsupported sample rate {rate} Hz")]
    UnsupportedRate { rate: u32 },
    #[error("invalid recording: {0}")]
    InvalidRecording(String),
    #[error("invalid synthetic cohort config: {0}")]
    InvalidConfig(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// The five AASM stages; the discriminant is the class index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum StageLabel {
    W = 0,
    N1 = 1,
    N2 = 2,
    N3 = 3,
    Rem = 4,
}

pub const N_CLASSES: usize = 5;

impl StageLabel {
    pub const ALL: [StageLabel; N_CLASSES] = [Self::W, Self::N1, Self::N2, Self::N3, Self::Rem];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::W => "W",
            Self::N1 => "N1",
            Self::N2 => "N2",
            Self::N3 => "N3",
            Self::Rem => "REM",
        }
    }
}

impl fmt::Display for StageLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// R&K scoring categories as found in older annotations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RawLabel {
    W,
    N1,
    N2,
    N3,
    N4,
    Rem,
    Movement,
    Unknown,
}

impl From<StageLabel> for RawLabel {
    fn from(s: StageLabel) -> Self {
        match s {
            StageLabel::W => Self::W,
            StageLabel::N1 => Self::N1,
            StageLabel::N2 => Self::N2,
            StageLabel::N3 => Self::N3,
            StageLabel::Rem => Self::Rem,
        }
    }
}

/// Maps R&K labels onto the five-class scheme. N4 merges into N3; movement
/// and unknown epochs are dropped and reported as `false` in the mask.
pub fn map_stage_labels(raw: &[RawLabel]) -> (Vec<StageLabel>, Vec<bool>) {
    let mut labels = Vec::with_capacity(raw.len());
    let mut kept = Vec::with_capacity(raw.len());
    for r in raw {
        let mapped = match r {
            RawLabel::W => Some(StageLabel::W),
            RawLabel::N1 => Some(StageLabel::N1),
            RawLabel::N2 => Some(StageLabel::N2),
            RawLabel::N3 | RawLabel::N4 => Some(StageLabel::N3),
            RawLabel::Rem => Some(StageLabel::Rem),
            RawLabel::Movement | RawLabel::Unknown => None,
        };
        kept.push(mapped.is_some());
        labels.extend(mapped);
    }
    (labels, kept)
}

/// One continuous single-channel recording with per-epoch labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Recording {
    pub subject_id: String,
    pub channel: String,
    pub sample_rate: u32,
    pub samples: Vec<f32>,
    pub epoch_labels: Vec<StageLabel>,
    pub lights_off: usize,
    pub lights_on: usize,
}

impl Recording {
    /// A recording whose lights span covers every sample.
    pub fn new(
        subject_id: impl Into<String>,
        channel: impl Into<String>,
        sample_rate: u32,
        samples: Vec<f32>,
        epoch_labels: Vec<StageLabel>,
    ) -> Result<Self, DataError> {
        let rec = Self {
            subject_id: subject_id.into(),
            channel: channel.into(),
            sample_rate,
            lights_off: 0,
            lights_on: samples.len(),
            samples,
            epoch_labels,
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn samples_per_epoch(&self) -> usize {
        EPOCH_SECONDS * self.sample_rate as usize
    }

    pub fn n_epochs(&self) -> usize {
        self.epoch_labels.len()
    }

    pub fn epoch(&self, i: usize) -> &[f32] {
        let n = self.samples_per_epoch();
        &self.samples[i * n..(i + 1) * n]
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.sample_rate == 0 {
            return Err(DataError::UnsupportedRate { rate: 0 });
        }
        let expected = self.samples_per_epoch() * self.epoch_labels.len();
        if self.samples.len() != expected {
            return Err(DataError::SampleCountMismatch {
                expected,
                found: self.samples.len(),
            });
        }
        if self.lights_on > self.samples.len() || self.lights_off > self.lights_on {
            return Err(DataError::InvalidRecording(format!(
                "lights span {}..{} outside 0..{}",
                self.lights_off,
                self.lights_on,
                self.samples.len()
            )));
        }
        if self.lights_off == self.lights_on && !self.samples.is_empty() {
            return Err(DataError::InvalidRecording("empty lights span".into()));
        }
        Ok(())
    }

    /// Keeps the epochs whose mask entry is `true`.
    pub fn retain_epochs(&self, keep: &[bool]) -> Result<Recording, DataError> {
        if keep.len() != self.n_epochs() {
            return Err(DataError::InvalidRecording(format!(
                "mask of {} for {} epochs",
                keep.len(),
                self.n_epochs()
            )));
        }
        let mut samples = Vec::new();
        let mut labels = Vec::new();
        for (i, _) in keep.iter().enumerate().filter(|(_, k)| **k) {
            samples.extend_from_slice(self.epoch(i));
            labels.push(self.epoch_labels[i]);
        }
        Recording::new(
            self.subject_id.clone(),
            self.channel.clone(),
            self.sample_rate,
            samples,
            labels,
        )
    }
}

/// Restricts a recording to its `[lights_off, lights_on)` span.
pub fn trim_in_bed(rec: &Recording) -> Result<Recording, DataError> {
    let n = rec.samples_per_epoch();
    if rec.lights_off % n != 0 {
        return Err(DataError::MisalignedLightsIndex {
            field: "lights_off",
            index: rec.lights_off,
        });
    }
    if rec.lights_on % n != 0 {
        return Err(DataError::MisalignedLightsIndex {
            field: "lights_on",
            index: rec.lights_on,
        });
    }
    rec.validate()?;
    let (first, last) = (rec.lights_off / n, rec.lights_on / n);
    let samples = rec.samples[rec.lights_off..rec.lights_on].to_vec();
    Ok(Recording {
        subject_id: rec.subject_id.clone(),
        channel: rec.channel.clone(),
        sample_rate: rec.sample_rate,
        lights_off: 0,
        lights_on: samples.len(),
        samples,
        epoch_labels: rec.epoch_labels[first..last].to_vec(),
    })
}

/// Turns 20 s scored epochs of a 100 Hz signal into 30 s epochs by adding
/// 5 s of context on both sides. Epochs without full context are dropped;
/// the second return value counts them.
pub fn expand_epochs_20_to_30(
    subject_id: &str,
    channel: &str,
    samples: &[f32],
    labels_20s: &[StageLabel],
) -> Result<(Recording, usize), DataError> {
    const SRC_EPOCH: usize = 20 * TARGET_RATE as usize;
    const CONTEXT: usize = 5 * TARGET_RATE as usize;
    if samples.len() < labels_20s.len() * SRC_EPOCH {
        return Err(DataError::SampleCountMismatch {
            expected: labels_20s.len() * SRC_EPOCH,
            found: samples.len(),
        });
    }
    let mut out = Vec::new();
    let mut labels = Vec::new();
    let mut dropped = 0;
    for (k, &label) in labels_20s.iter().enumerate() {
        let start = k * SRC_EPOCH;
        if start < CONTEXT || start + SRC_EPOCH + CONTEXT > samples.len() {
            dropped += 1;
            continue;
        }
        out.extend_from_slice(&samples[start - CONTEXT..start + SRC_EPOCH + CONTEXT]);
        labels.push(label);
    }
    Ok((Recording::new(subject_id, channel, TARGET_RATE, out, labels)?, dropped))
}
