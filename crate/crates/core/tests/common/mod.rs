#![allow(dead_code)]

use rand::Rng;
use seqsleep::dataio::{generate_synthetic_cohort, DomainShift, SpectralProfile, StageLabel, SyntheticCohortConfig};
use seqsleep::network::{HyperParams, ModelParams};
use seqsleep::rng::substream;
use seqsleep::spectrogram::{prepare_all, EpochImage, PreparedRecording};

/// Smallest useful network on real 129 x 29 images.
pub fn small_hp() -> HyperParams {
    HyperParams {
        n_filters: 8,
        ernn_hidden: 8,
        attention_size: 8,
        seqrnn_hidden: 8,
        seq_len: 5,
        dropout: 0.1,
        l2: 1e-4,
        ..HyperParams::default()
    }
}

/// Network on 16 x 5 images for oracle comparisons.
pub fn tiny_hp() -> HyperParams {
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

pub fn cohort(n: usize, epochs: usize, seed: u64, profile: &str, shift: &str, prefix: &str) -> Vec<PreparedRecording> {
    let mut cfg = SyntheticCohortConfig::new(n, epochs, seed);
    cfg.profile = SpectralProfile::by_name(profile).unwrap();
    cfg.mismatch = DomainShift::parse(shift, cfg.profile.bands.len()).unwrap();
    cfg.subject_prefix = prefix.into();
    prepare_all(&generate_synthetic_cohort(&cfg).unwrap()).unwrap()
}

pub fn random_image(rng: &mut impl Rng, f: usize, t: usize) -> EpochImage {
    let v = (0..f * t).map(|_| rng.random_range(-3.0..2.0f32)).collect();
    EpochImage::new(f, t, v).unwrap()
}

/// Random images and labels with the tiny network's image shape.
pub fn random_recording(seed: u64, n: usize, hp: &HyperParams) -> PreparedRecording {
    let mut rng = substream(seed, "recording", 0);
    PreparedRecording {
        subject_id: format!("R{seed}"),
        images: (0..n).map(|_| random_image(&mut rng, hp.n_freq, 5)).collect(),
        labels: (0..n).map(|_| StageLabel::ALL[rng.random_range(0..5)]).collect(),
    }
}

/// Initialization with every value nudged off its structured start.
pub fn jittered<S: seqsleep::numerics::Real>(hp: &HyperParams, seed: u64) -> ModelParams<S> {
    let mut rng = substream(seed, "init", 0);
    let mut p = ModelParams::<S>::init(hp, &mut rng);
    for t in p.tensors_mut() {
        for v in t.data_mut() {
            *v = S::from_f64(v.to_f64() + rng.random_range(-0.2..0.2));
        }
    }
    p
}
