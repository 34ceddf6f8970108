mod common;

use seqsleep::evaluation::evaluate_cohort;
use seqsleep::network::{sequence_loss, Dropout, HyperParams, ModelParams, SequenceRef, N_TENSORS};
use seqsleep::rng::substream;
use seqsleep::spectrogram::PreparedRecording;
use seqsleep::training::{adam_step, finetune, pretrain, AdamState, TrainConfig};
use seqsleep::transfer::{mask_for, run_regime, Regime};

use common::*;

struct Setup {
    hp: HyperParams,
    pre: ModelParams<f32>,
    train: Vec<PreparedRecording>,
    val: Vec<PreparedRecording>,
}

fn setup() -> Setup {
    let hp = small_hp();
    let source = cohort(3, 40, 50, "eeg_like", "none", "S");
    let cfg = TrainConfig { epochs: 1, lr: 1e-3, seed: 1, max_steps: 15, ..TrainConfig::default() };
    let pre = pretrain(&source, &hp, &cfg).unwrap().params;
    let mut target = cohort(3, 30, 51, "eeg_like", "heavy", "T");
    let val = vec![target.pop().unwrap()];
    Setup { hp, pre, train: target, val }
}

fn cfg(seed: u64) -> TrainConfig {
    TrainConfig { lr: 1e-3, seed, max_steps: 40, batch_size: 8, ..TrainConfig::default() }
}

#[test]
fn direct_transfer_is_the_pretrained_model() {
    let s = setup();
    let a = run_regime(Regime::DirectTransfer, &s.pre, &s.hp, &s.train, &s.val, &s.val, &cfg(1)).unwrap();
    let b = run_regime(Regime::DirectTransfer, &s.pre, &s.hp, &s.train, &s.val, &s.val, &cfg(99)).unwrap();
    assert_eq!(a.params, s.pre);
    assert_eq!(a.steps, 0);
    assert_eq!(a.report, b.report);
    assert_eq!(a.report, evaluate_cohort(&s.pre, &s.hp, &s.val).unwrap().0);
}

#[test]
fn early_stopping_and_zero_epochs() {
    let s = setup();
    let c = TrainConfig { early_stop_patience: 0, eval_every: 5, ..cfg(2) };
    let out = finetune(&s.pre, &s.hp, mask_for(Regime::EntireNetwork).trainable(), &s.train, &s.val, &c).unwrap();
    assert!(out.steps <= 5, "{} steps", out.steps);
    let none = TrainConfig { epochs: 0, ..cfg(2) };
    let out = finetune(&s.pre, &s.hp, mask_for(Regime::EntireNetwork).trainable(), &s.train, &s.val, &none).unwrap();
    assert_eq!(out.steps, 0);
    assert_eq!(out.params, s.pre);
}

#[test]
fn selected_model_is_never_worse_on_validation_than_the_start() {
    let s = setup();
    let out = finetune(&s.pre, &s.hp, mask_for(Regime::EntireNetwork).trainable(), &s.train, &s.val, &cfg(3)).unwrap();
    let (step0, init_acc) = out.evaluations[0];
    assert_eq!(step0, 0);
    assert!(out.best_val_acc.unwrap() >= init_acc);
    let (report, _) = evaluate_cohort(&out.params, &s.hp, &s.val).unwrap();
    assert_eq!(report.accuracy, out.best_val_acc.unwrap());
}

#[test]
fn frozen_everything_changes_nothing() {
    let s = setup();
    let frozen = [false; N_TENSORS];
    let out = finetune(&s.pre, &s.hp, &frozen, &s.train, &s.val, &cfg(4));
    match out {
        Ok(o) => assert_eq!(o.params, s.pre),
        Err(e) => assert!(e.to_string().contains("config"), "{e}"),
    }
}

#[test]
fn loss_falls_on_a_fixed_batch() {
    let hp = HyperParams { dropout: 0.0, ..small_hp() };
    let data = cohort(2, 20, 52, "eeg_like", "none", "S");
    let batch: Vec<SequenceRef> = (0..4)
        .map(|k| SequenceRef { images: &data[0].images[k * 5..k * 5 + 5], labels: &data[0].labels[k * 5..k * 5 + 5] })
        .collect();
    let mut params = ModelParams::<f32>::init(&hp, &mut substream(7, "init", 0));
    let mut state = AdamState::new(&params);
    let c = TrainConfig { lr: 3e-3, ..TrainConfig::default() };
    let all = [true; N_TENSORS];
    let mut losses = Vec::new();
    for _ in 0..6 {
        let out = sequence_loss(&params, &hp, &batch, &all, None, Dropout::off()).unwrap();
        losses.push(out.loss);
        adam_step(&mut params, &out.grads, &mut state, &c);
    }
    for w in losses.windows(2) {
        assert!(w[1] < w[0], "{losses:?}");
    }
}

#[test]
fn softmax_only_keeps_the_feature_extractor() {
    let s = setup();
    let r = run_regime(Regime::SoftmaxOnly, &s.pre, &s.hp, &s.train, &s.val, &s.val, &cfg(5)).unwrap();
    let mask = mask_for(Regime::SoftmaxOnly);
    for ((name, a), b) in s.pre.named().zip(r.params.tensors()) {
        if !mask.is_trainable(name) {
            assert_eq!(a, b, "{name}");
        }
    }
}
