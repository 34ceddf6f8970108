//! The five transfer regimes as freeze masks over the parameter tensors.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::evaluation::{evaluate_cohort, EvalReport, SlidingOutput};
use crate::network::{HyperParams, ModelParams, CANONICAL_NAMES, N_TENSORS};
use crate::rng::substream;
use crate::spectrogram::PreparedRecording;
use crate::training::{finetune, StepLog, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Regime {
    DirectTransfer,
    SoftmaxOnly,
    SoftmaxPlusArnn,
    SoftmaxPlusSeqRnn,
    EntireNetwork,
}

impl Regime {
    pub const ALL: [Regime; 5] = [
        Self::DirectTransfer,
        Self::SoftmaxOnly,
        Self::SoftmaxPlusArnn,
        Self::SoftmaxPlusSeqRnn,
        Self::EntireNetwork,
    ];

    pub fn cli_name(self) -> &'static str {
        match self {
            Self::DirectTransfer => "direct",
            Self::SoftmaxOnly => "softmax",
            Self::SoftmaxPlusArnn => "softmax-arnn",
            Self::SoftmaxPlusSeqRnn => "softmax-seqrnn",
            Self::EntireNetwork => "all",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.cli_name())
    }
}

impl FromStr for Regime {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|r| r.cli_name() == s)
            .ok_or_else(|| format!("unknown regime {s:?} (expected direct, softmax, softmax-arnn, softmax-seqrnn or all)"))
    }
}

/// Subnetwork a tensor belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Group {
    /// Filterbank, epoch-level bi-GRU with its projection, and attention.
    Arnn,
    /// Sequence-level bi-GRU with its projection.
    SeqRnn,
    Softmax,
}

pub fn group_of(name: &str) -> Option<Group> {
    if !CANONICAL_NAMES.contains(&name) {
        return None;
    }
    let head = name.split('.').next().unwrap_or_default();
    match head {
        "filterbank" | "ernn" | "att" => Some(Group::Arnn),
        "seqrnn" => Some(Group::SeqRnn),
        "softmax" => Some(Group::Softmax),
        _ => None,
    }
}

/// Which canonical tensors are updated during finetuning.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FreezeMask {
    trainable: [bool; N_TENSORS],
}

impl FreezeMask {
    pub fn from_groups(groups: &[Group]) -> Self {
        let mut trainable = [false; N_TENSORS];
        for (t, name) in trainable.iter_mut().zip(CANONICAL_NAMES) {
            *t = group_of(name).is_some_and(|g| groups.contains(&g));
        }
        Self { trainable }
    }

    pub fn trainable(&self) -> &[bool; N_TENSORS] {
        &self.trainable
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        CANONICAL_NAMES
            .iter()
            .position(|n| *n == name)
            .is_some_and(|i| self.trainable[i])
    }

    pub fn trainable_names(&self) -> Vec<&'static str> {
        CANONICAL_NAMES
            .iter()
            .zip(self.trainable)
            .filter(|(_, t)| *t)
            .map(|(n, _)| *n)
            .collect()
    }
}

pub fn mask_for(regime: Regime) -> FreezeMask {
    use Group::*;
    FreezeMask::from_groups(match regime {
        Regime::DirectTransfer => &[],
        Regime::SoftmaxOnly => &[Softmax],
        Regime::SoftmaxPlusArnn => &[Softmax, Arnn],
        Regime::SoftmaxPlusSeqRnn => &[Softmax, SeqRnn],
        Regime::EntireNetwork => &[Softmax, Arnn, SeqRnn],
    })
}

#[derive(Clone, Debug)]
pub struct RegimeResult {
    pub params: ModelParams<f32>,
    pub report: EvalReport,
    pub outputs: Vec<SlidingOutput>,
    pub steps: usize,
    pub log: Vec<StepLog>,
    pub best_val_acc: Option<f64>,
}

fn finish(
    params: ModelParams<f32>,
    hp: &HyperParams,
    test: &[PreparedRecording],
    steps: usize,
    log: Vec<StepLog>,
    best_val_acc: Option<f64>,
) -> Result<RegimeResult, crate::Error> {
    let (report, outputs) = evaluate_cohort(&params, hp, test)?;
    Ok(RegimeResult {
        params,
        report,
        outputs,
        steps,
        log,
        best_val_acc,
    })
}

/// Adapts `pretrained` to the target cohort under `regime` and scores it on
/// `test`. Direct transfer skips training entirely.
pub fn run_regime(
    regime: Regime,
    pretrained: &ModelParams<f32>,
    hp: &HyperParams,
    train: &[PreparedRecording],
    validation: &[PreparedRecording],
    test: &[PreparedRecording],
    cfg: &TrainConfig,
) -> Result<RegimeResult, crate::Error> {
    if regime == Regime::DirectTransfer {
        return finish(pretrained.clone(), hp, test, 0, Vec::new(), None);
    }
    let out = finetune(pretrained, hp, mask_for(regime).trainable(), train, validation, cfg)?;
    finish(out.params, hp, test, out.steps, out.log, out.best_val_acc)
}

/// Baseline without a source domain: a fresh initialization trained on the
/// target cohort with every tensor trainable and the same early stopping.
pub fn train_from_scratch(
    hp: &HyperParams,
    train: &[PreparedRecording],
    validation: &[PreparedRecording],
    test: &[PreparedRecording],
    cfg: &TrainConfig,
) -> Result<RegimeResult, crate::Error> {
    let init = ModelParams::init(hp, &mut substream(cfg.seed, "init", 0));
    let out = finetune(&init, hp, mask_for(Regime::EntireNetwork).trainable(), train, validation, cfg)?;
    finish(out.params, hp, test, out.steps, out.log, out.best_val_acc)
}
