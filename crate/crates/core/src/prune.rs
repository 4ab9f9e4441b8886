//! Unstructured magnitude pruning, the adaptive per-round ratio controller,
//! and the Cross-Round Recovery two-stage gate.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::params::{pruning_ratio, ParamVector, PruneMask};

/// Clears the smallest-magnitude unmasked prunable coordinates until the
/// global prunable ratio reaches `ceil(target * prunable_total)` cleared
/// coordinates. Existing cleared bits are preserved; ties break toward the
/// lower (layer index, coordinate index).
pub fn magnitude_prune(p: &ParamVector, m: &PruneMask, target: f64) -> Result<PruneMask> {
    m.check_structure_params(p)?;
    let total = m.prunable_total();
    if total == 0 {
        return Err(Error::DegenerateModel);
    }
    let current = pruning_ratio(m)?;
    if target < current {
        return Err(Error::InvalidTarget { target, current });
    }
    if target > 1.0 {
        return Err(Error::InvalidParameter(format!(
            "pruning target {target} exceeds 1"
        )));
    }
    let want_cleared = (target * total as f64).ceil() as usize;
    let already = m.cleared_count();
    let mut out = m.clone();
    if want_cleared <= already {
        return Ok(out);
    }

    let mut candidates: Vec<(f32, usize, usize)> = Vec::new();
    for (li, (layer, mask)) in p.layers.iter().zip(&m.layers).enumerate() {
        if !layer.prunable {
            continue;
        }
        for (ci, (&v, &bit)) in layer.values.iter().zip(&mask.bits).enumerate() {
            if bit {
                candidates.push((v.abs(), li, ci));
            }
        }
    }
    candidates.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .expect("finite magnitudes")
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    for &(_, li, ci) in candidates.iter().take(want_cleared - already) {
        out.layers[li].bits[ci] = false;
    }
    Ok(out)
}

/// Schedule state of the adaptive pruning controller.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneControllerState {
    /// Final pruning level at which the schedule halts.
    pub target_ratio: f64,
    /// Upper bound on the per-event ratio increment.
    pub per_event_cap: f64,
    pub current_increment: f64,
    pub eval_epochs_used: u32,
    pub eval_epochs_max: u32,
    pub consecutive_rejects: u32,
}

impl PruneControllerState {
    pub fn new(target_ratio: f64, per_event_cap: f64, eval_epochs_max: u32) -> Self {
        PruneControllerState {
            target_ratio,
            per_event_cap,
            current_increment: per_event_cap,
            eval_epochs_used: 0,
            eval_epochs_max,
            consecutive_rejects: 0,
        }
    }
}

/// Accuracy-history state of the CRR gate.
#[derive(Debug, Clone, PartialEq)]
pub struct CrrState {
    pub acc_threshold: f64,
    /// Stage-1 plateau bound on round-over-round improvement.
    pub delta_rd: f64,
    /// Stage-2 bound on the pre/post-prune accuracy drop.
    pub delta_ep: f64,
    /// History window length; stage-1 needs a full window before it can
    /// declare a plateau.
    pub window: usize,
    pub recent_accs: VecDeque<f64>,
    pub pre_prune_acc: Option<f64>,
    pub pruning_halted: bool,
}

impl CrrState {
    pub fn new(acc_threshold: f64, delta_rd: f64, delta_ep: f64, window: usize) -> Self {
        CrrState {
            acc_threshold,
            delta_rd,
            delta_ep,
            window: window.max(2),
            recent_accs: VecDeque::new(),
            pre_prune_acc: None,
            pruning_halted: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage1Decision {
    ProceedToPrune,
    Skip,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage2Decision {
    Commit,
    Rollback,
}

/// Stage 1: proceed only when the accuracy clears the threshold and the
/// improvements across a full history window have plateaued below delta_rd.
/// The history is appended either way.
pub fn crr_stage1(state: &mut CrrState, train_acc: f64) -> Stage1Decision {
    state.recent_accs.push_back(train_acc);
    while state.recent_accs.len() > state.window {
        state.recent_accs.pop_front();
    }
    let full = state.recent_accs.len() == state.window;
    let max_improvement = state
        .recent_accs
        .iter()
        .zip(state.recent_accs.iter().skip(1))
        .map(|(a, b)| b - a)
        .fold(f64::NEG_INFINITY, f64::max);
    if train_acc > state.acc_threshold && full && max_improvement < state.delta_rd {
        state.pre_prune_acc = Some(train_acc);
        Stage1Decision::ProceedToPrune
    } else {
        Stage1Decision::Skip
    }
}

/// Stage 2: commit unless the accuracy dropped by delta_ep or more from the
/// stage-1 value. Errors if stage 1 never recorded a pre-prune accuracy.
pub fn crr_stage2(state: &mut CrrState, post_prune_acc: f64) -> Result<Stage2Decision> {
    let pre = state.pre_prune_acc.take().ok_or(Error::ProtocolOrder)?;
    if pre - post_prune_acc < state.delta_ep {
        Ok(Stage2Decision::Commit)
    } else {
        Ok(Stage2Decision::Rollback)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PruneDirective {
    Halt,
    Target(f64),
}

/// Books the outcome of a pruning attempt (each stage-2 evaluation consumes
/// one evaluation epoch; two consecutive rollbacks halve the increment) and
/// returns the next pruning target, or `Halt` once the target ratio is
/// reached or the evaluation budget is spent.
pub fn controller_step(
    state: &mut PruneControllerState,
    current_ratio: f64,
    last_decision: Option<Stage2Decision>,
) -> PruneDirective {
    if let Some(decision) = last_decision {
        state.eval_epochs_used += 1;
        match decision {
            Stage2Decision::Commit => state.consecutive_rejects = 0,
            Stage2Decision::Rollback => {
                state.consecutive_rejects += 1;
                if state.consecutive_rejects >= 2 {
                    state.current_increment = (state.current_increment / 2.0).max(0.01);
                    state.consecutive_rejects = 0;
                }
            }
        }
    }
    if current_ratio >= state.target_ratio || state.eval_epochs_used >= state.eval_epochs_max {
        PruneDirective::Halt
    } else {
        PruneDirective::Target(
            state
                .target_ratio
                .min(current_ratio + state.current_increment),
        )
    }
}

/// What the gate tells the client to do this round.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GateAction {
    /// Pruning is permanently done for this client.
    Halted,
    /// Stage-1 conditions not met; no pruning this round.
    Skip,
    Prune {
        target: f64,
    },
}

/// Round-level driver combining the CRR gate with the ratio controller.
/// Decisions are a pure function of (state, accuracy), so a scripted
/// accuracy trace replays bit-for-bit.
#[derive(Debug, Clone)]
pub struct PruneGate {
    pub crr: CrrState,
    pub controller: PruneControllerState,
    next_target: f64,
}

impl PruneGate {
    pub fn new(crr: CrrState, controller: PruneControllerState) -> Self {
        let mut gate = PruneGate {
            crr,
            controller,
            next_target: 0.0,
        };
        match controller_step(&mut gate.controller, 0.0, None) {
            PruneDirective::Halt => gate.crr.pruning_halted = true,
            PruneDirective::Target(t) => gate.next_target = t,
        }
        gate
    }

    /// Runs stage 1 against this round's held-out accuracy.
    pub fn begin_round(&mut self, held_out_acc: f64) -> GateAction {
        if self.crr.pruning_halted {
            return GateAction::Halted;
        }
        match crr_stage1(&mut self.crr, held_out_acc) {
            Stage1Decision::Skip => GateAction::Skip,
            Stage1Decision::ProceedToPrune => GateAction::Prune {
                target: self.next_target,
            },
        }
    }

    /// Runs stage 2 against the post-prune accuracy.
    pub fn stage2(&mut self, post_prune_acc: f64) -> Result<Stage2Decision> {
        crr_stage2(&mut self.crr, post_prune_acc)
    }

    /// Books the applied decision with the ratio that now holds (the new
    /// ratio on commit, the restored one on rollback).
    pub fn record_outcome(&mut self, decision: Stage2Decision, current_ratio: f64) {
        match controller_step(&mut self.controller, current_ratio, Some(decision)) {
            PruneDirective::Halt => self.crr.pruning_halted = true,
            PruneDirective::Target(t) => self.next_target = t,
        }
    }
}
