//! Dropout mask policies.
//!
//! A [`MaskPolicy`] is the serializable description of how a dropout slot
//! chooses which units to drop. [`SlotPolicy`] is its per-training-run
//! instance (one-shot and blind attacks carry state), and [`PolicyDriver`]
//! wires the slot policies into the network's forward pass, deriving a fresh
//! random stream per `(epoch, batch, slot)` and keeping an audit trail.

mod audit;
mod mask;
mod policies;

use serde::{Deserialize, Serialize};

pub use audit::{AuditLog, AuditRecord, AuditSummary, FiredEvent};
pub use mask::{apply_mask, unit_budget, DropMask};
pub use policies::{
    blind_candidate_rows, honest_mask, min_activation_mask, neuron_separation_mask,
    one_shot_separation, routed_separation, sample_dropping_mask, MaskOutcome, SeparationLayout,
    SeparationMode,
};

use crate::error::{Error, Result};
use crate::nn::DropoutDriver;
use crate::rng::RngStream;
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OneShot {
    /// 1-based epoch in which the routing happens.
    pub epoch: usize,
    #[serde(default = "default_sample_count")]
    pub sample_count: usize,
}

fn default_sample_count() -> usize {
    10
}

fn default_r0() -> f64 {
    1.0
}

fn default_threshold() -> usize {
    10
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MaskPolicy {
    #[default]
    Honest,
    MinActivation,
    SampleDropping {
        targets: Vec<usize>,
        #[serde(default = "default_r0")]
        r0: f64,
    },
    NeuronSeparation {
        target: usize,
        p_neuron: f64,
        p_sample: f64,
        mode: SeparationMode,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        one_shot: Option<OneShot>,
    },
    BlindSeparation {
        p_neuron: f64,
        trigger_epoch: usize,
        #[serde(default = "default_threshold")]
        threshold: usize,
        /// Number of Ward clusters; the class count is the usual choice.
        clusters: usize,
    },
}

impl MaskPolicy {
    pub fn name(&self) -> &'static str {
        match self {
            MaskPolicy::Honest => "honest",
            MaskPolicy::MinActivation => "min_activation",
            MaskPolicy::SampleDropping { .. } => "sample_dropping",
            MaskPolicy::NeuronSeparation { .. } => "neuron_separation",
            MaskPolicy::BlindSeparation { .. } => "blind_separation",
        }
    }

    pub fn is_attack(&self) -> bool {
        !matches!(self, MaskPolicy::Honest)
    }

    /// Checks the parameters that do not depend on the layer width.
    pub fn validate(&self) -> Result<()> {
        match self {
            MaskPolicy::Honest | MaskPolicy::MinActivation => Ok(()),
            MaskPolicy::SampleDropping { r0, .. } => {
                if (0.0..=1.0).contains(r0) {
                    Ok(())
                } else {
                    Err(Error::config("r0", format!("{r0} outside [0, 1]")))
                }
            }
            MaskPolicy::NeuronSeparation {
                p_neuron,
                p_sample,
                one_shot,
                ..
            } => {
                if !(0.0..=1.0).contains(p_sample) {
                    return Err(Error::config("p_sample", format!("{p_sample} outside [0, 1]")));
                }
                if !(*p_neuron > 0.0 && *p_neuron < 1.0) {
                    return Err(Error::config("p_neuron", format!("{p_neuron} outside (0, 1)")));
                }
                if let Some(shot) = one_shot {
                    if shot.epoch == 0 {
                        return Err(Error::config("one_shot.epoch", "epochs are numbered from 1"));
                    }
                }
                Ok(())
            }
            MaskPolicy::BlindSeparation {
                p_neuron,
                trigger_epoch,
                clusters,
                ..
            } => {
                if !(*p_neuron > 0.0 && *p_neuron < 1.0) {
                    return Err(Error::config("p_neuron", format!("{p_neuron} outside (0, 1)")));
                }
                if *trigger_epoch == 0 {
                    return Err(Error::config("trigger_epoch", "epochs are numbered from 1"));
                }
                if *clusters == 0 {
                    return Err(Error::config("clusters", "need at least one cluster"));
                }
                Ok(())
            }
        }
    }
}

/// Where the routing for the one-shot or blind policies stands.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BlindState {
    pub fired: bool,
    pub trigger_epoch: usize,
    pub threshold: usize,
    /// Batch rows that were shown to the separated neurons when it fired.
    pub routed_rows: Vec<usize>,
}

/// Per-run instance of a [`MaskPolicy`].
#[derive(Clone, Debug)]
pub struct SlotPolicy {
    policy: MaskPolicy,
    state: BlindState,
}

/// What a policy may look at for one invocation.
#[derive(Clone, Copy, Debug)]
pub struct MaskContext<'a> {
    pub labels: &'a [usize],
    /// 1-based.
    pub epoch: usize,
    pub batch: usize,
    pub slot: usize,
}

impl SlotPolicy {
    pub fn new(policy: MaskPolicy) -> Result<Self> {
        policy.validate()?;
        let state = match &policy {
            MaskPolicy::NeuronSeparation {
                one_shot: Some(shot),
                ..
            } => BlindState {
                trigger_epoch: shot.epoch,
                threshold: shot.sample_count,
                ..BlindState::default()
            },
            MaskPolicy::BlindSeparation {
                trigger_epoch,
                threshold,
                ..
            } => BlindState {
                trigger_epoch: *trigger_epoch,
                threshold: *threshold,
                ..BlindState::default()
            },
            _ => BlindState::default(),
        };
        Ok(Self { policy, state })
    }

    pub fn policy(&self) -> &MaskPolicy {
        &self.policy
    }

    pub fn state(&self) -> &BlindState {
        &self.state
    }

    /// `Some(fired)` for policies that route once per run.
    pub fn one_time_status(&self) -> Option<bool> {
        match &self.policy {
            MaskPolicy::NeuronSeparation { one_shot: Some(_), .. }
            | MaskPolicy::BlindSeparation { .. } => Some(self.state.fired),
            _ => None,
        }
    }

    pub fn mask(
        &mut self,
        input: &Matrix,
        rate: f64,
        ctx: &MaskContext<'_>,
        rng: &mut RngStream,
    ) -> Result<MaskOutcome> {
        let (rows, cols) = input.shape();
        match &self.policy {
            MaskPolicy::Honest => honest_mask(rate, rows, cols, rng),
            MaskPolicy::MinActivation => min_activation_mask(rate, input),
            MaskPolicy::SampleDropping { targets, r0 } => {
                sample_dropping_mask(rate, input, ctx.labels, targets, *r0, rng)
            }
            MaskPolicy::NeuronSeparation {
                target,
                p_neuron,
                p_sample,
                mode,
                one_shot,
            } => {
                let layout = SeparationLayout::new(cols, *p_neuron)?;
                match one_shot {
                    None => neuron_separation_mask(
                        rate, input, ctx.labels, *target, layout, *p_sample, *mode, rng,
                    ),
                    Some(shot) => {
                        let qualifying = ctx
                            .labels
                            .iter()
                            .filter(|&&l| match mode {
                                SeparationMode::Precision => l == *target,
                                SeparationMode::Recall => l != *target,
                            })
                            .count();
                        let fire = !self.state.fired
                            && ctx.epoch == shot.epoch
                            && qualifying >= shot.sample_count;
                        let count = if fire { shot.sample_count } else { 0 };
                        let outcome = one_shot_separation(
                            rate, input, ctx.labels, *target, layout, *mode, count, rng,
                        )?;
                        if fire {
                            self.state.fired = true;
                            self.state.routed_rows = outcome.routed_rows.clone();
                        }
                        Ok(outcome)
                    }
                }
            }
            MaskPolicy::BlindSeparation {
                p_neuron,
                clusters,
                threshold,
                ..
            } => {
                let layout = SeparationLayout::new(cols, *p_neuron)?;
                let mut chosen = None;
                if !self.state.fired && ctx.epoch == self.state.trigger_epoch {
                    chosen = blind_candidate_rows(input, *clusters, *threshold)?;
                }
                let rows = chosen.as_deref().unwrap_or(&[]);
                let outcome = routed_separation(rate, input, layout, rows, rng)?;
                if chosen.is_some() {
                    self.state.fired = true;
                    self.state.routed_rows = outcome.routed_rows.clone();
                }
                Ok(outcome)
            }
        }
    }
}

/// Supplies masks to [`Network::forward`](crate::nn::Network::forward) during
/// training. Call [`begin_batch`](Self::begin_batch) before each forward pass.
#[derive(Debug)]
pub struct PolicyDriver {
    slots: Vec<SlotPolicy>,
    base_seed: u64,
    labels: Vec<usize>,
    epoch: usize,
    batch: usize,
    audit: AuditLog,
}

impl PolicyDriver {
    /// `base` seeds the per-invocation child streams; one policy per dropout slot.
    pub fn new(slots: Vec<SlotPolicy>, base: &RngStream, dump_masks: bool) -> Self {
        Self {
            slots,
            base_seed: base.seed(),
            labels: Vec::new(),
            epoch: 0,
            batch: 0,
            audit: AuditLog::new(dump_masks),
        }
    }

    pub fn begin_batch(&mut self, epoch: usize, batch: usize, labels: &[usize]) {
        self.epoch = epoch;
        self.batch = batch;
        self.labels.clear();
        self.labels.extend_from_slice(labels);
    }

    pub fn slots(&self) -> &[SlotPolicy] {
        &self.slots
    }

    pub fn audit(&self) -> &AuditLog {
        &self.audit
    }

    pub fn into_audit(self) -> AuditLog {
        self.audit
    }

    pub fn stream_for(&self, epoch: usize, batch: usize, slot: usize) -> RngStream {
        RngStream::new(self.base_seed).child(&format!("dropout/{epoch}/{batch}/{slot}"))
    }
}

impl DropoutDriver for PolicyDriver {
    fn mask(&mut self, slot: usize, rate: f64, input: &Matrix) -> Result<DropMask> {
        let mut rng = self.stream_for(self.epoch, self.batch, slot);
        let policy = self.slots.get_mut(slot).ok_or_else(|| {
            Error::Contract(format!("no mask policy configured for dropout slot {slot}"))
        })?;
        let ctx = MaskContext {
            labels: &self.labels,
            epoch: self.epoch,
            batch: self.batch,
            slot,
        };
        let was_fired = policy.state().fired;
        let outcome = policy.mask(input, rate, &ctx, &mut rng)?;
        if !was_fired && policy.state().fired {
            let rows = policy.state().routed_rows.clone();
            let labels = rows.iter().map(|&r| self.labels[r]).collect();
            self.audit.fired.push(FiredEvent {
                epoch: self.epoch,
                batch: self.batch,
                slot,
                rows,
                labels,
            });
        }
        self.audit.record(self.epoch, self.batch, slot, &outcome);
        Ok(outcome.mask)
    }
}

#[cfg(test)]
mod tests;
