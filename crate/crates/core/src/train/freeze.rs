//! Layer-freezing schedules: static partial freezing and Gradual
//! Unfreezing.
//!
//! Layers are grouped by `depth_index` into `G = 2*levels - 1`
//! resolution groups. Gradual Unfreezing starts with only the
//! output-most group trainable, unfreezes one more group toward the
//! input every `ceil(interval_fraction * t_max)` epochs, and makes the
//! whole network trainable no later than
//! `floor(full_unfreeze_fraction * t_max)`. Normalization layers stay
//! trainable throughout.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::Network;
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezeMode {
    #[default]
    None,
    /// Permanently freeze this fraction of input-most groups.
    Static(f64),
    Gradual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreezePolicy {
    pub mode: FreezeMode,
    pub interval_fraction: f64,
    pub full_unfreeze_fraction: f64,
    pub norm_always_trainable: bool,
}

impl Default for FreezePolicy {
    fn default() -> Self {
        FreezePolicy {
            mode: FreezeMode::None,
            interval_fraction: 0.10,
            full_unfreeze_fraction: 0.75,
            norm_always_trainable: true,
        }
    }
}

impl FreezePolicy {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn gradual() -> Self {
        FreezePolicy { mode: FreezeMode::Gradual, ..Self::default() }
    }

    pub fn static_fraction(f: f64) -> Self {
        FreezePolicy { mode: FreezeMode::Static(f), ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if let FreezeMode::Static(f) = self.mode {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Config(format!("static frozen fraction {f} outside [0, 1]")));
            }
        }
        for (name, v) in [
            ("interval_fraction", self.interval_fraction),
            ("full_unfreeze_fraction", self.full_unfreeze_fraction),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::Config(format!("{name} {v} outside (0, 1]")));
            }
        }
        Ok(())
    }

    pub fn is_finetune_axis(&self) -> bool {
        !matches!(self.mode, FreezeMode::None)
    }
}

/// Maps epochs to the set of trainable layer names.
#[derive(Debug, Clone)]
pub struct FreezeSchedule {
    groups: Vec<Vec<String>>,
    norm_layers: Vec<String>,
    policy: FreezePolicy,
    t_max: usize,
}

/// Build the schedule for a network. Groups are ordered input-most
/// first, exactly the network's `depth_index` grouping.
pub fn freeze_plan<T: Scalar>(network: &Network<T>, policy: &FreezePolicy, t_max: usize) -> Result<FreezeSchedule> {
    policy.validate()?;
    if t_max == 0 {
        return Err(Error::Config("t_max must be >= 1".into()));
    }
    Ok(FreezeSchedule {
        groups: network.depth_groups(),
        norm_layers: network.norm_layer_names(),
        policy: policy.clone(),
        t_max,
    })
}

impl FreezeSchedule {
    /// Build directly from depth groups (state-machine form used by
    /// schedule tests; networks go through [`freeze_plan`]).
    pub fn from_groups(groups: Vec<Vec<String>>, norm_layers: Vec<String>, policy: FreezePolicy, t_max: usize) -> Result<Self> {
        policy.validate()?;
        if t_max == 0 {
            return Err(Error::Config("t_max must be >= 1".into()));
        }
        Ok(FreezeSchedule { groups, norm_layers, policy, t_max })
    }

    pub fn group_count(&self) -> usize {
        self.groups.len()
    }

    /// Epochs between unfreeze events: `ceil(interval_fraction * t_max)`.
    pub fn interval(&self) -> usize {
        ((self.policy.interval_fraction * self.t_max as f64).ceil() as usize).max(1)
    }

    /// First epoch at which everything is trainable regardless of the
    /// interval: `floor(full_unfreeze_fraction * t_max)`.
    pub fn full_unfreeze_epoch(&self) -> usize {
        (self.policy.full_unfreeze_fraction * self.t_max as f64).floor() as usize
    }

    /// Number of output-side groups unfrozen at `epoch` (gradual mode).
    pub fn unfrozen_groups_at(&self, epoch: usize) -> usize {
        let g = self.groups.len();
        match self.policy.mode {
            FreezeMode::None => g,
            FreezeMode::Static(f) => g - ((f * g as f64).ceil() as usize).min(g),
            FreezeMode::Gradual => {
                if epoch >= self.full_unfreeze_epoch() {
                    g
                } else {
                    (1 + epoch / self.interval()).min(g)
                }
            }
        }
    }

    /// Unfreeze event epochs for a gradual run (one per group, clamped
    /// by the full-unfreeze point); empty for other modes.
    pub fn unfreeze_epochs(&self) -> Vec<usize> {
        if !matches!(self.policy.mode, FreezeMode::Gradual) {
            return Vec::new();
        }
        let full = self.full_unfreeze_epoch();
        (0..self.groups.len()).map(|i| (i * self.interval()).min(full)).collect()
    }

    /// Trainable layer names at `epoch`. Output-side groups come first
    /// in unfreeze order; normalization layers are always included when
    /// the policy says so.
    pub fn trainable_at(&self, epoch: usize) -> HashSet<String> {
        let g = self.groups.len();
        let open = self.unfrozen_groups_at(epoch);
        let mut set: HashSet<String> = self.groups[g - open..].iter().flatten().cloned().collect();
        if self.policy.norm_always_trainable {
            set.extend(self.norm_layers.iter().cloned());
        }
        set
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn demo_groups(g: usize) -> Vec<Vec<String>> {
        (0..g).map(|i| vec![format!("g{i}.conv"), format!("g{i}.norm")]).collect()
    }

    fn demo_norms(g: usize) -> Vec<String> {
        (0..g).map(|i| format!("g{i}.norm")).collect()
    }

    #[test]
    fn gradual_unfreeze_events_for_t200() {
        let s = FreezeSchedule::from_groups(demo_groups(9), demo_norms(9), FreezePolicy::gradual(), 200).unwrap();
        assert_eq!(s.interval(), 20);
        assert_eq!(s.full_unfreeze_epoch(), 150);
        assert_eq!(s.unfreeze_epochs(), vec![0, 20, 40, 60, 80, 100, 120, 140, 150]);
        assert_eq!(s.unfrozen_groups_at(0), 1);
        assert_eq!(s.unfrozen_groups_at(19), 1);
        assert_eq!(s.unfrozen_groups_at(20), 2);
        assert_eq!(s.unfrozen_groups_at(150), 9);
        assert_eq!(s.unfrozen_groups_at(199), 9);
    }

    #[test]
    fn gradual_starts_with_output_group_plus_norms() {
        let s = FreezeSchedule::from_groups(demo_groups(3), demo_norms(3), FreezePolicy::gradual(), 100).unwrap();
        let t0 = s.trainable_at(0);
        assert!(t0.contains("g2.conv"));
        assert!(!t0.contains("g0.conv"));
        assert!(!t0.contains("g1.conv"));
        // every norm layer stays trainable at every epoch
        for e in 0..100 {
            let t = s.trainable_at(e);
            for i in 0..3 {
                assert!(t.contains(&format!("g{i}.norm")), "norm missing at epoch {e}");
            }
        }
    }

    #[test]
    fn gradual_is_monotone_and_completes_by_75_percent() {
        for t_max in [10usize, 100, 200] {
            for g in [3usize, 9, 12] {
                let s =
                    FreezeSchedule::from_groups(demo_groups(g), demo_norms(g), FreezePolicy::gradual(), t_max).unwrap();
                let mut prev = s.trainable_at(0);
                for e in 1..t_max {
                    let cur = s.trainable_at(e);
                    assert!(prev.is_subset(&cur), "shrank at epoch {e} (t_max={t_max}, g={g})");
                    prev = cur;
                }
                let full = s.full_unfreeze_epoch();
                assert_eq!(s.unfrozen_groups_at(full), g, "not complete at floor(0.75*{t_max})");
            }
        }
    }

    #[test]
    fn static_zero_equals_none() {
        let none = FreezeSchedule::from_groups(demo_groups(5), demo_norms(5), FreezePolicy::none(), 50).unwrap();
        let zero =
            FreezeSchedule::from_groups(demo_groups(5), demo_norms(5), FreezePolicy::static_fraction(0.0), 50).unwrap();
        for e in [0usize, 10, 49] {
            assert_eq!(none.trainable_at(e), zero.trainable_at(e));
        }
    }

    #[test]
    fn static_freezes_input_most_groups() {
        let s =
            FreezeSchedule::from_groups(demo_groups(4), demo_norms(4), FreezePolicy::static_fraction(0.5), 50).unwrap();
        // ceil(0.5 * 4) = 2 input-most groups frozen for the whole run
        for e in [0usize, 25, 49] {
            let t = s.trainable_at(e);
            assert!(!t.contains("g0.conv") && !t.contains("g1.conv"));
            assert!(t.contains("g2.conv") && t.contains("g3.conv"));
            assert!(t.contains("g0.norm"), "norms stay trainable even in frozen groups");
        }
    }
}
