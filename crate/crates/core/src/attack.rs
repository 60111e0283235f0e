//! DoS fault injection.
//!
//! A malicious node floods one target with useless requests and paralyzes it.
//! Paralysis is binary: the target sends nothing (no latent statistics, no
//! ledgers, no heartbeats) until the attack expires. Each attacker works
//! independently, so several may hit the same target.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::node::NodeId;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetPolicy {
    /// Uniform over every device and server.
    #[default]
    UniformAny,
    /// Always the node currently holding leadership.
    LeaderFocused,
    DevicesOnly,
    ServersOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub num_malicious: usize,
    pub target_policy: TargetPolicy,
    /// Epochs a target stays paralyzed.
    pub paralysis_duration: u64,
    /// Pick a fresh target whenever an attack expires; otherwise keep hitting
    /// the first target chosen.
    pub reselect_each_epoch: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            num_malicious: 0,
            target_policy: TargetPolicy::UniformAny,
            paralysis_duration: 1,
            reselect_each_epoch: true,
        }
    }
}

impl AttackConfig {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn validate(&self, total_nodes: usize) -> Result<()> {
        if self.num_malicious > total_nodes {
            return Err(Error::config(format!(
                "{} malicious nodes exceeds the {total_nodes} simulated nodes",
                self.num_malicious
            )));
        }
        if self.paralysis_duration == 0 {
            return Err(Error::config(
                "paralysis duration must be at least one epoch",
            ));
        }
        Ok(())
    }
}

/// Nodes an attacker can see at an epoch boundary.
#[derive(Debug, Clone)]
pub struct Roster {
    pub devices: Vec<NodeId>,
    pub servers: Vec<NodeId>,
    pub leader: Option<NodeId>,
}

impl Roster {
    pub fn bvib(pairs: usize, leader: Option<usize>) -> Self {
        Self {
            devices: (0..pairs).map(NodeId::Device).collect(),
            servers: (0..pairs).map(NodeId::Server).collect(),
            leader: leader.map(NodeId::Server),
        }
    }

    /// The monolithic host is both the only node and the de facto leader.
    pub fn single_host() -> Self {
        Self {
            devices: vec![NodeId::Host],
            servers: Vec::new(),
            leader: Some(NodeId::Host),
        }
    }

    pub fn all(&self) -> Vec<NodeId> {
        self.devices.iter().chain(&self.servers).copied().collect()
    }

    pub fn len(&self) -> usize {
        self.devices.len() + self.servers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Draws one target under `policy`; `None` when the policy has no candidate.
pub fn pick_target<R: Rng + ?Sized>(
    policy: TargetPolicy,
    roster: &Roster,
    rng: &mut R,
) -> Option<NodeId> {
    let uniform = |pool: &[NodeId], rng: &mut R| {
        (!pool.is_empty()).then(|| pool[rng.random_range(0..pool.len())])
    };
    match policy {
        TargetPolicy::UniformAny => uniform(&roster.all(), rng),
        TargetPolicy::LeaderFocused => roster.leader,
        TargetPolicy::DevicesOnly => uniform(&roster.devices, rng),
        TargetPolicy::ServersOnly => uniform(&roster.servers, rng),
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct AttackerSlot {
    target: Option<NodeId>,
    /// First epoch at which the current attack no longer applies.
    expires: u64,
}

/// Attack state carried across epochs.
#[derive(Debug, Clone)]
pub struct Attacker {
    config: AttackConfig,
    slots: Vec<AttackerSlot>,
}

impl Attacker {
    pub fn new(config: AttackConfig) -> Self {
        Self {
            config,
            slots: vec![AttackerSlot::default(); config.num_malicious],
        }
    }

    pub fn config(&self) -> &AttackConfig {
        &self.config
    }

    /// Advances to `epoch` and returns the set of paralyzed nodes for it.
    ///
    /// Attacks whose duration has elapsed lapse first, so expired targets
    /// recover unless an attacker picks them again. Attackers draw from `rng`
    /// in index order.
    pub fn inject<R: Rng + ?Sized>(
        &mut self,
        epoch: u64,
        rng: &mut R,
        roster: &Roster,
    ) -> BTreeSet<NodeId> {
        let mut paralyzed = BTreeSet::new();
        for slot in &mut self.slots {
            if slot.target.is_none() || epoch >= slot.expires {
                let target = match (slot.target, self.config.reselect_each_epoch) {
                    (Some(t), false) => Some(t),
                    _ => pick_target(self.config.target_policy, roster, rng),
                };
                *slot = AttackerSlot {
                    target,
                    expires: epoch + self.config.paralysis_duration,
                };
            }
            if let Some(t) = slot.target {
                paralyzed.insert(t);
            }
        }
        paralyzed
    }
}
