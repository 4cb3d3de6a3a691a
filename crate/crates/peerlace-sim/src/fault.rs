//! Scenario-level fault and adversary configuration.
//!
//! Faults are *scheduled*, not random: a scenario says exactly which peer
//! crashes or joins at which epoch, so recovery timelines are reproducible
//! and assertable. Attacks describe how a malicious peer corrupts the
//! gradient it publishes each epoch.

use serde::{Deserialize, Serialize};

/// When within its final epoch a crashing peer goes down.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrashTiming {
    /// Down before doing anything that epoch: the survivors' heartbeat
    /// already fails during the same epoch.
    EpochStart,
    /// Down right after answering the heartbeat: survivors only notice at
    /// the sync barrier (a timeout) and confirm by heartbeat next epoch.
    #[default]
    PostHeartbeat,
}

/// One scheduled membership event.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FaultEvent {
    /// Peer `rank` crashes during epoch `at_epoch` and never returns.
    CrashPeer {
        rank: usize,
        at_epoch: u64,
        #[serde(default)]
        timing: CrashTiming,
    },
    /// A brand-new peer with `rank` announces itself at the start of epoch
    /// `at_epoch`, bringing `rows` training rows of its own.
    JoinPeer {
        rank: usize,
        at_epoch: u64,
        rows: usize,
    },
}

impl FaultEvent {
    pub fn at_epoch(&self) -> u64 {
        match self {
            FaultEvent::CrashPeer { at_epoch, .. } | FaultEvent::JoinPeer { at_epoch, .. } => {
                *at_epoch
            }
        }
    }
}

/// How malicious peers corrupt the gradient they publish. Honest peers are
/// untouched; a malicious peer still trains normally and corrupts only what
/// it shares.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AttackSpec {
    /// Everyone is honest.
    #[default]
    None,
    /// Publishes `−epsilon ·` the honest gradient: a scaled sign flip that
    /// actively pushes the model away from the minimum.
    SignFlip {
        #[serde(default = "default_epsilon")]
        epsilon: f64,
        malicious_ranks: Vec<usize>,
    },
    /// Adds i.i.d. Gaussian noise with deviation `sigma` to every
    /// coordinate of the honest gradient.
    GaussianNoise {
        #[serde(default = "default_sigma")]
        sigma: f64,
        malicious_ranks: Vec<usize>,
    },
}

fn default_epsilon() -> f64 {
    10.0
}

fn default_sigma() -> f64 {
    1.0
}

impl AttackSpec {
    pub fn malicious_ranks(&self) -> &[usize] {
        match self {
            AttackSpec::None => &[],
            AttackSpec::SignFlip {
                malicious_ranks, ..
            }
            | AttackSpec::GaussianNoise {
                malicious_ranks, ..
            } => malicious_ranks,
        }
    }

    pub fn is_malicious(&self, rank: usize) -> bool {
        self.malicious_ranks().contains(&rank)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crash_timing_defaults_to_post_heartbeat() {
        let e: FaultEvent =
            serde_json::from_str(r#"{"kind":"crash_peer","rank":2,"at_epoch":5}"#).unwrap();
        assert_eq!(
            e,
            FaultEvent::CrashPeer {
                rank: 2,
                at_epoch: 5,
                timing: CrashTiming::PostHeartbeat
            }
        );
        assert_eq!(e.at_epoch(), 5);
    }

    #[test]
    fn join_event_round_trips() {
        let e = FaultEvent::JoinPeer {
            rank: 4,
            at_epoch: 5,
            rows: 120,
        };
        let json = serde_json::to_string(&e).unwrap();
        assert_eq!(serde_json::from_str::<FaultEvent>(&json).unwrap(), e);
    }

    #[test]
    fn unknown_fault_fields_rejected() {
        let r = serde_json::from_str::<FaultEvent>(
            r#"{"kind":"crash_peer","rank":2,"at_epoch":5,"severity":"high"}"#,
        );
        assert!(r.is_err());
    }

    #[test]
    fn attack_defaults_fill_in() {
        let a: AttackSpec =
            serde_json::from_str(r#"{"kind":"sign_flip","malicious_ranks":[3]}"#).unwrap();
        assert_eq!(
            a,
            AttackSpec::SignFlip {
                epsilon: 10.0,
                malicious_ranks: vec![3]
            }
        );
        let b: AttackSpec =
            serde_json::from_str(r#"{"kind":"gaussian_noise","malicious_ranks":[1,2]}"#).unwrap();
        assert_eq!(
            b,
            AttackSpec::GaussianNoise {
                sigma: 1.0,
                malicious_ranks: vec![1, 2]
            }
        );
    }

    #[test]
    fn malicious_rank_lookup() {
        let a = AttackSpec::SignFlip {
            epsilon: 10.0,
            malicious_ranks: vec![3],
        };
        assert!(a.is_malicious(3));
        assert!(!a.is_malicious(0));
        assert!(!AttackSpec::None.is_malicious(3));
        assert_eq!(AttackSpec::default(), AttackSpec::None);
    }
}
