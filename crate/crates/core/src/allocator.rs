//! Traffic routing: which design a user sees, stickiness, and maturity quotas.
//!
//! Routing for a new user is: Control with probability
//! `control_holdout_fraction`, otherwise the active candidate furthest from its
//! maturity quota (lowest id on ties). Once every quota is filled, overflow
//! traffic is spread over active candidates in proportion to their current rate.
//!
//! The allocator never reads a clock and draws randomness from a stream keyed
//! by the record's sequence number, so routing is a pure function of the log.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::evolution::{select_parent, Candidate};

const ALLOCATION_SALT: u64 = 0x5EED_A110_CA7E_0001;

/// A user's current design. Lives until `expires_at` (exclusive).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssignmentRecord {
    pub user_id: String,
    pub candidate_id: u64,
    pub assigned_at: i64,
    pub expires_at: i64,
    /// A conversion was already attributed to this assignment.
    pub converted: bool,
}

impl AssignmentRecord {
    pub fn is_current(&self, now: i64) -> bool {
        now < self.expires_at
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub candidate_id: u64,
    pub sticky_until: i64,
    /// The user already had this design.
    pub sticky: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum ConversionOutcome {
    Attributed {
        candidate_id: u64,
    },
    /// The assignment had already converted; nothing was counted.
    Duplicate {
        candidate_id: u64,
    },
    Unattributed,
}

impl ConversionOutcome {
    pub fn candidate_id(&self) -> Option<u64> {
        match self {
            ConversionOutcome::Attributed { candidate_id }
            | ConversionOutcome::Duplicate { candidate_id } => Some(*candidate_id),
            ConversionOutcome::Unattributed => None,
        }
    }

    pub fn attributed(&self) -> bool {
        !matches!(self, ConversionOutcome::Unattributed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shortfall {
    pub candidate_id: u64,
    pub remaining: u64,
}

/// Remaining impressions before each active candidate matures this generation.
pub fn maturity_status(candidates: &[Candidate], maturity_age: u64) -> Vec<Shortfall> {
    candidates
        .iter()
        .filter(|c| c.is_active())
        .map(|c| Shortfall {
            candidate_id: c.id,
            remaining: maturity_age.saturating_sub(c.generation_impressions),
        })
        .collect()
}

pub fn is_mature(candidates: &[Candidate], maturity_age: u64) -> bool {
    maturity_status(candidates, maturity_age)
        .iter()
        .all(|s| s.remaining == 0)
}

/// RNG stream for the routing decision recorded at `sequence`.
pub fn allocation_rng(seed: u64, sequence: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ALLOCATION_SALT);
    rng.set_stream(sequence);
    rng
}

/// Routes a user who has no current assignment.
pub fn route_new_user<R: Rng + ?Sized>(
    candidates: &[Candidate],
    maturity_age: u64,
    holdout_fraction: f64,
    rng: &mut R,
) -> u64 {
    let control = candidates.iter().find(|c| c.is_control());
    let holdout = rng.random::<f64>() < holdout_fraction;
    if let (true, Some(control)) = (holdout, control) {
        return control.id;
    }
    let unfilled = candidates
        .iter()
        .filter(|c| c.is_active() && c.generation_impressions < maturity_age)
        .min_by_key(|c| (c.generation_impressions, c.id));
    if let Some(candidate) = unfilled {
        return candidate.id;
    }
    let active: Vec<&Candidate> = candidates.iter().filter(|c| c.is_active()).collect();
    if active.is_empty() {
        return control.map_or(0, |c| c.id);
    }
    select_parent(&active, rng).id
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::Genome;

    fn pool(gen_impressions: &[u64]) -> Vec<Candidate> {
        let mut out = vec![Candidate::control(0, Genome::new(vec![0]))];
        for (i, &n) in gen_impressions.iter().enumerate() {
            let mut c = Candidate::new(i as u64 + 1, Genome::new(vec![1]), 0);
            c.generation_impressions = n;
            c.impressions = n;
            out.push(c);
        }
        out
    }

    #[test]
    fn least_filled_then_lowest_id() {
        let cands = pool(&[3, 1, 1, 2]);
        let mut rng = allocation_rng(1, 1);
        assert_eq!(route_new_user(&cands, 10, 0.0, &mut rng), 2);
    }

    #[test]
    fn equal_fill_rotates_by_id() {
        let mut cands = pool(&[0, 0, 0, 0]);
        let mut order = Vec::new();
        for seq in 0..8 {
            let id = route_new_user(&cands, 100, 0.0, &mut allocation_rng(7, seq));
            order.push(id);
            cands[id as usize].generation_impressions += 1;
        }
        assert_eq!(order, vec![1, 2, 3, 4, 1, 2, 3, 4]);
    }

    #[test]
    fn maturity_counts() {
        let cands = pool(&[0, 2000, 1500]);
        let status = maturity_status(&cands, 2000);
        assert_eq!(
            status.iter().map(|s| s.remaining).collect::<Vec<_>>(),
            vec![2000, 0, 500]
        );
        assert!(!is_mature(&cands, 2000));
        assert!(is_mature(&pool(&[2000, 2001]), 2000));
    }

    #[test]
    fn overflow_goes_to_active_candidates() {
        let mut cands = pool(&[5, 5]);
        cands[1].conversions = 0;
        cands[2].conversions = 5;
        for seq in 0..50 {
            assert_eq!(
                route_new_user(&cands, 5, 0.0, &mut allocation_rng(3, seq)),
                2
            );
        }
    }

    #[test]
    fn holdout_fraction_is_respected() {
        let cands = pool(&[0; 4]);
        let hits = (0..10_000)
            .filter(|&seq| route_new_user(&cands, u64::MAX, 0.1, &mut allocation_rng(11, seq)) == 0)
            .count();
        // 3 sigma of Binomial(10000, 0.1) is 90.
        assert!((900..=1100).contains(&hits), "{hits}");
    }
}
