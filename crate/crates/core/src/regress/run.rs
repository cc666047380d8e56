use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{aggregate_ratings, Rating, RatingReport, RegressError, ReplayPair, ReplayTurn, Side, Verdict};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunPair {
    pub pair_id: usize,
    pub pair: ReplayPair,
    /// Sides are shown swapped to the rater.
    pub flipped: bool,
}

/// A regression comparison of two model versions. Version 0 is the rule-based flow.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegressionRun {
    pub id: u64,
    pub left_version: u64,
    pub right_version: u64,
    /// Seed of the per-pair side randomization.
    pub seed: u64,
    pub pairs: Vec<RunPair>,
}

/// A pair as the rater sees it: sides possibly swapped, no version numbers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlindPair {
    pub pair_id: usize,
    pub transcript_id: String,
    pub divergence: Option<usize>,
    pub left: Vec<ReplayTurn>,
    pub right: Vec<ReplayTurn>,
}

impl RegressionRun {
    pub fn new(id: u64, left_version: u64, right_version: u64, seed: u64, pairs: Vec<ReplayPair>) -> RegressionRun {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pairs = pairs
            .into_iter()
            .enumerate()
            .map(|(pair_id, pair)| RunPair { pair_id, pair, flipped: rng.gen_bool(0.5) })
            .collect();
        RegressionRun { id, left_version, right_version, seed, pairs }
    }

    /// Pairs still waiting for a human verdict. Identical replays never appear.
    pub fn queue(&self, ratings: &[Rating]) -> Vec<BlindPair> {
        let rated: BTreeSet<usize> = ratings.iter().map(|r| r.pair_id).collect();
        self.pairs
            .iter()
            .filter(|p| !p.pair.auto_same && !rated.contains(&p.pair_id))
            .map(|p| {
                let (left, right) = p.pair.view();
                let (left, right) = if p.flipped { (right, left) } else { (left, right) };
                BlindPair {
                    pair_id: p.pair_id,
                    transcript_id: p.pair.transcript_id.clone(),
                    divergence: p.pair.divergence,
                    left: left.to_vec(),
                    right: right.to_vec(),
                }
            })
            .collect()
    }

    pub fn human_pairs(&self) -> usize {
        self.pairs.iter().filter(|p| !p.pair.auto_same).count()
    }

    /// Maps verdicts given on the blind view back to the run's real sides and
    /// checks them against the verdicts already stored.
    pub fn unblind(&self, stored: &[Rating], shown: &[Rating]) -> Result<Vec<Rating>, RegressError> {
        let mut taken: BTreeSet<usize> = stored.iter().map(|r| r.pair_id).collect();
        let mut out = Vec::with_capacity(shown.len());
        for r in shown {
            let pair = self.pairs.get(r.pair_id).ok_or(RegressError::UnknownPair(r.pair_id))?;
            if pair.pair.auto_same || !taken.insert(r.pair_id) {
                return Err(RegressError::DuplicateRating(r.pair_id));
            }
            let verdict = if pair.flipped { r.verdict.swapped() } else { r.verdict };
            out.push(Rating { pair_id: r.pair_id, verdict });
        }
        Ok(out)
    }

    /// Report from the right side's point of view, identical replays counted as same.
    pub fn report(&self, stored: &[Rating]) -> Result<RatingReport, RegressError> {
        let mut all: Vec<Rating> = self
            .pairs
            .iter()
            .filter(|p| p.pair.auto_same)
            .map(|p| Rating { pair_id: p.pair_id, verdict: Verdict::Same })
            .collect();
        all.extend_from_slice(stored);
        aggregate_ratings(&all, Side::Right)
    }
}
