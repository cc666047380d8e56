use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::RegressError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Same,
    LeftBetter,
    RightBetter,
}

impl Verdict {
    pub fn swapped(self) -> Verdict {
        match self {
            Verdict::Same => Verdict::Same,
            Verdict::LeftBetter => Verdict::RightBetter,
            Verdict::RightBetter => Verdict::LeftBetter,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Left,
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rating {
    pub pair_id: usize,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub same: usize,
    pub left_better: usize,
    pub right_better: usize,
}

impl Counts {
    pub fn total(&self) -> usize {
        self.same + self.left_better + self.right_better
    }
}

/// Rounds half away from zero to two decimals.
pub fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingReport {
    pub total: usize,
    pub counts: Counts,
    /// Percentages of `total`, `None` when nothing was rated.
    pub same_pct: Option<f64>,
    pub left_better_pct: Option<f64>,
    pub right_better_pct: Option<f64>,
    /// The side whose dialog manager is under evaluation.
    pub candidate: Side,
    /// Candidate-better minus candidate-worse, in percent.
    pub overall_variation: Option<f64>,
}

impl RatingReport {
    pub fn from_counts(counts: Counts, candidate: Side) -> RatingReport {
        let total = counts.total();
        let pct = |n: usize| (total > 0).then(|| round2(n as f64 * 100.0 / total as f64));
        let (better, worse) = match candidate {
            Side::Left => (counts.left_better, counts.right_better),
            Side::Right => (counts.right_better, counts.left_better),
        };
        RatingReport {
            total,
            counts,
            same_pct: pct(counts.same),
            left_better_pct: pct(counts.left_better),
            right_better_pct: pct(counts.right_better),
            candidate,
            overall_variation: (total > 0).then(|| round2((better as f64 - worse as f64) * 100.0 / total as f64)),
        }
    }

    pub fn better_pct(&self) -> Option<f64> {
        match self.candidate {
            Side::Left => self.left_better_pct,
            Side::Right => self.right_better_pct,
        }
    }

    pub fn worse_pct(&self) -> Option<f64> {
        match self.candidate {
            Side::Left => self.right_better_pct,
            Side::Right => self.left_better_pct,
        }
    }

    /// Plain-text table; undefined percentages print as "—".
    pub fn render(&self) -> String {
        let pct = |p: Option<f64>| p.map_or("—".to_string(), |v| format!("{v:.2}%"));
        let signed = |p: Option<f64>| p.map_or("—".to_string(), |v| format!("{v:+.2}%"));
        let mut out = String::new();
        let _ = writeln!(out, "{:<14}{:>8}{:>10}", "verdict", "count", "share");
        let _ = writeln!(out, "{:<14}{:>8}{:>10}", "same", self.counts.same, pct(self.same_pct));
        let _ = writeln!(out, "{:<14}{:>8}{:>10}", "better", self.counts_better(), pct(self.better_pct()));
        let _ = writeln!(out, "{:<14}{:>8}{:>10}", "worse", self.counts_worse(), pct(self.worse_pct()));
        let _ = writeln!(out, "{:<14}{:>8}{:>10}", "total", self.total, "");
        let _ = writeln!(out, "overall variation {}", signed(self.overall_variation));
        out
    }

    fn counts_better(&self) -> usize {
        match self.candidate {
            Side::Left => self.counts.left_better,
            Side::Right => self.counts.right_better,
        }
    }

    fn counts_worse(&self) -> usize {
        match self.candidate {
            Side::Left => self.counts.right_better,
            Side::Right => self.counts.left_better,
        }
    }
}

/// One verdict per pair; a second verdict for the same pair is rejected.
pub fn aggregate_ratings(ratings: &[Rating], candidate: Side) -> Result<RatingReport, RegressError> {
    let mut seen = BTreeSet::new();
    let mut counts = Counts::default();
    for r in ratings {
        if !seen.insert(r.pair_id) {
            return Err(RegressError::DuplicateRating(r.pair_id));
        }
        match r.verdict {
            Verdict::Same => counts.same += 1,
            Verdict::LeftBetter => counts.left_better += 1,
            Verdict::RightBetter => counts.right_better += 1,
        }
    }
    Ok(RatingReport::from_counts(counts, candidate))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rounding_is_half_away_from_zero() {
        assert_eq!(round2(0.125), 0.13);
        assert_eq!(round2(-0.125), -0.13);
        assert_eq!(round2(91.6333), 91.63);
    }

    #[test]
    fn empty_report_renders_dashes() {
        let r = aggregate_ratings(&[], Side::Right).unwrap();
        assert_eq!(r.total, 0);
        assert_eq!(r.same_pct, None);
        assert!(r.render().contains("—"));
    }
}
