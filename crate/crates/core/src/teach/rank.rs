use serde::{Deserialize, Serialize};

use super::{LogDialog, LogStatus};

/// Scores a log for review; lower scores are reviewed first.
pub trait RankingStrategy {
    fn score(&self, log: &LogDialog) -> f64;
}

/// Least confident dialogs first: the lowest selected-action probability in the
/// dialog. A dialog without system actions scores 1.
#[derive(Debug, Clone, Copy, Default)]
pub struct MinConfidence;

impl RankingStrategy for MinConfidence {
    fn score(&self, log: &LogDialog) -> f64 {
        log.turns.iter().flat_map(|t| &t.actions).map(|a| a.probability).fold(1.0, f64::min)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogFilter {
    /// `None` keeps every status.
    pub status: Option<LogStatus>,
}

impl Default for LogFilter {
    fn default() -> Self {
        LogFilter { status: Some(LogStatus::Unreviewed) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedLog {
    pub log_id: u64,
    pub score: f64,
    pub turns: usize,
    pub status: LogStatus,
}

/// Ascending score, then fewer turns, then lower id.
pub fn rank_logs<'a>(
    logs: impl IntoIterator<Item = &'a LogDialog>,
    filter: LogFilter,
    strategy: &dyn RankingStrategy,
) -> Vec<RankedLog> {
    let mut ranked: Vec<RankedLog> = logs
        .into_iter()
        .filter(|l| filter.status.is_none_or(|s| s == l.status))
        .map(|l| RankedLog { log_id: l.id, score: strategy.score(l), turns: l.turns.len(), status: l.status })
        .collect();
    ranked.sort_by(|a, b| a.score.total_cmp(&b.score).then(a.turns.cmp(&b.turns)).then(a.log_id.cmp(&b.log_id)));
    ranked
}
