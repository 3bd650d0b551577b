use serde::{Deserialize, Serialize};

/// Which database days one planned check covers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PlannedDays {
    Day(u32),
    /// Every retained day; used when the client has never queried or has
    /// been away longer than the retention period.
    FullWindow,
}

/// Which of the client's tokens to check. Tokens received since a day's
/// database was built may still match it (the sender may have been
/// diagnosed later), so every check uses the full current token set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TokenSubset {
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlannedCheck {
    pub days: PlannedDays,
    pub tokens: TokenSubset,
}

/// Days to check given the last completed query. Databases are indexed by
/// the day the server received the seeds, so older days cannot contain
/// anything new for a client that already checked them.
pub fn incremental_plan(last_query_day: Option<u32>, current_day: u32, retention_days: u32) -> Vec<PlannedCheck> {
    let check = |days| PlannedCheck { days, tokens: TokenSubset::All };
    match last_query_day {
        None => vec![check(PlannedDays::FullWindow)],
        Some(last) if last >= current_day => Vec::new(),
        Some(last) if current_day - last > retention_days => vec![check(PlannedDays::FullWindow)],
        Some(last) => (last + 1..=current_day).map(|d| check(PlannedDays::Day(d))).collect(),
    }
}

/// Expand a plan into concrete days, given the retained days on the server.
pub fn resolve_plan(plan: &[PlannedCheck], retained: &[u32]) -> Vec<u32> {
    let mut days: Vec<u32> = plan
        .iter()
        .flat_map(|c| match c.days {
            PlannedDays::Day(d) => vec![d],
            PlannedDays::FullWindow => retained.to_vec(),
        })
        .filter(|d| retained.contains(d))
        .collect();
    days.sort_unstable();
    days.dedup();
    days
}
