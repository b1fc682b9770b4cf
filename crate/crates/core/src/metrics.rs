//! Ranking evaluation: average precision, user-side and item-side daily
//! queries, symmetrized mAP and EWMA smoothing.
//!
//! Candidates are ranked by descending score; equal scores are ordered by
//! ascending dense id.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{perimeter_of, Day, EventLog, Perimeter};
use crate::history::HistoryIndex;
use crate::training::Side;

/// Anything that can score (user, item) pairs on a given day.
pub trait Scorer: Sync {
    /// Row-major `users.len() x items.len()` matrix of scores at `day`.
    fn score_matrix(&self, index: &HistoryIndex, day: Day, users: &[u32], items: &[u32]) -> Vec<f64>;
}

impl Scorer for crate::hcf::HcfModel {
    fn score_matrix(&self, index: &HistoryIndex, day: Day, users: &[u32], items: &[u32]) -> Vec<f64> {
        let d = self.dim();
        let (u, i) = self.dynamic_embeddings(index, day, users, items);
        let mut out = Vec::with_capacity(users.len() * items.len());
        for urow in u.chunks_exact(d) {
            for irow in i.chunks_exact(d) {
                out.push(crate::hcf::dot(urow, irow));
            }
        }
        out
    }
}

fn ranks_before(a: (f64, u32), b: (f64, u32)) -> bool {
    a.0 > b.0 || (a.0 == b.0 && a.1 < b.1)
}

/// Candidate ids ordered best first.
pub fn rank_candidates(candidates: &[u32], scores: &[f64]) -> Vec<u32> {
    let mut order: Vec<(f64, u32)> = scores.iter().copied().zip(candidates.iter().copied()).collect();
    order.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1)));
    order.into_iter().map(|(_, id)| id).collect()
}

/// Mean over relevant ids of the precision at their rank.
pub fn average_precision(ranking: &[u32], relevant: &[u32]) -> Result<f64> {
    if relevant.is_empty() {
        return Err(Error::Config("average precision needs at least one relevant id".into()));
    }
    let mut hits = 0usize;
    let mut total = 0.0;
    for (k, id) in ranking.iter().enumerate() {
        if relevant.contains(id) {
            hits += 1;
            total += hits as f64 / (k + 1) as f64;
        }
    }
    if hits != relevant.len() {
        return Err(Error::Config("relevant ids missing from the ranking".into()));
    }
    Ok(total / hits as f64)
}

/// Average precision straight from scores, without sorting the candidates.
/// `relevant` holds positions into `candidates`/`scores`.
pub fn average_precision_from_scores(candidates: &[u32], scores: &[f64], relevant: &[usize]) -> f64 {
    let mut ranks: Vec<usize> = relevant
        .iter()
        .map(|&r| {
            let me = (scores[r], candidates[r]);
            1 + scores
                .iter()
                .zip(candidates)
                .filter(|&(&s, &c)| ranks_before((s, c), me))
                .count()
        })
        .collect();
    ranks.sort_unstable();
    ranks
        .iter()
        .enumerate()
        .map(|(k, &rank)| (k + 1) as f64 / rank as f64)
        .sum::<f64>()
        / ranks.len() as f64
}

/// Harmonic mean of the two sides, 0 when both are 0.
pub fn symmetrized(map_user: f64, map_item: f64) -> f64 {
    let sum = map_user + map_item;
    if sum == 0.0 {
        0.0
    } else {
        // exact when both sides are equal
        map_user * (2.0 * map_item / sum)
    }
}

/// `s_0 = x_0`, `s_k = alpha x_k + (1 - alpha) s_{k-1}`.
pub fn ewma(series: &[f64], alpha: f64) -> Vec<f64> {
    assert!(alpha > 0.0 && alpha <= 1.0, "alpha must be in (0, 1]");
    let mut out = Vec::with_capacity(series.len());
    for (k, &x) in series.iter().enumerate() {
        let s = if k == 0 {
            x
        } else {
            alpha * x + (1.0 - alpha) * out[k - 1]
        };
        out.push(s);
    }
    out
}

/// One recommendation list to score: every candidate on the opposite side,
/// ranked for `anchor` on `day`.
#[derive(Clone, Debug, PartialEq)]
pub struct Query {
    pub day: Day,
    pub anchor: u32,
    pub side: Side,
    pub candidates: Arc<[u32]>,
    /// Ids with an event with the anchor that day, sorted and unique.
    pub relevant: Vec<u32>,
}

/// Queries for every `(day, anchor)` with at least one in-perimeter event in `days`.
pub fn build_queries(log: &EventLog, days: (Day, Day), perimeter: &Perimeter, side: Side) -> Vec<Query> {
    let in_users = membership(&perimeter.users, log.num_users());
    let in_items = membership(&perimeter.items, log.num_items());
    let mut candidates = match side {
        Side::User => perimeter.items.clone(),
        Side::Item => perimeter.users.clone(),
    };
    candidates.sort_unstable();
    candidates.dedup();
    let candidates: Arc<[u32]> = candidates.into();
    let mut grouped: BTreeMap<(Day, u32), Vec<u32>> = BTreeMap::new();
    for e in log.events_between(days.0, days.1) {
        if !(in_users[e.user as usize] && in_items[e.item as usize]) {
            continue;
        }
        let (anchor, other) = match side {
            Side::User => (e.user, e.item),
            Side::Item => (e.item, e.user),
        };
        grouped.entry((e.day, anchor)).or_default().push(other);
    }
    grouped
        .into_iter()
        .map(|((day, anchor), mut relevant)| {
            relevant.sort_unstable();
            relevant.dedup();
            Query {
                day,
                anchor,
                side,
                candidates: candidates.clone(),
                relevant,
            }
        })
        .collect()
}

fn membership(ids: &[u32], len: usize) -> Vec<bool> {
    let mut out = vec![false; len];
    for &id in ids {
        if let Some(slot) = out.get_mut(id as usize) {
            *slot = true;
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DailyMetrics {
    pub day: Day,
    pub map_u: f64,
    pub map_i: f64,
    pub map_sym: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub map_user: f64,
    pub map_item: f64,
    pub map_sym: f64,
    pub daily: Vec<DailyMetrics>,
    pub user_queries: usize,
    pub item_queries: usize,
    /// No queries on at least one side.
    pub degenerate: bool,
}

/// AP of every query, in query order.
pub fn query_aps<S: Scorer + ?Sized>(model: &S, index: &HistoryIndex, queries: &[Query]) -> Vec<f64> {
    let mut out = Vec::with_capacity(queries.len());
    let mut start = 0;
    while start < queries.len() {
        let (day, side) = (queries[start].day, queries[start].side);
        let end = start
            + queries[start..]
                .iter()
                .take_while(|q| q.day == day && q.side == side)
                .count();
        let group = &queries[start..end];
        let anchors: Vec<u32> = group.iter().map(|q| q.anchor).collect();
        let candidates = &group[0].candidates;
        let width = candidates.len();
        let scores = match side {
            Side::User => model.score_matrix(index, day, &anchors, candidates),
            Side::Item => transpose(
                &model.score_matrix(index, day, candidates, &anchors),
                width,
                anchors.len(),
            ),
        };
        for (q, row) in group.iter().zip(scores.chunks_exact(width.max(1))) {
            let positions: Vec<usize> = q
                .relevant
                .iter()
                .map(|r| candidates.binary_search(r).expect("relevant ids are candidates"))
                .collect();
            out.push(average_precision_from_scores(candidates, row, &positions));
        }
        start = end;
    }
    out
}

fn transpose(m: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; m.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = m[r * cols + c];
        }
    }
    out
}

/// Scores prebuilt query sets. Queries must be grouped by day, as
/// [`build_queries`] returns them.
pub fn evaluate_queries<S: Scorer + ?Sized>(
    model: &S,
    index: &HistoryIndex,
    user_queries: &[Query],
    item_queries: &[Query],
) -> MetricsReport {
    let user_aps = query_aps(model, index, user_queries);
    let item_aps = query_aps(model, index, item_queries);
    let mean = |v: &[f64]| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    let map_user = mean(&user_aps);
    let map_item = mean(&item_aps);

    let mut per_day: BTreeMap<Day, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for (q, ap) in user_queries.iter().zip(&user_aps) {
        per_day.entry(q.day).or_default().0.push(*ap);
    }
    for (q, ap) in item_queries.iter().zip(&item_aps) {
        per_day.entry(q.day).or_default().1.push(*ap);
    }
    let daily = per_day
        .into_iter()
        .map(|(day, (u, i))| {
            let (map_u, map_i) = (mean(&u), mean(&i));
            DailyMetrics {
                day,
                map_u,
                map_i,
                map_sym: symmetrized(map_u, map_i),
            }
        })
        .collect();
    MetricsReport {
        map_user,
        map_item,
        map_sym: symmetrized(map_user, map_item),
        daily,
        user_queries: user_queries.len(),
        item_queries: item_queries.len(),
        degenerate: user_queries.is_empty() || item_queries.is_empty(),
    }
}

/// Scores every query formed from `log` over `days` within `perimeter`.
/// Histories come from `index`, which should cover every event strictly
/// before each query day.
pub fn evaluate<S: Scorer + ?Sized>(
    model: &S,
    index: &HistoryIndex,
    log: &EventLog,
    days: (Day, Day),
    perimeter: &Perimeter,
) -> MetricsReport {
    let user_queries = build_queries(log, days, perimeter, Side::User);
    let item_queries = build_queries(log, days, perimeter, Side::Item);
    evaluate_queries(model, index, &user_queries, &item_queries)
}

/// A frozen evaluation period for models trained on one window: events of
/// the window and the period, in the window's id space, with the queries
/// and history index they induce.
#[derive(Clone, Debug)]
pub struct EvalSet {
    context: EventLog,
    index: HistoryIndex,
    perimeter: Perimeter,
    days: (Day, Day),
    user_queries: Vec<Query>,
    item_queries: Vec<Query>,
}

impl EvalSet {
    /// `train` fixes the perimeter; `period` holds the evaluated events and
    /// must lie strictly after `train`. Entities unknown to `train` are dropped.
    pub fn new(train: &EventLog, period: &EventLog, history_capacity: usize) -> Result<Self> {
        let (_, train_last) = train
            .day_range()
            .ok_or_else(|| Error::EmptyLog("training window".into()))?;
        let days = period
            .day_range()
            .ok_or_else(|| Error::EmptyLog("evaluation period".into()))?;
        if days.0 <= train_last {
            return Err(Error::Config(format!(
                "evaluation period starts on day {}, not after training day {train_last}",
                days.0
            )));
        }
        let projected = period.project_onto(train.users(), train.items());
        let mut events = train.events().to_vec();
        events.extend_from_slice(projected.events());
        let context = EventLog::new(events, train.users().clone(), train.items().clone(), train.origin());
        Ok(Self::from_context(context, perimeter_of(train), days, history_capacity))
    }

    /// `context` must already be in the perimeter's id space.
    pub fn from_context(context: EventLog, perimeter: Perimeter, days: (Day, Day), history_capacity: usize) -> Self {
        let index = HistoryIndex::build(&context, history_capacity);
        let user_queries = build_queries(&context, days, &perimeter, Side::User);
        let item_queries = build_queries(&context, days, &perimeter, Side::Item);
        EvalSet {
            context,
            index,
            perimeter,
            days,
            user_queries,
            item_queries,
        }
    }

    pub fn evaluate<S: Scorer + ?Sized>(&self, model: &S) -> MetricsReport {
        evaluate_queries(model, &self.index, &self.user_queries, &self.item_queries)
    }

    pub fn first_day(&self) -> Option<Day> {
        Some(self.days.0)
    }

    pub fn days(&self) -> (Day, Day) {
        self.days
    }

    pub fn index(&self) -> &HistoryIndex {
        &self.index
    }

    pub fn context(&self) -> &EventLog {
        &self.context
    }

    pub fn perimeter(&self) -> &Perimeter {
        &self.perimeter
    }

    pub fn user_queries(&self) -> &[Query] {
        &self.user_queries
    }

    pub fn item_queries(&self) -> &[Query] {
        &self.item_queries
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ap_worked_example() {
        let ap = average_precision(&[10, 11, 12, 13], &[10, 12]).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(average_precision(&[3, 1, 2], &[1, 2, 3]).unwrap(), 1.0);
        assert!((average_precision(&[1, 2, 3, 4, 5], &[5]).unwrap() - 0.2).abs() < 1e-15);
        assert!(average_precision(&[1, 2], &[]).is_err());
    }

    #[test]
    fn ranking_breaks_ties_by_id() {
        assert_eq!(rank_candidates(&[5, 2, 9, 1], &[1.0, 3.0, 1.0, 3.0]), vec![1, 2, 5, 9]);
        let ap = average_precision_from_scores(&[5, 2, 9, 1], &[1.0, 3.0, 1.0, 3.0], &[0]);
        assert!((ap - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn harmonic_mean() {
        assert_eq!(symmetrized(0.4, 0.4), 0.4);
        assert_eq!(symmetrized(0.2, 0.3), 0.24);
        assert_eq!(symmetrized(0.0, 0.0), 0.0);
    }

    #[test]
    fn ewma_examples() {
        let x = [0.3, 0.9, 0.1];
        assert_eq!(ewma(&x, 1.0), x.to_vec());
        assert_eq!(ewma(&[0.5; 4], 0.2), vec![0.5; 4]);
        assert_eq!(ewma(&[0.0, 1.0], 0.2), vec![0.0, 0.2]);
        assert!(ewma(&[], 0.2).is_empty());
    }

    #[test]
    fn query_construction() {
        // user 0 active on days 1 and 3 of 0..=4; item 2 outside the perimeter
        let log = EventLog::from_triples(2, 3, &[(1, 0, 0), (1, 0, 2), (3, 0, 1), (3, 1, 2)]);
        let perimeter = Perimeter {
            users: vec![0, 1],
            items: vec![0, 1],
        };
        let q = build_queries(&log, (0, 4), &perimeter, Side::User);
        assert_eq!(q.len(), 2);
        assert_eq!(q[0].relevant, vec![0]);
        assert_eq!(&*q[0].candidates, &[0, 1]);
        assert!(q.iter().all(|q| q.anchor == 0));
        assert!(build_queries(&log, (2, 2), &perimeter, Side::User).is_empty());
        let items = build_queries(&log, (0, 4), &perimeter, Side::Item);
        assert_eq!(items.len(), 2);
    }
}
