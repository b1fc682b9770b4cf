//! Per-entity interaction histories.
//!
//! A query at day `t` returns the counterparts of the last `n` events that
//! happened strictly before `t`, oldest first. Events of day `t` itself are
//! never visible, whatever their order within the day.

use crate::error::{Error, Result};
use crate::events::{Day, EventLog};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HistoryIndex {
    per_user: Vec<Vec<(Day, u32)>>,
    per_item: Vec<Vec<(Day, u32)>>,
    capacity: usize,
}

impl HistoryIndex {
    /// Builds the index in one pass over the (already sorted) log.
    pub fn build(log: &EventLog, capacity: usize) -> Self {
        assert!(capacity >= 1, "history capacity must be at least 1");
        let mut per_user = vec![Vec::new(); log.num_users()];
        let mut per_item = vec![Vec::new(); log.num_items()];
        for e in log.events() {
            per_user[e.user as usize].push((e.day, e.item));
            per_item[e.item as usize].push((e.day, e.user));
        }
        HistoryIndex {
            per_user,
            per_item,
            capacity,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn num_users(&self) -> usize {
        self.per_user.len()
    }

    pub fn num_items(&self) -> usize {
        self.per_item.len()
    }

    /// Full chronological `(day, item)` list of a user.
    pub fn user_events(&self, user: u32) -> &[(Day, u32)] {
        &self.per_user[user as usize]
    }

    /// Full chronological `(day, user)` list of an item.
    pub fn item_events(&self, item: u32) -> &[(Day, u32)] {
        &self.per_item[item as usize]
    }

    /// Items of the user's last `n` events before `day`.
    pub fn user_history(&self, user: u32, day: Day) -> Result<Vec<u32>> {
        let list = self
            .per_user
            .get(user as usize)
            .ok_or(Error::UnknownEntity { kind: "user", id: user })?;
        Ok(trailing(list, day, self.capacity).iter().map(|e| e.1).collect())
    }

    /// Users of the item's last `n` events before `day`.
    pub fn item_history(&self, item: u32, day: Day) -> Result<Vec<u32>> {
        let list = self
            .per_item
            .get(item as usize)
            .ok_or(Error::UnknownEntity { kind: "item", id: item })?;
        Ok(trailing(list, day, self.capacity).iter().map(|e| e.1).collect())
    }

    /// Allocation-free variant of [`user_history`](Self::user_history); panics on unknown ids.
    pub fn user_window(&self, user: u32, day: Day) -> &[(Day, u32)] {
        trailing(&self.per_user[user as usize], day, self.capacity)
    }

    /// Allocation-free variant of [`item_history`](Self::item_history); panics on unknown ids.
    pub fn item_window(&self, item: u32, day: Day) -> &[(Day, u32)] {
        trailing(&self.per_item[item as usize], day, self.capacity)
    }
}

fn trailing(list: &[(Day, u32)], day: Day, capacity: usize) -> &[(Day, u32)] {
    let end = list.partition_point(|e| e.0 < day);
    &list[end.saturating_sub(capacity)..end]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn build_lists() {
        let log = EventLog::from_triples(1, 2, &[(0, 0, 0), (1, 0, 1)]);
        let idx = HistoryIndex::build(&log, 5);
        assert_eq!(idx.user_events(0), &[(0, 0), (1, 1)]);
        assert_eq!(idx.item_events(0), &[(0, 0)]);

        let empty = EventLog::from_triples(2, 2, &[]);
        let idx = HistoryIndex::build(&empty, 3);
        assert!(idx.user_events(0).is_empty() && idx.item_events(1).is_empty());
    }

    #[test]
    fn last_n_rule() {
        // A=0, B=1, C=2, D=3
        let log = EventLog::from_triples(1, 4, &[(1, 0, 0), (2, 0, 1), (3, 0, 2), (4, 0, 3)]);
        let idx = HistoryIndex::build(&log, 3);
        assert_eq!(idx.user_history(0, 5).unwrap(), vec![1, 2, 3]);
        assert_eq!(idx.user_history(0, 1).unwrap(), Vec::<u32>::new());
        assert_eq!(idx.user_history(0, 3).unwrap(), vec![0, 1]);
    }

    #[test]
    fn duplicates_retained() {
        let log = EventLog::from_triples(1, 2, &[(1, 0, 0), (1, 0, 0), (2, 0, 1)]);
        let idx = HistoryIndex::build(&log, 3);
        let got = idx.user_history(0, 3).unwrap();
        // brute force: scan the raw log for t' < 3, keep the last three
        let mut scan: Vec<u32> = log
            .events()
            .iter()
            .filter(|e| e.user == 0 && e.day < 3)
            .map(|e| e.item)
            .collect();
        let scan = scan.split_off(scan.len().saturating_sub(3));
        assert_eq!(got, scan);
        assert_eq!(got, vec![0, 0, 1]);
    }

    #[test]
    fn item_side_mirrors_user_side() {
        let triples = [(1, 0, 0), (2, 0, 1), (3, 0, 2), (4, 0, 3)];
        let log = EventLog::from_triples(1, 4, &triples);
        let t = log.transposed();
        let idx = HistoryIndex::build(&t, 3);
        assert_eq!(idx.item_history(0, 5).unwrap(), vec![1, 2, 3]);

        let log = EventLog::from_triples(3, 2, &[(2, 0, 0), (3, 1, 0), (4, 2, 0)]);
        let idx = HistoryIndex::build(&log, 10);
        assert!(idx.item_history(1, 9).unwrap().is_empty());
        assert!(idx.item_history(0, 2).unwrap().is_empty());
        assert_eq!(idx.item_history(0, 100).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn unknown_ids_error() {
        let log = EventLog::from_triples(1, 1, &[(0, 0, 0)]);
        let idx = HistoryIndex::build(&log, 2);
        assert!(matches!(
            idx.user_history(3, 1),
            Err(Error::UnknownEntity { kind: "user", .. })
        ));
        assert!(matches!(
            idx.item_history(1, 1),
            Err(Error::UnknownEntity { kind: "item", .. })
        ));
    }

    #[test]
    fn transpose_swaps_lists() {
        let log = EventLog::from_triples(3, 4, &[(0, 0, 1), (0, 2, 1), (1, 1, 3), (2, 0, 0)]);
        let a = HistoryIndex::build(&log, 4);
        let b = HistoryIndex::build(&log.transposed(), 4);
        assert_eq!(a.per_user, b.per_item);
        assert_eq!(a.per_item, b.per_user);
    }
}
