//! Simulated collectives over worker groups.
//!
//! Each function takes the inputs of every group member at once (index `i`
//! belongs to `group[i]`) and returns every member's output, which is how a
//! single-threaded lockstep harness drives all workers through a rendezvous.
//! [`Rendezvous`] offers the same all-to-all for workers running on real
//! threads. Every call credits each member's [`CommLedger`] with the elements
//! it sends.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum GroupKind {
    Tp,
    Sp,
    SpAa,
    SpAg,
    /// KV exchange when the all-to-all and all-gather are fused.
    SpKv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CollectiveKind {
    AllToAll,
    AllGather,
    AllReduce,
    FusedAllToAllGather,
}

impl fmt::Display for GroupKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GroupKind::Tp => "TP",
            GroupKind::Sp => "SP",
            GroupKind::SpAa => "SP_AA",
            GroupKind::SpAg => "SP_AG",
            GroupKind::SpKv => "SP_KV",
        })
    }
}

impl fmt::Display for CollectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CollectiveKind::AllToAll => "all_to_all",
            CollectiveKind::AllGather => "all_gather",
            CollectiveKind::AllReduce => "all_reduce",
            CollectiveKind::FusedAllToAllGather => "fused_all_to_all_gather",
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counter {
    pub calls: u64,
    pub elements: u64,
}

/// Key of one ledger row. `layer` is `None` outside the transformer layers
/// (for example the final all-gather of output embeddings).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LedgerKey {
    pub group: GroupKind,
    pub collective: CollectiveKind,
    pub layer: Option<usize>,
}

/// Per-worker record of collective calls and elements sent.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommLedger {
    rows: BTreeMap<LedgerKey, Counter>,
}

impl CommLedger {
    pub fn credit(&mut self, key: LedgerKey, elements: u64) {
        let c = self.rows.entry(key).or_default();
        c.calls += 1;
        c.elements += elements;
    }

    pub fn rows(&self) -> impl Iterator<Item = (&LedgerKey, &Counter)> {
        self.rows.iter()
    }

    /// Sum over layers (including untagged rows).
    pub fn total(&self, group: GroupKind, collective: CollectiveKind) -> Counter {
        self.rows
            .iter()
            .filter(|(k, _)| k.group == group && k.collective == collective)
            .fold(Counter::default(), |acc, (_, c)| Counter {
                calls: acc.calls + c.calls,
                elements: acc.elements + c.elements,
            })
    }

    pub fn at_layer(&self, group: GroupKind, collective: CollectiveKind, layer: usize) -> Counter {
        self.rows
            .get(&LedgerKey {
                group,
                collective,
                layer: Some(layer),
            })
            .copied()
            .unwrap_or_default()
    }

    /// Elements sent across every collective.
    pub fn elements(&self) -> u64 {
        self.rows.values().map(|c| c.elements).sum()
    }

    pub fn calls(&self) -> u64 {
        self.rows.values().map(|c| c.calls).sum()
    }
}

/// Ledgers of every worker plus the layer tag applied to new entries.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ledgers {
    workers: Vec<CommLedger>,
    layer: Option<usize>,
}

impl Ledgers {
    pub fn new(workers: usize) -> Self {
        Self {
            workers: vec![CommLedger::default(); workers],
            layer: None,
        }
    }

    pub fn set_layer(&mut self, layer: Option<usize>) {
        self.layer = layer;
    }

    pub fn worker(&self, w: usize) -> &CommLedger {
        &self.workers[w]
    }

    pub fn len(&self) -> usize {
        self.workers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.workers.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &CommLedger> {
        self.workers.iter()
    }

    fn credit(&mut self, worker: usize, group: GroupKind, collective: CollectiveKind, elements: u64) {
        let key = LedgerKey {
            group,
            collective,
            layer: self.layer,
        };
        self.workers[worker].credit(key, elements);
    }

    /// Sum of a counter over the listed workers.
    pub fn group_total(&self, workers: &[usize], group: GroupKind, collective: CollectiveKind) -> Counter {
        workers.iter().fold(Counter::default(), |acc, &w| {
            let c = self.workers[w].total(group, collective);
            Counter {
                calls: acc.calls + c.calls,
                elements: acc.elements + c.elements,
            }
        })
    }

    /// Folds another ledger set into this one as a single fused call per
    /// member, keeping the element volume.
    pub fn absorb_fused(&mut self, group: &[usize], scratch: &Ledgers) {
        for &w in group {
            let elements = scratch.workers[w].elements();
            self.credit(w, GroupKind::SpKv, CollectiveKind::FusedAllToAllGather, elements);
        }
    }

    pub fn merge(&mut self, other: &Ledgers) {
        for (mine, theirs) in self.workers.iter_mut().zip(&other.workers) {
            for (k, c) in &theirs.rows {
                let e = mine.rows.entry(*k).or_default();
                e.calls += c.calls;
                e.elements += c.elements;
            }
        }
    }

    /// CSV dump, one row per (worker, group, collective, layer).
    pub fn dump_csv(&self) -> String {
        let mut out = String::from("worker,group,collective,layer,calls,elements\n");
        for (w, ledger) in self.workers.iter().enumerate() {
            for (k, c) in &ledger.rows {
                let layer = k.layer.map_or_else(|| "-".to_string(), |l| l.to_string());
                let _ = writeln!(
                    out,
                    "{w},{},{},{layer},{},{}",
                    k.group, k.collective, c.calls, c.elements
                );
            }
        }
        out
    }
}

fn check_members<T>(group: &[usize], inputs: &[T], what: &str) -> Result<()> {
    if group.is_empty() {
        return Err(Error::protocol(format!("{what} over an empty group")));
    }
    if inputs.len() != group.len() {
        return Err(Error::protocol(format!(
            "{what}: {} of {} members arrived",
            inputs.len(),
            group.len()
        )));
    }
    Ok(())
}

/// Member `i` sends `shards[i][j]` to member `j`; member `j` receives
/// `[shards[0][j], shards[1][j], ...]`. Self-shards are not counted.
pub fn all_to_all(
    group: &[usize],
    kind: GroupKind,
    shards: Vec<Vec<Matrix>>,
    ledgers: &mut Ledgers,
) -> Result<Vec<Vec<Matrix>>> {
    check_members(group, &shards, "all_to_all")?;
    let g = group.len();
    for (i, s) in shards.iter().enumerate() {
        if s.len() != g {
            return Err(Error::protocol(format!(
                "all_to_all: worker {} supplied {} shards for a group of {g}",
                group[i],
                s.len()
            )));
        }
    }
    for (i, s) in shards.iter().enumerate() {
        let sent: usize = s
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, m)| m.len())
            .sum();
        ledgers.credit(group[i], kind, CollectiveKind::AllToAll, sent as u64);
    }
    let mut out: Vec<Vec<Matrix>> = (0..g).map(|_| Vec::with_capacity(g)).collect();
    for member in shards {
        for (j, shard) in member.into_iter().enumerate() {
            out[j].push(shard);
        }
    }
    Ok(out)
}

/// Every member receives every shard in group-rank order. Each member sends
/// its own shard directly to the other `g - 1` members.
pub fn all_gather(
    group: &[usize],
    kind: GroupKind,
    shards: Vec<Matrix>,
    ledgers: &mut Ledgers,
) -> Result<Vec<Vec<Matrix>>> {
    check_members(group, &shards, "all_gather")?;
    let g = group.len();
    for (i, s) in shards.iter().enumerate() {
        ledgers.credit(group[i], kind, CollectiveKind::AllGather, ((g - 1) * s.len()) as u64);
    }
    Ok(vec![shards; g])
}

/// Elementwise sum in group-rank order; every member gets the same result.
/// Volume follows the ring algorithm: a reduce-scatter then an all-gather,
/// each moving every chunk but one per member, so the group as a whole sends
/// `2 (g - 1)` times the tensor size.
pub fn all_reduce(
    group: &[usize],
    kind: GroupKind,
    tensors: Vec<Matrix>,
    ledgers: &mut Ledgers,
) -> Result<Vec<Matrix>> {
    check_members(group, &tensors, "all_reduce")?;
    let g = group.len();
    let shape = tensors[0].shape();
    if tensors.iter().any(|t| t.shape() != shape) {
        return Err(Error::protocol("all_reduce: members supplied different shapes"));
    }
    let n = tensors[0].len();
    for (i, &w) in group.iter().enumerate() {
        ledgers.credit(w, kind, CollectiveKind::AllReduce, ring_sent(n, g, i) as u64);
    }
    let mut iter = tensors.into_iter();
    let mut acc = iter.next().expect("non-empty group");
    for t in iter {
        acc.add_assign(&t)?;
    }
    Ok(vec![acc; g])
}

/// Elements member `rank` sends in a ring all-reduce of `n` elements over `g`
/// members with chunk `c` of size `n / g` (+1 for the first `n % g` chunks).
/// In the reduce-scatter a member never forwards the chunk it ends up owning,
/// `(rank + 1) % g`; in the all-gather it never forwards the chunk it
/// receives last, `(rank + 2) % g`.
pub fn ring_sent(n: usize, g: usize, rank: usize) -> usize {
    if g <= 1 {
        return 0;
    }
    let chunk = |c: usize| n / g + usize::from(c < n % g);
    (n - chunk((rank + 1) % g)) + (n - chunk((rank + 2) % g))
}

/// A thread-shared meeting point for one group: each member deposits its
/// shards and blocks until all have arrived or the timeout passes.
pub struct Rendezvous {
    size: usize,
    timeout: Duration,
    state: Mutex<RendezvousState>,
    cv: Condvar,
}

struct RendezvousState {
    generation: u64,
    deposited: Vec<Option<Vec<Matrix>>>,
    arrived: usize,
    results: Vec<Option<Vec<Matrix>>>,
}

impl Rendezvous {
    pub fn new(size: usize, timeout: Duration) -> Self {
        Self {
            size,
            timeout,
            state: Mutex::new(RendezvousState {
                generation: 0,
                deposited: vec![None; size],
                arrived: 0,
                results: vec![None; size],
            }),
            cv: Condvar::new(),
        }
    }

    /// All-to-all from the point of view of group rank `rank`. A member that
    /// never arrives makes the others fail with a protocol error once the
    /// timeout expires instead of hanging.
    pub fn all_to_all(&self, rank: usize, shards: Vec<Matrix>) -> Result<Vec<Matrix>> {
        if shards.len() != self.size {
            return Err(Error::protocol(format!(
                "all_to_all: rank {rank} supplied {} shards for a group of {}",
                shards.len(),
                self.size
            )));
        }
        let mut st = self.state.lock().expect("rendezvous lock poisoned");
        let generation = st.generation;
        st.deposited[rank] = Some(shards);
        st.arrived += 1;
        if st.arrived == self.size {
            let mut deposited: Vec<Vec<Matrix>> =
                st.deposited.iter_mut().map(|d| d.take().expect("deposited")).collect();
            let mut results: Vec<Vec<Matrix>> = (0..self.size).map(|_| Vec::new()).collect();
            for member in deposited.iter_mut() {
                for (j, shard) in member.drain(..).enumerate() {
                    results[j].push(shard);
                }
            }
            st.results = results.into_iter().map(Some).collect();
            st.arrived = 0;
            st.generation += 1;
            self.cv.notify_all();
        } else {
            let (guard, timeout) = self
                .cv
                .wait_timeout_while(st, self.timeout, |s| s.generation == generation)
                .expect("rendezvous lock poisoned");
            st = guard;
            if timeout.timed_out() {
                return Err(Error::protocol(format!(
                    "all_to_all: rank {rank} timed out waiting for {} members",
                    self.size
                )));
            }
        }
        st.results[rank]
            .take()
            .ok_or_else(|| Error::protocol("all_to_all: result already taken"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::init_weights;
    use std::sync::Arc;

    fn m(rows: &[&[f32]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn all_to_all_singleton_is_identity() {
        let mut led = Ledgers::new(1);
        let a = init_weights(1, (2, 2));
        let out = all_to_all(&[0], GroupKind::Sp, vec![vec![a.clone()]], &mut led).unwrap();
        assert_eq!(out, vec![vec![a]]);
        assert_eq!(led.worker(0).total(GroupKind::Sp, CollectiveKind::AllToAll).elements, 0);
    }

    #[test]
    fn all_to_all_transposes() {
        let (a0, b0, a1, b1) = (m(&[&[1.0]]), m(&[&[2.0]]), m(&[&[3.0]]), m(&[&[4.0]]));
        let mut led = Ledgers::new(2);
        let out = all_to_all(
            &[0, 1],
            GroupKind::Sp,
            vec![vec![a0.clone(), b0.clone()], vec![a1.clone(), b1.clone()]],
            &mut led,
        )
        .unwrap();
        assert_eq!(out[0], vec![a0, a1]);
        assert_eq!(out[1], vec![b0, b1]);
        assert_eq!(led.worker(0).total(GroupKind::Sp, CollectiveKind::AllToAll).elements, 1);
    }

    #[test]
    fn all_to_all_matches_gather_scatter() {
        let g = 4;
        let shards: Vec<Vec<Matrix>> = (0..g)
            .map(|i| (0..g).map(|j| init_weights((i * g + j) as u64, (2, 3))).collect())
            .collect();
        // Oracle: lay every shard out in one global table, then read columns.
        let table: Vec<Matrix> = shards.concat();
        let mut led = Ledgers::new(g);
        let out = all_to_all(&[0, 1, 2, 3], GroupKind::Sp, shards, &mut led).unwrap();
        for j in 0..g {
            for i in 0..g {
                assert_eq!(out[j][i], table[i * g + j]);
            }
        }
        for w in 0..g {
            let c = led.worker(w).total(GroupKind::Sp, CollectiveKind::AllToAll);
            assert_eq!(c, Counter { calls: 1, elements: 18 });
        }
    }

    #[test]
    fn all_to_all_rejects_wrong_shard_count() {
        let mut led = Ledgers::new(2);
        let err = all_to_all(
            &[0, 1],
            GroupKind::Sp,
            vec![vec![Matrix::zeros(1, 1)], vec![Matrix::zeros(1, 1), Matrix::zeros(1, 1)]],
            &mut led,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Protocol(_)));
        let err = all_to_all(&[0, 1], GroupKind::Sp, vec![vec![Matrix::zeros(1, 1); 2]], &mut led)
            .unwrap_err();
        assert!(matches!(err, Error::Protocol(_)));
    }

    #[test]
    fn all_gather_orders_by_rank() {
        let shards = vec![m(&[&[1.0]]), m(&[&[2.0]]), m(&[&[3.0]])];
        let mut led = Ledgers::new(3);
        let out = all_gather(&[0, 1, 2], GroupKind::Sp, shards.clone(), &mut led).unwrap();
        for member in &out {
            assert_eq!(member, &shards);
        }
        let single = all_gather(&[0], GroupKind::Sp, vec![shards[0].clone()], &mut Ledgers::new(1)).unwrap();
        assert_eq!(single, vec![vec![shards[0].clone()]]);
    }

    #[test]
    fn all_gather_matches_gather_oracle() {
        let shards: Vec<Matrix> = (0..4).map(|i| init_weights(100 + i, (3, 2))).collect();
        let gathered = Matrix::concat_rows(&shards).unwrap();
        let mut led = Ledgers::new(4);
        let out = all_gather(&[0, 1, 2, 3], GroupKind::SpAg, shards, &mut led).unwrap();
        for member in out {
            assert_eq!(Matrix::concat_rows(&member).unwrap(), gathered);
        }
        assert_eq!(led.worker(2).total(GroupKind::SpAg, CollectiveKind::AllGather).elements, 18);
    }

    #[test]
    fn all_reduce_cancels() {
        let a = init_weights(7, (2, 3));
        let neg = a.map(|v| -v);
        let mut led = Ledgers::new(2);
        let out = all_reduce(&[0, 1], GroupKind::Tp, vec![a, neg], &mut led).unwrap();
        assert!(out.iter().all(|m| m.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn all_reduce_singleton_unchanged() {
        let a = init_weights(8, (2, 2));
        let out = all_reduce(&[0], GroupKind::Tp, vec![a.clone()], &mut Ledgers::new(1)).unwrap();
        assert_eq!(out, vec![a]);
    }

    #[test]
    fn all_reduce_matches_sequential_sum() {
        let inputs: Vec<Matrix> = (0..4).map(|i| init_weights(20 + i, (3, 4))).collect();
        let mut expect = vec![0.0f32; 12];
        for t in &inputs {
            for (e, v) in expect.iter_mut().zip(t.data()) {
                *e += *v;
            }
        }
        let mut led = Ledgers::new(4);
        let out = all_reduce(&[0, 1, 2, 3], GroupKind::Tp, inputs, &mut led).unwrap();
        for m in &out {
            assert_eq!(m.data(), expect.as_slice());
        }
        // 12 elements over 4 members: 2 * 3/4 * 12 = 18 each.
        for w in 0..4 {
            assert_eq!(led.worker(w).total(GroupKind::Tp, CollectiveKind::AllReduce).elements, 18);
        }
    }

    #[test]
    fn all_reduce_rejects_shape_mismatch() {
        let err = all_reduce(
            &[0, 1],
            GroupKind::Tp,
            vec![Matrix::zeros(1, 2), Matrix::zeros(2, 1)],
            &mut Ledgers::new(2),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Protocol(_)));
    }

    #[test]
    fn ring_volume_totals() {
        for n in [0usize, 1, 7, 12, 100] {
            for g in 1..7 {
                let total: usize = (0..g).map(|r| ring_sent(n, g, r)).sum();
                assert_eq!(total, 2 * (g - 1) * n, "n={n} g={g}");
            }
        }
    }

    #[test]
    fn layer_tags_and_dump() {
        let mut led = Ledgers::new(2);
        led.set_layer(Some(1));
        all_reduce(&[0, 1], GroupKind::Tp, vec![Matrix::zeros(2, 2); 2], &mut led).unwrap();
        assert_eq!(led.worker(1).at_layer(GroupKind::Tp, CollectiveKind::AllReduce, 1).calls, 1);
        assert_eq!(led.worker(1).at_layer(GroupKind::Tp, CollectiveKind::AllReduce, 0).calls, 0);
        let csv = led.dump_csv();
        assert!(csv.starts_with("worker,group,collective,layer,calls,elements\n"));
        assert!(csv.contains("0,TP,all_reduce,1,1,4"));
    }

    #[test]
    fn threaded_rendezvous_matches_lockstep() {
        let g = 4;
        let shards: Vec<Vec<Matrix>> = (0..g)
            .map(|i| (0..g).map(|j| init_weights((50 + i * g + j) as u64, (2, 2))).collect())
            .collect();
        let expect = all_to_all(&[0, 1, 2, 3], GroupKind::Sp, shards.clone(), &mut Ledgers::new(g)).unwrap();
        let rv = Arc::new(Rendezvous::new(g, Duration::from_secs(5)));
        let handles: Vec<_> = shards
            .into_iter()
            .enumerate()
            .map(|(rank, mine)| {
                let rv = Arc::clone(&rv);
                std::thread::spawn(move || rv.all_to_all(rank, mine))
            })
            .collect();
        for (rank, h) in handles.into_iter().enumerate() {
            assert_eq!(h.join().unwrap().unwrap(), expect[rank]);
        }
    }

    #[test]
    fn missing_member_times_out() {
        let rv = Rendezvous::new(2, Duration::from_millis(50));
        let err = rv.all_to_all(0, vec![Matrix::zeros(1, 1); 2]).unwrap_err();
        assert!(matches!(err, Error::Protocol(_)));
    }
}
