//! Worker groups and attention-head placement.
//!
//! Workers are numbered TP-major: ranks `0..tp` form the first TP group, so
//! worker `w` has `tp_rank = w % tp` and `sp_rank = w / tp`. A TP rank owns a
//! contiguous block of `h / tp` query heads (in the layout's head order) and
//! the SP all-to-all splits that block again into `sp` sub-blocks.

use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, ParallelConfig};
use crate::error::{Error, Result};

/// How the K/V columns reach the head-parallel layout after the QKV
/// projection.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum KvRouting {
    /// Each SP rank receives a disjoint block of the TP rank's KV heads via
    /// the same all-to-all that moves the query heads.
    Partitioned,
    /// More SP ranks than KV heads: an all-to-all inside each `aa` group
    /// followed by an all-gather inside each `ag` group replicates every KV
    /// head across the SP ranks of its GQA group. Groups hold worker ids.
    Replicated {
        aa_size: usize,
        ag_size: usize,
        aa_groups: Vec<Vec<usize>>,
        ag_groups: Vec<Vec<usize>>,
    },
}

/// Everything an executor needs to place work on workers for one parallel
/// configuration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub sp: usize,
    pub tp: usize,
    pub tp_groups: Vec<Vec<usize>>,
    pub sp_groups: Vec<Vec<usize>>,
    /// Query heads in the order the TP column partition consumes them.
    pub head_order: Vec<usize>,
    pub kv_routing: KvRouting,
    tp_rank: Vec<usize>,
    sp_rank: Vec<usize>,
    tp_group_of: Vec<usize>,
    sp_group_of: Vec<usize>,
    q_heads: Vec<Vec<usize>>,
    kv_heads: Vec<Vec<usize>>,
    tp_q_heads: Vec<Vec<usize>>,
    tp_kv_heads: Vec<Vec<usize>>,
}

impl Layout {
    /// Builds a layout from explicit groups. The position of a worker in its
    /// TP group is its TP rank; likewise for SP.
    pub fn new(
        mc: &ModelConfig,
        tp_groups: Vec<Vec<usize>>,
        sp_groups: Vec<Vec<usize>>,
        head_order: Vec<usize>,
    ) -> Result<Self> {
        mc.validate()?;
        let tp = tp_groups.first().map_or(0, Vec::len);
        let sp = sp_groups.first().map_or(0, Vec::len);
        let p = tp * sp;
        if p == 0 {
            return Err(Error::config("empty worker groups"));
        }
        check_partition(&tp_groups, p, "TP")?;
        check_partition(&sp_groups, p, "SP")?;
        let mut sorted = head_order.clone();
        sorted.sort_unstable();
        if sorted != (0..mc.q_heads).collect::<Vec<_>>() {
            return Err(Error::config("head order is not a permutation of the query heads"));
        }
        if mc.q_heads % p != 0 {
            return Err(Error::unsupported(format!(
                "{} query heads cannot be split evenly over {p} workers",
                mc.q_heads
            )));
        }

        let mut tp_rank = vec![0; p];
        let mut tp_group_of = vec![0; p];
        for (g, group) in tp_groups.iter().enumerate() {
            for (r, &w) in group.iter().enumerate() {
                tp_rank[w] = r;
                tp_group_of[w] = g;
            }
        }
        let mut sp_rank = vec![0; p];
        let mut sp_group_of = vec![0; p];
        for (g, group) in sp_groups.iter().enumerate() {
            for (r, &w) in group.iter().enumerate() {
                sp_rank[w] = r;
                sp_group_of[w] = g;
            }
        }
        // Members of one SP group must share a TP rank so that they hold the
        // same column block of the QKV projection.
        for group in &sp_groups {
            if group.iter().any(|&w| tp_rank[w] != tp_rank[group[0]]) {
                return Err(Error::config("SP group spans several TP ranks"));
            }
        }

        let per_tp = mc.q_heads / tp;
        let per_worker = mc.q_heads / p;
        let tp_q_heads: Vec<Vec<usize>> = (0..tp)
            .map(|t| head_order[t * per_tp..(t + 1) * per_tp].to_vec())
            .collect();
        let tp_kv_heads: Vec<Vec<usize>> =
            tp_q_heads.iter().map(|qs| kv_heads_for(mc, qs)).collect();
        let q_heads: Vec<Vec<usize>> = (0..p)
            .map(|w| {
                let s = sp_rank[w];
                tp_q_heads[tp_rank[w]][s * per_worker..(s + 1) * per_worker].to_vec()
            })
            .collect();
        let kv_heads: Vec<Vec<usize>> = q_heads.iter().map(|qs| kv_heads_for(mc, qs)).collect();

        let kv_tp = tp_kv_heads[0].len();
        if tp_kv_heads.iter().any(|k| k.len() != kv_tp) {
            return Err(Error::unsupported("TP ranks hold different numbers of KV heads"));
        }
        let kv_routing = if kv_tp % sp == 0 {
            let chunk = kv_tp / sp;
            for w in 0..p {
                let expect = &tp_kv_heads[tp_rank[w]][sp_rank[w] * chunk..(sp_rank[w] + 1) * chunk];
                if kv_heads[w] != expect {
                    return Err(Error::unsupported(format!(
                        "worker {w}: query heads {:?} do not line up with KV block {expect:?}",
                        q_heads[w]
                    )));
                }
            }
            KvRouting::Partitioned
        } else if sp % kv_tp == 0 {
            let ag_size = sp / kv_tp;
            for w in 0..p {
                let expect = [tp_kv_heads[tp_rank[w]][sp_rank[w] / ag_size]];
                if kv_heads[w] != expect {
                    return Err(Error::unsupported(format!(
                        "worker {w}: query heads {:?} straddle GQA groups under replication",
                        q_heads[w]
                    )));
                }
            }
            let (aa, ag) = replication_groups(kv_tp, sp)?;
            let map = |groups: Vec<Vec<usize>>| -> Vec<Vec<usize>> {
                sp_groups
                    .iter()
                    .flat_map(|sg| {
                        groups
                            .iter()
                            .map(|g| g.iter().map(|&r| sg[r]).collect())
                            .collect::<Vec<_>>()
                    })
                    .collect()
            };
            KvRouting::Replicated {
                aa_size: kv_tp,
                ag_size,
                aa_groups: map(aa),
                ag_groups: map(ag),
            }
        } else {
            return Err(Error::unsupported(format!(
                "SP degree {sp} and {kv_tp} KV heads per TP rank do not divide each other"
            )));
        };

        Ok(Self {
            sp,
            tp,
            tp_groups,
            sp_groups,
            head_order,
            kv_routing,
            tp_rank,
            sp_rank,
            tp_group_of,
            sp_group_of,
            q_heads,
            kv_heads,
            tp_q_heads,
            tp_kv_heads,
        })
    }

    pub fn p(&self) -> usize {
        self.sp * self.tp
    }

    pub fn tp_rank(&self, worker: usize) -> usize {
        self.tp_rank[worker]
    }

    pub fn sp_rank(&self, worker: usize) -> usize {
        self.sp_rank[worker]
    }

    pub fn tp_group_of(&self, worker: usize) -> &[usize] {
        &self.tp_groups[self.tp_group_of[worker]]
    }

    pub fn sp_group_of(&self, worker: usize) -> &[usize] {
        &self.sp_groups[self.sp_group_of[worker]]
    }

    /// Query heads whose attention runs on `worker`, in layout order.
    pub fn q_heads(&self, worker: usize) -> &[usize] {
        &self.q_heads[worker]
    }

    /// KV heads `worker` holds in its cache (ascending).
    pub fn kv_heads(&self, worker: usize) -> &[usize] {
        &self.kv_heads[worker]
    }

    /// Query heads in the QKV column shard of `worker` (its TP rank's block).
    pub fn shard_q_heads(&self, worker: usize) -> &[usize] {
        &self.tp_q_heads[self.tp_rank[worker]]
    }

    /// KV heads whose projection `worker` computes before any SP exchange.
    pub fn shard_kv_heads(&self, worker: usize) -> &[usize] {
        &self.tp_kv_heads[self.tp_rank[worker]]
    }

    /// Owning worker of every query head.
    pub fn head_owner(&self) -> Vec<usize> {
        let mut owner = vec![0; self.head_order.len()];
        for (w, heads) in self.q_heads.iter().enumerate() {
            for &q in heads {
                owner[q] = w;
            }
        }
        owner
    }

    /// Lowest-ranked worker holding each KV head; the authoritative replica.
    pub fn kv_owner(&self, kv_heads: usize) -> Vec<usize> {
        let mut owner = vec![usize::MAX; kv_heads];
        for (w, heads) in self.kv_heads.iter().enumerate() {
            for &k in heads {
                owner[k] = owner[k].min(w);
            }
        }
        owner
    }
}

fn kv_heads_for(mc: &ModelConfig, q_heads: &[usize]) -> Vec<usize> {
    let mut kv: Vec<usize> = q_heads.iter().map(|&q| mc.kv_head_of(q)).collect();
    kv.sort_unstable();
    kv.dedup();
    kv
}

fn check_partition(groups: &[Vec<usize>], p: usize, what: &str) -> Result<()> {
    let size = groups[0].len();
    let mut seen = vec![false; p];
    for g in groups {
        if g.len() != size {
            return Err(Error::config(format!("{what} groups differ in size")));
        }
        for &w in g {
            if w >= p || seen[w] {
                return Err(Error::config(format!("{what} groups do not partition 0..{p}")));
            }
            seen[w] = true;
        }
    }
    if seen.iter().any(|s| !s) {
        return Err(Error::config(format!("{what} groups do not cover 0..{p}")));
    }
    Ok(())
}

/// TP groups are consecutive blocks of `tp` workers; SP groups stride across
/// them.
pub fn standard_groups(pc: &ParallelConfig) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
    let (sp, tp) = (pc.sp, pc.tp);
    let tp_groups = (0..sp)
        .map(|s| (0..tp).map(|t| s * tp + t).collect())
        .collect();
    let sp_groups = (0..tp)
        .map(|t| (0..sp).map(|s| s * tp + t).collect())
        .collect();
    (tp_groups, sp_groups)
}

/// SP groups concatenated in SP-major order: the rank order the shift
/// configuration uses so it lands on the base configuration's heads.
pub fn sp_tp_order(pc: &ParallelConfig) -> Vec<usize> {
    standard_groups(pc).1.concat()
}

/// Splits `sp` SP ranks into all-to-all and all-gather groups for KV
/// replication when each TP rank holds `kv_heads` KV heads. Returned groups
/// hold SP ranks. All-to-all groups stride across consecutive blocks; the
/// all-gather groups are those blocks.
pub fn replication_groups(kv_heads: usize, sp: usize) -> Result<(Vec<Vec<usize>>, Vec<Vec<usize>>)> {
    if kv_heads == 0 || sp == 0 {
        return Err(Error::config("kv heads and sp must be positive"));
    }
    let aa = kv_heads.min(sp);
    if sp % aa != 0 || kv_heads % aa != 0 {
        return Err(Error::unsupported(format!(
            "SP degree {sp} is not compatible with {kv_heads} KV heads"
        )));
    }
    let ag = sp / aa;
    let aa_groups = (0..ag).map(|b| (0..aa).map(|a| a * ag + b).collect()).collect();
    let ag_groups = (0..aa).map(|a| (0..ag).map(|b| a * ag + b).collect()).collect();
    Ok((aa_groups, ag_groups))
}

/// All-to-all and all-gather groups for replicating the model's KV heads
/// across `sp` ranks (no TP).
pub fn kv_groups(mc: &ModelConfig, sp: usize) -> Result<(Vec<Vec<usize>>, Vec<Vec<usize>>)> {
    mc.validate()?;
    replication_groups(mc.kv_heads, sp)
}

/// Where each head lands in the worker-major slot order of a full-TP
/// configuration: entry `j` is the slot (`owner * h/p + offset`) that head
/// `j` occupies under the base configuration. Loading full-TP shards by slot
/// keeps every head on the worker that already caches it.
pub fn head_permutation(mc: &ModelConfig, pc: &ParallelConfig) -> Result<Vec<usize>> {
    let (tp_groups, sp_groups) = standard_groups(pc);
    let base = Layout::new(mc, tp_groups, sp_groups, (0..mc.q_heads).collect())?;
    Ok(permutation_of(&base))
}

fn permutation_of(base: &Layout) -> Vec<usize> {
    let per_worker = base.head_order.len() / base.p();
    let mut perm = vec![0; base.head_order.len()];
    for w in 0..base.p() {
        for (offset, &q) in base.q_heads(w).iter().enumerate() {
            perm[q] = w * per_worker + offset;
        }
    }
    perm
}

/// Inverse of a permutation: `inv[perm[i]] == i`.
pub fn invert(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Base and shift layouts for one deployment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    pub model: ModelConfig,
    pub parallel: ParallelConfig,
    pub base: Layout,
    pub shift: Layout,
    pub sp_tp_order: Vec<usize>,
    pub permutation: Vec<usize>,
}

impl Topology {
    pub fn build(mc: &ModelConfig, pc: &ParallelConfig) -> Result<Self> {
        mc.validate()?;
        let (tp_groups, sp_groups) = standard_groups(pc);
        let base = Layout::new(mc, tp_groups, sp_groups, (0..mc.q_heads).collect())?;
        let permutation = permutation_of(&base);
        let shift = shift_layout(mc, pc.p(), invert(&permutation))?;
        Ok(Self {
            model: *mc,
            parallel: *pc,
            base,
            shift,
            sp_tp_order: sp_tp_order(pc),
            permutation,
        })
    }

    pub fn p(&self) -> usize {
        self.parallel.p()
    }

    pub fn tp_groups(&self) -> &[Vec<usize>] {
        &self.base.tp_groups
    }

    pub fn sp_groups(&self) -> &[Vec<usize>] {
        &self.base.sp_groups
    }

    /// Full-TP layout that ignores the base head order: plain rank `w` takes
    /// head block `w`. Only useful to demonstrate why the permutation matters.
    pub fn unpermuted_shift(&self) -> Result<Layout> {
        shift_layout(&self.model, self.p(), (0..self.model.q_heads).collect())
    }

    /// Full-TP layout whose TP group is `sp_tp_order` with heads in natural
    /// order. Equivalent to [`Topology::shift`] by construction.
    pub fn sp_tp_shift(&self) -> Result<Layout> {
        let p = self.p();
        Layout::new(
            &self.model,
            vec![self.sp_tp_order.clone()],
            (0..p).map(|w| vec![w]).collect(),
            (0..self.model.q_heads).collect(),
        )
    }

    /// Human-readable dump used by the CLI and golden tests.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        let pc = &self.parallel;
        let _ = writeln!(out, "topology sp={} tp={} p={}", pc.sp, pc.tp, pc.p());
        let mc = &self.model;
        let _ = writeln!(
            out,
            "model layers={} hidden={} q_heads={} kv_heads={} head_dim={}",
            mc.layers, mc.hidden, mc.q_heads, mc.kv_heads, mc.head_dim
        );
        let _ = writeln!(out, "TP: {}", groups_str(self.tp_groups()));
        let _ = writeln!(out, "SP: {}", groups_str(self.sp_groups()));
        let _ = writeln!(out, "SP_TP: {}", groups_str(&[self.sp_tp_order.clone()]));
        let _ = writeln!(out, "head_order: {}", tuple_str(&self.permutation));
        write_layout(&mut out, "base", &self.base);
        write_layout(&mut out, "shift", &self.shift);
        out
    }
}

fn shift_layout(mc: &ModelConfig, p: usize, head_order: Vec<usize>) -> Result<Layout> {
    Layout::new(
        mc,
        vec![(0..p).collect()],
        (0..p).map(|w| vec![w]).collect(),
        head_order,
    )
}

fn write_layout(out: &mut String, name: &str, layout: &Layout) {
    let _ = write!(out, "{name} q_heads:");
    for w in 0..layout.p() {
        let _ = write!(out, " w{w}={:?}", layout.q_heads(w));
    }
    out.push('\n');
    let _ = write!(out, "{name} kv_heads:");
    for w in 0..layout.p() {
        let _ = write!(out, " w{w}={:?}", layout.kv_heads(w));
    }
    out.push('\n');
    match &layout.kv_routing {
        KvRouting::Partitioned => {
            let _ = writeln!(out, "{name} kv: partitioned");
        }
        KvRouting::Replicated {
            aa_size,
            ag_size,
            aa_groups,
            ag_groups,
        } => {
            let _ = writeln!(
                out,
                "{name} kv: replicated SP_AA={aa_size} SP_AG={ag_size} AA: {} AG: {}",
                groups_str(aa_groups),
                groups_str(ag_groups)
            );
        }
    }
}

fn groups_str(groups: &[Vec<usize>]) -> String {
    let inner: Vec<String> = groups.iter().map(|g| format!("{g:?}")).collect();
    format!("[{}]", inner.join(", "))
}

fn tuple_str(values: &[usize]) -> String {
    let inner: Vec<String> = values.iter().map(usize::to_string).collect();
    format!("({})", inner.join(", "))
}

impl fmt::Display for Topology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.dump())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pc(sp: usize, tp: usize) -> ParallelConfig {
        ParallelConfig::new(sp, tp).unwrap()
    }

    fn hex_mha() -> ModelConfig {
        ModelConfig::HEX
    }

    #[test]
    fn six_worker_groups() {
        let topo = Topology::build(&hex_mha(), &pc(3, 2)).unwrap();
        assert_eq!(topo.tp_groups(), &[vec![0, 1], vec![2, 3], vec![4, 5]]);
        assert_eq!(topo.sp_groups(), &[vec![0, 2, 4], vec![1, 3, 5]]);
        assert_eq!(topo.sp_tp_order, vec![0, 2, 4, 1, 3, 5]);
    }

    #[test]
    fn degenerate_sp() {
        let mc = ModelConfig::TINY;
        let topo = Topology::build(&mc, &pc(1, 4)).unwrap();
        assert_eq!(topo.tp_groups(), &[vec![0, 1, 2, 3]]);
        assert_eq!(topo.sp_groups(), &[vec![0], vec![1], vec![2], vec![3]]);
        assert_eq!(topo.sp_tp_order, vec![0, 1, 2, 3]);
    }

    #[test]
    fn groups_match_grid_enumeration() {
        let (sp, tp) = (4, 2);
        let (tp_groups, sp_groups) = standard_groups(&pc(sp, tp));
        // Enumerate the (sp_rank, tp_rank) grid directly.
        for s in 0..sp {
            for t in 0..tp {
                let w = s * tp + t;
                assert_eq!(tp_groups[s][t], w);
                assert_eq!(sp_groups[t][s], w);
            }
        }
        let mut all: Vec<usize> = tp_groups.concat();
        all.sort_unstable();
        assert_eq!(all, (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn six_head_permutation() {
        let perm = head_permutation(&hex_mha(), &pc(3, 2)).unwrap();
        assert_eq!(perm, vec![0, 2, 4, 1, 3, 5]);
    }

    #[test]
    fn pure_tp_is_identity() {
        let perm = head_permutation(&hex_mha(), &pc(1, 6)).unwrap();
        assert_eq!(perm, (0..6).collect::<Vec<_>>());
    }

    /// Moves labelled head columns through the TP column split and the SP
    /// all-to-all by hand and records where each head ends up.
    fn simulate_head_labels(h: usize, sp: usize, tp: usize) -> Vec<usize> {
        let p = sp * tp;
        let per_worker = h / p;
        // After the column split, worker (s, t) holds labels t*h/tp.. for its
        // row chunk; the all-to-all hands sub-block s of those columns to SP
        // rank s.
        let mut received: Vec<Vec<usize>> = vec![Vec::new(); p];
        for t in 0..tp {
            let cols: Vec<usize> = (t * h / tp..(t + 1) * h / tp).collect();
            for dst in 0..sp {
                let w = dst * tp + t;
                received[w] = cols[dst * per_worker..(dst + 1) * per_worker].to_vec();
            }
        }
        let mut slot_of = vec![0; h];
        for (w, labels) in received.iter().enumerate() {
            for (off, &label) in labels.iter().enumerate() {
                slot_of[label] = w * per_worker + off;
            }
        }
        slot_of
    }

    #[test]
    fn permutation_matches_label_simulation() {
        let mc = ModelConfig::GQA;
        for (sp, tp) in [(2, 2), (4, 2), (2, 4), (8, 1), (1, 8)] {
            let perm = head_permutation(&mc, &pc(sp, tp)).unwrap();
            assert_eq!(perm, simulate_head_labels(mc.q_heads, sp, tp), "sp={sp} tp={tp}");
        }
        let perm = head_permutation(&ModelConfig::GQA.with_kv_heads(8), &pc(2, 2)).unwrap();
        assert_eq!(perm, vec![0, 1, 4, 5, 2, 3, 6, 7]);
    }

    #[test]
    fn shift_layout_owns_base_heads() {
        for (mc, sp, tp) in [
            (hex_mha(), 3, 2),
            (ModelConfig::GQA, 2, 2),
            (ModelConfig::GQA, 4, 2),
            (ModelConfig::GQA, 2, 4),
            (ModelConfig::GQA, 8, 1),
        ] {
            let topo = Topology::build(&mc, &pc(sp, tp)).unwrap();
            let base = topo.base.head_owner();
            assert_eq!(base, topo.shift.head_owner());
            assert_eq!(base, topo.sp_tp_shift().unwrap().head_owner());
            let per_worker = mc.q_heads / topo.p();
            for q in 0..mc.q_heads {
                assert_eq!(base[q], topo.permutation[q] / per_worker);
            }
            for w in 0..topo.p() {
                assert_eq!(topo.base.kv_heads(w), topo.shift.kv_heads(w));
            }
        }
    }

    #[test]
    fn unpermuted_shift_breaks_ownership() {
        let topo = Topology::build(&hex_mha(), &pc(3, 2)).unwrap();
        let naive = topo.unpermuted_shift().unwrap();
        assert_ne!(naive.head_owner(), topo.base.head_owner());
    }

    #[test]
    fn replication_groups_two_kv_heads_four_ranks() {
        let (aa, ag) = kv_groups(&ModelConfig::TINY, 4).unwrap();
        assert_eq!(aa, vec![vec![0, 2], vec![1, 3]]);
        assert_eq!(ag, vec![vec![0, 1], vec![2, 3]]);
    }

    #[test]
    fn no_replication_when_sp_equals_kv_heads() {
        let mc = ModelConfig::GQA.with_kv_heads(4);
        let (aa, ag) = kv_groups(&mc, 4).unwrap();
        assert_eq!(aa, vec![vec![0, 1, 2, 3]]);
        assert_eq!(ag, vec![vec![0], vec![1], vec![2], vec![3]]);
    }

    #[test]
    fn replication_reaches_every_gqa_member_once() {
        let (kv, sp) = (4, 8);
        let (aa, ag) = replication_groups(kv, sp).unwrap();
        let ag_size = sp / kv;
        // Rank r starts with rows of every KV head; after the all-to-all it
        // holds head (index within its aa group), after the all-gather it
        // holds that head's rows from every rank. Count deliveries.
        let mut delivered = vec![vec![0usize; sp]; sp]; // [dst][src chunk]
        for group in &aa {
            for (a, &dst) in group.iter().enumerate() {
                let head = a;
                assert_eq!(head, dst / ag_size);
                for &src in group {
                    // dst now holds head `a` for src's chunk; spread it over
                    // the all-gather group.
                    let ag_group = &ag[dst / ag_size];
                    for &peer in ag_group {
                        delivered[peer][src] += 1;
                    }
                }
            }
        }
        for row in &delivered {
            assert!(row.iter().all(|&c| c == 1));
        }
        for r in 0..sp {
            assert_eq!(ag.iter().filter(|g| g.contains(&r)).count(), 1);
            assert_eq!(aa.iter().filter(|g| g.contains(&r)).count(), 1);
        }
    }

    #[test]
    fn indivisible_replication_is_rejected() {
        let mc = ModelConfig::GQA.with_kv_heads(4);
        assert!(matches!(kv_groups(&mc, 6), Err(Error::Unsupported(_))));
    }

    #[test]
    fn heads_must_divide_over_workers() {
        let err = Topology::build(&ModelConfig::TINY, &pc(2, 4)).unwrap_err();
        assert!(matches!(err, Error::Unsupported(_)));
    }

    #[test]
    fn replication_with_tp_maps_groups_to_workers() {
        let topo = Topology::build(&ModelConfig::GQA, &pc(4, 2)).unwrap();
        match &topo.base.kv_routing {
            KvRouting::Replicated { aa_size, ag_size, ag_groups, .. } => {
                assert_eq!((*aa_size, *ag_size), (1, 4));
                assert_eq!(ag_groups, &vec![vec![0, 2, 4, 6], vec![1, 3, 5, 7]]);
            }
            other => panic!("expected replication, got {other:?}"),
        }
    }

    #[test]
    fn dump_lists_groups() {
        let topo = Topology::build(&hex_mha(), &pc(3, 2)).unwrap();
        let dump = topo.dump();
        assert!(dump.contains("TP: [[0, 1], [2, 3], [4, 5]]"));
        assert!(dump.contains("SP: [[0, 2, 4], [1, 3, 5]]"));
        assert!(dump.contains("SP_TP: [[0, 2, 4, 1, 3, 5]]"));
        assert!(dump.contains("head_order: (0, 2, 4, 1, 3, 5)"));
    }

    proptest::proptest! {
        #[test]
        fn groups_partition_workers(sp in 1usize..6, tp in 1usize..6) {
            let (tp_groups, sp_groups) = standard_groups(&pc(sp, tp));
            for groups in [&tp_groups, &sp_groups] {
                let mut all = groups.concat();
                all.sort_unstable();
                proptest::prop_assert_eq!(all, (0..sp * tp).collect::<Vec<_>>());
            }
            let mut order = sp_tp_order(&pc(sp, tp));
            order.sort_unstable();
            proptest::prop_assert_eq!(order, (0..sp * tp).collect::<Vec<_>>());
        }

        #[test]
        fn replication_groups_partition(kv in 1usize..5, mult in 1usize..4) {
            let sp = kv * mult;
            let (aa, ag) = replication_groups(kv, sp).unwrap();
            for groups in [&aa, &ag] {
                let mut all = groups.concat();
                all.sort_unstable();
                proptest::prop_assert_eq!(all, (0..sp).collect::<Vec<_>>());
            }
        }
    }
}
