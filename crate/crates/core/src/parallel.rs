//! Combined sequence and tensor parallel forward pass over simulated workers.
//!
//! Per layer, each worker projects its row chunk onto its TP column block,
//! the SP all-to-all turns the sequence-sharded QKV into a head-sharded
//! layout, attention runs on the worker's heads over the whole batch, a second
//! all-to-all restores the sequence sharding, and the O projection and MLP
//! finish with TP all-reduces. When there are more SP ranks than KV heads the
//! KV columns take the replication path instead of the plain all-to-all.
//!
//! SP exchanges are skipped when `sp == 1` (there is no sequence split to
//! undo). TP all-reduces are always issued, including on single-member groups,
//! so the ledger shows two per layer for every layout.

use std::collections::BTreeMap;
use std::ops::Range;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::collectives::{all_gather, all_reduce, all_to_all, GroupKind, Ledgers};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::{attend, silu, ShardedKvCache, TokenId, Weights};
use crate::tensor::Matrix;
use crate::topology::{KvRouting, Layout};

pub type RequestId = u64;

/// One token of a batch: which request it belongs to and where it sits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchRow {
    pub request: RequestId,
    pub token: TokenId,
    pub position: usize,
    /// Whether logits are needed for this row (last prompt token or a decode
    /// token).
    pub sample: bool,
}

/// Rows of one engine step, possibly from several requests. Rows of the same
/// request must appear in increasing position order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Batch {
    pub rows: Vec<BatchRow>,
}

impl Batch {
    /// A whole prompt for `request`, sampling only the last row.
    pub fn prompt(request: RequestId, tokens: &[TokenId], start: usize) -> Self {
        let n = tokens.len();
        Self {
            rows: tokens
                .iter()
                .enumerate()
                .map(|(i, &token)| BatchRow {
                    request,
                    token,
                    position: start + i,
                    sample: i + 1 == n,
                })
                .collect(),
        }
    }

    pub fn extend(&mut self, other: Batch) {
        self.rows.extend(other.rows);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// A batch rounded up to a multiple of the SP degree; `None` rows are padding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PaddedBatch {
    pub rows: Vec<Option<BatchRow>>,
    pub sp: usize,
}

impl PaddedBatch {
    pub fn mask(&self) -> Vec<bool> {
        self.rows.iter().map(Option::is_some).collect()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Rows each SP rank processes.
    pub fn rows_per_rank(&self) -> Vec<usize> {
        let chunk = self.rows.len() / self.sp;
        vec![chunk; self.sp]
    }

    pub fn padding(&self) -> usize {
        self.rows.iter().filter(|r| r.is_none()).count()
    }
}

/// Pads `batch` with empty rows up to the next multiple of `sp`.
pub fn pad_batch(batch: &Batch, sp: usize) -> PaddedBatch {
    let sp = sp.max(1);
    let n = batch.rows.len();
    let padded = n.div_ceil(sp) * sp;
    let mut rows: Vec<Option<BatchRow>> = batch.rows.iter().copied().map(Some).collect();
    rows.resize(padded, None);
    PaddedBatch { rows, sp }
}

/// Multiply-accumulate counts of one worker.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComputeTally {
    /// QKV, O and MLP projections.
    pub linear: u64,
    /// Score and value products of attention.
    pub attention: u64,
    /// Output projection onto the vocabulary.
    pub head: u64,
}

impl ComputeTally {
    pub fn total(&self) -> u64 {
        self.linear + self.attention + self.head
    }

    pub fn add(&mut self, other: &ComputeTally) {
        self.linear += other.linear;
        self.attention += other.attention;
        self.head += other.head;
    }
}

/// Weight shards of one transformer layer on one worker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerShard {
    /// Columns `[Q heads | K heads | V heads]` of the worker's TP block.
    pub qkv: Matrix,
    /// Rows of O for the TP block's query heads.
    pub o: Matrix,
    pub mlp_up: Matrix,
    pub mlp_down: Matrix,
}

impl LayerShard {
    pub fn elements(&self) -> usize {
        self.qkv.len() + self.o.len() + self.mlp_up.len() + self.mlp_down.len()
    }
}

/// Everything a worker owns for one layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerState {
    pub worker: usize,
    pub sp_rank: usize,
    pub tp_rank: usize,
    pub layers: Vec<LayerShard>,
}

impl WorkerState {
    pub fn resident_elements(&self) -> usize {
        self.layers.iter().map(LayerShard::elements).sum()
    }
}

/// KV caches of every worker, keyed by request.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterCache {
    layers: usize,
    head_dim: usize,
    heads: Vec<Vec<usize>>,
    owner: BTreeMap<usize, usize>,
    workers: Vec<BTreeMap<RequestId, ShardedKvCache>>,
}

impl ClusterCache {
    /// Empty caches shaped after the KV heads `layout` places on each worker.
    pub fn new(mc: &ModelConfig, layout: &Layout) -> Self {
        let p = layout.p();
        let heads: Vec<Vec<usize>> = (0..p).map(|w| layout.kv_heads(w).to_vec()).collect();
        let owner = layout.kv_owner(mc.kv_heads).into_iter().enumerate().collect();
        Self {
            layers: mc.layers,
            head_dim: mc.head_dim,
            heads,
            owner,
            workers: vec![BTreeMap::new(); p],
        }
    }

    pub fn workers(&self) -> usize {
        self.workers.len()
    }

    pub fn heads(&self, worker: usize) -> &[usize] {
        &self.heads[worker]
    }

    pub fn owner(&self) -> &BTreeMap<usize, usize> {
        &self.owner
    }

    pub fn get(&self, worker: usize, request: RequestId) -> Option<&ShardedKvCache> {
        self.workers[worker].get(&request)
    }

    pub fn requests(&self, worker: usize) -> impl Iterator<Item = RequestId> + '_ {
        self.workers[worker].keys().copied()
    }

    /// Cached length of `request` (0 if unknown).
    pub fn len_of(&self, request: RequestId) -> usize {
        self.workers
            .first()
            .and_then(|w| w.get(&request))
            .map_or(0, ShardedKvCache::len)
    }

    pub fn remove(&mut self, request: RequestId) {
        for w in &mut self.workers {
            w.remove(&request);
        }
    }

    fn entry(&mut self, worker: usize, request: RequestId) -> &mut ShardedKvCache {
        let (layers, hd) = (self.layers, self.head_dim);
        let heads = &self.heads[worker];
        let owner = &self.owner;
        self.workers[worker]
            .entry(request)
            .or_insert_with(|| ShardedKvCache::new(layers, heads, hd, owner.clone()))
    }

    /// Reassembles a single-device cache for `request` from the authoritative
    /// replica of every KV head.
    pub fn reconstruct(&self, request: RequestId) -> Result<ShardedKvCache> {
        let heads: Vec<usize> = self.owner.keys().copied().collect();
        let mut out = ShardedKvCache::new(self.layers, &heads, self.head_dim, self.owner.clone());
        for (&kv, &w) in &self.owner {
            let src = self.workers[w]
                .get(&request)
                .ok_or_else(|| Error::protocol(format!("worker {w} has no cache for request {request}")))?;
            for l in 0..self.layers {
                let hc = src
                    .head(l, kv)
                    .ok_or_else(|| Error::protocol(format!("worker {w} lacks KV head {kv}")))?;
                for (i, &pos) in hc.positions().iter().enumerate() {
                    out.append(l, kv, pos, hc.key(i, self.head_dim), hc.value(i, self.head_dim))?;
                }
            }
        }
        Ok(out)
    }
}

/// Logits for the sampled rows of one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    /// `(request, position)` of every sampled row, in batch order.
    pub sampled: Vec<(RequestId, usize)>,
    pub logits: Matrix,
    pub compute: Vec<ComputeTally>,
    /// Rows after padding.
    pub padded_rows: usize,
}

impl StepOutput {
    /// Greedy token for each sampled row.
    pub fn tokens(&self) -> Vec<TokenId> {
        (0..self.logits.rows())
            .map(|r| self.logits.argmax_row(r) as TokenId)
            .collect()
    }

    fn empty(p: usize, vocab: usize) -> Self {
        Self {
            sampled: Vec::new(),
            logits: Matrix::zeros(0, vocab),
            compute: vec![ComputeTally::default(); p],
            padded_rows: 0,
        }
    }
}

/// Weight shards for one layout plus the replicated embedding tables.
#[derive(Debug, Clone)]
pub struct ParallelExecutor {
    model: ModelConfig,
    layout: Layout,
    workers: Vec<WorkerState>,
    tables: Arc<Weights>,
    fuse_kv: bool,
}

fn head_cols(head: usize, hd: usize) -> Range<usize> {
    head * hd..(head + 1) * hd
}

fn shard_layer(mc: &ModelConfig, layout: &Layout, w: usize, full: &crate::model::LayerWeights) -> LayerShard {
    let hd = mc.head_dim;
    let (h, kvh) = (mc.q_heads, mc.kv_heads);
    let qs = layout.shard_q_heads(w);
    let ks = layout.shard_kv_heads(w);
    let mut cols: Vec<Range<usize>> = qs.iter().map(|&q| head_cols(q, hd)).collect();
    cols.extend(ks.iter().map(|&k| head_cols(h + k, hd)));
    cols.extend(ks.iter().map(|&k| head_cols(h + kvh + k, hd)));
    let o_rows: Vec<Range<usize>> = qs.iter().map(|&q| head_cols(q, hd)).collect();
    let block = mc.mlp_hidden / layout.tp;
    let t = layout.tp_rank(w);
    LayerShard {
        qkv: full.qkv.select_col_ranges(&cols),
        o: full.o.select_row_ranges(&o_rows),
        mlp_up: full.mlp_up.slice_cols(t * block..(t + 1) * block),
        mlp_down: full.mlp_down.slice_rows(t * block..(t + 1) * block),
    }
}

impl ParallelExecutor {
    /// Slices `weights` for `layout`.
    pub fn new(weights: Arc<Weights>, layout: Layout) -> Result<Self> {
        let mc = weights.config;
        if layout.head_order.len() != mc.q_heads {
            return Err(Error::config("layout was built for a different model"));
        }
        if mc.mlp_hidden % layout.tp != 0 {
            return Err(Error::unsupported(format!(
                "MLP width {} does not split over TP={}",
                mc.mlp_hidden, layout.tp
            )));
        }
        let workers = (0..layout.p())
            .map(|w| WorkerState {
                worker: w,
                sp_rank: layout.sp_rank(w),
                tp_rank: layout.tp_rank(w),
                layers: weights.layers.iter().map(|l| shard_layer(&mc, &layout, w, l)).collect(),
            })
            .collect();
        Ok(Self {
            model: mc,
            layout,
            workers,
            tables: weights,
            fuse_kv: false,
        })
    }

    /// Records the replicated KV exchange as one fused ledger entry per layer.
    pub fn with_fused_kv(mut self, fuse: bool) -> Self {
        self.fuse_kv = fuse;
        self
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn model(&self) -> &ModelConfig {
        &self.model
    }

    pub fn workers(&self) -> &[WorkerState] {
        &self.workers
    }

    pub fn weights(&self) -> &Arc<Weights> {
        &self.tables
    }

    /// Sharded layer weights resident on each worker.
    pub fn resident_elements(&self) -> Vec<usize> {
        self.workers.iter().map(WorkerState::resident_elements).collect()
    }

    pub fn new_cache(&self) -> ClusterCache {
        ClusterCache::new(&self.model, &self.layout)
    }

    fn check_cache(&self, caches: &ClusterCache) -> Result<()> {
        if caches.workers() != self.layout.p() {
            return Err(Error::protocol(format!(
                "cache spans {} workers, layout has {}",
                caches.workers(),
                self.layout.p()
            )));
        }
        for w in 0..self.layout.p() {
            if caches.heads(w) != self.layout.kv_heads(w) {
                return Err(Error::protocol(format!(
                    "worker {w}: cache holds KV heads {:?} but this layout attends with {:?}",
                    caches.heads(w),
                    self.layout.kv_heads(w)
                )));
            }
        }
        Ok(())
    }

    /// One engine step over `batch`: the combined SP x TP forward pass.
    pub fn forward(&self, batch: &Batch, caches: &mut ClusterCache, ledgers: &mut Ledgers) -> Result<StepOutput> {
        let mc = &self.model;
        let layout = &self.layout;
        let p = layout.p();
        if ledgers.len() != p {
            return Err(Error::protocol("ledger set does not match worker count"));
        }
        if batch.is_empty() {
            return Ok(StepOutput::empty(p, mc.vocab));
        }
        self.check_cache(caches)?;
        check_batch(batch, caches, mc)?;

        let sp = layout.sp;
        let padded = pad_batch(batch, sp);
        let chunk = padded.len() / sp;
        let hd = mc.head_dim;
        let mut compute = vec![ComputeTally::default(); p];

        // SP.slice of the input embeddings.
        let rows: Vec<(TokenId, usize)> = batch.rows.iter().map(|r| (r.token, r.position)).collect();
        let real = self.tables.embed(&rows)?;
        let mut full = Matrix::zeros(padded.len(), mc.hidden);
        for i in 0..batch.len() {
            full.row_mut(i).copy_from_slice(real.row(i));
        }
        let mut x: Vec<Matrix> = (0..p)
            .map(|w| {
                let s = layout.sp_rank(w);
                full.slice_rows(s * chunk..(s + 1) * chunk)
            })
            .collect();

        for l in 0..mc.layers {
            ledgers.set_layer(Some(l));
            let qkv: Vec<Matrix> = (0..p)
                .map(|w| {
                    let shard = &self.workers[w].layers[l].qkv;
                    compute[w].linear += (chunk * shard.rows() * shard.cols()) as u64;
                    x[w].matmul(shard)
                })
                .collect::<Result<_>>()?;

            let (q, kv) = self.to_head_parallel(qkv, chunk, ledgers)?;

            // Attention on owned heads over every row; cache writes first so
            // rows of one request see each other causally.
            let mut attn = Vec::with_capacity(p);
            for w in 0..p {
                let kv_heads = layout.kv_heads(w);
                let nk = kv_heads.len();
                for (i, row) in padded.rows.iter().enumerate() {
                    let Some(row) = row else { continue };
                    let cache = caches.entry(w, row.request);
                    let kvr = kv[w].row(i);
                    for (j, &k) in kv_heads.iter().enumerate() {
                        cache.append(l, k, row.position, &kvr[j * hd..(j + 1) * hd], &kvr[(nk + j) * hd..(nk + j + 1) * hd])?;
                    }
                }
                let q_heads = layout.q_heads(w);
                let mut out = Matrix::zeros(padded.len(), q_heads.len() * hd);
                for (i, row) in padded.rows.iter().enumerate() {
                    let Some(row) = row else { continue };
                    let cache = caches.get(w, row.request).expect("written above");
                    let qr = q[w].row(i).to_vec();
                    let dst = out.row_mut(i);
                    for (qi, &qh) in q_heads.iter().enumerate() {
                        let head = cache
                            .head(l, mc.kv_head_of(qh))
                            .ok_or_else(|| Error::protocol(format!("worker {w} lacks KV head for query head {qh}")))?;
                        let visible = head.positions().partition_point(|&p| p <= row.position);
                        compute[w].attention += (2 * visible * hd) as u64;
                        attend(&qr[qi * hd..(qi + 1) * hd], head, hd, row.position, &mut dst[qi * hd..(qi + 1) * hd]);
                    }
                }
                attn.push(out);
            }

            // Back to sequence sharding.
            let attn_seq = if sp > 1 {
                let mut out = vec![Matrix::zeros(0, 0); p];
                for group in &layout.sp_groups {
                    let shards = group
                        .iter()
                        .map(|&w| (0..sp).map(|i| attn[w].slice_rows(i * chunk..(i + 1) * chunk)).collect())
                        .collect();
                    let received = all_to_all(group, GroupKind::Sp, shards, ledgers)?;
                    for (&w, parts) in group.iter().zip(received) {
                        out[w] = Matrix::concat_cols(&parts)?;
                    }
                }
                out
            } else {
                attn
            };

            let partial: Vec<Matrix> = (0..p)
                .map(|w| {
                    let o = &self.workers[w].layers[l].o;
                    compute[w].linear += (chunk * o.rows() * o.cols()) as u64;
                    attn_seq[w].matmul(o)
                })
                .collect::<Result<_>>()?;
            self.tp_reduce_into(&mut x, partial, ledgers)?;

            let partial: Vec<Matrix> = (0..p)
                .map(|w| {
                    let shard = &self.workers[w].layers[l];
                    compute[w].linear += (2 * chunk * shard.mlp_up.rows() * shard.mlp_up.cols()) as u64;
                    x[w].matmul(&shard.mlp_up)?.map(silu).matmul(&shard.mlp_down)
                })
                .collect::<Result<_>>()?;
            self.tp_reduce_into(&mut x, partial, ledgers)?;
        }
        ledgers.set_layer(None);

        // Gather only the rows that are sampled.
        let sampled: Vec<(RequestId, usize)> = batch
            .rows
            .iter()
            .filter(|r| r.sample)
            .map(|r| (r.request, r.position))
            .collect();
        let local_rows = |w: usize| -> Vec<usize> {
            let s = layout.sp_rank(w);
            (0..chunk)
                .filter(|&i| padded.rows[s * chunk + i].is_some_and(|r| r.sample))
                .collect()
        };
        let mut gathered = vec![Matrix::zeros(0, mc.hidden); p];
        if sp > 1 {
            for group in &layout.sp_groups {
                let shards = group.iter().map(|&w| x[w].select_rows(&local_rows(w))).collect();
                let received = all_gather(group, GroupKind::Sp, shards, ledgers)?;
                for (&w, parts) in group.iter().zip(received) {
                    gathered[w] = Matrix::concat_rows(&parts)?;
                }
            }
        } else {
            for w in 0..p {
                gathered[w] = x[w].select_rows(&local_rows(w));
            }
        }
        let mut logits: Option<Matrix> = None;
        for w in 0..p {
            compute[w].head += (gathered[w].rows() * mc.hidden * mc.vocab) as u64;
            let lw = gathered[w].matmul(&self.tables.lm_head)?;
            match &logits {
                None => logits = Some(lw),
                Some(first) if *first != lw => {
                    return Err(Error::protocol(format!("worker {w} computed different logits than worker 0")));
                }
                Some(_) => {}
            }
        }
        Ok(StepOutput {
            sampled,
            logits: logits.expect("at least one worker"),
            compute,
            padded_rows: padded.len(),
        })
    }

    /// SP all-to-all (and KV replication when needed) from sequence-sharded
    /// QKV to head-sharded Q and KV over all padded rows. Returns per-worker
    /// `Q` (`n x |q_heads| * hd`) and `[K | V]` (`n x 2 |kv_heads| * hd`).
    fn to_head_parallel(
        &self,
        qkv: Vec<Matrix>,
        chunk: usize,
        ledgers: &mut Ledgers,
    ) -> Result<(Vec<Matrix>, Vec<Matrix>)> {
        let layout = &self.layout;
        let hd = self.model.head_dim;
        let p = layout.p();
        let sp = layout.sp;
        let nq = layout.shard_q_heads(0).len();
        let nk = layout.shard_kv_heads(0).len();
        let q_cols = nq * hd;
        if sp == 1 {
            let split = |m: &Matrix| (m.slice_cols(0..q_cols), m.slice_cols(q_cols..m.cols()));
            return Ok(qkv.iter().map(split).unzip());
        }
        let qpw = nq / sp;
        let mut q_out = vec![Matrix::zeros(0, 0); p];
        let mut kv_out = vec![Matrix::zeros(0, 0); p];
        match &layout.kv_routing {
            KvRouting::Partitioned => {
                let kpw = nk / sp;
                for group in &layout.sp_groups {
                    let shards = group
                        .iter()
                        .map(|&w| {
                            (0..sp)
                                .map(|dst| {
                                    qkv[w].select_col_ranges(&[
                                        dst * qpw * hd..(dst + 1) * qpw * hd,
                                        q_cols + dst * kpw * hd..q_cols + (dst + 1) * kpw * hd,
                                        q_cols + (nk + dst * kpw) * hd..q_cols + (nk + (dst + 1) * kpw) * hd,
                                    ])
                                })
                                .collect()
                        })
                        .collect();
                    let received = all_to_all(group, GroupKind::Sp, shards, ledgers)?;
                    for (&w, parts) in group.iter().zip(received) {
                        let m = Matrix::concat_rows(&parts)?;
                        q_out[w] = m.slice_cols(0..qpw * hd);
                        kv_out[w] = m.slice_cols(qpw * hd..m.cols());
                    }
                }
            }
            KvRouting::Replicated { .. } => {
                for group in &layout.sp_groups {
                    let shards = group
                        .iter()
                        .map(|&w| {
                            (0..sp)
                                .map(|dst| qkv[w].slice_cols(dst * qpw * hd..(dst + 1) * qpw * hd))
                                .collect()
                        })
                        .collect();
                    let received = all_to_all(group, GroupKind::Sp, shards, ledgers)?;
                    for (&w, parts) in group.iter().zip(received) {
                        q_out[w] = Matrix::concat_rows(&parts)?;
                    }
                }
                let local: Vec<Matrix> = qkv.iter().map(|m| m.slice_cols(q_cols..m.cols())).collect();
                kv_out = kv_replicate(layout, &local, hd, chunk, self.fuse_kv, ledgers)?;
            }
        }
        Ok((q_out, kv_out))
    }

    fn tp_reduce_into(&self, x: &mut [Matrix], partial: Vec<Matrix>, ledgers: &mut Ledgers) -> Result<()> {
        let mut partial: Vec<Option<Matrix>> = partial.into_iter().map(Some).collect();
        for group in &self.layout.tp_groups {
            let inputs = group
                .iter()
                .map(|&w| partial[w].take().expect("each worker in one TP group"))
                .collect();
            let reduced = all_reduce(group, GroupKind::Tp, inputs, ledgers)?;
            for (&w, r) in group.iter().zip(reduced) {
                x[w].add_assign(&r)?;
            }
        }
        Ok(())
    }

    /// Prefills `prompt` for `request` and returns the first greedy token.
    pub fn prefill(
        &self,
        request: RequestId,
        prompt: &[TokenId],
        caches: &mut ClusterCache,
        ledgers: &mut Ledgers,
    ) -> Result<(TokenId, StepOutput)> {
        let start = caches.len_of(request);
        let out = self.forward(&Batch::prompt(request, prompt, start), caches, ledgers)?;
        Ok((out.tokens()[0], out))
    }

    /// One decode token for each `(request, last_token)`; positions follow
    /// the cached lengths.
    pub fn decode_step(
        &self,
        active: &[(RequestId, TokenId)],
        caches: &mut ClusterCache,
        ledgers: &mut Ledgers,
    ) -> Result<(Vec<TokenId>, StepOutput)> {
        let batch = decode_batch(active, caches)?;
        let out = self.forward(&batch, caches, ledgers)?;
        Ok((out.tokens(), out))
    }
}

/// Decode rows for the active requests at their next positions.
pub fn decode_batch(active: &[(RequestId, TokenId)], caches: &ClusterCache) -> Result<Batch> {
    let rows = active
        .iter()
        .map(|&(request, token)| {
            let position = caches.len_of(request);
            if position == 0 {
                return Err(Error::config(format!("request {request} has not been prefilled")));
            }
            Ok(BatchRow {
                request,
                token,
                position,
                sample: true,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Batch { rows })
}

fn check_batch(batch: &Batch, caches: &ClusterCache, mc: &ModelConfig) -> Result<()> {
    let mut next: BTreeMap<RequestId, usize> = BTreeMap::new();
    for r in &batch.rows {
        let expect = *next.entry(r.request).or_insert_with(|| caches.len_of(r.request));
        if r.position != expect {
            return Err(Error::protocol(format!(
                "request {}: row at position {} but next position is {expect}",
                r.request, r.position
            )));
        }
        if r.position >= mc.max_context {
            return Err(Error::Capacity {
                needed: r.position + 1,
                limit: mc.max_context,
            });
        }
        next.insert(r.request, expect + 1);
    }
    Ok(())
}

/// KV replication for `SP > KV heads per TP rank`.
///
/// `local[w]` is worker `w`'s `[K | V]` columns for all KV heads of its TP
/// block over its `chunk` rows. An all-to-all inside each `aa` group hands
/// member `a` the rows of KV head `a` from its peers, an all-gather inside
/// each `ag` group spreads those rows to every rank serving the same head,
/// and the received chunks are re-interleaved into sequence order. Returns
/// `[K | V]` of the worker's single KV head over all `sp * chunk` rows.
pub fn kv_replicate(
    layout: &Layout,
    local: &[Matrix],
    head_dim: usize,
    chunk: usize,
    fused: bool,
    ledgers: &mut Ledgers,
) -> Result<Vec<Matrix>> {
    let KvRouting::Replicated {
        aa_size,
        ag_size,
        aa_groups,
        ag_groups,
    } = &layout.kv_routing
    else {
        return Err(Error::unsupported("layout does not replicate KV heads"));
    };
    let (aa_size, ag_size) = (*aa_size, *ag_size);
    let p = layout.p();
    if local.len() != p {
        return Err(Error::protocol("kv_replicate needs one shard per worker"));
    }
    let hd = head_dim;
    let nk = aa_size;
    let mut scratch = Ledgers::new(p);
    let sink: &mut Ledgers = if fused { &mut scratch } else { ledgers };

    let mut stage = vec![Matrix::zeros(0, 0); p];
    for group in aa_groups {
        let shards = group
            .iter()
            .map(|&w| {
                (0..aa_size)
                    .map(|a| local[w].select_col_ranges(&[a * hd..(a + 1) * hd, (nk + a) * hd..(nk + a + 1) * hd]))
                    .collect()
            })
            .collect();
        let received = all_to_all(group, GroupKind::SpAa, shards, sink)?;
        for (&w, parts) in group.iter().zip(received) {
            stage[w] = Matrix::concat_rows(&parts)?;
        }
    }
    let mut out = vec![Matrix::zeros(0, 0); p];
    for group in ag_groups {
        let shards = group.iter().map(|&w| stage[w].clone()).collect();
        let received = all_gather(group, GroupKind::SpAg, shards, sink)?;
        for (&w, parts) in group.iter().zip(received) {
            // parts[b] holds chunks of SP ranks a * ag_size + b, a ascending.
            let mut ordered = Vec::with_capacity(aa_size * ag_size);
            for a in 0..aa_size {
                for part in &parts {
                    ordered.push(part.slice_rows(a * chunk..(a + 1) * chunk));
                }
            }
            out[w] = Matrix::concat_rows(&ordered)?;
        }
    }
    if fused {
        let members: Vec<usize> = (0..p).collect();
        ledgers.absorb_fused(&members, &scratch);
    }
    Ok(out)
}
