//! Single-device reference transformer with grouped-query attention.
//!
//! Each layer is `x += attn(x) * O` followed by `x += silu(x * up) * down`,
//! with additive learned position embeddings and no normalization. The
//! parallel executors implement exactly this architecture, so it is the oracle
//! they are checked against.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{derive_seed, init_weights, softmax_in_place, Matrix};

pub type TokenId = u32;

/// Name of the MLP activation, recorded in weight manifests.
pub const ACTIVATION: &str = "silu";

pub(crate) fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    /// `d x (h + 2 h_kv) * head_dim`, columns ordered `[Q heads | K heads | V heads]`.
    pub qkv: Matrix,
    /// `h * head_dim x d`.
    pub o: Matrix,
    pub mlp_up: Matrix,
    pub mlp_down: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    pub config: ModelConfig,
    pub seed: u64,
    pub tok_emb: Matrix,
    pub pos_emb: Matrix,
    pub layers: Vec<LayerWeights>,
    pub lm_head: Matrix,
}

impl Weights {
    /// Deterministic weights: every matrix draws from its own SplitMix64
    /// sub-stream of `seed`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.hidden;
        let mut stream = 0u64;
        let mut next = |shape: (usize, usize)| {
            stream += 1;
            init_weights(derive_seed(seed, stream), shape)
        };
        let tok_emb = next((config.vocab, d));
        let pos_emb = next((config.max_context, d));
        let layers = (0..config.layers)
            .map(|_| LayerWeights {
                qkv: next((d, config.qkv_width())),
                o: next((config.q_heads * config.head_dim, d)),
                mlp_up: next((d, config.mlp_hidden)),
                mlp_down: next((config.mlp_hidden, d)),
            })
            .collect();
        let lm_head = next((d, config.vocab));
        Ok(Self {
            config: *config,
            seed,
            tok_emb,
            pos_emb,
            layers,
            lm_head,
        })
    }

    /// Elements in all transformer layers, the part that parallel configs shard.
    pub fn layer_elements(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.qkv.len() + l.o.len() + l.mlp_up.len() + l.mlp_down.len())
            .sum()
    }

    fn named(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.qkv"), &l.qkv));
            out.push((format!("layer{i}.o"), &l.o));
            out.push((format!("layer{i}.mlp_up"), &l.mlp_up));
            out.push((format!("layer{i}.mlp_down"), &l.mlp_down));
        }
        out.push(("lm_head".to_string(), &self.lm_head));
        out
    }

    /// Writes `weights.bin` (little-endian `f32`, matrices back to back in
    /// manifest order) and `weights.manifest` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let c = &self.config;
        let mut manifest = String::from("shiftpar-weights v1\n");
        let _ = writeln!(manifest, "seed {}", self.seed);
        let _ = writeln!(manifest, "activation {ACTIVATION}");
        let _ = writeln!(
            manifest,
            "config layers={} hidden={} mlp_hidden={} q_heads={} kv_heads={} head_dim={} vocab={} max_context={}",
            c.layers, c.hidden, c.mlp_hidden, c.q_heads, c.kv_heads, c.head_dim, c.vocab, c.max_context
        );
        let mut blob = Vec::new();
        for (name, m) in self.named() {
            let _ = writeln!(manifest, "matrix {name} {} {}", m.rows(), m.cols());
            for v in m.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(dir.join("weights.manifest"), manifest)?;
        fs::write(dir.join("weights.bin"), blob)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = fs::read_to_string(dir.join("weights.manifest"))?;
        let blob = fs::read(dir.join("weights.bin"))?;
        let mut lines = manifest.lines();
        if lines.next() != Some("shiftpar-weights v1") {
            return Err(Error::Format("unknown manifest header".into()));
        }
        let mut seed = None;
        let mut config = None;
        let mut shapes = Vec::new();
        for line in lines {
            let mut parts = line.split_whitespace();
            match parts.next() {
                Some("seed") => {
                    seed = parts.next().and_then(|s| s.parse::<u64>().ok());
                }
                Some("activation") => {
                    if parts.next() != Some(ACTIVATION) {
                        return Err(Error::Format(format!("unsupported activation in {line:?}")));
                    }
                }
                Some("config") => config = Some(parse_config(parts)?),
                Some("matrix") => {
                    let name = parts.next().ok_or_else(|| Error::Format(line.into()))?;
                    let dims: Vec<usize> = parts.filter_map(|p| p.parse().ok()).collect();
                    if dims.len() != 2 {
                        return Err(Error::Format(format!("bad matrix line {line:?}")));
                    }
                    shapes.push((name.to_string(), dims[0], dims[1]));
                }
                Some(_) | None => {}
            }
        }
        let seed = seed.ok_or_else(|| Error::Format("manifest has no seed".into()))?;
        let config = config.ok_or_else(|| Error::Format("manifest has no config".into()))?;
        config.validate()?;
        let total: usize = shapes.iter().map(|(_, r, c)| r * c).sum();
        if blob.len() != total * 4 {
            return Err(Error::Format(format!(
                "blob holds {} bytes, manifest describes {}",
                blob.len(),
                total * 4
            )));
        }
        let mut offset = 0;
        let mut matrices = BTreeMap::new();
        for (name, r, c) in shapes {
            let data = blob[offset..offset + r * c * 4]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            offset += r * c * 4;
            matrices.insert(name, Matrix::new(r, c, data)?);
        }
        let mut take = |name: &str| {
            matrices
                .remove(name)
                .ok_or_else(|| Error::Format(format!("manifest lacks {name}")))
        };
        let tok_emb = take("tok_emb")?;
        let pos_emb = take("pos_emb")?;
        let layers = (0..config.layers)
            .map(|i| {
                Ok(LayerWeights {
                    qkv: take(&format!("layer{i}.qkv"))?,
                    o: take(&format!("layer{i}.o"))?,
                    mlp_up: take(&format!("layer{i}.mlp_up"))?,
                    mlp_down: take(&format!("layer{i}.mlp_down"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let lm_head = take("lm_head")?;
        let w = Self {
            config,
            seed,
            tok_emb,
            pos_emb,
            layers,
            lm_head,
        };
        let shapes = |w: &Weights| -> Vec<(usize, usize)> { w.named().iter().map(|(_, m)| m.shape()).collect() };
        if shapes(&w) != shapes(&Weights::init(&config, seed)?) {
            return Err(Error::Format("matrix shapes do not match the config".into()));
        }
        Ok(w)
    }

    /// Token plus position embedding for each `(token, position)`.
    pub fn embed(&self, rows: &[(TokenId, usize)]) -> Result<Matrix> {
        let d = self.config.hidden;
        let mut out = Matrix::zeros(rows.len(), d);
        for (i, &(tok, pos)) in rows.iter().enumerate() {
            if tok as usize >= self.config.vocab {
                return Err(Error::config(format!("token {tok} outside vocab {}", self.config.vocab)));
            }
            if pos >= self.config.max_context {
                return Err(Error::Capacity {
                    needed: pos + 1,
                    limit: self.config.max_context,
                });
            }
            let dst = out.row_mut(i);
            for ((o, a), b) in dst
                .iter_mut()
                .zip(self.tok_emb.row(tok as usize))
                .zip(self.pos_emb.row(pos))
            {
                *o = a + b;
            }
        }
        Ok(out)
    }
}

fn parse_config<'a>(parts: impl Iterator<Item = &'a str>) -> Result<ModelConfig> {
    let mut fields = BTreeMap::new();
    for p in parts {
        let (k, v) = p
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("bad config field {p:?}")))?;
        let v: usize = v
            .parse()
            .map_err(|_| Error::Format(format!("bad config value {p:?}")))?;
        fields.insert(k.to_string(), v);
    }
    let get = |k: &str| {
        fields
            .get(k)
            .copied()
            .ok_or_else(|| Error::Format(format!("config lacks {k}")))
    };
    Ok(ModelConfig {
        layers: get("layers")?,
        hidden: get("hidden")?,
        mlp_hidden: get("mlp_hidden")?,
        q_heads: get("q_heads")?,
        kv_heads: get("kv_heads")?,
        head_dim: get("head_dim")?,
        vocab: get("vocab")?,
        max_context: get("max_context")?,
    })
}

/// Keys and values of one KV head, in position order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HeadCache {
    positions: Vec<usize>,
    keys: Vec<f32>,
    values: Vec<f32>,
}

impl HeadCache {
    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn key(&self, i: usize, head_dim: usize) -> &[f32] {
        &self.keys[i * head_dim..(i + 1) * head_dim]
    }

    pub fn value(&self, i: usize, head_dim: usize) -> &[f32] {
        &self.values[i * head_dim..(i + 1) * head_dim]
    }

    pub fn keys(&self) -> &[f32] {
        &self.keys
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }
}

/// Per-layer, per-KV-head cache of one sequence. A worker holds only the KV
/// heads it serves; `owner` records which worker is authoritative for each
/// head across the whole deployment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardedKvCache {
    head_dim: usize,
    layers: Vec<BTreeMap<usize, HeadCache>>,
    owner: BTreeMap<usize, usize>,
}

impl ShardedKvCache {
    pub fn new(layers: usize, heads: &[usize], head_dim: usize, owner: BTreeMap<usize, usize>) -> Self {
        let per_layer: BTreeMap<usize, HeadCache> =
            heads.iter().map(|&h| (h, HeadCache::default())).collect();
        Self {
            head_dim,
            layers: vec![per_layer; layers],
            owner,
        }
    }

    /// Cache holding every KV head of `mc`, all owned by worker 0.
    pub fn single_device(mc: &ModelConfig) -> Self {
        let heads: Vec<usize> = (0..mc.kv_heads).collect();
        let owner = heads.iter().map(|&h| (h, 0)).collect();
        Self::new(mc.layers, &heads, mc.head_dim, owner)
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn layers(&self) -> usize {
        self.layers.len()
    }

    pub fn heads(&self) -> Vec<usize> {
        self.layers.first().map_or_else(Vec::new, |l| l.keys().copied().collect())
    }

    pub fn owner(&self) -> &BTreeMap<usize, usize> {
        &self.owner
    }

    pub fn head(&self, layer: usize, kv_head: usize) -> Option<&HeadCache> {
        self.layers[layer].get(&kv_head)
    }

    /// Number of cached positions (taken from the first head of layer 0).
    pub fn len(&self) -> usize {
        self.layers
            .first()
            .and_then(|l| l.values().next())
            .map_or(0, HeadCache::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn append(&mut self, layer: usize, kv_head: usize, position: usize, key: &[f32], value: &[f32]) -> Result<()> {
        let hd = self.head_dim;
        let entry = self.layers[layer]
            .get_mut(&kv_head)
            .ok_or_else(|| Error::protocol(format!("KV head {kv_head} is not held here")))?;
        if let Some(&last) = entry.positions.last() {
            if position <= last {
                return Err(Error::protocol(format!(
                    "layer {layer} head {kv_head}: position {position} after {last}"
                )));
            }
        }
        if key.len() != hd || value.len() != hd {
            return Err(Error::protocol("key/value width differs from head_dim"));
        }
        entry.positions.push(position);
        entry.keys.extend_from_slice(key);
        entry.values.extend_from_slice(value);
        Ok(())
    }

    /// Checks that positions increase and every head of a layer holds the
    /// same positions.
    /// Largest key/value difference relative to the largest value in
    /// `reference`, or `None` if heads or positions differ. Owners are not
    /// compared.
    pub fn rel_diff(&self, reference: &ShardedKvCache) -> Option<f32> {
        if self.layers.len() != reference.layers.len() {
            return None;
        }
        let (mut diff, mut scale) = (0.0f32, 0.0f32);
        for (mine, theirs) in self.layers.iter().zip(&reference.layers) {
            if !mine.keys().eq(theirs.keys()) {
                return None;
            }
            for (a, b) in mine.values().zip(theirs.values()) {
                if a.positions != b.positions {
                    return None;
                }
                for (x, y) in a.keys.iter().chain(&a.values).zip(b.keys.iter().chain(&b.values)) {
                    diff = diff.max((x - y).abs());
                    scale = scale.max(y.abs());
                }
            }
        }
        Some(if scale > 0.0 { diff / scale } else { diff })
    }

    pub fn check_invariants(&self) -> Result<()> {
        for (l, layer) in self.layers.iter().enumerate() {
            let mut reference: Option<&[usize]> = None;
            for (h, hc) in layer {
                if hc.positions.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::protocol(format!("layer {l} head {h}: positions not increasing")));
                }
                match reference {
                    None => reference = Some(&hc.positions),
                    Some(r) if r != hc.positions.as_slice() => {
                        return Err(Error::protocol(format!("layer {l} head {h}: position set differs")));
                    }
                    Some(_) => {}
                }
            }
        }
        Ok(())
    }
}

/// Causal attention of one query vector against the cached entries of one
/// head at positions `<= upto`. Scores, softmax and the value sum all run in
/// cache order.
pub(crate) fn attend(q: &[f32], head: &HeadCache, head_dim: usize, upto: usize, out: &mut [f32]) {
    let visible = head.positions.partition_point(|&p| p <= upto);
    out.iter_mut().for_each(|o| *o = 0.0);
    if visible == 0 {
        return;
    }
    let scale = 1.0 / (head_dim as f32).sqrt();
    let mut scores: Vec<f32> = (0..visible)
        .map(|j| {
            let k = head.key(j, head_dim);
            let mut s = 0.0f32;
            for (a, b) in q.iter().zip(k) {
                s += a * b;
            }
            s * scale
        })
        .collect();
    softmax_in_place(&mut scores);
    for (j, &p) in scores.iter().enumerate() {
        let v = head.value(j, head_dim);
        for (o, &x) in out.iter_mut().zip(v) {
            *o += p * x;
        }
    }
}

/// `silu(x * up) * down` without the residual.
pub(crate) fn mlp(x: &Matrix, up: &Matrix, down: &Matrix) -> Result<Matrix> {
    x.matmul(up)?.map(silu).matmul(down)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sequence {
    pub tokens: Vec<TokenId>,
}

impl Sequence {
    pub fn new(tokens: Vec<TokenId>) -> Self {
        Self { tokens }
    }

    pub fn n(&self) -> usize {
        self.tokens.len()
    }

    /// Deterministic pseudo-random prompt of `n` tokens.
    pub fn synthetic(n: usize, vocab: usize, seed: u64) -> Self {
        let mut rng = crate::tensor::SplitMix64::new(derive_seed(seed, 0x5e9));
        Self {
            tokens: (0..n).map(|_| (rng.next_u64() % vocab as u64) as TokenId).collect(),
        }
    }
}

/// Runs rows `tokens` at consecutive positions starting at `cache.len()`
/// through the model, appending their keys and values, and returns logits
/// for every row.
fn forward(w: &Weights, cache: &mut ShardedKvCache, tokens: &[TokenId]) -> Result<Matrix> {
    let mc = &w.config;
    let start = cache.len();
    if start + tokens.len() > mc.max_context {
        return Err(Error::Capacity {
            needed: start + tokens.len(),
            limit: mc.max_context,
        });
    }
    let rows: Vec<(TokenId, usize)> = tokens.iter().enumerate().map(|(i, &t)| (t, start + i)).collect();
    let mut x = w.embed(&rows)?;
    let hd = mc.head_dim;
    let (h, kvh) = (mc.q_heads, mc.kv_heads);
    for (l, layer) in w.layers.iter().enumerate() {
        let qkv = x.matmul(&layer.qkv)?;
        for (i, &(_, pos)) in rows.iter().enumerate() {
            let row = qkv.row(i);
            for kv in 0..kvh {
                let k = &row[(h + kv) * hd..(h + kv + 1) * hd];
                let v = &row[(h + kvh + kv) * hd..(h + kvh + kv + 1) * hd];
                cache.append(l, kv, pos, k, v)?;
            }
        }
        let mut attn = Matrix::zeros(rows.len(), h * hd);
        for (i, &(_, pos)) in rows.iter().enumerate() {
            let row = qkv.row(i).to_vec();
            let out = attn.row_mut(i);
            for q in 0..h {
                let head = cache
                    .head(l, mc.kv_head_of(q))
                    .expect("single-device cache holds every head");
                attend(&row[q * hd..(q + 1) * hd], head, hd, pos, &mut out[q * hd..(q + 1) * hd]);
            }
        }
        let proj = attn.matmul(&layer.o)?;
        x.add_assign(&proj)?;
        let m = mlp(&x, &layer.mlp_up, &layer.mlp_down)?;
        x.add_assign(&m)?;
    }
    x.matmul(&w.lm_head)
}

/// Processes the whole prompt and returns logits for every position together
/// with the populated cache. The last row picks the first output token.
pub fn reference_prefill(w: &Weights, seq: &Sequence) -> Result<(Matrix, ShardedKvCache)> {
    if seq.n() == 0 {
        return Err(Error::config("prefill needs at least one token"));
    }
    let mut cache = ShardedKvCache::single_device(&w.config);
    let logits = forward(w, &mut cache, &seq.tokens)?;
    Ok((logits, cache))
}

/// Appends `last_token` and returns the greedy next token and its logits row.
pub fn reference_decode_step(
    w: &Weights,
    cache: &mut ShardedKvCache,
    last_token: TokenId,
) -> Result<(TokenId, Matrix)> {
    if cache.is_empty() {
        return Err(Error::config("decode needs a prefilled cache"));
    }
    let logits = forward(w, cache, &[last_token])?;
    Ok((logits.argmax_row(0) as TokenId, logits))
}

/// Greedy generation output.
#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    /// First token from the prefill followed by one token per decode step.
    pub tokens: Vec<TokenId>,
    /// Logits that produced the final token.
    pub last_logits: Matrix,
    pub cache: ShardedKvCache,
}

/// Prefill then `steps` greedy decode steps on one device.
pub fn reference_generate(w: &Weights, prompt: &Sequence, steps: usize) -> Result<Generation> {
    let (logits, mut cache) = reference_prefill(w, prompt)?;
    let last = logits.rows() - 1;
    let mut token = logits.argmax_row(last) as TokenId;
    let mut last_logits = logits.select_rows(&[last]);
    let mut tokens = vec![token];
    for _ in 0..steps {
        let (next, l) = reference_decode_step(w, &mut cache, token)?;
        token = next;
        last_logits = l;
        tokens.push(token);
    }
    Ok(Generation {
        tokens,
        last_logits,
        cache,
    })
}
