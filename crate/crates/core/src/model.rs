//! Decoder-only transformer with an explicit per-layer KV cache.
//!
//! One graph-building forward serves every path in the crate: plain
//! encoding, the adapted compression passes, teacher/student distillation
//! passes, and single-token decode steps. Pre-norm blocks with RMS
//! normalization, rotary position embeddings applied to keys at encode
//! time, and a SiLU feed-forward.

use std::collections::BTreeMap;

use rand::Rng;

use crate::config::{tokens, ModelConfig};
use crate::error::{KvdError, Result};
use crate::numerics::{Graph, NodeId, Tensor};

/// Frozen (or, during pretraining, trainable) base parameters, keyed by
/// name. BTreeMap keeps iteration order deterministic for optimizers and
/// checksums.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseParams {
    map: BTreeMap<String, Tensor>,
}

impl BaseParams {
    /// Random initialization. Output projections start at zero so the
    /// residual stream is stable early in training.
    pub fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.d_model;
        let h = 4 * d;
        let mut map = BTreeMap::new();
        map.insert(
            "embed".to_string(),
            Tensor::randn(cfg.vocab_size, d, 0.02, rng),
        );
        for l in 0..cfg.n_layers {
            map.insert(format!("l{l}.att.norm"), Tensor::full(1, d, 1.0));
            map.insert(format!("l{l}.att.wq"), Tensor::randn(d, d, 0.02, rng));
            map.insert(format!("l{l}.att.wk"), Tensor::randn(d, d, 0.02, rng));
            map.insert(format!("l{l}.att.wv"), Tensor::randn(d, d, 0.02, rng));
            map.insert(format!("l{l}.att.wo"), Tensor::zeros(d, d));
            map.insert(format!("l{l}.mlp.norm"), Tensor::full(1, d, 1.0));
            map.insert(format!("l{l}.mlp.w1"), Tensor::randn(d, h, 0.02, rng));
            map.insert(format!("l{l}.mlp.w2"), Tensor::zeros(h, d));
        }
        map.insert("out.norm".to_string(), Tensor::full(1, d, 1.0));
        map.insert(
            "out.head".to_string(),
            Tensor::randn(d, cfg.vocab_size, 0.02, rng),
        );
        BaseParams { map }
    }

    pub fn from_map(map: BTreeMap<String, Tensor>) -> Self {
        BaseParams { map }
    }

    pub fn map(&self) -> &BTreeMap<String, Tensor> {
        &self.map
    }

    pub fn map_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.map
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self.map[name]
    }

    /// Order-dependent FNV over all parameter bytes; used to prove the
    /// base stays frozen across a distillation run.
    pub fn checksum(&self) -> u64 {
        let mut hash: u64 = 0xcbf29ce484222325;
        for (name, t) in &self.map {
            for b in name.as_bytes() {
                hash ^= *b as u64;
                hash = hash.wrapping_mul(0x100000001b3);
            }
            for v in t.data() {
                for b in v.to_le_bytes() {
                    hash ^= b as u64;
                    hash = hash.wrapping_mul(0x100000001b3);
                }
            }
        }
        hash
    }
}

/// Per-layer key/value matrices, rows in token order.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerKv {
    pub keys: Tensor,
    pub values: Tensor,
}

/// The uncompressed cache: every context token's key/value rows for every
/// layer, plus the positions those rows were encoded at.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    pub layers: Vec<LayerKv>,
    pub position_ids: Vec<u32>,
}

impl KvCache {
    pub fn len(&self) -> usize {
        self.position_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.position_ids.is_empty()
    }

    /// In-memory payload size: keys + values + position ids.
    pub fn byte_size(&self) -> usize {
        let kv: usize = self
            .layers
            .iter()
            .map(|l| (l.keys.len() + l.values.len()) * 4)
            .sum();
        kv + self.position_ids.len() * 4
    }
}

/// Live generation state. Built from a full or compressed cache; decode
/// steps append one row per layer. `sigma` holds the per-row attention
/// decay factor (1.0 for sinks, appended rows, and undecayed caches).
#[derive(Debug, Clone)]
pub struct DecodeCache {
    pub layers: Vec<LayerKv>,
    pub sigma: Vec<f32>,
    pub next_pos: u32,
}

impl DecodeCache {
    pub fn from_kv(cache: &KvCache) -> Self {
        let next_pos = cache.position_ids.last().map_or(0, |p| p + 1);
        DecodeCache {
            layers: cache.layers.clone(),
            sigma: vec![1.0; cache.len()],
            next_pos,
        }
    }

    pub fn rows(&self) -> usize {
        self.sigma.len()
    }
}

/// Bound parameter set inside a graph: every base tensor as a node.
pub struct BoundBase {
    nodes: BTreeMap<String, NodeId>,
}

impl BoundBase {
    pub fn bind(g: &mut Graph, params: &BaseParams, trainable: bool) -> Result<Self> {
        let mut nodes = BTreeMap::new();
        for (name, t) in params.map() {
            let id = if trainable {
                g.leaf(name, t.clone())?
            } else {
                g.constant_checked(t.clone())?
            };
            nodes.insert(name.clone(), id);
        }
        Ok(BoundBase { nodes })
    }

    pub fn node(&self, name: &str) -> NodeId {
        self.nodes[name]
    }
}

/// Adapter tensors bound into a graph, with the routing decisions for this
/// forward. Construction lives in [`crate::compressor`].
pub struct AdapterCtx {
    /// Per-layer `(a, b)` node pairs for the q/k/v/o projections, in that
    /// order.
    pub layer_pairs: Vec<[(NodeId, NodeId); 4]>,
    /// Shared delta scale (alpha / sqrt(r)).
    pub scale: f32,
    /// Column mask (len x 1) of tokens routed through the adapted Q/O
    /// projections. `None` leaves every token on the frozen path.
    pub route_col: Option<NodeId>,
    /// Selection embedding (1 x d) and its column mask (len x 1), for the
    /// no-routing ablation.
    pub sel_embed: Option<(NodeId, NodeId)>,
}

/// Cache prefix visible to the current block's attention.
pub struct Prefix {
    /// Per-layer (keys, values) nodes, each `len x d_model`.
    pub kv: Vec<(NodeId, NodeId)>,
    /// Decay factors over the prefix columns (1 x len), if decay applies.
    pub sigma: Option<NodeId>,
    pub len: usize,
}

/// What a forward pass should compute and return.
pub struct FwdOpts<'a> {
    pub tokens: &'a [u32],
    pub positions: &'a [u32],
    pub prefix: Option<Prefix>,
    pub adapters: Option<AdapterCtx>,
    /// Stop after this block and report its residual-stream output.
    pub stop_after_layer: Option<usize>,
    pub want_kv: bool,
    pub want_logits: bool,
    /// Export head-averaged attention probabilities per layer.
    pub want_attention: bool,
}

pub struct FwdOut {
    /// Residual stream after `stop_after_layer`, if requested.
    pub hidden: Option<NodeId>,
    /// Per-layer (rotated keys, values) of the current block.
    pub kv: Vec<(NodeId, NodeId)>,
    pub logits: Option<NodeId>,
    /// Per-layer head-averaged attention, `len x (prefix + len)`.
    pub attention: Vec<NodeId>,
}

/// Rotation tables for the given positions: full-width cos/sin matrices
/// and the column permutation that implements rotate-half per head.
fn rope_tables(cfg: &ModelConfig, positions: &[u32]) -> (Tensor, Tensor, Tensor) {
    let d = cfg.d_model;
    let hd = cfg.head_dim;
    let half = hd / 2;
    let m = positions.len();
    let mut cos = Tensor::zeros(m, d);
    let mut sin = Tensor::zeros(m, d);
    for (r, &pos) in positions.iter().enumerate() {
        for h in 0..cfg.n_heads {
            for j in 0..hd {
                let jj = j % half;
                let theta = pos as f64 * (10000f64).powf(-2.0 * jj as f64 / hd as f64);
                cos.set(r, h * hd + j, theta.cos() as f32);
                sin.set(r, h * hd + j, theta.sin() as f32);
            }
        }
    }
    let mut rot = Tensor::zeros(d, d);
    for h in 0..cfg.n_heads {
        for j in 0..half {
            // out[.., h*hd+j] = -x[.., h*hd+j+half]; out[.., h*hd+j+half] = x[.., h*hd+j]
            rot.set(h * hd + j + half, h * hd + j, -1.0);
            rot.set(h * hd + j, h * hd + j + half, 1.0);
        }
    }
    (cos, sin, rot)
}

/// x*cos + rotate_half(x)*sin over the full width.
fn apply_rope(g: &mut Graph, x: NodeId, cos: NodeId, sin: NodeId, rot: NodeId) -> Result<NodeId> {
    let xr = g.matmul(x, rot)?;
    let a = g.mul(x, cos)?;
    let b = g.mul(xr, sin)?;
    g.add(a, b)
}

/// Low-rank delta `scale * (x A) B`.
fn lora_delta(g: &mut Graph, x: NodeId, pair: (NodeId, NodeId), scale: f32) -> Result<NodeId> {
    let xa = g.matmul(x, pair.0)?;
    let xab = g.matmul(xa, pair.1)?;
    g.scale(xab, scale)
}

/// Builds the transformer forward for one block of tokens, optionally on
/// top of a cache prefix. Everything downstream (encoding, compression,
/// distillation passes, decoding) goes through here so the math exists
/// exactly once.
pub fn forward(g: &mut Graph, cfg: &ModelConfig, base: &BoundBase, opts: FwdOpts) -> Result<FwdOut> {
    let m = opts.tokens.len();
    if m == 0 {
        return Err(KvdError::InvalidArg(
            "forward needs at least one token".into(),
        ));
    }
    if m != opts.positions.len() {
        return Err(KvdError::InvalidArg(format!(
            "{} tokens but {} positions",
            m,
            opts.positions.len()
        )));
    }
    if let Some(&p) = opts.positions.iter().max() {
        if p as usize >= cfg.max_pos {
            return Err(KvdError::Overlength {
                len: p as usize + 1,
                max_pos: cfg.max_pos,
            });
        }
    }
    if let Some(&t) = opts.tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(KvdError::InvalidArg(format!(
            "token id {t} outside vocabulary of {}",
            cfg.vocab_size
        )));
    }

    let hd = cfg.head_dim;
    let prefix_len = opts.prefix.as_ref().map_or(0, |p| p.len);

    let (cos_t, sin_t, rot_t) = rope_tables(cfg, opts.positions);
    let cos = g.constant(cos_t);
    let sin = g.constant(sin_t);
    let rot = g.constant(rot_t);

    // Decay factors over all key columns: prefix sigma then ones for the
    // current block (current tokens are never decayed).
    let sigma_full = match opts.prefix.as_ref().and_then(|p| p.sigma) {
        Some(sig) => {
            let ones = g.constant(Tensor::full(1, m, 1.0));
            Some(g.concat(sig, ones, 1)?)
        }
        None => None,
    };

    let ids: Vec<usize> = opts.tokens.iter().map(|&t| t as usize).collect();
    let mut x = g.gather(base.node("embed"), &ids)?;

    if let Some(adapters) = opts.adapters.as_ref() {
        if let Some((embed, mask)) = adapters.sel_embed {
            let add = g.mul(mask, embed)?;
            x = g.add(x, add)?;
        }
    }

    let mut out = FwdOut {
        hidden: None,
        kv: Vec::new(),
        logits: None,
        attention: Vec::new(),
    };

    let inv_sqrt_hd = 1.0 / (hd as f32).sqrt();
    let last_layer = opts.stop_after_layer.unwrap_or(cfg.n_layers - 1);

    for l in 0..=last_layer.min(cfg.n_layers - 1) {
        let xn = {
            let n = g.rms_norm(x)?;
            g.mul(n, base.node(&format!("l{l}.att.norm")))?
        };

        let mut q = g.matmul(xn, base.node(&format!("l{l}.att.wq")))?;
        let mut k = g.matmul(xn, base.node(&format!("l{l}.att.wk")))?;
        let mut v = g.matmul(xn, base.node(&format!("l{l}.att.wv")))?;

        if let Some(ad) = opts.adapters.as_ref() {
            let [pq, pk, pv, _] = ad.layer_pairs[l];
            // K and V deltas apply to every token.
            let dk = lora_delta(g, xn, pk, ad.scale)?;
            k = g.add(k, dk)?;
            let dv = lora_delta(g, xn, pv, ad.scale)?;
            v = g.add(v, dv)?;
            // Q delta only for routed (selected) tokens.
            if let Some(mask) = ad.route_col {
                let dq = lora_delta(g, xn, pq, ad.scale)?;
                let dq = g.mul(mask, dq)?;
                q = g.add(q, dq)?;
            }
        }

        let q = apply_rope(g, q, cos, sin, rot)?;
        let q = g.scale(q, inv_sqrt_hd)?;
        let k = apply_rope(g, k, cos, sin, rot)?;

        let (k_all, v_all) = match opts.prefix.as_ref() {
            Some(p) => {
                let (pk, pv) = p.kv[l];
                (g.concat(pk, k, 0)?, g.concat(pv, v, 0)?)
            }
            None => (k, v),
        };

        let mut heads: Option<NodeId> = None;
        let mut attn_sum: Option<NodeId> = None;
        for h in 0..cfg.n_heads {
            let cols = h * hd..(h + 1) * hd;
            let qh = g.slice(q, 0..m, cols.clone())?;
            let kh = g.slice(k_all, 0..prefix_len + m, cols.clone())?;
            let vh = g.slice(v_all, 0..prefix_len + m, cols)?;
            let kt = g.transpose(kh)?;
            let mut sc = g.matmul(qh, kt)?;
            if let Some(sig) = sigma_full {
                sc = g.mul(sc, sig)?;
            }
            let probs = g.causal_softmax(sc, prefix_len)?;
            if opts.want_attention {
                attn_sum = Some(match attn_sum {
                    Some(acc) => g.add(acc, probs)?,
                    None => probs,
                });
            }
            let oh = g.matmul(probs, vh)?;
            heads = Some(match heads {
                Some(acc) => g.concat(acc, oh, 1)?,
                None => oh,
            });
        }
        let ho = heads.expect("n_heads > 0");
        if let Some(acc) = attn_sum {
            out.attention.push(g.scale(acc, 1.0 / cfg.n_heads as f32)?);
        }

        let mut att = g.matmul(ho, base.node(&format!("l{l}.att.wo")))?;
        if let Some(ad) = opts.adapters.as_ref() {
            if let Some(mask) = ad.route_col {
                let [_, _, _, po] = ad.layer_pairs[l];
                let dout = lora_delta(g, ho, po, ad.scale)?;
                let dout = g.mul(mask, dout)?;
                att = g.add(att, dout)?;
            }
        }
        x = g.add(x, att)?;

        let xn2 = {
            let n = g.rms_norm(x)?;
            g.mul(n, base.node(&format!("l{l}.mlp.norm")))?
        };
        let h_pre = g.matmul(xn2, base.node(&format!("l{l}.mlp.w1")))?;
        let h_sig = g.sigmoid(h_pre)?;
        let h_act = g.mul(h_pre, h_sig)?;
        let mlp = g.matmul(h_act, base.node(&format!("l{l}.mlp.w2")))?;
        x = g.add(x, mlp)?;

        if opts.want_kv {
            out.kv.push((k, v));
        }
        if opts.stop_after_layer == Some(l) {
            out.hidden = Some(x);
            return Ok(out);
        }
    }

    if opts.want_logits {
        let xf = {
            let n = g.rms_norm(x)?;
            g.mul(n, base.node("out.norm"))?
        };
        out.logits = Some(g.matmul(xf, base.node("out.head"))?);
    }
    Ok(out)
}

/// Encodes a context into its full KV cache with frozen base parameters.
/// Positions start at `pos_offset`.
pub fn encode_context_at(
    cfg: &ModelConfig,
    params: &BaseParams,
    ctx: &[u32],
    pos_offset: u32,
) -> Result<KvCache> {
    let d = cfg.d_model;
    if ctx.is_empty() {
        return Ok(KvCache {
            layers: (0..cfg.n_layers)
                .map(|_| LayerKv {
                    keys: Tensor::zeros(0, d),
                    values: Tensor::zeros(0, d),
                })
                .collect(),
            position_ids: vec![],
        });
    }
    if pos_offset as usize + ctx.len() > cfg.max_pos {
        return Err(KvdError::Overlength {
            len: pos_offset as usize + ctx.len(),
            max_pos: cfg.max_pos,
        });
    }
    let positions: Vec<u32> = (0..ctx.len() as u32).map(|i| pos_offset + i).collect();
    let mut g = Graph::new();
    let base = BoundBase::bind(&mut g, params, false)?;
    let out = forward(
        &mut g,
        cfg,
        &base,
        FwdOpts {
            tokens: ctx,
            positions: &positions,
            prefix: None,
            adapters: None,
            stop_after_layer: None,
            want_kv: true,
            want_logits: false,
            want_attention: false,
        },
    )?;
    Ok(KvCache {
        layers: out
            .kv
            .iter()
            .map(|&(k, v)| LayerKv {
                keys: g.value(k).clone(),
                values: g.value(v).clone(),
            })
            .collect(),
        position_ids: positions,
    })
}

/// Encodes a context from position zero.
pub fn encode_context(cfg: &ModelConfig, params: &BaseParams, ctx: &[u32]) -> Result<KvCache> {
    encode_context_at(cfg, params, ctx, 0)
}

/// Encodes a token block and also returns the head-averaged attention
/// matrix per layer (rows = queries, columns = keys). Used by the
/// heavy-hitter baseline.
pub fn encode_with_attention(
    cfg: &ModelConfig,
    params: &BaseParams,
    tokens: &[u32],
) -> Result<(KvCache, Vec<Tensor>)> {
    if tokens.is_empty() {
        return Err(KvdError::InvalidArg(
            "attention capture needs tokens".into(),
        ));
    }
    if tokens.len() > cfg.max_pos {
        return Err(KvdError::Overlength {
            len: tokens.len(),
            max_pos: cfg.max_pos,
        });
    }
    let positions: Vec<u32> = (0..tokens.len() as u32).collect();
    let mut g = Graph::new();
    let base = BoundBase::bind(&mut g, params, false)?;
    let out = forward(
        &mut g,
        cfg,
        &base,
        FwdOpts {
            tokens,
            positions: &positions,
            prefix: None,
            adapters: None,
            stop_after_layer: None,
            want_kv: true,
            want_logits: false,
            want_attention: true,
        },
    )?;
    let cache = KvCache {
        layers: out
            .kv
            .iter()
            .map(|&(k, v)| LayerKv {
                keys: g.value(k).clone(),
                values: g.value(v).clone(),
            })
            .collect(),
        position_ids: positions,
    };
    let attn = out.attention.iter().map(|&a| g.value(a).clone()).collect();
    Ok((cache, attn))
}

/// One frozen-parameter decode step: runs `token` against the cache,
/// appends its key/value rows, and returns the vocabulary logits.
pub fn decode_step(
    cfg: &ModelConfig,
    params: &BaseParams,
    cache: &mut DecodeCache,
    token: u32,
) -> Result<Tensor> {
    if cache.next_pos as usize >= cfg.max_pos {
        return Err(KvdError::Overlength {
            len: cache.next_pos as usize + 1,
            max_pos: cfg.max_pos,
        });
    }
    let mut g = Graph::new();
    let base = BoundBase::bind(&mut g, params, false)?;
    let rows = cache.rows();
    let decay_needed = cache.sigma.iter().any(|&s| s != 1.0);
    let prefix = if rows > 0 {
        let kv = cache
            .layers
            .iter()
            .map(|l| (g.constant(l.keys.clone()), g.constant(l.values.clone())))
            .collect();
        let sigma = if decay_needed {
            Some(g.constant(Tensor::row(&cache.sigma)))
        } else {
            None
        };
        Some(Prefix {
            kv,
            sigma,
            len: rows,
        })
    } else {
        None
    };
    let out = forward(
        &mut g,
        cfg,
        &base,
        FwdOpts {
            tokens: &[token],
            positions: &[cache.next_pos],
            prefix,
            adapters: None,
            stop_after_layer: None,
            want_kv: true,
            want_logits: true,
            want_attention: false,
        },
    )?;
    for (layer, &(k, v)) in cache.layers.iter_mut().zip(out.kv.iter()) {
        layer.keys.push_rows(g.value(k));
        layer.values.push_rows(g.value(v));
    }
    cache.sigma.push(1.0);
    cache.next_pos += 1;
    Ok(g.value(out.logits.expect("logits requested")).clone())
}

/// Logits for a whole token block conditioned on a cache, without
/// mutating it. Row `j` is the next-token distribution after `tokens[j]`.
/// Equivalent to feeding the block through `decode_step` one token at a
/// time, in one pass.
pub fn forward_over_cache(
    cfg: &ModelConfig,
    params: &BaseParams,
    cache: &DecodeCache,
    tokens: &[u32],
) -> Result<Tensor> {
    if cache.next_pos as usize + tokens.len() > cfg.max_pos {
        return Err(KvdError::Overlength {
            len: cache.next_pos as usize + tokens.len(),
            max_pos: cfg.max_pos,
        });
    }
    let mut g = Graph::new();
    let base = BoundBase::bind(&mut g, params, false)?;
    let rows = cache.rows();
    let decay_needed = cache.sigma.iter().any(|&s| s != 1.0);
    let prefix = if rows > 0 {
        let kv = cache
            .layers
            .iter()
            .map(|l| (g.constant(l.keys.clone()), g.constant(l.values.clone())))
            .collect();
        let sigma = if decay_needed {
            Some(g.constant(Tensor::row(&cache.sigma)))
        } else {
            None
        };
        Some(Prefix {
            kv,
            sigma,
            len: rows,
        })
    } else {
        None
    };
    let positions: Vec<u32> = (0..tokens.len() as u32)
        .map(|i| cache.next_pos + i)
        .collect();
    let out = forward(
        &mut g,
        cfg,
        &base,
        FwdOpts {
            tokens,
            positions: &positions,
            prefix,
            adapters: None,
            stop_after_layer: None,
            want_kv: false,
            want_logits: true,
            want_attention: false,
        },
    )?;
    Ok(g.value(out.logits.expect("logits requested")).clone())
}

/// Lowest-index argmax, the greedy decoding rule.
pub fn argmax(logits: &Tensor) -> u32 {
    let mut best = 0usize;
    let mut best_v = f32::NEG_INFINITY;
    for (i, &v) in logits.data().iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best as u32
}

/// Greedy generation: feeds the prompt, then emits tokens until EOS or
/// `max_new`. The prompt itself is not part of the returned sequence.
pub fn generate_greedy(
    cfg: &ModelConfig,
    params: &BaseParams,
    cache: &mut DecodeCache,
    prompt: &[u32],
    max_new: usize,
) -> Result<Vec<u32>> {
    if prompt.is_empty() {
        return Err(KvdError::InvalidArg("prompt must be nonempty".into()));
    }
    let mut logits = Tensor::zeros(1, cfg.vocab_size);
    for &t in prompt {
        logits = decode_step(cfg, params, cache, t)?;
    }
    let mut out = Vec::new();
    while out.len() < max_new {
        let next = argmax(&logits);
        if next == tokens::EOS {
            break;
        }
        out.push(next);
        if out.len() == max_new {
            break;
        }
        logits = decode_step(cfg, params, cache, next)?;
    }
    Ok(out)
}
