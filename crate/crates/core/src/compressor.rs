//! Scorer-driven cache compression with conditional computation.
//!
//! A small feed-forward scorer reads the hidden states at one layer of an
//! adapted encoding pass and assigns every token an importance score. The
//! top-k tokens (outside the always-kept sink prefix) are retained: their
//! key/value rows are copied verbatim from a second, fully adapted pass in
//! which selected tokens are routed through adapted query/output
//! projections while unselected tokens keep the frozen ones. Key/value
//! adapters apply to every token. Attention onto retained rows is decayed
//! by the sigmoid of their scores, which is what carries gradient to the
//! scorer past the hard top-k.

use std::collections::BTreeMap;

use rand::Rng;

use crate::config::{ModelConfig, RoutingMode};
#[cfg(test)]
use crate::config::tokens;
use crate::error::{KvdError, Result};
use crate::model::{forward, AdapterCtx, BoundBase, BaseParams, DecodeCache, FwdOpts, KvCache, LayerKv};
use crate::numerics::{sigmoid, Graph, NodeId, Tensor};

/// Which token rows survive compression. Sink rows (the first
/// `sink_count` positions) are implicit and live outside `indices`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectionPlan {
    /// Retained non-sink token positions, sorted ascending, unique.
    pub indices: Vec<usize>,
    pub sink_count: usize,
}

impl SelectionPlan {
    pub fn k(&self) -> usize {
        self.indices.len()
    }

    /// All retained rows in document order: sinks then selected indices.
    pub fn rows(&self) -> Vec<usize> {
        (0..self.sink_count).chain(self.indices.iter().copied()).collect()
    }
}

/// Sub-selected per-layer cache plus everything generation needs: original
/// positions, the retained scores that drive attention decay, and the
/// length of the context the rows came from.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedCache {
    pub layers: Vec<LayerKv>,
    /// Original encode-time positions of the retained rows (sinks first).
    pub position_ids: Vec<u32>,
    /// Scores of the non-sink retained rows, aligned after the sinks.
    pub scores: Vec<f32>,
    pub sink_count: usize,
    /// Length of the uncompressed context.
    pub origin_len: usize,
}

impl CompressedCache {
    /// Retained rows per layer (sinks + selected).
    pub fn rows(&self) -> usize {
        self.position_ids.len()
    }

    /// In-memory payload size: keys + values + positions + scores.
    pub fn byte_size(&self) -> usize {
        let kv: usize = self
            .layers
            .iter()
            .map(|l| (l.keys.len() + l.values.len()) * 4)
            .sum();
        kv + self.position_ids.len() * 4 + self.scores.len() * 4
    }

    /// Generation state over this cache. With `decay` on, non-sink rows
    /// are attenuated by the sigmoid of their scores; sinks never decay.
    pub fn to_decode_cache(&self, decay: bool) -> DecodeCache {
        let mut sigma = vec![1.0f32; self.sink_count];
        if decay {
            sigma.extend(self.scores.iter().map(|&s| sigmoid(s)));
        } else {
            sigma.extend(std::iter::repeat(1.0).take(self.scores.len()));
        }
        DecodeCache {
            layers: self.layers.clone(),
            sigma,
            next_pos: self.origin_len as u32,
        }
    }
}

/// The trainable state: per-layer low-rank pairs for Q/K/V/O, the scorer
/// network, and the selection embedding used by the no-routing ablation.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSet {
    map: BTreeMap<String, Tensor>,
}

impl AdapterSet {
    /// A-side matrices get random init, B-sides start at zero so the
    /// adapted model behaves exactly like the base at step zero.
    pub fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.d_model;
        let r = cfg.adapter_rank;
        let h = 4 * d;
        let a_std = 1.0 / (d as f32).sqrt();
        let mut map = BTreeMap::new();
        for l in 0..cfg.n_layers {
            for proj in ["q", "k", "v", "o"] {
                map.insert(format!("adapt.l{l}.{proj}.a"), Tensor::randn(d, r, a_std, rng));
                map.insert(format!("adapt.l{l}.{proj}.b"), Tensor::zeros(r, d));
            }
        }
        map.insert("scorer.w1".to_string(), Tensor::randn(d, h, a_std, rng));
        map.insert("scorer.b1".to_string(), Tensor::zeros(1, h));
        map.insert(
            "scorer.w2".to_string(),
            Tensor::randn(h, 1, 1.0 / (h as f32).sqrt(), rng),
        );
        map.insert("scorer.b2".to_string(), Tensor::zeros(1, 1));
        map.insert("sel_embed".to_string(), Tensor::zeros(1, d));
        AdapterSet { map }
    }

    /// All-zero adapters: the exact identity configuration.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut set = Self::init(cfg, &mut rng);
        for t in set.map.values_mut() {
            *t = Tensor::zeros(t.rows(), t.cols());
        }
        set
    }

    pub fn from_map(map: BTreeMap<String, Tensor>) -> Self {
        AdapterSet { map }
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
}

use rand::SeedableRng;

/// Adapter tensors bound into a graph.
pub struct BoundAdapters {
    nodes: BTreeMap<String, NodeId>,
    n_layers: usize,
    scale: f32,
}

impl BoundAdapters {
    pub fn bind(
        g: &mut Graph,
        cfg: &ModelConfig,
        set: &AdapterSet,
        trainable: bool,
    ) -> Result<Self> {
        let mut nodes = BTreeMap::new();
        for (name, t) in set.map() {
            let id = if trainable {
                g.leaf(name, t.clone())?
            } else {
                g.constant_checked(t.clone())?
            };
            nodes.insert(name.clone(), id);
        }
        Ok(BoundAdapters {
            nodes,
            n_layers: cfg.n_layers,
            scale: cfg.lora_scale(),
        })
    }

    pub fn node(&self, name: &str) -> NodeId {
        self.nodes[name]
    }

    /// Attaches the bound tensors to a forward pass. `route_col` masks the
    /// rows that take the adapted Q/O path; `sel_mask` is the
    /// selection-embedding alternative.
    pub fn ctx(&self, route_col: Option<NodeId>, sel_mask: Option<NodeId>) -> AdapterCtx {
        let layer_pairs = (0..self.n_layers)
            .map(|l| {
                ["q", "k", "v", "o"].map(|p| {
                    (
                        self.node(&format!("adapt.l{l}.{p}.a")),
                        self.node(&format!("adapt.l{l}.{p}.b")),
                    )
                })
            })
            .collect();
        AdapterCtx {
            layer_pairs,
            scale: self.scale,
            route_col,
            sel_embed: sel_mask.map(|m| (self.node("sel_embed"), m)),
        }
    }

    /// Importance scores from layer hidden states: a two-layer SiLU
    /// feed-forward with scalar output per token.
    pub fn scorer(&self, g: &mut Graph, hidden: NodeId) -> Result<NodeId> {
        let h1 = g.matmul(hidden, self.node("scorer.w1"))?;
        let h1 = g.add(h1, self.node("scorer.b1"))?;
        let sig = g.sigmoid(h1)?;
        let act = g.mul(h1, sig)?;
        let s = g.matmul(act, self.node("scorer.w2"))?;
        g.add(s, self.node("scorer.b2"))
    }
}

/// Importance scores for a block of hidden states (host-level wrapper
/// around the graph scorer).
pub fn score_tokens(
    cfg: &ModelConfig,
    adapters: &AdapterSet,
    hidden: &Tensor,
) -> Result<Vec<f32>> {
    let mut g = Graph::new();
    let bound = BoundAdapters::bind(&mut g, cfg, adapters, false)?;
    let h = g.constant_checked(hidden.clone())?;
    let s = bound.scorer(&mut g, h)?;
    Ok(g.value(s).data().to_vec())
}

/// Picks the k highest-scoring non-sink positions. Ties break toward the
/// lower index; output is sorted ascending.
pub fn select_topk(scores: &[f32], k: usize, sink_count: usize) -> Result<SelectionPlan> {
    let n = scores.len();
    if sink_count > n || k > n - sink_count {
        return Err(KvdError::InvalidArg(format!(
            "top-k out of range: k={k}, sinks={sink_count}, n={n}"
        )));
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(KvdError::InvalidArg(format!(
            "non-finite importance score {bad}"
        )));
    }
    let mut order: Vec<usize> = (sink_count..n).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("scores checked finite")
            .then(a.cmp(&b))
    });
    let mut indices: Vec<usize> = order.into_iter().take(k).collect();
    indices.sort_unstable();
    Ok(SelectionPlan {
        indices,
        sink_count,
    })
}

/// Row-selects a cache according to a plan: sinks first, then the selected
/// indices, every layer identically, original positions kept. `scores` is
/// the full-length score vector the plan was derived from.
pub fn apply_selection(
    cache: &KvCache,
    plan: &SelectionPlan,
    scores: &[f32],
) -> Result<CompressedCache> {
    let n = cache.len();
    if plan.indices.iter().any(|&i| i >= n) || plan.sink_count > n {
        return Err(KvdError::InvalidArg(
            "selection plan indices exceed cache length".into(),
        ));
    }
    if scores.len() != n {
        return Err(KvdError::InvalidArg(format!(
            "score vector length {} != cache length {n}",
            scores.len()
        )));
    }
    let rows = plan.rows();
    let d = cache.layers.first().map_or(0, |l| l.keys.cols());
    let layers = cache
        .layers
        .iter()
        .map(|layer| {
            let mut keys = Tensor::zeros(0, d);
            let mut values = Tensor::zeros(0, d);
            for &r in &rows {
                keys.push_rows(&Tensor::new(1, d, layer.keys.row_slice(r).to_vec()));
                values.push_rows(&Tensor::new(1, d, layer.values.row_slice(r).to_vec()));
            }
            LayerKv { keys, values }
        })
        .collect();
    Ok(CompressedCache {
        layers,
        position_ids: rows.iter().map(|&r| cache.position_ids[r]).collect(),
        scores: plan.indices.iter().map(|&i| scores[i]).collect(),
        sink_count: plan.sink_count,
        origin_len: n,
    })
}

/// Scorer-informed decay of unnormalized attention weights: each weight is
/// multiplied by the sigmoid of its token's score. Callers exempt sink
/// positions by not passing them here.
pub fn decay_attention(alpha: &[f32], scores: &[f32]) -> Vec<f32> {
    assert_eq!(alpha.len(), scores.len(), "decay length mismatch");
    alpha
        .iter()
        .zip(scores)
        .map(|(&a, &s)| sigmoid(s) * a)
        .collect()
}

/// Rank-stabilized adapter application: `Wx + (alpha/sqrt(r)) (x A) B`.
pub fn adapter_apply(
    wx: &Tensor,
    x: &Tensor,
    a: &Tensor,
    b: &Tensor,
    lora_alpha: f32,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let wx_n = g.constant_checked(wx.clone())?;
    let x_n = g.constant_checked(x.clone())?;
    let a_n = g.constant_checked(a.clone())?;
    let b_n = g.constant_checked(b.clone())?;
    let xa = g.matmul(x_n, a_n)?;
    let xab = g.matmul(xa, b_n)?;
    let scaled = g.scale(xab, lora_alpha / (a.cols() as f32).sqrt())?;
    let out = g.add(wx_n, scaled)?;
    Ok(g.value(out).clone())
}

/// Number of rows retained from `usable` candidates at retention `rho`.
pub fn retained_count(rho: f64, usable: usize) -> usize {
    (rho * usable as f64).round() as usize
}

/// Graph-side product of one encoded (and compressed) token block.
pub struct EncodedBlock {
    pub plan: SelectionPlan,
    /// Gathered per-layer (keys, values) nodes, `(sinks + k) x d`.
    pub kv: Vec<(NodeId, NodeId)>,
    /// Decay row over the retained rows (1 x rows); ones at sinks.
    pub sigma: NodeId,
    /// Encode-time positions of the retained rows.
    pub positions: Vec<u32>,
    /// Host copies of the scores: full vector and the retained ones.
    pub scores_full: Vec<f32>,
    pub scores_selected: Vec<f32>,
}

/// Two-pass compressed encoding of one token block, built inside `g` so
/// gradients can flow to the adapters and the scorer.
///
/// Pass 1 runs the K/V-adapted model to the scorer layer and scores every
/// token; the top-k of the first `valid_len` non-sink tokens are selected
/// (rows past `valid_len` are padding and never selectable). Pass 2 runs
/// the full adapted forward with selected tokens routed through the
/// adapted Q/O projections, and the retained rows are gathered out.
#[allow(clippy::too_many_arguments)]
pub fn build_encode(
    g: &mut Graph,
    cfg: &ModelConfig,
    base: &BoundBase,
    adapters: &BoundAdapters,
    block: &[u32],
    valid_len: usize,
    pos_offset: u32,
    sink_count: usize,
    rho: f64,
) -> Result<EncodedBlock> {
    let m = block.len();
    if valid_len == 0 || valid_len > m {
        return Err(KvdError::InvalidArg(format!(
            "valid_len {valid_len} out of range for block of {m}"
        )));
    }
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(KvdError::InvalidArg(format!("retention {rho} outside (0, 1]")));
    }
    let sinks = sink_count.min(valid_len);
    let k = retained_count(rho, valid_len - sinks);
    if k == 0 && sinks == 0 {
        return Err(KvdError::InvalidArg(
            "retention keeps zero rows and there are no sinks".into(),
        ));
    }

    let positions: Vec<u32> = (0..m as u32).map(|i| pos_offset + i).collect();

    // Pass 1: adapted forward to the scorer layer. No routing yet (nothing
    // is selected), so Q/O stay frozen; K/V adapters apply throughout.
    let pass1 = forward(
        g,
        cfg,
        base,
        FwdOpts {
            tokens: block,
            positions: &positions,
            prefix: None,
            adapters: Some(adapters.ctx(None, None)),
            stop_after_layer: Some(cfg.scorer_layer),
            want_kv: false,
            want_logits: false,
            want_attention: false,
        },
    )?;
    let hidden = pass1.hidden.expect("stop_after_layer set");
    let scores_node = adapters.scorer(g, hidden)?;
    let scores_full: Vec<f32> = g.value(scores_node).data().to_vec();

    // Padding rows (>= valid_len) are excluded from the ranking.
    let plan = select_topk(&scores_full[..valid_len], k, sinks)?;

    // Pass 2: full adapted forward with conditional routing.
    let mut mask = Tensor::zeros(m, 1);
    for &i in &plan.indices {
        mask.set(i, 0, 1.0);
    }
    let mask_node = g.constant(mask);
    let (route_col, sel_mask) = match cfg.routing {
        RoutingMode::QueryOutput => (Some(mask_node), None),
        RoutingMode::SelectionEmbedding => (None, Some(mask_node)),
    };
    let pass2 = forward(
        g,
        cfg,
        base,
        FwdOpts {
            tokens: block,
            positions: &positions,
            prefix: None,
            adapters: Some(adapters.ctx(route_col, sel_mask)),
            stop_after_layer: None,
            want_kv: true,
            want_logits: false,
            want_attention: false,
        },
    )?;

    let rows = plan.rows();
    let mut kv = Vec::with_capacity(cfg.n_layers);
    for &(k_node, v_node) in &pass2.kv {
        kv.push((g.gather(k_node, &rows)?, g.gather(v_node, &rows)?));
    }

    // Decay factors: ones over sinks, sigmoid of scores over selected rows.
    let sel_scores = g.gather(scores_node, &plan.indices)?;
    let sel_row = g.transpose(sel_scores)?;
    let sel_sigma = g.sigmoid(sel_row)?;
    let sigma = if sinks > 0 {
        let ones = g.constant(Tensor::full(1, sinks, 1.0));
        g.concat(ones, sel_sigma, 1)?
    } else {
        sel_sigma
    };

    let scores_selected = plan.indices.iter().map(|&i| scores_full[i]).collect();
    Ok(EncodedBlock {
        positions: rows.iter().map(|&r| positions[r]).collect(),
        plan,
        kv,
        sigma,
        scores_full,
        scores_selected,
    })
}

/// Question-independent compressed encoding of a whole context with
/// trained adapters. This is the inference path: one graph, values
/// extracted, no gradients kept. The context is encoded in one block
/// (folding is a training-time device).
pub fn encode_compressed(
    cfg: &ModelConfig,
    params: &BaseParams,
    adapters: &AdapterSet,
    ctx: &[u32],
    rho: f64,
) -> Result<CompressedCache> {
    if ctx.is_empty() {
        return Err(KvdError::InvalidArg("cannot compress an empty context".into()));
    }
    if ctx.len() > cfg.max_pos {
        return Err(KvdError::Overlength {
            len: ctx.len(),
            max_pos: cfg.max_pos,
        });
    }
    let mut g = Graph::new();
    let base = BoundBase::bind(&mut g, params, false)?;
    let bound = BoundAdapters::bind(&mut g, cfg, adapters, false)?;
    let block = build_encode(
        &mut g,
        cfg,
        &base,
        &bound,
        ctx,
        ctx.len(),
        0,
        cfg.sink_count,
        rho,
    )?;
    Ok(CompressedCache {
        layers: block
            .kv
            .iter()
            .map(|&(k, v)| LayerKv {
                keys: g.value(k).clone(),
                values: g.value(v).clone(),
            })
            .collect(),
        position_ids: block.positions,
        scores: block.scores_selected,
        sink_count: block.plan.sink_count,
        origin_len: ctx.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{decode_step, encode_context};
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 32,
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            head_dim: 8,
            max_pos: 512,
            fold_len: 16,
            scorer_layer: 0,
            sink_count: 2,
            adapter_rank: 4,
            lora_alpha: 2.0,
            ..Default::default()
        }
    }

    /// Random model at realistic weight scales so attention logits are
    /// O(1) and decay-path gradients are resolvable.
    fn setup(seed: u64) -> (ModelConfig, BaseParams, AdapterSet) {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BaseParams::init(&cfg, &mut rng);
        let d = cfg.d_model;
        *params.map_mut().get_mut("embed").unwrap() =
            Tensor::randn(cfg.vocab_size, d, 0.3, &mut rng);
        for l in 0..cfg.n_layers {
            for w in ["wq", "wk", "wv"] {
                *params.map_mut().get_mut(&format!("l{l}.att.{w}")).unwrap() =
                    Tensor::randn(d, d, 0.3, &mut rng);
            }
            *params.map_mut().get_mut(&format!("l{l}.att.wo")).unwrap() =
                Tensor::randn(d, d, 0.2, &mut rng);
            *params.map_mut().get_mut(&format!("l{l}.mlp.w2")).unwrap() =
                Tensor::randn(4 * d, d, 0.2, &mut rng);
        }
        let adapters = AdapterSet::init(&cfg, &mut rng);
        (cfg, params, adapters)
    }

    fn ctx_tokens(n: usize) -> Vec<u32> {
        (0..n).map(|i| (i * 7 % 24 + 8) as u32).collect()
    }

    #[test]
    fn scorer_emits_one_score_per_token() {
        let (cfg, _params, adapters) = setup(1);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let hidden = Tensor::randn(5, cfg.d_model, 1.0, &mut rng);
        let scores = score_tokens(&cfg, &adapters, &hidden).unwrap();
        assert_eq!(scores.len(), 5);
    }

    #[test]
    fn zero_scorer_degenerates_to_low_index_tiebreak() {
        let (cfg, _params, _adapters) = setup(1);
        let zeroed = AdapterSet::zeros(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let hidden = Tensor::randn(6, cfg.d_model, 1.0, &mut rng);
        let scores = score_tokens(&cfg, &zeroed, &hidden).unwrap();
        assert!(scores.iter().all(|&s| s == 0.0));
        let plan = select_topk(&scores, 3, 0).unwrap();
        assert_eq!(plan.indices, vec![0, 1, 2]);
    }

    #[test]
    fn topk_examples() {
        let plan = select_topk(&[0.9, 0.1, 0.5], 2, 0).unwrap();
        assert_eq!(plan.indices, vec![0, 2]);
        let plan = select_topk(&[0.5, 0.5], 1, 0).unwrap();
        assert_eq!(plan.indices, vec![0]);
        let all = select_topk(&[0.3, 0.2, 0.1, 0.4], 3, 1).unwrap();
        assert_eq!(all.indices, vec![1, 2, 3]);
        assert!(select_topk(&[0.1, 0.2], 3, 0).is_err());
    }

    #[test]
    fn topk_matches_full_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let n = rng.gen_range(1..40);
            let sinks = rng.gen_range(0..=n.min(4));
            let k = rng.gen_range(0..=n - sinks);
            let scores: Vec<f32> = (0..n).map(|_| (rng.gen_range(0..8) as f32) / 4.0).collect();
            let plan = select_topk(&scores, k, sinks).unwrap();

            // Oracle: stable sort of (score desc, index asc) over non-sinks.
            let mut order: Vec<usize> = (sinks..n).collect();
            order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
            let mut expect: Vec<usize> = order[..k].to_vec();
            expect.sort_unstable();
            assert_eq!(plan.indices, expect);
        }
    }

    #[test]
    fn topk_invariant_under_constant_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..100 {
            let n = rng.gen_range(2..30);
            let scores: Vec<f32> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let shifted: Vec<f32> = scores.iter().map(|s| s + 1.5).collect();
            let k = rng.gen_range(0..=n);
            let a = select_topk(&scores, k, 0).unwrap();
            let b = select_topk(&shifted, k, 0).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn apply_selection_identity_when_everything_kept() {
        let (cfg, params, _adapters) = setup(2);
        let ctx = ctx_tokens(8);
        let cache = encode_context(&cfg, &params, &ctx).unwrap();
        let scores = vec![0.0f32; 8];
        let plan = select_topk(&scores, 8 - cfg.sink_count, cfg.sink_count).unwrap();
        let cc = apply_selection(&cache, &plan, &scores).unwrap();
        assert_eq!(cc.rows(), 8);
        for (lc, lf) in cc.layers.iter().zip(cache.layers.iter()) {
            assert_eq!(lc.keys, lf.keys);
            assert_eq!(lc.values, lf.values);
        }
        assert_eq!(cc.position_ids, cache.position_ids);
    }

    #[test]
    fn apply_selection_copies_requested_rows() {
        let (cfg, params, _adapters) = setup(2);
        let ctx = ctx_tokens(4);
        let cache = encode_context(&cfg, &params, &ctx).unwrap();
        let plan = SelectionPlan {
            indices: vec![0, 2],
            sink_count: 0,
        };
        let cc = apply_selection(&cache, &plan, &[0.0; 4]).unwrap();
        assert_eq!(cc.rows(), 2);
        for (lc, lf) in cc.layers.iter().zip(cache.layers.iter()) {
            assert_eq!(lc.keys.row_slice(0), lf.keys.row_slice(0));
            assert_eq!(lc.keys.row_slice(1), lf.keys.row_slice(2));
            assert_eq!(lc.values.row_slice(1), lf.values.row_slice(2));
        }
    }

    #[test]
    fn quarter_retention_byte_budget() {
        // Layout arithmetic at N=1024, sinks=4, rho=0.25.
        let (cfg, params, _adapters) = setup(3);
        let n = 256; // scaled-down stand-in with the same arithmetic shape
        let ctx = ctx_tokens(n);
        let cache = encode_context(&cfg, &params, &ctx).unwrap();
        let scores = vec![0.0f32; n];
        let k = retained_count(0.25, n - cfg.sink_count);
        let plan = select_topk(&scores, k, cfg.sink_count).unwrap();
        let cc = apply_selection(&cache, &plan, &scores).unwrap();
        let ratio = cc.byte_size() as f64 / cache.byte_size() as f64;
        assert!(
            ratio >= 0.25 && ratio <= 0.27,
            "byte ratio {ratio} outside [0.25, 0.27]"
        );
    }

    #[test]
    fn decay_examples() {
        let a = decay_attention(&[1.0, 2.0], &[0.0, 0.0]);
        assert_eq!(a, vec![0.5, 1.0]);
        let b = decay_attention(&[1.0], &[20.0]);
        assert!((b[0] - 1.0).abs() < 1e-8);
        let c = decay_attention(&[2.0, -4.0], &[0.0, 3f32.ln()]);
        assert!((c[0] - 1.0).abs() < 1e-6);
        assert!((c[1] + 3.0).abs() < 1e-6);
    }

    #[test]
    fn decay_monotone_in_score() {
        let scores = [-2.0f32, -0.5, 0.0, 0.5, 2.0];
        let pos: Vec<f32> = scores.iter().map(|&s| sigmoid(s) * 1.5).collect();
        let neg: Vec<f32> = scores.iter().map(|&s| sigmoid(s) * -1.5).collect();
        for w in pos.windows(2) {
            assert!(w[1] > w[0]);
        }
        for w in neg.windows(2) {
            assert!(w[1] < w[0]);
        }
    }

    #[test]
    fn adapter_apply_identity_and_hand_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn(3, 4, 1.0, &mut rng);
        let wx = Tensor::randn(3, 4, 1.0, &mut rng);
        // B = 0 keeps the base output bit-exact.
        let a = Tensor::randn(4, 2, 1.0, &mut rng);
        let b = Tensor::zeros(2, 4);
        let out = adapter_apply(&wx, &x, &a, &b, 2.0).unwrap();
        assert_eq!(out, wx);

        // r=1, A = e1, B = e1^T, alpha = 1: adds x's first column onto the
        // first output coordinate.
        let a = Tensor::new(4, 1, vec![1.0, 0.0, 0.0, 0.0]);
        let b = Tensor::new(1, 4, vec![1.0, 0.0, 0.0, 0.0]);
        let out = adapter_apply(&wx, &x, &a, &b, 1.0).unwrap();
        for r in 0..3 {
            assert!((out.at(r, 0) - (wx.at(r, 0) + x.at(r, 0))).abs() < 1e-6);
            assert_eq!(out.at(r, 1), wx.at(r, 1));
        }
    }

    #[test]
    fn adapter_rank_doubling_scales_by_inv_sqrt2() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::randn(2, 4, 1.0, &mut rng);
        let wx = Tensor::zeros(2, 4);
        let a1 = Tensor::randn(4, 2, 1.0, &mut rng);
        let b1 = Tensor::randn(2, 4, 1.0, &mut rng);
        let out1 = adapter_apply(&wx, &x, &a1, &b1, 1.0).unwrap();

        // Pad rank 2 -> 4 with zero columns/rows: same product, new scale.
        let mut a2 = Tensor::zeros(4, 4);
        let mut b2 = Tensor::zeros(4, 4);
        for r in 0..4 {
            for c in 0..2 {
                a2.set(r, c, a1.at(r, c));
            }
        }
        for r in 0..2 {
            for c in 0..4 {
                b2.set(r, c, b1.at(r, c));
            }
        }
        let out2 = adapter_apply(&wx, &x, &a2, &b2, 1.0).unwrap();
        for i in 0..out1.len() {
            let expect = out1.data()[i] / 2f32.sqrt();
            assert!((out2.data()[i] - expect).abs() < 1e-5);
        }
    }

    #[test]
    fn encode_compressed_row_count_follows_rho() {
        let (cfg, params, adapters) = setup(7);
        let ctx = ctx_tokens(100);
        let cc = encode_compressed(&cfg, &params, &adapters, &ctx, 0.25).unwrap();
        // round(0.25 * (100 - 2)) = 25 selected + 2 sinks (small_cfg sinks=2).
        assert_eq!(cc.rows(), 25 + cfg.sink_count);
        assert_eq!(cc.origin_len, 100);
        assert!(cc.position_ids.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn encode_compressed_is_deterministic() {
        let (cfg, params, adapters) = setup(8);
        let ctx = ctx_tokens(40);
        let a = encode_compressed(&cfg, &params, &adapters, &ctx, 0.3).unwrap();
        let b = encode_compressed(&cfg, &params, &adapters, &ctx, 0.3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn full_retention_zero_adapters_matches_uncompressed_logits() {
        let (cfg, params, _) = setup(9);
        let zero = AdapterSet::zeros(&cfg);
        let ctx = ctx_tokens(24);
        let cc = encode_compressed(&cfg, &params, &zero, &ctx, 1.0).unwrap();
        assert_eq!(cc.rows(), ctx.len());
        let full = encode_context(&cfg, &params, &ctx).unwrap();

        let mut dc_c = cc.to_decode_cache(false);
        let mut dc_f = crate::model::DecodeCache::from_kv(&full);
        let probe = 9u32;
        let lc = decode_step(&cfg, &params, &mut dc_c, probe).unwrap();
        let lf = decode_step(&cfg, &params, &mut dc_f, probe).unwrap();
        let max_d = lc
            .data()
            .iter()
            .zip(lf.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max_d < 1e-4, "identity recovery off by {max_d}");
    }

    #[test]
    fn retained_rows_match_adapted_encoder_rows_exactly() {
        // Layer-consistency: compressed rows are verbatim copies of the
        // adapted pass-2 cache at the selected indices, for every layer.
        let (cfg, params, adapters) = setup(10);
        let ctx = ctx_tokens(20);
        let mut g = Graph::new();
        let base = BoundBase::bind(&mut g, &params, false).unwrap();
        let bound = BoundAdapters::bind(&mut g, &cfg, &adapters, false).unwrap();
        let block = build_encode(
            &mut g,
            &cfg,
            &base,
            &bound,
            &ctx,
            ctx.len(),
            0,
            cfg.sink_count,
            0.4,
        )
        .unwrap();
        let cc = encode_compressed(&cfg, &params, &adapters, &ctx, 0.4).unwrap();
        assert_eq!(cc.position_ids, block.positions);
        for (l, &(k_node, _)) in block.kv.iter().enumerate() {
            assert_eq!(&cc.layers[l].keys, g.value(k_node));
        }
    }

    #[test]
    fn padding_rows_do_not_change_scores_or_selection() {
        let (cfg, params, adapters) = setup(11);
        let ctx = ctx_tokens(12);
        let mut padded = ctx.clone();
        padded.extend([tokens::PAD; 4]);

        let run = |block: &[u32], valid: usize| {
            let mut g = Graph::new();
            let base = BoundBase::bind(&mut g, &params, false).unwrap();
            let bound = BoundAdapters::bind(&mut g, &cfg, &adapters, false).unwrap();
            let b = build_encode(&mut g, &cfg, &base, &bound, block, valid, 0, cfg.sink_count, 0.5)
                .unwrap();
            (b.scores_full[..valid].to_vec(), b.plan)
        };
        let (scores_a, plan_a) = run(&ctx, 12);
        let (scores_b, plan_b) = run(&padded, 12);
        assert_eq!(scores_a, scores_b);
        assert_eq!(plan_a, plan_b);
    }

    #[test]
    fn scorer_gradient_flows_through_decay() {
        // Nonzero d(loss)/d(scorer) via the decay path, checked against a
        // central finite difference along a random direction.
        let (cfg, params, adapters) = setup(12);
        let ctx = ctx_tokens(10);
        let question = [tokens::QUERY, 9, 3];

        // Builds the full student pipeline (two-pass encode + continuation
        // over the compressed cache) and a mean-square-logit loss.
        let build = |set: &AdapterSet, trainable: bool| -> (Graph, NodeId, f64) {
            let mut g = Graph::new();
            let base = BoundBase::bind(&mut g, &params, false).unwrap();
            let bound = BoundAdapters::bind(&mut g, &cfg, set, trainable).unwrap();
            let block = build_encode(
                &mut g,
                &cfg,
                &base,
                &bound,
                &ctx,
                ctx.len(),
                0,
                cfg.sink_count,
                0.5,
            )
            .unwrap();
            let positions: Vec<u32> = (0..question.len() as u32)
                .map(|i| ctx.len() as u32 + i)
                .collect();
            let out = forward(
                &mut g,
                &cfg,
                &base,
                FwdOpts {
                    tokens: &question,
                    positions: &positions,
                    prefix: Some(crate::model::Prefix {
                        kv: block.kv.clone(),
                        sigma: Some(block.sigma),
                        len: block.plan.rows().len(),
                    }),
                    adapters: None,
                    stop_after_layer: None,
                    want_kv: false,
                    want_logits: true,
                    want_attention: false,
                },
            )
            .unwrap();
            let logits = out.logits.unwrap();
            // Host f64 copy of the same loss so the finite difference is
            // not limited by f32 resolution.
            let lv = g.value(logits);
            let host: f64 = lv.data().iter().map(|&v| v as f64 * v as f64).sum::<f64>()
                / lv.len() as f64;
            let sq = g.mul(logits, logits).unwrap();
            let loss = g.mean(sq, None).unwrap();
            (g, loss, host)
        };

        let (g, loss, _) = build(&adapters, true);
        let grads = g.gradients(loss, &["scorer.w2"]).unwrap();
        let gw2 = &grads["scorer.w2"];
        assert!(gw2.max_abs() > 0.0, "no gradient reached the scorer");

        // Directional finite difference on scorer.w2.
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let dir = Tensor::randn(gw2.rows(), gw2.cols(), 1.0, &mut rng);
        let eps = 1e-3f32;
        let mut plus = adapters.clone();
        let mut minus = adapters.clone();
        for (v, d) in plus
            .map_mut()
            .get_mut("scorer.w2")
            .unwrap()
            .data_mut()
            .iter_mut()
            .zip(dir.data())
        {
            *v += eps * d;
        }
        for (v, d) in minus
            .map_mut()
            .get_mut("scorer.w2")
            .unwrap()
            .data_mut()
            .iter_mut()
            .zip(dir.data())
        {
            *v -= eps * d;
        }
        let (_, _, loss_p) = build(&plus, false);
        let (_, _, loss_m) = build(&minus, false);
        let fd = (loss_p - loss_m) / (2.0 * eps as f64);
        let analytic: f64 = gw2
            .data()
            .iter()
            .zip(dir.data())
            .map(|(&g, &d)| g as f64 * d as f64)
            .sum();
        let rel = (fd - analytic).abs() / analytic.abs().max(1e-12);
        assert!(
            rel < 1e-2,
            "scorer gradient mismatch: fd {fd}, analytic {analytic}, rel {rel}"
        );
    }
}
