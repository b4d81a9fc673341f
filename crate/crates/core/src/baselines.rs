//! Training-free heavy-hitter (H2) cache eviction.
//!
//! Accumulated attention mass per key decides which rows to keep. In the
//! question-aware form the question's attention over the context
//! participates in the ranking; in the question-independent form only
//! context-internal attention counts, and the question later attends to
//! the compressed context alone. Selection is per layer (the ledgers
//! differ by layer), sinks are always kept, and no parameters are
//! involved.

use crate::compressor::SelectionPlan;
use crate::config::ModelConfig;
use crate::error::{KvdError, Result};
use crate::model::{encode_with_attention, BaseParams, DecodeCache, KvCache, LayerKv};
use crate::numerics::Tensor;

/// Which queries contribute attention mass to the ledger.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LedgerScope {
    /// Only context tokens attending to the context (question-independent).
    ContextOnly,
    /// Context plus question tokens (question-aware).
    ContextAndQuestion,
}

/// Per-layer accumulated attention mass per context key position.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionLedger {
    pub per_layer: Vec<Vec<f64>>,
}

/// Sums softmaxed attention weights onto each context key. `attn` holds
/// one head-averaged matrix per layer over a sequence whose first
/// `ctx_len` rows are the context (any further rows are the question).
pub fn h2_accumulate(
    attn: &[Tensor],
    ctx_len: usize,
    scope: LedgerScope,
) -> Result<AttentionLedger> {
    let mut per_layer = Vec::with_capacity(attn.len());
    for (l, a) in attn.iter().enumerate() {
        let (rows, cols) = a.shape();
        if cols < ctx_len || rows != cols {
            return Err(KvdError::InvalidArg(format!(
                "layer {l}: attention {rows}x{cols} cannot cover context of {ctx_len}"
            )));
        }
        let query_rows = match scope {
            LedgerScope::ContextOnly => ctx_len,
            LedgerScope::ContextAndQuestion => rows,
        };
        // Causal rows must each be a distribution before accumulation.
        for r in 0..query_rows {
            let s: f64 = a.row_slice(r).iter().map(|&v| v as f64).sum();
            if (s - 1.0).abs() > 1e-4 {
                return Err(KvdError::InvalidArg(format!(
                    "layer {l} row {r} attention sums to {s}, not 1"
                )));
            }
        }
        let mut ledger = vec![0.0f64; ctx_len];
        for r in 0..query_rows {
            let row = a.row_slice(r);
            for (j, acc) in ledger.iter_mut().enumerate() {
                *acc += row[j] as f64;
            }
        }
        per_layer.push(ledger);
    }
    Ok(AttentionLedger { per_layer })
}

/// Top-k positions of one layer's ledger, sinks always kept, ties to the
/// lower index.
pub fn h2_select(ledger: &[f64], k: usize, sink_count: usize) -> Result<SelectionPlan> {
    let n = ledger.len();
    if sink_count > n || k > n - sink_count {
        return Err(KvdError::InvalidArg(format!(
            "h2 top-k out of range: k={k}, sinks={sink_count}, n={n}"
        )));
    }
    let mut order: Vec<usize> = (sink_count..n).collect();
    order.sort_by(|&a, &b| {
        ledger[b]
            .partial_cmp(&ledger[a])
            .expect("ledger values are finite sums of probabilities")
            .then(a.cmp(&b))
    });
    let mut indices: Vec<usize> = order.into_iter().take(k).collect();
    indices.sort_unstable();
    Ok(SelectionPlan {
        indices,
        sink_count,
    })
}

/// Heavy-hitter compressed cache. Selection differs per layer, so each
/// layer carries its own retained positions.
#[derive(Debug, Clone, PartialEq)]
pub struct H2Cache {
    pub layers: Vec<LayerKv>,
    pub per_layer_positions: Vec<Vec<u32>>,
    pub sink_count: usize,
    pub origin_len: usize,
}

impl H2Cache {
    pub fn rows(&self) -> usize {
        self.per_layer_positions.first().map_or(0, |p| p.len())
    }

    /// Generation state; heavy-hitter caches are never decayed.
    pub fn to_decode_cache(&self) -> DecodeCache {
        DecodeCache {
            layers: self.layers.clone(),
            sigma: vec![1.0; self.rows()],
            next_pos: self.origin_len as u32,
        }
    }
}

/// Applies per-layer ledger selection to a full cache.
pub fn h2_compress(
    cache: &KvCache,
    ledger: &AttentionLedger,
    k: usize,
    sink_count: usize,
) -> Result<H2Cache> {
    if ledger.per_layer.len() != cache.layers.len() {
        return Err(KvdError::InvalidArg(
            "ledger layer count does not match cache".into(),
        ));
    }
    let n = cache.len();
    let d = cache.layers.first().map_or(0, |l| l.keys.cols());
    let mut layers = Vec::with_capacity(cache.layers.len());
    let mut per_layer_positions = Vec::with_capacity(cache.layers.len());
    for (layer, ledger) in cache.layers.iter().zip(&ledger.per_layer) {
        if ledger.len() != n {
            return Err(KvdError::InvalidArg(
                "ledger length does not match cache length".into(),
            ));
        }
        let plan = h2_select(ledger, k, sink_count)?;
        let rows = plan.rows();
        let mut keys = Tensor::zeros(0, d);
        let mut values = Tensor::zeros(0, d);
        for &r in &rows {
            keys.push_rows(&Tensor::new(1, d, layer.keys.row_slice(r).to_vec()));
            values.push_rows(&Tensor::new(1, d, layer.values.row_slice(r).to_vec()));
        }
        per_layer_positions.push(rows.iter().map(|&r| cache.position_ids[r]).collect());
        layers.push(LayerKv { keys, values });
    }
    Ok(H2Cache {
        layers,
        per_layer_positions,
        sink_count,
        origin_len: n,
    })
}

/// End-to-end heavy-hitter compression of a context. With a question the
/// ledger is question-aware (H2A); without one it is question-independent
/// (H2I). Either way only context rows are retained, so the compressed
/// cache the question attends to has the same shape.
pub fn h2_pipeline(
    cfg: &ModelConfig,
    params: &BaseParams,
    ctx: &[u32],
    question: Option<&[u32]>,
    rho: f64,
) -> Result<H2Cache> {
    if ctx.is_empty() {
        return Err(KvdError::InvalidArg("cannot compress an empty context".into()));
    }
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(KvdError::InvalidArg(format!("retention {rho} outside (0, 1]")));
    }
    let mut seq = ctx.to_vec();
    let scope = match question {
        Some(q) => {
            seq.extend_from_slice(q);
            LedgerScope::ContextAndQuestion
        }
        None => LedgerScope::ContextOnly,
    };
    let (cache, attn) = encode_with_attention(cfg, params, &seq)?;
    let ledger = h2_accumulate(&attn, ctx.len(), scope)?;
    // Keep only the context rows of the combined cache.
    let ctx_cache = KvCache {
        layers: cache
            .layers
            .iter()
            .map(|l| {
                let d = l.keys.cols();
                LayerKv {
                    keys: Tensor::new(ctx.len(), d, l.keys.data()[..ctx.len() * d].to_vec()),
                    values: Tensor::new(ctx.len(), d, l.values.data()[..ctx.len() * d].to_vec()),
                }
            })
            .collect(),
        position_ids: cache.position_ids[..ctx.len()].to_vec(),
    };
    let sinks = cfg.sink_count.min(ctx.len());
    let k = crate::compressor::retained_count(rho, ctx.len() - sinks);
    h2_compress(&ctx_cache, &ledger, k, sinks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{decode_step, encode_context};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_single_query_ledger() {
        let a = Tensor::new(4, 4, vec![
            1.0, 0.0, 0.0, 0.0,
            0.5, 0.5, 0.0, 0.0,
            1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 0.0,
            0.25, 0.25, 0.25, 0.25,
        ]);
        let ledger = h2_accumulate(&[a], 4, LedgerScope::ContextOnly).unwrap();
        // Row 3 contributes 0.25 to every key.
        assert!((ledger.per_layer[0][3] - 0.25).abs() < 1e-6);
    }

    #[test]
    fn fully_attended_key_accumulates_query_count() {
        // Every row puts weight 1 on key 0.
        let mut a = Tensor::zeros(5, 5);
        for r in 0..5 {
            a.set(r, 0, 1.0);
        }
        let ledger = h2_accumulate(&[a], 5, LedgerScope::ContextOnly).unwrap();
        assert_eq!(ledger.per_layer[0][0], 5.0);
    }

    #[test]
    fn accumulate_matches_brute_force_on_random_causal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 4;
        let mut a = Tensor::zeros(n, n);
        for r in 0..n {
            let raw: Vec<f64> = (0..=r).map(|_| rng.gen_range(0.1..1.0)).collect();
            let s: f64 = raw.iter().sum();
            for (c, v) in raw.iter().enumerate() {
                a.set(r, c, (v / s) as f32);
            }
        }
        let ledger = h2_accumulate(&[a.clone()], n, LedgerScope::ContextOnly).unwrap();
        for j in 0..n {
            let brute: f64 = (0..n).map(|i| a.at(i, j) as f64).sum();
            assert!((ledger.per_layer[0][j] - brute).abs() < 1e-6);
        }
    }

    #[test]
    fn unnormalized_rows_rejected() {
        let a = Tensor::new(2, 2, vec![0.9, 0.0, 0.5, 0.5]);
        assert!(h2_accumulate(&[a], 2, LedgerScope::ContextOnly).is_err());
    }

    #[test]
    fn select_keeps_everything_at_full_budget() {
        let ledger = [0.3, 0.9, 0.1, 0.5];
        let plan = h2_select(&ledger, 3, 1).unwrap();
        assert_eq!(plan.indices, vec![1, 2, 3]);
        assert!(h2_select(&ledger, 4, 1).is_err());
    }

    #[test]
    fn select_matches_full_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let n = rng.gen_range(1..30);
            let sinks = rng.gen_range(0..=n.min(3));
            let k = rng.gen_range(0..=n - sinks);
            let ledger: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..6) as f64) / 3.0).collect();
            let plan = h2_select(&ledger, k, sinks).unwrap();
            let mut order: Vec<usize> = (sinks..n).collect();
            order.sort_by(|&a, &b| ledger[b].partial_cmp(&ledger[a]).unwrap().then(a.cmp(&b)));
            let mut expect = order[..k].to_vec();
            expect.sort_unstable();
            assert_eq!(plan.indices, expect);
        }
    }

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 32,
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            head_dim: 8,
            max_pos: 64,
            fold_len: 16,
            scorer_layer: 0,
            sink_count: 2,
            ..Default::default()
        }
    }

    fn params(cfg: &ModelConfig, seed: u64) -> BaseParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = BaseParams::init(cfg, &mut rng);
        for l in 0..cfg.n_layers {
            *p.map_mut().get_mut(&format!("l{l}.att.wo")).unwrap() =
                Tensor::randn(cfg.d_model, cfg.d_model, 0.1, &mut rng);
            *p.map_mut().get_mut(&format!("l{l}.mlp.w2")).unwrap() =
                Tensor::randn(4 * cfg.d_model, cfg.d_model, 0.1, &mut rng);
        }
        p
    }

    #[test]
    fn full_budget_pipeline_is_logit_identical_to_uncompressed() {
        let cfg = small_cfg();
        let p = params(&cfg, 7);
        let ctx: Vec<u32> = (0..12).map(|i| (i * 5 % 30 + 2) as u32).collect();
        let h2 = h2_pipeline(&cfg, &p, &ctx, None, 1.0).unwrap();
        assert_eq!(h2.rows(), ctx.len());

        let full = encode_context(&cfg, &p, &ctx).unwrap();
        let mut dc_a = h2.to_decode_cache();
        let mut dc_b = DecodeCache::from_kv(&full);
        let la = decode_step(&cfg, &p, &mut dc_a, 3).unwrap();
        let lb = decode_step(&cfg, &p, &mut dc_b, 3).unwrap();
        let max_d = la
            .data()
            .iter()
            .zip(lb.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max_d < 1e-5, "full-budget h2 drifted by {max_d}");
    }

    #[test]
    fn dominant_column_is_kept_in_every_layer() {
        // Hand-built ledgers with one giant entry; both layers must keep it.
        let cfg = small_cfg();
        let p = params(&cfg, 8);
        let ctx: Vec<u32> = (0..10).map(|i| (i + 2) as u32).collect();
        let cache = encode_context(&cfg, &p, &ctx).unwrap();
        let mut per_layer = vec![vec![0.1f64; 10]; cfg.n_layers];
        for l in &mut per_layer {
            l[7] = 9.0;
        }
        let h2 = h2_compress(&cache, &AttentionLedger { per_layer }, 2, 2).unwrap();
        for positions in &h2.per_layer_positions {
            assert!(positions.contains(&7));
        }
    }

    #[test]
    fn empty_question_gives_question_independent_plans() {
        let cfg = small_cfg();
        let p = params(&cfg, 9);
        let ctx: Vec<u32> = (0..14).map(|i| (i * 3 % 28 + 2) as u32).collect();
        let a = h2_pipeline(&cfg, &p, &ctx, None, 0.5).unwrap();
        let b = h2_pipeline(&cfg, &p, &ctx, Some(&[]), 0.5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn question_attention_can_change_the_plan() {
        // A constructed ledger pair: under context-only accumulation the
        // needle column loses; once the question row's mass is added it
        // wins. Uses raw matrices to stay deterministic.
        let n = 4;
        let mut ctx_attn = Tensor::zeros(n + 1, n + 1);
        // Context rows spread mass over early keys.
        ctx_attn.set(0, 0, 1.0);
        ctx_attn.set(1, 0, 0.8);
        ctx_attn.set(1, 1, 0.2);
        ctx_attn.set(2, 0, 0.7);
        ctx_attn.set(2, 1, 0.2);
        ctx_attn.set(2, 2, 0.1);
        ctx_attn.set(3, 0, 0.6);
        ctx_attn.set(3, 1, 0.3);
        ctx_attn.set(3, 3, 0.1);
        // The question row locks onto key 3 (the needle).
        ctx_attn.set(4, 3, 0.9);
        ctx_attn.set(4, 0, 0.1);

        let aware = h2_accumulate(
            &[ctx_attn.clone()],
            n,
            LedgerScope::ContextAndQuestion,
        )
        .unwrap();
        let independent = h2_accumulate(&[ctx_attn], n, LedgerScope::ContextOnly).unwrap();
        let plan_aware = h2_select(&aware.per_layer[0], 2, 0).unwrap();
        let plan_ind = h2_select(&independent.per_layer[0], 2, 0).unwrap();
        assert!(plan_aware.indices.contains(&3));
        assert!(!plan_ind.indices.contains(&3));
    }
}
