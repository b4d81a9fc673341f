//! Training: base-LM pretraining on synthetic corpora, then cache
//! distillation that updates only the adapter set.
//!
//! Distillation folds long contexts into fixed-length segments encoded
//! independently (positions offset to their original values), samples a
//! retention fraction per example, runs the frozen teacher over the full
//! sequence and the adapted student over the compressed cache, and
//! applies the KL mixture between the two next-token distributions.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cachestore::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointKind};
use crate::compressor::{build_encode, AdapterSet, BoundAdapters};
use crate::config::{tokens, ModelConfig};
use crate::error::{KvdError, Result};
use crate::model::{forward, BaseParams, BoundBase, FwdOpts, Prefix};
use crate::numerics::{Graph, NodeId, Tensor};
use crate::objective::{cross_entropy_node, mixture_loss_node, softmax_f64};

/// One supervised triple. The context gets compressed; the instruction and
/// answer stay uncompressed and carry the loss.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DistillExample {
    pub context: Vec<u32>,
    pub instruction: Vec<u32>,
    pub answer: Vec<u32>,
}

impl DistillExample {
    pub fn validate(&self) -> Result<()> {
        if self.context.is_empty() || self.answer.is_empty() {
            return Err(KvdError::InvalidArg(
                "context and answer must be nonempty".into(),
            ));
        }
        Ok(())
    }

    /// The tokens the student decodes over the compressed cache:
    /// instruction, answer, then EOS.
    pub fn continuation(&self) -> Vec<u32> {
        let mut c = self.instruction.clone();
        c.extend_from_slice(&self.answer);
        c.push(tokens::EOS);
        c
    }
}

/// Which pretraining objective drives the adapters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Weighted forward/reverse KL against the teacher (the main loss).
    #[default]
    Mixture,
    /// Context reconstruction plus hard next-token cross-entropy;
    /// ablation baseline.
    AeLm,
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub steps: usize,
    pub seed: u64,
    pub retention_min: f64,
    pub retention_max: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub objective: Objective,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-5,
            batch: 32,
            steps: 1000,
            seed: 0,
            retention_min: 0.001,
            retention_max: 0.8,
            weight_decay: 0.01,
            grad_clip: 1.0,
            objective: Objective::Mixture,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.retention_min > 0.0
            && self.retention_min <= self.retention_max
            && self.retention_max <= 1.0)
        {
            return Err(KvdError::InvalidArg(format!(
                "retention bounds [{}, {}] invalid",
                self.retention_min, self.retention_max
            )));
        }
        if self.batch == 0 || self.lr <= 0.0 {
            return Err(KvdError::InvalidArg("batch and lr must be positive".into()));
        }
        Ok(())
    }
}

/// Log-uniform retention draw: covers the three orders of magnitude of the
/// sampling range evenly.
pub fn sample_retention(rng: &mut ChaCha8Rng, min: f64, max: f64) -> f64 {
    let (ln_min, ln_max) = (min.ln(), max.ln());
    (rng.gen_range(0.0..=1.0) * (ln_max - ln_min) + ln_min).exp()
}

/// A context split into fold-length segments, padded at the tail.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Folds {
    pub segments: Vec<Vec<u32>>,
    /// Non-pad token count per segment.
    pub valid_lens: Vec<usize>,
    pub origin_len: usize,
    pub fold_len: usize,
}

impl Folds {
    /// Original position of token `j` in segment `m`.
    pub fn offset(&self, m: usize) -> u32 {
        (m * self.fold_len) as u32
    }
}

/// Pads the context to a multiple of the fold length and cuts it into
/// independently encodable segments. Unfolding is implicit: segment `m`
/// covers original positions `m*F ..` and pad rows are never retained.
pub fn fold_context(ctx: &[u32], fold_len: usize) -> Result<Folds> {
    if fold_len == 0 {
        return Err(KvdError::InvalidArg("fold length must be positive".into()));
    }
    if ctx.is_empty() {
        return Err(KvdError::InvalidArg("cannot fold an empty context".into()));
    }
    let n_folds = ctx.len().div_ceil(fold_len);
    let mut segments = Vec::with_capacity(n_folds);
    let mut valid_lens = Vec::with_capacity(n_folds);
    for m in 0..n_folds {
        let start = m * fold_len;
        let end = ((m + 1) * fold_len).min(ctx.len());
        let mut seg = ctx[start..end].to_vec();
        valid_lens.push(seg.len());
        seg.resize(fold_len, tokens::PAD);
        segments.push(seg);
    }
    Ok(Folds {
        segments,
        valid_lens,
        origin_len: ctx.len(),
        fold_len,
    })
}

/// Student encoding of a whole context inside `g`: folds it if longer than
/// the fold length, compresses every fold at the same retention, and
/// returns the merged cache prefix plus continuation-ready metadata.
pub struct StudentCache {
    pub kv: Vec<(NodeId, NodeId)>,
    pub sigma: NodeId,
    pub rows: usize,
    pub positions: Vec<u32>,
}

pub fn student_encode(
    g: &mut Graph,
    cfg: &ModelConfig,
    base: &BoundBase,
    adapters: &BoundAdapters,
    ctx: &[u32],
    rho: f64,
    decay: bool,
) -> Result<StudentCache> {
    if cfg.fold_len <= cfg.sink_count {
        return Err(KvdError::InvalidArg(
            "fold length must exceed sink count".into(),
        ));
    }
    let folds = if ctx.len() > cfg.fold_len {
        fold_context(ctx, cfg.fold_len)?
    } else {
        Folds {
            segments: vec![ctx.to_vec()],
            valid_lens: vec![ctx.len()],
            origin_len: ctx.len(),
            fold_len: ctx.len().max(1),
        }
    };

    let mut merged: Option<StudentCache> = None;
    for (m, seg) in folds.segments.iter().enumerate() {
        let sinks = if m == 0 { cfg.sink_count } else { 0 };
        // A fold whose budget rounds to zero rows (and that holds no
        // sinks) contributes nothing; skip it rather than encode it.
        let usable = folds.valid_lens[m] - sinks.min(folds.valid_lens[m]);
        if sinks.min(folds.valid_lens[m]) == 0 && crate::compressor::retained_count(rho, usable) == 0
        {
            continue;
        }
        let block = build_encode(
            g,
            cfg,
            base,
            adapters,
            seg,
            folds.valid_lens[m],
            folds.offset(m),
            sinks,
            rho,
        )?;
        let rows = block.plan.rows().len();
        let sigma = if decay {
            block.sigma
        } else {
            g.constant(Tensor::full(1, rows, 1.0))
        };
        merged = Some(match merged {
            None => StudentCache {
                kv: block.kv,
                sigma,
                rows,
                positions: block.positions,
            },
            Some(prev) => {
                let mut kv = Vec::with_capacity(prev.kv.len());
                for (&(pk, pv), &(bk, bv)) in prev.kv.iter().zip(block.kv.iter()) {
                    kv.push((g.concat(pk, bk, 0)?, g.concat(pv, bv, 0)?));
                }
                let mut positions = prev.positions;
                positions.extend_from_slice(&block.positions);
                StudentCache {
                    kv,
                    sigma: g.concat(prev.sigma, sigma, 1)?,
                    rows: prev.rows + rows,
                    positions,
                }
            }
        });
    }
    merged.ok_or_else(|| {
        KvdError::InvalidArg("retention keeps zero rows and there are no sinks".into())
    })
}

/// Teacher logits over the aligned continuation rows: the full sequence is
/// run through the frozen base model and the last `M` rows are kept, where
/// row `j` is the distribution for the token after `continuation[j]`.
pub fn teacher_logits(
    cfg: &ModelConfig,
    base: &BaseParams,
    ex: &DistillExample,
) -> Result<Tensor> {
    let cont = ex.continuation();
    let mut seq = ex.context.clone();
    seq.extend_from_slice(&cont);
    let positions: Vec<u32> = (0..seq.len() as u32).collect();
    let mut g = Graph::new();
    let bound = BoundBase::bind(&mut g, base, false)?;
    let out = forward(
        &mut g,
        cfg,
        &bound,
        FwdOpts {
            tokens: &seq,
            positions: &positions,
            prefix: None,
            adapters: None,
            stop_after_layer: None,
            want_kv: false,
            want_logits: true,
            want_attention: false,
        },
    )?;
    let logits = g.value(out.logits.expect("logits requested"));
    let n = ex.context.len();
    let m = cont.len();
    let mut rows = Tensor::zeros(0, cfg.vocab_size);
    for r in n..n + m {
        rows.push_rows(&Tensor::new(1, cfg.vocab_size, logits.row_slice(r).to_vec()));
    }
    Ok(rows)
}

/// Row-softmax of teacher logits, computed in f64 and stored as f32
/// constants for the student loss.
pub fn teacher_probs(logits: &Tensor) -> Tensor {
    let (rows, cols) = logits.shape();
    let mut out = Tensor::zeros(rows, cols);
    for r in 0..rows {
        for (c, v) in softmax_f64(logits.row_slice(r)).iter().enumerate() {
            out.set(r, c, *v as f32);
        }
    }
    out
}

/// Builds the full per-example loss graph. Returns the graph and the
/// scalar loss node; gradients reach only the bound adapter leaves.
pub fn distill_example_graph(
    cfg: &ModelConfig,
    base: &BaseParams,
    adapters: &AdapterSet,
    ex: &DistillExample,
    rho: f64,
    decay: bool,
    objective: Objective,
) -> Result<(Graph, NodeId)> {
    ex.validate()?;
    let cont = ex.continuation();
    let m = cont.len();
    let n = ex.context.len();

    let mut g = Graph::new();
    let base_bound = BoundBase::bind(&mut g, base, false)?;
    let adapters_bound = BoundAdapters::bind(&mut g, cfg, adapters, true)?;
    let cache = student_encode(&mut g, cfg, &base_bound, &adapters_bound, &ex.context, rho, decay)?;

    let positions: Vec<u32> = (0..m as u32).map(|i| n as u32 + i).collect();
    let run_continuation = |g: &mut Graph, kv: Vec<(NodeId, NodeId)>, sigma, rows| {
        forward(
            g,
            cfg,
            &base_bound,
            FwdOpts {
                tokens: &cont,
                positions: &positions,
                prefix: Some(Prefix {
                    kv,
                    sigma: Some(sigma),
                    len: rows,
                }),
                adapters: None,
                stop_after_layer: None,
                want_kv: false,
                want_logits: true,
                want_attention: false,
            },
        )
    };

    match objective {
        Objective::Mixture => {
            let t_logits = teacher_logits(cfg, base, ex)?;
            let probs = teacher_probs(&t_logits);
            let out = run_continuation(&mut g, cache.kv, cache.sigma, cache.rows)?;
            let student_logits = out.logits.expect("logits requested");
            let mut mask = vec![true; m];
            mask[m - 1] = false; // the EOS query predicts nothing
            let loss = mixture_loss_node(&mut g, &probs, student_logits, &mask, cfg.lambda)?;
            Ok((g, loss))
        }
        Objective::AeLm => {
            // Reconstruction: replay the context tokens over the compressed
            // cache (positions continue past the context) and predict each
            // next context token.
            let recon_positions: Vec<u32> = (0..n as u32).map(|i| n as u32 + i).collect();
            let recon = forward(
                &mut g,
                cfg,
                &base_bound,
                FwdOpts {
                    tokens: &ex.context,
                    positions: &recon_positions,
                    prefix: Some(Prefix {
                        kv: cache.kv.clone(),
                        sigma: Some(cache.sigma),
                        len: cache.rows,
                    }),
                    adapters: None,
                    stop_after_layer: None,
                    want_kv: false,
                    want_logits: true,
                    want_attention: false,
                },
            )?;
            let mut recon_targets: Vec<u32> = ex.context[1..].to_vec();
            recon_targets.push(tokens::EOS);
            let mut recon_mask = vec![true; n];
            recon_mask[n - 1] = false;
            let ae = cross_entropy_node(
                &mut g,
                recon.logits.expect("logits requested"),
                &recon_targets,
                &recon_mask,
            )?;

            let out = run_continuation(&mut g, cache.kv, cache.sigma, cache.rows)?;
            let mut lm_targets: Vec<u32> = cont[1..].to_vec();
            lm_targets.push(tokens::EOS);
            let mut lm_mask = vec![true; m];
            lm_mask[m - 1] = false;
            let lm = cross_entropy_node(
                &mut g,
                out.logits.expect("logits requested"),
                &lm_targets,
                &lm_mask,
            )?;
            let loss = g.add(ae, lm)?;
            Ok((g, loss))
        }
    }
}

/// AdamW with decoupled weight decay and bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: usize,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Applies one update. Touches exactly the parameters that appear in
    /// `grads`.
    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Tensor>,
        grads: &BTreeMap<String, Tensor>,
    ) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, grad) in grads {
            let p = params
                .get_mut(name)
                .unwrap_or_else(|| panic!("optimizer saw unknown parameter `{name}`"));
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.rows(), p.cols()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.rows(), p.cols()));
            for i in 0..p.len() {
                let gi = grad.data()[i] as f64;
                let mi = self.beta1 * m.data()[i] as f64 + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v.data()[i] as f64 + (1.0 - self.beta2) * gi * gi;
                m.data_mut()[i] = mi as f32;
                v.data_mut()[i] = vi as f32;
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                let pi = p.data()[i] as f64;
                let update = m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * pi;
                p.data_mut()[i] = (pi - self.lr * update) as f32;
            }
        }
    }

    pub fn state_tensors(&self) -> (&BTreeMap<String, Tensor>, &BTreeMap<String, Tensor>) {
        (&self.m, &self.v)
    }

    pub fn restore_state(
        &mut self,
        t: usize,
        m: BTreeMap<String, Tensor>,
        v: BTreeMap<String, Tensor>,
    ) {
        self.t = t;
        self.m = m;
        self.v = v;
    }
}

/// Scales gradients so their global L2 norm is at most `clip`.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Tensor>, clip: f64) -> f64 {
    let mut sq = 0.0f64;
    for g in grads.values() {
        for &v in g.data() {
            sq += v as f64 * v as f64;
        }
    }
    let norm = sq.sqrt();
    if norm > clip && norm > 0.0 {
        let scale = (clip / norm) as f32;
        for g in grads.values_mut() {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

/// Everything a resumable distillation run carries.
pub struct TrainState {
    pub cfg: ModelConfig,
    pub train: TrainConfig,
    pub base: BaseParams,
    pub adapters: AdapterSet,
    pub opt: AdamW,
    pub rng: ChaCha8Rng,
    pub step: usize,
}

impl TrainState {
    pub fn new(
        cfg: ModelConfig,
        train: TrainConfig,
        base: BaseParams,
        adapters: AdapterSet,
    ) -> Self {
        let opt = AdamW::new(train.lr, train.weight_decay);
        let rng = ChaCha8Rng::seed_from_u64(train.seed);
        TrainState {
            cfg,
            train,
            base,
            adapters,
            opt,
            rng,
            step: 0,
        }
    }

    /// One optimizer step over a batch. Returns the mean example loss.
    /// Only adapter parameters change; the base stays frozen.
    pub fn distill_step(&mut self, batch: &[DistillExample]) -> Result<f64> {
        if batch.is_empty() {
            return Err(KvdError::InvalidArg("empty batch".into()));
        }
        let mut grad_sum: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut loss_sum = 0.0f64;
        for ex in batch {
            let rho = sample_retention(
                &mut self.rng,
                self.train.retention_min,
                self.train.retention_max,
            );
            let (g, loss) = distill_example_graph(
                &self.cfg,
                &self.base,
                &self.adapters,
                ex,
                rho,
                true,
                self.train.objective,
            )?;
            let loss_val = g.value(loss).at(0, 0) as f64;
            if !loss_val.is_finite() {
                return Err(KvdError::Diverged {
                    step: self.step,
                    detail: format!("loss {loss_val} on example with rho {rho:.4}"),
                });
            }
            loss_sum += loss_val;
            let grads = g.gradients_all(loss)?;
            for (name, grad) in grads {
                match grad_sum.get_mut(&name) {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(grad.data()) {
                            *a += b;
                        }
                    }
                    None => {
                        grad_sum.insert(name, grad);
                    }
                }
            }
        }
        let scale = 1.0 / batch.len() as f32;
        for g in grad_sum.values_mut() {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
        clip_grad_norm(&mut grad_sum, self.train.grad_clip);
        self.opt.step(self.adapters.map_mut(), &grad_sum);
        self.step += 1;
        Ok(loss_sum / batch.len() as f64)
    }

    /// Serializes adapters, optimizer moments, and rng position so a
    /// resumed run continues the exact loss trajectory.
    pub fn save(&self, path: &Path) -> Result<u64> {
        let mut ckpt = Checkpoint::default();
        for (name, t) in self.adapters.map() {
            ckpt.tensors.insert(name.clone(), t.clone());
        }
        let (m, v) = self.opt.state_tensors();
        for (name, t) in m {
            ckpt.tensors.insert(format!("opt.m.{name}"), t.clone());
        }
        for (name, t) in v {
            ckpt.tensors.insert(format!("opt.v.{name}"), t.clone());
        }
        ckpt.scalars.insert("step".into(), self.step as u64);
        ckpt.scalars.insert("opt.t".into(), self.opt.t as u64);
        ckpt.scalars.insert("rng.seed".into(), self.train.seed);
        let pos = self.rng.get_word_pos();
        ckpt.scalars.insert("rng.pos.lo".into(), pos as u64);
        ckpt.scalars.insert("rng.pos.hi".into(), (pos >> 64) as u64);
        save_checkpoint(path, &self.cfg, CheckpointKind::TrainState, &ckpt)
    }

    /// Restores a state saved by [`TrainState::save`].
    pub fn load(
        path: &Path,
        cfg: ModelConfig,
        train: TrainConfig,
        base: BaseParams,
    ) -> Result<Self> {
        let ckpt = load_checkpoint(path, &cfg, CheckpointKind::TrainState)?;
        let mut adapters = BTreeMap::new();
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, t) in ckpt.tensors {
            if let Some(rest) = name.strip_prefix("opt.m.") {
                m.insert(rest.to_string(), t);
            } else if let Some(rest) = name.strip_prefix("opt.v.") {
                v.insert(rest.to_string(), t);
            } else {
                adapters.insert(name, t);
            }
        }
        let step = ckpt.scalars.get("step").copied().unwrap_or(0) as usize;
        let opt_t = ckpt.scalars.get("opt.t").copied().unwrap_or(0) as usize;
        let seed = ckpt.scalars.get("rng.seed").copied().unwrap_or(train.seed);
        let lo = ckpt.scalars.get("rng.pos.lo").copied().unwrap_or(0) as u128;
        let hi = ckpt.scalars.get("rng.pos.hi").copied().unwrap_or(0) as u128;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_word_pos((hi << 64) | lo);
        let mut opt = AdamW::new(train.lr, train.weight_decay);
        opt.restore_state(opt_t, m, v);
        let mut train = train;
        train.seed = seed;
        Ok(TrainState {
            cfg,
            train,
            base,
            adapters: AdapterSet::from_map(adapters),
            opt,
            rng,
            step,
        })
    }
}

/// Saves just the trained adapter tensors (the artifact generation needs).
pub fn save_adapters(path: &Path, cfg: &ModelConfig, adapters: &AdapterSet) -> Result<u64> {
    let ckpt = Checkpoint {
        tensors: adapters.map().clone(),
        scalars: BTreeMap::new(),
    };
    save_checkpoint(path, cfg, CheckpointKind::Adapters, &ckpt)
}

pub fn load_adapters(path: &Path, cfg: &ModelConfig) -> Result<AdapterSet> {
    let ckpt = load_checkpoint(path, cfg, CheckpointKind::Adapters)?;
    let expect = AdapterSet::zeros(cfg);
    for (name, t) in expect.map() {
        match ckpt.tensors.get(name) {
            Some(found) if found.shape() == t.shape() => {}
            Some(found) => {
                return Err(KvdError::BadFormat {
                    path: path.display().to_string(),
                    detail: format!(
                        "adapter `{name}` has shape {:?}, expected {:?}",
                        found.shape(),
                        t.shape()
                    ),
                })
            }
            None => {
                return Err(KvdError::BadFormat {
                    path: path.display().to_string(),
                    detail: format!("adapter `{name}` missing"),
                })
            }
        }
    }
    Ok(AdapterSet::from_map(ckpt.tensors))
}

pub fn save_base(path: &Path, cfg: &ModelConfig, base: &BaseParams) -> Result<u64> {
    let ckpt = Checkpoint {
        tensors: base.map().clone(),
        scalars: BTreeMap::new(),
    };
    save_checkpoint(path, cfg, CheckpointKind::BaseParams, &ckpt)
}

pub fn load_base(path: &Path, cfg: &ModelConfig) -> Result<BaseParams> {
    let ckpt = load_checkpoint(path, cfg, CheckpointKind::BaseParams)?;
    Ok(BaseParams::from_map(ckpt.tensors))
}

/// Mean next-token cross-entropy over a batch of sequences, with
/// gradients for all base parameters.
fn base_lm_batch(
    cfg: &ModelConfig,
    base: &BaseParams,
    batch: &[&[u32]],
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let mut grad_sum: BTreeMap<String, Tensor> = BTreeMap::new();
    let mut loss_sum = 0.0f64;
    for &seq in batch {
        if seq.len() < 2 {
            return Err(KvdError::InvalidArg("sequence too short to train on".into()));
        }
        let positions: Vec<u32> = (0..seq.len() as u32).collect();
        let mut g = Graph::new();
        let bound = BoundBase::bind(&mut g, base, true)?;
        let out = forward(
            &mut g,
            cfg,
            &bound,
            FwdOpts {
                tokens: seq,
                positions: &positions,
                prefix: None,
                adapters: None,
                stop_after_layer: None,
                want_kv: false,
                want_logits: true,
                want_attention: false,
            },
        )?;
        let logits = out.logits.expect("logits requested");
        let mut targets: Vec<u32> = seq[1..].to_vec();
        targets.push(tokens::EOS);
        let mut mask = vec![true; seq.len()];
        mask[seq.len() - 1] = false;
        let loss = cross_entropy_node(&mut g, logits, &targets, &mask)?;
        loss_sum += g.value(loss).at(0, 0) as f64;
        for (name, grad) in g.gradients_all(loss)? {
            match grad_sum.get_mut(&name) {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(grad.data()) {
                        *a += b;
                    }
                }
                None => {
                    grad_sum.insert(name, grad);
                }
            }
        }
    }
    let scale = 1.0 / batch.len() as f32;
    for g in grad_sum.values_mut() {
        for v in g.data_mut() {
            *v *= scale;
        }
    }
    Ok((loss_sum / batch.len() as f64, grad_sum))
}

/// Progress record from base-LM training.
#[derive(Debug, Clone, Default)]
pub struct BaseTrainLog {
    pub train_loss: Vec<f64>,
    /// (step, held-out loss) pairs.
    pub heldout: Vec<(usize, f64)>,
}

/// Full-parameter next-token training on a synthetic corpus. A 5% tail of
/// the corpus is held out and evaluated periodically.
pub fn train_base_lm(
    corpus: &[Vec<u32>],
    cfg: &ModelConfig,
    train: &TrainConfig,
) -> Result<(BaseParams, BaseTrainLog)> {
    train.validate()?;
    if corpus.len() < 4 {
        return Err(KvdError::InvalidArg("corpus too small".into()));
    }
    let holdout_n = (corpus.len() / 20).max(1);
    let (train_set, holdout) = corpus.split_at(corpus.len() - holdout_n);

    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let mut base = BaseParams::init(cfg, &mut rng);
    let mut opt = AdamW::new(train.lr, train.weight_decay);
    let mut log = BaseTrainLog::default();
    let eval_every = (train.steps / 12).max(1);

    for step in 0..train.steps {
        let batch: Vec<&[u32]> = (0..train.batch)
            .map(|_| train_set[rng.gen_range(0..train_set.len())].as_slice())
            .collect();
        let (loss, mut grads) = base_lm_batch(cfg, &base, &batch)?;
        if !loss.is_finite() {
            return Err(KvdError::Diverged {
                step,
                detail: format!("base LM loss {loss}"),
            });
        }
        clip_grad_norm(&mut grads, train.grad_clip);
        opt.step(base.map_mut(), &grads);
        log.train_loss.push(loss);

        if step % eval_every == 0 || step + 1 == train.steps {
            let mut h = 0.0f64;
            for seq in holdout {
                let probe: Vec<&[u32]> = vec![seq.as_slice()];
                let (l, _) = base_lm_eval(cfg, &base, &probe)?;
                h += l;
            }
            log.heldout.push((step, h / holdout.len() as f64));
        }
    }
    Ok((base, log))
}

/// Forward-only cross-entropy (no gradients) for held-out evaluation.
fn base_lm_eval(
    cfg: &ModelConfig,
    base: &BaseParams,
    batch: &[&[u32]],
) -> Result<(f64, ())> {
    let mut loss_sum = 0.0f64;
    for &seq in batch {
        let positions: Vec<u32> = (0..seq.len() as u32).collect();
        let mut g = Graph::new();
        let bound = BoundBase::bind(&mut g, base, false)?;
        let out = forward(
            &mut g,
            cfg,
            &bound,
            FwdOpts {
                tokens: seq,
                positions: &positions,
                prefix: None,
                adapters: None,
                stop_after_layer: None,
                want_kv: false,
                want_logits: true,
                want_attention: false,
            },
        )?;
        let logits = g.value(out.logits.expect("logits requested"));
        let targets: Vec<u32> = seq[1..].to_vec();
        let mut head = Tensor::zeros(0, cfg.vocab_size);
        for r in 0..seq.len() - 1 {
            head.push_rows(&Tensor::new(1, cfg.vocab_size, logits.row_slice(r).to_vec()));
        }
        loss_sum += crate::objective::cross_entropy(&head, &targets)?;
    }
    Ok((loss_sum / batch.len() as f64, ()))
}
