//! Synthetic corpora and the evaluation protocols: needle-in-a-haystack
//! accuracy grids and containment-accuracy extractive QA.
//!
//! Token vocabularies are structured, not semantic: filler tokens, needle
//! key tokens, and needle value tokens occupy disjoint ranges, so a value
//! can never occur in the haystack by accident. Compression always happens
//! before the question is revealed unless the method is explicitly
//! question-aware.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::baselines::h2_pipeline;
use crate::compressor::{encode_compressed, AdapterSet};
use crate::config::{tokens, ModelConfig};
use crate::error::{KvdError, Result};
use crate::model::{
    encode_context, forward_over_cache, generate_greedy, BaseParams, DecodeCache,
};
use crate::objective::{mixture_loss, LogitPair};
use crate::trainer::{teacher_logits, DistillExample};

/// Disjoint token ranges for the synthetic tasks, derived from the
/// vocabulary size: filler fills the lower half, needle keys the next
/// quarter, needle values the top quarter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaskVocab {
    pub filler: (u32, u32),
    pub keys: (u32, u32),
    pub values: (u32, u32),
}

impl TaskVocab {
    pub fn for_config(cfg: &ModelConfig) -> Self {
        let v = cfg.vocab_size as u32;
        TaskVocab {
            filler: (tokens::FIRST_FREE, v / 2),
            keys: (v / 2, 3 * v / 4),
            values: (3 * v / 4, v),
        }
    }

    fn draw(range: (u32, u32), rng: &mut ChaCha8Rng) -> u32 {
        rng.gen_range(range.0..range.1)
    }
}

/// One needle task instance: a haystack of filler with a key/value pair
/// planted at a position fraction, and the question that asks for it.
#[derive(Debug, Clone, PartialEq)]
pub struct NeedleSpec {
    pub haystack_len: usize,
    /// Fraction of the (non-sink) haystack where the key lands.
    pub position: f64,
}

/// Generates one needle example. The needle never lands inside the sink
/// prefix, and the value token cannot occur among the fillers.
pub fn gen_needle_example(
    cfg: &ModelConfig,
    spec: &NeedleSpec,
    rng: &mut ChaCha8Rng,
) -> Result<DistillExample> {
    let n = spec.haystack_len;
    if n > cfg.max_pos {
        return Err(KvdError::Overlength {
            len: n,
            max_pos: cfg.max_pos,
        });
    }
    let sinks = cfg.sink_count;
    if n < sinks + 2 {
        return Err(KvdError::InvalidArg(format!(
            "haystack of {n} cannot hold sinks plus a needle"
        )));
    }
    if !(0.0..=1.0).contains(&spec.position) {
        return Err(KvdError::InvalidArg(format!(
            "needle position {} outside [0, 1]",
            spec.position
        )));
    }
    let vocab = TaskVocab::for_config(cfg);
    let mut context: Vec<u32> = (0..n)
        .map(|_| TaskVocab::draw(vocab.filler, rng))
        .collect();
    let key = TaskVocab::draw(vocab.keys, rng);
    let value = TaskVocab::draw(vocab.values, rng);
    let span = (n - sinks - 2) as f64;
    let idx = sinks + (spec.position * span).round() as usize;
    context[idx] = key;
    context[idx + 1] = value;
    Ok(DistillExample {
        context,
        instruction: vec![tokens::QUERY, key],
        answer: vec![value],
    })
}

/// A training corpus of needle examples with mixed lengths and uniform
/// needle positions.
pub fn gen_needle_corpus(
    cfg: &ModelConfig,
    count: usize,
    lengths: &[usize],
    seed: u64,
) -> Result<Vec<DistillExample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let spec = NeedleSpec {
                haystack_len: lengths[rng.gen_range(0..lengths.len())],
                position: rng.gen_range(0.0..=1.0),
            };
            gen_needle_example(cfg, &spec, &mut rng)
        })
        .collect()
}

/// Flattens a triple into the full training sequence
/// `context ++ instruction ++ answer ++ EOS`.
pub fn example_sequence(ex: &DistillExample) -> Vec<u32> {
    let mut seq = ex.context.clone();
    seq.extend_from_slice(&ex.instruction);
    seq.extend_from_slice(&ex.answer);
    seq.push(tokens::EOS);
    seq
}

/// Copy-task sequence: `COPY payload SEP payload EOS`.
pub fn gen_copy_sequence(
    cfg: &ModelConfig,
    payload_len: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<u32> {
    let vocab = TaskVocab::for_config(cfg);
    let payload: Vec<u32> = (0..payload_len)
        .map(|_| TaskVocab::draw(vocab.filler, rng))
        .collect();
    let mut seq = vec![tokens::COPY];
    seq.extend_from_slice(&payload);
    seq.push(tokens::SEP);
    seq.extend_from_slice(&payload);
    seq.push(tokens::EOS);
    seq
}

/// How a context is turned into a decode-ready cache. Question-aware
/// methods may inspect the question; question-independent ones must
/// ignore it.
pub type CompressFn<'a> = dyn Fn(&[u32], &[u32]) -> Result<DecodeCache> + 'a;

/// The comparison set: no compression, scorer-distilled compression, and
/// heavy-hitter eviction in both forms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    None,
    Kvd,
    H2a,
    H2i,
}

impl Method {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Method::None),
            "kvd" => Ok(Method::Kvd),
            "h2a" => Ok(Method::H2a),
            "h2i" => Ok(Method::H2i),
            other => Err(KvdError::InvalidArg(format!(
                "unknown method `{other}` (expected kvd, h2a, h2i, or none)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::None => "none",
            Method::Kvd => "kvd",
            Method::H2a => "h2a",
            Method::H2i => "h2i",
        }
    }
}

/// Builds the compression closure for a method at a fixed retention.
pub fn make_compressor<'a>(
    method: Method,
    cfg: &'a ModelConfig,
    base: &'a BaseParams,
    adapters: Option<&'a AdapterSet>,
    rho: f64,
) -> Box<CompressFn<'a>> {
    match method {
        Method::None => Box::new(move |ctx, _q| {
            let cache = encode_context(cfg, base, ctx)?;
            Ok(DecodeCache::from_kv(&cache))
        }),
        Method::Kvd => {
            let adapters = adapters.expect("kvd compression needs adapters");
            Box::new(move |ctx, _q| {
                let cc = encode_compressed(cfg, base, adapters, ctx, rho)?;
                Ok(cc.to_decode_cache(cfg.decay_at_inference))
            })
        }
        Method::H2a => Box::new(move |ctx, q| {
            Ok(h2_pipeline(cfg, base, ctx, Some(q), rho)?.to_decode_cache())
        }),
        Method::H2i => {
            Box::new(move |ctx, _q| Ok(h2_pipeline(cfg, base, ctx, None, rho)?.to_decode_cache()))
        }
    }
}

/// One measured grid cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridCell {
    pub accuracy: f64,
    pub stderr: f64,
    pub n: usize,
}

/// Accuracy per (retention, length) cell, averaged over needle positions.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalGrid {
    pub lengths: Vec<usize>,
    pub retentions: Vec<f64>,
    /// Indexed `[retention][length]`.
    pub cells: Vec<Vec<GridCell>>,
}

impl EvalGrid {
    pub fn cell(&self, retention: f64, length: usize) -> Option<GridCell> {
        let ri = self.retentions.iter().position(|&r| r == retention)?;
        let li = self.lengths.iter().position(|&l| l == length)?;
        Some(self.cells[ri][li])
    }

    /// Tab-delimited table with a header row, one line per cell.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("length\tretention\taccuracy\tstderr\tn\n");
        for (ri, &r) in self.retentions.iter().enumerate() {
            for (li, &l) in self.lengths.iter().enumerate() {
                let c = self.cells[ri][li];
                out.push_str(&format!(
                    "{l}\t{r}\t{:.4}\t{:.4}\t{}\n",
                    c.accuracy, c.stderr, c.n
                ));
            }
        }
        out
    }
}

/// Grid evaluation parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub lengths: Vec<usize>,
    pub retentions: Vec<f64>,
    pub trials: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            lengths: vec![64, 128, 256, 512],
            retentions: vec![1.0, 0.25, 0.10, 0.05, 0.01],
            trials: 50,
        }
    }
}

pub fn binomial_stderr(p: f64, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    (p * (1.0 - p) / n as f64).sqrt()
}

/// Per-trial source of randomness; keyed by (seed, length, trial) only,
/// so every retention level and every method sees the same haystacks.
fn trial_rng(seed: u64, length: usize, trial: usize) -> ChaCha8Rng {
    let mut h: u64 = 0xcbf29ce484222325 ^ seed;
    for v in [length as u64, trial as u64] {
        for b in v.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    }
    ChaCha8Rng::seed_from_u64(h)
}

/// Needle retrieval accuracy grid. `compress_at` receives the retention
/// and returns the method's compression closure for it.
pub fn eval_needle<'a>(
    cfg: &ModelConfig,
    base: &BaseParams,
    compress_at: &dyn Fn(f64) -> Box<CompressFn<'a>>,
    grid: &GridSpec,
    seed: u64,
) -> Result<EvalGrid> {
    let mut cells = Vec::with_capacity(grid.retentions.len());
    for &rho in &grid.retentions {
        let compress = compress_at(rho);
        let mut row = Vec::with_capacity(grid.lengths.len());
        for &len in &grid.lengths {
            let mut correct = 0usize;
            for trial in 0..grid.trials {
                let mut rng = trial_rng(seed, len, trial);
                let position = rng.gen_range(0.0..=1.0);
                let ex = gen_needle_example(
                    cfg,
                    &NeedleSpec {
                        haystack_len: len,
                        position,
                    },
                    &mut rng,
                )?;
                let mut cache = compress(&ex.context, &ex.instruction)?;
                let out = generate_greedy(cfg, base, &mut cache, &ex.instruction, 4)?;
                if out.contains(&ex.answer[0]) {
                    correct += 1;
                }
            }
            let acc = correct as f64 / grid.trials as f64;
            row.push(GridCell {
                accuracy: acc,
                stderr: binomial_stderr(acc, grid.trials),
                n: grid.trials,
            });
        }
        cells.push(row);
    }
    Ok(EvalGrid {
        lengths: grid.lengths.clone(),
        retentions: grid.retentions.clone(),
        cells,
    })
}

/// Strips structural tokens before containment checks, the desk analogue
/// of punctuation stripping.
pub fn normalize_tokens(seq: &[u32]) -> Vec<u32> {
    seq.iter()
        .copied()
        .filter(|&t| t >= tokens::FIRST_FREE)
        .collect()
}

fn contains_subsequence(haystack: &[u32], needle: &[u32]) -> bool {
    if needle.is_empty() {
        return false;
    }
    haystack.windows(needle.len()).any(|w| w == needle)
}

/// Containment accuracy: a generation counts if, after normalization, it
/// contains the reference answer or is contained in it. (The two
/// directions both appear in practice; scoring accepts either.)
pub fn containment_match(generated: &[u32], truth: &[u32]) -> bool {
    let g = normalize_tokens(generated);
    let t = normalize_tokens(truth);
    if g.is_empty() || t.is_empty() {
        return false;
    }
    contains_subsequence(&g, &t) || contains_subsequence(&t, &g)
}

/// Extractive QA accuracy over examples, with binomial standard error.
/// Generation budget defaults to 128 tokens.
pub fn eval_containment_qa(
    cfg: &ModelConfig,
    base: &BaseParams,
    compress: &CompressFn<'_>,
    examples: &[DistillExample],
    max_new: usize,
) -> Result<(f64, f64)> {
    if examples.is_empty() {
        return Err(KvdError::InvalidArg("no evaluation examples".into()));
    }
    let mut correct = 0usize;
    for ex in examples {
        let mut cache = compress(&ex.context, &ex.instruction)?;
        let out = generate_greedy(cfg, base, &mut cache, &ex.instruction, max_new)?;
        if containment_match(&out, &ex.answer) {
            correct += 1;
        }
    }
    let acc = correct as f64 / examples.len() as f64;
    Ok((acc, binomial_stderr(acc, examples.len())))
}

/// Mean distillation loss between teacher and student distributions on
/// held-out triples; a direct, generation-free diagnostic of cache
/// quality.
pub fn eval_teacher_divergence(
    cfg: &ModelConfig,
    base: &BaseParams,
    compress: &CompressFn<'_>,
    examples: &[DistillExample],
) -> Result<f64> {
    if examples.is_empty() {
        return Err(KvdError::InvalidArg("no evaluation examples".into()));
    }
    let mut total = 0.0f64;
    for ex in examples {
        let cont = ex.continuation();
        let teacher = teacher_logits(cfg, base, ex)?;
        let cache = compress(&ex.context, &ex.instruction)?;
        let student = forward_over_cache(cfg, base, &cache, &cont)?;
        let mut mask = vec![true; cont.len()];
        mask[cont.len() - 1] = false;
        let pair = LogitPair {
            teacher,
            student,
            mask,
        };
        total += mixture_loss(&pair, cfg.lambda)?;
    }
    Ok(total / examples.len() as f64)
}
