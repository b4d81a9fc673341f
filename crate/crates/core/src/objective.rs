//! Distillation objectives.
//!
//! The student (compressed-cache) next-token distributions are matched to
//! the teacher (full-cache) distributions with a weighted mixture of
//! forward and reverse KL divergence. The teacher side is always detached:
//! its probabilities enter the loss graph as constants, so gradients flow
//! only to the student. An autoencode + language-modeling objective is
//! kept as an ablation baseline.

use crate::error::{KvdError, Result};
use crate::numerics::{Graph, NodeId, Tensor};

/// Probability floor inside logarithms; categorical teachers regularly
/// produce exact zeros.
pub const EPS: f64 = 1e-9;

/// Aligned teacher/student logits over the positions after the compressed
/// context, with a mask picking the rows that carry loss.
#[derive(Debug, Clone)]
pub struct LogitPair {
    pub teacher: Tensor,
    pub student: Tensor,
    pub mask: Vec<bool>,
}

impl LogitPair {
    pub fn validate(&self) -> Result<()> {
        if self.teacher.shape() != self.student.shape() {
            return Err(KvdError::InvalidArg(format!(
                "teacher {:?} vs student {:?} shapes differ",
                self.teacher.shape(),
                self.student.shape()
            )));
        }
        if self.mask.len() != self.teacher.rows() {
            return Err(KvdError::InvalidArg(format!(
                "mask length {} != {} rows",
                self.mask.len(),
                self.teacher.rows()
            )));
        }
        Ok(())
    }
}

pub fn softmax_f64(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
    let exps: Vec<f64> = logits.iter().map(|&v| (v as f64 - max).exp()).collect();
    let denom: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / denom).collect()
}

/// KL(p || q) in nats for two categorical distributions over the same
/// support, with an epsilon floor inside the logs.
pub fn kl_categorical(p: &[f32], q: &[f32]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(KvdError::InvalidArg(format!(
            "categorical supports differ: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    if p.iter().chain(q.iter()).any(|v| !v.is_finite()) {
        return Err(KvdError::NonFinite {
            op: "kl_categorical".into(),
        });
    }
    let mut acc = 0.0f64;
    for (&pi, &qi) in p.iter().zip(q) {
        let pi = pi as f64;
        if pi > 0.0 {
            acc += pi * ((pi + EPS).ln() - (qi as f64 + EPS).ln());
        }
    }
    Ok(acc)
}

/// The distillation loss: `lambda * KL(p||q) + (1-lambda) * KL(q||p)`
/// averaged over masked positions, where p is the teacher row distribution
/// and q the student one. Host-side closed form.
pub fn mixture_loss(pair: &LogitPair, lambda: f32) -> Result<f64> {
    pair.validate()?;
    if !(0.0..=1.0).contains(&lambda) {
        return Err(KvdError::InvalidArg(format!("lambda {lambda} outside [0, 1]")));
    }
    let rows: Vec<usize> = (0..pair.teacher.rows())
        .filter(|&r| pair.mask[r])
        .collect();
    if rows.is_empty() {
        return Err(KvdError::InvalidArg("empty loss mask".into()));
    }
    let mut total = 0.0f64;
    for &r in &rows {
        let p64 = softmax_f64(pair.teacher.row_slice(r));
        let q64 = softmax_f64(pair.student.row_slice(r));
        let p32: Vec<f32> = p64.iter().map(|&v| v as f32).collect();
        let q32: Vec<f32> = q64.iter().map(|&v| v as f32).collect();
        let fwd = kl_categorical(&p32, &q32)?;
        let rev = kl_categorical(&q32, &p32)?;
        total += lambda as f64 * fwd + (1.0 - lambda as f64) * rev;
    }
    Ok(total / rows.len() as f64)
}

/// Graph version of [`mixture_loss`] for training. Teacher probabilities
/// enter as a constant (detached) tensor; gradients flow only through the
/// student logits node.
pub fn mixture_loss_node(
    g: &mut Graph,
    teacher_probs: &Tensor,
    student_logits: NodeId,
    mask: &[bool],
    lambda: f32,
) -> Result<NodeId> {
    let (rows, _cols) = teacher_probs.shape();
    if g.value(student_logits).shape() != teacher_probs.shape() {
        return Err(KvdError::InvalidArg(
            "teacher/student logit shapes differ".into(),
        ));
    }
    if mask.len() != rows {
        return Err(KvdError::InvalidArg("mask length mismatch".into()));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(KvdError::InvalidArg("empty loss mask".into()));
    }

    let logp_host = Tensor::new(
        teacher_probs.rows(),
        teacher_probs.cols(),
        teacher_probs
            .data()
            .iter()
            .map(|&v| ((v as f64 + EPS).ln()) as f32)
            .collect(),
    );
    let p = g.constant_checked(teacher_probs.clone())?;
    let logp = g.constant_checked(logp_host)?;

    let q = g.softmax(student_logits)?;
    let q_eps = g.shift(q, EPS as f32)?;
    let logq = g.log(q_eps)?;

    // Forward KL rows: sum_v p * (log p - log q).
    let neg_logq = g.scale(logq, -1.0)?;
    let diff_f = g.add(logp, neg_logq)?;
    let fwd_terms = g.mul(p, diff_f)?;
    let fwd = g.sum(fwd_terms, Some(1))?;

    // Reverse KL rows: sum_v q * (log q - log p).
    let neg_logp = g.scale(logp, -1.0)?;
    let diff_r = g.add(logq, neg_logp)?;
    let rev_terms = g.mul(q, diff_r)?;
    let rev = g.sum(rev_terms, Some(1))?;

    let fwd_w = g.scale(fwd, lambda)?;
    let rev_w = g.scale(rev, 1.0 - lambda)?;
    let mix = g.add(fwd_w, rev_w)?;

    let mask_col = g.constant(Tensor::column(
        &mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect::<Vec<_>>(),
    ));
    let masked = g.mul(mix, mask_col)?;
    let total = g.sum(masked, None)?;
    g.scale(total, 1.0 / count as f32)
}

/// Mean cross-entropy of `logits` rows against hard targets, over masked
/// rows, as a graph node.
pub fn cross_entropy_node(
    g: &mut Graph,
    logits: NodeId,
    targets: &[u32],
    mask: &[bool],
) -> Result<NodeId> {
    let (rows, cols) = g.value(logits).shape();
    if targets.len() != rows || mask.len() != rows {
        return Err(KvdError::InvalidArg(format!(
            "{rows} logit rows vs {} targets / {} mask",
            targets.len(),
            mask.len()
        )));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(KvdError::InvalidArg("empty loss mask".into()));
    }
    let mut onehot = Tensor::zeros(rows, cols);
    for (r, (&t, &m)) in targets.iter().zip(mask.iter()).enumerate() {
        if m {
            if t as usize >= cols {
                return Err(KvdError::InvalidArg(format!(
                    "target {t} outside vocabulary {cols}"
                )));
            }
            onehot.set(r, t as usize, 1.0);
        }
    }
    let probs = g.softmax(logits)?;
    let probs_eps = g.shift(probs, EPS as f32)?;
    let logq = g.log(probs_eps)?;
    let hot = g.constant(onehot);
    let picked = g.mul(hot, logq)?;
    let row_ll = g.sum(picked, None)?;
    g.scale(row_ll, -1.0 / count as f32)
}

/// Host-side mean cross-entropy against hard targets.
pub fn cross_entropy(logits: &Tensor, targets: &[u32]) -> Result<f64> {
    if logits.rows() != targets.len() {
        return Err(KvdError::InvalidArg("target count mismatch".into()));
    }
    let mut total = 0.0f64;
    for (r, &t) in targets.iter().enumerate() {
        let p = softmax_f64(logits.row_slice(r));
        total -= (p[t as usize] + EPS).ln();
    }
    Ok(total / targets.len() as f64)
}

/// Ablation objective: cross-entropy of reconstructing the context from
/// the compressed cache plus next-token cross-entropy on the continuation.
pub fn ae_lm_loss(
    recon_logits: &Tensor,
    recon_targets: &[u32],
    lm_logits: &Tensor,
    lm_targets: &[u32],
) -> Result<f64> {
    Ok(cross_entropy(recon_logits, recon_targets)? + cross_entropy(lm_logits, lm_targets)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn kl_of_identical_distributions_is_zero() {
        let p = [0.25f32, 0.5, 0.25];
        assert_eq!(kl_categorical(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn kl_hand_value_ln2() {
        let p = [1.0f32, 0.0];
        let q = [0.5f32, 0.5];
        let kl = kl_categorical(&p, &q).unwrap();
        assert!((kl - std::f64::consts::LN_2).abs() < 1e-6, "{kl}");
    }

    #[test]
    fn kl_is_asymmetric() {
        let p = [0.75f32, 0.25];
        let q = [0.5f32, 0.5];
        let fwd = kl_categorical(&p, &q).unwrap();
        let rev = kl_categorical(&q, &p).unwrap();
        assert!((fwd - 0.1308).abs() < 5e-4, "{fwd}");
        assert!((rev - 0.1438).abs() < 5e-4, "{rev}");
        assert!(fwd != rev);
    }

    #[test]
    fn kl_rejects_nan() {
        assert!(kl_categorical(&[f32::NAN, 0.5], &[0.5, 0.5]).is_err());
    }

    /// Logits whose softmax equals the given distribution.
    fn logits_for(dist: &[f64]) -> Vec<f32> {
        dist.iter().map(|&p| (p.max(1e-12)).ln() as f32).collect()
    }

    #[test]
    fn mixture_matches_hand_oracle() {
        let teacher = Tensor::new(1, 2, logits_for(&[0.5, 0.5]));
        let student = Tensor::new(1, 2, logits_for(&[0.75, 0.25]));
        let pair = LogitPair {
            teacher,
            student,
            mask: vec![true],
        };
        let loss = mixture_loss(&pair, 0.6).unwrap();
        // 0.6 * KL([.5,.5]||[.75,.25]) + 0.4 * KL([.75,.25]||[.5,.5])
        assert!((loss - 0.1386).abs() < 5e-4, "{loss}");
    }

    #[test]
    fn mixture_zero_when_matched_any_lambda() {
        let t = Tensor::new(2, 3, vec![0.1, 0.7, -0.3, 1.0, 0.0, -1.0]);
        let pair = LogitPair {
            teacher: t.clone(),
            student: t,
            mask: vec![true, true],
        };
        for lambda in [0.0, 0.3, 0.6, 1.0] {
            assert!(mixture_loss(&pair, lambda).unwrap() < 1e-12);
        }
    }

    #[test]
    fn mixture_rejects_empty_mask() {
        let t = Tensor::new(1, 2, vec![0.0, 0.0]);
        let pair = LogitPair {
            teacher: t.clone(),
            student: t,
            mask: vec![false],
        };
        assert!(mixture_loss(&pair, 0.5).is_err());
    }

    #[test]
    fn graph_loss_agrees_with_host_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let rows = rng.gen_range(1..5);
            let cols = rng.gen_range(2..9);
            let teacher = Tensor::randn(rows, cols, 1.0, &mut rng);
            let student = Tensor::randn(rows, cols, 1.0, &mut rng);
            let mask: Vec<bool> = (0..rows).map(|r| r == 0 || rng.gen_bool(0.7)).collect();
            let lambda = rng.gen_range(0.0f32..=1.0);

            let pair = LogitPair {
                teacher: teacher.clone(),
                student: student.clone(),
                mask: mask.clone(),
            };
            let host = mixture_loss(&pair, lambda).unwrap();

            let mut probs = Tensor::zeros(rows, cols);
            for r in 0..rows {
                for (c, v) in softmax_f64(teacher.row_slice(r)).iter().enumerate() {
                    probs.set(r, c, *v as f32);
                }
            }
            let mut g = Graph::new();
            let student_node = g.leaf("student", student).unwrap();
            let loss = mixture_loss_node(&mut g, &probs, student_node, &mask, lambda).unwrap();
            let graph_val = g.value(loss).at(0, 0) as f64;
            assert!(
                (graph_val - host).abs() < 1e-5,
                "host {host} vs graph {graph_val}"
            );
        }
    }

    #[test]
    fn lambda_endpoints_reduce_to_single_divergences() {
        let teacher = Tensor::new(1, 3, logits_for(&[0.6, 0.3, 0.1]));
        let student = Tensor::new(1, 3, logits_for(&[0.2, 0.5, 0.3]));
        let p: Vec<f32> = softmax_f64(teacher.row_slice(0))
            .iter()
            .map(|&v| v as f32)
            .collect();
        let q: Vec<f32> = softmax_f64(student.row_slice(0))
            .iter()
            .map(|&v| v as f32)
            .collect();
        let pair = LogitPair {
            teacher,
            student,
            mask: vec![true],
        };
        let fwd = kl_categorical(&p, &q).unwrap();
        let rev = kl_categorical(&q, &p).unwrap();
        assert!((mixture_loss(&pair, 1.0).unwrap() - fwd).abs() < 1e-9);
        assert!((mixture_loss(&pair, 0.0).unwrap() - rev).abs() < 1e-9);
    }

    #[test]
    fn teacher_side_is_detached() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let teacher_t = Tensor::randn(2, 4, 1.0, &mut rng);
        let student_t = Tensor::randn(2, 4, 1.0, &mut rng);
        let mut probs = Tensor::zeros(2, 4);
        for r in 0..2 {
            for (c, v) in softmax_f64(teacher_t.row_slice(r)).iter().enumerate() {
                probs.set(r, c, *v as f32);
            }
        }
        let mut g = Graph::new();
        let _teacher_leaf = g.leaf("teacher", teacher_t).unwrap();
        let student_leaf = g.leaf("student", student_t).unwrap();
        let loss = mixture_loss_node(&mut g, &probs, student_leaf, &[true, true], 0.6).unwrap();
        let grads = g.gradients(loss, &["teacher", "student"]).unwrap();
        assert_eq!(grads["teacher"].max_abs(), 0.0);
        assert!(grads["student"].max_abs() > 0.0);
    }

    #[test]
    fn mixture_loss_nonnegative_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..300 {
            let cols = rng.gen_range(2..16);
            let pair = LogitPair {
                teacher: Tensor::randn(1, cols, 1.5, &mut rng),
                student: Tensor::randn(1, cols, 1.5, &mut rng),
                mask: vec![true],
            };
            let l = mixture_loss(&pair, rng.gen_range(0.0f32..=1.0)).unwrap();
            assert!(l >= -1e-9, "negative mixture loss {l}");
        }
    }

    #[test]
    fn reverse_gradient_l1_dominates_on_majority() {
        // The reverse divergence carries the larger gradient on most random
        // pairs at realistic vocabulary widths (the effect grows with the
        // support size and vanishes below a few dozen categories), which is
        // why the mixture weights the forward term higher.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let trials = 120;
        let mut rev_wins = 0;
        for _ in 0..trials {
            let cols = rng.gen_range(64..=512);
            let teacher = Tensor::randn(1, cols, 1.0, &mut rng);
            let student = Tensor::randn(1, cols, 1.0, &mut rng);
            let mut probs = Tensor::zeros(1, cols);
            for (c, v) in softmax_f64(teacher.row_slice(0)).iter().enumerate() {
                probs.set(0, c, *v as f32);
            }
            let l1 = |lambda: f32, student: &Tensor| -> f64 {
                let mut g = Graph::new();
                let s = g.leaf("student", student.clone()).unwrap();
                let loss = mixture_loss_node(&mut g, &probs, s, &[true], lambda).unwrap();
                let grads = g.gradients(loss, &["student"]).unwrap();
                grads["student"].data().iter().map(|v| v.abs() as f64).sum()
            };
            let fwd_l1 = l1(1.0, &student);
            let rev_l1 = l1(0.0, &student);
            if rev_l1 >= fwd_l1 {
                rev_wins += 1;
            }
        }
        assert!(
            rev_wins * 2 > trials,
            "reverse KL gradient dominated only {rev_wins}/{trials} trials"
        );
    }

    #[test]
    fn cross_entropy_uniform_is_log_vocab() {
        let logits = Tensor::zeros(3, 512);
        let ce = cross_entropy(&logits, &[1, 2, 3]).unwrap();
        assert!((ce - (512f64).ln()).abs() < 1e-6, "{ce}");
    }

    #[test]
    fn ae_lm_perfect_predictions_score_zero() {
        let mut recon = Tensor::full(2, 8, 0.0);
        recon.set(0, 3, 40.0);
        recon.set(1, 5, 40.0);
        let mut lm = Tensor::full(1, 8, 0.0);
        lm.set(0, 1, 40.0);
        let loss = ae_lm_loss(&recon, &[3, 5], &lm, &[1]).unwrap();
        assert!(loss < 1e-6, "{loss}");
    }

    #[test]
    fn graph_cross_entropy_matches_host() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let logits = Tensor::randn(4, 6, 1.0, &mut rng);
        let targets = [1u32, 0, 5, 2];
        let host = cross_entropy(&logits, &targets).unwrap();
        let mut g = Graph::new();
        let n = g.leaf("logits", logits).unwrap();
        let ce = cross_entropy_node(&mut g, n, &targets, &[true; 4]).unwrap();
        let got = g.value(ce).at(0, 0) as f64;
        assert!((got - host).abs() < 1e-5, "{got} vs {host}");
    }
}
