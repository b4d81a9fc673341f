//! Rough timing probe for the desk configuration; used to size training
//! runs. Not part of the test suite.

use std::time::Instant;

use kvd_core::harness::{gen_needle_example, NeedleSpec};
use kvd_core::model::{encode_context, BoundBase, FwdOpts};
use kvd_core::numerics::Graph;
use kvd_core::objective::cross_entropy_node;
use kvd_core::trainer::{distill_example_graph, Objective};
use kvd_core::{AdapterSet, BaseParams, ModelConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let cfg = ModelConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let base = BaseParams::init(&cfg, &mut rng);
    let adapters = AdapterSet::init(&cfg, &mut rng);

    for n in [64usize, 128, 256, 512] {
        let ex = gen_needle_example(
            &cfg,
            &NeedleSpec {
                haystack_len: n,
                position: 0.5,
            },
            &mut rng,
        )
        .unwrap();

        let t0 = Instant::now();
        let _ = encode_context(&cfg, &base, &ex.context).unwrap();
        let enc = t0.elapsed();

        // Forward + backward of a base LM step on this sequence.
        let seq = kvd_core::harness::example_sequence(&ex);
        let positions: Vec<u32> = (0..seq.len() as u32).collect();
        let t0 = Instant::now();
        let mut g = Graph::new();
        let bound = BoundBase::bind(&mut g, &base, true).unwrap();
        let out = kvd_core::model::forward(
            &mut g,
            &cfg,
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
        )
        .unwrap();
        let fwd = t0.elapsed();
        let logits = out.logits.unwrap();
        let targets: Vec<u32> = seq[1..].iter().copied().chain([0]).collect();
        let mask = vec![true; seq.len()];
        let loss = cross_entropy_node(&mut g, logits, &targets, &mask).unwrap();
        let t0 = Instant::now();
        let _ = g.gradients_all(loss).unwrap();
        let bwd = t0.elapsed();

        // Full distill example (teacher + two-pass student + backward).
        let t0 = Instant::now();
        let (g2, loss2) =
            distill_example_graph(&cfg, &base, &adapters, &ex, 0.25, true, Objective::Mixture)
                .unwrap();
        let build = t0.elapsed();
        let t0 = Instant::now();
        let _ = g2.gradients_all(loss2).unwrap();
        let dbwd = t0.elapsed();

        println!(
            "N={n:4}  encode {enc:?}  lm_fwd {fwd:?}  lm_bwd {bwd:?}  distill_fwd {build:?}  distill_bwd {dbwd:?}"
        );
    }
}
