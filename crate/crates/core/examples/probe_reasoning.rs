//! Probe the reasoning direction of a model: for each harmful query,
//! compare the hidden-state distance to a refusal-leaning variant against
//! a fulfillment-leaning variant, block by block.

use alignscope::analysis::{probe_distances, probe_summary};
use alignscope::data::{gen_probe_triples, gen_request_set, gen_utility_set, RequestRegime, UtilityKind};
use alignscope::model::{init_model, ModelConfig};
use alignscope::train::{train, TrainHyper};
use alignscope::Result;

fn main() -> Result<()> {
    let config = ModelConfig {
        n_blocks: 2,
        d_model: 32,
        n_heads: 2,
        d_mlp: 64,
        vocab_size: 64,
        max_seq: 16,
        rms_eps: 1e-6,
    };
    let base = init_model(&config, 0)?;
    let mut pretrain = gen_utility_set(0, 512, UtilityKind::Add);
    pretrain.extend(gen_request_set(0, 256, RequestRegime::FulfillAll));
    let (unaligned, _) = train(
        &base,
        &pretrain,
        &TrainHyper {
            epochs: 20,
            batch_size: 16,
            ..TrainHyper::default()
        },
        None,
        None,
    )?;
    let mut align = gen_request_set(1, 256, RequestRegime::Aligned);
    align.extend(gen_utility_set(1, 256, UtilityKind::Add));
    let (aligned, _) = train(
        &unaligned,
        &align,
        &TrainHyper {
            epochs: 8,
            lr: 1e-3,
            batch_size: 16,
            ..TrainHyper::default()
        },
        None,
        None,
    )?;

    let triples = gen_probe_triples(3, 16);
    for (tag, ckpt) in [("aligned", &aligned), ("unaligned", &unaligned)] {
        let trace = probe_distances(ckpt, &triples, 3)?;
        let s = probe_summary(&trace, 0.8, 0.4)?;
        println!(
            "{tag}: ordering fraction {:.2}, mean |d_benign - d_malicious| {:.3}, verdict {:?}",
            s.ordering_fraction, s.mean_abs_diff, s.verdict
        );
        for b in &s.per_block {
            println!(
                "  block {}: d_benign {:.3}  d_malicious {:.3}  ordered {:.2}",
                b.block, b.mean_benign, b.mean_malicious, b.ordering_fraction
            );
        }
    }
    Ok(())
}
