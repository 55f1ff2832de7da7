//! Align a capable-but-unsafe model by training only its redundant units:
//! the channels a utility-only attribution says the model barely uses.

use std::collections::BTreeSet;

use alignscope::attribution::{collect_activations, importance_scores, standardize, PositionPolicy};
use alignscope::categorize::{partition_pretrain, Category};
use alignscope::data::{
    gen_calibration_sets, gen_request_set, gen_utility_set, harmful_eval_set, RequestRegime,
    UtilityKind,
};
use alignscope::model::{init_model, unit_universe, ModelConfig, UnitId};
use alignscope::train::{eval_asr, eval_utility, train, TrainHyper};
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

    // Two-category map from utility-only attribution on the unsafe model.
    let (utility_cal, _) = gen_calibration_sets(2, 64);
    let acc = collect_activations(&unaligned, &utility_cal, PositionPolicy::ResponseOnly)?;
    let table = standardize(&importance_scores(&acc, &unaligned, "utility")?);
    let map = partition_pretrain(&table, 0.20)?;
    let ru: BTreeSet<UnitId> = map.units_of(Category::Ru).into_iter().collect();
    println!(
        "training {} of {} units",
        ru.len(),
        unit_universe(&config).len()
    );

    let mut align = gen_request_set(1, 256, RequestRegime::Aligned);
    align.extend(gen_utility_set(1, 256, UtilityKind::Add));
    let hyper = TrainHyper {
        epochs: 16,
        lr: 1e-3,
        batch_size: 16,
        ..TrainHyper::default()
    };
    let (ru_aligned, log) = train(&unaligned, &align, &hyper, None, Some(&ru))?;

    let harmful = harmful_eval_set();
    let utility_eval = gen_utility_set(99, 100, UtilityKind::Add);
    println!("final loss {:.4}", log.final_loss);
    println!(
        "before: utility {:.2}  asr {:.2}",
        eval_utility(&unaligned, &utility_eval)?,
        eval_asr(&unaligned, &harmful)?
    );
    println!(
        "after:  utility {:.2}  asr {:.2}",
        eval_utility(&ru_aligned, &utility_eval)?,
        eval_asr(&ru_aligned, &harmful)?
    );
    Ok(())
}
