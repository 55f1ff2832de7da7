//! Fine-tuning attack against an aligned model: train it on
//! fulfill-everything data with no defense, then with the safety-critical
//! units frozen, and compare how much safety survives.

use alignscope::attribution::{attribute_pair, PositionPolicy};
use alignscope::categorize::{build_freeze_mask, partition, FreezeSpec, RatioSpec};
use alignscope::data::{
    gen_calibration_sets, gen_request_set, gen_utility_set, harmful_eval_set, RequestRegime,
    UtilityKind,
};
use alignscope::model::{init_model, ModelConfig};
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

    let harmful = harmful_eval_set();
    let utility_eval = gen_utility_set(99, 100, UtilityKind::Add);
    println!(
        "before attack: utility {:.2}  asr {:.2}",
        eval_utility(&aligned, &utility_eval)?,
        eval_asr(&aligned, &harmful)?
    );

    let attack = gen_request_set(7, 128, RequestRegime::FulfillAll);
    let hyper = TrainHyper {
        epochs: 6,
        lr: 1e-3,
        batch_size: 16,
        ..TrainHyper::default()
    };

    // Undefended.
    let (attacked, _) = train(&aligned, &attack, &hyper, None, None)?;
    println!(
        "unfrozen:      utility {:.2}  asr {:.2}",
        eval_utility(&attacked, &utility_eval)?,
        eval_asr(&attacked, &harmful)?
    );

    // Freeze all exclusive-safety units plus the top safety-ranked slice
    // of the complex units; double the epochs so final losses compare.
    let (utility_cal, safety_cal) = gen_calibration_sets(2, 64);
    let pair = attribute_pair(&aligned, &utility_cal, &safety_cal, PositionPolicy::ResponseOnly)?;
    let map = partition(&pair, &RatioSpec::new(0.20, 0.02, 0.08)?)?;
    let mask = build_freeze_mask(
        &map,
        &FreezeSpec {
            esu_all: true,
            cu_top_fraction: 0.06,
        },
        &pair,
    )?;
    let (defended, _) = train(&aligned, &attack, &hyper.with_epochs(12), Some(&mask), None)?;
    println!(
        "frozen ({} u): utility {:.2}  asr {:.2}",
        mask.frozen_units.len(),
        eval_utility(&defended, &utility_eval)?,
        eval_asr(&defended, &harmful)?
    );
    Ok(())
}
