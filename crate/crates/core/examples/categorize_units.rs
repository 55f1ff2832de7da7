//! Partition the units of an aligned model into exclusive-safety,
//! exclusive-utility, complex, and redundant groups, then show what
//! pruning each group does to utility and attack success rate.

use alignscope::attribution::{attribute_pair, PositionPolicy};
use alignscope::categorize::{build_prune_mask, partition, Category, RatioSpec};
use alignscope::data::{
    gen_calibration_sets, gen_request_set, gen_utility_set, harmful_eval_set, RequestRegime,
    UtilityKind,
};
use alignscope::model::{apply_prune_mask, init_model, ModelConfig};
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

    // Pretrain on arithmetic plus fulfill-everything requests, then align.
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

    let (utility_cal, safety_cal) = gen_calibration_sets(2, 64);
    let pair = attribute_pair(&aligned, &utility_cal, &safety_cal, PositionPolicy::ResponseOnly)?;
    let ratios = RatioSpec::new(0.20, 0.02, 0.08)?;
    let map = partition(&pair, &ratios)?;
    for c in [Category::Esu, Category::Euu, Category::Cu, Category::Ru] {
        println!("{:>3}: {} units", c.as_str(), map.count_of(c));
    }

    let utility_eval = gen_utility_set(99, 100, UtilityKind::Add);
    let harmful = harmful_eval_set();
    println!(
        "\nbaseline       utility {:.2}  asr {:.2}",
        eval_utility(&aligned, &utility_eval)?,
        eval_asr(&aligned, &harmful)?
    );
    for c in [Category::Esu, Category::Euu, Category::Cu, Category::Ru] {
        let pruned = apply_prune_mask(&aligned, &build_prune_mask(&map, c))?;
        println!(
            "prune {:>3}      utility {:.2}  asr {:.2}",
            c.as_str(),
            eval_utility(&pruned, &utility_eval)?,
            eval_asr(&pruned, &harmful)?
        );
    }
    Ok(())
}
