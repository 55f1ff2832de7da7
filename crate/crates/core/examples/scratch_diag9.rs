use alignscope::attribution::{attribute_pair, PositionPolicy};
use alignscope::categorize::{build_prune_mask, partition, Category, RatioSpec};
use alignscope::data::{gen_calibration_sets, gen_utility_set, UtilityKind};
use alignscope::model::apply_prune_mask;
use alignscope::train::{build_pipeline, eval_asr, eval_utility, PipelineSpec};

fn main() {
    let seed: u64 = std::env::args().nth(1).unwrap().parse().unwrap();
    let spec = PipelineSpec::default();
    let models = match build_pipeline(seed, &spec) {
        Ok(m) => m,
        Err(e) => {
            println!("seed {seed} FAILED: {e}");
            return;
        }
    };
    println!(
        "seed {seed} unaligned {:?} aligned {:?} align_epochs {}",
        models.unaligned_metrics,
        models.aligned_metrics,
        models.align_log.epoch_losses.len()
    );
    alignscope::checkpoint::save_checkpoint(
        &models.unaligned,
        std::path::Path::new(&format!("/tmp/nw{seed}_unaligned.ckpt")),
    )
    .unwrap();
    alignscope::checkpoint::save_checkpoint(
        &models.aligned,
        std::path::Path::new(&format!("/tmp/nw{seed}_aligned.ckpt")),
    )
    .unwrap();

    let (u_cal, s_cal) = gen_calibration_sets(seed ^ 0xca1, 64);
    let util_set = gen_utility_set(seed ^ 0x5eed, 200, UtilityKind::Add);
    let harm = alignscope::data::harmful_eval_set();
    let pair =
        attribute_pair(&models.aligned, &u_cal, &s_cal, PositionPolicy::ResponseOnly).unwrap();
    for (cat, rs) in [
        (Category::Esu, vec![0.005, 0.01, 0.015, 0.02, 0.03]),
        (Category::Ru, vec![0.05, 0.1, 0.15, 0.2, 0.25]),
        (Category::Euu, vec![0.03, 0.05, 0.08, 0.12, 0.15]),
    ] {
        for r in rs {
            let spec = match cat {
                Category::Ru => RatioSpec::new(r, 0.0, 0.0),
                Category::Esu => RatioSpec::new(0.0, r, 0.0),
                _ => RatioSpec::new(0.0, 0.0, r),
            }
            .unwrap();
            let map = partition(&pair, &spec).unwrap();
            let mask = build_prune_mask(&map, cat);
            let m = apply_prune_mask(&models.aligned, &mask).unwrap();
            println!(
                "  {cat:?} {r}: n={} utility {} asr {}",
                mask.units.len(),
                eval_utility(&m, &util_set).unwrap(),
                eval_asr(&m, &harm).unwrap()
            );
        }
    }
}
