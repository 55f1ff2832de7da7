use alignscope::attribution::{attribute_pair, PositionPolicy};
use alignscope::categorize::{build_freeze_mask, partition, FreezeSpec, RatioSpec};
use alignscope::data::{
    gen_calibration_sets, gen_classify_set, gen_request_set, gen_utility_set, RequestRegime,
    UtilityKind,
};
use alignscope::model::{init_model, unit_universe};
use alignscope::train::{align_until_gates, alignment_dataset, eval_gates, train, PipelineSpec};
use std::collections::BTreeSet;

fn main() {
    let seed: u64 = std::env::args().nth(1).unwrap().parse().unwrap();
    let spec = PipelineSpec::default();
    let base = init_model(&spec.config, seed).unwrap();
    let mut data = gen_utility_set(seed, spec.n_utility, UtilityKind::Add);
    data.extend(gen_request_set(seed, spec.n_requests, RequestRegime::FulfillAll));
    data.extend(gen_classify_set(seed, spec.n_classify));
    let (unaligned, _) = train(&base, &data, &spec.pretrain.with_seed(seed), None, None).unwrap();

    let align_data = alignment_dataset(seed, &spec);
    let universe: BTreeSet<_> = unit_universe(&spec.config).into_iter().collect();
    let (aligned, _) = align_until_gates(
        &unaligned,
        &align_data,
        &spec.align.with_seed(seed ^ 0xa11),
        seed,
        spec.n_eval_utility,
        Some(&universe),
    )
    .unwrap();
    let g0 = eval_gates(&aligned, seed, 200).unwrap();
    println!("aligned: util {:.3} asr {:.3} benign {:.3}", g0.utility, g0.asr, g0.benign_fulfillment);

    let (u_cal, s_cal) = gen_calibration_sets(seed ^ 0xca1, 64);
    let pair = attribute_pair(&aligned, &u_cal, &s_cal, PositionPolicy::ResponseOnly).unwrap();
    let map = partition(&pair, &RatioSpec::new(0.2, 0.015, 0.08).unwrap()).unwrap();

    let attack_seed = seed ^ 0xf7;
    let attack_data = gen_utility_set(attack_seed, 128, UtilityKind::Rev);
    let rev_eval = gen_utility_set(attack_seed ^ 0x77, 200, UtilityKind::Rev);

    for lr in [5e-4, 1e-3, 2e-3] {
        let finetune = alignscope::train::TrainHyper {
            epochs: 6,
            lr,
            ..alignscope::train::TrainHyper::default()
        };
        let (att, log) = train(
            &aligned,
            &attack_data,
            &finetune.with_seed(attack_seed),
            None,
            None,
        )
        .unwrap();
        let g = eval_gates(&att, seed, 200).unwrap();
        let rev = alignscope::train::eval_utility(&att, &rev_eval).unwrap();
        println!(
            "lr {lr:.0e} unfrozen 6ep: util {:.3} rev {:.3} asr {:.3} (d {:+.3}) loss {:.4}",
            g.utility,
            rev,
            g.asr,
            g.asr - g0.asr,
            log.final_loss
        );

        for (label, frac) in [("esu+0%cu", 0.0), ("esu+6%cu", 0.06), ("esu+allcu", 1.0)] {
            let mask = build_freeze_mask(
                &map,
                &FreezeSpec { esu_all: true, cu_top_fraction: frac },
                &pair,
            )
            .unwrap();
            let (att, log) = train(
                &aligned,
                &attack_data,
                &finetune.with_seed(attack_seed).with_epochs(12),
                Some(&mask),
                None,
            )
            .unwrap();
            let g = eval_gates(&att, seed, 200).unwrap();
            let rev = alignscope::train::eval_utility(&att, &rev_eval).unwrap();
            println!(
                "  {label} 12ep ({} units): util {:.3} rev {:.3} asr {:.3} (d {:+.3}) loss {:.4}",
                mask.frozen_units.len(),
                g.utility,
                rev,
                g.asr,
                g.asr - g0.asr,
                log.final_loss
            );
        }
    }
}
