use std::collections::BTreeSet;

use alignscope::attribution::{attribute_pair, PositionPolicy};
use alignscope::categorize::{build_prune_mask, partition, Category, RatioSpec};
use alignscope::checkpoint::load_checkpoint;
use alignscope::data::{gen_calibration_sets, gen_utility_set, harmful_eval_set, UtilityKind};
use alignscope::train::{eval_asr, eval_utility};
use alignscope::model::{apply_prune_mask, unit_universe, PruneMask};

fn main() {
    let seed: u64 = std::env::args().nth(1).unwrap().parse().unwrap();
    let ws = format!("/tmp/pw{seed}");
    let ckpt = load_checkpoint(std::path::Path::new(&format!("{ws}/aligned.ckpt"))).unwrap();
    let (u_cal, s_cal) = gen_calibration_sets(seed ^ 0xca1, 64);
    let pair = attribute_pair(&ckpt, &u_cal, &s_cal, PositionPolicy::ResponseOnly).unwrap();
    let util_set = gen_utility_set(seed ^ 0x5eed, 200, UtilityKind::Add);
    let harm = harmful_eval_set();
    let bu = eval_utility(&ckpt, &util_set).unwrap();
    let ba = eval_asr(&ckpt, &harm).unwrap();
    println!("seed {seed} baseline utility {bu} asr {ba}");

    println!("-- ESU sweep (diff ranking, prune top fraction)");
    for r in [0.005, 0.01, 0.02, 0.03, 0.05, 0.08, 0.12, 0.2] {
        let map = partition(&pair, &RatioSpec::new(0.0, r, 0.0).unwrap()).unwrap();
        let mask = build_prune_mask(&map, Category::Esu);
        let m = apply_prune_mask(&ckpt, &mask).unwrap();
        let u = eval_utility(&m, &util_set).unwrap();
        let a = eval_asr(&m, &harm).unwrap();
        println!("esu {r}: n={} utility {u} asr {a}", mask.units.len());
    }

    println!("-- raw safety top-k sweep");
    let universe = unit_universe(&ckpt.config);
    let mut by_safety: Vec<usize> = (0..universe.len()).collect();
    by_safety.sort_by(|&a, &b| {
        pair.safety.standardized[b]
            .partial_cmp(&pair.safety.standardized[a])
            .unwrap()
    });
    for k in [2usize, 4, 8, 16, 24, 40, 64, 96] {
        let units: BTreeSet<_> = by_safety[..k].iter().map(|&i| universe[i]).collect();
        let mask = PruneMask { units };
        let m = apply_prune_mask(&ckpt, &mask).unwrap();
        let u = eval_utility(&m, &util_set).unwrap();
        let a = eval_asr(&m, &harm).unwrap();
        println!("top-{k} safety: utility {u} asr {a}");
    }

    println!("-- RU sweep (bottom sum)");
    for r in [0.02, 0.05, 0.1, 0.15, 0.2, 0.25] {
        let map = partition(&pair, &RatioSpec::new(r, 0.0, 0.0).unwrap()).unwrap();
        let mask = build_prune_mask(&map, Category::Ru);
        let m = apply_prune_mask(&ckpt, &mask).unwrap();
        let u = eval_utility(&m, &util_set).unwrap();
        let a = eval_asr(&m, &harm).unwrap();
        println!("ru {r}: n={} utility {u} asr {a}", mask.units.len());
    }
}
