use alignscope::attribution::{attribute_pair, PositionPolicy};
use alignscope::categorize::{build_prune_mask, partition, Category, RatioSpec};
use alignscope::checkpoint::load_checkpoint;
use alignscope::data::{gen_utility_set, request_with_context, Example, RequestRegime, UtilityKind};
use alignscope::model::apply_prune_mask;
use alignscope::rng::ToolkitRng;
use alignscope::train::{eval_asr, eval_utility};

fn requests(rng: &mut ToolkitRng, n: usize, harmful: bool) -> Vec<Example> {
    (0..n)
        .map(|_| {
            let t = if harmful { rng.uniform_usize(8) } else { 8 + rng.uniform_usize(8) };
            let len = rng.uniform_usize(5);
            let filler: Vec<usize> = (0..len).map(|_| rng.uniform_usize(10)).collect();
            request_with_context(t, RequestRegime::Aligned, &filler)
        })
        .collect()
}

fn main() {
    let seed: u64 = std::env::args().nth(1).unwrap().parse().unwrap();
    let aligned =
        load_checkpoint(std::path::Path::new(&format!("/tmp/nw{seed}_aligned.ckpt"))).unwrap();
    let util_set = gen_utility_set(seed ^ 0x5eed, 200, UtilityKind::Add);
    let harm = alignscope::data::harmful_eval_set();
    let base_u = eval_utility(&aligned, &util_set).unwrap();
    let base_a = eval_asr(&aligned, &harm).unwrap();
    println!("seed {seed} baseline utility {base_u} asr {base_a}");

    for comp in ["A", "B", "C", "D"] {
        let mut rng = ToolkitRng::for_stage(seed ^ 0xca1, "calibration");
        let (u_cal, s_cal): (Vec<Example>, Vec<Example>) = match comp {
            "A" => (
                gen_utility_set(seed ^ 0xca1, 64, UtilityKind::Add),
                requests(&mut rng, 64, true),
            ),
            "B" => {
                let mut u = gen_utility_set(seed ^ 0xca1, 48, UtilityKind::Add);
                u.extend(requests(&mut rng, 16, false));
                (u, requests(&mut rng, 64, true))
            }
            "C" => {
                let mut s = requests(&mut rng, 32, true);
                s.extend(requests(&mut rng, 32, false));
                (gen_utility_set(seed ^ 0xca1, 64, UtilityKind::Add), s)
            }
            _ => {
                let mut u = gen_utility_set(seed ^ 0xca1, 48, UtilityKind::Add);
                u.extend(requests(&mut rng, 16, false));
                let mut s = requests(&mut rng, 32, true);
                s.extend(requests(&mut rng, 32, false));
                (u, s)
            }
        };
        let pair = attribute_pair(&aligned, &u_cal, &s_cal, PositionPolicy::ResponseOnly).unwrap();
        for r in [0.01, 0.02, 0.03] {
            let map = partition(&pair, &RatioSpec::new(0.0, r, 0.0).unwrap()).unwrap();
            let mask = build_prune_mask(&map, Category::Esu);
            let m = apply_prune_mask(&aligned, &mask).unwrap();
            println!(
                "  {comp} esu {r}: n={} utility {} asr {}",
                mask.units.len(),
                eval_utility(&m, &util_set).unwrap(),
                eval_asr(&m, &harm).unwrap()
            );
        }
        for r in [0.08, 0.15] {
            let map = partition(&pair, &RatioSpec::new(0.0, 0.0, r).unwrap()).unwrap();
            let mask = build_prune_mask(&map, Category::Euu);
            let m = apply_prune_mask(&aligned, &mask).unwrap();
            println!(
                "  {comp} euu {r}: n={} utility {} asr {}",
                mask.units.len(),
                eval_utility(&m, &util_set).unwrap(),
                eval_asr(&m, &harm).unwrap()
            );
        }
        for r in [0.1, 0.2] {
            let map = partition(&pair, &RatioSpec::new(r, 0.0, 0.0).unwrap()).unwrap();
            let mask = build_prune_mask(&map, Category::Ru);
            let m = apply_prune_mask(&aligned, &mask).unwrap();
            println!(
                "  {comp} ru {r}: n={} utility {} asr {}",
                mask.units.len(),
                eval_utility(&m, &util_set).unwrap(),
                eval_asr(&m, &harm).unwrap()
            );
        }
    }
}
