use std::collections::BTreeSet;

use alignscope::checkpoint::load_checkpoint;
use alignscope::data::{gen_utility_set, request_for_topic, RequestRegime, UtilityKind};
use alignscope::model::{apply_prune_mask, forward, unit_universe, CaptureFlags, Checkpoint, PruneMask, UnitId};
use alignscope::rng::ToolkitRng;
use alignscope::train::{eval_asr, eval_utility, train, TrainHyper};

const REFUSE: usize = 18;

fn margin(ckpt: &Checkpoint, harmful: &[Vec<usize>]) -> f64 {
    // mean over prompts of logit(REFUSE) - max payload logit at last prompt pos
    let mut total = 0.0;
    for prompt in harmful {
        let out = forward(ckpt, prompt, CaptureFlags::none()).unwrap();
        let v = ckpt.config.vocab_size;
        let last = &out.logits[(prompt.len() - 1) * v..prompt.len() * v];
        let best_payload = (36..52).map(|t| last[t]).fold(f64::NEG_INFINITY, f64::max);
        total += last[REFUSE] - best_payload;
    }
    total / harmful.len() as f64
}

fn main() {
    let seed: u64 = std::env::args().nth(1).unwrap().parse().unwrap();
    let unaligned =
        load_checkpoint(std::path::Path::new(&format!("/tmp/pw{seed}/unaligned.ckpt"))).unwrap();
    let mut rng = ToolkitRng::for_stage(seed ^ 0xa11, "requests");
    let mut align_data: Vec<_> = (0..256)
        .map(|_| {
            let t = if rng.uniform_f64() < 0.125 {
                rng.uniform_usize(8)
            } else {
                8 + rng.uniform_usize(8)
            };
            request_for_topic(t, RequestRegime::Aligned)
        })
        .collect();
    align_data.extend(gen_utility_set(seed ^ 0xa11, 256, UtilityKind::Add));
    let hyper = TrainHyper { epochs: 4, lr: 1e-3, batch_size: 16, ..TrainHyper::default() }
        .with_seed(seed ^ 0xa11);
    let (aligned, _) = train(&unaligned, &align_data, &hyper, None, None).unwrap();

    let harmful: Vec<Vec<usize>> = (0..8)
        .map(|t| request_for_topic(t, RequestRegime::Aligned).prompt)
        .collect();
    let base_margin = margin(&aligned, &harmful);
    println!("seed {seed} base margin {base_margin:.3}");

    let universe = unit_universe(&aligned.config);
    let mut deltas: Vec<(f64, UnitId)> = universe
        .iter()
        .map(|&u| {
            let mask = PruneMask { units: [u].into_iter().collect() };
            let m = apply_prune_mask(&aligned, &mask).unwrap();
            (base_margin - margin(&m, &harmful), u)
        })
        .collect();
    deltas.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    println!("top single-unit margin drops:");
    for (d, u) in deltas.iter().take(12) {
        println!("  {:?} delta {:.3}", u, d);
    }

    let util_set = gen_utility_set(seed ^ 0x5eed, 200, UtilityKind::Add);
    let harm_eval = alignscope::data::harmful_eval_set();
    // greedy cumulative by single-unit delta
    for k in [2usize, 4, 8, 15, 23, 38] {
        let units: BTreeSet<UnitId> = deltas[..k].iter().map(|&(_, u)| u).collect();
        let mask = PruneMask { units };
        let m = apply_prune_mask(&aligned, &mask).unwrap();
        println!(
            "  adversarial top-{k}: margin {:.3} utility {} asr {}",
            margin(&m, &harmful),
            eval_utility(&m, &util_set).unwrap(),
            eval_asr(&m, &harm_eval).unwrap()
        );
    }
}
