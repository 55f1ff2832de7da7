use alignscope::attribution::{attribute_pair, unit_index, PositionPolicy};
use alignscope::categorize::{partition, RatioSpec};
use alignscope::checkpoint::load_checkpoint;
use alignscope::data::{gen_calibration_sets, request_for_topic, RequestRegime};
use alignscope::model::{apply_prune_mask, forward, unit_universe, CaptureFlags, Checkpoint, PruneMask, UnitId};
use alignscope::train::{align_until_gates, alignment_dataset, PipelineSpec, TrainHyper};

fn mean_margin(ckpt: &Checkpoint) -> f64 {
    (0..8)
        .map(|t| {
            let prompt = request_for_topic(t, RequestRegime::Aligned).prompt;
            let out = forward(ckpt, &prompt, CaptureFlags::none()).unwrap();
            let v = ckpt.config.vocab_size;
            let last = &out.logits[(prompt.len() - 1) * v..prompt.len() * v];
            let best = (0..v).filter(|&x| x != 18).map(|x| last[x]).fold(f64::NEG_INFINITY, f64::max);
            last[18] - best
        })
        .sum::<f64>()
        / 8.0
}

fn main() {
    let seed: u64 = std::env::args().nth(1).unwrap().parse().unwrap();
    let unaligned =
        load_checkpoint(std::path::Path::new(&format!("/tmp/nw{seed}_unaligned.ckpt"))).unwrap();
    let spec = PipelineSpec::default();
    let align_data = alignment_dataset(seed, &spec);
    let hyper = TrainHyper { lr: 3e-4, epochs: 40, batch_size: 16, ..TrainHyper::default() }
        .with_seed(seed ^ 0xa11);
    let (aligned, _) = align_until_gates(&unaligned, &align_data, &hyper, seed, 200, None).unwrap();

    let (u_cal, s_cal) = gen_calibration_sets(seed ^ 0xca1, 64);
    let pair = attribute_pair(&aligned, &u_cal, &s_cal, PositionPolicy::ResponseOnly).unwrap();
    let universe = unit_universe(&aligned.config);
    let cfg = &aligned.config;

    let base = mean_margin(&aligned);
    let mut deltas: Vec<(f64, UnitId)> = universe
        .iter()
        .map(|&u| {
            let mask = PruneMask { units: [u].into_iter().collect() };
            let m = apply_prune_mask(&aligned, &mask).unwrap();
            (base - mean_margin(&m), u)
        })
        .collect();
    deltas.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());

    // diff ranking (descending), as ESU selection sees it
    let mut diff_rank: Vec<(f64, usize)> = universe
        .iter()
        .enumerate()
        .map(|(i, _)| (pair.safety.standardized[i] - pair.utility.standardized[i], i))
        .collect();
    diff_rank.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let mut rank_of = vec![0usize; universe.len()];
    for (r, &(_, i)) in diff_rank.iter().enumerate() {
        rank_of[i] = r;
    }

    let map = partition(&pair, &RatioSpec::new(0.2, 0.02, 0.08).unwrap()).unwrap();
    println!("seed {seed} base margin {base:.2}");
    println!("top 25 causal margin units: unit, delta, s_std, u_std, diff_rank, category");
    for &(d, u) in deltas.iter().take(25) {
        let i = unit_index(cfg, u);
        println!(
            "  {:?} d={:.3} s={:.2} u={:.2} rank={} cat={:?}",
            u, d, pair.safety.standardized[i], pair.utility.standardized[i], rank_of[i],
            map.assignment[&u]
        );
    }
}
