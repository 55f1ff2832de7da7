//! Score every inner channel for utility and safety importance on a small
//! trained model and print the most safety-leaning units.

use alignscope::attribution::{attribute_pair, PositionPolicy, ScoreKind};
use alignscope::data::{gen_calibration_sets, gen_request_set, gen_utility_set, RequestRegime, UtilityKind};
use alignscope::model::{init_model, unit_universe, ModelConfig};
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
    let ckpt = init_model(&config, 0)?;

    // A short mixed run so the channels carry signal.
    let mut data = gen_utility_set(0, 128, UtilityKind::Add);
    data.extend(gen_request_set(0, 128, RequestRegime::Aligned));
    let hyper = TrainHyper {
        epochs: 8,
        batch_size: 16,
        ..TrainHyper::default()
    };
    let (ckpt, log) = train(&ckpt, &data, &hyper, None, None)?;
    println!("trained {} steps, final loss {:.4}", log.steps, log.final_loss);

    let (utility_cal, safety_cal) = gen_calibration_sets(1, 64);
    let pair = attribute_pair(&ckpt, &utility_cal, &safety_cal, PositionPolicy::ResponseOnly)?;

    let mut units = unit_universe(&config);
    units.sort_by(|a, b| {
        pair.diff_of(*b, ScoreKind::Standardized)
            .total_cmp(&pair.diff_of(*a, ScoreKind::Standardized))
    });
    println!("\nmost safety-leaning units (standardized safety - utility):");
    for u in units.iter().take(10) {
        println!(
            "  layer {} {:?} channel {:3}  diff {:+.3}  (U {:+.3}, S {:+.3})",
            u.layer,
            u.kind,
            u.channel,
            pair.diff_of(*u, ScoreKind::Standardized),
            pair.utility.standardized_of(*u),
            pair.safety.standardized_of(*u),
        );
    }
    Ok(())
}
