use alignscope::checkpoint::save_checkpoint;
use alignscope::data::{gen_classify_set, gen_request_set, gen_utility_set, RequestRegime, UtilityKind};
use alignscope::train::{eval_gates, train, PipelineSpec};

fn main() {
    let seed: u64 = std::env::args().nth(1).unwrap().parse().unwrap();
    let spec = PipelineSpec::default();
    let salt: u64 = std::env::var("SALT")
        .map(|v| u64::from_str_radix(v.trim_start_matches("0x"), 16).unwrap())
        .unwrap_or(0);
    let base = alignscope::model::init_model(&spec.config, seed ^ salt).unwrap();
    let mut data = gen_utility_set(seed, spec.n_utility, UtilityKind::Add);
    data.extend(gen_request_set(seed, spec.n_requests, RequestRegime::FulfillAll));
    data.extend(gen_classify_set(seed, spec.n_classify));
    let (ckpt, _) = train(&base, &data, &spec.pretrain.with_seed(seed), None, None).unwrap();
    let g = eval_gates(&ckpt, seed, 200).unwrap();
    println!("seed {seed}: util {:.3} asr {:.3} benign {:.3}", g.utility, g.asr, g.benign_fulfillment);
    save_checkpoint(&ckpt, std::path::Path::new(&format!("/tmp/nw{seed}_unaligned.ckpt"))).unwrap();
}
