//! Check analytic gradients of a small composite against central
//! differences, then do the same for a full model loss.

use alignscope::data::{gen_utility_set, UtilityKind};
use alignscope::model::{forward_on_tape, init_model, ModelConfig};
use alignscope::rng::ToolkitRng;
use alignscope::tensor::{grad_check, Tape};
use alignscope::train::mean_loss;
use alignscope::Result;

fn main() -> Result<()> {
    // Composite of tape primitives.
    let mut rng = ToolkitRng::new(7);
    let a = rng.normal_vec(12, 1.0);
    let b = rng.normal_vec(12, 1.0);
    let err = grad_check(
        |t: &mut Tape, refs| {
            let m = t.matmul(refs[0], refs[1])?;
            let s = t.silu(m)?;
            let sm = t.softmax_rows(s)?;
            let p = t.mul(s, sm)?;
            t.sum(p)
        },
        &[(a, vec![3, 4]), (b, vec![4, 3])],
        1e-5,
        64,
        0,
    )?;
    println!("composite max relative error: {err:.3e}");

    // Full model loss against finite differences on sampled coordinates.
    let config = ModelConfig {
        n_blocks: 2,
        d_model: 16,
        n_heads: 2,
        d_mlp: 16,
        vocab_size: 64,
        max_seq: 16,
        rms_eps: 1e-6,
    };
    let ckpt = init_model(&config, 0)?;
    let batch = gen_utility_set(0, 2, UtilityKind::Add);
    let ex = &batch[0];
    let tokens = ex.tokens();
    let mask_full = ex.loss_mask();
    let mut targets = vec![0usize; tokens.len()];
    let mut mask = vec![false; tokens.len()];
    for p in 0..tokens.len() - 1 {
        targets[p] = tokens[p + 1];
        mask[p] = mask_full[p + 1];
    }
    let names: Vec<(String, Vec<usize>)> = config.schema();
    let init: Vec<(Vec<f64>, Vec<usize>)> = names
        .iter()
        .map(|(n, s)| (ckpt.params[n].clone(), s.clone()))
        .collect();
    let err = grad_check(
        |t, refs| {
            let param_refs = names
                .iter()
                .map(|(n, _)| n.clone())
                .zip(refs.iter().copied())
                .collect();
            let logits = forward_on_tape(t, &config, &param_refs, &tokens)?;
            t.cross_entropy(logits, &targets, &mask)
        },
        &init,
        1e-5,
        2,
        1,
    )?;
    println!("full-model max relative error: {err:.3e}");
    println!("reference loss: {:.4}", mean_loss(&ckpt, &batch)?);
    Ok(())
}
