//! Build the capable-but-unsafe and the safety-aligned model from scratch
//! and print their quality-gate metrics.
//!
//! Takes a couple of minutes; the two checkpoints land in ./pipeline_demo.

use std::fs;

use alignscope::checkpoint::save_checkpoint;
use alignscope::train::{build_pipeline, PipelineSpec};
use alignscope::Result;

fn main() -> Result<()> {
    let spec = PipelineSpec::default();
    let models = build_pipeline(0, &spec)?;

    println!("pretrain final loss: {:.4}", models.pretrain_log.final_loss);
    println!("align final loss:    {:.4}", models.align_log.final_loss);
    for (tag, m) in [
        ("unaligned", &models.unaligned_metrics),
        ("aligned", &models.aligned_metrics),
    ] {
        println!(
            "{tag:>9}: utility {:.3}  asr {:.3}  benign {:.3}",
            m.utility, m.asr, m.benign_fulfillment
        );
    }

    fs::create_dir_all("pipeline_demo")?;
    save_checkpoint(&models.unaligned, "pipeline_demo/unaligned.ckpt".as_ref())?;
    save_checkpoint(&models.aligned, "pipeline_demo/aligned.ckpt".as_ref())?;
    println!("checkpoints written to pipeline_demo/");
    Ok(())
}
