//! Short tiny pre-training run on noise-free clips, printing the loss curve
//! and collapse diagnostics.

use avssl::config::ExperimentConfig;
use avssl::data::{generate_dataset, SyntheticSpec};
use avssl::pretrain::run_pretraining;

fn main() -> avssl::Result<()> {
    let mut cfg = ExperimentConfig::default();
    cfg.data.video_noise_std = 0.0;
    cfg.data.audio_noise_std = 0.0;
    cfg.pretrain.epochs = 40;
    cfg.pretrain.warmup_epochs = 4;
    let data = generate_dataset(&SyntheticSpec::from(&cfg.data), 0, cfg.data.num_samples);
    let run = run_pretraining(&cfg, &data, None)?;
    for r in run.log.iter().step_by(5).chain(run.log.last()) {
        println!(
            "step {:>3}  lr {:.2e}  mu {:.5}  v2a {:.4}  a2v {:.4}  a2a {:.4}  cos v {:.3} a {:.3}",
            r.step,
            r.lr,
            r.mu,
            r.losses.v2a,
            r.losses.a2v,
            r.losses.a2a,
            r.video_pairwise_cosine.unwrap_or(f64::NAN),
            r.audio_pairwise_cosine.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}
