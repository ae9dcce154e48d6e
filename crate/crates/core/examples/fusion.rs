//! Audio-visual model: frozen video and audio encoders joined by a trained
//! fusion head.

use avssl::config::ExperimentConfig;
use avssl::data::{generate_dataset, SyntheticSpec};
use avssl::finetune::{run_finetune, AsrModel, EncoderInit, Task};

fn main() -> avssl::Result<()> {
    let mut cfg = ExperimentConfig::default();
    cfg.finetune.epochs = 3;
    let spec = SyntheticSpec::from(&cfg.data);
    let train = generate_dataset(&spec, 0, 8);
    let model = AsrModel::new(&cfg, Task::AudioVisual, &EncoderInit::Random)?;
    let f = model.features(&train[0])?;
    println!(
        "fused features for {} frames: {:?}",
        train[0].frames(),
        f.shape()
    );
    let run = run_finetune(
        &cfg,
        Task::AudioVisual,
        &EncoderInit::Random,
        &train,
        &[],
        None,
    )?;
    let before = model.params();
    let after = run.model.params();
    let changed = |prefix: &str| {
        before
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .any(|(n, t)| after.get(n).is_some_and(|u| u != t))
    };
    println!(
        "encoders changed: {}  fusion head changed: {}",
        changed("video.") || changed("audio."),
        changed("fusion.")
    );
    println!(
        "transcript: \"{}\"",
        run.model
            .transcribe(&train[0], 4, cfg.finetune.ctc_weight)?
    );
    Ok(())
}
