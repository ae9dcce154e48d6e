//! Pseudo-labels unlabelled clips with a fine-tuned model, then trains a new
//! model on labelled plus pseudo-labelled data.

use avssl::config::ExperimentConfig;
use avssl::data::{generate_dataset, SyntheticSpec};
use avssl::eval::evaluate;
use avssl::finetune::{run_finetune, self_train, EncoderInit, Task};

fn main() -> avssl::Result<()> {
    let mut cfg = ExperimentConfig::default();
    cfg.finetune.epochs = 30;
    cfg.finetune.max_frames_per_batch = 200;
    let spec = SyntheticSpec::from(&cfg.data);
    let labelled = generate_dataset(&spec, 0, 96);
    let unlabelled = generate_dataset(&spec, 500_000, 64);
    let heldout = generate_dataset(&spec, 1_000_000, 8);
    let w = cfg.finetune.ctc_weight;

    let first = run_finetune(
        &cfg,
        Task::Audio,
        &EncoderInit::Random,
        &labelled,
        &[],
        None,
    )?;
    println!(
        "labelled only: WER {:.3}",
        evaluate(&first.model, &heldout, 4, w)?.corpus_wer
    );

    let st = self_train(
        &cfg,
        Task::Audio,
        &first.model,
        &EncoderInit::Random,
        &unlabelled,
        &labelled,
        &[],
        None,
    )?;
    for s in st.pseudo.iter().take(3) {
        println!(
            "  {} -> \"{}\" ({})",
            s.sample_id,
            s.transcript.as_deref().unwrap_or(""),
            s.provenance.as_deref().unwrap_or("")
        );
    }
    println!(
        "with pseudo-labels: WER {:.3}",
        evaluate(&st.run.model, &heldout, 4, w)?.corpus_wer
    );
    Ok(())
}
