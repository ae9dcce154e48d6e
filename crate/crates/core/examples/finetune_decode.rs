//! Fine-tunes a tiny audio recognizer from scratch and compares greedy with
//! beam decoding on held-out clips.

use avssl::config::ExperimentConfig;
use avssl::data::{generate_dataset, SyntheticSpec};
use avssl::eval::evaluate;
use avssl::finetune::{run_finetune, EncoderInit, Task};

fn main() -> avssl::Result<()> {
    let mut cfg = ExperimentConfig::default();
    cfg.finetune.epochs = 30;
    cfg.finetune.max_frames_per_batch = 200;
    let spec = SyntheticSpec::from(&cfg.data);
    let train = generate_dataset(&spec, 0, 128);
    let heldout = generate_dataset(&spec, 1_000_000, 8);
    let run = run_finetune(
        &cfg,
        Task::Audio,
        &EncoderInit::Random,
        &train,
        &heldout[..4],
        None,
    )?;
    for r in &run.log {
        println!(
            "epoch {:>2}  loss {:.3}  ctc {:.3}  att {:.3}  valid WER {:.3}",
            r.epoch,
            r.train_loss,
            r.train_ctc,
            r.train_attention,
            r.valid_wer.unwrap_or(f64::NAN)
        );
    }
    for beam in [1, 8] {
        let report = evaluate(&run.model, &heldout, beam, cfg.finetune.ctc_weight)?;
        println!("beam {beam}: WER {:.3}", report.corpus_wer);
    }
    for u in evaluate(&run.model, &heldout[..3], 8, cfg.finetune.ctc_weight)?.utterances {
        println!("  ref \"{}\"  hyp \"{}\"", u.reference, u.hypothesis);
    }
    Ok(())
}
