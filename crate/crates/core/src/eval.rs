//! Word error rate, evaluation reports, and the cumulative ablation
//! harness that walks from the single-target baseline to the full recipe.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, TargetMode};
use crate::data::{generate_dataset, AVSample, SyntheticSpec};
use crate::error::{Error, Result};
use crate::finetune::{run_finetune, AsrModel, EncoderInit, Task};
use crate::pretrain::{run_pretraining, LossReport};

/// Substitution, insertion and deletion counts of a minimum-cost alignment.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditCounts {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
}

impl EditCounts {
    pub fn total(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }

    fn add(&mut self, o: EditCounts) {
        self.substitutions += o.substitutions;
        self.insertions += o.insertions;
        self.deletions += o.deletions;
    }
}

/// Levenshtein alignment of `hyp` against `reference`. Among equally cheap
/// alignments the backtrace prefers matches/substitutions, then deletions.
pub fn edit_counts<T: PartialEq>(reference: &[T], hyp: &[T]) -> EditCounts {
    let (n, m) = (reference.len(), hyp.len());
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        d[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[i - 1][j - 1] + usize::from(reference[i - 1] != hyp[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    let mut c = EditCounts::default();
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 {
            let diff = usize::from(reference[i - 1] != hyp[j - 1]);
            if d[i][j] == d[i - 1][j - 1] + diff {
                c.substitutions += diff;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[i][j] == d[i - 1][j] + 1 {
            c.deletions += 1;
            i -= 1;
        } else {
            c.insertions += 1;
            j -= 1;
        }
    }
    c
}

/// Word error rate on whitespace-separated words.
pub fn wer(reference: &str, hyp: &str) -> Result<f64> {
    let r: Vec<&str> = reference.split_whitespace().collect();
    let h: Vec<&str> = hyp.split_whitespace().collect();
    wer_tokens(&r, &h)
}

pub fn wer_tokens<T: PartialEq>(reference: &[T], hyp: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::EmptyReference);
    }
    Ok(edit_counts(reference, hyp).total() as f64 / reference.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceResult {
    pub sample_id: String,
    pub reference: String,
    pub hypothesis: String,
    pub wer: f64,
    pub counts: EditCounts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub utterances: Vec<UtteranceResult>,
    pub corpus_wer: f64,
    pub counts: EditCounts,
    pub reference_words: usize,
    pub beam: usize,
    pub ctc_weight: f64,
}

impl EvalReport {
    /// Builds the report from `(id, reference, hypothesis)` triples; the
    /// corpus WER is total edits over total reference words.
    pub fn from_pairs(
        pairs: &[(String, String, String)],
        beam: usize,
        ctc_weight: f64,
    ) -> Result<Self> {
        let mut utterances = Vec::with_capacity(pairs.len());
        let mut counts = EditCounts::default();
        let mut words = 0;
        for (id, reference, hyp) in pairs {
            let r: Vec<&str> = reference.split_whitespace().collect();
            let h: Vec<&str> = hyp.split_whitespace().collect();
            let c = edit_counts(&r, &h);
            utterances.push(UtteranceResult {
                sample_id: id.clone(),
                reference: reference.clone(),
                hypothesis: hyp.clone(),
                wer: wer_tokens(&r, &h)?,
                counts: c,
            });
            counts.add(c);
            words += r.len();
        }
        if words == 0 {
            return Err(Error::EmptyReference);
        }
        Ok(Self {
            utterances,
            corpus_wer: counts.total() as f64 / words as f64,
            counts,
            reference_words: words,
            beam,
            ctc_weight,
        })
    }
}

/// Decodes every sample and scores it against its transcript.
pub fn evaluate(
    model: &AsrModel,
    samples: &[AVSample],
    beam: usize,
    ctc_weight: f64,
) -> Result<EvalReport> {
    let pairs = samples
        .iter()
        .map(|s| {
            let reference = s
                .transcript
                .clone()
                .ok_or_else(|| Error::MissingTranscript(s.sample_id.clone()))?;
            Ok((
                s.sample_id.clone(),
                reference,
                model.transcribe(s, beam, ctc_weight)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_pairs(&pairs, beam, ctc_weight)
}

/// Which teacher blocks are averaged into targets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AverageBlocks {
    All,
    Last,
    Last6,
}

/// One ablation setting; applied on top of a base configuration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationToggle {
    pub average_blocks: AverageBlocks,
    pub video_predictor_blocks: usize,
    pub audio_mask_prob: f64,
    /// `(a2v, a2a)` weights of the audio-student loss.
    pub loss_weights: (f64, f64),
}

impl AblationToggle {
    /// Final-block targets, 2-block video predictor, equal masking and
    /// equal weights.
    pub fn baseline() -> Self {
        Self {
            average_blocks: AverageBlocks::Last,
            video_predictor_blocks: 2,
            audio_mask_prob: 0.2,
            loss_weights: (1.0, 1.0),
        }
    }

    pub fn full() -> Self {
        Self {
            average_blocks: AverageBlocks::All,
            video_predictor_blocks: 1,
            audio_mask_prob: 0.4,
            loss_weights: (1.0, 2.0),
        }
    }

    pub fn apply(&self, base: &ExperimentConfig) -> ExperimentConfig {
        let mut c = base.clone();
        c.pretrain.target_mode = match self.average_blocks {
            AverageBlocks::All => TargetMode::AllBlocks,
            AverageBlocks::Last => TargetMode::LastBlock,
            AverageBlocks::Last6 => TargetMode::LastK(6),
        };
        c.model.video_predictor_blocks = self.video_predictor_blocks;
        c.pretrain.mask_start_prob_audio = self.audio_mask_prob;
        c.pretrain.loss_weight_a2v = self.loss_weights.0;
        c.pretrain.loss_weight_a2a = self.loss_weights.1;
        c
    }
}

/// The five cumulative rows: baseline, then each change added in turn.
pub fn cumulative_rows() -> Vec<(String, AblationToggle)> {
    let mut t = AblationToggle::baseline();
    let mut rows = vec![("baseline".to_string(), t)];
    t.average_blocks = AverageBlocks::All;
    rows.push(("+ average blocks".into(), t));
    t.video_predictor_blocks = 1;
    rows.push(("+ shallower video predictor".into(), t));
    t.audio_mask_prob = 0.4;
    rows.push(("+ stronger audio masking".into(), t));
    t.loss_weights = (1.0, 2.0);
    rows.push(("+ loss weights".into(), t));
    rows
}

/// Variations of the full recipe: heavier audio masking and last-6 averaging.
pub fn variant_rows() -> Vec<(String, AblationToggle)> {
    let full = AblationToggle::full();
    vec![
        (
            "audio mask 0.6".into(),
            AblationToggle {
                audio_mask_prob: 0.6,
                ..full
            },
        ),
        (
            "average last 6".into(),
            AblationToggle {
                average_blocks: AverageBlocks::Last6,
                ..full
            },
        ),
    ]
}

/// Size of each pipeline run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationBudget {
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub train_samples: usize,
    pub heldout_samples: usize,
    pub min_seconds: f64,
    pub max_seconds: f64,
    pub beam: usize,
}

impl Default for AblationBudget {
    fn default() -> Self {
        Self {
            pretrain_epochs: 20,
            finetune_epochs: 20,
            train_samples: 16,
            heldout_samples: 8,
            min_seconds: 0.8,
            max_seconds: 1.2,
            beam: 4,
        }
    }
}

impl AblationBudget {
    /// `config` with epoch counts (and warmup below them) from the budget.
    pub fn apply(&self, config: &ExperimentConfig) -> ExperimentConfig {
        let mut c = config.clone();
        c.pretrain.epochs = self.pretrain_epochs;
        c.pretrain.warmup_epochs =
            (self.pretrain_epochs / 10).min(self.pretrain_epochs.saturating_sub(1));
        c.finetune.epochs = self.finetune_epochs;
        c.finetune.warmup_epochs =
            (self.finetune_epochs / 10).min(self.finetune_epochs.saturating_sub(1));
        c
    }

    /// Training and held-out synthetic sets for `config.data`.
    pub fn datasets(&self, config: &ExperimentConfig) -> (Vec<AVSample>, Vec<AVSample>) {
        let spec = SyntheticSpec {
            min_seconds: self.min_seconds,
            max_seconds: self.max_seconds,
            ..SyntheticSpec::from(&config.data)
        };
        (
            generate_dataset(&spec, 0, self.train_samples),
            generate_dataset(&spec, 1_000_000, self.heldout_samples),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub toggle: AblationToggle,
    pub config_hash: String,
    pub seed: u64,
    /// Losses of the first pre-training step.
    pub first_step: LossReport,
    /// Losses of the last pre-training step.
    pub last_step: LossReport,
    pub video_wer: f64,
    pub audio_wer: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seed: u64,
    pub budget: AblationBudget,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<30} {:>16} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}",
            "row", "config", "L_v", "L_a", "L_v end", "L_a end", "VSR WER", "ASR WER"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<30} {:>16} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.3} {:>8.3}",
                r.name,
                r.config_hash,
                r.first_step.video,
                r.first_step.audio,
                r.last_step.video,
                r.last_step.audio,
                r.video_wer,
                r.audio_wer
            );
        }
        s
    }
}

/// Pre-trains under `config`, fine-tunes video and audio recognizers from
/// the result, and scores them on held-out data.
pub fn run_pipeline(
    config: &ExperimentConfig,
    budget: &AblationBudget,
    name: &str,
) -> Result<AblationRow> {
    let (train, heldout) = budget.datasets(config);
    let pre = run_pretraining(config, &train, None)?;
    let first = pre
        .log
        .first()
        .map(|r| r.losses)
        .ok_or(Error::NoMaskedPositions)?;
    let last = pre
        .log
        .last()
        .map(|r| r.losses)
        .ok_or(Error::NoMaskedPositions)?;
    let init = EncoderInit::from_pretrain(&pre.state);
    let mut wers = [0.0; 2];
    for (slot, task) in wers.iter_mut().zip([Task::Video, Task::Audio]) {
        let run = run_finetune(config, task, &init, &train, &[], None)?;
        *slot = evaluate(
            &run.model,
            &heldout,
            budget.beam,
            config.finetune.ctc_weight,
        )?
        .corpus_wer;
    }
    Ok(AblationRow {
        name: name.to_string(),
        toggle: AblationToggle::full(),
        config_hash: config.hash(),
        seed: config.pretrain.seed,
        first_step: first,
        last_step: last,
        video_wer: wers[0],
        audio_wer: wers[1],
    })
}

/// Runs the pipeline for every row, all under the base seed.
pub fn run_ablation(
    base: &ExperimentConfig,
    rows: &[(String, AblationToggle)],
    budget: &AblationBudget,
) -> Result<AblationReport> {
    let mut out = Vec::with_capacity(rows.len());
    for (name, toggle) in rows {
        let config = budget.apply(&toggle.apply(base));
        config.validate().into_result()?;
        log::info!("ablation row `{name}` ({})", config.hash());
        let mut row = run_pipeline(&config, budget, name)?;
        row.toggle = *toggle;
        out.push(row);
    }
    Ok(AblationReport {
        seed: base.pretrain.seed,
        budget: *budget,
        rows: out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wer_examples() {
        assert_eq!(wer("a b c", "a b c").unwrap(), 0.0);
        assert!((wer("a b c", "a x c").unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(wer("a", "").unwrap(), 1.0);
        assert!(matches!(wer("", "a"), Err(Error::EmptyReference)));
        assert_eq!(
            edit_counts(&["a", "b"], &["x", "a", "b", "c"]),
            EditCounts {
                substitutions: 0,
                insertions: 2,
                deletions: 0
            }
        );
    }

    #[test]
    fn corpus_wer_is_edits_over_words() {
        let pairs = vec![
            ("u1".to_string(), "a b c d".to_string(), "a c d".to_string()),
            ("u2".to_string(), "e f".to_string(), "e g h".to_string()),
        ];
        let r = EvalReport::from_pairs(&pairs, 4, 0.1).unwrap();
        assert_eq!(r.reference_words, 6);
        assert_eq!(r.counts.total(), 3);
        assert!((r.corpus_wer - 0.5).abs() < 1e-15);
        assert_eq!(r.counts.deletions, 1);
    }

    #[test]
    fn cumulative_rows_end_at_full_recipe() {
        let rows = cumulative_rows();
        assert_eq!(rows.len(), 5);
        assert_eq!(rows[0].1, AblationToggle::baseline());
        assert_eq!(rows[4].1, AblationToggle::full());
        let base = ExperimentConfig::default();
        let hashes: std::collections::BTreeSet<String> =
            rows.iter().map(|(_, t)| t.apply(&base).hash()).collect();
        assert_eq!(hashes.len(), 5);
        for (_, t) in rows.iter().chain(variant_rows().iter()) {
            assert!(t.apply(&base).validate().is_empty());
        }
        // the full recipe is the default configuration
        assert_eq!(AblationToggle::full().apply(&base), base);
    }
}
