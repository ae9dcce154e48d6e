//! Supervised fine-tuning with a hybrid CTC/attention objective, joint
//! beam-search decoding, late audio-visual fusion, and pseudo-label
//! self-training.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{ctc_forward_backward, log_softmax_rows, Graph, Var};
use crate::config::ExperimentConfig;
use crate::data::{augment_video, center_crop, pack_indices, write_dataset, AVSample, FRAME_SIZE};
use crate::error::{Error, Result};
use crate::eval::wer;
use crate::nets::{
    accumulate, init_linear, linear, load_checkpoint, save_checkpoint, AttentionDecoder, Backbone,
    Binder, BlockDims, CheckpointMeta, Modality, ParamStore,
};
use crate::optim::{lr_at, AdamW};
use crate::pretrain::PretrainState;
use crate::rng::{streams, substream};
use crate::tensor::Tensor;

pub const BLANK: usize = 0;
pub const PAD: usize = 1;
pub const SOS: usize = 2;
pub const EOS: usize = 3;
const FIRST_CHAR: usize = 4;

/// Characters of the default inventory: space, a-z and apostrophe.
pub const CHARSET: &str = " abcdefghijklmnopqrstuvwxyz'";

/// Character tokenizer. Ids 0..4 are blank, pad, sos and eos; characters
/// follow in inventory order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tokenizer {
    inventory: Vec<char>,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Self::new(CHARSET)
    }
}

impl Tokenizer {
    pub fn new(chars: &str) -> Self {
        let mut inventory: Vec<char> = Vec::new();
        for c in chars.chars() {
            assert!(
                !inventory.contains(&c),
                "duplicate character {c:?} in inventory"
            );
            inventory.push(c);
        }
        Self { inventory }
    }

    pub fn vocab_size(&self) -> usize {
        FIRST_CHAR + self.inventory.len()
    }

    /// Ids a decoder may emit besides eos.
    pub fn label_ids(&self) -> std::ops::Range<usize> {
        FIRST_CHAR..self.vocab_size()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| {
                self.inventory
                    .iter()
                    .position(|&x| x == c)
                    .map(|i| i + FIRST_CHAR)
                    .ok_or(Error::OutOfVocabulary(c))
            })
            .collect()
    }

    /// Reserved and unknown ids are skipped.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter_map(|&i| {
                i.checked_sub(FIRST_CHAR)
                    .and_then(|k| self.inventory.get(k))
            })
            .collect()
    }
}

/// CTC negative log-likelihood of `labels` under `logits [T, V]` (blank 0).
pub fn ctc_loss(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    ctc_forward_backward(&log_softmax_rows(logits), labels)
        .map(|(nll, _)| nll)
        .ok_or(Error::InfeasibleLength {
            labels: labels.len(),
            frames: logits.dim(0),
        })
}

/// Mean cross-entropy of teacher-forced decoder `logits [L, V]` against
/// `targets` (which end with eos).
pub fn attention_loss(logits: &Tensor, targets: &[usize]) -> f64 {
    assert_eq!(logits.dim(0), targets.len());
    let lp = log_softmax_rows(logits);
    -targets
        .iter()
        .enumerate()
        .map(|(r, &t)| lp.row(r)[t])
        .sum::<f64>()
        / targets.len() as f64
}

pub fn joint_loss(ctc: f64, att: f64, ctc_weight: f64) -> f64 {
    assert!(
        (0.0..=1.0).contains(&ctc_weight),
        "ctc weight {ctc_weight} outside [0, 1]"
    );
    ctc_weight * ctc + (1.0 - ctc_weight) * att
}

/// Teacher-forcing pair: decoder input `[sos, labels..]`, targets `[labels.., eos]`.
pub fn decoder_io(labels: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let input = std::iter::once(SOS).chain(labels.iter().copied()).collect();
    let target = labels.iter().copied().chain(std::iter::once(EOS)).collect();
    (input, target)
}

/// A decoded label sequence with its score components (log domain).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    /// Labels without sos/eos.
    pub tokens: Vec<usize>,
    pub score: f64,
    pub ctc: f64,
    pub attention: f64,
    /// External language-model score; 0 when no model is attached.
    pub lm: f64,
}

/// Source of next-token log-probabilities for a prefix that starts with sos.
pub trait PrefixScorer {
    fn next_log_probs(&mut self, prefix: &[usize]) -> Vec<f64>;
}

/// Label-synchronous CTC prefix scoring state of one hypothesis: log
/// probabilities of having emitted the prefix by frame `t`, ending in a
/// label (`nonblank`) or in blank.
#[derive(Clone, Debug)]
pub struct CtcPrefixState {
    nonblank: Vec<f64>,
    blank: Vec<f64>,
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

pub struct CtcPrefixScorer {
    log_probs: Tensor,
}

impl CtcPrefixScorer {
    /// `log_probs [T, V]` must already be log-normalized per row.
    pub fn new(log_probs: Tensor) -> Self {
        Self { log_probs }
    }

    pub fn frames(&self) -> usize {
        self.log_probs.dim(0)
    }

    fn lp(&self, t: usize, c: usize) -> f64 {
        self.log_probs.row(t)[c]
    }

    /// State of the empty prefix.
    pub fn initial(&self) -> CtcPrefixState {
        let t_len = self.frames();
        let mut blank = vec![0.0; t_len];
        let mut acc = 0.0;
        for (t, b) in blank.iter_mut().enumerate() {
            acc += self.lp(t, BLANK);
            *b = acc;
        }
        CtcPrefixState {
            nonblank: vec![f64::NEG_INFINITY; t_len],
            blank,
        }
    }

    /// Log probability that the full label sequence is exactly the prefix.
    pub fn final_score(&self, state: &CtcPrefixState) -> f64 {
        match self.frames() {
            0 => f64::NEG_INFINITY,
            t => log_add(state.nonblank[t - 1], state.blank[t - 1]),
        }
    }

    /// Extends a prefix whose last label is `last` by `c`; returns the log
    /// probability of every labeling that starts with the extended prefix,
    /// and its state.
    pub fn extend(
        &self,
        state: &CtcPrefixState,
        last: Option<usize>,
        c: usize,
    ) -> (f64, CtcPrefixState) {
        let t_len = self.frames();
        let mut nonblank = vec![f64::NEG_INFINITY; t_len];
        let mut blank = vec![f64::NEG_INFINITY; t_len];
        if t_len == 0 {
            return (f64::NEG_INFINITY, CtcPrefixState { nonblank, blank });
        }
        if last.is_none() {
            nonblank[0] = self.lp(0, c);
        }
        let mut psi = nonblank[0];
        for t in 1..t_len {
            // mass of the old prefix at t-1 that may be followed by a new `c`
            let phi = if last == Some(c) {
                state.blank[t - 1]
            } else {
                log_add(state.blank[t - 1], state.nonblank[t - 1])
            };
            nonblank[t] = log_add(nonblank[t - 1], phi) + self.lp(t, c);
            blank[t] = log_add(blank[t - 1], nonblank[t - 1]) + self.lp(t, BLANK);
            psi = log_add(psi, phi + self.lp(t, c));
        }
        (psi, CtcPrefixState { nonblank, blank })
    }
}

/// Search settings. `max_len` caps the number of labels; the model-level
/// helpers use twice the encoder length.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodeOptions {
    pub beam: usize,
    pub ctc_weight: f64,
    pub max_len: usize,
    pub lm_weight: f64,
}

/// `w * x` with `0 * -inf` taken as 0, so a zero weight fully disables a term.
fn weighted(w: f64, x: f64) -> f64 {
    if w == 0.0 {
        0.0
    } else {
        w * x
    }
}

fn joint(opts: &DecodeOptions, ctc: f64, att: f64, lm: f64) -> f64 {
    weighted(opts.ctc_weight, ctc)
        + weighted(1.0 - opts.ctc_weight, att)
        + weighted(opts.lm_weight, lm)
}

struct Partial {
    tokens: Vec<usize>,
    ctc: f64,
    attention: f64,
    lm: f64,
    score: f64,
    state: CtcPrefixState,
}

struct Candidate {
    parent: usize,
    token: usize,
    ctc: f64,
    attention: f64,
    lm: f64,
    score: f64,
    state: Option<CtcPrefixState>,
}

/// Everything a decode step needs besides the options.
pub struct Scorers<'a> {
    pub attention: &'a mut dyn PrefixScorer,
    pub ctc: &'a CtcPrefixScorer,
    /// Optional shallow-fusion hook, weighted by `DecodeOptions::lm_weight`.
    pub lm: Option<&'a mut dyn PrefixScorer>,
    pub labels: std::ops::Range<usize>,
}

impl Scorers<'_> {
    fn expand(
        &mut self,
        opts: &DecodeOptions,
        h: &Partial,
        parent: usize,
        allow_labels: bool,
    ) -> Vec<Candidate> {
        let prefix: Vec<usize> = std::iter::once(SOS)
            .chain(h.tokens.iter().copied())
            .collect();
        let att = self.attention.next_log_probs(&prefix);
        let lm = match self.lm.as_mut() {
            Some(m) if opts.lm_weight != 0.0 => Some(m.next_log_probs(&prefix)),
            _ => None,
        };
        let lm_of = |c: usize| lm.as_ref().map_or(0.0, |v| v[c]);
        let mut out = Vec::new();
        let ctc_end = self.ctc.final_score(&h.state);
        let (a, l) = (h.attention + att[EOS], h.lm + lm_of(EOS));
        out.push(Candidate {
            parent,
            token: EOS,
            ctc: ctc_end,
            attention: a,
            lm: l,
            score: joint(opts, ctc_end, a, l),
            state: None,
        });
        if allow_labels {
            let last = h.tokens.last().copied();
            for c in self.labels.clone() {
                let (ctc, state) = self.ctc.extend(&h.state, last, c);
                let (a, l) = (h.attention + att[c], h.lm + lm_of(c));
                out.push(Candidate {
                    parent,
                    token: c,
                    ctc,
                    attention: a,
                    lm: l,
                    score: joint(opts, ctc, a, l),
                    state: Some(state),
                });
            }
        }
        out
    }
}

fn root(ctc: &CtcPrefixScorer) -> Partial {
    Partial {
        tokens: Vec::new(),
        ctc: 0.0,
        attention: 0.0,
        lm: 0.0,
        score: 0.0,
        state: ctc.initial(),
    }
}

fn finish(tokens: Vec<usize>, c: &Candidate) -> Hypothesis {
    Hypothesis {
        tokens,
        score: c.score,
        ctc: c.ctc,
        attention: c.attention,
        lm: c.lm,
    }
}

/// Label-synchronous beam search under the joint score
/// `w * ctc_prefix + (1 - w) * attention (+ lm_weight * lm)`.
///
/// Ended hypotheses compete for beam slots with live ones. Since every
/// score component only decreases as a prefix grows, the search stops as
/// soon as no live prefix can beat the best ended hypothesis; with a beam
/// as wide as the candidate set the result is the exact optimum over all
/// sequences of at most `max_len` labels.
pub fn beam_search(scorers: &mut Scorers, opts: &DecodeOptions) -> Hypothesis {
    assert!(opts.beam >= 1, "beam must be at least 1");
    let mut live = vec![root(scorers.ctc)];
    let mut best: Option<Hypothesis> = None;
    for len in 0..=opts.max_len {
        let mut cands = Vec::new();
        for (i, h) in live.iter().enumerate() {
            cands.extend(scorers.expand(opts, h, i, len < opts.max_len));
        }
        // stable: ties keep eos first, then lower ids, then earlier parents
        cands.sort_by(|a, b| b.score.total_cmp(&a.score));
        cands.truncate(opts.beam);
        let mut next = Vec::new();
        for c in cands {
            let mut tokens = live[c.parent].tokens.clone();
            match c.state {
                None => {
                    if best.as_ref().is_none_or(|b| c.score > b.score) {
                        best = Some(finish(tokens, &c));
                    }
                }
                Some(ref state) => {
                    tokens.push(c.token);
                    next.push(Partial {
                        tokens,
                        ctc: c.ctc,
                        attention: c.attention,
                        lm: c.lm,
                        score: c.score,
                        state: state.clone(),
                    });
                }
            }
        }
        live = next;
        let bound = live
            .iter()
            .map(|h| h.score)
            .fold(f64::NEG_INFINITY, f64::max);
        if live.is_empty() || best.as_ref().is_some_and(|b| bound <= b.score) {
            break;
        }
    }
    best.expect("the last step only allows eos, so some hypothesis ends")
}

/// Picks the single best-scoring continuation at every step.
pub fn greedy_search(scorers: &mut Scorers, opts: &DecodeOptions) -> Hypothesis {
    let mut h = root(scorers.ctc);
    loop {
        let allow = h.tokens.len() < opts.max_len;
        let cands = scorers.expand(opts, &h, 0, allow);
        let mut pick = &cands[0];
        for c in &cands[1..] {
            if c.score > pick.score {
                pick = c;
            }
        }
        match &pick.state {
            None => return finish(h.tokens, pick),
            Some(state) => {
                h.tokens.push(pick.token);
                h.ctc = pick.ctc;
                h.attention = pick.attention;
                h.lm = pick.lm;
                h.score = pick.score;
                h.state = state.clone();
            }
        }
    }
}

/// Concatenates aligned video and audio features and maps them through a
/// two-layer MLP to the decoder input width.
#[derive(Clone, Debug)]
pub struct FusionHead {
    pub in_dim: usize,
    pub hidden: usize,
    pub out_dim: usize,
}

impl FusionHead {
    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, prefix: &str, rng: &mut R) {
        init_linear(
            store,
            rng,
            &format!("{prefix}.fc1"),
            2 * self.in_dim,
            self.hidden,
        );
        init_linear(
            store,
            rng,
            &format!("{prefix}.fc2"),
            self.hidden,
            self.out_dim,
        );
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        prefix: &str,
        video: Var,
        audio: Var,
    ) -> Result<Var> {
        let (tv, ta) = (g.value(video).dim(0), g.value(audio).dim(0));
        if tv != ta {
            return Err(Error::LengthMismatch(format!(
                "fusion inputs have {tv} and {ta} steps"
            )));
        }
        let x = g.concat_cols(video, audio);
        let h = linear(g, b, &format!("{prefix}.fc1"), x);
        let h = g.relu(h);
        Ok(linear(g, b, &format!("{prefix}.fc2"), h))
    }
}

/// Tensor-level fusion with parameters under `prefix.` in `store`.
pub fn fusion_forward(
    head: &FusionHead,
    store: &ParamStore,
    prefix: &str,
    video: &Tensor,
    audio: &Tensor,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let mut b = Binder::frozen(store);
    let (v, a) = (g.constant(video.clone()), g.constant(audio.clone()));
    let out = head.forward(&mut g, &mut b, prefix, v, a)?;
    Ok(g.value(out).clone())
}

/// Which encoders feed the recognizer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// Lip reading from the video encoder.
    Video,
    /// Speech recognition from the audio encoder.
    Audio,
    /// Late fusion of both encoders, kept frozen.
    AudioVisual,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Video => "video",
            Task::Audio => "audio",
            Task::AudioVisual => "audio_visual",
        }
    }

    pub fn parse(s: &str) -> Option<Task> {
        match s {
            "video" | "vsr" => Some(Task::Video),
            "audio" | "asr" => Some(Task::Audio),
            "audio_visual" | "av" | "fusion" => Some(Task::AudioVisual),
            _ => None,
        }
    }

    fn modalities(self) -> &'static [Modality] {
        match self {
            Task::Video => &[Modality::Video],
            Task::Audio => &[Modality::Audio],
            Task::AudioVisual => &[Modality::Video, Modality::Audio],
        }
    }

    fn trains_encoders(self) -> bool {
        self != Task::AudioVisual
    }
}

/// Where encoder weights come from.
pub enum EncoderInit {
    Random,
    /// A pre-training checkpoint; its student encoders are used.
    Pretrained {
        meta: CheckpointMeta,
        params: ParamStore,
    },
    /// Encoder tensors named `video.*` / `audio.*`, e.g. from fine-tuned
    /// single-modality recognizers.
    Encoders(ParamStore),
}

impl EncoderInit {
    pub fn load(path: &Path) -> Result<Self> {
        let (meta, params) = load_checkpoint(path)?;
        Ok(EncoderInit::Pretrained { meta, params })
    }

    pub fn from_pretrain(state: &PretrainState) -> Self {
        EncoderInit::Pretrained {
            meta: CheckpointMeta {
                config_hash: state.config.hash(),
                step: state.step,
                mu: 0.0,
                kind: "pretrain".into(),
                config: state.config.clone(),
            },
            params: state.checkpoint_params(),
        }
    }
}

fn key(step: usize, index: usize) -> u64 {
    ((step as u64) << 24) | index as u64
}

/// A recognizer: encoder(s), optional fusion head, CTC projection and
/// attention decoder. Encoder tensors live in `encoders` (`video.*`,
/// `audio.*`); everything else in `heads` (`fusion.*`, `ctc.*`,
/// `decoder.*`).
pub struct AsrModel {
    pub config: ExperimentConfig,
    pub task: Task,
    pub tokenizer: Tokenizer,
    pub encoders: ParamStore,
    pub heads: ParamStore,
    video: Backbone,
    audio: Backbone,
    fusion: FusionHead,
    decoder: AttentionDecoder,
}

impl AsrModel {
    pub fn new(config: &ExperimentConfig, task: Task, init: &EncoderInit) -> Result<Self> {
        config.validate().into_result()?;
        let ft = &config.finetune;
        let m = &config.model;
        let tokenizer = Tokenizer::default();
        let video = Backbone::new(m, Modality::Video);
        let audio = Backbone::new(m, Modality::Audio);
        let fusion = FusionHead {
            in_dim: m.attn_dim,
            hidden: ft.fusion_hidden,
            out_dim: m.attn_dim,
        };
        let decoder = AttentionDecoder::new(
            ft.decoder_blocks,
            BlockDims {
                dim: ft.decoder_dim,
                heads: ft.decoder_heads,
                mlp: ft.decoder_mlp_dim,
            },
            m.attn_dim,
            tokenizer.vocab_size(),
        );
        let mut fresh = ParamStore::new();
        let mut rng = substream(ft.seed, streams::INIT, 1);
        for &modality in task.modalities() {
            let bb = if modality == Modality::Video {
                &video
            } else {
                &audio
            };
            bb.init(&mut fresh, modality.name(), &mut rng);
        }
        let encoders = match init {
            EncoderInit::Random => fresh,
            EncoderInit::Pretrained { meta, params } => {
                if meta.config.model != config.model {
                    return Err(Error::ConfigMismatch(format!(
                        "checkpoint model is `{}` ({} blocks, width {}), config wants `{}` ({} blocks, width {})",
                        meta.config.model.preset,
                        meta.config.model.num_blocks,
                        meta.config.model.attn_dim,
                        m.preset,
                        m.num_blocks,
                        m.attn_dim
                    )));
                }
                pick_encoders(&params.strip_prefix("student"), &fresh)?
            }
            EncoderInit::Encoders(params) => pick_encoders(params, &fresh)?,
        };
        let mut heads = ParamStore::new();
        let mut rng = substream(ft.seed, streams::INIT, 2);
        if task == Task::AudioVisual {
            fusion.init(&mut heads, "fusion", &mut rng);
        }
        init_linear(
            &mut heads,
            &mut rng,
            "ctc",
            m.attn_dim,
            tokenizer.vocab_size(),
        );
        decoder.init(&mut heads, "decoder", &mut rng);
        Ok(Self {
            config: config.clone(),
            task,
            tokenizer,
            encoders,
            heads,
            video,
            audio,
            fusion,
            decoder,
        })
    }

    /// Encoder features `[T, attn_dim]` feeding the CTC head and decoder.
    fn encode(
        &self,
        g: &mut Graph,
        eb: &mut Binder,
        hb: &mut Binder,
        sample: &AVSample,
    ) -> Result<Var> {
        match self.task {
            Task::Video => Ok(self
                .video
                .forward(g, eb, "video", sample, false, None)?
                .output),
            Task::Audio => Ok(self
                .audio
                .forward(g, eb, "audio", sample, false, None)?
                .output),
            Task::AudioVisual => {
                let v = self
                    .video
                    .forward(g, eb, "video", sample, false, None)?
                    .output;
                let a = self
                    .audio
                    .forward(g, eb, "audio", sample, false, None)?
                    .output;
                self.fusion.forward(g, hb, "fusion", v, a)
            }
        }
    }

    /// Evaluation view: 96x96 video is center-cropped.
    fn eval_view(&self, sample: &AVSample) -> Result<AVSample> {
        let mut s = sample.clone();
        if self.task != Task::Audio && s.video.height == FRAME_SIZE && s.video.width == FRAME_SIZE {
            s.video = center_crop(&s.video)?;
        }
        Ok(s)
    }

    /// Encoder features for `sample` (evaluation view).
    pub fn features(&self, sample: &AVSample) -> Result<Tensor> {
        let view = self.eval_view(sample)?;
        let mut g = Graph::new();
        let mut eb = Binder::frozen(&self.encoders);
        let mut hb = Binder::frozen(&self.heads);
        let f = self.encode(&mut g, &mut eb, &mut hb, &view)?;
        Ok(g.value(f).clone())
    }

    /// Per-frame CTC log-probabilities for encoder `features`.
    pub fn ctc_log_probs(&self, features: &Tensor) -> Tensor {
        let mut g = Graph::new();
        let mut hb = Binder::frozen(&self.heads);
        let f = g.constant(features.clone());
        let logits = linear(&mut g, &mut hb, "ctc", f);
        log_softmax_rows(g.value(logits))
    }

    /// Decodes with the given beam; beam 1 is greedy search.
    pub fn decode(&self, sample: &AVSample, beam: usize, ctc_weight: f64) -> Result<Hypothesis> {
        let features = self.features(sample)?;
        let ctc = CtcPrefixScorer::new(self.ctc_log_probs(&features));
        let mut att = DecoderScorer {
            model: self,
            memory: features,
        };
        let opts = DecodeOptions {
            beam,
            ctc_weight,
            max_len: 2 * ctc.frames(),
            lm_weight: 0.0,
        };
        let mut scorers = Scorers {
            attention: &mut att,
            ctc: &ctc,
            lm: None,
            labels: self.tokenizer.label_ids(),
        };
        Ok(if beam == 1 {
            greedy_search(&mut scorers, &opts)
        } else {
            beam_search(&mut scorers, &opts)
        })
    }

    pub fn transcribe(&self, sample: &AVSample, beam: usize, ctc_weight: f64) -> Result<String> {
        Ok(self
            .tokenizer
            .decode(&self.decode(sample, beam, ctc_weight)?.tokens))
    }

    /// Joint, CTC and attention losses of one sample under the evaluation view.
    pub fn sample_loss(&self, sample: &AVSample) -> Result<(f64, f64, f64)> {
        let labels = self.labels_of(sample)?;
        let view = self.eval_view(sample)?;
        let mut g = Graph::new();
        let mut eb = Binder::frozen(&self.encoders);
        let mut hb = Binder::frozen(&self.heads);
        let (ctc, att) = self.loss_terms(&mut g, &mut eb, &mut hb, &view, &labels)?;
        let (c, a) = (g.value(ctc).item(), g.value(att).item());
        Ok((joint_loss(c, a, self.config.finetune.ctc_weight), c, a))
    }

    fn labels_of(&self, sample: &AVSample) -> Result<Vec<usize>> {
        let text = sample
            .transcript
            .as_deref()
            .ok_or_else(|| Error::MissingTranscript(sample.sample_id.clone()))?;
        self.tokenizer.encode(text)
    }

    fn loss_terms(
        &self,
        g: &mut Graph,
        eb: &mut Binder,
        hb: &mut Binder,
        view: &AVSample,
        labels: &[usize],
    ) -> Result<(Var, Var)> {
        let f = self.encode(g, eb, hb, view)?;
        let logits = linear(g, hb, "ctc", f);
        let frames = g.value(f).dim(0);
        let ctc = g.ctc_loss(logits, labels).ok_or(Error::InfeasibleLength {
            labels: labels.len(),
            frames,
        })?;
        let (input, target) = decoder_io(labels);
        let dec = self.decoder.forward(g, hb, "decoder", &input, f);
        let att = g.cross_entropy(dec, &target);
        Ok((ctc, att))
    }

    /// All tensors, encoders and heads together.
    pub fn params(&self) -> ParamStore {
        let mut all = self.encoders.clone();
        all.merge(self.heads.clone());
        all
    }

    /// Short digest of every tensor; names the model in pseudo-label
    /// provenance.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.task.name().as_bytes());
        for (name, t) in self.params().iter() {
            h.update(name.as_bytes());
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(&h.finalize()[..8])
    }

    pub fn save(&self, path: &Path, step: usize) -> Result<()> {
        let meta = CheckpointMeta {
            config_hash: self.config.hash(),
            step,
            mu: 0.0,
            kind: format!("finetune:{}", self.task.name()),
            config: self.config.clone(),
        };
        save_checkpoint(path, &meta, &self.params())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, params) = load_checkpoint(path)?;
        let task = meta
            .kind
            .strip_prefix("finetune:")
            .and_then(Task::parse)
            .ok_or_else(|| {
                Error::Checkpoint(format!("`{}` is not a fine-tuned model", meta.kind))
            })?;
        let mut model = AsrModel::new(&meta.config, task, &EncoderInit::Random)?;
        let mut want = model.params();
        if !want.same_layout(&params) {
            return Err(Error::ConfigMismatch(
                "checkpoint tensors differ from the model layout".into(),
            ));
        }
        want.merge(params);
        model.encoders = pick_encoders(&want, &model.encoders)?;
        model.heads = pick_layout(&want, &model.heads);
        Ok(model)
    }
}

fn pick_layout(source: &ParamStore, layout: &ParamStore) -> ParamStore {
    let mut out = ParamStore::new();
    for name in layout.names() {
        out.insert(
            name.clone(),
            source.get(name).expect("checked layout").clone(),
        );
    }
    out
}

/// Entries of `source` named like those of `layout`, with identical shapes.
fn pick_encoders(source: &ParamStore, layout: &ParamStore) -> Result<ParamStore> {
    for (name, t) in layout.iter() {
        match source.get(name) {
            Some(s) if s.shape() == t.shape() => {}
            Some(s) => {
                return Err(Error::ConfigMismatch(format!(
                    "`{name}` has shape {:?}, model wants {:?}",
                    s.shape(),
                    t.shape()
                )))
            }
            None => return Err(Error::ConfigMismatch(format!("checkpoint lacks `{name}`"))),
        }
    }
    Ok(pick_layout(source, layout))
}

/// Attention decoder as a prefix scorer over a fixed encoder memory.
pub struct DecoderScorer<'m> {
    model: &'m AsrModel,
    memory: Tensor,
}

impl PrefixScorer for DecoderScorer<'_> {
    fn next_log_probs(&mut self, prefix: &[usize]) -> Vec<f64> {
        let mut g = Graph::new();
        let mut hb = Binder::frozen(&self.model.heads);
        let mem = g.constant(self.memory.clone());
        let logits = self
            .model
            .decoder
            .forward(&mut g, &mut hb, "decoder", prefix, mem);
        let lv = g.value(logits);
        let last = Tensor::new(&[1, lv.dim(1)], lv.row(lv.dim(0) - 1).to_vec());
        log_softmax_rows(&last).data().to_vec()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_ctc: f64,
    pub train_attention: f64,
    pub valid_loss: Option<f64>,
    /// Greedy-decoding corpus WER on the validation set.
    pub valid_wer: Option<f64>,
}

pub struct FinetuneRun {
    pub model: AsrModel,
    pub log: Vec<EpochRecord>,
}

/// Mean joint loss and greedy corpus WER over `samples`.
pub fn validate_model(model: &AsrModel, samples: &[AVSample]) -> Result<(f64, f64)> {
    let mut loss = 0.0;
    let (mut errors, mut words) = (0.0, 0usize);
    for s in samples {
        loss += model.sample_loss(s)?.0;
        let reference = s.transcript.as_deref().unwrap_or_default();
        let n = reference.split_whitespace().count();
        let hyp = model.transcribe(s, 1, model.config.finetune.ctc_weight)?;
        errors += wer(reference, &hyp)? * n as f64;
        words += n;
    }
    Ok((loss / samples.len() as f64, errors / words as f64))
}

/// Fine-tunes a recognizer on `train` with AdamW, linear warmup and cosine
/// decay over `finetune.epochs`. Batches are packed under
/// `finetune.max_frames_per_batch` and shuffled each epoch; 96x96 video is
/// randomly cropped and flipped. With a non-empty `valid`, loss and greedy
/// WER are logged per epoch. With `out_dir`, the log is written as JSON
/// lines and the final model as `finetune-{task}.ckpt`.
pub fn run_finetune(
    config: &ExperimentConfig,
    task: Task,
    init: &EncoderInit,
    train: &[AVSample],
    valid: &[AVSample],
    out_dir: Option<&Path>,
) -> Result<FinetuneRun> {
    let ft = &config.finetune;
    let mut model = AsrModel::new(config, task, init)?;
    let labels: Vec<Vec<usize>> = train
        .iter()
        .map(|s| model.labels_of(s))
        .collect::<Result<_>>()?;
    let groups = pack_indices(train, ft.max_frames_per_batch)?;
    let total = ft.epochs * groups.len();
    let warmup = ft.warmup_epochs * groups.len();
    let mut opt = AdamW::new(ft.weight_decay);
    let mut log_file = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(format!("finetune-{}_log.jsonl", task.name()));
            Some((
                fs::File::create(&path).map_err(|e| Error::io(&path, e))?,
                path,
            ))
        }
        None => None,
    };
    let mut log = Vec::new();
    let mut step = 0;
    for epoch in 0..ft.epochs {
        let mut order: Vec<usize> = (0..groups.len()).collect();
        order.shuffle(&mut substream(ft.seed, streams::SHUFFLE, epoch as u64));
        let (mut sum, mut sum_ctc, mut sum_att) = (0.0, 0.0, 0.0);
        let mut lr = 0.0;
        for &gi in &order {
            lr = lr_at(step, total, warmup, ft.peak_lr);
            let group = &groups[gi];
            let mut enc_grads = BTreeMap::new();
            let mut head_grads = BTreeMap::new();
            for (i, &si) in group.iter().enumerate() {
                let mut view = train[si].clone();
                if task != Task::Audio
                    && view.video.height == FRAME_SIZE
                    && view.video.width == FRAME_SIZE
                {
                    let mut rng = substream(ft.seed, streams::AUGMENT, key(step, i));
                    view.video = augment_video(&view.video, &mut rng)?;
                }
                let mut g = Graph::new();
                let mut eb = Binder::new(&model.encoders, task.trains_encoders());
                let mut hb = Binder::new(&model.heads, true);
                let (ctc, att) = model.loss_terms(&mut g, &mut eb, &mut hb, &view, &labels[si])?;
                let (c, a) = (g.value(ctc).item(), g.value(att).item());
                sum += joint_loss(c, a, ft.ctc_weight);
                sum_ctc += c;
                sum_att += a;
                let n = group.len() as f64;
                let root =
                    g.weighted_sum(&[(ctc, ft.ctc_weight / n), (att, (1.0 - ft.ctc_weight) / n)]);
                let mut grads = g.backward(root);
                accumulate(&mut enc_grads, eb.gradients(&mut grads));
                accumulate(&mut head_grads, hb.gradients(&mut grads));
            }
            if task.trains_encoders() {
                opt.step("encoders", &mut model.encoders, &enc_grads, lr);
            }
            opt.step("heads", &mut model.heads, &head_grads, lr);
            step += 1;
        }
        let n = train.len().max(1) as f64;
        let (valid_loss, valid_wer) = if valid.is_empty() {
            (None, None)
        } else {
            let (l, w) = validate_model(&model, valid)?;
            (Some(l), Some(w))
        };
        let record = EpochRecord {
            epoch,
            step,
            lr,
            train_loss: sum / n,
            train_ctc: sum_ctc / n,
            train_attention: sum_att / n,
            valid_loss,
            valid_wer,
        };
        log::debug!(
            "{} epoch {epoch} loss {:.4} valid {:?} wer {:?}",
            task.name(),
            record.train_loss,
            valid_loss,
            valid_wer
        );
        if let Some((f, path)) = log_file.as_mut() {
            let line = serde_json::to_string(&record).expect("record serializes");
            writeln!(f, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
        }
        log.push(record);
    }
    if let Some(dir) = out_dir {
        model.save(&dir.join(format!("finetune-{}.ckpt", task.name())), step)?;
    }
    Ok(FinetuneRun { model, log })
}

/// Anything that can put a transcript on a sample.
pub trait Transcriber {
    fn transcribe_sample(&self, sample: &AVSample) -> Result<String>;
    /// Names the labelling model in provenance records.
    fn identity(&self) -> String;
}

/// A fine-tuned model decoding with a fixed beam and CTC weight.
pub struct BeamTranscriber<'m> {
    pub model: &'m AsrModel,
    pub beam: usize,
    pub ctc_weight: f64,
}

impl Transcriber for BeamTranscriber<'_> {
    fn transcribe_sample(&self, sample: &AVSample) -> Result<String> {
        self.model.transcribe(sample, self.beam, self.ctc_weight)
    }

    fn identity(&self) -> String {
        self.model.fingerprint()
    }
}

/// Copies of `unlabelled` carrying the labeller's transcripts and a
/// `pseudo-label:<identity>` provenance.
pub fn pseudo_label(labeller: &dyn Transcriber, unlabelled: &[AVSample]) -> Result<Vec<AVSample>> {
    let identity = labeller.identity();
    unlabelled
        .iter()
        .map(|s| {
            Ok(AVSample {
                transcript: Some(labeller.transcribe_sample(s)?),
                provenance: Some(format!("pseudo-label:{identity}")),
                ..s.clone()
            })
        })
        .collect()
}

pub struct SelfTrainRun {
    pub pseudo: Vec<AVSample>,
    pub run: FinetuneRun,
}

/// Pseudo-labels `unlabelled` with `labeller` (beam search at the
/// configured width and CTC weight), then fine-tunes fresh copies of the
/// pre-trained encoders on labelled ∪ pseudo-labelled data. With
/// `out_dir`, the pseudo-labelled set is written under `pseudo/` and the
/// run's artifacts next to it. Samples with an empty pseudo-transcript
/// are kept out of training since they carry no label.
pub fn self_train(
    config: &ExperimentConfig,
    task: Task,
    labeller: &AsrModel,
    pretrained: &EncoderInit,
    unlabelled: &[AVSample],
    labelled: &[AVSample],
    valid: &[AVSample],
    out_dir: Option<&Path>,
) -> Result<SelfTrainRun> {
    let ft = &config.finetune;
    let transcriber = BeamTranscriber {
        model: labeller,
        beam: ft.beam_size,
        ctc_weight: ft.ctc_weight,
    };
    let pseudo = pseudo_label(&transcriber, unlabelled)?;
    if let Some(dir) = out_dir {
        write_dataset(&dir.join("pseudo"), &pseudo)?;
    }
    let mut train: Vec<AVSample> = labelled.to_vec();
    train.extend(
        pseudo
            .iter()
            .filter(|s| s.transcript.as_deref().is_some_and(|t| !t.is_empty()))
            .cloned(),
    );
    let run = run_finetune(config, task, pretrained, &train, valid, out_dir)?;
    Ok(SelfTrainRun { pseudo, run })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, SyntheticSpec};
    use proptest::prelude::*;

    #[test]
    fn tokenizer_reserved_ids() {
        let t = Tokenizer::default();
        assert_eq!(t.vocab_size(), 4 + 28);
        let ids = t.encode("a b'").unwrap();
        assert_eq!(ids, vec![5, 4, 6, 31]);
        assert!(!ids.contains(&BLANK));
        assert_eq!(t.decode(&[SOS, 5, BLANK, 6, EOS, PAD]), "ab");
        assert!(matches!(t.encode("A"), Err(Error::OutOfVocabulary('A'))));
    }

    proptest! {
        #[test]
        fn tokenizer_round_trip(s in "[ a-z']{0,40}") {
            let t = Tokenizer::default();
            prop_assert_eq!(t.decode(&t.encode(&s).unwrap()), s);
        }
    }

    #[test]
    fn ctc_examples() {
        // one frame, certain label
        let l = Tensor::new(&[1, 2], vec![-1e9, 0.0]);
        assert!(ctc_loss(&l, &[1]).unwrap().abs() < 1e-12);
        // two uniform frames: paths aa, a-, -a out of 4
        let u = Tensor::zeros(&[2, 2]);
        assert!((ctc_loss(&u, &[1]).unwrap() + (0.75f64).ln()).abs() < 1e-12);
        assert!(matches!(
            ctc_loss(&u, &[1, 1]),
            Err(Error::InfeasibleLength {
                labels: 2,
                frames: 2
            })
        ));
    }

    #[test]
    fn attention_and_joint_examples() {
        let onehot = Tensor::new(&[2, 3], vec![0.0, 1e9, 0.0, 0.0, 0.0, 1e9]);
        assert!(attention_loss(&onehot, &[1, 2]).abs() < 1e-12);
        let uniform = Tensor::zeros(&[3, 5]);
        assert!((attention_loss(&uniform, &[0, 1, 2]) - 5f64.ln()).abs() < 1e-12);
        let half = Tensor::new(&[1, 2], vec![0.0, 0.0]);
        assert!((attention_loss(&half, &[0]) - 2f64.ln()).abs() < 1e-12);
        assert!((joint_loss(1.0, 0.0, 0.1) - 0.1).abs() < 1e-15);
        assert!((joint_loss(0.0, 1.0, 0.1) - 0.9).abs() < 1e-15);
        assert_eq!(joint_loss(7.0, 2.5, 0.0), 2.5);
    }

    #[test]
    fn prefix_scores_sum_to_full_probability() {
        // Over T frames, P(prefix h) = P(exactly h) + sum_c P(prefix h+c).
        let lp = log_softmax_rows(&Tensor::new(
            &[3, 3],
            vec![0.2, 1.0, -0.5, 0.0, 0.3, 0.9, 1.2, -0.1, 0.4],
        ));
        let s = CtcPrefixScorer::new(lp);
        let root = s.initial();
        let (pa, sa) = s.extend(&root, None, 1);
        let exact = s.final_score(&sa);
        let (pab, _) = s.extend(&sa, Some(1), 2);
        let (paa, _) = s.extend(&sa, Some(1), 1);
        let total = log_add(exact, log_add(pab, paa));
        assert!((total - pa).abs() < 1e-12);
        // the empty prefix holds all mass
        let (p1, _) = s.extend(&root, None, 1);
        let (p2, _) = s.extend(&root, None, 2);
        let all = log_add(s.final_score(&root), log_add(p1, p2));
        assert!(all.abs() < 1e-12);
    }

    /// Attention model with fixed distributions per prefix length.
    struct Table(Vec<Vec<f64>>);

    impl PrefixScorer for Table {
        fn next_log_probs(&mut self, prefix: &[usize]) -> Vec<f64> {
            let row = &self.0[(prefix.len() - 1).min(self.0.len() - 1)];
            log_softmax_rows(&Tensor::new(&[1, row.len()], row.clone()))
                .data()
                .to_vec()
        }
    }

    #[test]
    fn beam_one_is_greedy_and_beam_never_worse() {
        let lp = log_softmax_rows(&Tensor::new(
            &[3, 6],
            vec![
                0.1, -9.0, -9.0, -9.0, 1.0, 0.5, //
                0.7, -9.0, -9.0, -9.0, 0.2, 0.9, //
                1.5, -9.0, -9.0, -9.0, 0.3, 0.1,
            ],
        ));
        let ctc = CtcPrefixScorer::new(lp);
        let mut att = Table(vec![
            vec![-9.0, -9.0, -9.0, 0.0, 0.9, 1.0],
            vec![-9.0, -9.0, -9.0, 0.8, 0.5, 0.6],
            vec![-9.0, -9.0, -9.0, 2.0, 0.1, 0.1],
        ]);
        for w in [0.0, 0.1, 0.5, 1.0] {
            let opts = DecodeOptions {
                beam: 1,
                ctc_weight: w,
                max_len: 6,
                lm_weight: 0.0,
            };
            let mut sc = Scorers {
                attention: &mut att,
                ctc: &ctc,
                lm: None,
                labels: 4..6,
            };
            let g = greedy_search(&mut sc, &opts);
            let b1 = beam_search(&mut sc, &opts);
            assert_eq!(g, b1);
            let wide = beam_search(&mut sc, &DecodeOptions { beam: 8, ..opts });
            assert!(wide.score >= g.score - 1e-12);
            for h in [&g, &wide] {
                assert_eq!(h.score, weighted(w, h.ctc) + weighted(1.0 - w, h.attention));
            }
        }
    }

    #[test]
    fn fusion_shapes_and_errors() {
        let head = FusionHead {
            in_dim: 3,
            hidden: 4,
            out_dim: 2,
        };
        let mut store = ParamStore::new();
        head.init(&mut store, "f", &mut substream(0, 0, 0));
        let v = Tensor::full(&[5, 3], 0.5);
        let a = Tensor::full(&[5, 3], -0.2);
        assert_eq!(
            fusion_forward(&head, &store, "f", &v, &a).unwrap().shape(),
            &[5, 2]
        );
        for (_, t) in store.iter_mut() {
            t.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        store
            .get_mut("f.fc2.b")
            .unwrap()
            .data_mut()
            .copy_from_slice(&[0.25, -1.0]);
        let out = fusion_forward(&head, &store, "f", &v, &a).unwrap();
        assert!(out.data().chunks(2).all(|r| r == [0.25, -1.0]));
        let short = Tensor::full(&[4, 3], 0.0);
        assert!(matches!(
            fusion_forward(&head, &store, "f", &v, &short),
            Err(Error::LengthMismatch(_))
        ));
    }

    fn tiny_data(n: usize, seed: u64) -> (ExperimentConfig, Vec<AVSample>) {
        let mut config = ExperimentConfig::default();
        config.finetune.epochs = 1;
        config.finetune.warmup_epochs = 0;
        config.finetune.max_frames_per_batch = 200;
        let spec = SyntheticSpec {
            min_seconds: 0.6,
            max_seconds: 0.8,
            seed,
            ..SyntheticSpec::from(&config.data)
        };
        (config, generate_dataset(&spec, 0, n))
    }

    #[test]
    fn smoke_one_epoch_finite() {
        let (config, data) = tiny_data(8, 0);
        let run = run_finetune(
            &config,
            Task::Audio,
            &EncoderInit::Random,
            &data,
            &data[..2],
            None,
        )
        .unwrap();
        let r = &run.log[0];
        assert!(r.train_loss.is_finite() && r.valid_loss.unwrap().is_finite());
        let h = run.model.decode(&data[0], 1, 0.1).unwrap();
        assert!(h.tokens.len() <= 2 * data[0].frames());
    }

    #[test]
    fn fusion_keeps_encoders_frozen() {
        let (config, data) = tiny_data(2, 0);
        let init = EncoderInit::Random;
        let before = AsrModel::new(&config, Task::AudioVisual, &init)
            .unwrap()
            .encoders;
        let run = run_finetune(&config, Task::AudioVisual, &init, &data, &[], None).unwrap();
        assert_eq!(run.model.encoders, before);
        assert_ne!(
            run.model.heads,
            AsrModel::new(&config, Task::AudioVisual, &init)
                .unwrap()
                .heads
        );
    }

    #[test]
    fn pretrained_layout_mismatch() {
        let config = ExperimentConfig::default();
        let mut other = config.clone();
        other.model.attn_dim = 64;
        let state = PretrainState::new(other, 1, 0).unwrap();
        assert!(matches!(
            AsrModel::new(&config, Task::Video, &EncoderInit::from_pretrain(&state)),
            Err(Error::ConfigMismatch(_))
        ));
        let ok = PretrainState::new(config.clone(), 1, 0).unwrap();
        let m = AsrModel::new(&config, Task::Video, &EncoderInit::from_pretrain(&ok)).unwrap();
        assert_eq!(m.encoders, ok.students.subset("video"));
    }

    #[test]
    fn checkpoint_round_trip() {
        let (config, data) = tiny_data(1, 0);
        let m = AsrModel::new(&config, Task::Audio, &EncoderInit::Random).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        m.save(&p, 3).unwrap();
        let back = AsrModel::load(&p).unwrap();
        assert_eq!(back.params(), m.params());
        assert_eq!(back.fingerprint(), m.fingerprint());
        assert_eq!(
            back.decode(&data[0], 1, 0.1).unwrap(),
            m.decode(&data[0], 1, 0.1).unwrap()
        );
    }

    struct Oracle;

    impl Transcriber for Oracle {
        fn transcribe_sample(&self, s: &AVSample) -> Result<String> {
            Ok(s.transcript.clone().unwrap_or_default())
        }
        fn identity(&self) -> String {
            "oracle".into()
        }
    }

    #[test]
    fn oracle_pseudo_labels_match_ground_truth() {
        let (_, data) = tiny_data(4, 3);
        let p = pseudo_label(&Oracle, &data).unwrap();
        for (a, b) in p.iter().zip(&data) {
            assert_eq!(a.transcript, b.transcript);
            assert_eq!(a.provenance.as_deref(), Some("pseudo-label:oracle"));
        }
    }

    #[test]
    fn empty_unlabelled_set_is_plain_finetuning() {
        let (config, data) = tiny_data(3, 0);
        let labeller = AsrModel::new(&config, Task::Audio, &EncoderInit::Random).unwrap();
        let state = PretrainState::new(config.clone(), 1, 0).unwrap();
        let init = EncoderInit::from_pretrain(&state);
        let st = self_train(
            &config,
            Task::Audio,
            &labeller,
            &init,
            &[],
            &data,
            &[],
            None,
        )
        .unwrap();
        let direct = run_finetune(&config, Task::Audio, &init, &data, &[], None).unwrap();
        assert!(st.pseudo.is_empty());
        assert_eq!(st.run.model.params(), direct.model.params());
    }
}
