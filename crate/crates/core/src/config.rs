//! Experiment configuration: model-size presets, pre-training and
//! fine-tuning hyperparameters, and the synthetic data description.
//!
//! The on-disk form is a TOML document with four tables (`model`,
//! `pretrain`, `finetune`, `data`). Absent keys take the defaults of the
//! selected `model.preset`; unknown keys are rejected.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PRESET_NAMES: [&str; 4] = ["tiny", "base", "base_plus", "large"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrontendScale {
    /// Laptop-sized convolutional trunks.
    Tiny,
    /// 2-D ResNet-18 with a 3-D stem (video), 1-D ResNet-18 (audio).
    Resnet18,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub preset: String,
    pub num_blocks: usize,
    pub attn_dim: usize,
    pub num_heads: usize,
    pub mlp_dim: usize,
    pub drop_path_rate: f64,
    pub video_predictor_blocks: usize,
    pub audio_predictor_blocks: usize,
    pub predictor_dim: usize,
    pub predictor_heads: usize,
    pub predictor_mlp_dim: usize,
    pub frontend: FrontendScale,
}

impl ModelConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let (num_blocks, attn_dim, num_heads, mlp_dim) = match name {
            "tiny" => (2, 32, 4, 64),
            "base" => (12, 512, 8, 2048),
            "base_plus" => (12, 768, 12, 3072),
            "large" => (24, 1024, 16, 4096),
            other => return Err(Error::UnknownPreset(other.to_string())),
        };
        let tiny = name == "tiny";
        Ok(Self {
            preset: name.to_string(),
            num_blocks,
            attn_dim,
            num_heads,
            mlp_dim,
            drop_path_rate: 0.05,
            video_predictor_blocks: 1,
            audio_predictor_blocks: 2,
            predictor_dim: if tiny { 32 } else { 512 },
            predictor_heads: if tiny { 4 } else { 8 },
            predictor_mlp_dim: if tiny { 64 } else { 2048 },
            frontend: if tiny {
                FrontendScale::Tiny
            } else {
                FrontendScale::Resnet18
            },
        })
    }

    pub fn tiny() -> Self {
        Self::preset("tiny").expect("tiny preset")
    }
}

/// Which teacher activations become prediction targets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    /// Mean over every block output, then instance normalization.
    AllBlocks,
    /// Final encoder output after its layer norm, no instance normalization.
    LastBlock,
    /// Mean over the last `k` block outputs, then instance normalization.
    LastK(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossSupport {
    Masked,
    All,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub mask_start_prob_video: f64,
    pub mask_start_prob_audio: f64,
    pub mask_span_frames: usize,
    pub ema_start: f64,
    pub ema_end: f64,
    pub loss_weight_a2v: f64,
    pub loss_weight_a2a: f64,
    pub max_frames_per_batch: usize,
    pub seed: u64,
    pub target_mode: TargetMode,
    /// Instance-normalize each block before averaging.
    pub normalize_each_block: bool,
    pub loss_support: LossSupport,
    pub checkpoint_every_epochs: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 150,
            warmup_epochs: 40,
            peak_lr: 3e-3,
            weight_decay: 0.04,
            mask_start_prob_video: 0.2,
            mask_start_prob_audio: 0.4,
            mask_span_frames: 3,
            ema_start: 0.999,
            ema_end: 1.0,
            loss_weight_a2v: 1.0,
            loss_weight_a2a: 2.0,
            max_frames_per_batch: 2400,
            seed: 0,
            target_mode: TargetMode::AllBlocks,
            normalize_each_block: false,
            loss_support: LossSupport::Masked,
            checkpoint_every_epochs: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub ctc_weight: f64,
    pub beam_size: usize,
    pub decoder_blocks: usize,
    pub decoder_dim: usize,
    pub decoder_heads: usize,
    pub decoder_mlp_dim: usize,
    pub fusion_hidden: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub max_frames_per_batch: usize,
    pub seed: u64,
}

impl FinetuneConfig {
    /// Decoder sized for the encoder preset: the tiny preset gets a 2-block,
    /// 32-wide decoder; every other preset the 6-block low-resource decoder.
    pub fn for_preset(preset: &str) -> Self {
        if preset == "tiny" {
            Self {
                ctc_weight: 0.1,
                beam_size: 40,
                decoder_blocks: 2,
                decoder_dim: 32,
                decoder_heads: 4,
                decoder_mlp_dim: 64,
                fusion_hidden: 64,
                epochs: 10,
                warmup_epochs: 1,
                peak_lr: 3e-3,
                weight_decay: 0.01,
                max_frames_per_batch: 2400,
                seed: 0,
            }
        } else {
            Self::low_resource()
        }
    }

    pub fn low_resource() -> Self {
        Self {
            ctc_weight: 0.1,
            beam_size: 40,
            decoder_blocks: 6,
            decoder_dim: 256,
            decoder_heads: 4,
            decoder_mlp_dim: 2048,
            fusion_hidden: 1024,
            epochs: 75,
            warmup_epochs: 5,
            peak_lr: 1e-3,
            weight_decay: 0.04,
            max_frames_per_batch: 2400,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub num_samples: usize,
    pub vocab_size: usize,
    pub tokens_per_second: f64,
    pub min_seconds: f64,
    pub max_seconds: f64,
    pub video_noise_std: f64,
    pub audio_noise_std: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            num_samples: 32,
            vocab_size: 8,
            tokens_per_second: 3.0,
            min_seconds: 1.0,
            max_seconds: 2.0,
            video_noise_std: 0.05,
            audio_noise_std: 0.05,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub data: DataConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::for_preset("tiny").expect("tiny preset")
    }
}

impl ExperimentConfig {
    pub fn for_preset(name: &str) -> Result<Self> {
        Ok(Self {
            model: ModelConfig::preset(name)?,
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::for_preset(name),
            data: DataConfig::default(),
        })
    }

    pub fn render(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Short stable digest of the rendered configuration.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.render().as_bytes());
        hex::encode(&digest[..8])
    }

    pub fn validate(&self) -> ValidationReport {
        validate(self)
    }
}

/// Parses a TOML experiment document. Keys missing from the document take
/// the defaults of `model.preset` (itself defaulting to `tiny`).
pub fn load_config(text: &str) -> Result<ExperimentConfig> {
    let doc: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| Error::Parse(e.to_string()))?;
    let preset = match doc.get("model").and_then(|m| m.get("preset")) {
        None => "tiny".to_string(),
        Some(toml::Value::String(s)) => s.clone(),
        Some(other) => {
            return Err(Error::Parse(format!(
                "model.preset must be a string, got {other}"
            )))
        }
    };
    let defaults = ExperimentConfig::for_preset(&preset)?;
    let mut merged = toml::Table::try_from(&defaults).map_err(|e| Error::Parse(e.to_string()))?;
    merge(&mut merged, doc, "")?;
    toml::Value::Table(merged)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Parse(e.to_string()))
}

fn merge(base: &mut toml::Table, overlay: toml::Table, prefix: &str) -> Result<()> {
    for (key, value) in overlay {
        let path = if prefix.is_empty() {
            key.clone()
        } else {
            format!("{prefix}.{key}")
        };
        match base.get_mut(&key) {
            None => return Err(Error::UnknownKey(path)),
            Some(toml::Value::Table(inner)) if value.is_table() && !is_enum_table(inner) => {
                let toml::Value::Table(overlay_inner) = value else {
                    unreachable!()
                };
                merge(inner, overlay_inner, &path)?;
            }
            Some(slot) => *slot = value,
        }
    }
    Ok(())
}

/// Tables standing for data-carrying enum variants (`{ last_k = 6 }`) are
/// replaced wholesale rather than merged key by key.
fn is_enum_table(t: &toml::Table) -> bool {
    t.len() == 1 && t.contains_key("last_k")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Violation {
    pub path: String,
    pub message: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn mentions(&self, path: &str) -> bool {
        self.violations.iter().any(|v| v.path == path)
    }

    fn push(&mut self, path: &str, message: impl Into<String>) {
        self.violations.push(Violation {
            path: path.to_string(),
            message: message.into(),
        });
    }

    fn at_least_one(&mut self, path: &str, value: usize) {
        if value < 1 {
            self.push(path, "must be at least 1");
        }
    }

    fn unit_interval(&mut self, path: &str, value: f64) {
        if !(0.0..=1.0).contains(&value) {
            self.push(path, format!("{value} is outside [0, 1]"));
        }
    }

    fn positive(&mut self, path: &str, value: f64) {
        if !(value > 0.0 && value.is_finite()) {
            self.push(path, format!("{value} must be positive"));
        }
    }

    fn nonnegative(&mut self, path: &str, value: f64) {
        if !(value >= 0.0 && value.is_finite()) {
            self.push(path, format!("{value} must be nonnegative"));
        }
    }

    /// Converts a non-empty report into an error.
    pub fn into_result(self) -> Result<()> {
        if self.is_empty() {
            return Ok(());
        }
        let msg = self
            .violations
            .iter()
            .map(|v| format!("{}: {}", v.path, v.message))
            .collect::<Vec<_>>()
            .join("; ");
        Err(Error::InvalidConfig(msg))
    }
}

pub fn validate(config: &ExperimentConfig) -> ValidationReport {
    let mut r = ValidationReport::default();
    let m = &config.model;
    for (path, v) in [
        ("model.num_blocks", m.num_blocks),
        ("model.attn_dim", m.attn_dim),
        ("model.num_heads", m.num_heads),
        ("model.mlp_dim", m.mlp_dim),
        ("model.video_predictor_blocks", m.video_predictor_blocks),
        ("model.audio_predictor_blocks", m.audio_predictor_blocks),
        ("model.predictor_dim", m.predictor_dim),
        ("model.predictor_heads", m.predictor_heads),
        ("model.predictor_mlp_dim", m.predictor_mlp_dim),
    ] {
        r.at_least_one(path, v);
    }
    if m.num_heads > 0 && m.attn_dim % m.num_heads != 0 {
        r.push(
            "model.attn_dim",
            format!(
                "{} is not divisible by num_heads = {}",
                m.attn_dim, m.num_heads
            ),
        );
    }
    if m.predictor_heads > 0 && m.predictor_dim % m.predictor_heads != 0 {
        r.push(
            "model.predictor_dim",
            format!(
                "{} is not divisible by predictor_heads = {}",
                m.predictor_dim, m.predictor_heads
            ),
        );
    }
    if !(0.0..1.0).contains(&m.drop_path_rate) {
        r.push(
            "model.drop_path_rate",
            format!("{} is outside [0, 1)", m.drop_path_rate),
        );
    }

    let p = &config.pretrain;
    r.at_least_one("pretrain.epochs", p.epochs);
    if p.warmup_epochs >= p.epochs {
        r.push(
            "pretrain.warmup_epochs",
            format!(
                "{} must be smaller than epochs = {}",
                p.warmup_epochs, p.epochs
            ),
        );
    }
    r.positive("pretrain.peak_lr", p.peak_lr);
    r.positive("pretrain.weight_decay", p.weight_decay);
    r.unit_interval("pretrain.mask_start_prob_video", p.mask_start_prob_video);
    r.unit_interval("pretrain.mask_start_prob_audio", p.mask_start_prob_audio);
    r.at_least_one("pretrain.mask_span_frames", p.mask_span_frames);
    r.unit_interval("pretrain.ema_start", p.ema_start);
    r.unit_interval("pretrain.ema_end", p.ema_end);
    if p.ema_start > p.ema_end {
        r.push(
            "pretrain.ema_start",
            format!("{} exceeds ema_end = {}", p.ema_start, p.ema_end),
        );
    }
    r.nonnegative("pretrain.loss_weight_a2v", p.loss_weight_a2v);
    r.nonnegative("pretrain.loss_weight_a2a", p.loss_weight_a2a);
    r.at_least_one("pretrain.max_frames_per_batch", p.max_frames_per_batch);
    r.at_least_one(
        "pretrain.checkpoint_every_epochs",
        p.checkpoint_every_epochs,
    );
    for (path, seed) in [
        ("pretrain.seed", p.seed),
        ("finetune.seed", config.finetune.seed),
        ("data.seed", config.data.seed),
    ] {
        if seed > i64::MAX as u64 {
            r.push(path, "must fit in a signed 64-bit integer");
        }
    }
    if let TargetMode::LastK(k) = p.target_mode {
        r.at_least_one("pretrain.target_mode", k);
    }

    let f = &config.finetune;
    r.unit_interval("finetune.ctc_weight", f.ctc_weight);
    for (path, v) in [
        ("finetune.beam_size", f.beam_size),
        ("finetune.decoder_blocks", f.decoder_blocks),
        ("finetune.decoder_dim", f.decoder_dim),
        ("finetune.decoder_heads", f.decoder_heads),
        ("finetune.decoder_mlp_dim", f.decoder_mlp_dim),
        ("finetune.fusion_hidden", f.fusion_hidden),
        ("finetune.epochs", f.epochs),
        ("finetune.max_frames_per_batch", f.max_frames_per_batch),
    ] {
        r.at_least_one(path, v);
    }
    if f.decoder_heads > 0 && f.decoder_dim % f.decoder_heads != 0 {
        r.push(
            "finetune.decoder_dim",
            format!(
                "{} is not divisible by decoder_heads = {}",
                f.decoder_dim, f.decoder_heads
            ),
        );
    }
    if f.warmup_epochs >= f.epochs.max(1) {
        r.push(
            "finetune.warmup_epochs",
            format!(
                "{} must be smaller than epochs = {}",
                f.warmup_epochs, f.epochs
            ),
        );
    }
    r.positive("finetune.peak_lr", f.peak_lr);
    r.nonnegative("finetune.weight_decay", f.weight_decay);

    let d = &config.data;
    if d.vocab_size < 2 {
        r.push("data.vocab_size", "must be at least 2");
    }
    if d.vocab_size > crate::data::MAX_VOCAB {
        r.push(
            "data.vocab_size",
            format!("must be at most {}", crate::data::MAX_VOCAB),
        );
    }
    r.positive("data.tokens_per_second", d.tokens_per_second);
    r.positive("data.min_seconds", d.min_seconds);
    r.positive("data.max_seconds", d.max_seconds);
    if d.min_seconds > d.max_seconds {
        r.push("data.min_seconds", "must not exceed max_seconds");
    }
    r.nonnegative("data.video_noise_std", d.video_noise_std);
    r.nonnegative("data.audio_noise_std", d.audio_noise_std);
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn preset_shapes() {
        let base = ModelConfig::preset("base").unwrap();
        assert_eq!(
            (base.num_blocks, base.attn_dim, base.num_heads, base.mlp_dim),
            (12, 512, 8, 2048)
        );
        let plus = ModelConfig::preset("base_plus").unwrap();
        assert_eq!(
            (plus.num_blocks, plus.attn_dim, plus.num_heads, plus.mlp_dim),
            (12, 768, 12, 3072)
        );
        let large = ModelConfig::preset("large").unwrap();
        assert_eq!(
            (
                large.num_blocks,
                large.attn_dim,
                large.num_heads,
                large.mlp_dim
            ),
            (24, 1024, 16, 4096)
        );
        let tiny = ModelConfig::preset("tiny").unwrap();
        assert_eq!(
            (tiny.num_blocks, tiny.attn_dim, tiny.num_heads, tiny.mlp_dim),
            (2, 32, 4, 64)
        );
        assert_eq!(tiny.predictor_dim, 32);
        assert_eq!(base.predictor_dim, 512);
        assert_eq!(
            (base.video_predictor_blocks, base.audio_predictor_blocks),
            (1, 2)
        );
    }

    #[test]
    fn unknown_preset_is_an_error() {
        assert!(matches!(
            ModelConfig::preset("huge"),
            Err(Error::UnknownPreset(_))
        ));
        assert!(matches!(
            load_config("[model]\npreset = \"huge\"\n"),
            Err(Error::UnknownPreset(_))
        ));
    }

    #[test]
    fn every_preset_validates() {
        for name in PRESET_NAMES {
            let report = ExperimentConfig::for_preset(name).unwrap().validate();
            assert!(report.is_empty(), "{name}: {report:?}");
        }
    }

    #[test]
    fn divisibility_violation_is_reported() {
        let mut c = ExperimentConfig::default();
        c.model.attn_dim = 10;
        c.model.num_heads = 4;
        assert!(c.validate().mentions("model.attn_dim"));
    }

    #[test]
    fn ema_range_violation_is_reported() {
        let mut c = ExperimentConfig::default();
        c.pretrain.ema_start = 1.01;
        let report = c.validate();
        assert!(report.mentions("pretrain.ema_start"));
        assert!(report.into_result().is_err());
    }

    #[test]
    fn warmup_must_precede_end() {
        let mut c = ExperimentConfig::default();
        c.pretrain.warmup_epochs = c.pretrain.epochs;
        assert!(c.validate().mentions("pretrain.warmup_epochs"));
    }

    #[test]
    fn preset_only_document() {
        let c = load_config("[model]\npreset = \"base\"\n").unwrap();
        assert_eq!(c.model, ModelConfig::preset("base").unwrap());
        assert_eq!(c.pretrain, PretrainConfig::default());
    }

    #[test]
    fn empty_document_is_all_defaults() {
        assert_eq!(load_config("").unwrap(), ExperimentConfig::default());
        assert_eq!(load_config("").unwrap().model.preset, "tiny");
    }

    #[test]
    fn typo_keys_fail_fast() {
        match load_config("[modle]\npreset = \"base\"\n") {
            Err(Error::UnknownKey(k)) => assert_eq!(k, "modle"),
            other => panic!("expected unknown-key, got {other:?}"),
        }
        match load_config("[pretrain]\nepoch = 3\n") {
            Err(Error::UnknownKey(k)) => assert_eq!(k, "pretrain.epoch"),
            other => panic!("expected unknown-key, got {other:?}"),
        }
    }

    #[test]
    fn overrides_apply_on_top_of_preset() {
        let c = load_config(
            "[model]\npreset = \"base\"\nnum_blocks = 3\n[pretrain]\ntarget_mode = { last_k = 6 }\n",
        )
        .unwrap();
        assert_eq!(c.model.num_blocks, 3);
        assert_eq!(c.model.attn_dim, 512);
        assert_eq!(c.pretrain.target_mode, TargetMode::LastK(6));
    }

    #[test]
    fn malformed_text_is_a_parse_error() {
        assert!(matches!(load_config("model = [1, "), Err(Error::Parse(_))));
        assert!(matches!(
            load_config("[pretrain]\nepochs = \"many\"\n"),
            Err(Error::Parse(_))
        ));
    }

    fn arb_config() -> impl Strategy<Value = ExperimentConfig> {
        (
            prop::sample::select(PRESET_NAMES.to_vec()),
            1usize..6,
            0.0f64..0.5,
            prop::sample::select(vec![
                TargetMode::AllBlocks,
                TargetMode::LastBlock,
                TargetMode::LastK(6),
            ]),
            0.0f64..1.0,
            0.0f64..1.0,
            0u64..(i64::MAX as u64),
            0.0f64..4.0,
        )
            .prop_map(|(preset, blocks, dp, mode, pv, pa, seed, w)| {
                let mut c = ExperimentConfig::for_preset(preset).unwrap();
                c.model.num_blocks = blocks;
                c.model.drop_path_rate = dp;
                c.pretrain.target_mode = mode;
                c.pretrain.mask_start_prob_video = pv;
                c.pretrain.mask_start_prob_audio = pa;
                c.pretrain.seed = seed;
                c.pretrain.loss_weight_a2a = w;
                c.data.seed = seed / 3;
                c
            })
    }

    proptest! {
        #[test]
        fn render_load_round_trip(c in arb_config()) {
            prop_assert!(c.validate().is_empty());
            let back = load_config(&c.render()).unwrap();
            prop_assert_eq!(back, c);
        }
    }
}
