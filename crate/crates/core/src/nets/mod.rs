//! Network building blocks and parameter management.

mod checkpoint;
mod count;
mod frontend;
mod params;
mod transformer;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CheckpointMeta,
};
pub use count::{
    audio_frontend_params, backbone_params, count_params, decoder_params, encoder_params,
    predictor_params, reference_count, transformer_block_params, video_frontend_params, Component,
};
pub use frontend::{AudioFrontend, VideoFrontend};
pub use params::{
    accumulate, init_layer_norm, init_linear, kaiming_conv, layer_norm, linear, normal,
    xavier_uniform, Binder, ParamStore,
};
pub use transformer::{
    drop_path, drop_path_factor, positional_encoding, AttentionDecoder, BlockDims, Encoder,
    EncoderOutput, Predictor,
};

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::config::ModelConfig;
use crate::data::AVSample;
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Video,
    Audio,
}

impl Modality {
    pub fn name(self) -> &'static str {
        match self {
            Modality::Video => "video",
            Modality::Audio => "audio",
        }
    }
}

enum Front {
    Video(VideoFrontend),
    Audio(AudioFrontend),
}

/// Frontend plus encoder for one modality. Parameters live under
/// `{prefix}.frontend.*` and `{prefix}.encoder.*`.
pub struct Backbone {
    pub modality: Modality,
    front: Front,
    pub encoder: Encoder,
}

impl Backbone {
    pub fn new(cfg: &ModelConfig, modality: Modality) -> Self {
        let front = match modality {
            Modality::Video => Front::Video(VideoFrontend::new(cfg)),
            Modality::Audio => Front::Audio(AudioFrontend::new(cfg)),
        };
        Self {
            modality,
            front,
            encoder: Encoder::new(cfg),
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, prefix: &str, rng: &mut R) {
        match &self.front {
            Front::Video(f) => f.init(store, &format!("{prefix}.frontend"), rng),
            Front::Audio(f) => f.init(store, &format!("{prefix}.frontend"), rng),
        }
        self.encoder.init(store, &format!("{prefix}.encoder"), rng);
    }

    /// Encodes this backbone's modality of `sample`. `rng` turns on drop path.
    pub fn forward(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        prefix: &str,
        sample: &AVSample,
        capture: bool,
        rng: Option<&mut (dyn RngCore + 'static)>,
    ) -> Result<EncoderOutput> {
        let fp = format!("{prefix}.frontend");
        let feats = match &self.front {
            Front::Video(f) => f.forward(g, b, &fp, &sample.video)?,
            Front::Audio(f) => f.forward(g, b, &fp, &sample.audio)?,
        };
        Ok(self
            .encoder
            .forward(g, b, &format!("{prefix}.encoder"), feats, capture, rng))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::FrontendScale;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn instantiated_counts_match_closed_form() {
        let mut cfg = ModelConfig::tiny();
        for scale in [FrontendScale::Tiny, FrontendScale::Resnet18] {
            cfg.frontend = scale;
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let mut s = ParamStore::new();
            Backbone::new(&cfg, Modality::Video).init(&mut s, "v", &mut rng);
            Backbone::new(&cfg, Modality::Audio).init(&mut s, "a", &mut rng);
            Predictor::new(&cfg, cfg.video_predictor_blocks).init(&mut s, "pv", &mut rng);
            Predictor::new(&cfg, cfg.audio_predictor_blocks).init(&mut s, "pa", &mut rng);
            assert_eq!(
                s.num_scalars_under("v.frontend"),
                video_frontend_params(&cfg)
            );
            assert_eq!(
                s.num_scalars_under("a.frontend"),
                audio_frontend_params(&cfg)
            );
            assert_eq!(s.num_scalars_under("v.encoder"), encoder_params(&cfg));
            assert_eq!(s.num_scalars_under("pv"), predictor_params(&cfg, 1));
            assert_eq!(s.num_scalars_under("pa"), predictor_params(&cfg, 2));
        }
        let dec = AttentionDecoder::new(
            2,
            BlockDims {
                dim: 16,
                heads: 2,
                mlp: 24,
            },
            32,
            31,
        );
        let mut s = ParamStore::new();
        dec.init(&mut s, "d", &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(s.num_scalars(), decoder_params(2, 16, 24, 32, 31));
    }
}
