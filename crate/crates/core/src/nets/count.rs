//! Closed-form parameter counts, computed from the configuration alone.

use crate::config::{FrontendScale, ModelConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Component {
    VideoFrontend,
    AudioFrontend,
    Encoder,
    VideoPredictor,
    /// Both audio predictors (audio-to-video and audio-to-audio).
    AudioPredictors,
}

/// Conv weights without bias plus the two affine vectors after it.
fn conv_affine(cin: usize, cout: usize, taps: usize) -> usize {
    cin * cout * taps + 2 * cout
}

/// Residual block with `taps`-tap convolutions; a 1x1 projection
/// shortcut is present whenever the width or stride changes.
fn basic_block(cin: usize, cout: usize, taps: usize, projected: bool) -> usize {
    let main = conv_affine(cin, cout, taps) + conv_affine(cout, cout, taps);
    main + if projected {
        conv_affine(cin, cout, 1)
    } else {
        0
    }
}

/// Four stages of two blocks each (64, 128, 256, 512 channels).
fn resnet18_stages(taps: usize) -> usize {
    let mut total = 2 * basic_block(64, 64, taps, false);
    for (cin, cout) in [(64, 128), (128, 256), (256, 512)] {
        total += basic_block(cin, cout, taps, true) + basic_block(cout, cout, taps, false);
    }
    total
}

fn linear(d_in: usize, d_out: usize) -> usize {
    d_in * d_out + d_out
}

pub fn video_frontend_params(cfg: &ModelConfig) -> usize {
    let d = cfg.attn_dim;
    match cfg.frontend {
        // 3x5x5 stem to 8 channels, one strided block to 16
        FrontendScale::Tiny => {
            conv_affine(1, 8, 3 * 5 * 5) + basic_block(8, 16, 9, true) + linear(16, d)
        }
        // 5x7x7 stem to 64 channels, then 3x3 ResNet-18 stages
        FrontendScale::Resnet18 => {
            conv_affine(1, 64, 5 * 7 * 7) + resnet18_stages(9) + linear(512, d)
        }
    }
}

pub fn audio_frontend_params(cfg: &ModelConfig) -> usize {
    let d = cfg.attn_dim;
    match cfg.frontend {
        // four biased convs: 1->8 (16 taps), 8->16 (16), 16->16 (9), 16->16 (4)
        FrontendScale::Tiny => {
            linear(16, 8)
                + linear(8 * 16, 16)
                + linear(16 * 9, 16)
                + linear(16 * 4, 16)
                + linear(16, d)
        }
        // 80-tap stem to 64 channels, then 3-tap ResNet-18 stages
        FrontendScale::Resnet18 => conv_affine(1, 64, 80) + resnet18_stages(3) + linear(512, d),
    }
}

/// Pre-norm block: two layer norms, fused qkv, output projection, MLP.
pub fn transformer_block_params(d: usize, mlp: usize) -> usize {
    2 * d + linear(d, 3 * d) + linear(d, d) + 2 * d + linear(d, mlp) + linear(mlp, d)
}

pub fn encoder_params(cfg: &ModelConfig) -> usize {
    cfg.num_blocks * transformer_block_params(cfg.attn_dim, cfg.mlp_dim) + 2 * cfg.attn_dim
}

pub fn predictor_params(cfg: &ModelConfig, blocks: usize) -> usize {
    let (d, p) = (cfg.attn_dim, cfg.predictor_dim);
    d + linear(d, p)
        + blocks * transformer_block_params(p, cfg.predictor_mlp_dim)
        + 2 * p
        + linear(p, d)
}

/// Attention decoder with cross-attention over `memory_dim` features.
pub fn decoder_params(
    blocks: usize,
    dim: usize,
    mlp: usize,
    memory_dim: usize,
    vocab: usize,
) -> usize {
    let per_block = transformer_block_params(dim, mlp)
        + 2 * dim
        + linear(dim, dim)
        + linear(memory_dim, 2 * dim)
        + linear(dim, dim);
    vocab * dim + blocks * per_block + 2 * dim + linear(dim, vocab)
}

pub fn count_params(cfg: &ModelConfig, include: &[Component]) -> usize {
    include
        .iter()
        .map(|c| match c {
            Component::VideoFrontend => video_frontend_params(cfg),
            Component::AudioFrontend => audio_frontend_params(cfg),
            Component::Encoder => encoder_params(cfg),
            Component::VideoPredictor => predictor_params(cfg, cfg.video_predictor_blocks),
            Component::AudioPredictors => 2 * predictor_params(cfg, cfg.audio_predictor_blocks),
        })
        .sum()
}

/// Published frontend+encoder size of each non-tiny preset.
pub fn reference_count(preset: &str) -> Option<usize> {
    match preset {
        "base" => Some(41_000_000),
        "base_plus" => Some(93_000_000),
        "large" => Some(328_000_000),
        _ => None,
    }
}

/// Frontend plus encoder for one modality.
pub fn backbone_params(cfg: &ModelConfig, video: bool) -> usize {
    let front = if video {
        Component::VideoFrontend
    } else {
        Component::AudioFrontend
    };
    count_params(cfg, &[front, Component::Encoder])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_hand_sums() {
        let cfg = ModelConfig::tiny();
        // stem 8*75 + 16; block 1152+32 + 2304+32 + 128+32; proj 16*32+32
        assert_eq!(video_frontend_params(&cfg), 616 + 3680 + 544);
        // 136 + 2064 + 2320 + 1040 + 544
        assert_eq!(audio_frontend_params(&cfg), 6104);
        // block: ln 64, qkv 3168, out 1056, ln 64, fc1 2112, fc2 2080; final ln 64
        assert_eq!(encoder_params(&cfg), 2 * 8544 + 64);
        // token 32, in 1056, 1 block 8544, ln 64, out 1056
        assert_eq!(
            count_params(&cfg, &[Component::VideoPredictor]),
            32 + 1056 + 8544 + 64 + 1056
        );
    }

    #[test]
    fn base_audio_resnet_is_about_four_million() {
        let cfg = ModelConfig::preset("base").unwrap();
        let n = audio_frontend_params(&cfg);
        assert!((3_900_000..4_300_000).contains(&n), "{n}");
    }
}
