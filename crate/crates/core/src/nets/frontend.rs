//! Convolutional feature extractors that turn raw video frames and raw
//! waveform into one `attn_dim` vector per video frame (25 per second).
//!
//! Both trunks are written in terms of `conv3d` on `[C, D, H, W]` tensors:
//! video is `[1, T, H, W]`, audio is `[1, 1, 1, L]`. Every sample runs in
//! its own graph, so batch normalization becomes its batch-of-one form:
//! each channel is standardized over all positions of the clip, then
//! scaled and shifted. Parameter counts match batch norm's affine part.

use rand::Rng;

use crate::autograd::{ConvGeom, Graph, Var};
use crate::config::{FrontendScale, ModelConfig};
use crate::data::{VideoClip, CROP_SIZE, FRAME_SIZE, SAMPLES_PER_FRAME};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::params::{init_linear, kaiming_conv, linear, Binder, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct BlockSpec {
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
}

/// Residual trunk: stem (conv + affine + relu, optional max pool) followed
/// by basic blocks whose 3-tap kernels run along `block_axis`.
#[derive(Clone, Debug)]
pub(crate) struct Trunk {
    pub stem: ConvSpec,
    pub stem_bias: bool,
    pub stem_pool: Option<([usize; 3], ConvGeom)>,
    /// Extra plain conv layers after the stem (tiny audio).
    pub plain: Vec<ConvSpec>,
    pub blocks: Vec<BlockSpec>,
    /// Axes the 3-tap block kernels cover (`[false, true, true]` for 2-D).
    pub block_axes: [bool; 3],
    pub out_channels: usize,
}

fn resnet18_blocks() -> Vec<BlockSpec> {
    let widths = [64, 128, 256, 512];
    let mut blocks = Vec::new();
    let mut cin = 64;
    for (stage, &w) in widths.iter().enumerate() {
        for i in 0..2 {
            let stride = if i == 0 && stage > 0 { 2 } else { 1 };
            blocks.push(BlockSpec {
                cin,
                cout: w,
                stride,
            });
            cin = w;
        }
    }
    blocks
}

pub(crate) fn video_trunk(scale: FrontendScale) -> Trunk {
    match scale {
        FrontendScale::Tiny => Trunk {
            stem: ConvSpec {
                cin: 1,
                cout: 8,
                kernel: [3, 5, 5],
                stride: [1, 4, 4],
                pad: [1, 2, 2],
            },
            stem_bias: false,
            stem_pool: None,
            plain: vec![],
            blocks: vec![BlockSpec {
                cin: 8,
                cout: 16,
                stride: 2,
            }],
            block_axes: [false, true, true],
            out_channels: 16,
        },
        FrontendScale::Resnet18 => Trunk {
            stem: ConvSpec {
                cin: 1,
                cout: 64,
                kernel: [5, 7, 7],
                stride: [1, 2, 2],
                pad: [2, 3, 3],
            },
            stem_bias: false,
            stem_pool: Some(([1, 3, 3], ConvGeom::new([1, 2, 2], [0, 1, 1]))),
            plain: vec![],
            blocks: resnet18_blocks(),
            block_axes: [false, true, true],
            out_channels: 512,
        },
    }
}

/// Cumulative temporal stride of every audio trunk is 640 samples.
pub(crate) fn audio_trunk(scale: FrontendScale) -> (Trunk, usize) {
    let conv1d = |cin, cout, k, s, p| ConvSpec {
        cin,
        cout,
        kernel: [1, 1, k],
        stride: [1, 1, s],
        pad: [0, 0, p],
    };
    match scale {
        FrontendScale::Tiny => (
            Trunk {
                stem: conv1d(1, 8, 16, 8, 4),
                stem_bias: true,
                stem_pool: None,
                plain: vec![
                    conv1d(8, 16, 16, 8, 4),
                    conv1d(16, 16, 9, 5, 2),
                    conv1d(16, 16, 4, 2, 1),
                ],
                blocks: vec![],
                block_axes: [false, false, true],
                out_channels: 16,
            },
            1,
        ),
        FrontendScale::Resnet18 => (
            Trunk {
                stem: conv1d(1, 64, 80, 4, 38),
                stem_bias: false,
                stem_pool: None,
                plain: vec![],
                blocks: resnet18_blocks(),
                block_axes: [false, false, true],
                out_channels: 512,
            },
            20,
        ),
    }
}

fn block_geometry(axes: [bool; 3], stride: usize) -> ([usize; 3], ConvGeom) {
    let mut k = [1; 3];
    let mut s = [1; 3];
    let mut p = [0; 3];
    for i in 0..3 {
        if axes[i] {
            k[i] = 3;
            s[i] = stride;
            p[i] = 1;
        }
    }
    (k, ConvGeom::new(s, p))
}

fn init_affine(store: &mut ParamStore, prefix: &str, c: usize) {
    store.insert(format!("{prefix}.scale"), Tensor::full(&[c], 1.0));
    store.insert(format!("{prefix}.shift"), Tensor::zeros(&[c]));
}

impl Trunk {
    pub(crate) fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, prefix: &str, rng: &mut R) {
        let s = &self.stem;
        let k = s.kernel;
        store.insert(
            format!("{prefix}.stem.w"),
            kaiming_conv(rng, [s.cout, s.cin, k[0], k[1], k[2]]),
        );
        if self.stem_bias {
            store.insert(format!("{prefix}.stem.b"), Tensor::zeros(&[s.cout]));
        } else {
            init_affine(store, &format!("{prefix}.stem.bn"), s.cout);
        }
        for (i, c) in self.plain.iter().enumerate() {
            let k = c.kernel;
            store.insert(
                format!("{prefix}.conv{i}.w"),
                kaiming_conv(rng, [c.cout, c.cin, k[0], k[1], k[2]]),
            );
            store.insert(format!("{prefix}.conv{i}.b"), Tensor::zeros(&[c.cout]));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("{prefix}.block{i}");
            let (k, _) = block_geometry(self.block_axes, b.stride);
            store.insert(
                format!("{p}.conv1.w"),
                kaiming_conv(rng, [b.cout, b.cin, k[0], k[1], k[2]]),
            );
            init_affine(store, &format!("{p}.bn1"), b.cout);
            store.insert(
                format!("{p}.conv2.w"),
                kaiming_conv(rng, [b.cout, b.cout, k[0], k[1], k[2]]),
            );
            init_affine(store, &format!("{p}.bn2"), b.cout);
            if b.stride != 1 || b.cin != b.cout {
                store.insert(
                    format!("{p}.down.w"),
                    kaiming_conv(rng, [b.cout, b.cin, 1, 1, 1]),
                );
                init_affine(store, &format!("{p}.down_bn"), b.cout);
            }
        }
    }

    fn affine(g: &mut Graph, b: &mut Binder, prefix: &str, x: Var) -> Var {
        let s = b.get(g, &format!("{prefix}.scale"));
        let t = b.get(g, &format!("{prefix}.shift"));
        let x = g.channel_norm(x, 1e-5);
        g.channel_affine(x, s, t)
    }

    pub(crate) fn forward(&self, g: &mut Graph, b: &mut Binder, prefix: &str, x: Var) -> Var {
        let s = &self.stem;
        let w = b.get(g, &format!("{prefix}.stem.w"));
        let mut h = if self.stem_bias {
            let bias = b.get(g, &format!("{prefix}.stem.b"));
            g.conv3d(x, w, Some(bias), ConvGeom::new(s.stride, s.pad))
        } else {
            let c = g.conv3d(x, w, None, ConvGeom::new(s.stride, s.pad));
            Self::affine(g, b, &format!("{prefix}.stem.bn"), c)
        };
        h = g.relu(h);
        if let Some((k, geom)) = self.stem_pool {
            h = g.max_pool3d(h, k, geom);
        }
        for (i, c) in self.plain.iter().enumerate() {
            let w = b.get(g, &format!("{prefix}.conv{i}.w"));
            let bias = b.get(g, &format!("{prefix}.conv{i}.b"));
            let y = g.conv3d(h, w, Some(bias), ConvGeom::new(c.stride, c.pad));
            h = g.relu(y);
        }
        for (i, blk) in self.blocks.iter().enumerate() {
            let p = format!("{prefix}.block{i}");
            let (_, geom) = block_geometry(self.block_axes, blk.stride);
            let (_, geom1) = block_geometry(self.block_axes, 1);
            let w1 = b.get(g, &format!("{p}.conv1.w"));
            let y = g.conv3d(h, w1, None, geom);
            let y = Self::affine(g, b, &format!("{p}.bn1"), y);
            let y = g.relu(y);
            let w2 = b.get(g, &format!("{p}.conv2.w"));
            let y = g.conv3d(y, w2, None, geom1);
            let y = Self::affine(g, b, &format!("{p}.bn2"), y);
            let shortcut = if blk.stride != 1 || blk.cin != blk.cout {
                let mut st = [1; 3];
                for a in 0..3 {
                    if self.block_axes[a] {
                        st[a] = blk.stride;
                    }
                }
                let wd = b.get(g, &format!("{p}.down.w"));
                let d = g.conv3d(h, wd, None, ConvGeom::new(st, [0; 3]));
                Self::affine(g, b, &format!("{p}.down_bn"), d)
            } else {
                h
            };
            let sum = g.add(y, shortcut);
            h = g.relu(sum);
        }
        h
    }
}

#[derive(Clone, Debug)]
pub struct VideoFrontend {
    trunk: Trunk,
    attn_dim: usize,
}

impl VideoFrontend {
    pub fn new(cfg: &ModelConfig) -> Self {
        Self {
            trunk: video_trunk(cfg.frontend),
            attn_dim: cfg.attn_dim,
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, prefix: &str, rng: &mut R) {
        self.trunk.init(store, &format!("{prefix}.trunk"), rng);
        init_linear(
            store,
            rng,
            &format!("{prefix}.proj"),
            self.trunk.out_channels,
            self.attn_dim,
        );
    }

    /// `[T, H, W]` frames (88 or 96 square) to `[T, attn_dim]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        prefix: &str,
        clip: &VideoClip,
    ) -> Result<Var> {
        let ok = |s: usize| s == CROP_SIZE || s == FRAME_SIZE;
        if !ok(clip.height) || !ok(clip.width) || clip.frames == 0 {
            return Err(Error::WrongInputSize {
                expected: format!(
                    "T>=1 frames of {CROP_SIZE}x{CROP_SIZE} or {FRAME_SIZE}x{FRAME_SIZE}"
                ),
                got: format!("{} frames of {}x{}", clip.frames, clip.height, clip.width),
            });
        }
        let x = g.constant(Tensor::new(
            &[1, clip.frames, clip.height, clip.width],
            clip.data.iter().map(|&v| v as f64).collect(),
        ));
        let h = self.trunk.forward(g, b, &format!("{prefix}.trunk"), x);
        let pooled = g.spatial_mean(h);
        Ok(linear(g, b, &format!("{prefix}.proj"), pooled))
    }
}

#[derive(Clone, Debug)]
pub struct AudioFrontend {
    trunk: Trunk,
    pool: usize,
    attn_dim: usize,
}

impl AudioFrontend {
    pub fn new(cfg: &ModelConfig) -> Self {
        let (trunk, pool) = audio_trunk(cfg.frontend);
        Self {
            trunk,
            pool,
            attn_dim: cfg.attn_dim,
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, prefix: &str, rng: &mut R) {
        self.trunk.init(store, &format!("{prefix}.trunk"), rng);
        init_linear(
            store,
            rng,
            &format!("{prefix}.proj"),
            self.trunk.out_channels,
            self.attn_dim,
        );
    }

    /// Waveform of `640 * T` samples to `[T, attn_dim]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        prefix: &str,
        wave: &[f32],
    ) -> Result<Var> {
        if wave.is_empty() || wave.len() % SAMPLES_PER_FRAME != 0 {
            return Err(Error::BadLength(wave.len()));
        }
        let x = g.constant(Tensor::new(
            &[1, 1, 1, wave.len()],
            wave.iter().map(|&v| v as f64).collect(),
        ));
        let h = self.trunk.forward(g, b, &format!("{prefix}.trunk"), x);
        let pooled = g.temporal_pool(h, self.pool);
        debug_assert_eq!(g.value(pooled).dim(0), wave.len() / SAMPLES_PER_FRAME);
        Ok(linear(g, b, &format!("{prefix}.proj"), pooled))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_stores() -> (ParamStore, VideoFrontend, AudioFrontend) {
        let cfg = ModelConfig::tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let v = VideoFrontend::new(&cfg);
        let a = AudioFrontend::new(&cfg);
        v.init(&mut store, "v", &mut rng);
        a.init(&mut store, "a", &mut rng);
        (store, v, a)
    }

    #[test]
    fn audio_lengths() {
        let (store, _, a) = tiny_stores();
        for (n, t) in [(16_000, 25), (640, 1)] {
            let mut g = Graph::new();
            let mut b = Binder::frozen(&store);
            let out = a.forward(&mut g, &mut b, "a", &vec![0.1; n]).unwrap();
            assert_eq!(g.value(out).shape(), &[t, 32]);
        }
        let mut g = Graph::new();
        let mut b = Binder::frozen(&store);
        assert!(matches!(
            a.forward(&mut g, &mut b, "a", &[0.0; 641]),
            Err(Error::BadLength(641))
        ));
    }

    #[test]
    fn video_lengths_and_sizes() {
        let (store, v, _) = tiny_stores();
        for s in [88, 96] {
            let clip = VideoClip::new(25, s, s, vec![0.3; 25 * s * s]);
            let mut g = Graph::new();
            let mut b = Binder::frozen(&store);
            let out = v.forward(&mut g, &mut b, "v", &clip).unwrap();
            assert_eq!(g.value(out).shape(), &[25, 32]);
        }
        let clip = VideoClip::new(2, 64, 64, vec![0.0; 2 * 64 * 64]);
        let mut g = Graph::new();
        let mut b = Binder::frozen(&store);
        assert!(matches!(
            v.forward(&mut g, &mut b, "v", &clip),
            Err(Error::WrongInputSize { .. })
        ));
    }

    #[test]
    fn zero_video_gives_time_constant_features() {
        let (store, v, _) = tiny_stores();
        let clip = VideoClip::new(6, 88, 88, vec![0.0; 6 * 88 * 88]);
        let mut g = Graph::new();
        let mut b = Binder::frozen(&store);
        let out = v.forward(&mut g, &mut b, "v", &clip).unwrap();
        let o = g.value(out);
        for t in 1..6 {
            assert_eq!(o.row(t), o.row(0));
        }
    }

    #[test]
    fn repeated_inputs_give_identical_outputs() {
        let (store, v, _) = tiny_stores();
        let data: Vec<f32> = (0..3 * 88 * 88)
            .map(|i| ((i * 37) % 101) as f32 / 101.0)
            .collect();
        let clip = VideoClip::new(3, 88, 88, data);
        let run = || {
            let mut g = Graph::new();
            let mut b = Binder::frozen(&store);
            let out = v.forward(&mut g, &mut b, "v", &clip).unwrap();
            g.value(out).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn resnet18_audio_trunk_keeps_frame_rate() {
        let mut cfg = ModelConfig::tiny();
        cfg.frontend = FrontendScale::Resnet18;
        let a = AudioFrontend::new(&cfg);
        let mut store = ParamStore::new();
        a.init(&mut store, "a", &mut ChaCha8Rng::seed_from_u64(1));
        let mut g = Graph::new();
        let mut b = Binder::frozen(&store);
        let out = a
            .forward(&mut g, &mut b, "a", &vec![0.01; 2 * 640])
            .unwrap();
        assert_eq!(g.value(out).shape(), &[2, 32]);
    }
}
