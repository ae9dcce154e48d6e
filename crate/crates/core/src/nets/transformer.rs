//! Pre-norm Transformer encoder, masked-position predictor and causal
//! attention decoder.

use rand::{Rng, RngCore};

use crate::autograd::{ColSlice, Graph, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::params::{init_layer_norm, init_linear, layer_norm, linear, normal, Binder, ParamStore};

/// Sinusoidal absolute position table `[len, dim]`.
pub fn positional_encoding(len: usize, dim: usize) -> Tensor {
    let mut out = vec![0.0; len * dim];
    for t in 0..len {
        for i in 0..dim {
            let freq = 1.0 / 10_000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let angle = t as f64 * freq;
            out[t * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(&[len, dim], out)
}

/// Multiplier applied to one sample's residual branch: `0` with probability
/// `rate`, otherwise `1 / (1 - rate)`. Always `1` outside training.
pub fn drop_path_factor(rate: f64, rng: Option<&mut (dyn RngCore + 'static)>) -> f64 {
    assert!(
        (0.0..1.0).contains(&rate),
        "drop path rate must be in [0, 1)"
    );
    match rng {
        Some(rng) if rate > 0.0 => {
            if rng.random_bool(rate) {
                0.0
            } else {
                1.0 / (1.0 - rate)
            }
        }
        _ => 1.0,
    }
}

/// Stochastic depth on a whole residual-branch value.
pub fn drop_path(
    x: &Tensor,
    rate: f64,
    training: bool,
    rng: &mut (dyn RngCore + 'static),
) -> Tensor {
    let f = drop_path_factor(rate, training.then_some(rng));
    if f == 1.0 {
        x.clone()
    } else {
        x.map(|v| v * f)
    }
}

/// Width, head count and MLP width of a stack of blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockDims {
    pub dim: usize,
    pub heads: usize,
    pub mlp: usize,
}

fn init_block<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, p: &str, d: BlockDims) {
    init_layer_norm(store, &format!("{p}.ln1"), d.dim);
    init_linear(store, rng, &format!("{p}.qkv"), d.dim, 3 * d.dim);
    init_linear(store, rng, &format!("{p}.out"), d.dim, d.dim);
    init_layer_norm(store, &format!("{p}.ln2"), d.dim);
    init_linear(store, rng, &format!("{p}.fc1"), d.dim, d.mlp);
    init_linear(store, rng, &format!("{p}.fc2"), d.mlp, d.dim);
}

fn residual(g: &mut Graph, x: Var, branch: Var, factor: f64) -> Var {
    if factor == 1.0 {
        g.add(x, branch)
    } else {
        let scaled = g.scale(branch, factor);
        g.add(x, scaled)
    }
}

fn mlp(g: &mut Graph, b: &mut Binder, p: &str, x: Var) -> Var {
    let h = layer_norm(g, b, &format!("{p}.ln2"), x);
    let h = linear(g, b, &format!("{p}.fc1"), h);
    let h = g.gelu(h);
    linear(g, b, &format!("{p}.fc2"), h)
}

/// One pre-norm self-attention block.
fn block(
    g: &mut Graph,
    b: &mut Binder,
    p: &str,
    x: Var,
    d: BlockDims,
    drop_rate: f64,
    mut rng: Option<&mut (dyn RngCore + 'static)>,
) -> Var {
    let h = layer_norm(g, b, &format!("{p}.ln1"), x);
    let qkv = linear(g, b, &format!("{p}.qkv"), h);
    let att = g.attention(
        ColSlice {
            var: qkv,
            offset: 0,
        },
        ColSlice {
            var: qkv,
            offset: d.dim,
        },
        ColSlice {
            var: qkv,
            offset: 2 * d.dim,
        },
        d.dim,
        d.heads,
        false,
    );
    let att = linear(g, b, &format!("{p}.out"), att);
    let f1 = drop_path_factor(drop_rate, rng.as_deref_mut());
    let x = residual(g, x, att, f1);
    let m = mlp(g, b, p, x);
    let f2 = drop_path_factor(drop_rate, rng.as_deref_mut());
    residual(g, x, m, f2)
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub num_blocks: usize,
    pub dims: BlockDims,
    pub drop_path_rate: f64,
}

pub struct EncoderOutput {
    /// After the final layer norm.
    pub output: Var,
    /// Residual stream after each block, before the final layer norm.
    /// Empty unless capture was requested.
    pub per_block: Vec<Var>,
}

impl Encoder {
    pub fn new(cfg: &ModelConfig) -> Self {
        Self {
            num_blocks: cfg.num_blocks,
            dims: BlockDims {
                dim: cfg.attn_dim,
                heads: cfg.num_heads,
                mlp: cfg.mlp_dim,
            },
            drop_path_rate: cfg.drop_path_rate,
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, prefix: &str, rng: &mut R) {
        for i in 0..self.num_blocks {
            init_block(store, rng, &format!("{prefix}.block{i}"), self.dims);
        }
        init_layer_norm(store, &format!("{prefix}.norm"), self.dims.dim);
    }

    /// `rng` enables drop path (training mode).
    pub fn forward(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        prefix: &str,
        features: Var,
        capture: bool,
        mut rng: Option<&mut (dyn RngCore + 'static)>,
    ) -> EncoderOutput {
        let t = g.value(features).dim(0);
        // Features are scaled up so the position table does not swamp them.
        let scaled = g.scale(features, (self.dims.dim as f64).sqrt());
        let mut x = g.add_const(scaled, &positional_encoding(t, self.dims.dim));
        let mut per_block = Vec::new();
        for i in 0..self.num_blocks {
            x = block(
                g,
                b,
                &format!("{prefix}.block{i}"),
                x,
                self.dims,
                self.drop_path_rate,
                rng.as_deref_mut(),
            );
            if capture {
                per_block.push(x);
            }
        }
        let output = layer_norm(g, b, &format!("{prefix}.norm"), x);
        EncoderOutput { output, per_block }
    }
}

/// Shallow Transformer that sees encoder outputs with masked positions
/// replaced by a learned token, and regresses targets at `attn_dim`.
#[derive(Clone, Debug)]
pub struct Predictor {
    pub num_blocks: usize,
    pub io_dim: usize,
    pub dims: BlockDims,
}

impl Predictor {
    pub fn new(cfg: &ModelConfig, num_blocks: usize) -> Self {
        Self {
            num_blocks,
            io_dim: cfg.attn_dim,
            dims: BlockDims {
                dim: cfg.predictor_dim,
                heads: cfg.predictor_heads,
                mlp: cfg.predictor_mlp_dim,
            },
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, prefix: &str, rng: &mut R) {
        store.insert(
            format!("{prefix}.mask_token"),
            normal(rng, &[self.io_dim], 0.02),
        );
        init_linear(
            store,
            rng,
            &format!("{prefix}.in_proj"),
            self.io_dim,
            self.dims.dim,
        );
        for i in 0..self.num_blocks {
            init_block(store, rng, &format!("{prefix}.block{i}"), self.dims);
        }
        init_layer_norm(store, &format!("{prefix}.norm"), self.dims.dim);
        init_linear(
            store,
            rng,
            &format!("{prefix}.out_proj"),
            self.dims.dim,
            self.io_dim,
        );
    }

    /// Predictor input: `enc_out` rows, with masked rows replaced by the
    /// mask token plus the positional encoding.
    pub fn input(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        prefix: &str,
        enc_out: Var,
        mask: &[bool],
    ) -> Result<Var> {
        let t = g.value(enc_out).dim(0);
        if mask.len() != t {
            return Err(Error::LengthMismatch(format!(
                "mask has {} positions, encoder output has {t}",
                mask.len()
            )));
        }
        let token = b.get(g, &format!("{prefix}.mask_token"));
        Ok(g.masked_fill_rows(enc_out, token, mask, &positional_encoding(t, self.io_dim)))
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        prefix: &str,
        enc_out: Var,
        mask: &[bool],
    ) -> Result<Var> {
        let x = self.input(g, b, prefix, enc_out, mask)?;
        let mut h = linear(g, b, &format!("{prefix}.in_proj"), x);
        for i in 0..self.num_blocks {
            h = block(g, b, &format!("{prefix}.block{i}"), h, self.dims, 0.0, None);
        }
        let h = layer_norm(g, b, &format!("{prefix}.norm"), h);
        Ok(linear(g, b, &format!("{prefix}.out_proj"), h))
    }
}

/// Autoregressive decoder: causal self-attention over tokens and
/// cross-attention over encoder outputs.
#[derive(Clone, Debug)]
pub struct AttentionDecoder {
    pub num_blocks: usize,
    pub dims: BlockDims,
    pub memory_dim: usize,
    pub vocab: usize,
}

impl AttentionDecoder {
    pub fn new(num_blocks: usize, dims: BlockDims, memory_dim: usize, vocab: usize) -> Self {
        Self {
            num_blocks,
            dims,
            memory_dim,
            vocab,
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, prefix: &str, rng: &mut R) {
        let d = self.dims.dim;
        store.insert(
            format!("{prefix}.embed"),
            normal(rng, &[self.vocab, d], 1.0),
        );
        for i in 0..self.num_blocks {
            let p = format!("{prefix}.block{i}");
            init_layer_norm(store, &format!("{p}.ln1"), d);
            init_linear(store, rng, &format!("{p}.qkv"), d, 3 * d);
            init_linear(store, rng, &format!("{p}.out"), d, d);
            init_layer_norm(store, &format!("{p}.ln_x"), d);
            init_linear(store, rng, &format!("{p}.x_q"), d, d);
            init_linear(store, rng, &format!("{p}.x_kv"), self.memory_dim, 2 * d);
            init_linear(store, rng, &format!("{p}.x_out"), d, d);
            init_layer_norm(store, &format!("{p}.ln2"), d);
            init_linear(store, rng, &format!("{p}.fc1"), d, self.dims.mlp);
            init_linear(store, rng, &format!("{p}.fc2"), self.dims.mlp, d);
        }
        init_layer_norm(store, &format!("{prefix}.norm"), d);
        init_linear(store, rng, &format!("{prefix}.head"), d, self.vocab);
    }

    /// Logits `[L, vocab]` for input tokens `[L]`; row `t` depends only on
    /// tokens `0..=t` and the memory.
    pub fn forward(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        prefix: &str,
        tokens: &[usize],
        memory: Var,
    ) -> Var {
        let d = self.dims.dim;
        let table = b.get(g, &format!("{prefix}.embed"));
        let e = g.embedding(table, tokens);
        let mut x = g.add_const(e, &positional_encoding(tokens.len(), d));
        for i in 0..self.num_blocks {
            let p = format!("{prefix}.block{i}");
            let h = layer_norm(g, b, &format!("{p}.ln1"), x);
            let qkv = linear(g, b, &format!("{p}.qkv"), h);
            let att = g.attention(
                ColSlice {
                    var: qkv,
                    offset: 0,
                },
                ColSlice {
                    var: qkv,
                    offset: d,
                },
                ColSlice {
                    var: qkv,
                    offset: 2 * d,
                },
                d,
                self.dims.heads,
                true,
            );
            let att = linear(g, b, &format!("{p}.out"), att);
            x = g.add(x, att);
            let h = layer_norm(g, b, &format!("{p}.ln_x"), x);
            let q = linear(g, b, &format!("{p}.x_q"), h);
            let kv = linear(g, b, &format!("{p}.x_kv"), memory);
            let cross = g.attention(
                q,
                ColSlice { var: kv, offset: 0 },
                ColSlice { var: kv, offset: d },
                d,
                self.dims.heads,
                false,
            );
            let cross = linear(g, b, &format!("{p}.x_out"), cross);
            x = g.add(x, cross);
            let m = mlp(g, b, &p, x);
            x = g.add(x, m);
        }
        let h = layer_norm(g, b, &format!("{prefix}.norm"), x);
        linear(g, b, &format!("{prefix}.head"), h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_encoder() -> (ParamStore, Encoder) {
        let enc = Encoder::new(&ModelConfig::tiny());
        let mut store = ParamStore::new();
        enc.init(&mut store, "enc", &mut ChaCha8Rng::seed_from_u64(3));
        (store, enc)
    }

    fn features(t: usize, d: usize, seed: u64) -> Tensor {
        normal(&mut ChaCha8Rng::seed_from_u64(seed), &[t, d], 1.0)
    }

    #[test]
    fn capture_contract() {
        let (store, enc) = tiny_encoder();
        let x = features(7, 32, 1);
        let mut g = Graph::new();
        let mut b = Binder::frozen(&store);
        let f = g.constant(x.clone());
        let with = enc.forward(&mut g, &mut b, "enc", f, true, None);
        assert_eq!(with.per_block.len(), 2);
        for &v in &with.per_block {
            assert_eq!(g.value(v).shape(), &[7, 32]);
        }
        let without = enc.forward(&mut g, &mut b, "enc", f, false, None);
        assert!(without.per_block.is_empty());
        assert_eq!(g.value(with.output), g.value(without.output));
        // final output is the layer-normalized last captured block
        let gamma = b.get(&mut g, "enc.norm.gamma");
        let beta = b.get(&mut g, "enc.norm.beta");
        let ln = g.layer_norm(with.per_block[1], gamma, beta, 1e-5);
        assert_eq!(g.value(ln), g.value(with.output));
    }

    #[test]
    fn zeroed_branches_are_identity_blocks() {
        let (mut store, enc) = tiny_encoder();
        for i in 0..2 {
            for l in ["out", "fc2"] {
                store
                    .get_mut(&format!("enc.block{i}.{l}.w"))
                    .unwrap()
                    .data_mut()
                    .fill(0.0);
            }
        }
        let x = features(5, 32, 2);
        let mut g = Graph::new();
        let mut b = Binder::frozen(&store);
        let f = g.constant(x.clone());
        let out = enc.forward(&mut g, &mut b, "enc", f, true, None);
        let expected = {
            let mut e = x.map(|v| v * 32f64.sqrt());
            e.add_assign(&positional_encoding(5, 32));
            e
        };
        for &v in &out.per_block {
            assert!(g.value(v).max_abs_diff(&expected) < 1e-12);
        }
    }

    #[test]
    fn drop_path_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::new(&[3], vec![1.0, -2.0, 0.5]);
        assert_eq!(drop_path(&x, 0.0, true, &mut rng), x);
        assert_eq!(drop_path(&x, 0.5, false, &mut rng), x);
        let n = 10_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let y = drop_path(&x, 0.5, true, &mut rng);
            assert!(y.data()[0] == 0.0 || y.data()[0] == 2.0);
            sum += y.data().iter().sum::<f64>();
        }
        let mean = sum / n as f64;
        let target = x.data().iter().sum::<f64>();
        assert!(
            (mean - target).abs() < 0.05 * target.abs(),
            "{mean} vs {target}"
        );
    }

    fn tiny_predictor() -> (ParamStore, Predictor) {
        let p = Predictor::new(&ModelConfig::tiny(), 2);
        let mut store = ParamStore::new();
        p.init(&mut store, "pred", &mut ChaCha8Rng::seed_from_u64(4));
        (store, p)
    }

    #[test]
    fn predictor_substitution() {
        let (store, p) = tiny_predictor();
        let x = features(6, 32, 5);
        let mut g = Graph::new();
        let mut b = Binder::frozen(&store);
        let e = g.constant(x.clone());
        let none = p.input(&mut g, &mut b, "pred", e, &[false; 6]).unwrap();
        assert_eq!(g.value(none), &x);
        let all = p.input(&mut g, &mut b, "pred", e, &[true; 6]).unwrap();
        let pe = positional_encoding(6, 32);
        let tok = store.get("pred.mask_token").unwrap();
        for t in 0..6 {
            for j in 0..32 {
                assert_eq!(g.value(all).row(t)[j], tok.data()[j] + pe.row(t)[j]);
            }
        }
        let out = p.forward(&mut g, &mut b, "pred", e, &[false; 6]).unwrap();
        assert_eq!(g.value(out).shape(), &[6, 32]);
        assert!(matches!(
            p.forward(&mut g, &mut b, "pred", e, &[false; 5]),
            Err(Error::LengthMismatch(_))
        ));
    }

    #[test]
    fn masked_positions_are_overwritten() {
        let (store, p) = tiny_predictor();
        let x = features(6, 32, 6);
        let mut y = x.clone();
        y.data_mut()[3 * 32 + 4] += 1.0;
        let mask = [false, false, false, true, false, false];
        let run = |t: &Tensor| {
            let mut g = Graph::new();
            let mut b = Binder::frozen(&store);
            let e = g.constant(t.clone());
            let out = p.forward(&mut g, &mut b, "pred", e, &mask).unwrap();
            g.value(out).clone()
        };
        assert_eq!(run(&x), run(&y));
    }

    #[test]
    fn decoder_is_causal() {
        let dims = BlockDims {
            dim: 16,
            heads: 2,
            mlp: 32,
        };
        let dec = AttentionDecoder::new(2, dims, 32, 9);
        let mut store = ParamStore::new();
        dec.init(&mut store, "dec", &mut ChaCha8Rng::seed_from_u64(8));
        let mem = features(5, 32, 9);
        let run = |tokens: &[usize]| {
            let mut g = Graph::new();
            let mut b = Binder::frozen(&store);
            let m = g.constant(mem.clone());
            let out = dec.forward(&mut g, &mut b, "dec", tokens, m);
            g.value(out).clone()
        };
        let base = run(&[2, 4, 5, 6]);
        assert_eq!(base.shape(), &[4, 9]);
        for t in 0..4 {
            let mut toks = vec![2, 4, 5, 6];
            toks[t] = 7;
            let changed = run(&toks);
            for r in 0..t {
                assert_eq!(
                    changed.row(r),
                    base.row(r),
                    "row {r} changed after perturbing token {t}"
                );
            }
        }
    }
}
