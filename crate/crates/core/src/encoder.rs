//! Patch encoder and hash head.
//!
//! Patches are linearly projected, a learnable position table is added (no
//! class token), and a stack of pre-norm transformer blocks produces one
//! feature per patch. The hash head mean-pools patch features, projects to
//! `code_length` dimensions and binarizes with a straight-through sign.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{ReduceKind, Tape, Var};
use crate::error::{Result, WchError};
use crate::params::ParamStore;
use crate::rng::rng_for;
use crate::tensor::{Real, Tensor};

const INIT_STD: f64 = 0.02;
const LN_EPS: Real = 1e-5;
const FF_MULT: usize = 4;
const CHUNK: usize = 128;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub n_patches: usize,
    pub patch_dim: usize,
    pub model_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub code_length: usize,
    pub seed: u64,
    /// Keep the position table fixed at its initial values.
    #[serde(default)]
    pub freeze_position: bool,
    /// Standardize each pre-code over the batch during training and with
    /// calibrated statistics at inference.
    #[serde(default = "default_true")]
    pub hash_norm: bool,
}

fn default_true() -> bool {
    true
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            n_patches: 16,
            patch_dim: 192,
            model_dim: 64,
            n_layers: 2,
            n_heads: 4,
            code_length: 16,
            seed: 0,
            freeze_position: false,
            hash_norm: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_patches", self.n_patches),
            ("patch_dim", self.patch_dim),
            ("model_dim", self.model_dim),
            ("n_heads", self.n_heads),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(WchError::Config(format!("{name} must be positive")));
            }
        }
        if self.model_dim % self.n_heads != 0 {
            return Err(WchError::Config(format!(
                "model_dim {} is not divisible by n_heads {}",
                self.model_dim, self.n_heads
            )));
        }
        if self.code_length < 4 {
            return Err(WchError::Config(format!(
                "code_length must be >= 4, got {}",
                self.code_length
            )));
        }
        Ok(())
    }
}

/// How pre-codes become codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binarizer {
    /// Sign forward, straight-through backward (clipped to |x| <= 1 when set).
    Ste { clip: bool },
    /// Pass pre-codes through unchanged; used to finite-difference the loss.
    Identity,
}

impl Default for Binarizer {
    fn default() -> Self {
        Binarizer::Ste { clip: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct BlockLayout {
    ln1_gain: usize,
    ln1_bias: usize,
    q_weight: usize,
    q_bias: usize,
    k_weight: usize,
    k_bias: usize,
    v_weight: usize,
    v_bias: usize,
    out_weight: usize,
    out_bias: usize,
    ln2_gain: usize,
    ln2_bias: usize,
    ff1_weight: usize,
    ff1_bias: usize,
    ff2_weight: usize,
    ff2_bias: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    proj_weight: usize,
    proj_bias: usize,
    position: usize,
    blocks: Vec<BlockLayout>,
    hash_weight: usize,
    hash_bias: usize,
    norm_mean: Option<usize>,
    norm_var: Option<usize>,
}

/// Encoder configuration together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    config: EncoderConfig,
    params: ParamStore,
    layout: Layout,
}

struct Init<'a> {
    params: &'a mut ParamStore,
    seed: u64,
}

impl Init<'_> {
    fn normal(&mut self, name: String, shape: &[usize]) -> usize {
        let idx = self.params.len() as u64;
        let mut rng = rng_for(self.seed, &[0x1417, idx]);
        let t = truncated_normal(&mut rng, shape, INIT_STD);
        self.params.push(name, t)
    }

    fn zeros(&mut self, name: String, shape: &[usize]) -> usize {
        self.params.push(name, Tensor::zeros(shape))
    }

    fn ones(&mut self, name: String, shape: &[usize]) -> usize {
        self.params.push(name, Tensor::full(shape, 1.0))
    }
}

/// Normal(0, std) resampled until within two standard deviations.
fn truncated_normal(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    let numel = shape.iter().product();
    let data = (0..numel)
        .map(|_| loop {
            let v: f64 = dist.sample(rng);
            if v.abs() <= 2.0 * std {
                break v as Real;
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape")
}

impl Encoder {
    /// Freshly initialised encoder.
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let (d, dm, n, l) = (config.patch_dim, config.model_dim, config.n_patches, config.code_length);
        let mut params = ParamStore::new();
        let mut init = Init {
            params: &mut params,
            seed: config.seed,
        };
        let proj_weight = init.normal("embed.proj.weight".into(), &[d, dm]);
        let proj_bias = init.zeros("embed.proj.bias".into(), &[dm]);
        let position = init.normal("embed.position".into(), &[n, dm]);
        let mut blocks = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            let p = |s: &str| format!("blocks.{i}.{s}");
            blocks.push(BlockLayout {
                ln1_gain: init.ones(p("ln1.gain"), &[dm]),
                ln1_bias: init.zeros(p("ln1.bias"), &[dm]),
                q_weight: init.normal(p("attn.q.weight"), &[dm, dm]),
                q_bias: init.zeros(p("attn.q.bias"), &[dm]),
                k_weight: init.normal(p("attn.k.weight"), &[dm, dm]),
                k_bias: init.zeros(p("attn.k.bias"), &[dm]),
                v_weight: init.normal(p("attn.v.weight"), &[dm, dm]),
                v_bias: init.zeros(p("attn.v.bias"), &[dm]),
                out_weight: init.normal(p("attn.out.weight"), &[dm, dm]),
                out_bias: init.zeros(p("attn.out.bias"), &[dm]),
                ln2_gain: init.ones(p("ln2.gain"), &[dm]),
                ln2_bias: init.zeros(p("ln2.bias"), &[dm]),
                ff1_weight: init.normal(p("ff.fc1.weight"), &[dm, FF_MULT * dm]),
                ff1_bias: init.zeros(p("ff.fc1.bias"), &[FF_MULT * dm]),
                ff2_weight: init.normal(p("ff.fc2.weight"), &[FF_MULT * dm, dm]),
                ff2_bias: init.zeros(p("ff.fc2.bias"), &[dm]),
            });
        }
        let hash_weight = init.normal("hash.weight".into(), &[dm, l]);
        let hash_bias = init.zeros("hash.bias".into(), &[l]);
        let (norm_mean, norm_var) = if config.hash_norm {
            (
                Some(init.zeros("hash.norm.mean".into(), &[l])),
                Some(init.ones("hash.norm.var".into(), &[l])),
            )
        } else {
            (None, None)
        };
        let layout = Layout {
            proj_weight,
            proj_bias,
            position,
            blocks,
            hash_weight,
            hash_bias,
            norm_mean,
            norm_var,
        };
        Ok(Encoder { config, params, layout })
    }

    /// Encoder with parameters taken from `params` (matched by name).
    pub fn with_params(config: EncoderConfig, params: &ParamStore) -> Result<Self> {
        let mut enc = Encoder::new(config)?;
        enc.params.load_from(params)?;
        if enc.params.tensors().iter().any(|t| !t.all_finite()) {
            return Err(WchError::Numeric("loaded parameters contain non-finite values".into()));
        }
        Ok(enc)
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Whether parameter `index` is updated by gradient steps.
    pub fn is_trainable(&self, index: usize) -> bool {
        let l = &self.layout;
        let frozen = self.config.freeze_position && index == l.position;
        let buffer = Some(index) == l.norm_mean || Some(index) == l.norm_var;
        !(frozen || buffer)
    }

    /// Set the inference statistics of the pre-code normalization to the
    /// per-bit mean and variance of the projections of `patches`.
    pub fn calibrate(&mut self, patches: &Tensor) -> Result<()> {
        let (Some(rm), Some(rv)) = (self.layout.norm_mean, self.layout.norm_var) else {
            return Ok(());
        };
        let l = self.config.code_length;
        let mut sum = vec![0.0; l];
        let mut sq = vec![0.0; l];
        let mut rows = 0usize;
        self.for_chunks(patches, |bound, x| {
            let proj = bound.project(bound.encode(x)?)?.value();
            for r in proj.data().chunks(l) {
                for k in 0..l {
                    sum[k] += r[k];
                    sq[k] += r[k] * r[k];
                }
            }
            rows += proj.shape()[0];
            Ok(())
        })?;
        if rows == 0 {
            return Err(WchError::Config("cannot calibrate on an empty set".into()));
        }
        let n = rows as Real;
        let mean: Vec<Real> = sum.iter().map(|s| s / n).collect();
        let var: Vec<Real> = sq.iter().zip(&mean).map(|(q, m)| (q / n - m * m).max(0.0)).collect();
        self.params.tensors_mut()[rm] = Tensor::new(&[l], mean)?;
        self.params.tensors_mut()[rv] = Tensor::new(&[l], var)?;
        Ok(())
    }

    fn for_chunks(
        &self,
        patches: &Tensor,
        mut f: impl FnMut(&BoundEncoder<'_, '_>, Var<'_>) -> Result<()>,
    ) -> Result<()> {
        let sh = patches.shape();
        if sh.len() != 3 {
            return Err(WchError::dim(
                "encoder input",
                sh,
                &[0, self.config.n_patches, self.config.patch_dim],
            ));
        }
        let per = sh[1] * sh[2];
        for chunk in patches.data().chunks(CHUNK * per.max(1)) {
            let tape = Tape::new();
            let bound = self.bind(&tape, false);
            let x = tape.constant(Tensor::new(&[chunk.len() / per, sh[1], sh[2]], chunk.to_vec())?);
            f(&bound, x)?;
        }
        Ok(())
    }

    /// Place the parameters on `tape`. With `trainable`, gradients are tracked
    /// and the hash head normalizes with batch statistics; otherwise it uses
    /// the calibrated statistics.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundEncoder<'_, 't> {
        let vars = self
            .params
            .tensors()
            .iter()
            .enumerate()
            .map(|(i, t)| tape.leaf(t.clone(), trainable && self.is_trainable(i)))
            .collect();
        BoundEncoder {
            enc: self,
            vars,
            training: trainable,
        }
    }

    /// Use caller-provided variables as the parameters, in [`ParamStore`] order.
    pub fn bind_vars<'t>(&self, vars: Vec<Var<'t>>, training: bool) -> Result<BoundEncoder<'_, 't>> {
        if vars.len() != self.params.len() {
            return Err(WchError::dim("bind_vars", &[vars.len()], &[self.params.len()]));
        }
        for (v, t) in vars.iter().zip(self.params.tensors()) {
            if v.shape() != t.shape() {
                return Err(WchError::dim("bind_vars", &v.shape(), t.shape()));
            }
        }
        Ok(BoundEncoder {
            enc: self,
            vars,
            training,
        })
    }

    /// Inference path: patches `bs × n × d` to codes `bs × l` in {-1, +1}.
    pub fn codes(&self, patches: &Tensor) -> Result<Tensor> {
        let l = self.config.code_length;
        let mut out = Vec::with_capacity(patches.shape().first().copied().unwrap_or(0) * l);
        self.for_chunks(patches, |bound, x| {
            let h = bound.hash(bound.encode(x)?, Binarizer::default())?;
            out.extend_from_slice(h.codes.value().data());
            Ok(())
        })?;
        Tensor::new(&[out.len() / l, l], out)
    }
}

/// Output of the hash head.
#[derive(Debug, Clone)]
pub struct HashOutput<'t> {
    /// `bs × l`, values in {-1, +1} (pre-codes under [`Binarizer::Identity`]).
    pub codes: Var<'t>,
    /// `bs × l` real projections before binarization.
    pub pre_codes: Var<'t>,
}

/// Encoder parameters placed on a tape.
pub struct BoundEncoder<'e, 't> {
    enc: &'e Encoder,
    vars: Vec<Var<'t>>,
    training: bool,
}

impl<'t> BoundEncoder<'_, 't> {
    /// Parameter variables, in [`ParamStore`] order.
    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }

    fn linear(&self, x: Var<'t>, weight: usize, bias: usize) -> Result<Var<'t>> {
        let sh = x.shape();
        let din = *sh.last().unwrap_or(&0);
        let rows = x.value().numel() / din.max(1);
        let w = self.vars[weight];
        let y = x.reshape(&[rows, din])?.matmul(w)?.add_broadcast(self.vars[bias])?;
        let mut out_shape = sh;
        *out_shape.last_mut().unwrap() = w.shape()[1];
        y.reshape(&out_shape)
    }

    fn check_input(&self, patches: Var<'t>) -> Result<usize> {
        let c = &self.enc.config;
        let sh = patches.shape();
        if sh.len() != 3 || sh[1] != c.n_patches || sh[2] != c.patch_dim {
            return Err(WchError::dim(
                "encoder input",
                &sh,
                &[sh.first().copied().unwrap_or(0), c.n_patches, c.patch_dim],
            ));
        }
        Ok(sh[0])
    }

    /// Linear patch projection plus position table: `bs × n × d → bs × n × d_m`.
    pub fn embed(&self, patches: Var<'t>) -> Result<Var<'t>> {
        self.check_input(patches)?;
        let l = &self.enc.layout;
        self.linear(patches, l.proj_weight, l.proj_bias)?
            .add_broadcast(self.vars[l.position])
    }

    /// Embedding followed by every transformer block; one feature per patch.
    pub fn encode(&self, patches: Var<'t>) -> Result<Var<'t>> {
        let mut x = self.embed(patches)?;
        check_activation(x, 0)?;
        for (i, block) in self.enc.layout.blocks.iter().enumerate() {
            x = self.block(x, block)?;
            check_activation(x, i + 1)?;
        }
        Ok(x)
    }

    fn block(&self, x: Var<'t>, b: &BlockLayout) -> Result<Var<'t>> {
        let v = &self.vars;
        let h = x.layer_norm(v[b.ln1_gain], v[b.ln1_bias], LN_EPS)?;
        let x = x.add(self.attention(h, b)?)?;
        let h = x.layer_norm(v[b.ln2_gain], v[b.ln2_bias], LN_EPS)?;
        let h = self.linear(h, b.ff1_weight, b.ff1_bias)?.gelu()?;
        let h = self.linear(h, b.ff2_weight, b.ff2_bias)?;
        x.add(h)
    }

    fn attention(&self, h: Var<'t>, b: &BlockLayout) -> Result<Var<'t>> {
        let sh = h.shape();
        let (bs, n, dm) = (sh[0], sh[1], sh[2]);
        let heads = self.enc.config.n_heads;
        let dh = dm / heads;
        let split = |t: Var<'t>| -> Result<Var<'t>> {
            t.reshape(&[bs, n, heads, dh])?
                .permute(&[0, 2, 1, 3])?
                .reshape(&[bs * heads, n, dh])
        };
        let q = split(self.linear(h, b.q_weight, b.q_bias)?)?;
        let k = split(self.linear(h, b.k_weight, b.k_bias)?)?;
        let v = split(self.linear(h, b.v_weight, b.v_bias)?)?;
        let scores = q.matmul_t(k, false, true)?.scale(1.0 / (dh as Real).sqrt())?;
        let ctx = scores.softmax(1.0)?.matmul(v)?;
        let merged = ctx
            .reshape(&[bs, heads, n, dh])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[bs, n, dm])?;
        self.linear(merged, b.out_weight, b.out_bias)
    }

    /// Mean-pooled features projected to `l` dims, before normalization.
    pub fn project(&self, features: Var<'t>) -> Result<Var<'t>> {
        let sh = features.shape();
        if sh.len() != 3 || sh[2] != self.enc.config.model_dim {
            return Err(WchError::dim("hash", &sh, &[0, 0, self.enc.config.model_dim]));
        }
        let l = &self.enc.layout;
        let pooled = features.reduce(1, ReduceKind::Mean)?;
        self.linear(pooled, l.hash_weight, l.hash_bias)
    }

    /// Mean-pool patch features, project to `l` dims, standardize, binarize.
    pub fn hash(&self, features: Var<'t>, binarizer: Binarizer) -> Result<HashOutput<'t>> {
        let sh = features.shape();
        if sh.len() != 3 || sh[2] != self.enc.config.model_dim {
            return Err(WchError::dim("hash", &sh, &[0, 0, self.enc.config.model_dim]));
        }
        let l = &self.enc.layout;
        let projected = self.project(features)?;
        let pre_codes = match (l.norm_mean, l.norm_var) {
            (Some(_), Some(_)) if self.training => batch_standardize(projected)?,
            (Some(rm), Some(rv)) => {
                let p = self.enc.params.tensors();
                running_standardize(projected, &p[rm], &p[rv])?
            }
            _ => projected,
        };
        let codes = match binarizer {
            Binarizer::Ste { clip } => pre_codes.ste_sign(clip)?,
            Binarizer::Identity => pre_codes,
        };
        Ok(HashOutput { codes, pre_codes })
    }
}

/// Standardize every column over the batch axis.
fn batch_standardize(x: Var<'_>) -> Result<Var<'_>> {
    let rows = x.shape()[0];
    let tape = x.tape();
    let gain = tape.constant(Tensor::full(&[rows], 1.0));
    let bias = tape.constant(Tensor::zeros(&[rows]));
    x.transpose()?.layer_norm(gain, bias, LN_EPS)?.transpose()
}

/// `(x - mean) / sqrt(var + eps)` with fixed per-column statistics.
fn running_standardize<'t>(x: Var<'t>, mean: &Tensor, var: &Tensor) -> Result<Var<'t>> {
    let rows = x.shape()[0];
    let tape = x.tape();
    let inv: Vec<Real> = var.data().iter().map(|v| 1.0 / (v + LN_EPS).sqrt()).collect();
    let scale: Vec<Real> = (0..rows).flat_map(|_| inv.iter().copied()).collect();
    let centered = x.add_broadcast(tape.constant(mean.map(|m| -m)))?;
    centered.mul(tape.constant(Tensor::new(&x.shape(), scale)?))
}

fn check_activation(x: Var<'_>, layer: usize) -> Result<()> {
    if x.value().all_finite() {
        Ok(())
    } else {
        Err(WchError::Numeric(format!("non-finite activation after layer {layer}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(layers: usize) -> EncoderConfig {
        EncoderConfig {
            n_patches: 4,
            patch_dim: 6,
            model_dim: 8,
            n_layers: layers,
            n_heads: 2,
            code_length: 4,
            seed: 3,
            freeze_position: false,
            hash_norm: true,
        }
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(EncoderConfig::default().validate().is_ok());
        let bad_heads = EncoderConfig { n_heads: 3, ..small(1) };
        assert!(matches!(bad_heads.validate(), Err(WchError::Config(_))));
        let short = EncoderConfig {
            code_length: 3,
            ..small(1)
        };
        assert!(matches!(short.validate(), Err(WchError::Config(_))));
    }

    #[test]
    fn default_parameter_names_are_unique() {
        let enc = Encoder::new(EncoderConfig::default()).unwrap();
        let mut names = enc.params().names().to_vec();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), enc.params().len());
        assert_eq!(enc.params().get("embed.position").unwrap().shape(), &[16, 64]);
    }

    #[test]
    fn init_is_truncated_and_seeded() {
        let enc = Encoder::new(EncoderConfig::default()).unwrap();
        let w = enc.params().get("embed.proj.weight").unwrap();
        assert!(w.data().iter().all(|v| v.abs() <= 0.04));
        assert!(enc.params().get("hash.bias").unwrap().data().iter().all(|&v| v == 0.0));
        assert_eq!(enc, Encoder::new(EncoderConfig::default()).unwrap());
    }

    #[test]
    fn zero_parameters_embed_to_zero() {
        let mut enc = Encoder::new(small(0)).unwrap();
        for t in enc.params_mut().tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let tape = Tape::new();
        let b = enc.bind(&tape, false);
        let e = b.embed(tape.constant(random(&[2, 4, 6], 1))).unwrap();
        assert!(e.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_projection_reproduces_inputs() {
        let cfg = EncoderConfig {
            patch_dim: 8,
            ..small(0)
        };
        let mut enc = Encoder::new(cfg).unwrap();
        *enc.params_mut().get_mut("embed.proj.weight").unwrap() = Tensor::eye(8);
        *enc.params_mut().get_mut("embed.position").unwrap() = Tensor::zeros(&[4, 8]);
        let x = random(&[3, 4, 8], 2);
        let tape = Tape::new();
        let b = enc.bind(&tape, false);
        let e = b.embed(tape.constant(x.clone())).unwrap();
        assert_eq!(*e.value(), x);
    }

    #[test]
    fn zero_layers_encode_equals_embed() {
        let enc = Encoder::new(small(0)).unwrap();
        let tape = Tape::new();
        let b = enc.bind(&tape, false);
        let x = tape.constant(random(&[2, 4, 6], 4));
        assert_eq!(*b.encode(x).unwrap().value(), *b.embed(x).unwrap().value());
    }

    #[test]
    fn patch_order_matters_through_position_table() {
        let enc = Encoder::new(small(0)).unwrap();
        let x = random(&[1, 4, 6], 5);
        let rows = x.to_rows();
        let perm = [2usize, 0, 3, 1];
        let permuted: Vec<Real> = perm.iter().flat_map(|&i| rows[i].clone()).collect();
        let xp = Tensor::new(&[1, 4, 6], permuted).unwrap();
        let tape = Tape::new();
        let b = enc.bind(&tape, false);
        let e = b.embed(tape.constant(x)).unwrap().value();
        let ep = b.embed(tape.constant(xp)).unwrap().value();
        // output row k of the permuted input vs the original row perm[k]
        let er = e.data().chunks(8).collect::<Vec<_>>();
        let differs = ep.data().chunks(8).enumerate().any(|(k, row)| row != er[perm[k]]);
        assert!(differs);
    }

    #[test]
    fn encode_shape_and_determinism() {
        let enc = Encoder::new(small(2)).unwrap();
        let x = random(&[3, 4, 6], 6);
        let run = || {
            let tape = Tape::new();
            let b = enc.bind(&tape, false);
            let f = b.encode(tape.constant(x.clone())).unwrap();
            (f.shape(), f.value().data().to_vec())
        };
        let (shape, a) = run();
        assert_eq!(shape, vec![3, 4, 8]);
        assert_eq!(a, run().1);
    }

    #[test]
    fn encoder_rejects_wrong_patch_shape() {
        let enc = Encoder::new(small(1)).unwrap();
        let tape = Tape::new();
        let b = enc.bind(&tape, false);
        let x = tape.constant(Tensor::zeros(&[2, 5, 6]));
        assert!(matches!(b.encode(x), Err(WchError::Dimension { .. })));
    }

    #[test]
    fn hash_codes_are_signs_and_duplicates_match() {
        let enc = Encoder::new(small(1)).unwrap();
        let one = random(&[1, 4, 6], 7);
        let mut data = one.data().to_vec();
        data.extend_from_slice(one.data());
        data.extend(random(&[1, 4, 6], 8).into_data());
        let codes = enc.codes(&Tensor::new(&[3, 4, 6], data).unwrap()).unwrap();
        assert!(codes.data().iter().all(|&v| v == 1.0 || v == -1.0));
        let rows = codes.to_rows();
        assert_eq!(rows[0], rows[1]);
    }

    #[test]
    fn positive_pre_codes_give_all_ones() {
        let mut enc = Encoder::new(small(0)).unwrap();
        *enc.params_mut().get_mut("hash.bias").unwrap() = Tensor::full(&[4], 5.0);
        let tape = Tape::new();
        let b = enc.bind(&tape, false);
        let f = b.encode(tape.constant(random(&[2, 4, 6], 9))).unwrap();
        let h = b.hash(f, Binarizer::default()).unwrap();
        assert!(h.pre_codes.value().data().iter().all(|&v| v > 0.0));
        assert!(h.codes.value().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn frozen_position_gets_no_gradient() {
        let enc = Encoder::new(EncoderConfig {
            freeze_position: true,
            ..small(1)
        })
        .unwrap();
        let tape = Tape::new();
        let b = enc.bind(&tape, true);
        let f = b.encode(tape.constant(random(&[2, 4, 6], 10))).unwrap();
        let loss = b.hash(f, Binarizer::Identity).unwrap().pre_codes.sum_all().unwrap();
        let g = tape.backward(loss).unwrap();
        let pos = enc.params().index_of("embed.position").unwrap();
        assert!(g.get(b.vars()[pos]).is_none());
        assert!(g.get(b.vars()[0]).is_some());
    }
}
