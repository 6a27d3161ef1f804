//! The DIOR-ViT network: patch-embedding feature extractor, categorical
//! head, and bias-free differential head, plus parameter initialization
//! and the DIORCKPT checkpoint format.

use crate::autodiff::{Activation, Scalar, Tape, TensorId};
use crate::error::{Error, Result};
use crate::rng::substream;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

pub const CKPT_MAGIC: &[u8; 8] = b"DIORCKPT";
pub const CKPT_VERSION: u16 = 1;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    /// Square image side length in pixels.
    pub image_size: u16,
    pub channels: u8,
    pub patch_size: u16,
    /// Token embedding width D.
    pub token_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    /// Output widths of the three FF linear layers; the last must equal
    /// `token_dim` for the residual connection.
    pub ff_hidden: (usize, usize, usize),
    pub num_classes: u8,
    pub leaky_slope: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            image_size: 32,
            channels: 1,
            patch_size: 8,
            token_dim: 64,
            num_blocks: 4,
            num_heads: 4,
            ff_hidden: (128, 128, 64),
            num_classes: 4,
            leaky_slope: 0.01,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(Error::Config(msg));
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return err(format!(
                "patch size {} must divide image size {}",
                self.patch_size, self.image_size
            ));
        }
        if self.num_heads == 0 || self.token_dim % self.num_heads != 0 {
            return err(format!(
                "head count {} must divide token dim {}",
                self.num_heads, self.token_dim
            ));
        }
        if self.token_dim % 2 != 0 {
            return err("token dim must be even for the positional table".into());
        }
        if self.num_classes < 2 {
            return err("need at least 2 classes".into());
        }
        if self.num_blocks == 0 || self.channels == 0 {
            return err("blocks and channels must be positive".into());
        }
        if self.ff_hidden.2 != self.token_dim {
            return err(format!(
                "last FF width {} must equal token dim {}",
                self.ff_hidden.2, self.token_dim
            ));
        }
        if !(0.0 < self.leaky_slope && self.leaky_slope < 1.0) {
            return err(format!("leaky slope {} not in (0,1)", self.leaky_slope));
        }
        Ok(())
    }

    /// Patch token count E.
    pub fn num_tokens(&self) -> usize {
        let side = (self.image_size / self.patch_size) as usize;
        side * side
    }

    pub fn head_dim(&self) -> usize {
        self.token_dim / self.num_heads
    }

    pub fn patch_len(&self) -> usize {
        self.channels as usize * self.patch_size as usize * self.patch_size as usize
    }

    /// Widths of the two hidden categorical-head layers.
    pub fn cat_hidden(&self) -> (usize, usize) {
        (self.token_dim, (self.token_dim / 2).max(1))
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    /// uniform(-1/sqrt(fan_in), +1/sqrt(fan_in))
    Uniform { fan_in: usize },
    Zero,
    One,
}

/// One named tensor of the checkpoint layout.
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    init: Init,
}

/// Fixed parameter order: patch projection, class token, per-block
/// attention and FF tensors, final layer norm, categorical head,
/// differential head. This order is the checkpoint wire order.
pub fn layout(arch: &ArchConfig) -> Vec<ParamSpec> {
    let d = arch.token_dim;
    let dm = arch.head_dim();
    let plen = arch.patch_len();
    let (h1, h2, h3) = arch.ff_hidden;
    let (c1, c2) = arch.cat_hidden();
    let mut specs = Vec::new();
    fn push(specs: &mut Vec<ParamSpec>, name: String, shape: Vec<usize>, init: Init) {
        specs.push(ParamSpec { name, shape, init });
    }
    fn lin(specs: &mut Vec<ParamSpec>, name: &str, fan_in: usize, fan_out: usize) {
        specs.push(ParamSpec {
            name: format!("{name}.w"),
            shape: vec![fan_in, fan_out],
            init: Init::Uniform { fan_in },
        });
        specs.push(ParamSpec {
            name: format!("{name}.b"),
            shape: vec![fan_out],
            init: Init::Uniform { fan_in },
        });
    }
    lin(&mut specs, "patch_proj", plen, d);
    push(&mut specs, "cls_token".into(), vec![d], Init::Zero);
    for l in 0..arch.num_blocks {
        push(&mut specs, format!("block{l}.ln1.gamma"), vec![d], Init::One);
        push(&mut specs, format!("block{l}.ln1.beta"), vec![d], Init::Zero);
        for m in 0..arch.num_heads {
            lin(&mut specs, &format!("block{l}.head{m}.q"), d, dm);
            lin(&mut specs, &format!("block{l}.head{m}.k"), d, dm);
            lin(&mut specs, &format!("block{l}.head{m}.v"), d, dm);
        }
        lin(&mut specs, &format!("block{l}.attn_out"), d, d);
        push(&mut specs, format!("block{l}.ln2.gamma"), vec![d], Init::One);
        push(&mut specs, format!("block{l}.ln2.beta"), vec![d], Init::Zero);
        lin(&mut specs, &format!("block{l}.ff1"), d, h1);
        lin(&mut specs, &format!("block{l}.ff2"), h1, h2);
        lin(&mut specs, &format!("block{l}.ff3"), h2, h3);
    }
    push(&mut specs, "final_ln.gamma".into(), vec![d], Init::One);
    push(&mut specs, "final_ln.beta".into(), vec![d], Init::Zero);
    lin(&mut specs, "cat.fc1", d, c1);
    lin(&mut specs, "cat.fc2", c1, c2);
    lin(&mut specs, "cat.fc3", c2, arch.num_classes as usize);
    push(&mut specs, "diff".into(), vec![d, 1], Init::Uniform { fan_in: d });
    specs
}

/// Total learnable parameter count; a pure function of the architecture.
pub fn param_count(arch: &ArchConfig) -> usize {
    layout(arch)
        .iter()
        .map(|s| s.shape.iter().product::<usize>())
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor<S> {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<S>,
}

/// All learnable parameters, stored in layout order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<S: Scalar> {
    pub arch: ArchConfig,
    pub tensors: Vec<ParamTensor<S>>,
}

impl<S: Scalar> ModelParams<S> {
    /// Seed-deterministic initialization. Random draws happen in f64 so
    /// f32 and f64 instantiations see the same underlying stream.
    pub fn init(arch: &ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = substream(seed, "init");
        let tensors = layout(arch)
            .into_iter()
            .map(|spec| {
                let n: usize = spec.shape.iter().product();
                let values = match spec.init {
                    Init::Uniform { fan_in } => {
                        let bound = 1.0 / (fan_in as f64).sqrt();
                        (0..n)
                            .map(|_| S::from_f64(rng.gen_range(-bound..bound)))
                            .collect()
                    }
                    Init::Zero => vec![S::zero(); n],
                    Init::One => vec![S::one(); n],
                };
                ParamTensor {
                    name: spec.name,
                    shape: spec.shape,
                    values,
                }
            })
            .collect();
        Ok(ModelParams {
            arch: arch.clone(),
            tensors,
        })
    }

    pub fn flat_len(&self) -> usize {
        self.tensors.iter().map(|t| t.values.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<S> {
        let mut out = Vec::with_capacity(self.flat_len());
        for t in &self.tensors {
            out.extend_from_slice(&t.values);
        }
        out
    }

    pub fn load_flat(&mut self, flat: &[S]) {
        assert_eq!(flat.len(), self.flat_len());
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.values.len();
            t.values.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }
}

/// Leaf ids of all parameter tensors inside one tape, in layout order.
pub struct ModelLeaves {
    ids: Vec<TensorId>,
}

impl ModelLeaves {
    pub fn ids(&self) -> &[TensorId] {
        &self.ids
    }
}

/// Insert every parameter tensor as a tape leaf.
pub fn insert_params<S: Scalar>(
    tape: &mut Tape<S>,
    params: &ModelParams<S>,
    requires_grad: bool,
) -> Result<ModelLeaves> {
    let mut ids = Vec::with_capacity(params.tensors.len());
    for t in &params.tensors {
        ids.push(tape.leaf(t.shape.clone(), t.values.clone(), requires_grad)?);
    }
    Ok(ModelLeaves { ids })
}

/// Index helper mirroring [`layout`]'s order.
struct LayoutIndex {
    per_block: usize,
    blocks_start: usize,
    blocks: usize,
}

impl LayoutIndex {
    fn new(arch: &ArchConfig) -> Self {
        LayoutIndex {
            // ln1 (2) + 6 per head + attn_out (2) + ln2 (2) + 3 ff pairs (6)
            per_block: 2 + 6 * arch.num_heads + 2 + 2 + 6,
            blocks_start: 3, // patch w, patch b, cls
            blocks: arch.num_blocks,
        }
    }

    fn block(&self, l: usize) -> usize {
        self.blocks_start + l * self.per_block
    }

    fn after_blocks(&self) -> usize {
        self.blocks_start + self.blocks * self.per_block
    }
}

/// Non-overlapping patches in row-major patch order; within a patch,
/// channel-major then row-major pixels. Output is [E, C*P*P].
pub fn patchify<S: Scalar>(image: &[f32], arch: &ArchConfig) -> Result<Vec<S>> {
    arch.validate()?;
    let s = arch.image_size as usize;
    let p = arch.patch_size as usize;
    let c = arch.channels as usize;
    if image.len() != c * s * s {
        return Err(Error::Config(format!(
            "image has {} values, expected {}",
            image.len(),
            c * s * s
        )));
    }
    let side = s / p;
    let mut out = Vec::with_capacity(side * side * c * p * p);
    for pr in 0..side {
        for pc in 0..side {
            for ch in 0..c {
                for r in 0..p {
                    for q in 0..p {
                        let row = pr * p + r;
                        let col = pc * p + q;
                        out.push(S::from_f64(image[ch * s * s + row * s + col] as f64));
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Deterministic sin-cos positional table for `n_tokens` tokens of width
/// `d`: even dimension 2j of token i gets sin(i / 10000^((2j+1)/d)), odd
/// dimension 2j+1 gets cos(i / 10000^(2j/d)).
pub fn positional_encoding(n_tokens: usize, d: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n_tokens * d);
    for i in 0..n_tokens {
        for dim in 0..d {
            let v = if dim % 2 == 0 {
                let expo = (dim + 1) as f64 / d as f64;
                (i as f64 / 10000f64.powf(expo)).sin()
            } else {
                let expo = (dim - 1) as f64 / d as f64;
                (i as f64 / 10000f64.powf(expo)).cos()
            };
            out.push(v);
        }
    }
    out
}

fn mhsa<S: Scalar>(
    tape: &mut Tape<S>,
    arch: &ArchConfig,
    leaves: &ModelLeaves,
    base: usize,
    g: TensorId,
) -> Result<TensorId> {
    let scale = S::from_f64(1.0 / (arch.head_dim() as f64).sqrt());
    let mut heads = Vec::with_capacity(arch.num_heads);
    for m in 0..arch.num_heads {
        let h = base + 6 * m;
        let ids = leaves.ids();
        let q = tape.linear(g, ids[h], Some(ids[h + 1]))?;
        let k = tape.linear(g, ids[h + 2], Some(ids[h + 3]))?;
        let v = tape.linear(g, ids[h + 4], Some(ids[h + 5]))?;
        let scores = tape.matmul_nt(q, k)?;
        let scaled = tape.scale(scores, scale);
        let attn = tape.softmax(scaled, 1)?;
        heads.push(tape.matmul(attn, v)?);
    }
    let cat = tape.concat(&heads, 1)?;
    let out_w = leaves.ids()[base + 6 * arch.num_heads];
    let out_b = leaves.ids()[base + 6 * arch.num_heads + 1];
    tape.linear(cat, out_w, Some(out_b))
}

fn encoder_block<S: Scalar>(
    tape: &mut Tape<S>,
    arch: &ArchConfig,
    leaves: &ModelLeaves,
    l: usize,
    g: TensorId,
) -> Result<TensorId> {
    let idx = LayoutIndex::new(arch);
    let b = idx.block(l);
    let ids = leaves.ids();
    let eps = S::from_f64(LN_EPS);
    // g' = MHSA(LN(g)) + g
    let normed = tape.layer_norm(g, ids[b], ids[b + 1], eps)?;
    let attn = mhsa(tape, arch, leaves, b + 2, normed)?;
    let g1 = tape.add(attn, g)?;
    // g'' = FF(LN(g')) + g'
    let ff_base = b + 2 + 6 * arch.num_heads + 2;
    let normed = tape.layer_norm(g1, ids[ff_base], ids[ff_base + 1], eps)?;
    let h = tape.linear(normed, ids[ff_base + 2], Some(ids[ff_base + 3]))?;
    let h = tape.activation(h, Activation::Relu)?;
    let h = tape.linear(h, ids[ff_base + 4], Some(ids[ff_base + 5]))?;
    let h = tape.activation(h, Activation::Relu)?;
    let h = tape.linear(h, ids[ff_base + 6], Some(ids[ff_base + 7]))?;
    tape.add(h, g1)
}

/// Full extractor: patchify, project, prepend the class token, add the
/// positional table, run the encoder blocks, and layer-norm the class
/// token embedding. Output is the [D] feature vector.
pub fn extract_features<S: Scalar>(
    tape: &mut Tape<S>,
    arch: &ArchConfig,
    leaves: &ModelLeaves,
    image: &[f32],
) -> Result<TensorId> {
    let e = arch.num_tokens();
    let d = arch.token_dim;
    let ids = leaves.ids();
    let patches = patchify::<S>(image, arch)?;
    let patches = tape.constant(vec![e, arch.patch_len()], patches)?;
    let tokens = tape.linear(patches, ids[0], Some(ids[1]))?;
    let cls = tape.reshape(ids[2], vec![1, d])?;
    let g0 = tape.concat(&[cls, tokens], 0)?;
    let pe: Vec<S> = positional_encoding(e + 1, d)
        .into_iter()
        .map(S::from_f64)
        .collect();
    let pe = tape.constant(vec![e + 1, d], pe)?;
    let mut g = tape.add(g0, pe)?;
    for l in 0..arch.num_blocks {
        g = encoder_block(tape, arch, leaves, l, g)?;
    }
    let idx = LayoutIndex::new(arch);
    let fin = idx.after_blocks();
    let cls_out = tape.slice_row(g, 0)?;
    tape.layer_norm(cls_out, ids[fin], ids[fin + 1], S::from_f64(LN_EPS))
}

/// Class probabilities from features; accepts [D] or a stacked [n, D].
pub fn categorical_head<S: Scalar>(
    tape: &mut Tape<S>,
    arch: &ArchConfig,
    leaves: &ModelLeaves,
    features: TensorId,
) -> Result<TensorId> {
    let idx = LayoutIndex::new(arch);
    let base = idx.after_blocks() + 2;
    let ids = leaves.ids();
    let act = Activation::LeakyRelu(arch.leaky_slope);
    let h = tape.linear(features, ids[base], Some(ids[base + 1]))?;
    let h = tape.activation(h, act)?;
    let h = tape.linear(h, ids[base + 2], Some(ids[base + 3]))?;
    let h = tape.activation(h, act)?;
    let logits = tape.linear(h, ids[base + 4], Some(ids[base + 5]))?;
    let axis = tape.shape(logits).len() - 1;
    tape.softmax(logits, axis)
}

/// r̂ = w · f^d, bias-free. Accepts [D] (scalar out) or [n, D] ([n] out).
pub fn differential_head<S: Scalar>(
    tape: &mut Tape<S>,
    arch: &ArchConfig,
    leaves: &ModelLeaves,
    diff_features: TensorId,
) -> Result<TensorId> {
    let idx = LayoutIndex::new(arch);
    let w = leaves.ids()[idx.after_blocks() + 8];
    let out = tape.linear(diff_features, w, None)?;
    let n = tape.values(out).len();
    tape.reshape(out, vec![n])
}

/// Forward one ordered pair through the shared extractor; returns the
/// minuend's class probabilities and the pair's predicted difference.
pub fn forward_pair<S: Scalar>(
    tape: &mut Tape<S>,
    arch: &ArchConfig,
    leaves: &ModelLeaves,
    minuend: &[f32],
    subtrahend: &[f32],
) -> Result<(TensorId, TensorId)> {
    let f_m = extract_features(tape, arch, leaves, minuend)?;
    let f_s = extract_features(tape, arch, leaves, subtrahend)?;
    let fd = tape.sub(f_m, f_s)?;
    let rhat = differential_head(tape, arch, leaves, fd)?;
    let probs = categorical_head(tape, arch, leaves, f_m)?;
    Ok((probs, rhat))
}

// ---------------------------------------------------------------------
// DIORCKPT checkpoint format (f32, little-endian).

fn arch_to_bytes(arch: &ArchConfig, out: &mut Vec<u8>) {
    for v in [
        arch.image_size as u32,
        arch.channels as u32,
        arch.patch_size as u32,
        arch.token_dim as u32,
        arch.num_blocks as u32,
        arch.num_heads as u32,
        arch.ff_hidden.0 as u32,
        arch.ff_hidden.1 as u32,
        arch.ff_hidden.2 as u32,
        arch.num_classes as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&arch.leaky_slope.to_le_bytes());
}

pub fn write_checkpoint_bytes(params: &ModelParams<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    arch_to_bytes(&params.arch, &mut out);
    for t in &params.tensors {
        for &v in &t.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn write_checkpoint_file(params: &ModelParams<f32>, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&write_checkpoint_bytes(params))?;
    w.flush()?;
    Ok(())
}

fn take_u32(data: &[u8], off: &mut usize) -> Result<u32> {
    if *off + 4 > data.len() {
        return Err(Error::Format {
            offset: data.len() as u64,
            detail: "truncated header".into(),
        });
    }
    let v = u32::from_le_bytes(data[*off..*off + 4].try_into().unwrap());
    *off += 4;
    Ok(v)
}

pub fn read_checkpoint_bytes(data: &[u8]) -> Result<ModelParams<f32>> {
    if data.len() < 10 {
        return Err(Error::Format {
            offset: data.len() as u64,
            detail: "file shorter than magic and version".into(),
        });
    }
    if &data[0..8] != CKPT_MAGIC {
        return Err(Error::Format {
            offset: 0,
            detail: "bad magic".into(),
        });
    }
    let version = u16::from_le_bytes([data[8], data[9]]);
    if version != CKPT_VERSION {
        return Err(Error::Format {
            offset: 8,
            detail: format!("unsupported version {version}"),
        });
    }
    let mut off = 10usize;
    let fields: Vec<u32> = (0..10)
        .map(|_| take_u32(data, &mut off))
        .collect::<Result<_>>()?;
    if off + 8 > data.len() {
        return Err(Error::Format {
            offset: data.len() as u64,
            detail: "truncated header".into(),
        });
    }
    let leaky_slope = f64::from_le_bytes(data[off..off + 8].try_into().unwrap());
    off += 8;
    let arch = ArchConfig {
        image_size: fields[0] as u16,
        channels: fields[1] as u8,
        patch_size: fields[2] as u16,
        token_dim: fields[3] as usize,
        num_blocks: fields[4] as usize,
        num_heads: fields[5] as usize,
        ff_hidden: (fields[6] as usize, fields[7] as usize, fields[8] as usize),
        num_classes: fields[9] as u8,
        leaky_slope,
    };
    arch.validate().map_err(|e| Error::Format {
        offset: 10,
        detail: format!("invalid architecture: {e}"),
    })?;
    let expected = off + 4 * param_count(&arch);
    if data.len() < expected {
        return Err(Error::Format {
            offset: data.len() as u64,
            detail: "truncated parameter data".into(),
        });
    }
    if data.len() > expected {
        return Err(Error::Format {
            offset: expected as u64,
            detail: "trailing bytes after parameters".into(),
        });
    }
    let tensors = layout(&arch)
        .into_iter()
        .map(|spec| {
            let n: usize = spec.shape.iter().product();
            let values = (0..n)
                .map(|_| {
                    let v = f32::from_le_bytes(data[off..off + 4].try_into().unwrap());
                    off += 4;
                    v
                })
                .collect();
            ParamTensor {
                name: spec.name,
                shape: spec.shape,
                values,
            }
        })
        .collect();
    Ok(ModelParams { arch, tensors })
}

pub fn read_checkpoint_file(path: &Path) -> Result<ModelParams<f32>> {
    let mut buf = Vec::new();
    File::open(path)?.read_to_end(&mut buf)?;
    read_checkpoint_bytes(&buf)
}
