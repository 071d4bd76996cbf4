//! Dual-encoder + fusion-encoder architecture at configurable (tiny) scale.
//!
//! A patch-transformer image encoder, a transformer text encoder, a
//! cross-attention fusion encoder over the text sequence, linear projection
//! heads onto a shared unit sphere, and a token-prediction head. Three
//! parameter-identical instantiations of [`ModelState`] are maintained by the
//! training loop (current, momentum, and previous-task reference); this module
//! only defines the state and the forward graph.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Array4, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Arr, Tape, TensorId};
use crate::util;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"VLCPTNSR";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Epsilon guard for L2 normalization of projections.
pub const PROJ_NORM_EPS: f64 = 1e-12;
const LN_EPS: f64 = 1e-5;
const ATTN_MASK_NEG: f64 = -1e30;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    BadConfig(String),
    #[error("tensor {name}: expected shape {expected:?}, got {got:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("unknown tensor {0} in checkpoint")]
    UnknownTensor(String),
    #[error("missing tensor {0}")]
    MissingTensor(String),
    #[error("bad checkpoint file: {0}")]
    BadCheckpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub proj_dim: usize,
    pub num_layers_image: usize,
    pub num_layers_text: usize,
    pub num_layers_fusion: usize,
    pub num_heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: f64,
    /// Route projections through weight- and feature-normalized heads.
    #[serde(default)]
    pub cosine_projection: bool,
}

fn default_mlp_ratio() -> f64 {
    2.0
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            embed_dim: 64,
            proj_dim: 32,
            num_layers_image: 2,
            num_layers_text: 2,
            num_layers_fusion: 2,
            num_heads: 4,
            vocab_size: 256,
            max_seq_len: 12,
            mlp_ratio: 2.0,
            cosine_projection: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.image_size % self.patch_size != 0 {
            return Err(ModelError::BadConfig(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(ModelError::BadConfig(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.proj_dim < 2 {
            return Err(ModelError::BadConfig("proj_dim must be >= 2".into()));
        }
        if self.vocab_size == 0 {
            return Err(ModelError::BadConfig("vocab_size must be > 0".into()));
        }
        if self.max_seq_len == 0 {
            return Err(ModelError::BadConfig("max_seq_len must be > 0".into()));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn mlp_hidden(&self) -> usize {
        ((self.embed_dim as f64) * self.mlp_ratio).round() as usize
    }

    /// Every parameter tensor of the model, with its shape, in name order.
    pub fn param_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        let d = self.embed_dim;
        let h = self.mlp_hidden();
        let mut m = BTreeMap::new();
        let attn_block = |m: &mut BTreeMap<String, Vec<usize>>, prefix: &str| {
            for w in ["wq", "wk", "wv", "wo"] {
                m.insert(format!("{prefix}.{w}"), vec![d, d]);
            }
            for b in ["bq", "bk", "bv", "bo"] {
                m.insert(format!("{prefix}.{b}"), vec![d]);
            }
        };
        let layer_common = |m: &mut BTreeMap<String, Vec<usize>>, prefix: &str| {
            m.insert(format!("{prefix}.ln1.g"), vec![d]);
            m.insert(format!("{prefix}.ln1.b"), vec![d]);
            attn_block(m, &format!("{prefix}.attn"));
            m.insert(format!("{prefix}.ln2.g"), vec![d]);
            m.insert(format!("{prefix}.ln2.b"), vec![d]);
            m.insert(format!("{prefix}.mlp.w1"), vec![d, h]);
            m.insert(format!("{prefix}.mlp.b1"), vec![h]);
            m.insert(format!("{prefix}.mlp.w2"), vec![h, d]);
            m.insert(format!("{prefix}.mlp.b2"), vec![d]);
        };

        m.insert("img.patch.w".into(), vec![self.patch_dim(), d]);
        m.insert("img.patch.b".into(), vec![d]);
        m.insert("img.cls".into(), vec![1, d]);
        m.insert("img.pos".into(), vec![self.num_patches() + 1, d]);
        for l in 0..self.num_layers_image {
            layer_common(&mut m, &format!("img.l{l}"));
        }
        m.insert("img.final.g".into(), vec![d]);
        m.insert("img.final.b".into(), vec![d]);

        m.insert("txt.embed".into(), vec![self.vocab_size, d]);
        m.insert("txt.cls".into(), vec![1, d]);
        m.insert("txt.pos".into(), vec![self.max_seq_len + 1, d]);
        for l in 0..self.num_layers_text {
            layer_common(&mut m, &format!("txt.l{l}"));
        }
        m.insert("txt.final.g".into(), vec![d]);
        m.insert("txt.final.b".into(), vec![d]);

        for l in 0..self.num_layers_fusion {
            let p = format!("fus.l{l}");
            layer_common(&mut m, &p);
            m.insert(format!("{p}.lnx.g"), vec![d]);
            m.insert(format!("{p}.lnx.b"), vec![d]);
            attn_block(&mut m, &format!("{p}.xattn"));
        }
        m.insert("fus.final.g".into(), vec![d]);
        m.insert("fus.final.b".into(), vec![d]);

        m.insert("proj.img.w".into(), vec![d, self.proj_dim]);
        m.insert("proj.txt.w".into(), vec![d, self.proj_dim]);
        m.insert("mlm.w".into(), vec![d, self.vocab_size]);
        m.insert("mlm.b".into(), vec![self.vocab_size]);
        m
    }
}

/// All trainable parameters as a flat named-tensor map.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub params: BTreeMap<String, Arr>,
}

impl ModelState {
    /// Randomly initialized state; deterministic in `(config, seed)` and
    /// independent of parameter iteration order.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut params = BTreeMap::new();
        for (name, shape) in config.param_shapes() {
            let mut rng = util::derive_rng_named(seed, &name, &[]);
            let n: usize = shape.iter().product();
            let data: Vec<f64> = if name.ends_with(".b") && !name.ends_with("mlp.b") {
                vec![0.0; n]
            } else if name.ends_with(".g") {
                vec![1.0; n]
            } else if name.ends_with("embed") || name.ends_with("pos") || name.ends_with("cls") {
                (0..n).map(|_| rng.gen_range(-0.02..0.02)).collect()
            } else {
                // 2-d weight: xavier-uniform in fan_in/fan_out
                let (fan_in, fan_out) = if shape.len() == 2 {
                    (shape[0], shape[1])
                } else {
                    (n, n)
                };
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
            };
            params.insert(name, Arr::from_shape_vec(IxDyn(&shape), data).unwrap());
        }
        Ok(Self { config, params })
    }

    /// Deep copy with no aliasing (ndarray owns its buffers).
    pub fn clone_state(&self) -> Self {
        self.clone()
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(|a| a.len()).sum()
    }

    /// Check every tensor against the shapes implied by `config`,
    /// reporting the first offender in name order.
    pub fn validate_shapes(&self, config: &ModelConfig) -> Result<(), ModelError> {
        let expected = config.param_shapes();
        for (name, shape) in &expected {
            match self.params.get(name) {
                None => return Err(ModelError::MissingTensor(name.clone())),
                Some(a) if a.shape() != shape.as_slice() => {
                    return Err(ModelError::ShapeMismatch {
                        name: name.clone(),
                        expected: shape.clone(),
                        got: a.shape().to_vec(),
                    })
                }
                _ => {}
            }
        }
        for name in self.params.keys() {
            if !expected.contains_key(name) {
                return Err(ModelError::UnknownTensor(name.clone()));
            }
        }
        Ok(())
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<(), ModelError> {
        let meta = serde_json::to_string(&self.config)
            .map_err(|e| ModelError::BadCheckpoint(e.to_string()))?;
        write_tensor_container(path, &meta, &self.params)
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self, ModelError> {
        let (meta, params) = read_tensor_container(path)?;
        let config: ModelConfig = serde_json::from_str(&meta)
            .map_err(|e| ModelError::BadCheckpoint(format!("bad config block: {e}")))?;
        let state = Self { config: config.clone(), params };
        state.validate_shapes(&config)?;
        Ok(state)
    }

    /// Load and verify against an expected config (shape check names the
    /// first offending tensor).
    pub fn load_checkpoint_expecting(
        path: &Path,
        expected: &ModelConfig,
    ) -> Result<Self, ModelError> {
        let (meta, params) = read_tensor_container(path)?;
        let config: ModelConfig = serde_json::from_str(&meta)
            .map_err(|e| ModelError::BadCheckpoint(format!("bad config block: {e}")))?;
        let state = Self { config, params };
        state.validate_shapes(expected)?;
        Ok(state)
    }
}

// ── named-tensor container (shared by model / momentum / importance files) ──

pub fn write_tensor_container(
    path: &Path,
    meta_json: &str,
    tensors: &BTreeMap<String, Arr>,
) -> Result<(), ModelError> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let meta = meta_json.as_bytes();
    buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    buf.extend_from_slice(meta);
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, arr) in tensors {
        let nb = name.as_bytes();
        buf.extend_from_slice(&(nb.len() as u16).to_le_bytes());
        buf.extend_from_slice(nb);
        buf.push(arr.ndim() as u8);
        for &d in arr.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in arr.as_standard_layout().iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_tensor_container(path: &Path) -> Result<(String, BTreeMap<String, Arr>), ModelError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut off = 0usize;
    let take = |off: &mut usize, n: usize| -> Result<&[u8], ModelError> {
        if *off + n > bytes.len() {
            return Err(ModelError::BadCheckpoint("truncated file".into()));
        }
        let s = &bytes[*off..*off + n];
        *off += n;
        Ok(s)
    };
    if take(&mut off, 8)? != CHECKPOINT_MAGIC {
        return Err(ModelError::BadCheckpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::BadCheckpoint(format!(
            "unsupported version {version}"
        )));
    }
    let meta_len = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
    let meta = String::from_utf8(take(&mut off, meta_len)?.to_vec())
        .map_err(|_| ModelError::BadCheckpoint("meta not utf-8".into()))?;
    let count = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(&mut off, 2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut off, name_len)?.to_vec())
            .map_err(|_| ModelError::BadCheckpoint("tensor name not utf-8".into()))?;
        let ndim = take(&mut off, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap()) as usize);
        }
        let n: usize = shape.iter().product();
        let raw = take(&mut off, n * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.insert(name, Arr::from_shape_vec(IxDyn(&shape), data).unwrap());
    }
    Ok((meta, tensors))
}

// ── forward graph ──────────────────────────────────────────────────────

/// Parameters of one state registered on a tape.
pub struct Bound {
    pub ids: BTreeMap<String, TensorId>,
    pub trainable: bool,
}

/// Register every parameter of `state` on `tape`. With `trainable = false`
/// the parameters enter as constants and receive no gradient.
pub fn bind(tape: &mut Tape, state: &ModelState, trainable: bool) -> Bound {
    let mut ids = BTreeMap::new();
    for (name, arr) in &state.params {
        let id = if trainable {
            tape.var(arr.clone())
        } else {
            tape.constant(arr.clone())
        };
        ids.insert(name.clone(), id);
    }
    Bound { ids, trainable }
}

impl Bound {
    pub fn id(&self, name: &str) -> TensorId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter {name}"))
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Modality {
    Image,
    Text,
}

fn linear3(
    tape: &mut Tape,
    x: TensorId, // (B, N, D)
    w: TensorId, // (D, Do)
    b: TensorId, // (Do)
) -> TensorId {
    let shape = tape.value(x).shape().to_vec();
    let (bs, n, d) = (shape[0], shape[1], shape[2]);
    let dout = tape.value(w).shape()[1];
    let flat = tape.reshape(x, &[bs * n, d]);
    let y = tape.matmul(flat, w);
    let y = tape.add_bias(y, b);
    tape.reshape(y, &[bs, n, dout])
}

/// Multi-head attention. `add_mask`, when given, is an additive logit mask of
/// shape `(B*H, Nq, Nk)` (0 for visible, large-negative for hidden keys).
fn mha(
    tape: &mut Tape,
    bound: &Bound,
    prefix: &str,
    q_in: TensorId,
    kv_in: TensorId,
    add_mask: Option<&Arr>,
    cfg: &ModelConfig,
) -> TensorId {
    let d = cfg.embed_dim;
    let heads = cfg.num_heads;
    let dh = d / heads;
    let q_shape = tape.value(q_in).shape().to_vec();
    let kv_shape = tape.value(kv_in).shape().to_vec();
    let (bs, nq, nk) = (q_shape[0], q_shape[1], kv_shape[1]);

    let q = linear3(tape, q_in, bound.id(&format!("{prefix}.wq")), bound.id(&format!("{prefix}.bq")));
    let k = linear3(tape, kv_in, bound.id(&format!("{prefix}.wk")), bound.id(&format!("{prefix}.bk")));
    let v = linear3(tape, kv_in, bound.id(&format!("{prefix}.wv")), bound.id(&format!("{prefix}.bv")));

    let split = |tape: &mut Tape, x: TensorId, n: usize| {
        let x = tape.reshape(x, &[bs, n, heads, dh]);
        let x = tape.permute(x, &[0, 2, 1, 3]);
        tape.reshape(x, &[bs * heads, n, dh])
    };
    let qh = split(tape, q, nq);
    let kh = split(tape, k, nk);
    let vh = split(tape, v, nk);

    let kt = tape.permute(kh, &[0, 2, 1]);
    let scores = tape.bmm(qh, kt);
    let mut scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
    if let Some(mask) = add_mask {
        let m = tape.constant(mask.clone());
        scores = tape.add(scores, m);
    }
    let probs = tape.softmax_last(scores);
    let ctx = tape.bmm(probs, vh);
    let ctx = tape.reshape(ctx, &[bs, heads, nq, dh]);
    let ctx = tape.permute(ctx, &[0, 2, 1, 3]);
    let ctx = tape.reshape(ctx, &[bs, nq, d]);
    linear3(tape, ctx, bound.id(&format!("{prefix}.wo")), bound.id(&format!("{prefix}.bo")))
}

fn mlp_block(tape: &mut Tape, bound: &Bound, prefix: &str, x: TensorId) -> TensorId {
    let h = linear3(
        tape,
        x,
        bound.id(&format!("{prefix}.w1")),
        bound.id(&format!("{prefix}.b1")),
    );
    let h = tape.gelu(h);
    linear3(
        tape,
        h,
        bound.id(&format!("{prefix}.w2")),
        bound.id(&format!("{prefix}.b2")),
    )
}

fn ln(tape: &mut Tape, bound: &Bound, prefix: &str, x: TensorId) -> TensorId {
    tape.layer_norm(
        x,
        bound.id(&format!("{prefix}.g")),
        bound.id(&format!("{prefix}.b")),
        LN_EPS,
    )
}

/// One pre-LN transformer block: self-attention then MLP, residual both.
fn encoder_block(
    tape: &mut Tape,
    bound: &Bound,
    prefix: &str,
    x: TensorId,
    mask: Option<&Arr>,
    cfg: &ModelConfig,
) -> TensorId {
    let h = ln(tape, bound, &format!("{prefix}.ln1"), x);
    let attn = mha(tape, bound, &format!("{prefix}.attn"), h, h, mask, cfg);
    let x = tape.add(x, attn);
    let h2 = ln(tape, bound, &format!("{prefix}.ln2"), x);
    let m = mlp_block(tape, bound, &format!("{prefix}.mlp"), h2);
    tape.add(x, m)
}

/// Split an image batch `(B, H, W, 3)` into flattened patch rows.
fn patchify(images: &Array4<f64>, cfg: &ModelConfig) -> Array2<f64> {
    let (b, h, w, c) = images.dim();
    assert_eq!(h, cfg.image_size, "image height mismatch");
    assert_eq!(w, cfg.image_size, "image width mismatch");
    assert_eq!(c, 3, "expected 3 channels");
    let p = cfg.patch_size;
    let side = h / p;
    let np = side * side;
    let pd = cfg.patch_dim();
    let mut out = Array2::<f64>::zeros((b * np, pd));
    for bi in 0..b {
        for py in 0..side {
            for px in 0..side {
                let row = bi * np + py * side + px;
                let mut col = 0;
                for dy in 0..p {
                    for dx in 0..p {
                        for ch in 0..c {
                            out[(row, col)] = images[(bi, py * p + dy, px * p + dx, ch)];
                            col += 1;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Additive key mask for a text batch: position 0 (CLS) and positions
/// `1..=len` are visible; the rest are hidden from attention.
pub fn text_attn_mask(lens: &[usize], padded_len: usize, heads: usize) -> Arr {
    let b = lens.len();
    let nk = padded_len + 1;
    let mut m = ndarray::Array3::<f64>::zeros((b * heads, nk, nk));
    for (bi, &len) in lens.iter().enumerate() {
        for h in 0..heads {
            let mut slab = m.index_axis_mut(ndarray::Axis(0), bi * heads + h);
            for q in 0..nk {
                for k in (len + 1)..nk {
                    slab[(q, k)] = ATTN_MASK_NEG;
                }
            }
        }
    }
    m.into_dyn()
}

/// Encode an image batch into a patch feature sequence `(B, N+1, D)` with the
/// CLS vector first.
pub fn encode_image(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &ModelConfig,
    images: &Array4<f64>,
) -> TensorId {
    let b = images.dim().0;
    let np = cfg.num_patches();
    let patches = patchify(images, cfg);
    let patches = tape.constant(patches.into_dyn());
    let x = tape.matmul(patches, bound.id("img.patch.w"));
    let x = tape.add_bias(x, bound.id("img.patch.b"));
    let x = tape.reshape(x, &[b, np, cfg.embed_dim]);
    let cls = tape.tile0(bound.id("img.cls"), b);
    let cls = tape.reshape(cls, &[b, 1, cfg.embed_dim]);
    let mut x = tape.concat1(cls, x);
    x = tape.add_bcast0(x, bound.id("img.pos"));
    for l in 0..cfg.num_layers_image {
        x = encoder_block(tape, bound, &format!("img.l{l}"), x, None, cfg);
    }
    ln(tape, bound, "img.final", x)
}

/// Encode a token batch into a word feature sequence `(B, L+1, D)` with the
/// CLS vector first. `lens[i]` gives the number of real (non-pad) tokens.
pub fn encode_text(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &ModelConfig,
    tokens: &Array2<usize>,
    lens: &[usize],
) -> TensorId {
    let (b, l) = tokens.dim();
    assert!(l <= cfg.max_seq_len, "caption longer than max_seq_len");
    assert_eq!(b, lens.len());
    let flat_ids: Vec<usize> = tokens.iter().copied().collect();
    for &t in &flat_ids {
        assert!(t < cfg.vocab_size, "token id {t} out of vocabulary");
    }
    let emb = tape.gather_rows(bound.id("txt.embed"), &flat_ids);
    let emb = tape.reshape(emb, &[b, l, cfg.embed_dim]);
    let cls = tape.tile0(bound.id("txt.cls"), b);
    let cls = tape.reshape(cls, &[b, 1, cfg.embed_dim]);
    let mut x = tape.concat1(cls, emb);
    let pos_rows: Vec<usize> = (0..=l).collect();
    let pos = tape.take_rows(bound.id("txt.pos"), &pos_rows);
    x = tape.add_bcast0(x, pos);
    let mask = text_attn_mask(lens, l, cfg.num_heads);
    for li in 0..cfg.num_layers_text {
        x = encoder_block(tape, bound, &format!("txt.l{li}"), x, Some(&mask), cfg);
    }
    ln(tape, bound, "txt.final", x)
}

/// Map CLS vectors onto the shared unit sphere. The head is a bias-free
/// linear map followed by ε-guarded L2 normalization, so positive rescaling
/// of the input leaves the output unchanged.
pub fn project(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &ModelConfig,
    cls: TensorId,
    modality: Modality,
) -> TensorId {
    let y = project_raw(tape, bound, cfg, cls, modality);
    tape.l2_normalize_last(y, PROJ_NORM_EPS)
}

/// Projection head output before the final L2 normalization (used by
/// sensitivity-based importance estimates, which need unnormalized features).
pub fn project_raw(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &ModelConfig,
    cls: TensorId,
    modality: Modality,
) -> TensorId {
    let w_name = match modality {
        Modality::Image => "proj.img.w",
        Modality::Text => "proj.txt.w",
    };
    let w = bound.id(w_name);
    if cfg.cosine_projection {
        let xn = tape.l2_normalize_last(cls, PROJ_NORM_EPS);
        let wt = tape.transpose2(w);
        let wt = tape.l2_normalize_last(wt, PROJ_NORM_EPS);
        let wn = tape.transpose2(wt);
        tape.matmul(xn, wn)
    } else {
        tape.matmul(cls, w)
    }
}

/// Take the CLS position of a sequence and project it.
pub fn project_cls(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &ModelConfig,
    seq: TensorId,
    modality: Modality,
) -> TensorId {
    let cls = tape.take_axis1(seq, 0);
    project(tape, bound, cfg, cls, modality)
}

pub struct FusionOut {
    pub fused_seq: TensorId, // (B, L+1, D)
    pub fused_cls: TensorId, // (B, D)
    pub mlm_logits: TensorId, // (B, L+1, V)
}

/// Fuse text features with image features through per-layer cross attention
/// and emit token-prediction logits for every text position.
pub fn fuse(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &ModelConfig,
    img_seq: TensorId,
    txt_seq: TensorId,
    lens: &[usize],
) -> FusionOut {
    let shape = tape.value(txt_seq).shape().to_vec();
    let (b, l1, d) = (shape[0], shape[1], shape[2]);
    let mask = text_attn_mask(lens, l1 - 1, cfg.num_heads);
    let mut x = txt_seq;
    for li in 0..cfg.num_layers_fusion {
        let p = format!("fus.l{li}");
        let h = ln(tape, bound, &format!("{p}.ln1"), x);
        let sa = mha(tape, bound, &format!("{p}.attn"), h, h, Some(&mask), cfg);
        x = tape.add(x, sa);
        let hx = ln(tape, bound, &format!("{p}.lnx"), x);
        let ca = mha(tape, bound, &format!("{p}.xattn"), hx, img_seq, None, cfg);
        x = tape.add(x, ca);
        let h2 = ln(tape, bound, &format!("{p}.ln2"), x);
        let m = mlp_block(tape, bound, &format!("{p}.mlp"), h2);
        x = tape.add(x, m);
    }
    let fused_seq = ln(tape, bound, "fus.final", x);
    let fused_cls = tape.take_axis1(fused_seq, 0);
    let flat = tape.reshape(fused_seq, &[b * l1, d]);
    let logits = tape.matmul(flat, bound.id("mlm.w"));
    let logits = tape.add_bias(logits, bound.id("mlm.b"));
    let mlm_logits = tape.reshape(logits, &[b, l1, cfg.vocab_size]);
    FusionOut {
        fused_seq,
        fused_cls,
        mlm_logits,
    }
}

// ── gradient-free evaluation helpers ───────────────────────────────────

/// Unit-norm projections and the fused CLS vector for a batch, computed with
/// all parameters bound as constants (no gradient bookkeeping kept).
pub struct EvalOutputs {
    pub v: Array2<f64>,
    pub w: Array2<f64>,
    pub fused_cls: Array2<f64>,
}

pub fn forward_eval(
    state: &ModelState,
    images: &Array4<f64>,
    tokens: &Array2<usize>,
    lens: &[usize],
) -> EvalOutputs {
    let cfg = &state.config;
    let mut tape = Tape::new();
    let bound = bind(&mut tape, state, false);
    let img_seq = encode_image(&mut tape, &bound, cfg, images);
    let txt_seq = encode_text(&mut tape, &bound, cfg, tokens, lens);
    let v = project_cls(&mut tape, &bound, cfg, img_seq, Modality::Image);
    let w = project_cls(&mut tape, &bound, cfg, txt_seq, Modality::Text);
    let fused = fuse(&mut tape, &bound, cfg, img_seq, txt_seq, lens);
    let to2 = |t: &Tape, id: TensorId| {
        t.value(id)
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .to_owned()
    };
    EvalOutputs {
        v: to2(&tape, v),
        w: to2(&tape, w),
        fused_cls: to2(&tape, fused.fused_cls),
    }
}

/// Convenience wrapper mirroring the per-tensor norm of an `Array2` row set.
pub fn row_norms(a: &Array2<f64>) -> Array1<f64> {
    Array1::from_iter(a.rows().into_iter().map(|r| r.dot(&r).sqrt()))
}
