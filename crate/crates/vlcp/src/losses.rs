//! Base pretraining objective: contrastive image-text alignment plus masked
//! token prediction, and the step batch both are computed over.

use ndarray::{Array2, Array4};
use rand::Rng;
use thiserror::Error;

use crate::model::{self, ModelState, Modality};
use crate::tensor::{Arr, Tape, TensorId};
use crate::util;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error("mask rate must lie in (0, 1), got {0}")]
    BadRate(f64),
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite value in loss component {0}")]
    NonFinite(&'static str),
}

/// Inputs of one optimization step.
#[derive(Debug, Clone)]
pub struct StepBatch {
    pub images: Array4<f64>,
    /// Clean caption tokens `(B, L)`, zero-padded beyond `lens[i]`.
    pub tokens: Array2<usize>,
    pub lens: Vec<usize>,
    pub masked: MaskedBatch,
}

impl StepBatch {
    pub fn len(&self) -> usize {
        self.lens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lens.is_empty()
    }
}

/// Tape handles for the parts of a forward pass that loss terms consume.
#[derive(Debug, Clone, Copy)]
pub struct ForwardHandles {
    pub img_seq: TensorId,
    pub txt_seq: TensorId,
    pub v: TensorId,
    pub w: TensorId,
    pub mlm_logits: TensorId,
    pub fused_cls: TensorId,
}

/// Loss values of one plain pretraining step.
#[derive(Debug, Clone, Copy, Default, serde::Serialize, serde::Deserialize)]
pub struct VlpLosses {
    pub ita: f64,
    pub mlm: f64,
    pub total: f64,
}

/// Forward a model on a batch: projections from the clean caption, token
/// logits from the masked caption fused with the image.
pub fn forward_step(
    tape: &mut Tape,
    bound: &model::Bound,
    state: &ModelState,
    batch: &StepBatch,
) -> ForwardHandles {
    let cfg = &state.config;
    let img_seq = model::encode_image(tape, bound, cfg, &batch.images);
    let txt_seq = model::encode_text(tape, bound, cfg, &batch.tokens, &batch.lens);
    let v = model::project_cls(tape, bound, cfg, img_seq, Modality::Image);
    let w = model::project_cls(tape, bound, cfg, txt_seq, Modality::Text);
    let txt_masked = model::encode_text(tape, bound, cfg, &batch.masked.input_tokens, &batch.lens);
    let fused = model::fuse(tape, bound, cfg, img_seq, txt_masked, &batch.lens);
    ForwardHandles {
        img_seq,
        txt_seq,
        v,
        w,
        mlm_logits: fused.mlm_logits,
        fused_cls: fused.fused_cls,
    }
}

/// Base pretraining terms on an existing tape.
pub fn vlp_terms(
    tape: &mut Tape,
    fwd: &ForwardHandles,
    batch: &StepBatch,
    tau: f64,
) -> Result<(TensorId, TensorId), LossError> {
    let l_ita = ita_loss(tape, fwd.v, fwd.w, tau)?;
    let l_mlm = mlm_loss(tape, fwd.mlm_logits, &batch.masked);
    Ok((l_ita, l_mlm))
}

/// One plain pretraining step: loss values plus gradients for every
/// parameter of `state`.
pub fn vlp_step(
    state: &ModelState,
    batch: &StepBatch,
    tau: f64,
) -> Result<(VlpLosses, std::collections::BTreeMap<String, Arr>), LossError> {
    let mut tape = Tape::new();
    let bound = model::bind(&mut tape, state, true);
    let fwd = forward_step(&mut tape, &bound, state, batch);
    let (l_ita, l_mlm) = vlp_terms(&mut tape, &fwd, batch, tau)?;
    let total = tape.add(l_ita, l_mlm);
    let out = VlpLosses {
        ita: tape.scalar(l_ita),
        mlm: tape.scalar(l_mlm),
        total: tape.scalar(total),
    };
    if !out.total.is_finite() {
        return Err(LossError::NonFinite("vlp_total"));
    }
    let grads = tape.backward(total);
    let map = state
        .params
        .iter()
        .map(|(n, a)| (n.clone(), grads.get_or_zeros(bound.id(n), a.shape())))
        .collect();
    Ok((out, map))
}

/// Symmetric contrastive alignment loss over the batch similarity matrix.
///
/// `v` and `w` are `(B, d)` unit-norm projections of matched pairs; the loss
/// is the average of the image-to-text and text-to-image softmax
/// cross-entropies with diagonal targets over `s/τ`. Swapping `v` and `w`
/// swaps the two terms, so the result is exactly symmetric.
pub fn ita_loss(tape: &mut Tape, v: TensorId, w: TensorId, tau: f64) -> Result<TensorId, LossError> {
    if tau <= 0.0 {
        return Err(LossError::BadTemperature(tau));
    }
    let b = tape.value(v).shape()[0];
    if b == 0 {
        return Err(LossError::EmptyBatch);
    }
    let i2t = directional_ita(tape, v, w, tau);
    let t2i = directional_ita(tape, w, v, tau);
    let sum = tape.add(i2t, t2i);
    Ok(tape.scale(sum, 0.5))
}

fn directional_ita(tape: &mut Tape, q: TensorId, g: TensorId, tau: f64) -> TensorId {
    let b = tape.value(q).shape()[0];
    let gt = tape.transpose2(g);
    let sims = tape.matmul(q, gt);
    let logits = tape.scale(sims, 1.0 / tau);
    let logp = tape.log_softmax_last(logits);
    let diag: Vec<usize> = (0..b).collect();
    let picked = tape.select_last(logp, &diag);
    let mean = tape.mean_all(picked);
    tape.neg(mean)
}

/// Token batch with a subset of positions replaced by the mask token.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedBatch {
    /// Tokens after masking, `(B, L)`.
    pub input_tokens: Array2<usize>,
    /// Original token at masked positions, [`IGNORE_LABEL`] elsewhere.
    pub labels: Array2<i64>,
    /// `(sample, caption position)` of every masked slot, in scan order.
    pub mask_positions: Vec<(usize, usize)>,
}

pub const IGNORE_LABEL: i64 = -1;

impl MaskedBatch {
    pub fn num_masked(&self) -> usize {
        self.mask_positions.len()
    }
}

/// Independently mask each real (non-pad) caption position with probability
/// `rate`, replacing it with `mask_token_id`. The CLS slot lives outside the
/// token array and is never maskable; padding (positions `>= lens[i]`) is
/// skipped. Deterministic in `seed`.
pub fn mask_tokens(
    captions: &Array2<usize>,
    lens: &[usize],
    rate: f64,
    seed: u64,
    mask_token_id: usize,
) -> Result<MaskedBatch, LossError> {
    if !(0.0..1.0).contains(&rate) || rate == 0.0 {
        return Err(LossError::BadRate(rate));
    }
    let (b, l) = captions.dim();
    assert_eq!(b, lens.len());
    let mut rng = util::derive_rng_named(seed, "mask_tokens", &[]);
    let mut input = captions.clone();
    let mut labels = Array2::<i64>::from_elem((b, l), IGNORE_LABEL);
    let mut positions = Vec::new();
    for i in 0..b {
        for j in 0..l.min(lens[i]) {
            if rng.gen_range(0.0..1.0) < rate {
                labels[(i, j)] = captions[(i, j)] as i64;
                input[(i, j)] = mask_token_id;
                positions.push((i, j));
            }
        }
    }
    Ok(MaskedBatch {
        input_tokens: input,
        labels,
        mask_positions: positions,
    })
}

/// Mean cross-entropy over masked positions only. `mlm_logits` covers the
/// full `(B, L+1, V)` sequence with the CLS slot first, so caption position
/// `j` maps to logits row `j + 1`. Returns a constant zero when nothing is
/// masked.
pub fn mlm_loss(tape: &mut Tape, mlm_logits: TensorId, masked: &MaskedBatch) -> TensorId {
    let shape = tape.value(mlm_logits).shape().to_vec();
    let (b, l1, v) = (shape[0], shape[1], shape[2]);
    if masked.mask_positions.is_empty() {
        return tape.constant(ndarray::arr0(0.0).into_dyn());
    }
    let flat = tape.reshape(mlm_logits, &[b * l1, v]);
    let rows: Vec<usize> = masked
        .mask_positions
        .iter()
        .map(|&(i, j)| i * l1 + (j + 1))
        .collect();
    let picked = tape.take_rows(flat, &rows);
    let logp = tape.log_softmax_last(picked);
    let targets: Vec<usize> = masked
        .mask_positions
        .iter()
        .map(|&(i, j)| masked.labels[(i, j)] as usize)
        .collect();
    let ll = tape.select_last(logp, &targets);
    let mean = tape.mean_all(ll);
    tape.neg(mean)
}
