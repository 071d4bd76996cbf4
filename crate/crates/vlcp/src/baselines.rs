//! Continual-learning comparison methods adapted to vision-language
//! pretraining: importance-weighted parameter penalties (EWC, SI, MAS,
//! RWalk, AFEC) and representation-distillation losses (LWF, ICARL's
//! distillation, LUCIR's orientation constraint).

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

use crate::ctp::{self, CtpError};
use crate::losses::{self, StepBatch};
use crate::model::{self, ModelState, Modality};
use crate::tensor::{Arr, Tape, TensorId};

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("empty sample set")]
    EmptySampleSet,
    #[error("importance map entry {0} is negative or non-finite")]
    BadImportance(String),
    #[error("non-finite value in loss component {0}")]
    NonFinite(&'static str),
    #[error(transparent)]
    Loss(#[from] losses::LossError),
    #[error(transparent)]
    Ctp(#[from] CtpError),
    #[error(transparent)]
    Model(#[from] model::ModelError),
}

/// Per-parameter nonnegative weights, shaped like a [`ModelState`].
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceMap(pub BTreeMap<String, Arr>);

impl ImportanceMap {
    pub fn zeros_like(state: &ModelState) -> Self {
        Self(
            state
                .params
                .iter()
                .map(|(n, a)| (n.clone(), Arr::zeros(a.raw_dim())))
                .collect(),
        )
    }

    pub fn validate(&self) -> Result<(), BaselineError> {
        for (name, a) in &self.0 {
            if a.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(BaselineError::BadImportance(name.clone()));
            }
        }
        Ok(())
    }

    /// Mean entry over every tensor (used to normalize maps before mixing).
    pub fn mean_value(&self) -> f64 {
        let total: f64 = self.0.values().map(|a| a.sum()).sum();
        let count: usize = self.0.values().map(|a| a.len()).sum();
        if count == 0 {
            0.0
        } else {
            total / count as f64
        }
    }

    /// Scale so the mean entry becomes 1 (no-op for an all-zero map).
    pub fn normalized_by_mean(&self) -> Self {
        let mean = self.mean_value();
        if mean <= 0.0 {
            return self.clone();
        }
        Self(
            self.0
                .iter()
                .map(|(n, a)| (n.clone(), a.mapv(|v| v / mean)))
                .collect(),
        )
    }

    pub fn save(&self, path: &Path) -> Result<(), BaselineError> {
        model::write_tensor_container(path, "{\"kind\":\"importance\"}", &self.0)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, BaselineError> {
        let (_, tensors) = model::read_tensor_container(path)?;
        let map = Self(tensors);
        map.validate()?;
        Ok(map)
    }
}

// ── importance estimation ──────────────────────────────────────────────

/// Mean of elementwise-squared gradient maps.
pub fn fisher_from_grads<I>(grad_maps: I) -> Result<ImportanceMap, BaselineError>
where
    I: IntoIterator<Item = BTreeMap<String, Arr>>,
{
    let mut acc: Option<BTreeMap<String, Arr>> = None;
    let mut count = 0usize;
    for grads in grad_maps {
        count += 1;
        match &mut acc {
            None => {
                acc = Some(
                    grads
                        .into_iter()
                        .map(|(n, g)| (n.clone(), g.mapv(|v| v * v)))
                        .collect(),
                );
            }
            Some(a) => {
                for (n, g) in grads {
                    let slot = a.get_mut(&n).expect("grad maps must share keys");
                    ndarray::Zip::from(slot).and(&g).for_each(|s, &gv| *s += gv * gv);
                }
            }
        }
    }
    let mut acc = acc.ok_or(BaselineError::EmptySampleSet)?;
    for a in acc.values_mut() {
        a.mapv_inplace(|v| v / count as f64);
    }
    let map = ImportanceMap(acc);
    map.validate()?;
    Ok(map)
}

/// Diagonal empirical Fisher: mean squared gradient of the base pretraining
/// loss over the given sample batches, computed after a task finishes.
pub fn fisher_importance(
    state: &ModelState,
    batches: &[StepBatch],
    tau: f64,
) -> Result<ImportanceMap, BaselineError> {
    if batches.is_empty() {
        return Err(BaselineError::EmptySampleSet);
    }
    let mut grad_maps = Vec::with_capacity(batches.len());
    for batch in batches {
        let (_, grads) = losses::vlp_step(state, batch, tau)?;
        grad_maps.push(grads);
    }
    fisher_from_grads(grad_maps)
}

/// Mean absolute-gradient maps (sensitivity of unlabeled outputs).
pub fn abs_grad_mean<I>(grad_maps: I) -> Result<ImportanceMap, BaselineError>
where
    I: IntoIterator<Item = BTreeMap<String, Arr>>,
{
    let mut acc: Option<BTreeMap<String, Arr>> = None;
    let mut count = 0usize;
    for grads in grad_maps {
        count += 1;
        match &mut acc {
            None => {
                acc = Some(
                    grads
                        .into_iter()
                        .map(|(n, g)| (n.clone(), g.mapv(f64::abs)))
                        .collect(),
                );
            }
            Some(a) => {
                for (n, g) in grads {
                    let slot = a.get_mut(&n).expect("grad maps must share keys");
                    ndarray::Zip::from(slot).and(&g).for_each(|s, &gv| *s += gv.abs());
                }
            }
        }
    }
    let mut acc = acc.ok_or(BaselineError::EmptySampleSet)?;
    for a in acc.values_mut() {
        a.mapv_inplace(|v| v / count as f64);
    }
    Ok(ImportanceMap(acc))
}

/// Unsupervised sensitivity importance: per sample batch, the absolute
/// gradient of the summed squared norms of the (unnormalized) image
/// projection, text projection, and fused CLS feature; averaged over
/// batches. Pass single-pair batches for the per-sample form.
pub fn mas_importance(
    state: &ModelState,
    batches: &[StepBatch],
) -> Result<ImportanceMap, BaselineError> {
    if batches.is_empty() {
        return Err(BaselineError::EmptySampleSet);
    }
    let cfg = &state.config;
    let mut grad_maps = Vec::with_capacity(batches.len());
    for batch in batches {
        let mut tape = Tape::new();
        let bound = model::bind(&mut tape, state, true);
        let img_seq = model::encode_image(&mut tape, &bound, cfg, &batch.images);
        let txt_seq = model::encode_text(&mut tape, &bound, cfg, &batch.tokens, &batch.lens);
        let img_cls = tape.take_axis1(img_seq, 0);
        let txt_cls = tape.take_axis1(txt_seq, 0);
        let v_raw = model::project_raw(&mut tape, &bound, cfg, img_cls, Modality::Image);
        let w_raw = model::project_raw(&mut tape, &bound, cfg, txt_cls, Modality::Text);
        let fused = model::fuse(&mut tape, &bound, cfg, img_seq, txt_seq, &batch.lens);
        let v2 = tape.mul(v_raw, v_raw);
        let w2 = tape.mul(w_raw, w_raw);
        let f2 = tape.mul(fused.fused_cls, fused.fused_cls);
        let sv = tape.sum_all(v2);
        let sw = tape.sum_all(w2);
        let sf = tape.sum_all(f2);
        let s1 = tape.add(sv, sw);
        let total = tape.add(s1, sf);
        let grads = tape.backward(total);
        grad_maps.push(
            state
                .params
                .iter()
                .map(|(n, a)| (n.clone(), grads.get_or_zeros(bound.id(n), a.shape())))
                .collect(),
        );
    }
    let map = abs_grad_mean(grad_maps)?;
    map.validate()?;
    Ok(map)
}

/// Online path-integral importance: accumulate `ω += −grad · Δθ` each step;
/// at task end `Ω = max(0, ω) / (Δθ_task² + ξ)`.
#[derive(Debug, Clone)]
pub struct SiAccumulator {
    omega: BTreeMap<String, Arr>,
    theta_start: BTreeMap<String, Arr>,
}

impl SiAccumulator {
    pub fn new(state: &ModelState) -> Self {
        Self {
            omega: state
                .params
                .iter()
                .map(|(n, a)| (n.clone(), Arr::zeros(a.raw_dim())))
                .collect(),
            theta_start: state.params.clone(),
        }
    }

    pub fn accumulate(&mut self, grads: &BTreeMap<String, Arr>, delta: &BTreeMap<String, Arr>) {
        for (name, w) in self.omega.iter_mut() {
            let g = &grads[name];
            let d = &delta[name];
            ndarray::Zip::from(w).and(g).and(d).for_each(|w, &g, &d| *w -= g * d);
        }
    }

    pub fn finalize(&self, theta_end: &ModelState, xi: f64) -> Result<ImportanceMap, BaselineError> {
        let mut out = BTreeMap::new();
        for (name, w) in &self.omega {
            let start = &self.theta_start[name];
            let end = &theta_end.params[name];
            let mut imp = Arr::zeros(w.raw_dim());
            ndarray::Zip::from(&mut imp)
                .and(w)
                .and(start)
                .and(end)
                .for_each(|o, &w, &s, &e| {
                    let dt = e - s;
                    *o = w.max(0.0) / (dt * dt + xi);
                });
            out.insert(name.clone(), imp);
        }
        let map = ImportanceMap(out);
        map.validate()?;
        Ok(map)
    }
}

/// Elementwise average of two importance maps.
pub fn rwalk_importance(
    fisher: &ImportanceMap,
    si_scores: &ImportanceMap,
) -> Result<ImportanceMap, BaselineError> {
    let mut out = BTreeMap::new();
    for (name, f) in &fisher.0 {
        let s = si_scores
            .0
            .get(name)
            .ok_or_else(|| BaselineError::BadImportance(name.clone()))?;
        out.insert(name.clone(), (f + s) * 0.5);
    }
    let map = ImportanceMap(out);
    map.validate()?;
    Ok(map)
}

// ── penalties ──────────────────────────────────────────────────────────

/// `½·λ·Σ_k Ω_k (θ_k − θ_ref,k)²` over every parameter tensor, on the tape.
pub fn quadratic_penalty(
    tape: &mut Tape,
    bound: &model::Bound,
    theta_ref: &ModelState,
    omega: &ImportanceMap,
    lambda: f64,
) -> TensorId {
    let mut acc: Option<TensorId> = None;
    for (name, ref_arr) in &theta_ref.params {
        let cur = bound.id(name);
        let r = tape.constant(ref_arr.clone());
        let d = tape.sub(cur, r);
        let d2 = tape.mul(d, d);
        let o = tape.constant(omega.0[name].clone());
        let weighted = tape.mul(d2, o);
        let s = tape.sum_all(weighted);
        acc = Some(match acc {
            None => s,
            Some(a) => tape.add(a, s),
        });
    }
    let total = acc.expect("model has parameters");
    tape.scale(total, 0.5 * lambda)
}

/// Dual-anchor penalty: the usual quadratic pull toward the previous-task
/// parameters plus a second pull toward a forward-step model trained briefly
/// on the new task only.
#[allow(clippy::too_many_arguments)]
pub fn afec_penalty(
    tape: &mut Tape,
    bound: &model::Bound,
    theta_prev: &ModelState,
    theta_star: &ModelState,
    omega: &ImportanceMap,
    omega_star: &ImportanceMap,
    lambda: f64,
    lambda_e: f64,
) -> TensorId {
    let a = quadratic_penalty(tape, bound, theta_prev, omega, lambda);
    let b = quadratic_penalty(tape, bound, theta_star, omega_star, lambda_e);
    tape.add(a, b)
}

// ── distillation losses ────────────────────────────────────────────────

/// Representation alignment of current vs previous-step models: symmetric
/// cross-entropy between their batch similarity distributions over both
/// modal directions (shares the cross-modal topology machinery).
pub fn lwf_step_loss(
    tape: &mut Tape,
    v_cur: TensorId,
    w_cur: TensorId,
    v_ref: &ndarray::Array2<f64>,
    w_ref: &ndarray::Array2<f64>,
    tau: f64,
) -> Result<TensorId, BaselineError> {
    Ok(ctp::cross_modal_tp_loss(tape, v_cur, w_cur, v_ref, w_ref, tau)?)
}

/// Orientation constraint: mean `1 − cos(feat_cur, feat_ref)` over the image
/// and text projections (all unit-norm, so the cosine is a dot product).
pub fn lucir_orientation_loss(
    tape: &mut Tape,
    v_cur: TensorId,
    w_cur: TensorId,
    v_ref: &ndarray::Array2<f64>,
    w_ref: &ndarray::Array2<f64>,
) -> TensorId {
    let b = tape.value(v_cur).shape()[0] as f64;
    let vr = tape.constant(v_ref.clone().into_dyn());
    let wr = tape.constant(w_ref.clone().into_dyn());
    let dv = tape.mul(v_cur, vr);
    let dw = tape.mul(w_cur, wr);
    let sv = tape.sum_all(dv);
    let sw = tape.sum_all(dw);
    let s = tape.add(sv, sw);
    let mean_cos = tape.scale(s, 1.0 / (2.0 * b));
    let neg = tape.neg(mean_cos);
    let one = tape.constant(ndarray::arr0(1.0).into_dyn());
    tape.add(one, neg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use ndarray::{Array2, IxDyn};
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;
    use rand_chacha::rand_core::SeedableRng;

    fn micro_cfg() -> ModelConfig {
        ModelConfig {
            image_size: 8,
            patch_size: 4,
            embed_dim: 8,
            proj_dim: 4,
            num_layers_image: 1,
            num_layers_text: 1,
            num_layers_fusion: 1,
            num_heads: 2,
            vocab_size: 16,
            max_seq_len: 4,
            mlp_ratio: 2.0,
            cosine_projection: false,
        }
    }

    fn micro_batch(b: usize, seed: u64, cfg: &ModelConfig) -> StepBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut images = ndarray::Array4::<f64>::zeros((b, cfg.image_size, cfg.image_size, 3));
        images.mapv_inplace(|_| rng.gen_range(0.0..1.0));
        let tokens =
            Array2::from_shape_fn((b, cfg.max_seq_len), |_| rng.gen_range(2..cfg.vocab_size));
        let lens = vec![cfg.max_seq_len; b];
        let masked = losses::mask_tokens(&tokens, &lens, 0.3, seed ^ 0x55, 1).unwrap();
        StepBatch {
            images,
            tokens,
            lens,
            masked,
        }
    }

    fn scalar_map(name: &str, v: f64) -> BTreeMap<String, Arr> {
        BTreeMap::from([(name.to_string(), ndarray::arr1(&[v]).into_dyn())])
    }

    #[test]
    fn fisher_of_linear_scalar_model_is_slope_squared() {
        // loss(θ) = a·θ → gradient a → Ω = a²
        let a = 3.5;
        let fisher = fisher_from_grads([scalar_map("p", a)]).unwrap();
        assert!((fisher.0["p"][0] - a * a).abs() < 1e-12);
    }

    #[test]
    fn fisher_entries_are_nonnegative_on_a_real_model() {
        let cfg = micro_cfg();
        let state = ModelState::init(cfg.clone(), 1).unwrap();
        let batches = vec![micro_batch(2, 1, &cfg), micro_batch(2, 2, &cfg)];
        let fisher = fisher_importance(&state, &batches, 0.07).unwrap();
        fisher.validate().unwrap();
        assert!(fisher.mean_value() > 0.0);
        assert!(fisher_importance(&state, &[], 0.07).is_err());
    }

    #[test]
    fn quadratic_penalty_arithmetic_and_gradient() {
        // single parameter: diff 2, Ω 3, λ 2 → ½·2·3·4 = 12
        let mut tape = Tape::new();
        let cfg = micro_cfg();
        let mut reference = ModelState::init(cfg.clone(), 2).unwrap();
        let mut current = reference.clone();
        // isolate a single scalar difference
        for a in reference.params.values_mut() {
            a.fill(0.0);
        }
        for a in current.params.values_mut() {
            a.fill(0.0);
        }
        current.params.get_mut("mlm.b").unwrap()[[0]] = 2.0;
        let mut omega = ImportanceMap::zeros_like(&reference);
        omega.0.get_mut("mlm.b").unwrap()[[0]] = 3.0;
        let bound = model::bind(&mut tape, &current, true);
        let p = quadratic_penalty(&mut tape, &bound, &reference, &omega, 2.0);
        assert!((tape.scalar(p) - 12.0).abs() < 1e-12);

        // zero at θ == θ_ref
        let mut tape2 = Tape::new();
        let bound2 = model::bind(&mut tape2, &reference, true);
        let p2 = quadratic_penalty(&mut tape2, &bound2, &reference, &omega, 2.0);
        assert_eq!(tape2.scalar(p2), 0.0);

        // gradient λ·Ω·(θ−θ_ref) against finite differences
        let grads = tape.backward(p);
        let g = grads.get(bound.id("mlm.b")).unwrap()[[0]];
        assert!((g - 2.0 * 3.0 * 2.0).abs() < 1e-10);
        let h = 1e-6;
        let eval = |x: f64| {
            let mut t = Tape::new();
            let mut c = current.clone();
            c.params.get_mut("mlm.b").unwrap()[[0]] = x;
            let b = model::bind(&mut t, &c, true);
            let p = quadratic_penalty(&mut t, &b, &reference, &omega, 2.0);
            t.scalar(p)
        };
        let num = (eval(2.0 + h) - eval(2.0 - h)) / (2.0 * h);
        assert!((g - num).abs() / num.abs().max(1.0) < 1e-6);
    }

    #[test]
    fn si_accumulation_formula() {
        let cfg = micro_cfg();
        let mut state = ModelState::init(cfg, 3).unwrap();
        for a in state.params.values_mut() {
            a.fill(0.0);
        }
        let mut si = SiAccumulator::new(&state);
        // one step on a single coordinate: grad −1, Δθ 0.5
        let zeros: BTreeMap<String, Arr> = state
            .params
            .iter()
            .map(|(n, a)| (n.clone(), Arr::zeros(a.raw_dim())))
            .collect();
        let mut grads = zeros.clone();
        grads.get_mut("mlm.b").unwrap()[[0]] = -1.0;
        let mut delta = zeros.clone();
        delta.get_mut("mlm.b").unwrap()[[0]] = 0.5;
        si.accumulate(&grads, &delta);
        state.params.get_mut("mlm.b").unwrap()[[0]] = 0.5; // θ_end − θ_start = 0.5
        let omega = si.finalize(&state, 0.1).unwrap();
        let got = omega.0["mlm.b"][[0]];
        assert!((got - 0.5 / (0.25 + 0.1)).abs() < 1e-12, "{got}");

        // zero gradients → zero importance; negative ω clipped
        let si2 = SiAccumulator::new(&state);
        let omega2 = si2.finalize(&state, 0.1).unwrap();
        assert_eq!(omega2.mean_value(), 0.0);
        let mut si3 = SiAccumulator::new(&state);
        let mut pos_grads = zeros.clone();
        pos_grads.get_mut("mlm.b").unwrap()[[0]] = 1.0; // ω = −1·0.5 < 0
        si3.accumulate(&pos_grads, &delta);
        let omega3 = si3.finalize(&state, 0.1).unwrap();
        assert_eq!(omega3.0["mlm.b"][[0]], 0.0);
    }

    #[test]
    fn mas_gives_zero_importance_to_token_prediction_head() {
        let cfg = micro_cfg();
        let state = ModelState::init(cfg.clone(), 4).unwrap();
        let batches: Vec<StepBatch> = (0..3).map(|i| micro_batch(1, 20 + i, &cfg)).collect();
        let omega = mas_importance(&state, &batches).unwrap();
        omega.validate().unwrap();
        // the prediction head has no path into v, w, or the fused CLS vector
        assert_eq!(omega.0["mlm.w"].sum(), 0.0);
        assert_eq!(omega.0["mlm.b"].sum(), 0.0);
        assert!(omega.0["proj.img.w"].sum() > 0.0);
        assert!(omega.0["img.patch.w"].sum() > 0.0);
    }

    #[test]
    fn mas_sensitivity_matches_hand_derivation_on_a_linear_map() {
        // y = x·w with w two scalars; d(‖y‖²)/dw_j = 2·y·x_j
        let x = [0.7, -0.4];
        let w = [1.3, 0.2];
        let y: f64 = x[0] * w[0] + x[1] * w[1];
        let mut tape = Tape::new();
        let wid = tape.var(ndarray::arr2(&[[w[0]], [w[1]]]).into_dyn());
        let xid = tape.constant(ndarray::arr2(&[x]).into_dyn());
        let yid = tape.matmul(xid, wid);
        let y2 = tape.mul(yid, yid);
        let s = tape.sum_all(y2);
        let grads = tape.backward(s);
        let g = grads.get(wid).unwrap();
        let map = abs_grad_mean([BTreeMap::from([("w".to_string(), g.clone())])]).unwrap();
        assert!((map.0["w"][[0, 0]] - (2.0 * y * x[0]).abs()).abs() < 1e-12);
        assert!((map.0["w"][[1, 0]] - (2.0 * y * x[1]).abs()).abs() < 1e-12);
    }

    #[test]
    fn rwalk_combination_is_the_elementwise_mean() {
        let f = ImportanceMap(scalar_map("p", 2.0));
        let s = ImportanceMap(scalar_map("p", 4.0));
        let c = rwalk_importance(&f, &s).unwrap();
        assert_eq!(c.0["p"][0], 3.0);
        let z = rwalk_importance(
            &ImportanceMap(scalar_map("p", 0.0)),
            &ImportanceMap(scalar_map("p", 0.0)),
        )
        .unwrap();
        assert_eq!(z.0["p"][0], 0.0);
    }

    #[test]
    fn afec_penalty_reduces_to_single_anchor_when_lambda_e_is_zero() {
        let cfg = micro_cfg();
        let prev = ModelState::init(cfg.clone(), 5).unwrap();
        let star = ModelState::init(cfg.clone(), 6).unwrap();
        let cur = ModelState::init(cfg.clone(), 7).unwrap();
        let omega = ImportanceMap(
            prev.params
                .iter()
                .map(|(n, a)| (n.clone(), Arr::from_elem(a.raw_dim(), 0.5)))
                .collect(),
        );
        let mut tape = Tape::new();
        let bound = model::bind(&mut tape, &cur, true);
        let full = afec_penalty(&mut tape, &bound, &prev, &star, &omega, &omega, 1.5, 0.0);
        let ewc_only = quadratic_penalty(&mut tape, &bound, &prev, &omega, 1.5);
        assert!((tape.scalar(full) - tape.scalar(ewc_only)).abs() < 1e-12);

        // zero when anchored at itself
        let mut tape2 = Tape::new();
        let bound2 = model::bind(&mut tape2, &prev, true);
        let z = afec_penalty(&mut tape2, &bound2, &prev, &prev, &omega, &omega, 1.5, 2.0);
        assert_eq!(tape2.scalar(z), 0.0);

        // scalar two-term arithmetic
        let mut tape3 = Tape::new();
        let mut c = prev.clone();
        for a in c.params.values_mut() {
            a.fill(0.0);
        }
        let mut p_anchor = c.clone();
        let mut s_anchor = c.clone();
        c.params.get_mut("mlm.b").unwrap()[[0]] = 1.0;
        p_anchor.params.get_mut("mlm.b").unwrap()[[0]] = 0.0; // diff 1
        s_anchor.params.get_mut("mlm.b").unwrap()[[0]] = 3.0; // diff −2
        let mut om = ImportanceMap::zeros_like(&c);
        om.0.get_mut("mlm.b").unwrap()[[0]] = 1.0;
        let bound3 = model::bind(&mut tape3, &c, true);
        let p = afec_penalty(&mut tape3, &bound3, &p_anchor, &s_anchor, &om, &om, 2.0, 3.0);
        // ½·2·1·1 + ½·3·1·4 = 1 + 6 = 7
        assert!((tape3.scalar(p) - 7.0).abs() < 1e-12);
    }

    fn unit_rows(data: Vec<Vec<f64>>) -> Array2<f64> {
        let b = data.len();
        let d = data[0].len();
        let mut m = Array2::<f64>::zeros((b, d));
        for (i, row) in data.iter().enumerate() {
            let n: f64 = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            for (j, x) in row.iter().enumerate() {
                m[(i, j)] = x / n;
            }
        }
        m
    }

    #[test]
    fn lwf_loss_is_stationary_at_equality_and_zero_for_single_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let v = unit_rows(
            (0..3)
                .map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0) + 1e-3).collect())
                .collect(),
        );
        let w = unit_rows(
            (0..3)
                .map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0) + 1e-3).collect())
                .collect(),
        );
        let mut tape = Tape::new();
        let vi = tape.var(v.clone().into_dyn());
        let wi = tape.var(w.clone().into_dyn());
        let l = lwf_step_loss(&mut tape, vi, wi, &v, &w, 0.07).unwrap();
        assert!(tape.scalar(l) > 0.0); // entropy floor
        let grads = tape.backward(l);
        let gmax = grads
            .get(vi)
            .unwrap()
            .iter()
            .chain(grads.get(wi).unwrap().iter())
            .fold(0.0f64, |m, x| m.max(x.abs()));
        assert!(gmax < 1e-8);

        let v1 = unit_rows(vec![vec![1.0, 0.0]]);
        let mut tape2 = Tape::new();
        let vi = tape2.var(v1.clone().into_dyn());
        let wi = tape2.var(v1.clone().into_dyn());
        let l1 = lwf_step_loss(&mut tape2, vi, wi, &v1, &v1, 0.07).unwrap();
        assert_eq!(tape2.scalar(l1), 0.0);
    }

    #[test]
    fn lwf_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let raw = Arr::from_shape_vec(
            IxDyn(&[3, 4]),
            (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let v_ref = unit_rows(
            (0..3)
                .map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0) + 1e-3).collect())
                .collect(),
        );
        let w_ref = unit_rows(
            (0..3)
                .map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0) + 1e-3).collect())
                .collect(),
        );
        let f = |x: &Arr| {
            let mut t = Tape::new();
            let xi = t.var(x.clone());
            let v = t.l2_normalize_last(xi, 1e-12);
            let w = t.constant(w_ref.clone().into_dyn());
            let l = lwf_step_loss(&mut t, v, w, &v_ref, &w_ref, 0.07).unwrap();
            t.scalar(l)
        };
        let mut tape = Tape::new();
        let xi = tape.var(raw.clone());
        let v = tape.l2_normalize_last(xi, 1e-12);
        let w = tape.constant(w_ref.clone().into_dyn());
        let l = lwf_step_loss(&mut tape, v, w, &v_ref, &w_ref, 0.07).unwrap();
        let grads = tape.backward(l);
        let g = grads.get(xi).unwrap().clone();
        let mut x = raw.clone();
        for i in 0..x.len() {
            let h = 1e-6;
            let orig = x.as_slice_mut().unwrap()[i];
            x.as_slice_mut().unwrap()[i] = orig + h;
            let fp = f(&x);
            x.as_slice_mut().unwrap()[i] = orig - h;
            let fm = f(&x);
            x.as_slice_mut().unwrap()[i] = orig;
            let num = (fp - fm) / (2.0 * h);
            let ana = g.as_slice().unwrap()[i];
            let denom = ana.abs().max(num.abs()).max(1e-8);
            assert!(
                (ana - num).abs() < 1e-7 || (ana - num).abs() / denom < 1e-5,
                "lwf grad mismatch at {i}"
            );
        }
    }

    #[test]
    fn icarl_distillation_decomposes_over_batch_parts() {
        // CE over the concatenated batch equals the count-weighted mean of
        // the per-part row cross-entropies computed over the full matrix
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mk = |n: usize, rng: &mut ChaCha8Rng| {
            unit_rows(
                (0..n)
                    .map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0) + 1e-3).collect())
                    .collect(),
            )
        };
        let v_new = mk(3, &mut rng);
        let v_buf = mk(2, &mut rng);
        let w_new = mk(3, &mut rng);
        let w_buf = mk(2, &mut rng);
        let vr = mk(5, &mut rng);
        let wr = mk(5, &mut rng);
        let cat = |a: &Array2<f64>, b: &Array2<f64>| {
            ndarray::concatenate(ndarray::Axis(0), &[a.view(), b.view()]).unwrap()
        };
        let v = cat(&v_new, &v_buf);
        let w = cat(&w_new, &w_buf);
        let mut tape = Tape::new();
        let vi = tape.var(v.clone().into_dyn());
        let wi = tape.var(w.clone().into_dyn());
        let combined = lwf_step_loss(&mut tape, vi, wi, &vr, &wr, 0.07).unwrap();
        let combined = tape.scalar(combined);

        // oracle: per-row CE over the full 5x5 similarity distributions
        let tau = 0.07;
        let softmax_rows = |s: Array2<f64>| {
            crate::tensor::softmax_raw(&s.into_dyn())
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap()
        };
        let p_ref_i2t = softmax_rows(vr.dot(&wr.t()).mapv(|x| x / tau));
        let p_ref_t2i = softmax_rows(wr.dot(&vr.t()).mapv(|x| x / tau));
        let lq_i2t = crate::tensor::log_softmax_raw(&v.dot(&w.t()).mapv(|x| x / tau).into_dyn())
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let lq_t2i = crate::tensor::log_softmax_raw(&w.dot(&v.t()).mapv(|x| x / tau).into_dyn())
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let row_ce = |p: &Array2<f64>, lq: &Array2<f64>, row: usize| -> f64 {
            -(0..p.ncols()).map(|j| p[(row, j)] * lq[(row, j)]).sum::<f64>()
        };
        let part = |rows: std::ops::Range<usize>| -> f64 {
            let n = rows.len() as f64;
            let mut acc = 0.0;
            for r in rows {
                acc += 0.5 * (row_ce(&p_ref_i2t, &lq_i2t, r) + row_ce(&p_ref_t2i, &lq_t2i, r));
            }
            acc / n
        };
        let new_part = part(0..3);
        let buf_part = part(3..5);
        let weighted = (3.0 * new_part + 2.0 * buf_part) / 5.0;
        assert!((combined - weighted).abs() < 1e-12);
    }

    #[test]
    fn lucir_orientation_pinned_values_and_stationarity() {
        let v = unit_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        // identical → 0
        let mut tape = Tape::new();
        let vi = tape.var(v.clone().into_dyn());
        let wi = tape.var(v.clone().into_dyn());
        let l = lucir_orientation_loss(&mut tape, vi, wi, &v, &v);
        assert!(tape.scalar(l).abs() < 1e-12);

        // orthogonal → 1
        let v_orth = unit_rows(vec![vec![0.0, 1.0], vec![1.0, 0.0]]);
        let mut tape2 = Tape::new();
        let vi = tape2.var(v.clone().into_dyn());
        let wi = tape2.var(v.clone().into_dyn());
        let l2 = lucir_orientation_loss(&mut tape2, vi, wi, &v_orth, &v_orth);
        assert!((tape2.scalar(l2) - 1.0).abs() < 1e-12);

        // anti-parallel → 2
        let v_neg = v.mapv(|x| -x);
        let mut tape3 = Tape::new();
        let vi = tape3.var(v.clone().into_dyn());
        let wi = tape3.var(v.clone().into_dyn());
        let l3 = lucir_orientation_loss(&mut tape3, vi, wi, &v_neg, &v_neg);
        assert!((tape3.scalar(l3) - 2.0).abs() < 1e-12);

        // gradient through normalization vanishes at equality
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let raw = Arr::from_shape_vec(
            IxDyn(&[2, 3]),
            (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let mut tape4 = Tape::new();
        let xi = tape4.var(raw.clone());
        let vn = tape4.l2_normalize_last(xi, 1e-12);
        let v_ref = {
            let mut t = Tape::new();
            let x = t.var(raw.clone());
            let n = t.l2_normalize_last(x, 1e-12);
            t.value(n)
                .view()
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap()
                .to_owned()
        };
        let l4 = lucir_orientation_loss(&mut tape4, vn, vn, &v_ref, &v_ref);
        let grads = tape4.backward(l4);
        let gmax = grads
            .get(xi)
            .unwrap()
            .iter()
            .fold(0.0f64, |m, x| m.max(x.abs()));
        assert!(gmax < 1e-8, "orientation loss stationary at equality: {gmax}");
    }

    #[test]
    fn vlp_step_produces_finite_grads_for_all_params() {
        let cfg = micro_cfg();
        let state = ModelState::init(cfg.clone(), 12).unwrap();
        let batch = micro_batch(3, 30, &cfg);
        let (losses, grads) = losses::vlp_step(&state, &batch, 0.07).unwrap();
        assert!(losses.ita >= 0.0 && losses.mlm >= 0.0);
        assert!((losses.total - losses.ita - losses.mlm).abs() < 1e-12);
        assert_eq!(grads.len(), state.params.len());
        assert!(grads.values().all(|g| g.iter().all(|x| x.is_finite())));
    }
}
