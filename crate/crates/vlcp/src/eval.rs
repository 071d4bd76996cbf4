//! Cross-modal retrieval (R@K, Rm) and multi-modal retrieval (mAP@N) over
//! galleries that expand as tasks are learned.
//!
//! Ranking is by descending score with ties broken by the lower gallery
//! index, which keeps reports bit-reproducible.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array2, Array4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{forward_eval, ModelState};
use crate::taskstream::{ImageTextPair, TaskStream};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("query {0} has no ground-truth gallery item")]
    MissingGroundTruth(u64),
    #[error("query {0} has no relevant gallery item")]
    NoRelevantItems(u64),
    #[error("N must be >= 1")]
    BadN,
    #[error("empty merged gallery for the learned tasks")]
    EmptyGallery,
    #[error("score matrix is {rows}x{cols} but ids are {q} queries / {g} gallery items")]
    ShapeMismatch {
        rows: usize,
        cols: usize,
        q: usize,
        g: usize,
    },
}

/// Dense query-by-gallery score matrix with identity bookkeeping.
#[derive(Debug, Clone)]
pub struct SimilarityMatrix {
    pub scores: Array2<f64>,
    pub query_ids: Vec<u64>,
    pub gallery_ids: Vec<u64>,
}

impl SimilarityMatrix {
    pub fn new(
        scores: Array2<f64>,
        query_ids: Vec<u64>,
        gallery_ids: Vec<u64>,
    ) -> Result<Self, EvalError> {
        let (rows, cols) = scores.dim();
        if rows != query_ids.len() || cols != gallery_ids.len() {
            return Err(EvalError::ShapeMismatch {
                rows,
                cols,
                q: query_ids.len(),
                g: gallery_ids.len(),
            });
        }
        Ok(Self {
            scores,
            query_ids,
            gallery_ids,
        })
    }

    /// 1-based rank of a gallery column for a query row under descending
    /// score order with ties broken by the lower column index.
    fn rank_of(&self, row: usize, col: usize) -> usize {
        let target = self.scores[(row, col)];
        let mut ahead = 0usize;
        for j in 0..self.scores.ncols() {
            let s = self.scores[(row, j)];
            if s > target || (s == target && j < col) {
                ahead += 1;
            }
        }
        ahead + 1
    }

    /// Gallery column indices of the top-`n` ranked items for a query row.
    fn top_n(&self, row: usize, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.scores.ncols()).collect();
        idx.sort_by(|&a, &b| {
            self.scores[(row, b)]
                .total_cmp(&self.scores[(row, a)])
                .then(a.cmp(&b))
        });
        idx.truncate(n);
        idx
    }
}

/// Recall at each requested cutoff, as percentages.
pub fn recall_at_k(
    sims: &SimilarityMatrix,
    ground_truth: &BTreeMap<u64, u64>,
    ks: &[usize],
) -> Result<BTreeMap<usize, f64>, EvalError> {
    let q = sims.query_ids.len();
    let col_of: BTreeMap<u64, usize> = sims
        .gallery_ids
        .iter()
        .enumerate()
        .map(|(j, id)| (*id, j))
        .collect();
    let mut ranks = Vec::with_capacity(q);
    for (row, qid) in sims.query_ids.iter().enumerate() {
        let truth = ground_truth
            .get(qid)
            .ok_or(EvalError::MissingGroundTruth(*qid))?;
        let col = col_of
            .get(truth)
            .ok_or(EvalError::MissingGroundTruth(*qid))?;
        ranks.push(sims.rank_of(row, *col));
    }
    let mut out = BTreeMap::new();
    for &k in ks {
        let hits = ranks.iter().filter(|&&r| r <= k).count();
        out.insert(k, 100.0 * hits as f64 / q as f64);
    }
    Ok(out)
}

/// Overall cross-modal metric: the mean of the six recall values
/// (text retrieval and image retrieval at K = 1, 5, 10).
pub fn rm(recalls: &[f64; 6]) -> f64 {
    recalls.iter().sum::<f64>() / 6.0
}

/// Mean average precision over the top-`n` retrieved candidates with
/// multi-target relevance. Per query, with `R_q(k)` the number of correct
/// predictions at ranks before `k`, precision is `P_q(k) = (R_q(k)+1)/k`,
/// and `AP_q = (1/m_q) Σ_k P_q(k)·δ_q(k)` where `m_q` counts the query's
/// relevant items inside the top-`n` list (zero hits contribute zero).
pub fn map_at_n(
    sims: &SimilarityMatrix,
    relevance: &BTreeMap<u64, BTreeSet<u64>>,
    n: usize,
) -> Result<f64, EvalError> {
    if n < 1 {
        return Err(EvalError::BadN);
    }
    let gallery_sets: Vec<&u64> = sims.gallery_ids.iter().collect();
    let mut total = 0.0;
    for (row, qid) in sims.query_ids.iter().enumerate() {
        let rel = relevance.get(qid).ok_or(EvalError::NoRelevantItems(*qid))?;
        if !gallery_sets.iter().any(|g| rel.contains(g)) {
            return Err(EvalError::NoRelevantItems(*qid));
        }
        let top = sims.top_n(row, n);
        let mut correct_before = 0usize;
        let mut ap = 0.0;
        let mut hits = 0usize;
        for (pos, &col) in top.iter().enumerate() {
            let k = pos + 1;
            if rel.contains(&sims.gallery_ids[col]) {
                let p = (correct_before + 1) as f64 / k as f64;
                ap += p;
                hits += 1;
                correct_before += 1;
            }
        }
        if hits > 0 {
            total += ap / hits as f64;
        }
    }
    Ok(100.0 * total / sims.query_ids.len() as f64)
}

/// Per-checkpoint retrieval scores, as percentages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub task_index: usize,
    pub tr1: f64,
    pub tr5: f64,
    pub tr10: f64,
    pub ir1: f64,
    pub ir5: f64,
    pub ir10: f64,
    pub rm: f64,
    pub map1: f64,
    pub map5: f64,
    pub map10: f64,
    /// Size of the merged cross-modal test gallery.
    pub gallery_size: usize,
    /// Size of the merged multi-modal gallery.
    pub mm_gallery_size: usize,
    pub mm_query_count: usize,
}

impl RetrievalReport {
    pub fn recalls(&self) -> [f64; 6] {
        [self.tr1, self.tr5, self.tr10, self.ir1, self.ir5, self.ir10]
    }
}

/// Merged evaluation pools plus the similarity matrices for both retrieval
/// modes over the learned tasks.
pub struct EvalGalleries {
    pub cross_i2t: SimilarityMatrix,
    pub cross_t2i: SimilarityMatrix,
    pub cross_truth: BTreeMap<u64, u64>,
    pub mm: SimilarityMatrix,
    pub mm_relevance: BTreeMap<u64, BTreeSet<u64>>,
}

const EVAL_BATCH: usize = 64;
const SELF_SCORE: f64 = -1e30;

fn embed_projections(state: &ModelState, pairs: &[&ImageTextPair]) -> (Array2<f64>, Array2<f64>) {
    let cfg = &state.config;
    let mut v = Array2::<f64>::zeros((pairs.len(), cfg.proj_dim));
    let mut w = Array2::<f64>::zeros((pairs.len(), cfg.proj_dim));
    for (start, chunk) in pairs.chunks(EVAL_BATCH).enumerate().map(|(i, c)| (i * EVAL_BATCH, c)) {
        let (images, tokens, lens) = batch_arrays(chunk, cfg.max_seq_len);
        let out = forward_eval(state, &images, &tokens, &lens);
        for (i, _) in chunk.iter().enumerate() {
            v.row_mut(start + i).assign(&out.v.row(i));
            w.row_mut(start + i).assign(&out.w.row(i));
        }
    }
    (v, w)
}

fn embed_fused(state: &ModelState, pairs: &[&ImageTextPair]) -> Array2<f64> {
    let cfg = &state.config;
    let mut f = Array2::<f64>::zeros((pairs.len(), cfg.embed_dim));
    for (start, chunk) in pairs.chunks(EVAL_BATCH).enumerate().map(|(i, c)| (i * EVAL_BATCH, c)) {
        let (images, tokens, lens) = batch_arrays(chunk, cfg.max_seq_len);
        let out = forward_eval(state, &images, &tokens, &lens);
        for (i, _) in chunk.iter().enumerate() {
            f.row_mut(start + i).assign(&out.fused_cls.row(i));
        }
    }
    // unit-normalize so dot products are cosines
    for mut row in f.rows_mut() {
        let n = row.dot(&row).sqrt();
        if n > 0.0 {
            row.mapv_inplace(|x| x / n);
        }
    }
    f
}

/// Unit-norm fused CLS features of a pair list (used by exemplar selection).
pub fn fused_features(state: &ModelState, pairs: &[&ImageTextPair]) -> Array2<f64> {
    embed_fused(state, pairs)
}

/// Pad a pair slice into model input arrays.
pub fn batch_arrays(
    pairs: &[&ImageTextPair],
    max_seq_len: usize,
) -> (Array4<f64>, Array2<usize>, Vec<usize>) {
    let b = pairs.len();
    let s = pairs[0].image.dim().0;
    let mut images = Array4::<f64>::zeros((b, s, s, 3));
    let mut tokens = Array2::<usize>::zeros((b, max_seq_len));
    let mut lens = Vec::with_capacity(b);
    for (i, p) in pairs.iter().enumerate() {
        for y in 0..s {
            for x in 0..s {
                for c in 0..3 {
                    images[(i, y, x, c)] = p.image[(y, x, c)] as f64;
                }
            }
        }
        for (j, &t) in p.caption.iter().enumerate().take(max_seq_len) {
            tokens[(i, j)] = t;
        }
        lens.push(p.caption.len().min(max_seq_len));
    }
    (images, tokens, lens)
}

/// Build both retrieval problems over the union of the learned tasks'
/// evaluation splits. Cross-modal queries are the merged test pairs (each
/// pair is its own ground truth, both directions); multi-modal queries and
/// gallery come from the merged query/gallery splits, with same-class
/// relevance and the query itself excluded from its candidates.
pub fn build_eval_galleries(
    stream: &TaskStream,
    learned: &[usize],
    state: &ModelState,
) -> Result<EvalGalleries, EvalError> {
    let test_pairs: Vec<&ImageTextPair> = learned
        .iter()
        .flat_map(|&t| stream.tasks[t].test.iter())
        .collect();
    let query_pairs: Vec<&ImageTextPair> = learned
        .iter()
        .flat_map(|&t| stream.tasks[t].query.iter())
        .collect();
    let gallery_pairs: Vec<&ImageTextPair> = learned
        .iter()
        .flat_map(|&t| stream.tasks[t].gallery.iter())
        .collect();
    if test_pairs.is_empty() || gallery_pairs.is_empty() || query_pairs.is_empty() {
        return Err(EvalError::EmptyGallery);
    }

    // cross-modal: image query -> text gallery and the transpose
    let (v, w) = embed_projections(state, &test_pairs);
    let ids: Vec<u64> = test_pairs.iter().map(|p| p.pair_id).collect();
    let s_i2t = v.dot(&w.t());
    let s_t2i = w.dot(&v.t());
    let cross_truth: BTreeMap<u64, u64> = ids.iter().map(|&i| (i, i)).collect();
    let cross_i2t = SimilarityMatrix::new(s_i2t, ids.clone(), ids.clone())?;
    let cross_t2i = SimilarityMatrix::new(s_t2i, ids.clone(), ids.clone())?;

    // multi-modal: fused representations, same-class relevance
    let fq = embed_fused(state, &query_pairs);
    let fg = embed_fused(state, &gallery_pairs);
    let mut mm_scores = fq.dot(&fg.t());
    let q_ids: Vec<u64> = query_pairs.iter().map(|p| p.pair_id).collect();
    let g_ids: Vec<u64> = gallery_pairs.iter().map(|p| p.pair_id).collect();
    for (qi, qp) in query_pairs.iter().enumerate() {
        for (gi, gp) in gallery_pairs.iter().enumerate() {
            if qp.pair_id == gp.pair_id {
                mm_scores[(qi, gi)] = SELF_SCORE;
            }
        }
    }
    let mut mm_relevance: BTreeMap<u64, BTreeSet<u64>> = BTreeMap::new();
    for qp in &query_pairs {
        let rel: BTreeSet<u64> = gallery_pairs
            .iter()
            .filter(|gp| gp.class_id == qp.class_id && gp.pair_id != qp.pair_id)
            .map(|gp| gp.pair_id)
            .collect();
        mm_relevance.insert(qp.pair_id, rel);
    }
    let mm = SimilarityMatrix::new(mm_scores, q_ids, g_ids)?;
    Ok(EvalGalleries {
        cross_i2t,
        cross_t2i,
        cross_truth,
        mm,
        mm_relevance,
    })
}

/// Evaluate a model over the learned tasks and assemble the report.
pub fn evaluate_checkpoint(
    state: &ModelState,
    stream: &TaskStream,
    learned: &[usize],
    task_index: usize,
) -> Result<RetrievalReport, EvalError> {
    let g = build_eval_galleries(stream, learned, state)?;
    let ks = [1usize, 5, 10];
    let tr = recall_at_k(&g.cross_i2t, &g.cross_truth, &ks)?;
    let ir = recall_at_k(&g.cross_t2i, &g.cross_truth, &ks)?;
    let recalls = [tr[&1], tr[&5], tr[&10], ir[&1], ir[&5], ir[&10]];
    Ok(RetrievalReport {
        task_index,
        tr1: recalls[0],
        tr5: recalls[1],
        tr10: recalls[2],
        ir1: recalls[3],
        ir5: recalls[4],
        ir10: recalls[5],
        rm: rm(&recalls),
        map1: map_at_n(&g.mm, &g.mm_relevance, 1)?,
        map5: map_at_n(&g.mm, &g.mm_relevance, 5)?,
        map10: map_at_n(&g.mm, &g.mm_relevance, 10)?,
        gallery_size: g.cross_i2t.gallery_ids.len(),
        mm_gallery_size: g.mm.gallery_ids.len(),
        mm_query_count: g.mm.query_ids.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::taskstream::{generate_task_stream, StreamConfig};
    use proptest::prelude::*;
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;
    use rand_chacha::rand_core::SeedableRng;

    fn ids(n: usize) -> Vec<u64> {
        (0..n as u64).collect()
    }

    fn truth_diag(n: usize) -> BTreeMap<u64, u64> {
        (0..n as u64).map(|i| (i, i)).collect()
    }

    #[test]
    fn identity_similarity_gives_perfect_recall() {
        let n = 12;
        let sims = SimilarityMatrix::new(Array2::eye(n), ids(n), ids(n)).unwrap();
        let r = recall_at_k(&sims, &truth_diag(n), &[1, 5, 10]).unwrap();
        assert_eq!(r[&1], 100.0);
        assert_eq!(r[&5], 100.0);
        assert_eq!(r[&10], 100.0);
    }

    #[test]
    fn constructed_rank_two_matrix() {
        // every truth lands at rank 2
        let mut s = Array2::<f64>::zeros((3, 3));
        for i in 0..3 {
            s[(i, i)] = 0.5;
            s[(i, (i + 1) % 3)] = 0.9;
        }
        let sims = SimilarityMatrix::new(s, ids(3), ids(3)).unwrap();
        let r = recall_at_k(&sims, &truth_diag(3), &[1, 2]).unwrap();
        assert_eq!(r[&1], 0.0);
        assert_eq!(r[&2], 100.0);
    }

    #[test]
    fn ties_break_toward_the_lower_gallery_index() {
        // two gallery items with equal scores: index 0 ranks first
        let s = Array2::from_shape_vec((1, 2), vec![0.7, 0.7]).unwrap();
        let sims = SimilarityMatrix::new(s, vec![0], vec![0, 1]).unwrap();
        let r0 = recall_at_k(&sims, &BTreeMap::from([(0, 0)]), &[1]).unwrap();
        assert_eq!(r0[&1], 100.0);
        let r1 = recall_at_k(&sims, &BTreeMap::from([(0, 1)]), &[1]).unwrap();
        assert_eq!(r1[&1], 0.0);
    }

    #[test]
    fn missing_ground_truth_is_an_error() {
        let sims = SimilarityMatrix::new(Array2::eye(2), ids(2), ids(2)).unwrap();
        let truth: BTreeMap<u64, u64> = BTreeMap::from([(0, 0)]);
        assert!(matches!(
            recall_at_k(&sims, &truth, &[1]),
            Err(EvalError::MissingGroundTruth(1))
        ));
    }

    #[test]
    fn rm_reproduces_reference_rows() {
        // published six-tuples and their reported means
        let joint = [61.31, 87.17, 91.67, 61.60, 86.79, 91.95];
        assert!((rm(&joint) - 80.08).abs() < 0.01);
        let ctp = [43.43, 72.10, 80.08, 43.39, 71.15, 79.06];
        assert!((rm(&ctp) - 64.87).abs() < 0.01);
        assert_eq!(rm(&[0.0; 6]), 0.0);
    }

    #[test]
    fn map_hand_case_one_zero_one() {
        // ranks: relevant, irrelevant, relevant → AP = (1 + 2/3) / 2
        let s = Array2::from_shape_vec((1, 3), vec![0.9, 0.8, 0.7]).unwrap();
        let sims = SimilarityMatrix::new(s, vec![0], vec![10, 11, 12]).unwrap();
        let rel = BTreeMap::from([(0u64, BTreeSet::from([10u64, 12u64]))]);
        let got = map_at_n(&sims, &rel, 3).unwrap();
        assert!((got - 83.33).abs() < 0.01, "{got}");
    }

    #[test]
    fn map_perfect_prefix_and_total_miss() {
        // all m relevant items in the first m ranks → AP = 1
        let s = Array2::from_shape_vec((1, 4), vec![0.9, 0.8, 0.2, 0.1]).unwrap();
        let sims = SimilarityMatrix::new(s, vec![0], vec![1, 2, 3, 4]).unwrap();
        let rel = BTreeMap::from([(0u64, BTreeSet::from([1u64, 2u64]))]);
        assert_eq!(map_at_n(&sims, &rel, 4).unwrap(), 100.0);
        // no relevant item inside the top-N → 0
        let rel_low = BTreeMap::from([(0u64, BTreeSet::from([4u64]))]);
        assert_eq!(map_at_n(&sims, &rel_low, 2).unwrap(), 0.0);
        assert!(matches!(map_at_n(&sims, &rel, 0), Err(EvalError::BadN)));
    }

    #[test]
    fn identity_sims_with_singleton_relevance_yield_perfect_map() {
        let n = 8;
        let mut s = Array2::<f64>::zeros((n, n));
        for i in 0..n {
            s[(i, i)] = 1.0;
        }
        let sims = SimilarityMatrix::new(s, ids(n), (100..100 + n as u64).collect()).unwrap();
        let rel: BTreeMap<u64, BTreeSet<u64>> = (0..n as u64)
            .map(|i| (i, BTreeSet::from([100 + i])))
            .collect();
        for n_at in [1usize, 5, 10] {
            assert_eq!(map_at_n(&sims, &rel, n_at).unwrap(), 100.0);
        }
    }

    // brute-force re-ranking oracle, independent of the library path
    fn oracle_ranking(scores: &Array2<f64>, row: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..scores.ncols()).collect();
        idx.sort_by(|&a, &b| scores[(row, b)].total_cmp(&scores[(row, a)]).then(a.cmp(&b)));
        idx
    }

    fn oracle_recall(scores: &Array2<f64>, k: usize) -> f64 {
        let q = scores.nrows();
        let mut hits = 0;
        for row in 0..q {
            let ranking = oracle_ranking(scores, row);
            if ranking.iter().take(k).any(|&c| c == row % scores.ncols()) {
                hits += 1;
            }
        }
        100.0 * hits as f64 / q as f64
    }

    fn oracle_map(scores: &Array2<f64>, rel: &[BTreeSet<usize>], n: usize) -> f64 {
        let q = scores.nrows();
        let mut total = 0.0;
        for row in 0..q {
            let ranking = oracle_ranking(scores, row);
            let mut correct = 0usize;
            let mut ap = 0.0;
            for (pos, &col) in ranking.iter().take(n).enumerate() {
                if rel[row].contains(&col) {
                    correct += 1;
                    ap += correct as f64 / (pos + 1) as f64;
                }
            }
            if correct > 0 {
                total += ap / correct as f64;
            }
        }
        100.0 * total / q as f64
    }

    #[test]
    fn metrics_agree_with_brute_force_oracle_on_random_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        for trial in 0..50 {
            let (q, g) = (20usize, 50usize);
            let scores = Array2::from_shape_fn((q, g), |_| rng.gen_range(-1.0..1.0));
            let sims =
                SimilarityMatrix::new(scores.clone(), ids(q), (0..g as u64).collect()).unwrap();
            let truth: BTreeMap<u64, u64> = (0..q as u64).map(|i| (i, i % g as u64)).collect();
            let rk = recall_at_k(&sims, &truth, &[1, 5, 10]).unwrap();
            for k in [1usize, 5, 10] {
                let expect = oracle_recall(&scores, k);
                assert_eq!(rk[&k], expect, "trial {trial} recall@{k}");
            }
            // random multi-target relevance (at least one per query)
            let rel_sets: Vec<BTreeSet<usize>> = (0..q)
                .map(|i| {
                    let mut s: BTreeSet<usize> =
                        (0..g).filter(|_| rng.gen_range(0.0..1.0) < 0.1).collect();
                    s.insert((i * 7) % g);
                    s
                })
                .collect();
            let rel: BTreeMap<u64, BTreeSet<u64>> = rel_sets
                .iter()
                .enumerate()
                .map(|(i, s)| (i as u64, s.iter().map(|&c| c as u64).collect()))
                .collect();
            for n in [1usize, 5, 10] {
                let got = map_at_n(&sims, &rel, n).unwrap();
                let expect = oracle_map(&scores, &rel_sets, n);
                assert!((got - expect).abs() < 1e-12, "trial {trial} map@{n}");
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn metrics_are_invariant_to_constant_shifts(seed in 0u64..1000, shift in -5.0f64..5.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (q, g) = (6usize, 15usize);
            let scores = Array2::from_shape_fn((q, g), |_| rng.gen_range(-1.0..1.0));
            let shifted = &scores + shift;
            let sims = SimilarityMatrix::new(scores, ids(q), (0..g as u64).collect()).unwrap();
            let sims2 = SimilarityMatrix::new(shifted, ids(q), (0..g as u64).collect()).unwrap();
            let truth: BTreeMap<u64, u64> = (0..q as u64).map(|i| (i, i)).collect();
            let a = recall_at_k(&sims, &truth, &[1, 5]).unwrap();
            let b = recall_at_k(&sims2, &truth, &[1, 5]).unwrap();
            prop_assert_eq!(a, b);
            let rel: BTreeMap<u64, BTreeSet<u64>> =
                (0..q as u64).map(|i| (i, BTreeSet::from([i, i + 3]))).collect();
            let ma = map_at_n(&sims, &rel, 5).unwrap();
            let mb = map_at_n(&sims2, &rel, 5).unwrap();
            prop_assert!((ma - mb).abs() < 1e-12);
        }
    }

    fn micro_setup() -> (TaskStream, ModelState) {
        let scfg = StreamConfig {
            num_tasks: 3,
            classes_per_task: vec![3, 3, 3],
            zipf_exponent: 0.5,
            samples_total: 120,
            image_size: 16,
            vocab_size: 128,
            max_seq_len: 12,
            noise_level: 0.05,
            test_min_train: 5,
            query_rate: 0.05,
            gallery_rate: 0.2,
        };
        let stream = generate_task_stream(&scfg, 21).unwrap();
        let mcfg = ModelConfig {
            image_size: 16,
            patch_size: 8,
            embed_dim: 16,
            proj_dim: 8,
            num_layers_image: 1,
            num_layers_text: 1,
            num_layers_fusion: 1,
            num_heads: 2,
            vocab_size: 128,
            max_seq_len: 12,
            mlp_ratio: 2.0,
            cosine_projection: false,
        };
        let state = ModelState::init(mcfg, 77).unwrap();
        (stream, state)
    }

    #[test]
    fn galleries_cover_exactly_the_learned_tasks_and_grow() {
        let (stream, state) = micro_setup();
        let g0 = build_eval_galleries(&stream, &[0], &state).unwrap();
        assert_eq!(g0.cross_i2t.gallery_ids.len(), stream.tasks[0].test.len());
        assert_eq!(g0.mm.gallery_ids.len(), stream.tasks[0].gallery.len());

        let mut prev = 0;
        for t in 0..3 {
            let learned: Vec<usize> = (0..=t).collect();
            let g = build_eval_galleries(&stream, &learned, &state).unwrap();
            assert!(g.mm.gallery_ids.len() >= prev, "gallery must not shrink");
            prev = g.mm.gallery_ids.len();
        }

        // a class present only in task 2 contributes relevance only once
        // task 2 is learned
        let task2_class = stream.tasks[2].train[0].class_id;
        let g01 = build_eval_galleries(&stream, &[0, 1], &state).unwrap();
        for rel in g01.mm_relevance.values() {
            for pid in rel {
                let in_task2 = stream.tasks[2]
                    .gallery
                    .iter()
                    .any(|p| p.pair_id == *pid && p.class_id == task2_class);
                assert!(!in_task2);
            }
        }
        let g012 = build_eval_galleries(&stream, &[0, 1, 2], &state).unwrap();
        let has_task2_rel = g012
            .mm_relevance
            .iter()
            .any(|(qid, rel)| {
                stream.tasks[2].query.iter().any(|p| p.pair_id == *qid) && !rel.is_empty()
            });
        assert!(has_task2_rel, "task-2 classes must appear once learned");

        let report = evaluate_checkpoint(&state, &stream, &[0, 1, 2], 2).unwrap();
        let mean = rm(&report.recalls());
        assert!((report.rm - mean).abs() < 1e-6);
        for v in [
            report.tr1, report.tr5, report.tr10, report.ir1, report.ir5, report.ir10, report.rm,
            report.map1, report.map5, report.map10,
        ] {
            assert!((0.0..=100.0).contains(&v));
        }
    }
}
