//! One reduction step: similarity features, bipartite soft matching, the
//! size-weighted merge, and the drop-by-norm baseline.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TokenState;
use crate::rng::RngStream;
use crate::tensor::{l2_norm, matmul, Tensor};

/// Lower bound on a row norm before normalization.
pub const NORM_EPS: f32 = 1e-12;

/// Feature used to score token similarity (merge) or importance (drop).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SimilarityMetric {
    Random,
    Xpre,
    Xattn,
    #[default]
    K,
    Q,
    V,
}

impl SimilarityMetric {
    pub const ALL: [SimilarityMetric; 6] = [
        SimilarityMetric::Random,
        SimilarityMetric::Xpre,
        SimilarityMetric::Xattn,
        SimilarityMetric::K,
        SimilarityMetric::Q,
        SimilarityMetric::V,
    ];
}

impl fmt::Display for SimilarityMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SimilarityMetric::Random => "random",
            SimilarityMetric::Xpre => "xpre",
            SimilarityMetric::Xattn => "xattn",
            SimilarityMetric::K => "k",
            SimilarityMetric::Q => "q",
            SimilarityMetric::V => "v",
        })
    }
}

impl FromStr for SimilarityMetric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|m| m.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown metric `{s}` (expected random, xpre, xattn, k, q or v)"))
    }
}

/// Intermediate features of one attention block, exposed to the merger.
#[derive(Clone, Debug)]
pub struct MetricBundle {
    /// Block input (residual stream before the first norm).
    pub x_pre: Tensor,
    /// Concatenated per-head attention outputs, before the output projection.
    pub x_attn: Tensor,
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    pub heads: usize,
}

/// Mean over heads of a `[N, heads * d]` matrix, giving `[N, d]`.
pub fn head_average(t: &Tensor, heads: usize) -> Tensor {
    let n = t.rows();
    let d = t.last_dim() / heads;
    let mut out = Tensor::zeros([n, d]);
    for i in 0..n {
        let row = t.row(i);
        let dst = out.row_mut(i);
        for h in 0..heads {
            for (o, v) in dst.iter_mut().zip(&row[h * d..(h + 1) * d]) {
                *o += v;
            }
        }
        for o in dst.iter_mut() {
            *o /= heads as f32;
        }
    }
    out
}

/// Selects the feature matrix the matcher scores. `Random` draws a
/// `[N, C / heads]` Gaussian matrix from a stream keyed by `layer`.
pub fn extract_metric(bundle: &MetricBundle, choice: SimilarityMetric, seed: u64, layer: usize) -> Tensor {
    match choice {
        SimilarityMetric::Xpre => bundle.x_pre.clone(),
        SimilarityMetric::Xattn => bundle.x_attn.clone(),
        SimilarityMetric::K => head_average(&bundle.k, bundle.heads),
        SimilarityMetric::Q => head_average(&bundle.q, bundle.heads),
        SimilarityMetric::V => head_average(&bundle.v, bundle.heads),
        SimilarityMetric::Random => {
            let n = bundle.x_pre.rows();
            let d = bundle.k.last_dim() / bundle.heads;
            RngStream::new(seed)
                .split(&format!("metric.random.{layer}"))
                .gaussian_tensor([n, d], 1.0)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    A,
    B,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub score: f32,
}

/// Kept edges of one matching step, best first.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    pub edges: Vec<Edge>,
    pub assignment: Vec<Side>,
    pub requested: usize,
    pub r_effective: usize,
}

impl MatchResult {
    /// A no-op match over `n` tokens.
    pub fn empty(assignment: Vec<Side>) -> Self {
        Self {
            edges: Vec::new(),
            assignment,
            requested: 0,
            r_effective: 0,
        }
    }

    pub fn scores(&self) -> impl Iterator<Item = f32> + '_ {
        self.edges.iter().map(|e| e.score)
    }
}

/// Rows scaled to unit length; norms are clamped to [`NORM_EPS`].
pub fn normalize_rows(t: &Tensor) -> Tensor {
    let mut out = t.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let norm = l2_norm(row).max(NORM_EPS);
        for v in row.iter_mut() {
            *v /= norm;
        }
    }
    out
}

/// Alternating split: even positions go to 𝔸, odd ones to 𝔹, protected
/// tokens are forced into 𝔹.
pub fn alternate_sides(protected: &[bool]) -> Vec<Side> {
    protected
        .iter()
        .enumerate()
        .map(|(i, p)| if *p || i % 2 == 1 { Side::B } else { Side::A })
        .collect()
}

/// Picks, for every 𝔸 row of `scores`, the best column (first wins on
/// ties) and keeps the `r` best candidates ordered by (score desc, 𝔸 index
/// asc). `scores` is row-major `[a_idx.len(), b_idx.len()]`; entries of
/// `-inf` mark ineligible pairs.
pub(crate) fn best_edges(
    scores: &[f32],
    a_idx: &[usize],
    b_idx: &[usize],
    r: usize,
) -> Vec<Edge> {
    let nb = b_idx.len();
    let mut candidates: Vec<Edge> = Vec::with_capacity(a_idx.len());
    if nb > 0 {
        for (ai, &src) in a_idx.iter().enumerate() {
            let row = &scores[ai * nb..(ai + 1) * nb];
            let mut best = 0;
            for j in 1..nb {
                if row[j] > row[best] {
                    best = j;
                }
            }
            if row[best] > f32::NEG_INFINITY {
                candidates.push(Edge {
                    src,
                    dst: b_idx[best],
                    score: row[best],
                });
            }
        }
    }
    candidates.sort_by(|x, y| y.score.total_cmp(&x.score).then(x.src.cmp(&y.src)));
    candidates.truncate(r);
    candidates
}

/// Bipartite soft matching over the rows of `metric`.
///
/// Protected rows are never a source or a target. If fewer than `r` 𝔸
/// tokens have an eligible partner, `r_effective` records the clamp.
pub fn bipartite_soft_match(metric: &Tensor, r: usize, protected: &[bool]) -> Result<MatchResult> {
    let n = metric.rows();
    if protected.len() != n {
        return Err(Error::Contract(format!(
            "protected mask has {} entries for {n} tokens",
            protected.len()
        )));
    }
    let assignment = alternate_sides(protected);
    if r == 0 {
        return Ok(MatchResult::empty(assignment));
    }
    let a_idx: Vec<usize> = (0..n).filter(|i| assignment[*i] == Side::A).collect();
    let b_idx: Vec<usize> = (0..n)
        .filter(|i| assignment[*i] == Side::B && !protected[*i])
        .collect();
    let unit = normalize_rows(metric);
    let a = unit.gather_rows(&a_idx);
    let b_t = unit.gather_rows(&b_idx).transpose2d()?;
    let scores = matmul(&a, &b_t)?;
    let edges = best_edges(scores.data(), &a_idx, &b_idx, r);
    Ok(MatchResult {
        r_effective: edges.len(),
        edges,
        assignment,
        requested: r,
    })
}

/// Output of a merge over bare rows; `source[j]` is the input row that
/// survivor `j` came from (the destination for merged groups).
pub(crate) struct MergedRows {
    pub tokens: Tensor,
    pub sizes: Vec<f32>,
    pub members: Vec<Vec<u32>>,
    pub loc_ids: Vec<f32>,
    pub source: Vec<usize>,
}

pub(crate) fn merge_rows(
    tokens: &Tensor,
    sizes: &[f32],
    members: &[Vec<u32>],
    loc_ids: &[f32],
    m: &MatchResult,
) -> Result<MergedRows> {
    let n = sizes.len();
    if m.assignment.len() != n {
        return Err(Error::Contract(format!(
            "match covers {} tokens but the state has {n}",
            m.assignment.len()
        )));
    }
    let mut incoming: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut consumed = vec![false; n];
    for e in &m.edges {
        if e.src >= n || e.dst >= n {
            return Err(Error::Contract(format!(
                "edge {} -> {} out of range for {n} tokens",
                e.src, e.dst
            )));
        }
        if m.assignment[e.src] != Side::A || m.assignment[e.dst] != Side::B {
            return Err(Error::Contract(format!("edge {} -> {} crosses sets wrongly", e.src, e.dst)));
        }
        if std::mem::replace(&mut consumed[e.src], true) {
            return Err(Error::Contract(format!("token {} merged twice", e.src)));
        }
        incoming[e.dst].push(e.src);
    }
    if m.edges.is_empty() {
        return Ok(MergedRows {
            tokens: tokens.clone(),
            sizes: sizes.to_vec(),
            members: members.to_vec(),
            loc_ids: loc_ids.to_vec(),
            source: (0..n).collect(),
        });
    }

    let order: Vec<usize> = (0..n)
        .filter(|i| m.assignment[*i] == Side::A && !consumed[*i])
        .chain((0..n).filter(|i| m.assignment[*i] == Side::B))
        .collect();
    let c = tokens.last_dim();
    let mut out = Tensor::zeros([order.len(), c]);
    let mut out_sizes = Vec::with_capacity(order.len());
    let mut out_members = Vec::with_capacity(order.len());
    let mut out_locs = Vec::with_capacity(order.len());
    for (j, &i) in order.iter().enumerate() {
        let srcs = &mut incoming[i];
        if srcs.is_empty() {
            out.row_mut(j).copy_from_slice(tokens.row(i));
            out_sizes.push(sizes[i]);
            out_members.push(members[i].clone());
            out_locs.push(loc_ids[i]);
            continue;
        }
        srcs.sort_unstable();
        let total: f32 = sizes[i] + srcs.iter().map(|s| sizes[*s]).sum::<f32>();
        let row = out.row_mut(j);
        for (o, v) in row.iter_mut().zip(tokens.row(i)) {
            *o = sizes[i] * v;
        }
        let mut loc = sizes[i] * loc_ids[i];
        let mut group = members[i].clone();
        for &s in srcs.iter() {
            for (o, v) in row.iter_mut().zip(tokens.row(s)) {
                *o += sizes[s] * v;
            }
            loc += sizes[s] * loc_ids[s];
            group.extend_from_slice(&members[s]);
        }
        for o in row.iter_mut() {
            *o /= total;
        }
        group.sort_unstable();
        out_sizes.push(total);
        out_members.push(group);
        out_locs.push(loc / total);
    }
    Ok(MergedRows {
        tokens: out,
        sizes: out_sizes,
        members: out_members,
        loc_ids: out_locs,
        source: order,
    })
}

/// Merges every connected group into its size-weighted mean and
/// concatenates the unmerged 𝔸 tokens with 𝔹, both in original order.
/// The grid placement is invalidated when any merge happens.
pub fn apply_merge(state: &TokenState, m: &MatchResult) -> Result<TokenState> {
    apply_merge_traced(state, m).map(|(s, _)| s)
}

pub(crate) fn apply_merge_traced(state: &TokenState, m: &MatchResult) -> Result<(TokenState, Vec<usize>)> {
    for e in &m.edges {
        if state.is_protected(e.src) || state.is_protected(e.dst) {
            return Err(Error::Contract(format!("edge {} -> {} touches a protected token", e.src, e.dst)));
        }
    }
    let rows = merge_rows(&state.tokens, &state.sizes, &state.members, &state.loc_ids, m)?;
    let position = |old: Option<usize>| old.and_then(|o| rows.source.iter().position(|s| *s == o));
    let merged = !m.edges.is_empty();
    let next = TokenState {
        tokens: rows.tokens,
        sizes: rows.sizes,
        members: rows.members,
        loc_ids: rows.loc_ids,
        grid: if merged { None } else { state.grid },
        class_index: position(state.class_index),
        dist_index: position(state.dist_index),
        num_patches: state.num_patches,
    };
    Ok((next, rows.source))
}

/// Mean cosine score of the kept edges; `None` when nothing was merged.
pub fn merged_pair_similarity(m: &MatchResult) -> Option<f32> {
    mean_score(m.scores())
}

pub(crate) fn mean_score(scores: impl Iterator<Item = f32>) -> Option<f32> {
    let (sum, count) = scores.fold((0.0f64, 0usize), |(s, c), v| (s + v as f64, c + 1));
    (count > 0).then(|| (sum / count as f64) as f32)
}

/// Indices of the `r` non-protected rows with the smallest L2 norm, ties
/// broken by lower index, returned in ascending index order.
pub(crate) fn lowest_norm_rows(metric: &Tensor, r: usize, protected: &[bool]) -> Vec<usize> {
    let mut ranked: Vec<(f32, usize)> = (0..metric.rows())
        .filter(|i| !protected[*i])
        .map(|i| (l2_norm(metric.row(i)), i))
        .collect();
    ranked.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
    let mut drop: Vec<usize> = ranked.into_iter().take(r).map(|(_, i)| i).collect();
    drop.sort_unstable();
    drop
}

/// Removes the `r` lowest-norm tokens (by the rows of `metric`). Returns the
/// surviving state and the number actually dropped. Member coverage is not
/// preserved in this mode.
pub fn drop_by_norm(state: &TokenState, metric: &Tensor, r: usize) -> Result<(TokenState, usize)> {
    if metric.rows() != state.len() {
        return Err(Error::Contract(format!(
            "metric has {} rows for {} tokens",
            metric.rows(),
            state.len()
        )));
    }
    let dropped = lowest_norm_rows(metric, r, &state.protected_mask());
    if dropped.is_empty() {
        return Ok((state.clone(), 0));
    }
    let keep: Vec<usize> = (0..state.len()).filter(|i| dropped.binary_search(i).is_err()).collect();
    let mut next = state.select(&keep);
    next.grid = None;
    Ok((next, dropped.len()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state_from(rows: Vec<Vec<f32>>) -> TokenState {
        let c = rows[0].len();
        let n = rows.len();
        let t = Tensor::new([n, c], rows.into_iter().flatten().collect()).unwrap();
        TokenState::from_patches(t, None)
    }

    #[test]
    fn zero_r_is_a_no_op() {
        let m = bipartite_soft_match(&Tensor::from_fn([6, 3], |i| i as f32), 0, &[false; 6]).unwrap();
        assert!(m.edges.is_empty());
        assert_eq!(m.r_effective, 0);
    }

    #[test]
    fn identical_pair_scores_one() {
        let t = Tensor::new([2, 3], vec![1., 2., 3., 1., 2., 3.]).unwrap();
        let m = bipartite_soft_match(&t, 1, &[false, false]).unwrap();
        assert_eq!(m.edges.len(), 1);
        assert_eq!((m.edges[0].src, m.edges[0].dst), (0, 1));
        assert!((m.edges[0].score - 1.0).abs() < 1e-6);
    }

    #[test]
    fn r_is_clamped_to_set_a() {
        let t = Tensor::from_fn([5, 2], |i| (i as f32).sin());
        let m = bipartite_soft_match(&t, 10, &[false; 5]).unwrap();
        assert_eq!(m.r_effective, 3);
        assert_eq!(m.requested, 10);
    }

    #[test]
    fn protected_tokens_are_inert() {
        let t = Tensor::full([4, 2], 1.0);
        let m = bipartite_soft_match(&t, 4, &[true, false, false, false]).unwrap();
        assert_eq!(m.assignment[0], Side::B);
        assert!(m.edges.iter().all(|e| e.src != 0 && e.dst != 0));
        assert_eq!(m.r_effective, 1);
    }

    #[test]
    fn zero_vectors_do_not_produce_nan() {
        let t = Tensor::zeros([4, 3]);
        let m = bipartite_soft_match(&t, 2, &[false; 4]).unwrap();
        assert!(m.scores().all(|s| s == 0.0));
    }

    #[test]
    fn merge_equal_sizes_is_midpoint() {
        let s = state_from(vec![vec![1.0, 3.0], vec![3.0, 5.0]]);
        let m = bipartite_soft_match(&s.tokens, 1, &[false, false]).unwrap();
        let out = apply_merge(&s, &m).unwrap();
        assert_eq!(out.tokens.data(), &[2.0, 4.0]);
        assert_eq!(out.sizes, vec![2.0]);
        assert_eq!(out.members, vec![vec![0, 1]]);
        assert_eq!(out.loc_ids, vec![0.5]);
    }

    #[test]
    fn merge_is_size_weighted() {
        let mut s = state_from(vec![vec![4.0], vec![8.0]]);
        s.sizes = vec![3.0, 1.0];
        s.members = vec![vec![0, 2, 3], vec![1]];
        s.num_patches = 4;
        let m = MatchResult {
            edges: vec![Edge { src: 0, dst: 1, score: 1.0 }],
            assignment: vec![Side::A, Side::B],
            requested: 1,
            r_effective: 1,
        };
        let out = apply_merge(&s, &m).unwrap();
        assert_eq!(out.tokens.data(), &[(3.0 * 4.0 + 8.0) / 4.0]);
        assert_eq!(out.sizes, vec![4.0]);
        out.check_partition().unwrap();
    }

    #[test]
    fn stale_match_is_rejected() {
        let s = state_from(vec![vec![1.0], vec![2.0]]);
        let m = MatchResult {
            edges: vec![Edge { src: 2, dst: 1, score: 1.0 }],
            assignment: vec![Side::A, Side::B, Side::A],
            requested: 1,
            r_effective: 1,
        };
        assert!(matches!(apply_merge(&s, &m), Err(Error::Contract(_))));
    }

    #[test]
    fn order_is_unmerged_a_then_b() {
        let s = state_from(vec![
            vec![1.0, 0.0],
            vec![1.0, 0.01],
            vec![0.0, 1.0],
            vec![-1.0, 0.0],
            vec![0.0, -1.0],
            vec![0.7, 0.7],
        ]);
        let m = bipartite_soft_match(&s.tokens, 1, &[false; 6]).unwrap();
        assert_eq!((m.edges[0].src, m.edges[0].dst), (0, 1));
        let (_, source) = apply_merge_traced(&s, &m).unwrap();
        assert_eq!(source, vec![2, 4, 1, 3, 5]);
    }

    #[test]
    fn merged_pair_similarity_of_identical_tokens() {
        let t = Tensor::full([8, 4], 0.5);
        let m = bipartite_soft_match(&t, 3, &[false; 8]).unwrap();
        assert!((merged_pair_similarity(&m).unwrap() - 1.0).abs() < 1e-6);
        assert_eq!(merged_pair_similarity(&MatchResult::empty(vec![])), None);
    }

    #[test]
    fn drop_removes_smallest_norm() {
        let s = state_from(vec![vec![3.0], vec![1.0], vec![2.0]]);
        let (out, n) = drop_by_norm(&s, &s.tokens, 1).unwrap();
        assert_eq!(n, 1);
        assert_eq!(out.tokens.data(), &[3.0, 2.0]);
        let (same, n) = drop_by_norm(&s, &s.tokens, 0).unwrap();
        assert_eq!((same, n), (s.clone(), 0));
    }

    #[test]
    fn drop_clamps_and_protects() {
        let mut s = state_from(vec![vec![0.0], vec![1.0], vec![2.0]]);
        s.class_index = Some(0);
        s.members[0].clear();
        let (out, n) = drop_by_norm(&s, &s.tokens, 5).unwrap();
        assert_eq!(n, 2);
        assert_eq!(out.len(), 1);
        assert_eq!(out.class_index, Some(0));
    }

    #[test]
    fn head_average_single_head_is_identity() {
        let t = Tensor::from_fn([3, 4], |i| i as f32);
        assert_eq!(head_average(&t, 1), t);
        let avg = head_average(&t, 2);
        assert_eq!(avg.row(0), &[1.0, 2.0]);
    }

    #[test]
    fn metric_parsing_round_trips() {
        for m in SimilarityMetric::ALL {
            assert_eq!(m.to_string().parse::<SimilarityMetric>().unwrap(), m);
        }
        assert!("w".parse::<SimilarityMetric>().is_err());
    }
}
