//! Independent reference implementations shared by the integration tests
//! and the acceptance harness.

#![allow(dead_code)]

use std::collections::BTreeSet;

use tome_forge::lgtm::{partition_windows, LayerPlan};
use tome_forge::merge::{apply_merge, bipartite_soft_match};
use tome_forge::{Model, ModelConfig, RngStream, Tensor, TokenState, Weights};

/// Exhaustive matching: every 𝔸 token scans every 𝔹 token, keeps its
/// first best partner, and the `r` best (score desc, source asc) win.
///
/// Scores are rounded like any straightforward `f32` evaluation (unit rows,
/// then a left-to-right dot product), so duplicated rows tie exactly here
/// as they do in the engine.
pub fn oracle_match(metric: &Tensor, r: usize, protected: &[bool]) -> Vec<(usize, usize)> {
    let n = metric.rows();
    let unit: Vec<Vec<f32>> = (0..n)
        .map(|i| {
            let row = metric.row(i);
            let mut sq = 0.0f32;
            for v in row {
                sq += v * v;
            }
            let norm = sq.sqrt().max(1e-12);
            row.iter().map(|v| v / norm).collect()
        })
        .collect();
    let cos = |i: usize, j: usize| {
        let mut acc = 0.0f32;
        for (a, b) in unit[i].iter().zip(&unit[j]) {
            acc += a * b;
        }
        acc
    };
    let in_a = |i: usize| i % 2 == 0 && !protected[i];
    let in_b = |j: usize| j % 2 == 1 && !protected[j];
    let mut cands: Vec<(f32, usize, usize)> = Vec::new();
    for i in (0..n).filter(|i| in_a(*i)) {
        let mut best: Option<(f32, usize)> = None;
        for j in (0..n).filter(|j| in_b(*j)) {
            let s = cos(i, j);
            if best.map_or(true, |(b, _)| s > b) {
                best = Some((s, j));
            }
        }
        if let Some((s, j)) = best {
            cands.push((s, i, j));
        }
    }
    cands.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
    cands.into_iter().take(r).map(|(_, i, j)| (i, j)).collect()
}

/// Groups of a merge given as member sets, by brute-force union of each
/// source with its destination.
pub fn oracle_groups(members: &[Vec<u32>], edges: &[(usize, usize)]) -> BTreeSet<BTreeSet<u32>> {
    let n = members.len();
    let mut group: Vec<BTreeSet<u32>> = members.iter().map(|m| m.iter().copied().collect()).collect();
    let mut gone = vec![false; n];
    for &(src, dst) in edges {
        let moved = std::mem::take(&mut group[src]);
        group[dst].extend(moved);
        gone[src] = true;
    }
    (0..n).filter(|i| !gone[*i] && !group[*i].is_empty()).map(|i| group[i].clone()).collect()
}

/// Local merging executed one window at a time through the global matcher,
/// then reassembled by (location id, prior index of the surviving row).
pub fn sequential_local_step(state: &TokenState, metric: &Tensor, window: usize, r_total: usize) -> TokenState {
    let (stack, layout) = partition_windows(state, Some(metric), window).unwrap();
    let nw = layout.num_windows;
    let per = r_total.div_ceil(nw);
    let s = window * window;
    let c = state.dim();
    let d = metric.last_dim();
    let flat = stack.tokens.clone().reshape([nw * s, c]).unwrap();
    let flat_metric = stack.metric.clone().unwrap().reshape([nw * s, d]).unwrap();

    // (tokens row, size, members, loc, key)
    let mut survivors: Vec<(Vec<f32>, f32, Vec<u32>, f32, usize)> = Vec::new();
    for w in 0..nw {
        let rows: Vec<usize> = (w * s..(w + 1) * s).collect();
        let pad: Vec<bool> = rows.iter().map(|r| stack.origin[*r].is_none()).collect();
        let win = TokenState {
            tokens: flat.gather_rows(&rows),
            sizes: rows.iter().map(|r| stack.sizes[*r]).collect(),
            members: rows.iter().map(|r| stack.members[*r].clone()).collect(),
            loc_ids: rows.iter().map(|r| stack.loc_ids[*r]).collect(),
            grid: None,
            class_index: None,
            dist_index: None,
            num_patches: state.num_patches,
        };
        let m = bipartite_soft_match(&flat_metric.gather_rows(&rows), per, &pad).unwrap();
        let merged = apply_merge(&win, &m).unwrap();
        let sources: BTreeSet<usize> = m.edges.iter().map(|e| e.src).collect();
        for i in 0..merged.len() {
            let mem: BTreeSet<u32> = merged.members[i].iter().copied().collect();
            if mem.is_empty() {
                continue;
            }
            let slot = (0..s)
                .find(|k| {
                    !pad[*k]
                        && !sources.contains(k)
                        && win.members[*k].iter().all(|p| mem.contains(p))
                })
                .expect("surviving slot");
            survivors.push((
                merged.tokens.row(i).to_vec(),
                merged.sizes[i],
                merged.members[i].clone(),
                merged.loc_ids[i],
                stack.origin[w * s + slot].expect("live slot"),
            ));
        }
    }
    survivors.sort_by(|a, b| a.3.total_cmp(&b.3).then(a.4.cmp(&b.4)));

    let held: Vec<usize> = (0..state.len()).filter(|i| state.is_protected(*i)).collect();
    let count = survivors.len();
    let mut rows: Vec<f32> = Vec::new();
    for &h in &held {
        rows.extend_from_slice(state.tokens.row(h));
    }
    for sv in &survivors {
        rows.extend_from_slice(&sv.0);
    }
    let position = |old: Option<usize>| old.and_then(|o| held.iter().position(|h| *h == o));
    let grid = if count == layout.count {
        layout.grid
    } else {
        let cols = (1..).find(|c| c * c >= count).unwrap();
        (count.div_ceil(cols), cols)
    };
    TokenState {
        tokens: Tensor::new([held.len() + count, c], rows).unwrap(),
        sizes: held.iter().map(|h| state.sizes[*h]).chain(survivors.iter().map(|s| s.1)).collect(),
        members: held
            .iter()
            .map(|h| state.members[*h].clone())
            .chain(survivors.iter().map(|s| s.2.clone()))
            .collect(),
        loc_ids: held.iter().map(|h| state.loc_ids[*h]).chain(survivors.iter().map(|s| s.3)).collect(),
        grid: Some(grid),
        class_index: position(state.class_index),
        dist_index: position(state.dist_index),
        num_patches: state.num_patches,
    }
}

/// Grid state of `rows × cols` patch tokens, optionally behind a class token.
pub fn grid_state(rng: &mut RngStream, rows: usize, cols: usize, c: usize, class_token: bool) -> TokenState {
    let n = rows * cols;
    let mut s = TokenState::from_patches(rng.gaussian_tensor([n, c], 1.0), Some((rows, cols)));
    if class_token {
        let mut data = rng.gaussian_vec(c, 1.0);
        data.extend_from_slice(s.tokens.data());
        s.tokens = Tensor::new([n + 1, c], data).unwrap();
        s.sizes.insert(0, 1.0);
        s.members.insert(0, Vec::new());
        s.loc_ids.insert(0, -1.0);
        s.class_index = Some(0);
    }
    s
}

pub fn synth_model(config: &ModelConfig, seed: u64) -> Model {
    Model::new(config.clone(), &Weights::synth(config, &RngStream::new(seed))).unwrap()
}

pub fn synth_image(config: &ModelConfig, seed: u64) -> Tensor {
    let s = config.image_size;
    RngStream::new(seed).split("image").gaussian_tensor([3, s, s], 1.0)
}

/// Every patch appears in exactly one token and sizes match the counts.
pub fn check_conservation(state: &TokenState) -> Result<(), String> {
    let mut seen = vec![false; state.num_patches];
    for (i, m) in state.members.iter().enumerate() {
        if state.is_protected(i) {
            if !m.is_empty() || state.sizes[i] != 1.0 {
                return Err(format!("protected token {i} changed: size {}, {} members", state.sizes[i], m.len()));
            }
            continue;
        }
        if m.is_empty() || state.sizes[i] != m.len() as f32 {
            return Err(format!("token {i}: size {} for {} members", state.sizes[i], m.len()));
        }
        for &p in m {
            let slot = seen.get_mut(p as usize).ok_or(format!("member {p} out of range"))?;
            if std::mem::replace(slot, true) {
                return Err(format!("patch {p} appears twice"));
            }
        }
    }
    if let Some(p) = seen.iter().position(|s| !s) {
        return Err(format!("patch {p} missing"));
    }
    let total: f32 = state.patch_size_sum();
    if total != state.num_patches as f32 {
        return Err(format!("size sum {total} for {} patches", state.num_patches));
    }
    Ok(())
}

pub fn is_reducing(plan: &LayerPlan) -> bool {
    !matches!(plan, LayerPlan::Skip)
}

/// The CLI's synthetic input `i` when no images are given.
pub fn synth_image_for_cli(config: &ModelConfig, i: usize) -> Tensor {
    let s = config.image_size;
    RngStream::new(0).split(&format!("input.{i}")).gaussian_tensor([3, s, s], 1.0)
}
