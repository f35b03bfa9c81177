//! Layer scheduling and the windowed (local) merging machinery.
//!
//! A schedule skips reduction in the first `s` blocks, merges inside
//! `w × w` windows of the token grid for the next `t` blocks (growing the
//! window by one each block), and merges globally afterwards.
//!
//! During the local phase the patch tokens sit row-major on a grid. Windows
//! tile the grid from the top-left corner; the grid is padded on the bottom
//! and right up to a multiple of `w`, and padding slots are inert. All
//! windows share the same slot count, so they stack along a leading batch
//! axis and are matched with one batched kernel call.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::merge::{self, alternate_sides, best_edges, lowest_norm_rows, merge_rows, normalize_rows, Edge, MatchResult};
use crate::model::{ModelConfig, TokenState};
use crate::tensor::{bmm, Tensor};

/// Initial local window side.
pub const DEFAULT_WINDOW: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerPlan {
    Skip,
    Local { window: usize, r_total: usize },
    Global { r: usize },
}

impl fmt::Display for LayerPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerPlan::Skip => write!(f, "skip"),
            LayerPlan::Local { window, r_total } => write!(f, "local(w={window},r={r_total})"),
            LayerPlan::Global { r } => write!(f, "global(r={r})"),
        }
    }
}

/// Which stages of the pipeline are active.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScheduleMode {
    /// Global merging in every block.
    Tome,
    /// Dense prefix, then global merging.
    Dfe,
    /// Dense prefix, local merging, then global merging.
    #[default]
    Full,
}

impl fmt::Display for ScheduleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScheduleMode::Tome => "tome",
            ScheduleMode::Dfe => "dfe",
            ScheduleMode::Full => "full",
        })
    }
}

impl FromStr for ScheduleMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "tome" => Ok(ScheduleMode::Tome),
            "dfe" => Ok(ScheduleMode::Dfe),
            "full" | "lgtm" => Ok(ScheduleMode::Full),
            _ => Err(format!("unknown mode `{s}` (expected tome, dfe or full)")),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ScheduleOverrides {
    pub skip: Option<usize>,
    pub window: Option<usize>,
    pub transition: Option<usize>,
    pub mode: ScheduleMode,
    /// Leave the last block unreduced.
    pub no_merge_last: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeSchedule {
    pub plans: Vec<LayerPlan>,
    pub skip: usize,
    pub window: usize,
    pub transition: usize,
    pub r: usize,
    pub mode: ScheduleMode,
}

impl MergeSchedule {
    /// No reduction anywhere.
    pub fn dense(depth: usize) -> Self {
        Self {
            plans: vec![LayerPlan::Skip; depth],
            skip: depth,
            window: DEFAULT_WINDOW,
            transition: 0,
            r: 0,
            mode: ScheduleMode::Full,
        }
    }

    pub fn from_plans(plans: Vec<LayerPlan>) -> Self {
        let skip = plans.iter().take_while(|p| **p == LayerPlan::Skip).count();
        let locals: Vec<usize> = plans
            .iter()
            .filter_map(|p| match p {
                LayerPlan::Local { window, .. } => Some(*window),
                _ => None,
            })
            .collect();
        let r = plans
            .iter()
            .find_map(|p| match p {
                LayerPlan::Local { r_total, .. } => Some(*r_total),
                LayerPlan::Global { r } => Some(*r),
                LayerPlan::Skip => None,
            })
            .unwrap_or(0);
        Self {
            skip,
            window: locals.first().copied().unwrap_or(DEFAULT_WINDOW),
            transition: locals.len(),
            r,
            mode: if locals.is_empty() { ScheduleMode::Dfe } else { ScheduleMode::Full },
            plans,
        }
    }

    pub fn len(&self) -> usize {
        self.plans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.plans.is_empty()
    }

    pub fn is_dense(&self) -> bool {
        self.plans.iter().all(|p| *p == LayerPlan::Skip)
    }
}

pub fn isqrt(n: usize) -> usize {
    let mut x = (n as f64).sqrt() as usize;
    while x * x > n {
        x -= 1;
    }
    while (x + 1) * (x + 1) <= n {
        x += 1;
    }
    x
}

/// Derives the per-block plan for reduction `r`.
///
/// `s = depth / 6`, `w0 = 7`, and `t` is the smallest count with
/// `w0 + t > floor(sqrt(num_patches))`, clamped to the remaining depth. When
/// `w0` exceeds the token grid the local phase is dropped. `r = 0` yields a
/// dense schedule.
pub fn build_schedule(config: &ModelConfig, r: usize, overrides: &ScheduleOverrides) -> MergeSchedule {
    let depth = config.depth;
    let window = overrides.window.unwrap_or(DEFAULT_WINDOW).max(1);
    let skip = overrides
        .skip
        .unwrap_or(match overrides.mode {
            ScheduleMode::Tome => 0,
            _ => depth / 6,
        })
        .min(depth);
    let side = isqrt(config.num_patches());
    let transition = match overrides.mode {
        ScheduleMode::Full if window <= config.grid_side() => overrides
            .transition
            .unwrap_or(side.saturating_sub(window) + 1)
            .min(depth - skip),
        _ => 0,
    };

    let mut plans = Vec::with_capacity(depth);
    for i in 0..depth {
        plans.push(if r == 0 || i < skip {
            LayerPlan::Skip
        } else if i < skip + transition {
            LayerPlan::Local {
                window: window + (i - skip),
                r_total: r,
            }
        } else {
            LayerPlan::Global { r }
        });
    }
    if overrides.no_merge_last {
        if let Some(last) = plans.last_mut() {
            *last = LayerPlan::Skip;
        }
    }
    MergeSchedule {
        plans,
        skip,
        window,
        transition,
        r,
        mode: overrides.mode,
    }
}

/// Geometry of one window partition.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowLayout {
    /// Unpadded grid `(rows, cols)`.
    pub grid: (usize, usize),
    /// Padded grid, a multiple of `window` on both axes.
    pub padded: (usize, usize),
    pub window: usize,
    pub num_windows: usize,
    /// Patch tokens placed on the grid.
    pub count: usize,
    /// Window-major, slot-minor: source token index or `None` for padding.
    pub slots: Vec<Option<usize>>,
    /// Source token index to slot; `None` for held-out protected tokens.
    pub inverse: Vec<Option<usize>>,
}

impl WindowLayout {
    pub fn slots_per_window(&self) -> usize {
        self.window * self.window
    }

    pub fn pad_slots(&self) -> usize {
        self.slots.iter().filter(|s| s.is_none()).count()
    }

    /// Padding mask of window `w`.
    pub fn window_pad(&self, w: usize) -> Vec<bool> {
        let s = self.slots_per_window();
        self.slots[w * s..(w + 1) * s].iter().map(|x| x.is_none()).collect()
    }
}

/// Windows stacked along a leading axis. Rows of window `i` live in
/// `offsets[i]..offsets[i + 1]`; straight after partitioning every window has
/// `w²` rows so `tokens` is viewable as `[num_windows, w², C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowStack {
    pub tokens: Tensor,
    pub metric: Option<Tensor>,
    pub sizes: Vec<f32>,
    pub members: Vec<Vec<u32>>,
    pub loc_ids: Vec<f32>,
    /// Index in the partitioned state of the token a row descends from.
    pub origin: Vec<Option<usize>>,
    pub offsets: Vec<usize>,
    /// Class/distillation tokens kept out of the windows.
    pub held_out: TokenState,
}

impl WindowStack {
    pub fn num_windows(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn window_rows(&self, w: usize) -> std::ops::Range<usize> {
        self.offsets[w]..self.offsets[w + 1]
    }

    pub fn is_pad(&self, row: usize) -> bool {
        self.origin[row].is_none()
    }

    /// Non-padding rows.
    pub fn live_tokens(&self) -> usize {
        self.origin.iter().filter(|o| o.is_some()).count()
    }
}

fn div_ceil(a: usize, b: usize) -> usize {
    a.div_ceil(b)
}

/// Compacted grid for `count` tokens: `ceil(sqrt(count))` columns and as
/// many rows as needed.
pub fn compact_grid(count: usize) -> (usize, usize) {
    if count == 0 {
        return (0, 0);
    }
    let cols = {
        let s = isqrt(count);
        if s * s == count {
            s
        } else {
            s + 1
        }
    };
    (div_ceil(count, cols), cols)
}

fn window_geometry(grid: (usize, usize), window: usize) -> ((usize, usize), usize, usize) {
    let padded = (div_ceil(grid.0, window) * window, div_ceil(grid.1, window) * window);
    let per_row = padded.1 / window;
    (padded, per_row, (padded.0 / window) * per_row)
}

/// Slot table for a grid holding `count` tokens: window-major, slot-minor,
/// each entry the row-major cell index or `None` for padding.
fn slot_cells(grid: (usize, usize), count: usize, window: usize) -> Vec<Option<usize>> {
    let (_, per_row, num_windows) = window_geometry(grid, window);
    let mut slots = Vec::with_capacity(num_windows * window * window);
    for w in 0..num_windows {
        let (wy, wx) = (w / per_row, w % per_row);
        for y in 0..window {
            for x in 0..window {
                let (gy, gx) = (wy * window + y, wx * window + x);
                let cell = gy * grid.1 + gx;
                slots.push((gy < grid.0 && gx < grid.1 && cell < count).then_some(cell));
            }
        }
    }
    slots
}

/// Splits the grid-placed patch tokens of `state` into `w × w` windows.
/// `metric`, when given, is partitioned alongside the tokens.
pub fn partition_windows(
    state: &TokenState,
    metric: Option<&Tensor>,
    window: usize,
) -> Result<(WindowStack, WindowLayout)> {
    let grid = state
        .grid
        .ok_or_else(|| Error::Contract("window partition needs a grid placement".into()))?;
    if window == 0 {
        return Err(Error::Contract("window side must be positive".into()));
    }
    if let Some(m) = metric {
        if m.rows() != state.len() {
            return Err(Error::Contract(format!(
                "metric has {} rows for {} tokens",
                m.rows(),
                state.len()
            )));
        }
    }
    let patches = state.patch_indices();
    let count = patches.len();
    if count > grid.0 * grid.1 {
        return Err(Error::Contract(format!("{count} tokens do not fit grid {grid:?}")));
    }
    let (padded, _, num_windows) = window_geometry(grid, window);
    let slots: Vec<Option<usize>> = slot_cells(grid, count, window)
        .into_iter()
        .map(|cell| cell.map(|c| patches[c]))
        .collect();
    let mut inverse = vec![None; state.len()];
    for (slot, src) in slots.iter().enumerate() {
        if let Some(s) = src {
            inverse[*s] = Some(slot);
        }
    }

    let c = state.dim();
    let total = slots.len();
    let mut tokens = Tensor::zeros([total, c]);
    let mut metric_rows = metric.map(|m| Tensor::zeros([total, m.last_dim()]));
    let mut sizes = vec![0.0; total];
    let mut members = vec![Vec::new(); total];
    let mut loc_ids = vec![f32::INFINITY; total];
    for (slot, src) in slots.iter().enumerate() {
        if let Some(s) = *src {
            tokens.row_mut(slot).copy_from_slice(state.tokens.row(s));
            if let (Some(out), Some(m)) = (metric_rows.as_mut(), metric) {
                out.row_mut(slot).copy_from_slice(m.row(s));
            }
            sizes[slot] = state.sizes[s];
            members[slot] = state.members[s].clone();
            loc_ids[slot] = state.loc_ids[s];
        }
    }
    let held: Vec<usize> = (0..state.len()).filter(|i| state.is_protected(*i)).collect();
    let mut held_out = state.select(&held);
    held_out.grid = None;

    let s = window * window;
    let stack = WindowStack {
        tokens: tokens.reshape([num_windows, s, c])?,
        metric: metric_rows
            .map(|m| {
                let d = m.last_dim();
                m.reshape([num_windows, s, d])
            })
            .transpose()?,
        sizes,
        members,
        loc_ids,
        origin: slots.clone(),
        offsets: (0..=num_windows).map(|i| i * s).collect(),
        held_out,
    };
    let layout = WindowLayout {
        grid,
        padded,
        window,
        num_windows,
        count,
        slots,
        inverse,
    };
    Ok((stack, layout))
}

/// Puts protected tokens first (in current order) and the patch tokens in
/// ascending `(loc_id, key)` order on a row-major grid. The grid is kept when
/// the patch count equals `prev.1`, otherwise compacted.
fn relayout(state: &TokenState, keys: &[usize], prev: ((usize, usize), usize)) -> TokenState {
    let mut patches = state.patch_indices();
    patches.sort_by(|a, b| state.loc_ids[*a].total_cmp(&state.loc_ids[*b]).then(keys[*a].cmp(&keys[*b])));
    let mut order: Vec<usize> = (0..state.len()).filter(|i| state.is_protected(*i)).collect();
    let count = patches.len();
    order.extend(patches);
    let mut out = state.select(&order);
    out.grid = Some(if count == prev.1 { prev.0 } else { compact_grid(count) });
    out
}

/// Reassembles a (possibly merged) window stack into a grid-placed state:
/// padding rows are dropped, held-out tokens go first, and patch tokens are
/// re-laid by ascending location id.
pub fn unpartition_windows(stack: &WindowStack, layout: &WindowLayout) -> Result<TokenState> {
    if stack.num_windows() != layout.num_windows
        || stack.sizes.len() != stack.tokens.rows()
        || stack.origin.len() != stack.tokens.rows()
        || stack.offsets.last() != Some(&stack.tokens.rows())
    {
        return Err(Error::Contract(format!(
            "window stack ({} windows, {} rows) does not match layout ({} windows)",
            stack.num_windows(),
            stack.tokens.rows(),
            layout.num_windows
        )));
    }
    let live: Vec<usize> = (0..stack.tokens.rows()).filter(|r| !stack.is_pad(*r)).collect();
    let held = &stack.held_out;
    let c = stack.tokens.last_dim();
    let n = held.len() + live.len();

    let mut rows = Vec::with_capacity(n * c);
    rows.extend_from_slice(held.tokens.data());
    for &r in &live {
        rows.extend_from_slice(stack.tokens.row(r));
    }
    let mut keys = vec![0usize; held.len()];
    keys.extend(live.iter().map(|r| stack.origin[*r].expect("live row")));
    let joined = TokenState {
        tokens: Tensor::new([n, c], rows)?,
        sizes: held.sizes.iter().copied().chain(live.iter().map(|r| stack.sizes[*r])).collect(),
        members: held
            .members
            .iter()
            .cloned()
            .chain(live.iter().map(|r| stack.members[*r].clone()))
            .collect(),
        loc_ids: held.loc_ids.iter().copied().chain(live.iter().map(|r| stack.loc_ids[*r])).collect(),
        grid: None,
        class_index: held.class_index,
        dist_index: held.dist_index,
        num_patches: held.num_patches,
    };
    Ok(relayout(&joined, &keys, (layout.grid, layout.count)))
}

/// Applies `m` and re-lays the survivors by ascending weighted location id
/// (ties by prior position) onto the compacted grid.
pub fn track_locations(state: &TokenState, m: &MatchResult) -> Result<TokenState> {
    let grid = state
        .grid
        .ok_or_else(|| Error::Contract("location tracking needs a grid placement".into()))?;
    let count = state.len() - state.num_protected();
    let (merged, source) = merge::apply_merge_traced(state, m)?;
    Ok(relayout(&merged, &source, (grid, count)))
}

/// Matches every window of a freshly partitioned stack in one batched pass.
/// Padding slots are forced into 𝔹 and scored `-inf` in both directions.
pub fn match_window_stack(stack: &WindowStack, r_per_window: usize) -> Result<Vec<MatchResult>> {
    let metric = stack
        .metric
        .as_ref()
        .ok_or_else(|| Error::Contract("window stack carries no metric".into()))?;
    let nw = stack.num_windows();
    let s = match metric.shape() {
        [_, s, _] => *s,
        other => return Err(Error::Contract(format!("metric stack has shape {other:?}"))),
    };
    let d = metric.last_dim();
    let even: Vec<usize> = (0..s).step_by(2).collect();
    let odd: Vec<usize> = (1..s).step_by(2).collect();
    let unit = normalize_rows(metric);

    let (sa, sb) = (even.len(), odd.len());
    let mut a = Tensor::zeros([nw, sa, d]);
    let mut b_t = Tensor::zeros([nw, d, sb]);
    for w in 0..nw {
        let base = w * s;
        for (i, slot) in even.iter().enumerate() {
            a.row_mut(w * sa + i).copy_from_slice(unit.row(base + slot));
        }
        let bt = b_t.data_mut();
        for (j, slot) in odd.iter().enumerate() {
            for (k, v) in unit.row(base + slot).iter().enumerate() {
                bt[(w * d + k) * sb + j] = *v;
            }
        }
    }
    let mut scores = bmm(&a, &b_t)?;

    let mut out = Vec::with_capacity(nw);
    for w in 0..nw {
        let base = w * s;
        let pad: Vec<bool> = (0..s).map(|i| stack.is_pad(base + i)).collect();
        let block = &mut scores.data_mut()[w * sa * sb..(w + 1) * sa * sb];
        for (i, a_slot) in even.iter().enumerate() {
            for (j, b_slot) in odd.iter().enumerate() {
                if pad[*a_slot] || pad[*b_slot] {
                    block[i * sb + j] = f32::NEG_INFINITY;
                }
            }
        }
        let assignment = alternate_sides(&pad);
        let edges: Vec<Edge> = if r_per_window == 0 {
            Vec::new()
        } else {
            best_edges(block, &even, &odd, r_per_window)
        };
        out.push(MatchResult {
            r_effective: edges.len(),
            edges,
            assignment,
            requested: r_per_window,
        });
    }
    Ok(out)
}

/// Applies one match per window; window `i` of the result holds the
/// survivors of window `i` in merge order.
pub fn merge_window_stack(stack: &WindowStack, matches: &[MatchResult]) -> Result<WindowStack> {
    if matches.len() != stack.num_windows() {
        return Err(Error::Contract(format!(
            "{} matches for {} windows",
            matches.len(),
            stack.num_windows()
        )));
    }
    let c = stack.tokens.last_dim();
    let flat = stack.tokens.clone().reshape([stack.tokens.rows(), c])?;
    let mut out = WindowStack {
        tokens: Tensor::zeros([0, c]),
        metric: None,
        sizes: Vec::new(),
        members: Vec::new(),
        loc_ids: Vec::new(),
        origin: Vec::new(),
        offsets: vec![0],
        held_out: stack.held_out.clone(),
    };
    let mut rows = Vec::new();
    for (w, m) in matches.iter().enumerate() {
        let range = stack.window_rows(w);
        let window_rows: Vec<usize> = range.clone().collect();
        let merged = merge_rows(
            &flat.gather_rows(&window_rows),
            &stack.sizes[range.clone()],
            &stack.members[range.clone()],
            &stack.loc_ids[range.clone()],
            m,
        )?;
        rows.extend_from_slice(merged.tokens.data());
        out.sizes.extend(merged.sizes);
        out.members.extend(merged.members);
        out.loc_ids.extend(merged.loc_ids);
        out.origin
            .extend(merged.source.iter().map(|i| stack.origin[range.start + i]));
        out.offsets.push(out.sizes.len());
    }
    let n = out.sizes.len();
    out.tokens = Tensor::new([n, c], rows)?;
    Ok(out)
}

/// Removes up to `r_per_window` lowest-norm live rows from every window.
fn drop_window_stack(stack: &WindowStack, r_per_window: usize) -> Result<(WindowStack, usize)> {
    let metric = stack
        .metric
        .as_ref()
        .ok_or_else(|| Error::Contract("window stack carries no metric".into()))?;
    let d = metric.last_dim();
    let metric = metric.clone().reshape([metric.numel() / d.max(1), d])?;
    let mut keep = Vec::new();
    let mut offsets = vec![0];
    let mut dropped_total = 0;
    for w in 0..stack.num_windows() {
        let range = stack.window_rows(w);
        let rows: Vec<usize> = range.clone().collect();
        let pad: Vec<bool> = rows.iter().map(|r| stack.is_pad(*r)).collect();
        let dropped = lowest_norm_rows(&metric.gather_rows(&rows), r_per_window, &pad);
        dropped_total += dropped.len();
        keep.extend(
            (0..rows.len())
                .filter(|i| dropped.binary_search(i).is_err())
                .map(|i| range.start + i),
        );
        offsets.push(keep.len());
    }
    let c = stack.tokens.last_dim();
    let flat = stack.tokens.clone().reshape([stack.tokens.rows(), c])?;
    Ok((
        WindowStack {
            tokens: flat.gather_rows(&keep),
            metric: None,
            sizes: keep.iter().map(|r| stack.sizes[*r]).collect(),
            members: keep.iter().map(|r| stack.members[*r].clone()).collect(),
            loc_ids: keep.iter().map(|r| stack.loc_ids[*r]).collect(),
            origin: keep.iter().map(|r| stack.origin[*r]).collect(),
            offsets,
            held_out: stack.held_out.clone(),
        },
        dropped_total,
    ))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Reduction {
    #[default]
    Merge,
    Drop,
}

impl FromStr for Reduction {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "merge" => Ok(Reduction::Merge),
            "drop" => Ok(Reduction::Drop),
            _ => Err(format!("unknown reduction `{s}` (expected merge or drop)")),
        }
    }
}

impl fmt::Display for Reduction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Reduction::Merge => "merge",
            Reduction::Drop => "drop",
        })
    }
}

#[derive(Clone, Debug)]
pub struct LocalStep {
    pub state: TokenState,
    pub num_windows: usize,
    pub per_window: usize,
    /// Tokens actually removed, summed over windows.
    pub removed: usize,
    /// Scores of every kept edge across windows (merge mode).
    pub edge_scores: Vec<f32>,
}

/// One local reduction: partition into `w × w` windows, remove
/// `ceil(r_total / num_windows)` tokens per window, reassemble.
pub fn local_merge_step(
    state: &TokenState,
    metric: &Tensor,
    window: usize,
    r_total: usize,
    reduction: Reduction,
) -> Result<LocalStep> {
    let (stack, layout) = partition_windows(state, Some(metric), window)?;
    let per_window = div_ceil(r_total, layout.num_windows.max(1));
    let (reduced, removed, edge_scores) = match reduction {
        Reduction::Merge => {
            let matches = match_window_stack(&stack, per_window)?;
            let removed = matches.iter().map(|m| m.r_effective).sum();
            let scores = matches.iter().flat_map(|m| m.scores()).collect();
            (merge_window_stack(&stack, &matches)?, removed, scores)
        }
        Reduction::Drop => {
            let (s, n) = drop_window_stack(&stack, per_window)?;
            (s, n, Vec::new())
        }
    };
    Ok(LocalStep {
        state: unpartition_windows(&reduced, &layout)?,
        num_windows: layout.num_windows,
        per_window,
        removed,
        edge_scores,
    })
}

/// Token counts implied by a schedule from geometry alone: entry `0` is the
/// embedded sequence length and entry `i + 1` the count after block `i`.
pub fn predict_trace(config: &ModelConfig, schedule: &MergeSchedule, reduction: Reduction) -> Result<Vec<usize>> {
    let prefix = config.num_prefix_tokens();
    let mut n = config.num_tokens();
    let mut protected: Vec<usize> = (0..prefix).collect();
    let side = config.grid_side();
    let mut grid = Some((side, side));
    let mut trace = Vec::with_capacity(schedule.len() + 1);
    trace.push(n);
    for (layer, plan) in schedule.plans.iter().enumerate() {
        match *plan {
            LayerPlan::Skip => {}
            LayerPlan::Global { r } => {
                let removed = match reduction {
                    Reduction::Drop => r.min(n - prefix),
                    Reduction::Merge => {
                        let is_prot = |i: usize| protected.binary_search(&i).is_ok();
                        let a: Vec<usize> = (0..n).filter(|i| i % 2 == 0 && !is_prot(*i)).collect();
                        let live_b = (0..n).any(|i| i % 2 == 1 && !is_prot(i));
                        let r_eff = if live_b { r.min(a.len()) } else { 0 };
                        if r_eff > 0 {
                            let b: Vec<usize> = (0..n).filter(|i| i % 2 == 1 || is_prot(*i)).collect();
                            let head = a.len() - r_eff;
                            protected = protected
                                .iter()
                                .map(|p| head + b.binary_search(p).expect("protected in B"))
                                .collect();
                        }
                        r_eff
                    }
                };
                if removed > 0 {
                    grid = None;
                }
                n -= removed;
            }
            LayerPlan::Local { window, r_total } => {
                let g = grid.ok_or_else(|| {
                    Error::Contract(format!("layer {layer}: local plan after the grid was lost"))
                })?;
                let count = n - prefix;
                let slots = slot_cells(g, count, window);
                let s = window * window;
                let num_windows = slots.len() / s;
                let per = div_ceil(r_total, num_windows.max(1));
                let mut removed = 0;
                for win in slots.chunks(s) {
                    let live_a = win.iter().step_by(2).filter(|c| c.is_some()).count();
                    let live_b = win.iter().skip(1).step_by(2).filter(|c| c.is_some()).count();
                    removed += match reduction {
                        Reduction::Merge if live_b > 0 => per.min(live_a),
                        Reduction::Merge => 0,
                        Reduction::Drop => per.min(live_a + live_b),
                    };
                }
                n -= removed;
                protected = (0..prefix).collect();
                grid = Some(if removed == 0 { g } else { compact_grid(n - prefix) });
            }
        }
        trace.push(n);
    }
    Ok(trace)
}
