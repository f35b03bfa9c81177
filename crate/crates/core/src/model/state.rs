use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Token embeddings of one example together with the bookkeeping every
/// reduction step has to carry along.
///
/// Patch tokens own a non-empty `members` set of source patch indices and
/// `sizes[i] == members[i].len()`. The class and distillation tokens own no
/// patches, have size 1 and are never merged or dropped.
///
/// `grid`, when set, places the non-protected tokens row-major (in their
/// current order) on an `(rows, cols)` grid; trailing cells of the last row
/// may be empty after merging.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenState {
    pub tokens: Tensor,
    pub sizes: Vec<f32>,
    pub members: Vec<Vec<u32>>,
    /// Size-weighted mean of the row-major patch ids each token covers.
    pub loc_ids: Vec<f32>,
    pub grid: Option<(usize, usize)>,
    pub class_index: Option<usize>,
    pub dist_index: Option<usize>,
    /// Number of source patches of the example.
    pub num_patches: usize,
}

impl TokenState {
    /// A state with one token per row of `tokens`, none protected, each row
    /// `i` covering patch `i`.
    pub fn from_patches(tokens: Tensor, grid: Option<(usize, usize)>) -> Self {
        let n = tokens.rows();
        Self {
            tokens,
            sizes: vec![1.0; n],
            members: (0..n as u32).map(|i| vec![i]).collect(),
            loc_ids: (0..n).map(|i| i as f32).collect(),
            grid,
            class_index: None,
            dist_index: None,
            num_patches: n,
        }
    }

    pub fn len(&self) -> usize {
        self.sizes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sizes.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.tokens.last_dim()
    }

    pub fn is_protected(&self, i: usize) -> bool {
        self.class_index == Some(i) || self.dist_index == Some(i)
    }

    pub fn protected_mask(&self) -> Vec<bool> {
        (0..self.len()).map(|i| self.is_protected(i)).collect()
    }

    pub fn num_protected(&self) -> usize {
        usize::from(self.class_index.is_some()) + usize::from(self.dist_index.is_some())
    }

    /// Indices of patch tokens in current order.
    pub fn patch_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|i| !self.is_protected(*i)).collect()
    }

    pub fn patch_size_sum(&self) -> f32 {
        self.patch_indices().iter().map(|i| self.sizes[*i]).sum()
    }

    /// Keeps rows `order` (in that order), remapping protected indices.
    pub(crate) fn select(&self, order: &[usize]) -> TokenState {
        let position = |old: Option<usize>| old.and_then(|o| order.iter().position(|i| *i == o));
        TokenState {
            tokens: self.tokens.gather_rows(order),
            sizes: order.iter().map(|i| self.sizes[*i]).collect(),
            members: order.iter().map(|i| self.members[*i].clone()).collect(),
            loc_ids: order.iter().map(|i| self.loc_ids[*i]).collect(),
            grid: self.grid,
            class_index: position(self.class_index),
            dist_index: position(self.dist_index),
            num_patches: self.num_patches,
        }
    }

    /// Structural checks that hold in every mode: parallel vectors agree in
    /// length, sizes match member counts, member sets are disjoint.
    pub fn check_consistency(&self) -> Result<()> {
        let n = self.len();
        if self.tokens.rows() != n || self.members.len() != n || self.loc_ids.len() != n {
            return Err(Error::Contract(format!(
                "token state lengths disagree: tokens {}, sizes {n}, members {}, loc_ids {}",
                self.tokens.rows(),
                self.members.len(),
                self.loc_ids.len()
            )));
        }
        for idx in [self.class_index, self.dist_index].into_iter().flatten() {
            if idx >= n || !self.members[idx].is_empty() {
                return Err(Error::Contract(format!("protected token {idx} is invalid")));
            }
        }
        let mut seen = vec![false; self.num_patches];
        for i in self.patch_indices() {
            if self.sizes[i] != self.members[i].len() as f32 {
                return Err(Error::Contract(format!(
                    "token {i} has size {} but {} members",
                    self.sizes[i],
                    self.members[i].len()
                )));
            }
            for &m in &self.members[i] {
                let slot = seen
                    .get_mut(m as usize)
                    .ok_or_else(|| Error::Contract(format!("member {m} out of range")))?;
                if *slot {
                    return Err(Error::Contract(format!("patch {m} belongs to two tokens")));
                }
                *slot = true;
            }
        }
        if let Some((rows, cols)) = self.grid {
            let count = n - self.num_protected();
            if count > rows * cols {
                return Err(Error::Contract(format!("{count} tokens do not fit grid {rows}x{cols}")));
            }
        }
        Ok(())
    }

    /// Consistency plus exact coverage: the member sets partition every
    /// source patch and the patch sizes sum to the patch count.
    pub fn check_partition(&self) -> Result<()> {
        self.check_consistency()?;
        let covered: usize = self.patch_indices().iter().map(|i| self.members[*i].len()).sum();
        if covered != self.num_patches || self.patch_size_sum() != self.num_patches as f32 {
            return Err(Error::Contract(format!(
                "members cover {covered} of {} patches (size sum {})",
                self.num_patches,
                self.patch_size_sum()
            )));
        }
        Ok(())
    }
}
