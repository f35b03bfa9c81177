use serde::{Deserialize, Serialize};

use super::{ModelConfig, TokenState, Weights};
use crate::error::{Error, Result};
use crate::lgtm::{local_merge_step, LayerPlan, MergeSchedule, Reduction};
use crate::merge::{self, extract_metric, MetricBundle, SimilarityMetric};
use crate::metrics::{layer_cossim, LayerMetrics};
use crate::tensor::{self, gelu_in_place, layer_norm, linear, matmul, Tensor};

pub const LN_EPS: f32 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForwardOptions {
    /// Add `ln(size)` of each key to its attention logits.
    pub prop_attn: bool,
    pub metric: SimilarityMetric,
    pub reduction: Reduction,
    /// Seed of the `Random` metric.
    pub seed: u64,
    /// Compute the per-layer CosSim probes.
    pub diagnostics: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self {
            prop_attn: true,
            metric: SimilarityMetric::K,
            reduction: Reduction::Merge,
            seed: 0,
            diagnostics: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Tensor,
    pub layers: Vec<LayerMetrics>,
    pub state: TokenState,
}

impl ForwardOutput {
    /// Token count entering block 0 followed by the count after each block.
    pub fn token_trace(&self, initial: usize) -> Vec<usize> {
        std::iter::once(initial).chain(self.layers.iter().map(|l| l.tokens)).collect()
    }
}

#[derive(Clone, Debug)]
struct Block {
    ln1: (Vec<f32>, Vec<f32>),
    qkv: (Tensor, Vec<f32>),
    proj: (Tensor, Vec<f32>),
    ln2: (Vec<f32>, Vec<f32>),
    fc1: (Tensor, Vec<f32>),
    fc2: (Tensor, Vec<f32>),
}

/// A ViT/DeiT classifier with weights laid out for inference. Immutable and
/// shareable across threads.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    patch_w: Tensor,
    patch_b: Vec<f32>,
    pos_embed: Tensor,
    cls_token: Option<Vec<f32>>,
    dist_token: Option<Vec<f32>>,
    blocks: Vec<Block>,
    norm: (Vec<f32>, Vec<f32>),
    head: (Tensor, Vec<f32>),
    head_dist: Option<(Tensor, Vec<f32>)>,
}

/// `[out, in]` weight to `[in, out]`.
fn linear_weight(w: &Weights, name: &str) -> Result<(Tensor, Vec<f32>)> {
    Ok((
        w.get(&format!("{name}.weight"))?.transpose2d()?,
        w.get(&format!("{name}.bias"))?.data().to_vec(),
    ))
}

fn norm_weight(w: &Weights, name: &str) -> Result<(Vec<f32>, Vec<f32>)> {
    Ok((
        w.get(&format!("{name}.weight"))?.data().to_vec(),
        w.get(&format!("{name}.bias"))?.data().to_vec(),
    ))
}

impl Model {
    pub fn new(config: ModelConfig, weights: &Weights) -> Result<Self> {
        config.validate()?;
        weights.validate(&config)?;
        let d = config.embed_dim;
        let patch_w = weights.get("patch_embed.weight")?.clone();
        let cols = patch_w.numel() / d;
        let patch_w = patch_w.reshape([d, cols])?.transpose2d()?;
        let pos = weights.get("pos_embed")?.clone();
        let blocks = (0..config.depth)
            .map(|i| {
                let b = format!("blocks.{i}");
                Ok(Block {
                    ln1: norm_weight(weights, &format!("{b}.ln1"))?,
                    qkv: linear_weight(weights, &format!("{b}.attn.qkv"))?,
                    proj: linear_weight(weights, &format!("{b}.attn.proj"))?,
                    ln2: norm_weight(weights, &format!("{b}.ln2"))?,
                    fc1: linear_weight(weights, &format!("{b}.mlp.fc1"))?,
                    fc2: linear_weight(weights, &format!("{b}.mlp.fc2"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            patch_b: weights.get("patch_embed.bias")?.data().to_vec(),
            pos_embed: pos.reshape([config.num_tokens(), d])?,
            cls_token: config
                .has_class_token
                .then(|| weights.get("cls_token").map(|t| t.data().to_vec()))
                .transpose()?,
            dist_token: config
                .distilled
                .then(|| weights.get("dist_token").map(|t| t.data().to_vec()))
                .transpose()?,
            head_dist: config
                .distilled
                .then(|| linear_weight(weights, "head_dist"))
                .transpose()?,
            norm: norm_weight(weights, "norm")?,
            head: linear_weight(weights, "head")?,
            patch_w,
            blocks,
            config,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Unfolds `[3, H, W]` into `[num_patches, 3·p·p]`, patches row-major and
    /// each patch flattened channel, row, column.
    pub fn unfold_patches(&self, image: &Tensor) -> Result<Tensor> {
        let s = self.config.image_size;
        if image.shape() != [3, s, s] {
            return Err(Error::Image(format!(
                "expected a [3, {s}, {s}] image, got {:?}",
                image.shape()
            )));
        }
        let p = self.config.patch_size;
        let g = self.config.grid_side();
        let k = 3 * p * p;
        let mut cols = Tensor::zeros([g * g, k]);
        let px = image.data();
        for gy in 0..g {
            for gx in 0..g {
                let row = cols.row_mut(gy * g + gx);
                for c in 0..3 {
                    for y in 0..p {
                        let src = c * s * s + (gy * p + y) * s + gx * p;
                        row[(c * p + y) * p..(c * p + y + 1) * p].copy_from_slice(&px[src..src + p]);
                    }
                }
            }
        }
        Ok(cols)
    }

    /// Projects patches, prepends class/distillation tokens and adds
    /// positional embeddings.
    pub fn patch_embed(&self, image: &Tensor) -> Result<TokenState> {
        let mut patches = linear(&self.unfold_patches(image)?, &self.patch_w, &self.patch_b)?;
        let prefix = self.config.num_prefix_tokens();
        let n = self.config.num_patches();
        let d = self.config.embed_dim;
        let mut rows = Vec::with_capacity((n + prefix) * d);
        for t in self.cls_token.iter().chain(self.dist_token.iter()) {
            rows.extend_from_slice(t);
        }
        rows.extend_from_slice(patches.data());
        patches = Tensor::new([n + prefix, d], rows)?;
        patches.add_assign(&self.pos_embed)?;

        let g = self.config.grid_side();
        let mut state = TokenState::from_patches(patches, Some((g, g)));
        state.num_patches = n;
        state.members = (0..prefix)
            .map(|_| Vec::new())
            .chain((0..n as u32).map(|i| vec![i]))
            .collect();
        state.loc_ids = (0..prefix)
            .map(|i| -1.0 - i as f32)
            .chain((0..n).map(|i| i as f32))
            .collect();
        state.class_index = self.config.has_class_token.then_some(0);
        state.dist_index = self.config.distilled.then_some(1);
        Ok(state)
    }

    /// Pre-norm multi-head self-attention with residual. Returns the updated
    /// state and the features the merger may score.
    pub fn attention_block(&self, state: &TokenState, block: usize, prop_attn: bool) -> Result<(TokenState, MetricBundle)> {
        let b = self.block(block)?;
        let x = &state.tokens;
        let n = x.rows();
        let d = self.config.embed_dim;
        let heads = self.config.heads;
        let hd = d / heads;
        let scale = (hd as f32).powf(-0.5);

        let h = layer_norm(x, &b.ln1.0, &b.ln1.1, LN_EPS)?;
        let qkv = linear(&h, &b.qkv.0, &b.qkv.1)?;
        let q = qkv.columns(0, d);
        let k = qkv.columns(d, d);
        let v = qkv.columns(2 * d, d);
        let log_sizes: Option<Vec<f32>> = prop_attn.then(|| state.sizes.iter().map(|s| s.ln()).collect());

        let mut x_attn = Tensor::zeros([n, d]);
        for head in 0..heads {
            let qh = q.columns(head * hd, hd);
            let kh_t = k.columns(head * hd, hd).transpose2d()?;
            let vh = v.columns(head * hd, hd);
            let mut logits = matmul(&qh, &kh_t)?;
            logits.scale(scale);
            if let Some(bias) = &log_sizes {
                logits.add_row_bias(bias)?;
            }
            tensor::softmax_rows_in_place(logits.data_mut(), n);
            let out = matmul(&logits, &vh)?;
            for i in 0..n {
                x_attn.row_mut(i)[head * hd..(head + 1) * hd].copy_from_slice(out.row(i));
            }
        }
        let mut y = linear(&x_attn, &b.proj.0, &b.proj.1)?;
        y.add_assign(x)?;

        let mut next = state.clone();
        next.tokens = y;
        Ok((
            next,
            MetricBundle {
                x_pre: x.clone(),
                x_attn,
                q,
                k,
                v,
                heads,
            },
        ))
    }

    /// Pre-norm MLP with residual.
    pub fn mlp_block(&self, tokens: &Tensor, block: usize) -> Result<Tensor> {
        let b = self.block(block)?;
        let h = layer_norm(tokens, &b.ln2.0, &b.ln2.1, LN_EPS)?;
        let mut h = linear(&h, &b.fc1.0, &b.fc1.1)?;
        gelu_in_place(&mut h);
        let mut y = linear(&h, &b.fc2.0, &b.fc2.1)?;
        y.add_assign(tokens)?;
        Ok(y)
    }

    /// Final norm and classifier. Reads the class token (averaged with the
    /// distillation head when present) or, without a class token, the
    /// size-weighted mean of all tokens.
    pub fn classify(&self, state: &TokenState) -> Result<Tensor> {
        let x = layer_norm(&state.tokens, &self.norm.0, &self.norm.1, LN_EPS)?;
        let pooled = |idx: Option<usize>, what: &str| -> Result<Tensor> {
            let i = idx.ok_or_else(|| Error::Contract(format!("{what} token was lost")))?;
            Ok(x.gather_rows(&[i]))
        };
        if self.config.has_class_token {
            let mut logits = linear(&pooled(state.class_index, "class")?, &self.head.0, &self.head.1)?;
            if let Some((w, b)) = &self.head_dist {
                let dist = linear(&pooled(state.dist_index, "distillation")?, w, b)?;
                for (l, d) in logits.data_mut().iter_mut().zip(dist.data()) {
                    *l = (*l + d) / 2.0;
                }
            }
            return logits.reshape([self.config.num_classes]);
        }
        let total: f32 = state.sizes.iter().sum();
        let mut mean = Tensor::zeros([1, self.config.embed_dim]);
        for i in 0..x.rows() {
            for (m, v) in mean.data_mut().iter_mut().zip(x.row(i)) {
                *m += state.sizes[i] * v / total;
            }
        }
        linear(&mean, &self.head.0, &self.head.1)?.reshape([self.config.num_classes])
    }

    /// Plain forward pass with no reduction hooks.
    pub fn forward_dense(&self, image: &Tensor) -> Result<Tensor> {
        let mut state = self.patch_embed(image)?;
        for i in 0..self.config.depth {
            let (next, _) = self.attention_block(&state, i, false)?;
            state.tokens = self.mlp_block(&next.tokens, i)?;
        }
        self.classify(&state)
    }

    /// Forward pass with the reduction step of `schedule[i]` applied between
    /// the attention and MLP halves of block `i`.
    pub fn forward(&self, image: &Tensor, schedule: &MergeSchedule, options: &ForwardOptions) -> Result<ForwardOutput> {
        self.forward_observed(image, schedule, options, &mut |_, _| {})
    }

    /// [`Model::forward`] that also hands `observe` the state leaving every
    /// block, in order.
    pub fn forward_observed(
        &self,
        image: &Tensor,
        schedule: &MergeSchedule,
        options: &ForwardOptions,
        observe: &mut dyn FnMut(usize, &TokenState),
    ) -> Result<ForwardOutput> {
        if schedule.len() != self.config.depth {
            return Err(Error::ScheduleLength {
                found: schedule.len(),
                depth: self.config.depth,
            });
        }
        let mut state = self.patch_embed(image)?;
        let mut layers = Vec::with_capacity(self.config.depth);
        for (i, plan) in schedule.plans.iter().enumerate() {
            let tokens_in = state.len();
            let (attended, bundle) = self.attention_block(&state, i, options.prop_attn)?;
            let mut record = LayerMetrics {
                layer: i,
                plan: *plan,
                tokens_in,
                tokens: tokens_in,
                merges: 0,
                cossim_pre: None,
                cossim_attn: None,
                cossim_post: None,
                merged_pair_similarity: None,
            };
            if options.diagnostics {
                record.cossim_pre = layer_cossim(&bundle.x_pre);
                record.cossim_attn = layer_cossim(&bundle.x_attn);
                record.cossim_post = layer_cossim(&attended.tokens);
            }
            let reduced = match *plan {
                LayerPlan::Skip => attended,
                LayerPlan::Global { r } => {
                    let metric = extract_metric(&bundle, options.metric, options.seed, i);
                    match options.reduction {
                        Reduction::Merge => {
                            let m = merge::bipartite_soft_match(&metric, r, &attended.protected_mask())?;
                            record.merged_pair_similarity = merge::merged_pair_similarity(&m);
                            merge::apply_merge(&attended, &m)?
                        }
                        Reduction::Drop => merge::drop_by_norm(&attended, &metric, r)?.0,
                    }
                }
                LayerPlan::Local { window, r_total } => {
                    if attended.grid.is_none() {
                        return Err(Error::Contract(format!(
                            "layer {i}: local merging needs a grid placement"
                        )));
                    }
                    let metric = extract_metric(&bundle, options.metric, options.seed, i);
                    let step = local_merge_step(&attended, &metric, window, r_total, options.reduction)?;
                    record.merged_pair_similarity = merge::mean_score(step.edge_scores.iter().copied());
                    step.state
                }
            };
            record.tokens = reduced.len();
            record.merges = tokens_in - reduced.len();
            state = reduced;
            state.tokens = self.mlp_block(&state.tokens, i)?;
            observe(i, &state);
            layers.push(record);
        }
        let logits = self.classify(&state)?;
        Ok(ForwardOutput { logits, layers, state })
    }

    fn block(&self, i: usize) -> Result<&Block> {
        self.blocks
            .get(i)
            .ok_or_else(|| Error::Contract(format!("block {i} out of range for depth {}", self.config.depth)))
    }
}
