//! Per-layer diagnostics, the analytic cost model and the throughput harness.

use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::lgtm::{LayerPlan, MergeSchedule};
use crate::model::{ForwardOptions, Model, ModelConfig};
use crate::tensor::{l2_norm, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerMetrics {
    pub layer: usize,
    pub plan: LayerPlan,
    pub tokens_in: usize,
    /// Tokens leaving the block.
    pub tokens: usize,
    /// Tokens removed by this block's reduction step.
    pub merges: usize,
    pub cossim_pre: Option<f32>,
    pub cossim_attn: Option<f32>,
    pub cossim_post: Option<f32>,
    pub merged_pair_similarity: Option<f32>,
}

/// Mean cosine similarity over all ordered pairs of distinct rows.
///
/// Uses the Gram identity `Σ_{i≠j} uᵢ·uⱼ = ‖Σ uᵢ‖² − Σ ‖uᵢ‖²` on unit rows,
/// accumulated in `f64`. `None` for fewer than two rows.
pub fn layer_cossim(tokens: &Tensor) -> Option<f32> {
    let n = tokens.rows();
    if n < 2 {
        return None;
    }
    let c = tokens.last_dim();
    let mut sum = vec![0.0f64; c];
    let mut diag = 0.0f64;
    for i in 0..n {
        let row = tokens.row(i);
        let norm = (l2_norm(row) as f64).max(1e-12);
        let mut sq = 0.0;
        for (s, v) in sum.iter_mut().zip(row) {
            let u = *v as f64 / norm;
            *s += u;
            sq += u * u;
        }
        diag += sq;
    }
    let total: f64 = sum.iter().map(|s| s * s).sum();
    let pairs = (n * (n - 1)) as f64;
    Some(((total - diag) / pairs).clamp(-1.0, 1.0) as f32)
}

/// Multiply-accumulate counts of one block.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct BlockMacs {
    pub tokens_in: usize,
    pub tokens_out: usize,
    pub qkv: u64,
    pub logits: u64,
    pub attn_v: u64,
    pub proj: u64,
    pub mlp: u64,
}

impl BlockMacs {
    pub fn total(&self) -> u64 {
        self.qkv + self.logits + self.attn_v + self.proj + self.mlp
    }
}

/// Analytic cost of one forward pass. Attention runs on the tokens
/// entering a block and the MLP on the tokens left after its reduction.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FlopReport {
    pub token_trace: Vec<usize>,
    pub patch_embed: u64,
    pub blocks: Vec<BlockMacs>,
    pub head: u64,
    pub total_macs: u64,
    /// Elementwise work outside the headline number: norms, softmax, GELU.
    pub non_mac_ops: u64,
}

impl FlopReport {
    pub fn gmacs(&self) -> f64 {
        self.total_macs as f64 / 1e9
    }

    /// Two FLOPs per MAC.
    pub fn gflops(&self) -> f64 {
        2.0 * self.gmacs()
    }
}

/// Cost model for `config` under a token trace. The trace holds either one
/// count per block (tokens after each block) or, with a leading entry, the
/// embedded sequence length followed by those counts.
pub fn flop_count(config: &ModelConfig, token_trace: &[usize]) -> Result<FlopReport> {
    let trace: Vec<usize> = if token_trace.len() == config.depth + 1 {
        token_trace.to_vec()
    } else if token_trace.len() == config.depth {
        std::iter::once(config.num_tokens()).chain(token_trace.iter().copied()).collect()
    } else {
        return Err(Error::Contract(format!(
            "token trace has {} entries for depth {}",
            token_trace.len(),
            config.depth
        )));
    };
    let c = config.embed_dim as u64;
    let hidden = config.mlp_hidden() as u64;
    let heads = config.heads as u64;
    let p = config.patch_size as u64;

    let patch_embed = config.num_patches() as u64 * 3 * p * p * c;
    let heads_out = if config.distilled { 2 } else { 1 };
    let head = heads_out * c * config.num_classes as u64;
    let mut non_mac = 0u64;
    let blocks: Vec<BlockMacs> = trace
        .windows(2)
        .map(|w| {
            let (n_in, n_out) = (w[0] as u64, w[1] as u64);
            non_mac += n_in * c + heads * n_in * n_in + n_out * c + n_out * hidden;
            BlockMacs {
                tokens_in: w[0],
                tokens_out: w[1],
                qkv: 3 * n_in * c * c,
                logits: n_in * n_in * c,
                attn_v: n_in * n_in * c,
                proj: n_in * c * c,
                mlp: 2 * n_out * c * hidden,
            }
        })
        .collect();
    non_mac += trace.last().copied().unwrap_or(0) as u64 * c;
    let total_macs = patch_embed + head + blocks.iter().map(BlockMacs::total).sum::<u64>();
    Ok(FlopReport {
        token_trace: trace,
        patch_embed,
        blocks,
        head,
        total_macs,
        non_mac_ops: non_mac,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchReport {
    pub batch: usize,
    pub runs: usize,
    pub warmup: usize,
    pub imgs_per_sec: f64,
    /// Sample standard deviation over runs; 0 for a single run.
    pub imgs_per_sec_std: f64,
    pub run_seconds: Vec<f64>,
    pub token_trace: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BenchSettings {
    pub runs: usize,
    pub warmup: usize,
    /// Worker threads for the batch; `None` uses the global pool.
    pub threads: Option<usize>,
}

impl Default for BenchSettings {
    fn default() -> Self {
        Self {
            runs: 50,
            warmup: 5,
            threads: None,
        }
    }
}

/// Times `runs` forward passes over `batch` after `warmup` untimed passes.
/// Examples of a batch run in parallel; the process should be otherwise idle.
pub fn throughput_bench(
    model: &Model,
    schedule: &MergeSchedule,
    options: &ForwardOptions,
    batch: &[Tensor],
    settings: BenchSettings,
) -> Result<BenchReport> {
    if settings.runs == 0 {
        return Err(Error::Contract("benchmark needs at least one run".into()));
    }
    if batch.is_empty() {
        return Err(Error::Contract("benchmark needs a non-empty batch".into()));
    }
    let options = ForwardOptions {
        diagnostics: false,
        ..options.clone()
    };
    let pool = {
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(t) = settings.threads {
            b = b.num_threads(t.max(1));
        }
        b.build().map_err(|e| Error::Contract(format!("thread pool: {e}")))?
    };
    let run_once = || -> Result<Vec<usize>> {
        pool.install(|| {
            let traces = batch
                .par_iter()
                .map(|img| {
                    model
                        .forward(img, schedule, &options)
                        .map(|o| o.token_trace(model.config().num_tokens()))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(traces.into_iter().next().unwrap_or_default())
        })
    };

    let mut trace = Vec::new();
    for _ in 0..settings.warmup {
        trace = run_once()?;
    }
    let mut run_seconds = Vec::with_capacity(settings.runs);
    for _ in 0..settings.runs {
        let start = Instant::now();
        trace = run_once()?;
        run_seconds.push(start.elapsed().as_secs_f64());
    }
    let rates: Vec<f64> = run_seconds.iter().map(|s| batch.len() as f64 / s.max(1e-12)).collect();
    let mean = rates.iter().sum::<f64>() / rates.len() as f64;
    let std = if rates.len() > 1 {
        (rates.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (rates.len() - 1) as f64).sqrt()
    } else {
        0.0
    };
    Ok(BenchReport {
        batch: batch.len(),
        runs: settings.runs,
        warmup: settings.warmup,
        imgs_per_sec: mean,
        imgs_per_sec_std: std,
        run_seconds,
        token_trace: trace,
    })
}
