mod common;

use common::{synth_image, synth_model};
use tome_forge::{ModelConfig, RngStream, Tensor, TokenState, Weights};

fn close(a: &[f32], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        let err = (*x as f64 - y).abs();
        assert!(err <= tol * (1.0 + y.abs()), "index {i}: {x} vs {y}");
    }
}

fn ln64(x: &[f32], g: &[f32], b: &[f32]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().map(|v| *v as f64).sum::<f64>() / n;
    let var = x.iter().map(|v| (*v as f64 - mean).powi(2)).sum::<f64>() / n;
    x.iter()
        .zip(g.iter().zip(b))
        .map(|(v, (g, b))| (*v as f64 - mean) / (var + 1e-6).sqrt() * *g as f64 + *b as f64)
        .collect()
}

/// `y = x · wᵀ + b` with `w` stored `[out, in]`.
fn affine64(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    let out = w.shape()[0];
    (0..out)
        .map(|o| x.iter().zip(w.row(o)).map(|(a, c)| a * *c as f64).sum::<f64>() + b.data()[o] as f64)
        .collect()
}

/// Textbook attention, one head and one query at a time.
fn attention64(w: &Weights, block: usize, x: &Tensor, sizes: &[f32], heads: usize, prop: bool) -> Vec<f64> {
    let get = |n: &str| w.get(&format!("blocks.{block}.{n}")).unwrap();
    let (n, d) = (x.rows(), x.last_dim());
    let hd = d / heads;
    let qkv: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let h = ln64(x.row(i), get("ln1.weight").data(), get("ln1.bias").data());
            affine64(&h, get("attn.qkv.weight"), get("attn.qkv.bias"))
        })
        .collect();
    let mut out = Vec::with_capacity(n * d);
    for i in 0..n {
        let mut concat = vec![0.0f64; d];
        for h in 0..heads {
            let q = &qkv[i][h * hd..(h + 1) * hd];
            let logits: Vec<f64> = (0..n)
                .map(|j| {
                    let k = &qkv[j][d + h * hd..d + (h + 1) * hd];
                    let s = q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / (hd as f64).sqrt();
                    if prop {
                        s + (sizes[j] as f64).ln()
                    } else {
                        s
                    }
                })
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..n {
                for c in 0..hd {
                    concat[h * hd + c] += e[j] / z * qkv[j][2 * d + h * hd + c];
                }
            }
        }
        let y = affine64(&concat, get("attn.proj.weight"), get("attn.proj.bias"));
        out.extend(y.iter().zip(x.row(i)).map(|(a, b)| a + *b as f64));
    }
    out
}

#[test]
fn attention_matches_per_head_oracle() {
    let c = ModelConfig::tiny(2, 24, 3, 3, 4);
    let w = Weights::synth(&c, &RngStream::new(5));
    let m = tome_forge::Model::new(c.clone(), &w).unwrap();
    let mut rng = RngStream::new(6);
    let x = rng.gaussian_tensor([7, 24], 1.0);
    let mut state = TokenState::from_patches(x.clone(), None);
    state.sizes = vec![1.0, 2.0, 5.0, 1.0, 3.0, 1.0, 8.0];
    for prop in [false, true] {
        let (out, bundle) = m.attention_block(&state, 1, prop).unwrap();
        close(out.tokens.data(), &attention64(&w, 1, &x, &state.sizes, 3, prop), 1e-4);
        assert_eq!(bundle.x_pre, x);
    }
}

#[test]
fn unfold_matches_direct_indexing() {
    let c = ModelConfig::tiny(1, 8, 2, 3, 4);
    let m = synth_model(&c, 1);
    let img = synth_image(&c, 2);
    let cols = m.unfold_patches(&img).unwrap();
    let (s, p, g) = (12, 4, 3);
    assert_eq!(cols.shape(), &[9, 48]);
    for patch in 0..9 {
        let (py, px) = (patch / g, patch % g);
        let mut k = 0;
        for ch in 0..3 {
            for y in 0..p {
                for x in 0..p {
                    let v = img.data()[(ch * s + py * p + y) * s + px * p + x];
                    assert_eq!(cols.row(patch)[k], v);
                    k += 1;
                }
            }
        }
    }
}

#[test]
fn patch_embedding_is_a_strided_convolution() {
    let c = ModelConfig::tiny(1, 8, 2, 2, 4);
    let w = Weights::synth(&c, &RngStream::new(3));
    let m = tome_forge::Model::new(c.clone(), &w).unwrap();
    let img = synth_image(&c, 4);
    let state = m.patch_embed(&img).unwrap();
    let kernel = w.get("patch_embed.weight").unwrap();
    let pos = w.get("pos_embed").unwrap();
    let s = 8;
    for patch in 0..4 {
        let (py, px) = (patch / 2, patch % 2);
        let expect: Vec<f64> = (0..8)
            .map(|o| {
                let mut acc = 0.0f64;
                for ch in 0..3 {
                    for y in 0..4 {
                        for x in 0..4 {
                            let kv = kernel.data()[((o * 3 + ch) * 4 + y) * 4 + x] as f64;
                            acc += kv * img.data()[(ch * s + py * 4 + y) * s + px * 4 + x] as f64;
                        }
                    }
                }
                acc + pos.data()[(patch + 1) * 8 + o] as f64
            })
            .collect();
        close(state.tokens.row(patch + 1), &expect, 1e-5);
    }
    assert_eq!(state.members[0], Vec::<u32>::new());
    assert_eq!(state.class_index, Some(0));
}

#[test]
fn distilled_model_averages_heads() {
    let mut c = ModelConfig::tiny(1, 8, 2, 2, 4);
    c.distilled = true;
    let m = synth_model(&c, 9);
    let out = m.forward_dense(&synth_image(&c, 1)).unwrap();
    assert_eq!(out.shape(), &[10]);
    let state = m.patch_embed(&synth_image(&c, 1)).unwrap();
    assert_eq!(state.len(), 6);
    assert_eq!(state.dist_index, Some(1));
}
