//! Straight-line f64 reimplementation of the decoder, used as an oracle for
//! the library forward pass and perplexity.

mod common;

use owl_core::eval::perplexity;
use owl_core::model::{forward_logits, Checkpoint, ModelConfig};
use owl_core::numkernel::SeededRng;

type Mat = Vec<Vec<f64>>;

fn load(ckpt: &Checkpoint, name: &str) -> Mat {
    let m = ckpt.tensor(name).unwrap();
    (0..m.rows())
        .map(|r| m.row(r).iter().map(|&v| f64::from(v)).collect())
        .collect()
}

/// `x · wᵀ`.
fn linear(x: &Mat, w: &Mat) -> Mat {
    x.iter()
        .map(|row| w.iter().map(|wr| row.iter().zip(wr).map(|(a, b)| a * b).sum()).collect())
        .collect()
}

fn rms(x: &Mat, g: &[f64], eps: f64) -> Mat {
    x.iter()
        .map(|row| {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            row.iter().zip(g).map(|(v, g)| v * inv * g).collect()
        })
        .collect()
}

fn rope(x: &mut Mat, heads: usize, theta: f64) {
    let hd = x[0].len() / heads;
    for (pos, row) in x.iter_mut().enumerate() {
        for h in 0..heads {
            for i in 0..hd / 2 {
                let angle = pos as f64 / theta.powf(2.0 * i as f64 / hd as f64);
                let (a, b) = (row[h * hd + i], row[h * hd + i + hd / 2]);
                row[h * hd + i] = a * angle.cos() - b * angle.sin();
                row[h * hd + i + hd / 2] = b * angle.cos() + a * angle.sin();
            }
        }
    }
}

fn reference_logits(ckpt: &Checkpoint, tokens: &[u32]) -> Mat {
    let cfg = &ckpt.config;
    let embed = load(ckpt, "embed");
    let mut x: Mat = tokens.iter().map(|&t| embed[t as usize].clone()).collect();
    let hd = cfg.d_model / cfg.n_heads;
    for b in 0..cfg.n_layers {
        let p = |n: &str| format!("blocks.{b}.{n}");
        let h = rms(&x, &load(ckpt, &p("attn_norm"))[0], cfg.rms_eps);
        let mut q = linear(&h, &load(ckpt, &p("attn.q_proj")));
        let mut k = linear(&h, &load(ckpt, &p("attn.k_proj")));
        let v = linear(&h, &load(ckpt, &p("attn.v_proj")));
        rope(&mut q, cfg.n_heads, cfg.rope_theta);
        rope(&mut k, cfg.n_heads, cfg.rope_theta);
        let mut attn = vec![vec![0.0; cfg.d_model]; tokens.len()];
        for head in 0..cfg.n_heads {
            let cols = head * hd..(head + 1) * hd;
            for t in 0..tokens.len() {
                let scores: Vec<f64> = (0..=t)
                    .map(|s| {
                        cols.clone().map(|c| q[t][c] * k[s][c]).sum::<f64>() / (hd as f64).sqrt()
                    })
                    .collect();
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in cols.clone() {
                    attn[t][c] = (0..=t).map(|s| e[s] / z * v[s][c]).sum();
                }
            }
        }
        let o = linear(&attn, &load(ckpt, &p("attn.o_proj")));
        for (xr, or) in x.iter_mut().zip(&o) {
            for (a, b) in xr.iter_mut().zip(or) {
                *a += b;
            }
        }
        let h = rms(&x, &load(ckpt, &p("mlp_norm"))[0], cfg.rms_eps);
        let gate = linear(&h, &load(ckpt, &p("mlp.gate_proj")));
        let up = linear(&h, &load(ckpt, &p("mlp.up_proj")));
        let act: Mat = gate
            .iter()
            .zip(&up)
            .map(|(g, u)| g.iter().zip(u).map(|(g, u)| g / (1.0 + (-g).exp()) * u).collect())
            .collect();
        let down = linear(&act, &load(ckpt, &p("mlp.down_proj")));
        for (xr, dr) in x.iter_mut().zip(&down) {
            for (a, b) in xr.iter_mut().zip(dr) {
                *a += b;
            }
        }
    }
    let h = rms(&x, &load(ckpt, "final_norm")[0], cfg.rms_eps);
    let head = if cfg.tied_embeddings { embed } else { load(ckpt, "lm_head") };
    linear(&h, &head)
}

fn max_rel_gap(ckpt: &Checkpoint, tokens: &[u32]) -> f64 {
    let got = forward_logits(ckpt, tokens).unwrap();
    let want = reference_logits(ckpt, tokens);
    let scale = want.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut gap = 0.0f64;
    for (t, row) in want.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            gap = gap.max((f64::from(got.get(t, c)) - v).abs());
        }
    }
    gap / scale
}

#[test]
fn two_layer_logits_match_reference() {
    let ckpt = common::random_model(ModelConfig::new(24, 2, 3, 40, 50), 11);
    let mut rng = SeededRng::new(12);
    let tokens: Vec<u32> = (0..13).map(|_| rng.below(50) as u32).collect();
    assert!(max_rel_gap(&ckpt, &tokens) < 1e-4);
}

#[test]
fn tied_embeddings_match_reference() {
    let mut cfg = ModelConfig::new(16, 2, 2, 24, 30);
    cfg.tied_embeddings = true;
    let ckpt = common::random_model(cfg, 13);
    let tokens = [3, 1, 4, 1, 5, 9, 2, 6];
    assert!(max_rel_gap(&ckpt, &tokens) < 1e-4);
}

#[test]
fn causal_prefix_is_unchanged_by_later_tokens() {
    let ckpt = common::random_model(common::tiny_config(), 14);
    let a = forward_logits(&ckpt, &[1, 2, 3, 4, 5, 6]).unwrap();
    let b = forward_logits(&ckpt, &[1, 2, 3, 40, 5, 6]).unwrap();
    for t in 0..3 {
        assert_eq!(a.row(t), b.row(t));
    }
    assert_ne!(a.row(3), b.row(3));
}

#[test]
fn perplexity_matches_reference_loop() {
    let ckpt = common::random_model(common::tiny_config(), 15);
    let mut rng = SeededRng::new(16);
    let seq = 12;
    let tokens: Vec<u32> = (0..10 * seq + 5).map(|_| rng.below(48) as u32).collect();
    let mut nll = 0.0;
    let mut count = 0;
    for w in tokens.chunks_exact(seq) {
        let logits = reference_logits(&ckpt, w);
        for t in 1..seq {
            let row = &logits[t - 1];
            let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
            nll += lse - row[w[t] as usize];
            count += 1;
        }
    }
    let want = (nll / count as f64).exp();
    let got = perplexity(&ckpt, &tokens, seq).unwrap();
    assert!((got - want).abs() / want < 1e-4, "{got} vs {want}");
}
