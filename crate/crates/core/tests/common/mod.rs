//! Plain-loop oracles written from the layer and model definitions.

#![allow(dead_code)]

use cemoe_core::model::{MixerParams, ModelParams};
use cemoe_core::moe_layer::{ExpertMode, MoeLayerParams};

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// Plain-loop SwiGLU on one row.
pub fn expert_oracle(layer: &MoeLayerParams<f64>, e: usize, h: &[f64]) -> Vec<f64> {
    let p = &layer.experts[e];
    let (d, f) = (p.w_gate.shape()[0], p.w_gate.shape()[1]);
    let mut act = vec![0.0; f];
    for (j, a) in act.iter_mut().enumerate() {
        let g: f64 = (0..d).map(|i| h[i] * p.w_gate.data()[i * f + j]).sum();
        let u: f64 = (0..d).map(|i| h[i] * p.w_up.data()[i * f + j]).sum();
        *a = silu(g) * u;
    }
    (0..d).map(|c| (0..f).map(|j| act[j] * p.w_down.data()[j * d + c]).sum()).collect()
}

/// One token through the layer, written out from the definitions.
pub fn layer_oracle(layer: &MoeLayerParams<f64>, h: &[f64], mode: ExpertMode) -> Vec<f64> {
    let cfg = &layer.cfg;
    let (n, d) = (cfg.n_experts, cfg.hidden_dim);
    let logits: Vec<f64> = (0..n)
        .map(|e| (0..d).map(|i| h[i] * layer.router.weight.data()[i * n + e]).sum())
        .collect();
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let ex: Vec<f64> = logits.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = ex.iter().sum();
    let probs: Vec<f64> = ex.iter().map(|x| x / s).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap());

    let (k_sel, k_eval) = match mode {
        ExpertMode::Full => (cfg.k_active, cfg.k_active),
        ExpertMode::Halved => (cfg.k_main, cfg.k_main),
        ExpertMode::Compressed => (cfg.k_active, cfg.k_main),
    };
    let main = &order[..k_eval];
    let aux = &order[k_eval..k_sel];
    let mut x = h.to_vec();
    let mut main_w: Vec<f64> = main.iter().map(|&e| probs[e]).collect();
    if mode == ExpertMode::Compressed && !aux.is_empty() {
        let s: f64 = aux.iter().map(|&e| probs[e]).sum();
        for (c, xc) in x.iter_mut().enumerate() {
            let theta: f64 = aux.iter().map(|&e| probs[e] / s * layer.bank.thetas.data()[e * d + c]).sum();
            *xc *= theta;
        }
        if cfg.renormalize_main {
            let s: f64 = main_w.iter().sum();
            main_w.iter_mut().for_each(|w| *w /= s);
        }
    }
    let mut y = vec![0.0; d];
    for (&e, &w) in main.iter().zip(&main_w) {
        for (o, v) in y.iter_mut().zip(expert_oracle(layer, e, &x)) {
            *o += w * v;
        }
    }
    y
}


fn rms_norm(x: &[f64]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + 1e-6).sqrt();
    x.iter().map(|v| v * inv).collect()
}

/// Row vector times a row-major `[rows × cols]` matrix.
fn vec_mat(x: &[f64], m: &[f64], cols: usize) -> Vec<f64> {
    (0..cols).map(|j| x.iter().enumerate().map(|(i, v)| v * m[i * cols + j]).sum()).collect()
}

/// Logits `[len][V]` of one sequence, computed position by position.
pub fn model_oracle(p: &ModelParams<f64>, tokens: &[usize], mode: ExpertMode) -> Vec<Vec<f64>> {
    let d = p.cfg.hidden_dim;
    let v = p.cfg.vocab_size;
    let mut x: Vec<Vec<f64>> = tokens
        .iter()
        .enumerate()
        .map(|(t, &tok)| (0..d).map(|c| p.embed.data()[tok * d + c] + p.pos.data()[t * d + c]).collect())
        .collect();
    for block in &p.blocks {
        let h: Vec<Vec<f64>> = x.iter().map(|r| rms_norm(r)).collect();
        let mixed: Vec<Vec<f64>> = match &block.mixer {
            MixerParams::Attention { query, key, value, output } => {
                let q: Vec<_> = h.iter().map(|r| vec_mat(r, query.data(), d)).collect();
                let k: Vec<_> = h.iter().map(|r| vec_mat(r, key.data(), d)).collect();
                let val: Vec<_> = h.iter().map(|r| vec_mat(r, value.data(), d)).collect();
                (0..h.len())
                    .map(|i| {
                        let scores: Vec<f64> = (0..=i)
                            .map(|j| q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt())
                            .collect();
                        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                        let z: f64 = e.iter().sum();
                        let ctx: Vec<f64> =
                            (0..d).map(|c| (0..=i).map(|j| e[j] / z * val[j][c]).sum()).collect();
                        vec_mat(&ctx, output.data(), d)
                    })
                    .collect()
            }
            MixerParams::MeanPool { output } => (0..h.len())
                .map(|i| {
                    let mean: Vec<f64> = (0..d).map(|c| (0..=i).map(|j| h[j][c]).sum::<f64>() / (i + 1) as f64).collect();
                    vec_mat(&mean, output.data(), d)
                })
                .collect(),
        };
        for (r, m) in x.iter_mut().zip(&mixed) {
            r.iter_mut().zip(m).for_each(|(a, b)| *a += b);
        }
        for r in x.iter_mut() {
            let y = layer_oracle(&block.moe, &rms_norm(r), mode);
            r.iter_mut().zip(&y).for_each(|(a, b)| *a += b);
        }
    }
    x.iter().map(|r| vec_mat(&rms_norm(r), p.head.data(), v)).collect()
}
