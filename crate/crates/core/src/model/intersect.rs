//! Forward and reverse passes of the three intersection operators.
//!
//! Each forward returns the intersection box plus a cache; the paired
//! backward consumes gradients with respect to the result's center and
//! half-width, accumulates network-parameter gradients into the flat tape,
//! and returns gradients with respect to each input box (center and raw
//! offset). The gradient into the half-width of a result must be chained by
//! the caller through whatever the result feeds.

use crate::geometry::{act, act_prime, BoxEmbedding};

use super::nets::{
    mlp_backward, mlp_forward, sigmoid, softmax_per_dim, softmax_per_dim_backward, MlpCache,
};
use super::ParamStore;

/// Gradient with respect to one input box.
#[derive(Debug, Clone)]
pub struct BoxGrad {
    pub d_center: Vec<f64>,
    pub d_offset_raw: Vec<f64>,
}

impl BoxGrad {
    fn zeros(d: usize) -> Self {
        Self {
            d_center: vec![0.0; d],
            d_offset_raw: vec![0.0; d],
        }
    }
}

pub struct AttnCache {
    center_caches: Vec<MlpCache>,
    attn: Vec<Vec<f64>>,
    inner_caches: Vec<MlpCache>,
    outer_cache: MlpCache,
    g: Vec<f64>,
    min_hw: Vec<f64>,
    argmin: Vec<usize>,
}

/// Attention-network intersection: per-dimension softmax over the center
/// network's outputs weights the centers; the half-width is the elementwise
/// minimum of the members' half-widths shrunk by a sigmoid gate.
pub fn attention_forward(store: &ParamStore, boxes: &[BoxEmbedding]) -> (BoxEmbedding, AttnCache) {
    let d = store.dim();
    let n = boxes.len();
    let layout = &store.layout;

    let mut zs = Vec::with_capacity(n);
    let mut center_caches = Vec::with_capacity(n);
    for b in boxes {
        let (z, cache) = mlp_forward(&store.data, &layout.attn_center, &b.center);
        zs.push(z);
        center_caches.push(cache);
    }
    let attn = softmax_per_dim(&zs);

    let mut center = vec![0.0; d];
    for (a, b) in attn.iter().zip(boxes) {
        for k in 0..d {
            center[k] += a[k] * b.center[k];
        }
    }

    let mut min_hw = vec![f64::INFINITY; d];
    let mut argmin = vec![0usize; d];
    for (j, b) in boxes.iter().enumerate() {
        for k in 0..d {
            let w = act(b.offset_raw[k]);
            if w < min_hw[k] {
                min_hw[k] = w;
                argmin[k] = j;
            }
        }
    }

    let mut mean_y = vec![0.0; d];
    let mut inner_caches = Vec::with_capacity(n);
    for b in boxes {
        let (y, cache) = mlp_forward(&store.data, &layout.attn_off_inner, &b.offset_raw);
        for k in 0..d {
            mean_y[k] += y[k] / n as f64;
        }
        inner_caches.push(cache);
    }
    let (r, outer_cache) = mlp_forward(&store.data, &layout.attn_off_outer, &mean_y);
    let g: Vec<f64> = r.iter().map(|&x| sigmoid(x)).collect();
    let offset_raw: Vec<f64> = min_hw.iter().zip(&g).map(|(&m, &gk)| m * gk).collect();

    (
        BoxEmbedding { center, offset_raw },
        AttnCache {
            center_caches,
            attn,
            inner_caches,
            outer_cache,
            g,
            min_hw,
            argmin,
        },
    )
}

pub fn attention_backward(
    store: &ParamStore,
    boxes: &[BoxEmbedding],
    cache: &AttnCache,
    d_center: &[f64],
    d_halfwidth: &[f64],
    tape: &mut [f64],
) -> Vec<BoxGrad> {
    let d = store.dim();
    let n = boxes.len();
    let layout = &store.layout;
    let mut grads: Vec<BoxGrad> = (0..n).map(|_| BoxGrad::zeros(d)).collect();

    // offset path: W = min_hw ⊙ g
    let mut d_g = vec![0.0; d];
    for k in 0..d {
        d_g[k] = d_halfwidth[k] * cache.min_hw[k];
        let dm = d_halfwidth[k] * cache.g[k];
        if dm != 0.0 {
            let j = cache.argmin[k];
            grads[j].d_offset_raw[k] += dm * act_prime(boxes[j].offset_raw[k]);
        }
    }
    // g = sigmoid(r)
    let d_r: Vec<f64> = d_g
        .iter()
        .zip(&cache.g)
        .map(|(&dg, &g)| dg * g * (1.0 - g))
        .collect();
    let d_mean_y = mlp_backward(&store.data, &layout.attn_off_outer, &cache.outer_cache, &d_r, tape);
    let d_y: Vec<f64> = d_mean_y.iter().map(|&v| v / n as f64).collect();
    for (j, inner) in cache.inner_caches.iter().enumerate() {
        let dx = mlp_backward(&store.data, &layout.attn_off_inner, inner, &d_y, tape);
        for k in 0..d {
            grads[j].d_offset_raw[k] += dx[k];
        }
    }

    // center path: C = Σ attn_j ⊙ c_j
    let mut d_attn = vec![vec![0.0; d]; n];
    for j in 0..n {
        for k in 0..d {
            d_attn[j][k] = d_center[k] * boxes[j].center[k];
            grads[j].d_center[k] += d_center[k] * cache.attn[j][k];
        }
    }
    let d_z = softmax_per_dim_backward(&cache.attn, &d_attn);
    for (j, (zc, dz)) in cache.center_caches.iter().zip(&d_z).enumerate() {
        let dx = mlp_backward(&store.data, &layout.attn_center, zc, dz, tape);
        for k in 0..d {
            grads[j].d_center[k] += dx[k];
        }
    }
    grads
}

pub struct UserBiasCache {
    center_caches: Vec<MlpCache>,
    center_attn: Vec<Vec<f64>>,
    offset_caches: Vec<MlpCache>,
    offset_attn: Vec<Vec<f64>>,
}

/// User-bias intersection: both attentions come from networks applied to the
/// concatenation of a box component and the user vector; the offset sum runs
/// over activated half-widths.
pub fn user_bias_forward(
    store: &ParamStore,
    boxes: &[BoxEmbedding],
    user_vec: &[f64],
) -> (BoxEmbedding, UserBiasCache) {
    let d = store.dim();
    let n = boxes.len();
    let layout = &store.layout;

    let mut concat = vec![0.0; 2 * d];
    concat[d..].copy_from_slice(user_vec);

    let mut c_logits = Vec::with_capacity(n);
    let mut center_caches = Vec::with_capacity(n);
    for b in boxes {
        concat[..d].copy_from_slice(&b.center);
        let (z, cache) = mlp_forward(&store.data, &layout.user_center, &concat);
        c_logits.push(z);
        center_caches.push(cache);
    }
    let center_attn = softmax_per_dim(&c_logits);

    let mut o_logits = Vec::with_capacity(n);
    let mut offset_caches = Vec::with_capacity(n);
    for b in boxes {
        concat[..d].copy_from_slice(&b.offset_raw);
        let (z, cache) = mlp_forward(&store.data, &layout.user_offset, &concat);
        o_logits.push(z);
        offset_caches.push(cache);
    }
    let offset_attn = softmax_per_dim(&o_logits);

    let mut center = vec![0.0; d];
    let mut offset_raw = vec![0.0; d];
    for j in 0..n {
        for k in 0..d {
            center[k] += center_attn[j][k] * boxes[j].center[k];
            offset_raw[k] += offset_attn[j][k] * act(boxes[j].offset_raw[k]);
        }
    }

    (
        BoxEmbedding { center, offset_raw },
        UserBiasCache {
            center_caches,
            center_attn,
            offset_caches,
            offset_attn,
        },
    )
}

/// Returns per-box gradients plus the gradient into the user vector.
pub fn user_bias_backward(
    store: &ParamStore,
    boxes: &[BoxEmbedding],
    cache: &UserBiasCache,
    d_center: &[f64],
    d_halfwidth: &[f64],
    tape: &mut [f64],
) -> (Vec<BoxGrad>, Vec<f64>) {
    let d = store.dim();
    let n = boxes.len();
    let layout = &store.layout;
    let mut grads: Vec<BoxGrad> = (0..n).map(|_| BoxGrad::zeros(d)).collect();
    let mut d_user = vec![0.0; d];

    // offset path
    let mut d_oattn = vec![vec![0.0; d]; n];
    for j in 0..n {
        for k in 0..d {
            let hw = act(boxes[j].offset_raw[k]);
            d_oattn[j][k] = d_halfwidth[k] * hw;
            grads[j].d_offset_raw[k] +=
                d_halfwidth[k] * cache.offset_attn[j][k] * act_prime(boxes[j].offset_raw[k]);
        }
    }
    let d_eta = softmax_per_dim_backward(&cache.offset_attn, &d_oattn);
    for (j, (oc, de)) in cache.offset_caches.iter().zip(&d_eta).enumerate() {
        let dx = mlp_backward(&store.data, &layout.user_offset, oc, de, tape);
        for k in 0..d {
            grads[j].d_offset_raw[k] += dx[k];
            d_user[k] += dx[d + k];
        }
    }

    // center path
    let mut d_cattn = vec![vec![0.0; d]; n];
    for j in 0..n {
        for k in 0..d {
            d_cattn[j][k] = d_center[k] * boxes[j].center[k];
            grads[j].d_center[k] += d_center[k] * cache.center_attn[j][k];
        }
    }
    let d_zeta = softmax_per_dim_backward(&cache.center_attn, &d_cattn);
    for (j, (cc, dz)) in cache.center_caches.iter().zip(&d_zeta).enumerate() {
        let dx = mlp_backward(&store.data, &layout.user_center, cc, dz, tape);
        for k in 0..d {
            grads[j].d_center[k] += dx[k];
            d_user[k] += dx[d + k];
        }
    }

    (grads, d_user)
}

pub struct MaxMinCache {
    hi_star: Vec<f64>,
    lo_star: Vec<f64>,
    argmin_hi: Vec<usize>,
    argmax_lo: Vec<usize>,
}

/// Analytic max-min intersection on concept boxes; subgradients route to the
/// first extremal member per dimension.
pub fn maxmin_forward(boxes: &[BoxEmbedding]) -> (BoxEmbedding, MaxMinCache) {
    let d = boxes[0].center.len();
    let mut hi_star = vec![f64::INFINITY; d];
    let mut lo_star = vec![f64::NEG_INFINITY; d];
    let mut argmin_hi = vec![0usize; d];
    let mut argmax_lo = vec![0usize; d];
    for (j, b) in boxes.iter().enumerate() {
        for k in 0..d {
            let w = act(b.offset_raw[k]);
            let hi = b.center[k] + w;
            let lo = b.center[k] - w;
            if hi < hi_star[k] {
                hi_star[k] = hi;
                argmin_hi[k] = j;
            }
            if lo > lo_star[k] {
                lo_star[k] = lo;
                argmax_lo[k] = j;
            }
        }
    }
    let center: Vec<f64> = hi_star
        .iter()
        .zip(&lo_star)
        .map(|(&h, &l)| (h + l) / 2.0)
        .collect();
    let offset_raw: Vec<f64> = hi_star
        .iter()
        .zip(&lo_star)
        .map(|(&h, &l)| act(h - l) / 2.0)
        .collect();
    (
        BoxEmbedding { center, offset_raw },
        MaxMinCache {
            hi_star,
            lo_star,
            argmin_hi,
            argmax_lo,
        },
    )
}

pub fn maxmin_backward(
    boxes: &[BoxEmbedding],
    cache: &MaxMinCache,
    d_center: &[f64],
    d_halfwidth: &[f64],
) -> Vec<BoxGrad> {
    let d = boxes[0].center.len();
    let mut grads: Vec<BoxGrad> = (0..boxes.len()).map(|_| BoxGrad::zeros(d)).collect();
    for k in 0..d {
        let gap = cache.hi_star[k] - cache.lo_star[k];
        let d_diff = d_halfwidth[k] * act_prime(gap) / 2.0;
        let d_hi = d_center[k] / 2.0 + d_diff;
        let d_lo = d_center[k] / 2.0 - d_diff;
        let jh = cache.argmin_hi[k];
        grads[jh].d_center[k] += d_hi;
        grads[jh].d_offset_raw[k] += d_hi * act_prime(boxes[jh].offset_raw[k]);
        let jl = cache.argmax_lo[k];
        grads[jl].d_center[k] += d_lo;
        grads[jl].d_offset_raw[k] -= d_lo * act_prime(boxes[jl].offset_raw[k]);
    }
    grads
}
