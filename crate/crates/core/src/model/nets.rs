//! Small affine networks and per-dimension softmax, with explicit reverse-mode
//! backward passes that accumulate into a flat gradient buffer.
//!
//! Parameters live in a single flat `f32` slice owned by the parameter store;
//! a [`MlpSeg`] records where each affine's weights sit in that slice. All
//! arithmetic is carried out in `f64`.

use crate::geometry::act_prime;

/// One affine map `y = W x + b` inside the flat parameter buffer. `W` is
/// row-major `out_dim x in_dim` at `w_off`; `b` is `out_dim` at `b_off`.
#[derive(Debug, Clone)]
pub struct AffineSeg {
    pub w_off: usize,
    pub b_off: usize,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl AffineSeg {
    pub fn param_count(&self) -> usize {
        self.out_dim * self.in_dim + self.out_dim
    }
}

/// A multilayer perceptron: affine maps with ReLU between consecutive maps
/// (none after the last).
#[derive(Debug, Clone)]
pub struct MlpSeg {
    pub affines: Vec<AffineSeg>,
}

impl MlpSeg {
    pub fn in_dim(&self) -> usize {
        self.affines[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.affines.last().unwrap().out_dim
    }

    pub fn param_count(&self) -> usize {
        self.affines.iter().map(AffineSeg::param_count).sum()
    }
}

/// Forward intermediates needed by [`mlp_backward`].
#[derive(Debug, Clone)]
pub struct MlpCache {
    /// Input to each affine: `acts[0]` is the network input, `acts[l]` the
    /// ReLU output feeding affine `l`.
    acts: Vec<Vec<f64>>,
    /// Pre-activation of each hidden ReLU (one per affine except the last).
    pres: Vec<Vec<f64>>,
}

fn affine_forward(params: &[f32], seg: &AffineSeg, x: &[f64]) -> Vec<f64> {
    debug_assert_eq!(x.len(), seg.in_dim);
    let mut y = vec![0.0; seg.out_dim];
    for o in 0..seg.out_dim {
        let row = seg.w_off + o * seg.in_dim;
        let mut acc = params[seg.b_off + o] as f64;
        for i in 0..seg.in_dim {
            acc += params[row + i] as f64 * x[i];
        }
        y[o] = acc;
    }
    y
}

pub fn mlp_forward(params: &[f32], seg: &MlpSeg, x: &[f64]) -> (Vec<f64>, MlpCache) {
    let n = seg.affines.len();
    let mut acts = Vec::with_capacity(n);
    let mut pres = Vec::with_capacity(n - 1);
    acts.push(x.to_vec());
    let mut out = Vec::new();
    for (l, aff) in seg.affines.iter().enumerate() {
        let z = affine_forward(params, aff, acts.last().unwrap());
        if l + 1 < n {
            acts.push(z.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect());
            pres.push(z);
        } else {
            out = z;
        }
    }
    (out, MlpCache { acts, pres })
}

/// Accumulates parameter gradients into `tape` and returns the gradient with
/// respect to the network input.
pub fn mlp_backward(
    params: &[f32],
    seg: &MlpSeg,
    cache: &MlpCache,
    dy: &[f64],
    tape: &mut [f64],
) -> Vec<f64> {
    let n = seg.affines.len();
    let mut g = dy.to_vec();
    for l in (0..n).rev() {
        let aff = &seg.affines[l];
        let input = &cache.acts[l];
        let mut dx = vec![0.0; aff.in_dim];
        for o in 0..aff.out_dim {
            let go = g[o];
            if go == 0.0 {
                continue;
            }
            tape[aff.b_off + o] += go;
            let row = aff.w_off + o * aff.in_dim;
            for i in 0..aff.in_dim {
                tape[row + i] += go * input[i];
                dx[i] += go * params[row + i] as f64;
            }
        }
        if l > 0 {
            let pre = &cache.pres[l - 1];
            for (v, &p) in dx.iter_mut().zip(pre) {
                *v *= act_prime(p);
            }
        }
        g = dx;
    }
    g
}

/// Per-dimension softmax over a set: `attn[j][k] = exp(z[j][k]) / sum_l exp(z[l][k])`.
pub fn softmax_per_dim(zs: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = zs.len();
    let d = zs[0].len();
    let mut out = vec![vec![0.0; d]; n];
    for k in 0..d {
        let m = zs.iter().map(|z| z[k]).fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for z in zs {
            denom += (z[k] - m).exp();
        }
        for (j, z) in zs.iter().enumerate() {
            out[j][k] = (z[k] - m).exp() / denom;
        }
    }
    out
}

/// Backward through [`softmax_per_dim`]: standard softmax Jacobian applied
/// per dimension across the set index.
pub fn softmax_per_dim_backward(attn: &[Vec<f64>], d_attn: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = attn.len();
    let d = attn[0].len();
    let mut dz = vec![vec![0.0; d]; n];
    for k in 0..d {
        let dot: f64 = (0..n).map(|j| d_attn[j][k] * attn[j][k]).sum();
        for j in 0..n {
            dz[j][k] = attn[j][k] * (d_attn[j][k] - dot);
        }
    }
    dz
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `log(sigmoid(x))`.
#[inline]
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_mlp() -> (Vec<f32>, MlpSeg) {
        // 2 -> 3 -> 2, parameters packed [w1 | b1 | w2 | b2]
        let seg = MlpSeg {
            affines: vec![
                AffineSeg {
                    w_off: 0,
                    b_off: 6,
                    in_dim: 2,
                    out_dim: 3,
                },
                AffineSeg {
                    w_off: 9,
                    b_off: 15,
                    in_dim: 3,
                    out_dim: 2,
                },
            ],
        };
        let params: Vec<f32> = vec![
            0.5, -0.3, 0.2, 0.8, -0.6, 0.1, // w1
            0.05, -0.02, 0.03, // b1
            1.0, 0.5, -0.5, 0.2, -0.1, 0.4, // w2
            0.0, 0.1, // b2
        ];
        (params, seg)
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        let (mut params, seg) = toy_mlp();
        let x = vec![0.7, -0.4];
        let dy = vec![1.0, -2.0];
        let (_, cache) = mlp_forward(&params, &seg, &x);
        let mut tape = vec![0.0; params.len()];
        let dx = mlp_backward(&params, &seg, &cache, &dy, &mut tape);

        let scalar = |params: &[f32], x: &[f64]| -> f64 {
            let (y, _) = mlp_forward(params, &seg, x);
            y[0] * dy[0] + y[1] * dy[1]
        };
        let h = 1e-5;
        for i in 0..params.len() {
            let orig = params[i];
            params[i] = orig + h as f32;
            let hi_v = scalar(&params, &x);
            params[i] = orig - h as f32;
            let lo_v = scalar(&params, &x);
            params[i] = orig;
            let fd = (hi_v - lo_v) / ((orig + h as f32) as f64 - (orig - h as f32) as f64);
            assert!(
                (tape[i] - fd).abs() < 1e-6 * (1.0 + fd.abs()),
                "param {i}: analytic {} vs fd {}",
                tape[i],
                fd
            );
        }
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let fd = (scalar(&params, &xp) - scalar(&params, &xm)) / (2.0 * h);
            assert!((dx[i] - fd).abs() < 1e-6 * (1.0 + fd.abs()));
        }
    }

    #[test]
    fn softmax_normalizes_and_backward_matches_fd() {
        let zs = vec![vec![0.3, -1.0], vec![-0.2, 2.0], vec![1.5, 0.0]];
        let attn = softmax_per_dim(&zs);
        for k in 0..2 {
            let s: f64 = attn.iter().map(|a| a[k]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }

        // scalar objective sum_jk c_jk * attn_jk
        let c = vec![vec![1.0, -0.5], vec![0.2, 0.7], vec![-1.0, 0.3]];
        let dz = softmax_per_dim_backward(&attn, &c);
        let obj = |zs: &[Vec<f64>]| -> f64 {
            let a = softmax_per_dim(zs);
            a.iter()
                .zip(&c)
                .map(|(aj, cj)| aj.iter().zip(cj).map(|(x, y)| x * y).sum::<f64>())
                .sum()
        };
        let h = 1e-6;
        for j in 0..3 {
            for k in 0..2 {
                let mut zp = zs.clone();
                zp[j][k] += h;
                let mut zm = zs.clone();
                zm[j][k] -= h;
                let fd = (obj(&zp) - obj(&zm)) / (2.0 * h);
                assert!(
                    (dz[j][k] - fd).abs() < 1e-7,
                    "dz[{j}][{k}] {} vs {}",
                    dz[j][k],
                    fd
                );
            }
        }
    }

    #[test]
    fn stable_log_sigmoid() {
        assert!((log_sigmoid(0.0) - 0.5f64.ln()).abs() < 1e-12);
        assert!(log_sigmoid(-800.0).is_finite());
        assert!((log_sigmoid(-800.0) + 800.0).abs() < 1e-9);
        assert!(log_sigmoid(800.0).abs() < 1e-12);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
    }
}
