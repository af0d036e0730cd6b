//! Scalar loop oracles shared by the oracle and acceptance suites.

#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use wch_core::{Real, Tensor};

pub type Feats = Vec<Vec<Vec<Real>>>;

pub fn feats(rng: &mut ChaCha8Rng, bs: usize, n: usize, d: usize, scale: Real) -> Feats {
    (0..bs)
        .map(|_| {
            (0..n)
                .map(|_| (0..d).map(|_| scale * rng.random_range(-1.0..1.0)).collect())
                .collect()
        })
        .collect()
}

pub fn to_tensor(f: &Feats) -> Tensor {
    let (bs, n, d) = (f.len(), f[0].len(), f[0][0].len());
    Tensor::new(&[bs, n, d], f.iter().flatten().flatten().copied().collect()).unwrap()
}

pub fn from_tensor(t: &Tensor) -> Feats {
    let s = t.shape();
    (0..s[0])
        .map(|b| {
            (0..s[1])
                .map(|k| (0..s[2]).map(|c| t.get(&[b, k, c])).collect())
                .collect()
        })
        .collect()
}

pub fn dot(a: &[Real], b: &[Real]) -> Real {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn softmax(xs: &[Real], temperature: Real) -> Vec<Real> {
    let m = xs.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
    let e: Vec<Real> = xs.iter().map(|x| ((x - m) / temperature).exp()).collect();
    let z: Real = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

/// Per image: `S[k][t] = ⟨f1_k, f2_t⟩`; view 1 mixes its own patches with
/// column-softmax weights, view 2 mixes its own with row-softmax weights.
pub fn ma_oracle(f1: &Feats, f2: &Feats) -> (Feats, Feats) {
    let mut r1 = Vec::new();
    let mut r2 = Vec::new();
    for (a, b) in f1.iter().zip(f2) {
        let n = a.len();
        let s: Vec<Vec<Real>> = (0..n).map(|k| (0..n).map(|t| dot(&a[k], &b[t])).collect()).collect();
        let rows: Vec<Vec<Real>> = s.iter().map(|r| softmax(r, 1.0)).collect();
        let cols: Vec<Vec<Real>> = (0..n)
            .map(|t| softmax(&(0..n).map(|k| s[k][t]).collect::<Vec<_>>(), 1.0))
            .collect();
        let d = a[0].len();
        let mut o1 = vec![vec![0.0; d]; n];
        let mut o2 = vec![vec![0.0; d]; n];
        for k in 0..n {
            for j in 0..n {
                for c in 0..d {
                    o1[k][c] += cols[k][j] * a[j][c];
                    o2[k][c] += rows[k][j] * b[j][c];
                }
            }
        }
        r1.push(o1);
        r2.push(o2);
    }
    (r1, r2)
}

/// `(raw, softmaxed, scaled)` weight matrices.
pub fn wl_oracle(f1: &Feats, f2: &Feats, tau_w: Real) -> [Vec<Vec<Real>>; 3] {
    let bs = f1.len();
    let raw: Vec<Vec<Real>> = (0..bs)
        .map(|i| {
            (0..bs)
                .map(|j| {
                    let maxima: Vec<Real> = f1[i]
                        .iter()
                        .map(|p| f2[j].iter().map(|q| dot(p, q)).fold(Real::NEG_INFINITY, Real::max))
                        .collect();
                    maxima.iter().sum::<Real>() / maxima.len() as Real
                })
                .collect()
        })
        .collect();
    let soft: Vec<Vec<Real>> = raw.iter().map(|r| softmax(r, tau_w)).collect();
    let scaled = soft
        .iter()
        .enumerate()
        .map(|(i, r)| r.iter().map(|v| v / r[i]).collect())
        .collect();
    [raw, soft, scaled]
}

pub fn max_diff(a: &Feats, b: &Feats) -> Real {
    a.iter()
        .flatten()
        .flatten()
        .zip(b.iter().flatten().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, Real::max)
}

pub fn matrix_diff(t: &Tensor, m: &[Vec<Real>]) -> Real {
    t.to_rows()
        .iter()
        .flatten()
        .zip(m.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, Real::max)
}

pub fn random_codes(rng: &mut ChaCha8Rng, bs: usize, l: usize) -> Vec<Vec<Real>> {
    (0..bs)
        .map(|_| (0..l).map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect())
        .collect()
}

/// Standard InfoNCE: mean over anchors of `logsumexp_j(L_ij) - L_ii`.
pub fn info_nce(b1: &[Vec<Real>], b2: &[Vec<Real>], tau: Real) -> Real {
    let l = b1[0].len() as Real;
    let bs = b1.len();
    let mut total = 0.0;
    for i in 0..bs {
        let logits: Vec<Real> = b2.iter().map(|b| dot(&b1[i], b) / l / tau).collect();
        let m = logits.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
        let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<Real>().ln();
        total += lse - logits[i];
    }
    total / bs as Real
}
