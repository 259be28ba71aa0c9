//! Retention: causal, exponentially decayed, rotary-phased linear attention.
//!
//! For one head, with `q'_n`, `k'_m` the rotated queries and keys,
//!
//! ```text
//! o_n = sum_{m <= n} gamma^(n-m) (q'_n . k'_m) v_m
//! ```
//!
//! The complex phase `e^{i n theta}` is realised as a real rotation of each
//! even/odd coordinate pair by angle `n * theta_j`, so the Hermitian product
//! becomes an ordinary dot product of rotated vectors.
//!
//! Two evaluation orders are provided: the parallel form builds the masked
//! `n×n` decay matrix, the recurrent form streams a `d_k×d_v` state.

use crate::error::{Error, Result};
use crate::scalar::{gemm, Scalar};
use crate::tensor::Tensor;

/// Rotary angle base vector: `theta_j = base^(-2j/d)` for `j < d/2`.
pub fn rotary_theta<T: Scalar>(d_head: usize, base: f64) -> Vec<T> {
    (0..d_head / 2)
        .map(|j| T::lit(base.powf(-2.0 * j as f64 / d_head as f64)))
        .collect()
}

/// Precomputed `cos(n theta_j)`, `sin(n theta_j)` for positions `0..n`.
#[derive(Debug, Clone)]
pub struct RotaryTables<T> {
    len: usize,
    half: usize,
    cos: Vec<T>,
    sin: Vec<T>,
}

impl<T: Scalar> RotaryTables<T> {
    pub fn new(len: usize, theta: &[T]) -> Self {
        let half = theta.len();
        let mut cos = Vec::with_capacity(len * half);
        let mut sin = Vec::with_capacity(len * half);
        for pos in 0..len {
            let p = T::lit(pos as f64);
            for &t in theta {
                let angle = p * t;
                cos.push(angle.cos());
                sin.push(angle.sin());
            }
        }
        Self {
            len,
            half,
            cos,
            sin,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn dim(&self) -> usize {
        2 * self.half
    }

    /// Rotates each row of an `len × dim` block in place. `inverse` applies
    /// the transpose rotation, which is the adjoint used in backprop.
    pub fn rotate(&self, x: &mut [T], inverse: bool) {
        let d = self.dim();
        debug_assert_eq!(x.len(), self.len * d);
        for (pos, row) in x.chunks_exact_mut(d).enumerate() {
            let cs = &self.cos[pos * self.half..(pos + 1) * self.half];
            let sn = &self.sin[pos * self.half..(pos + 1) * self.half];
            for j in 0..self.half {
                let (a, b) = (row[2 * j], row[2 * j + 1]);
                let (c, s) = (cs[j], if inverse { -sn[j] } else { sn[j] });
                row[2 * j] = a * c - b * s;
                row[2 * j + 1] = a * s + b * c;
            }
        }
    }
}

/// Lower-triangular decay matrix `D[n, m] = gamma^(n-m)` for `m <= n`, with
/// `0^0 = 1`.
pub fn decay_mask<T: Scalar>(len: usize, gamma: T) -> Vec<T> {
    let mut pow = Vec::with_capacity(len);
    let mut acc = T::one();
    for _ in 0..len {
        pow.push(acc);
        acc = acc * gamma;
    }
    let mut d = vec![T::zero(); len * len];
    for n in 0..len {
        for m in 0..=n {
            d[n * len + m] = pow[n - m];
        }
    }
    d
}

/// Parallel form on already rotated inputs: `(Q K^T ⊙ D) V`.
pub(crate) fn parallel_core<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    len: usize,
    dk: usize,
    dv: usize,
    mask: &[T],
    out: &mut [T],
) {
    let mut scores = vec![T::zero(); len * len];
    gemm(false, true, len, len, dk, T::one(), q, k, T::zero(), &mut scores);
    for (s, &m) in scores.iter_mut().zip(mask) {
        *s *= m;
    }
    gemm(false, false, len, dv, len, T::one(), &scores, v, T::zero(), out);
}

/// Recurrent form on already rotated inputs:
/// `S_n = gamma S_{n-1} + k'_n^T v_n`, `o_n = q'_n S_n`.
pub(crate) fn recurrent_core<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    len: usize,
    dk: usize,
    dv: usize,
    gamma: T,
    out: &mut [T],
) {
    let mut state = vec![T::zero(); dk * dv];
    for n in 0..len {
        let kn = &k[n * dk..(n + 1) * dk];
        let vn = &v[n * dv..(n + 1) * dv];
        for (i, row) in state.chunks_exact_mut(dv).enumerate() {
            let ki = kn[i];
            for (s, &vj) in row.iter_mut().zip(vn) {
                *s = gamma * *s + ki * vj;
            }
        }
        let qn = &q[n * dk..(n + 1) * dk];
        let on = &mut out[n * dv..(n + 1) * dv];
        on.iter_mut().for_each(|o| *o = T::zero());
        for (i, row) in state.chunks_exact(dv).enumerate() {
            let qi = qn[i];
            for (o, &s) in on.iter_mut().zip(row) {
                *o += qi * s;
            }
        }
    }
}

/// Adjoint of [`parallel_core`]; accumulates into `gq`, `gk`, `gv`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn core_backward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    grad_out: &[T],
    len: usize,
    dk: usize,
    dv: usize,
    mask: &[T],
    gq: &mut [T],
    gk: &mut [T],
    gv: &mut [T],
) {
    let mut scores = vec![T::zero(); len * len];
    gemm(false, true, len, len, dk, T::one(), q, k, T::zero(), &mut scores);
    for (s, &m) in scores.iter_mut().zip(mask) {
        *s *= m;
    }
    // dV = S^T dO
    gemm(true, false, len, dv, len, T::one(), &scores, grad_out, T::one(), gv);
    // dS = (dO V^T) ⊙ D
    let mut gs = vec![T::zero(); len * len];
    gemm(false, true, len, len, dv, T::one(), grad_out, v, T::zero(), &mut gs);
    for (s, &m) in gs.iter_mut().zip(mask) {
        *s *= m;
    }
    // dQ = dS K ; dK = dS^T Q
    gemm(false, false, len, dk, len, T::one(), &gs, k, T::one(), gq);
    gemm(true, false, len, dk, len, T::one(), &gs, q, T::one(), gk);
}

fn check_inputs<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    theta: &[T],
) -> Result<(usize, usize, usize)> {
    let (&[n, dk], &[nk, dk2], &[nv, dv]) = (q.shape(), k.shape(), v.shape()) else {
        return Err(Error::shape(
            "retention",
            format!(
                "expected rank-2 Q/K/V, got {:?} {:?} {:?}",
                q.shape(),
                k.shape(),
                v.shape()
            ),
        ));
    };
    if n == 0 || n != nk || n != nv || dk != dk2 {
        return Err(Error::shape(
            "retention",
            format!("Q {:?}, K {:?}, V {:?}", q.shape(), k.shape(), v.shape()),
        ));
    }
    if dk % 2 != 0 || theta.len() != dk / 2 {
        return Err(Error::shape(
            "retention",
            format!("key dim {dk} needs {} rotary angles, got {}", dk / 2, theta.len()),
        ));
    }
    if !(q.is_finite() && k.is_finite() && v.is_finite()) {
        return Err(Error::NonFinite("retention input".into()));
    }
    Ok((n, dk, dv))
}

fn rotated<T: Scalar>(x: &Tensor<T>, tables: &RotaryTables<T>) -> Vec<T> {
    let mut buf = x.data().to_vec();
    tables.rotate(&mut buf, false);
    buf
}

/// Single-head retention, masked-matrix evaluation. `q`, `k` are `n × d_k`,
/// `v` is `n × d_v`; positions are `0..n`.
pub fn retention_parallel<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    gamma: T,
    theta: &[T],
) -> Result<Tensor<T>> {
    let (n, dk, dv) = check_inputs(q, k, v, theta)?;
    let tables = RotaryTables::new(n, theta);
    let (qr, kr) = (rotated(q, &tables), rotated(k, &tables));
    let mask = decay_mask(n, gamma);
    let mut out = vec![T::zero(); n * dv];
    parallel_core(&qr, &kr, v.data(), n, dk, dv, &mask, &mut out);
    Tensor::from_vec(&[n, dv], out)
}

/// Single-head retention, streaming evaluation in `O(n d_k d_v)`.
pub fn retention_recurrent<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    gamma: T,
    theta: &[T],
) -> Result<Tensor<T>> {
    let (n, dk, dv) = check_inputs(q, k, v, theta)?;
    let tables = RotaryTables::new(n, theta);
    let (qr, kr) = (rotated(q, &tables), rotated(k, &tables));
    let mut out = vec![T::zero(); n * dv];
    recurrent_core(&qr, &kr, v.data(), n, dk, dv, gamma, &mut out);
    Tensor::from_vec(&[n, dv], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    fn random_qkv(n: usize, d: usize, seed: u64) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (
            Tensor::randn(&[n, d], 1.0, &mut rng),
            Tensor::randn(&[n, d], 1.0, &mut rng),
            Tensor::randn(&[n, d], 1.0, &mut rng),
        )
    }

    /// Explicit double loop over the decayed sum with complex phases,
    /// written independently of the rotation tables.
    fn complex_sum_oracle(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>, gamma: f64, theta: &[f64]) -> Vec<f64> {
        let &[n, d] = q.shape() else { unreachable!() };
        let dv = v.shape()[1];
        let mut out = vec![0.0; n * dv];
        for t in 0..n {
            for m in 0..=t {
                // Re[(q_t e^{i t θ}) conj(k_m e^{i m θ})] = Re[q_t conj(k_m) e^{i (t-m) θ}]
                let mut w = 0.0;
                for j in 0..d / 2 {
                    let (qr, qi) = (q.data()[t * d + 2 * j], q.data()[t * d + 2 * j + 1]);
                    let (kr, ki) = (k.data()[m * d + 2 * j], k.data()[m * d + 2 * j + 1]);
                    // q * conj(k)
                    let (pr, pi) = (qr * kr + qi * ki, qi * kr - qr * ki);
                    let ang = (t as f64 - m as f64) * theta[j];
                    w += pr * ang.cos() - pi * ang.sin();
                }
                let decay = if t == m { 1.0 } else { gamma.powi((t - m) as i32) };
                for c in 0..dv {
                    out[t * dv + c] += decay * w * v.data()[m * dv + c];
                }
            }
        }
        out
    }

    #[test]
    fn single_token_is_plain_dot_product() {
        let (q, k, v) = random_qkv(1, 4, 1);
        let theta = rotary_theta::<f64>(4, 10000.0);
        let want = dot(q.data(), k.data());
        for out in [
            retention_parallel(&q, &k, &v, 0.9, &theta).unwrap(),
            retention_recurrent(&q, &k, &v, 0.9, &theta).unwrap(),
        ] {
            for c in 0..4 {
                assert!((out.data()[c] - want * v.data()[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_decay_keeps_only_the_diagonal() {
        let (q, k, v) = random_qkv(5, 4, 2);
        let theta = rotary_theta::<f64>(4, 10000.0);
        let out = retention_parallel(&q, &k, &v, 0.0, &theta).unwrap();
        for n in 0..5 {
            let w = dot(&q.data()[n * 4..n * 4 + 4], &k.data()[n * 4..n * 4 + 4]);
            for c in 0..4 {
                assert!((out.data()[n * 4 + c] - w * v.data()[n * 4 + c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn parallel_matches_recurrent_in_double() {
        let (q, k, v) = random_qkv(8, 4, 3);
        let theta = rotary_theta::<f64>(4, 10000.0);
        let a = retention_parallel(&q, &k, &v, 0.87, &theta).unwrap();
        let b = retention_recurrent(&q, &k, &v, 0.87, &theta).unwrap();
        assert!(a.max_rel_diff(&b, 1e-12) < 1e-10);
    }

    #[test]
    fn both_forms_match_complex_sum() {
        let (q, k, v) = random_qkv(7, 6, 4);
        let theta = rotary_theta::<f64>(6, 10000.0);
        for gamma in [1.0, 0.9, 0.5] {
            let want = complex_sum_oracle(&q, &k, &v, gamma, &theta);
            let want = Tensor::from_vec(&[7, 6], want).unwrap();
            let p = retention_parallel(&q, &k, &v, gamma, &theta).unwrap();
            let r = retention_recurrent(&q, &k, &v, gamma, &theta).unwrap();
            assert!(p.max_rel_diff(&want, 1e-9) < 1e-10, "gamma {gamma}");
            assert!(r.max_rel_diff(&want, 1e-9) < 1e-10, "gamma {gamma}");
        }
    }

    #[test]
    fn appending_tokens_leaves_prefix_unchanged() {
        let (q, k, v) = random_qkv(9, 4, 5);
        let theta = rotary_theta::<f64>(4, 10000.0);
        let full = retention_recurrent(&q, &k, &v, 0.8, &theta).unwrap();
        let head = |t: &Tensor<f64>| Tensor::from_vec(&[6, 4], t.data()[..24].to_vec()).unwrap();
        let part = retention_recurrent(&head(&q), &head(&k), &head(&v), 0.8, &theta).unwrap();
        assert_eq!(&full.data()[..24], part.data());
    }

    #[test]
    fn rotation_preserves_norms() {
        let theta = rotary_theta::<f64>(8, 10000.0);
        let tables = RotaryTables::new(20, &theta);
        let (x, _, _) = random_qkv(20, 8, 6);
        let mut y = x.data().to_vec();
        tables.rotate(&mut y, false);
        for n in 0..20 {
            let a = dot(&x.data()[n * 8..n * 8 + 8], &x.data()[n * 8..n * 8 + 8]);
            let b = dot(&y[n * 8..n * 8 + 8], &y[n * 8..n * 8 + 8]);
            assert!((a.sqrt() - b.sqrt()).abs() < 1e-6);
        }
        tables.rotate(&mut y, true);
        for (a, b) in y.iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_non_finite_and_bad_shapes() {
        let theta = rotary_theta::<f64>(4, 10000.0);
        let (mut q, k, v) = random_qkv(3, 4, 7);
        q.data_mut()[0] = f64::NAN;
        assert!(matches!(
            retention_parallel(&q, &k, &v, 0.9, &theta),
            Err(Error::NonFinite(_))
        ));
        let (q, _, v) = random_qkv(3, 4, 8);
        let k2 = Tensor::<f64>::zeros(&[2, 4]);
        assert!(retention_recurrent(&q, &k2, &v, 0.9, &theta).is_err());
        assert!(retention_parallel(&q, &q, &v, 0.9, &theta[..1]).is_err());
    }
}
