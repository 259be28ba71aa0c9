//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] records every operation of one forward pass together with
//! whatever the backward pass needs. Parameters are read in place from the
//! borrowed [`ParamStore`], so building a graph never copies weights.
//! [`Graph::backward`] seeds a scalar node with 1 and sweeps the tape in
//! reverse; gradients of intermediate nodes stay queryable afterwards,
//! which is what Grad-CAM relies on.

use crate::error::{Error, Result};
use crate::nn::params::{ParamId, ParamStore};
use crate::scalar::{gemm, Scalar};
use crate::temporal::retention::{core_backward, decay_mask, parallel_core, recurrent_core, RotaryTables};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Evaluation order used by retention nodes. Both produce the same values;
/// the backward pass always uses the parallel formula.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RetentionForm {
    #[default]
    Parallel,
    Recurrent,
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.ho * self.wo
    }

    fn im2col<T: Scalar>(&self, x: &[T], cols: &mut [T]) {
        let (hw_out, s, p) = (self.col_cols(), self.stride as isize, self.pad as isize);
        for ci in 0..self.cin {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (ci * self.kh + i) * self.kw + j;
                    let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                    for oy in 0..self.ho {
                        let y = oy as isize * s + i as isize - p;
                        let line = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        if y < 0 || y >= self.h as isize {
                            line.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let src = &plane[y as usize * self.w..(y as usize + 1) * self.w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let xx = ox as isize * s + j as isize - p;
                            *v = if xx < 0 || xx >= self.w as isize {
                                T::zero()
                            } else {
                                src[xx as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, cols: &[T], gx: &mut [T]) {
        let (hw_out, s, p) = (self.col_cols(), self.stride as isize, self.pad as isize);
        for ci in 0..self.cin {
            let plane = &mut gx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (ci * self.kh + i) * self.kw + j;
                    let src = &cols[row * hw_out..(row + 1) * hw_out];
                    for oy in 0..self.ho {
                        let y = oy as isize * s + i as isize - p;
                        if y < 0 || y >= self.h as isize {
                            continue;
                        }
                        for ox in 0..self.wo {
                            let xx = ox as isize * s + j as isize - p;
                            if xx >= 0 && xx < self.w as isize {
                                plane[y as usize * self.w + xx as usize] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

enum Op<T> {
    Input,
    Param(ParamId),
    Add(Var, Var),
    /// `a + b` with `b` repeated over the leading axes of `a`.
    AddBroadcast(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        rows: usize,
        inp: usize,
        out: usize,
    },
    Bmm {
        a: Var,
        b: Var,
        trans_b: bool,
        groups: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Reshape(Var),
    Gelu(Var),
    Swish(Var),
    Softmax {
        x: Var,
        dim: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        xhat: Vec<T>,
        rstd: Vec<T>,
        dim: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
        outer: usize,
        channels: usize,
        inner: usize,
        batch_stats: bool,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Rotary {
        x: Var,
        tables: RotaryTables<T>,
    },
    Retention {
        q: Var,
        k: Var,
        v: Var,
        masks: Vec<Vec<T>>,
        groups: usize,
        len: usize,
        dk: usize,
        dv: usize,
    },
    MeanTokens {
        x: Var,
        batch: usize,
        tokens: usize,
        channels: usize,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
        classes: usize,
    },
    WeightedSum {
        x: Var,
        weights: Tensor<T>,
    },
}

struct Node<T> {
    value: Option<Tensor<T>>,
    op: Op<T>,
}

/// Buffer writes (batch-norm running statistics) produced by a train-mode
/// forward pass; apply with [`Graph::apply_buffer_updates`].
pub type BufferUpdates<T> = Vec<(ParamId, Tensor<T>)>;

pub struct Graph<'s, T: Scalar> {
    store: &'s ParamStore<T>,
    nodes: Vec<Node<T>>,
    train: bool,
    retention_form: RetentionForm,
    updates: BufferUpdates<T>,
}

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    // (Phi(x), phi(x))
    let half = T::lit(0.5);
    let cdf = half * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * half).exp() * T::lit(0.398_942_280_401_432_7);
    (cdf, pdf)
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub fn swish<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

pub fn gelu<T: Scalar>(x: T) -> T {
    x * gelu_parts(x).0
}

/// Row-wise softmax over the last axis of a flat buffer.
pub fn softmax_rows<T: Scalar>(data: &mut [T], dim: usize) {
    for row in data.chunks_exact_mut(dim) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

impl<'s, T: Scalar> Graph<'s, T> {
    pub fn new(store: &'s ParamStore<T>, train: bool) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            train,
            retention_form: RetentionForm::Parallel,
            updates: Vec::new(),
        }
    }

    pub fn with_retention_form(mut self, form: RetentionForm) -> Self {
        self.retention_form = form;
        self
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        let node = &self.nodes[v.0];
        match (&node.op, &node.value) {
            (Op::Param(id), _) => self.store.get(*id),
            (_, Some(t)) => t,
            (_, None) => unreachable!("non-parameter node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// Takes the pending running-statistics writes.
    pub fn take_buffer_updates(&mut self) -> BufferUpdates<T> {
        std::mem::take(&mut self.updates)
    }

    pub fn apply_buffer_updates(store: &mut ParamStore<T>, updates: BufferUpdates<T>) {
        for (id, t) in updates {
            *store.get_mut(id) = t;
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).scale(s);
        self.push(out, Op::Scale(a, s))
    }

    /// `a + b` where `b`'s shape (ignoring leading unit axes) is a suffix of
    /// `a`'s shape.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let bshape: Vec<usize> = bv
            .shape()
            .iter()
            .copied()
            .skip_while(|&d| d == 1)
            .collect();
        let ashape = av.shape();
        if bshape.len() > ashape.len() || ashape[ashape.len() - bshape.len()..] != bshape[..] {
            return Err(Error::shape(
                "add_broadcast",
                format!("{:?} + {:?}", ashape, bv.shape()),
            ));
        }
        let n = bv.len();
        let mut out = av.clone();
        for chunk in out.data_mut().chunks_exact_mut(n) {
            for (o, &y) in chunk.iter_mut().zip(bv.data()) {
                *o += y;
            }
        }
        Ok(self.push(out, Op::AddBroadcast(a, b)))
    }

    /// Affine map over the last axis: `x W + b`, with `W` stored `in × out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        let (&inp, &[win, out]) = (xv.shape().last().unwrap_or(&0), wv.shape()) else {
            return Err(Error::shape("linear", format!("weight {:?}", wv.shape())));
        };
        if inp != win {
            return Err(Error::shape(
                "linear",
                format!("input {:?} vs weight {:?}", xv.shape(), wv.shape()),
            ));
        }
        let rows = xv.len() / inp.max(1);
        let mut data = vec![T::zero(); rows * out];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != out {
                return Err(Error::shape("linear", format!("bias {:?}", bv.shape())));
            }
            for row in data.chunks_exact_mut(out) {
                row.copy_from_slice(bv.data());
            }
        }
        gemm(false, false, rows, out, inp, T::one(), xv.data(), wv.data(), T::one(), &mut data);
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = out;
        let t = Tensor::from_vec(&shape, data)?;
        Ok(self.push(
            t,
            Op::Linear {
                x,
                w,
                b,
                rows,
                inp,
                out,
            },
        ))
    }

    /// Batched matmul over a leading group axis: `[G,m,k] x [G,k,n]`, or
    /// `[G,m,k] x [G,n,k]^T` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (&[ga, m, k], &[gb, b1, b2]) = (av.shape(), bv.shape()) else {
            return Err(Error::shape("bmm", format!("{:?} x {:?}", av.shape(), bv.shape())));
        };
        let (kb, n) = if trans_b { (b2, b1) } else { (b1, b2) };
        if ga != gb || k != kb {
            return Err(Error::shape("bmm", format!("{:?} x {:?}", av.shape(), bv.shape())));
        }
        let mut data = vec![T::zero(); ga * m * n];
        for g in 0..ga {
            gemm(
                false,
                trans_b,
                m,
                n,
                k,
                T::one(),
                &av.data()[g * m * k..(g + 1) * m * k],
                &bv.data()[g * k * n..(g + 1) * k * n],
                T::zero(),
                &mut data[g * m * n..(g + 1) * m * n],
            );
        }
        let t = Tensor::from_vec(&[ga, m, n], data)?;
        Ok(self.push(
            t,
            Op::Bmm {
                a,
                b,
                trans_b,
                groups: ga,
                m,
                k,
                n,
            },
        ))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let out = self.value(x).permute(perm)?;
        Ok(self.push(
            out,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        self.push(out, Op::Gelu(x))
    }

    pub fn swish(&mut self, x: Var) -> Var {
        let out = self.value(x).map(swish);
        self.push(out, Op::Swish(x))
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let dim = *out.shape().last().expect("rank >= 1");
        softmax_rows(out.data_mut(), dim);
        self.push(out, Op::Softmax { x, dim })
    }

    /// Normalises over the last axis; affine when `gamma`/`beta` are given.
    pub fn layer_norm(&mut self, x: Var, gamma: Option<Var>, beta: Option<Var>, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let dim = *xv.shape().last().expect("rank >= 1");
        for p in [gamma, beta].into_iter().flatten() {
            if self.value(p).len() != dim {
                return Err(Error::shape(
                    "layer_norm",
                    format!("affine {:?} for dim {dim}", self.value(p).shape()),
                ));
            }
        }
        let rows = xv.len() / dim;
        let inv_n = T::lit(1.0 / dim as f64);
        let eps = T::lit(eps);
        let mut xhat = Vec::with_capacity(xv.len());
        let mut rstd = Vec::with_capacity(rows);
        for row in xv.data().chunks_exact(dim) {
            let mean = row.iter().copied().sum::<T>() * inv_n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            xhat.extend(row.iter().map(|&v| (v - mean) * r));
        }
        let mut out = xhat.clone();
        if let Some(g) = gamma {
            let gv = self.value(g).data();
            for row in out.chunks_exact_mut(dim) {
                row.iter_mut().zip(gv).for_each(|(o, &s)| *o *= s);
            }
        }
        if let Some(b) = beta {
            let bv = self.value(b).data();
            for row in out.chunks_exact_mut(dim) {
                row.iter_mut().zip(bv).for_each(|(o, &s)| *o += s);
            }
        }
        let t = Tensor::from_vec(xv.shape(), out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
                dim,
            },
        ))
    }

    /// Batch normalisation over axis 1 of `(outer, C, inner...)`.
    ///
    /// Train mode normalises with batch statistics and queues a running
    /// average update (`momentum`, unbiased variance); eval mode uses the
    /// running buffers.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: ParamId,
        running_var: ParamId,
        eps: f64,
        momentum: f64,
    ) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() < 2 {
            return Err(Error::shape("batch_norm", format!("{:?}", xv.shape())));
        }
        let outer = xv.shape()[0];
        let channels = xv.shape()[1];
        let inner: usize = xv.shape()[2..].iter().product();
        if self.value(gamma).len() != channels || self.value(beta).len() != channels {
            return Err(Error::shape("batch_norm", format!("{channels} channels")));
        }
        let count = outer * inner;
        let eps_t = T::lit(eps);
        let data = xv.data();
        let mut pending = Vec::new();
        let (mean, var): (Vec<T>, Vec<T>) = if self.train {
            let inv = T::lit(1.0 / count as f64);
            let mut mean = vec![T::zero(); channels];
            let mut var = vec![T::zero(); channels];
            for o in 0..outer {
                for c in 0..channels {
                    let base = (o * channels + c) * inner;
                    mean[c] += data[base..base + inner].iter().copied().sum::<T>();
                }
            }
            mean.iter_mut().for_each(|m| *m *= inv);
            for o in 0..outer {
                for c in 0..channels {
                    let base = (o * channels + c) * inner;
                    let m = mean[c];
                    var[c] += data[base..base + inner].iter().map(|&v| (v - m) * (v - m)).sum::<T>();
                }
            }
            let unbiased = T::lit(1.0 / (count.max(2) - 1) as f64);
            let mom = T::lit(momentum);
            let keep = T::one() - mom;
            let rm = self.store.get(running_mean);
            let rv = self.store.get(running_var);
            let new_rm: Vec<T> = rm.data().iter().zip(&mean).map(|(&r, &m)| keep * r + mom * m).collect();
            let new_rv: Vec<T> = rv
                .data()
                .iter()
                .zip(&var)
                .map(|(&r, &v)| keep * r + mom * v * unbiased)
                .collect();
            pending.push((running_mean, Tensor::from_vec(rm.shape(), new_rm)?));
            pending.push((running_var, Tensor::from_vec(rv.shape(), new_rv)?));
            var.iter_mut().for_each(|v| *v *= inv);
            (mean, var)
        } else {
            (
                self.store.get(running_mean).data().to_vec(),
                self.store.get(running_var).data().to_vec(),
            )
        };
        let rstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps_t).sqrt()).collect();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![T::zero(); data.len()];
        let mut out = vec![T::zero(); data.len()];
        for o in 0..outer {
            for c in 0..channels {
                let base = (o * channels + c) * inner;
                for i in base..base + inner {
                    let h = (data[i] - mean[c]) * rstd[c];
                    xhat[i] = h;
                    out[i] = gv[c] * h + bv[c];
                }
            }
        }
        let t = Tensor::from_vec(xv.shape(), out)?;
        let batch_stats = self.train;
        self.updates.extend(pending);
        Ok(self.push(
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
                outer,
                channels,
                inner,
                batch_stats,
            },
        ))
    }

    /// 2-D cross-correlation, `x: (B, Cin, H, W)`, `w: (Cout, Cin, kh, kw)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (&[batch, cin, h, wd], &[cout, wcin, kh, kw]) = (xv.shape(), wv.shape()) else {
            return Err(Error::shape("conv2d", format!("{:?} * {:?}", xv.shape(), wv.shape())));
        };
        if cin != wcin || stride == 0 || h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::shape("conv2d", format!("{:?} * {:?}", xv.shape(), wv.shape())));
        }
        let geom = ConvGeom {
            batch,
            cin,
            h,
            w: wd,
            cout,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (wd + 2 * pad - kw) / stride + 1,
        };
        let (cr, cc) = (geom.col_rows(), geom.col_cols());
        let mut cols = vec![T::zero(); cr * cc];
        let mut out = vec![T::zero(); batch * cout * cc];
        let bias = b.map(|b| self.value(b).data());
        for n in 0..batch {
            geom.im2col(&xv.data()[n * cin * h * wd..(n + 1) * cin * h * wd], &mut cols);
            let dst = &mut out[n * cout * cc..(n + 1) * cout * cc];
            if let Some(bias) = bias {
                for (row, &bb) in dst.chunks_exact_mut(cc).zip(bias) {
                    row.iter_mut().for_each(|v| *v = bb);
                }
            }
            gemm(false, false, cout, cc, cr, T::one(), wv.data(), &cols, T::one(), dst);
        }
        let t = Tensor::from_vec(&[batch, cout, geom.ho, geom.wo], out)?;
        Ok(self.push(t, Op::Conv2d { x, w, b, geom }))
    }

    /// Position-dependent rotation of `(G, N, d)` along the token axis.
    pub fn rotary(&mut self, x: Var, theta: &[T]) -> Result<Var> {
        let xv = self.value(x);
        let &[_, n, d] = xv.shape() else {
            return Err(Error::shape("rotary", format!("{:?}", xv.shape())));
        };
        if d != 2 * theta.len() {
            return Err(Error::shape("rotary", format!("dim {d} with {} angles", theta.len())));
        }
        let tables = RotaryTables::new(n, theta);
        let mut out = xv.clone();
        for block in out.data_mut().chunks_exact_mut(n * d) {
            tables.rotate(block, false);
        }
        Ok(self.push(out, Op::Rotary { x, tables }))
    }

    /// Multi-head retention on rotated `(B*H, N, d)` inputs; group `g` uses
    /// `gammas[g % H]`.
    pub fn retention(&mut self, q: Var, k: Var, v: Var, gammas: &[T]) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (&[groups, len, dk], &[gk, lk, dk2], &[gv, lv, dv]) = (qv.shape(), kv.shape(), vv.shape()) else {
            return Err(Error::shape("retention", "expected rank-3 inputs"));
        };
        let heads = gammas.len();
        if groups != gk || groups != gv || len != lk || len != lv || dk != dk2 || heads == 0 || groups % heads != 0 {
            return Err(Error::shape(
                "retention",
                format!("{:?} {:?} {:?} with {heads} heads", qv.shape(), kv.shape(), vv.shape()),
            ));
        }
        let masks: Vec<Vec<T>> = gammas.iter().map(|&g| decay_mask(len, g)).collect();
        let mut out = vec![T::zero(); groups * len * dv];
        for g in 0..groups {
            let qs = &qv.data()[g * len * dk..(g + 1) * len * dk];
            let ks = &kv.data()[g * len * dk..(g + 1) * len * dk];
            let vs = &vv.data()[g * len * dv..(g + 1) * len * dv];
            let dst = &mut out[g * len * dv..(g + 1) * len * dv];
            match self.retention_form {
                RetentionForm::Parallel => parallel_core(qs, ks, vs, len, dk, dv, &masks[g % heads], dst),
                RetentionForm::Recurrent => recurrent_core(qs, ks, vs, len, dk, dv, gammas[g % heads], dst),
            }
        }
        let t = Tensor::from_vec(&[groups, len, dv], out)?;
        Ok(self.push(
            t,
            Op::Retention {
                q,
                k,
                v,
                masks,
                groups,
                len,
                dk,
                dv,
            },
        ))
    }

    /// Mean over the token axis: `(B, N, C) -> (B, C)`.
    pub fn mean_tokens(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let &[batch, tokens, channels] = xv.shape() else {
            return Err(Error::shape("mean_tokens", format!("{:?}", xv.shape())));
        };
        let inv = T::lit(1.0 / tokens as f64);
        let mut out = vec![T::zero(); batch * channels];
        for b in 0..batch {
            let dst = &mut out[b * channels..(b + 1) * channels];
            for row in xv.data()[b * tokens * channels..(b + 1) * tokens * channels].chunks_exact(channels) {
                dst.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
            }
            dst.iter_mut().for_each(|d| *d *= inv);
        }
        let t = Tensor::from_vec(&[batch, channels], out)?;
        Ok(self.push(
            t,
            Op::MeanTokens {
                x,
                batch,
                tokens,
                channels,
            },
        ))
    }

    /// Mean softmax cross-entropy of `(B, C)` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let &[batch, classes] = lv.shape() else {
            return Err(Error::shape("cross_entropy", format!("{:?}", lv.shape())));
        };
        if labels.len() != batch {
            return Err(Error::shape(
                "cross_entropy",
                format!("{batch} rows, {} labels", labels.len()),
            ));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelRange { label, classes });
        }
        let mut probs = lv.data().to_vec();
        let mut loss = T::zero();
        for (row, &y) in probs.chunks_exact_mut(classes).zip(labels) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            loss += lse - row[y];
            row.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        let loss = loss / T::lit(batch as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
                classes,
            },
        ))
    }

    /// `sum(x ⊙ weights)` as a scalar node.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor<T>) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != weights.shape() {
            return Err(Error::shape(
                "weighted_sum",
                format!("{:?} vs {:?}", xv.shape(), weights.shape()),
            ));
        }
        let s = xv.data().iter().zip(weights.data()).map(|(&a, &b)| a * b).sum();
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { x, weights }))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, root: Var) -> Result<Grads<T>> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(Error::shape("backward", format!("root must be scalar, got {:?}", rv.shape())));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::ones(rv.shape()));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn backprop(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let val = |v: Var| self.value(v);
        match &self.nodes[i].op {
            Op::Input | Op::Param(_) => {}
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.scale(-T::one()));
            }
            Op::Mul(a, b) => {
                let ga = g.zip_map(val(*b), "mul", |x, y| x * y)?;
                let gb = g.zip_map(val(*a), "mul", |x, y| x * y)?;
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::Scale(a, s) => accumulate(grads, *a, g.scale(*s)),
            Op::AddBroadcast(a, b) => {
                let bv = val(*b);
                let mut gb = vec![T::zero(); bv.len()];
                for chunk in g.data().chunks_exact(bv.len()) {
                    gb.iter_mut().zip(chunk).for_each(|(d, &x)| *d += x);
                }
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, Tensor::from_vec(bv.shape(), gb)?);
            }
            Op::Linear {
                x,
                w,
                b,
                rows,
                inp,
                out,
            } => {
                let (xv, wv) = (val(*x), val(*w));
                let mut gx = vec![T::zero(); rows * inp];
                gemm(false, true, *rows, *inp, *out, T::one(), g.data(), wv.data(), T::zero(), &mut gx);
                let mut gw = vec![T::zero(); inp * out];
                gemm(true, false, *inp, *out, *rows, T::one(), xv.data(), g.data(), T::zero(), &mut gw);
                accumulate(grads, *x, Tensor::from_vec(xv.shape(), gx)?);
                accumulate(grads, *w, Tensor::from_vec(wv.shape(), gw)?);
                if let Some(b) = b {
                    let mut gb = vec![T::zero(); *out];
                    for row in g.data().chunks_exact(*out) {
                        gb.iter_mut().zip(row).for_each(|(d, &x)| *d += x);
                    }
                    accumulate(grads, *b, Tensor::from_vec(val(*b).shape(), gb)?);
                }
            }
            Op::Bmm {
                a,
                b,
                trans_b,
                groups,
                m,
                k,
                n,
            } => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (*m, *k, *n);
                let mut ga = vec![T::zero(); av.len()];
                let mut gb = vec![T::zero(); bv.len()];
                for grp in 0..*groups {
                    let gs = &g.data()[grp * m * n..(grp + 1) * m * n];
                    let asl = &av.data()[grp * m * k..(grp + 1) * m * k];
                    let bsl = &bv.data()[grp * k * n..(grp + 1) * k * n];
                    let gad = &mut ga[grp * m * k..(grp + 1) * m * k];
                    let gbd = &mut gb[grp * k * n..(grp + 1) * k * n];
                    if *trans_b {
                        gemm(false, false, m, k, n, T::one(), gs, bsl, T::zero(), gad);
                        gemm(true, false, n, k, m, T::one(), gs, asl, T::zero(), gbd);
                    } else {
                        gemm(false, true, m, k, n, T::one(), gs, bsl, T::zero(), gad);
                        gemm(true, false, k, n, m, T::one(), asl, gs, T::zero(), gbd);
                    }
                }
                accumulate(grads, *a, Tensor::from_vec(av.shape(), ga)?);
                accumulate(grads, *b, Tensor::from_vec(bv.shape(), gb)?);
            }
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                accumulate(grads, *x, g.permute(&inv)?);
            }
            Op::Reshape(x) => {
                accumulate(grads, *x, g.clone().reshape(val(*x).shape())?);
            }
            Op::Gelu(x) => {
                let gx = g.zip_map(val(*x), "gelu", |gy, x| {
                    let (cdf, pdf) = gelu_parts(x);
                    gy * (cdf + x * pdf)
                })?;
                accumulate(grads, *x, gx);
            }
            Op::Swish(x) => {
                let gx = g.zip_map(val(*x), "swish", |gy, x| {
                    let s = sigmoid(x);
                    gy * (s + x * s * (T::one() - s))
                })?;
                accumulate(grads, *x, gx);
            }
            Op::Softmax { x, dim } => {
                let y = self.nodes[i].value.as_ref().expect("softmax value");
                let mut gx = vec![T::zero(); y.len()];
                for ((yr, gr), dr) in y
                    .data()
                    .chunks_exact(*dim)
                    .zip(g.data().chunks_exact(*dim))
                    .zip(gx.chunks_exact_mut(*dim))
                {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((d, &yy), &gg) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yy * (gg - dot);
                    }
                }
                accumulate(grads, *x, Tensor::from_vec(y.shape(), gx)?);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
                dim,
            } => {
                let dim = *dim;
                let inv_n = T::lit(1.0 / dim as f64);
                let gamma_v = gamma.map(|p| val(p).data());
                let mut gx = vec![T::zero(); xhat.len()];
                let mut ggamma = vec![T::zero(); dim];
                let mut gbeta = vec![T::zero(); dim];
                let mut gxhat = vec![T::zero(); dim];
                for (r, ((hr, gr), dr)) in xhat
                    .chunks_exact(dim)
                    .zip(g.data().chunks_exact(dim))
                    .zip(gx.chunks_exact_mut(dim))
                    .enumerate()
                {
                    for j in 0..dim {
                        ggamma[j] += gr[j] * hr[j];
                        gbeta[j] += gr[j];
                        gxhat[j] = gamma_v.map_or(gr[j], |gv| gr[j] * gv[j]);
                    }
                    let mean_g = gxhat.iter().copied().sum::<T>() * inv_n;
                    let mean_gh = gxhat.iter().zip(hr).map(|(&a, &b)| a * b).sum::<T>() * inv_n;
                    for j in 0..dim {
                        dr[j] = rstd[r] * (gxhat[j] - mean_g - hr[j] * mean_gh);
                    }
                }
                accumulate(grads, *x, Tensor::from_vec(val(*x).shape(), gx)?);
                if let Some(p) = gamma {
                    accumulate(grads, *p, Tensor::from_vec(val(*p).shape(), ggamma)?);
                }
                if let Some(p) = beta {
                    accumulate(grads, *p, Tensor::from_vec(val(*p).shape(), gbeta)?);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
                outer,
                channels,
                inner,
                batch_stats,
            } => {
                let (outer, channels, inner) = (*outer, *channels, *inner);
                let gv = val(*gamma).data();
                let gd = g.data();
                let mut ggamma = vec![T::zero(); channels];
                let mut gbeta = vec![T::zero(); channels];
                for o in 0..outer {
                    for c in 0..channels {
                        let base = (o * channels + c) * inner;
                        for idx in base..base + inner {
                            ggamma[c] += gd[idx] * xhat[idx];
                            gbeta[c] += gd[idx];
                        }
                    }
                }
                let mut gx = vec![T::zero(); gd.len()];
                if *batch_stats {
                    // per-channel: rstd*gamma*(g - mean(g) - xhat*mean(g*xhat))
                    let inv = T::lit(1.0 / (outer * inner) as f64);
                    for o in 0..outer {
                        for c in 0..channels {
                            let base = (o * channels + c) * inner;
                            let (mg, mgh) = (gbeta[c] * inv, ggamma[c] * inv);
                            let s = rstd[c] * gv[c];
                            for idx in base..base + inner {
                                gx[idx] = s * (gd[idx] - mg - xhat[idx] * mgh);
                            }
                        }
                    }
                } else {
                    for o in 0..outer {
                        for c in 0..channels {
                            let base = (o * channels + c) * inner;
                            let s = rstd[c] * gv[c];
                            for idx in base..base + inner {
                                gx[idx] = s * gd[idx];
                            }
                        }
                    }
                }
                accumulate(grads, *x, Tensor::from_vec(val(*x).shape(), gx)?);
                accumulate(grads, *gamma, Tensor::from_vec(val(*gamma).shape(), ggamma)?);
                accumulate(grads, *beta, Tensor::from_vec(val(*beta).shape(), gbeta)?);
            }
            Op::Conv2d { x, w, b, geom } => {
                let (xv, wv) = (val(*x), val(*w));
                let (cr, cc) = (geom.col_rows(), geom.col_cols());
                let in_sz = geom.cin * geom.h * geom.w;
                let out_sz = geom.cout * cc;
                let mut cols = vec![T::zero(); cr * cc];
                let mut gcols = vec![T::zero(); cr * cc];
                let mut gw = vec![T::zero(); wv.len()];
                let mut gx = vec![T::zero(); xv.len()];
                let mut gb = vec![T::zero(); geom.cout];
                for n in 0..geom.batch {
                    let gs = &g.data()[n * out_sz..(n + 1) * out_sz];
                    geom.im2col(&xv.data()[n * in_sz..(n + 1) * in_sz], &mut cols);
                    gemm(false, true, geom.cout, cr, cc, T::one(), gs, &cols, T::one(), &mut gw);
                    gemm(true, false, cr, cc, geom.cout, T::one(), wv.data(), gs, T::zero(), &mut gcols);
                    geom.col2im(&gcols, &mut gx[n * in_sz..(n + 1) * in_sz]);
                    for (d, row) in gb.iter_mut().zip(gs.chunks_exact(cc)) {
                        *d += row.iter().copied().sum::<T>();
                    }
                }
                accumulate(grads, *x, Tensor::from_vec(xv.shape(), gx)?);
                accumulate(grads, *w, Tensor::from_vec(wv.shape(), gw)?);
                if let Some(b) = b {
                    accumulate(grads, *b, Tensor::from_vec(val(*b).shape(), gb)?);
                }
            }
            Op::Rotary { x, tables } => {
                let mut gx = g.clone();
                let block = tables.len() * tables.dim();
                for chunk in gx.data_mut().chunks_exact_mut(block) {
                    tables.rotate(chunk, true);
                }
                accumulate(grads, *x, gx);
            }
            Op::Retention {
                q,
                k,
                v,
                masks,
                groups,
                len,
                dk,
                dv,
            } => {
                let (qv, kv, vv) = (val(*q), val(*k), val(*v));
                let (len, dk, dv) = (*len, *dk, *dv);
                let mut gq = vec![T::zero(); qv.len()];
                let mut gk = vec![T::zero(); kv.len()];
                let mut gvv = vec![T::zero(); vv.len()];
                let heads = masks.len();
                for grp in 0..*groups {
                    let (qa, qb) = (grp * len * dk, (grp + 1) * len * dk);
                    let (va, vb) = (grp * len * dv, (grp + 1) * len * dv);
                    core_backward(
                        &qv.data()[qa..qb],
                        &kv.data()[qa..qb],
                        &vv.data()[va..vb],
                        &g.data()[va..vb],
                        len,
                        dk,
                        dv,
                        &masks[grp % heads],
                        &mut gq[qa..qb],
                        &mut gk[qa..qb],
                        &mut gvv[va..vb],
                    );
                }
                accumulate(grads, *q, Tensor::from_vec(qv.shape(), gq)?);
                accumulate(grads, *k, Tensor::from_vec(kv.shape(), gk)?);
                accumulate(grads, *v, Tensor::from_vec(vv.shape(), gvv)?);
            }
            Op::MeanTokens {
                x,
                batch,
                tokens,
                channels,
            } => {
                let inv = T::lit(1.0 / *tokens as f64);
                let mut gx = Vec::with_capacity(batch * tokens * channels);
                for b in 0..*batch {
                    let row = &g.data()[b * channels..(b + 1) * channels];
                    for _ in 0..*tokens {
                        gx.extend(row.iter().map(|&v| v * inv));
                    }
                }
                accumulate(grads, *x, Tensor::from_vec(val(*x).shape(), gx)?);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
                classes,
            } => {
                let scale = g.data()[0] / T::lit(labels.len() as f64);
                let mut gl: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &y) in labels.iter().enumerate() {
                    gl[r * classes + y] -= scale;
                }
                accumulate(grads, *logits, Tensor::from_vec(val(*logits).shape(), gl)?);
            }
            Op::WeightedSum { x, weights } => {
                accumulate(grads, *x, weights.scale(g.data()[0]));
            }
        }
        Ok(())
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Result of a reverse sweep.
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients per parameter, summed over every node that read it.
    /// Parameters that did not reach the root get `None`.
    pub fn params(&self, graph: &Graph<'_, T>) -> Vec<Option<Tensor<T>>> {
        let mut out: Vec<Option<Tensor<T>>> = (0..graph.store.len()).map(|_| None).collect();
        for (node, g) in graph.nodes.iter().zip(&self.grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                match &mut out[id.0] {
                    Some(acc) => acc.add_assign(g),
                    slot @ None => *slot = Some(g.clone()),
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central differences of `f` around each coordinate of `x`.
    fn numeric_grad(x: &Tensor<f64>, f: impl Fn(&Tensor<f64>) -> f64) -> Tensor<f64> {
        let eps = 1e-6;
        let mut g = Tensor::zeros(x.shape());
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += eps;
            let mut xm = x.clone();
            xm.data_mut()[i] -= eps;
            g.data_mut()[i] = (f(&xp) - f(&xm)) / (2.0 * eps);
        }
        g
    }

    fn check_unary(shape: &[usize], seed: u64, build: impl Fn(&mut Graph<'_, f64>, Var) -> Var) {
        let store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::<f64>::randn(shape, 1.0, &mut rng);
        let eval = |x: &Tensor<f64>| -> (f64, Option<Tensor<f64>>) {
            let mut g = Graph::new(&store, true);
            let xv = g.input(x.clone());
            let y = build(&mut g, xv);
            let mut r = ChaCha8Rng::seed_from_u64(99);
            let w = Tensor::randn(g.shape(y), 1.0, &mut r);
            let s = g.weighted_sum(y, w).unwrap();
            let grads = g.backward(s).unwrap();
            (g.value(s).data()[0], grads.get(xv).cloned())
        };
        let (_, analytic) = eval(&x);
        let numeric = numeric_grad(&x, |x| eval(x).0);
        let err = analytic.unwrap().max_rel_diff(&numeric, 1e-7);
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn elementwise_and_layout_ops_backprop() {
        check_unary(&[2, 3, 4], 1, |g, x| g.gelu(x));
        check_unary(&[2, 3, 4], 2, |g, x| g.swish(x));
        check_unary(&[2, 3, 4], 3, |g, x| g.softmax(x));
        check_unary(&[2, 3, 4], 4, |g, x| g.permute(x, &[2, 0, 1]).unwrap());
        check_unary(&[2, 3, 4], 5, |g, x| g.layer_norm(x, None, None, 1e-5).unwrap());
        check_unary(&[2, 3, 4], 6, |g, x| g.mean_tokens(x).unwrap());
        check_unary(&[2, 3, 4], 7, |g, x| g.bmm(x, x, true).unwrap());
        check_unary(&[2, 6, 4], 8, |g, x| {
            let theta = crate::temporal::retention::rotary_theta(4, 10000.0);
            g.rotary(x, &theta).unwrap()
        });
        check_unary(&[4, 5, 4], 9, |g, x| g.retention(x, x, x, &[0.9, 0.5]).unwrap());
        check_unary(&[3, 4], 10, |g, x| g.cross_entropy(x, &[0, 3, 1]).unwrap());
    }

    #[test]
    fn batch_norm_train_mode_backprop() {
        let mut store = ParamStore::<f64>::new();
        let gamma = store.register("g", Tensor::from_vec(&[3], vec![0.5, 1.5, -1.0]).unwrap(), true);
        let beta = store.register("b", Tensor::from_vec(&[3], vec![0.1, 0.0, 0.2]).unwrap(), true);
        let rm = store.register("rm", Tensor::zeros(&[3]), false);
        let rv = store.register("rv", Tensor::ones(&[3]), false);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::<f64>::randn(&[2, 3, 2, 2], 1.0, &mut rng);
        let w = Tensor::<f64>::randn(&[2, 3, 2, 2], 1.0, &mut rng);
        let eval = |x: &Tensor<f64>| {
            let mut g = Graph::new(&store, true);
            let xv = g.input(x.clone());
            let (gp, bp) = (g.param(gamma), g.param(beta));
            let y = g.batch_norm(xv, gp, bp, rm, rv, 1e-5, 0.1).unwrap();
            let s = g.weighted_sum(y, w.clone()).unwrap();
            let grads = g.backward(s).unwrap();
            (g.value(s).data()[0], grads.get(xv).cloned().unwrap())
        };
        let numeric = numeric_grad(&x, |x| eval(x).0);
        assert!(eval(&x).1.max_rel_diff(&numeric, 1e-7) < 1e-6);
    }

    #[test]
    fn batch_norm_queues_running_updates_only_in_train_mode() {
        let mut store = ParamStore::<f64>::new();
        let gamma = store.register("g", Tensor::ones(&[1]), true);
        let beta = store.register("b", Tensor::zeros(&[1]), true);
        let rm = store.register("rm", Tensor::zeros(&[1]), false);
        let rv = store.register("rv", Tensor::ones(&[1]), false);
        let x = Tensor::from_vec(&[4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut g = Graph::new(&store, true);
        let xv = g.input(x.clone());
        let (gp, bp) = (g.param(gamma), g.param(beta));
        g.batch_norm(xv, gp, bp, rm, rv, 1e-5, 0.1).unwrap();
        let ups = g.take_buffer_updates();
        assert_eq!(ups.len(), 2);
        assert!((ups[0].1.data()[0] - 0.25).abs() < 1e-12);
        // unbiased variance of 1..4 is 5/3
        assert!((ups[1].1.data()[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);
        let mut ge = Graph::new(&store, false);
        let xv = ge.input(x);
        let (gp, bp) = (ge.param(gamma), ge.param(beta));
        let y = ge.batch_norm(xv, gp, bp, rm, rv, 0.0, 0.1).unwrap();
        assert!(ge.take_buffer_updates().is_empty());
        assert_eq!(ge.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn conv_matches_direct_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = Tensor::<f64>::randn(&[2, 2, 5, 5], 1.0, &mut rng);
        let w = Tensor::<f64>::randn(&[3, 2, 3, 3], 1.0, &mut rng);
        let store = ParamStore::new();
        let mut g = Graph::new(&store, false);
        let (xv, wv) = (g.input(x.clone()), g.input(w.clone()));
        let y = g.conv2d(xv, wv, None, 2, 1).unwrap();
        assert_eq!(g.shape(y), &[2, 3, 3, 3]);
        for n in 0..2 {
            for d in 0..3 {
                for oy in 0..3 {
                    for ox in 0..3 {
                        let mut s = 0.0;
                        for c in 0..2 {
                            for j in -1i32..=1 {
                                for k in -1i32..=1 {
                                    let (yy, xx) = (oy as i32 * 2 + j, ox as i32 * 2 + k);
                                    if (0..5).contains(&yy) && (0..5).contains(&xx) {
                                        s += w.data()[((d * 2 + c) * 3 + (j + 1) as usize) * 3 + (k + 1) as usize]
                                            * x.data()[((n * 2 + c) * 5 + yy as usize) * 5 + xx as usize];
                                    }
                                }
                            }
                        }
                        let got = g.value(y).data()[((n * 3 + d) * 3 + oy) * 3 + ox];
                        assert!((got - s).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn conv_and_linear_backprop() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let w = Tensor::<f64>::randn(&[3, 2, 3, 3], 0.5, &mut rng);
        let b = Tensor::<f64>::randn(&[3], 0.5, &mut rng);
        check_unary(&[2, 2, 6, 6], 14, move |g, x| {
            let (wv, bv) = (g.input(w.clone()), g.input(b.clone()));
            g.conv2d(x, wv, Some(bv), 2, 1).unwrap()
        });
        let lw = Tensor::<f64>::randn(&[4, 3], 0.5, &mut rng);
        check_unary(&[2, 5, 4], 15, move |g, x| {
            let wv = g.input(lw.clone());
            g.linear(x, wv, None).unwrap()
        });
    }

    #[test]
    fn shared_parameter_gradients_accumulate() {
        let mut store = ParamStore::<f64>::new();
        let p = store.register("p", Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap(), true);
        let mut g = Graph::new(&store, true);
        let a = g.param(p);
        let b = g.param(p);
        let y = g.mul(a, b).unwrap();
        let s = g.weighted_sum(y, Tensor::ones(&[2])).unwrap();
        let grads = g.backward(s).unwrap();
        let pg = grads.params(&g);
        assert_eq!(pg[0].as_ref().unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store, true);
        let x = g.input(Tensor::zeros(&[2]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_label() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store, true);
        let x = g.input(Tensor::zeros(&[1, 3]));
        assert!(matches!(
            g.cross_entropy(x, &[3]),
            Err(Error::LabelRange { label: 3, classes: 3 })
        ));
    }
}
