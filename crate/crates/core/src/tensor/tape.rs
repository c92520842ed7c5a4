//! Recording tape for reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value and enough saved
//! state to run its backward rule. Nodes are appended in evaluation order, so
//! the tape is topologically sorted by construction and a single reverse sweep
//! computes all gradients.
//!
//! Matrix-shaped operations treat any tensor as `[rows, cols]` with `cols` the
//! last dimension. Shape mismatches between operands are programming errors
//! and panic; non-finite forward values are recorded and reported by
//! [`Tape::scalar`] and [`Tape::backprop`].

use std::collections::BTreeMap;

use super::kernels::{self, matmul_acc, matmul_tn_acc};
use super::{GradMap, ParamStore, Real, Tensor};
use crate::error::{FateError, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A block of rows contributed to every sequence by [`Tape::assemble`].
#[derive(Clone, Copy, Debug)]
pub enum Part {
    /// `[n, d]` rows repeated verbatim in each sequence.
    Shared(Var),
    /// `[batch * n, d]` rows, `n` consecutive rows per sequence.
    PerSample(Var),
}

#[derive(Debug)]
enum Op<F> {
    Leaf {
        name: Option<String>,
    },
    MatMul {
        a: usize,
        b: usize,
        n: usize,
        k: usize,
        m: usize,
    },
    MatMulNT {
        a: usize,
        b: usize,
        n: usize,
        k: usize,
        m: usize,
    },
    AddBias {
        x: usize,
        bias: usize,
    },
    AddTiled {
        x: usize,
        table: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        x: usize,
        factor: F,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Gelu {
        x: usize,
    },
    Relu {
        x: usize,
    },
    Attention {
        qkv: usize,
        batch: usize,
        seq: usize,
        heads: usize,
        valid: Vec<usize>,
        probs: Vec<F>,
    },
    Assemble {
        parts: Vec<(usize, bool, usize)>,
        batch: usize,
    },
    PoolTokens {
        x: usize,
        seq: usize,
        ranges: Vec<(usize, usize)>,
    },
    Gather {
        x: usize,
        rows: Vec<usize>,
    },
    L2Normalize {
        x: usize,
        norms: Vec<F>,
    },
    Softmax {
        x: usize,
    },
    ProbCrossEntropy {
        probs: usize,
        targets: Vec<usize>,
        weights: Vec<F>,
    },
    SoftmaxCrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        weights: Vec<F>,
        probs: Vec<F>,
    },
    Sum {
        x: usize,
    },
    Mean {
        x: usize,
    },
    Dot {
        a: usize,
        b: usize,
    },
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Ordered record of primitive applications.
#[derive(Debug, Default)]
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
    fault: Option<&'static str>,
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            fault: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// The single value of a scalar node, or the recorded non-finite fault.
    pub fn scalar(&self, v: Var) -> Result<F> {
        if let Some(op) = self.fault {
            return Err(FateError::NonFinite { op });
        }
        let t = self.value(v);
        if t.len() != 1 {
            return Err(FateError::NonScalarLoss(t.shape().to_vec()));
        }
        Ok(t.data()[0])
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.fault {
            Some(op) => Err(FateError::NonFinite { op }),
            None => Ok(()),
        }
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool, name: &'static str) -> Var {
        if self.fault.is_none() && !value.is_finite() {
            self.fault = Some(name);
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    fn dims2(&self, v: usize) -> (usize, usize) {
        let t = &self.nodes[v].value;
        (t.rows(), t.cols())
    }

    // ----- leaves -----

    pub fn leaf(&mut self, value: Tensor<F>, name: Option<String>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf { name }, requires_grad, "leaf")
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, None, false)
    }

    /// Registers a stored parameter; it receives a gradient only if trainable.
    pub fn param(&mut self, store: &ParamStore<F>, name: &str) -> Result<Var> {
        let p = store.get(name)?;
        Ok(self.leaf(p.tensor.clone(), Some(name.to_string()), p.trainable))
    }

    // ----- linear algebra -----

    /// `a[n,k] @ b[k,m]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (n, k) = self.dims2(a.0);
        let (k2, m) = self.dims2(b.0);
        assert_eq!(k, k2, "matmul inner dimensions");
        let mut out = vec![F::zero(); n * m];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, n, k, m);
        let rg = self.rg(&[a.0, b.0]);
        self.push(
            Tensor::from_parts(vec![n, m], out),
            Op::MatMul { a: a.0, b: b.0, n, k, m },
            rg,
            "matmul",
        )
    }

    /// `a[n,k] @ b[m,k]^T`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (n, k) = self.dims2(a.0);
        let (m, k2) = self.dims2(b.0);
        assert_eq!(k, k2, "matmul_nt inner dimensions");
        let bt = kernels::transpose(self.value(b).data(), m, k);
        let mut out = vec![F::zero(); n * m];
        matmul_acc(self.value(a).data(), &bt, &mut out, n, k, m);
        let rg = self.rg(&[a.0, b.0]);
        self.push(
            Tensor::from_parts(vec![n, m], out),
            Op::MatMulNT { a: a.0, b: b.0, n, k, m },
            rg,
            "matmul_nt",
        )
    }

    /// `x[n,m] + bias[m]` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let (n, m) = self.dims2(x.0);
        assert_eq!(self.value(bias).len(), m, "bias length");
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(m) {
            for (o, &bv) in row.iter_mut().zip(&b) {
                *o += bv;
            }
        }
        let rg = self.rg(&[x.0, bias.0]);
        self.push(
            Tensor::from_parts(vec![n, m], out),
            Op::AddBias { x: x.0, bias: bias.0 },
            rg,
            "add_bias",
        )
    }

    /// `x @ w + b`
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let h = self.matmul(x, w);
        self.add_bias(h, b)
    }

    /// Adds `table[r,c]` to each consecutive block of `r` rows of `x`.
    pub fn add_tiled(&mut self, x: Var, table: Var) -> Var {
        let (n, c) = self.dims2(x.0);
        let (r, c2) = self.dims2(table.0);
        assert_eq!(c, c2, "add_tiled width");
        assert_eq!(n % r, 0, "add_tiled rows must be a multiple of the table");
        let t = self.value(table).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for block in out.chunks_mut(r * c) {
            for (o, &tv) in block.iter_mut().zip(&t) {
                *o += tv;
            }
        }
        let shape = self.value(x).shape().to_vec();
        let rg = self.rg(&[x.0, table.0]);
        self.push(
            Tensor::from_parts(shape, out),
            Op::AddTiled { x: x.0, table: table.0 },
            rg,
            "add_tiled",
        )
    }

    fn elementwise(&mut self, a: Var, b: Var, f: impl Fn(F, F) -> F) -> (Tensor<F>, bool) {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.len(), vb.len(), "elementwise operand sizes");
        let out = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        (Tensor::from_parts(va.shape().to_vec(), out), self.rg(&[a.0, b.0]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (t, rg) = self.elementwise(a, b, |x, y| x + y);
        self.push(t, Op::Add { a: a.0, b: b.0 }, rg, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (t, rg) = self.elementwise(a, b, |x, y| x - y);
        self.push(t, Op::Sub { a: a.0, b: b.0 }, rg, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (t, rg) = self.elementwise(a, b, |x, y| x * y);
        self.push(t, Op::Mul { a: a.0, b: b.0 }, rg, "mul")
    }

    pub fn scale(&mut self, x: Var, factor: F) -> Var {
        let v = self.value(x);
        let t = Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|&e| e * factor).collect());
        let rg = self.rg(&[x.0]);
        self.push(t, Op::Scale { x: x.0, factor }, rg, "scale")
    }

    // ----- normalization and activations -----

    /// Row-wise layer normalization with affine `gamma`, `beta` of width `cols`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (n, d) = self.dims2(x.0);
        assert_eq!(self.value(gamma).len(), d);
        assert_eq!(self.value(beta).len(), d);
        let eps = F::lit(1e-5);
        let df = F::from_usize_(d);
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![F::zero(); n * d];
        let mut rstd = vec![F::zero(); n];
        let mut out = vec![F::zero(); n * d];
        for i in 0..n {
            let row = &xs[i * d..(i + 1) * d];
            let mean = row.iter().copied().sum::<F>() / df;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / df;
            let r = F::one() / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..d {
                let h = (row[j] - mean) * r;
                xhat[i * d + j] = h;
                out[i * d + j] = h * g[j] + b[j];
            }
        }
        let shape = self.value(x).shape().to_vec();
        let rg = self.rg(&[x.0, gamma.0, beta.0]);
        self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                rstd,
            },
            rg,
            "layer_norm",
        )
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let t = Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|&e| kernels::gelu(e)).collect());
        let rg = self.rg(&[x.0]);
        self.push(t, Op::Gelu { x: x.0 }, rg, "gelu")
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let t = Tensor::from_parts(
            v.shape().to_vec(),
            v.data().iter().map(|&e| e.max(F::zero())).collect(),
        );
        let rg = self.rg(&[x.0]);
        self.push(t, Op::Relu { x: x.0 }, rg, "relu")
    }

    /// Multi-head scaled dot-product attention over packed `qkv[batch*seq, 3d]`.
    ///
    /// `valid[b]` limits the keys sequence `b` may attend to (padding mask);
    /// `None` means all `seq` positions are valid. Returns `[batch*seq, d]`.
    pub fn attention(&mut self, qkv: Var, batch: usize, seq: usize, heads: usize, valid: Option<&[usize]>) -> Var {
        let (rows, w3) = self.dims2(qkv.0);
        assert_eq!(rows, batch * seq, "attention rows");
        assert_eq!(w3 % 3, 0);
        let d = w3 / 3;
        assert_eq!(d % heads, 0, "heads must divide width");
        let dh = d / heads;
        let valid: Vec<usize> = match valid {
            Some(v) => {
                assert_eq!(v.len(), batch);
                assert!(v.iter().all(|&l| l >= 1 && l <= seq));
                v.to_vec()
            }
            None => vec![seq; batch],
        };
        let scale = F::one() / F::from_usize_(dh).sqrt();
        let src = self.value(qkv).data();
        let mut probs = vec![F::zero(); batch * heads * seq * seq];
        let mut out = vec![F::zero(); batch * seq * d];
        let mut q = vec![F::zero(); seq * dh];
        let mut k = vec![F::zero(); seq * dh];
        let mut v = vec![F::zero(); seq * dh];
        let mut o = vec![F::zero(); seq * dh];
        for b in 0..batch {
            let kv_len = valid[b];
            for h in 0..heads {
                gather_head(src, b, seq, d, h, dh, &mut q, &mut k, &mut v);
                let p = &mut probs[((b * heads + h) * seq) * seq..((b * heads + h + 1) * seq) * seq];
                for i in 0..seq {
                    let qi = &q[i * dh..(i + 1) * dh];
                    let prow = &mut p[i * seq..(i + 1) * seq];
                    for j in 0..kv_len {
                        prow[j] = kernels::dot(qi, &k[j * dh..(j + 1) * dh]) * scale;
                    }
                    kernels::softmax_in_place(&mut prow[..kv_len]);
                }
                o.iter_mut().for_each(|e| *e = F::zero());
                matmul_acc(p, &v, &mut o, seq, seq, dh);
                for i in 0..seq {
                    let dst = &mut out[(b * seq + i) * d + h * dh..(b * seq + i) * d + (h + 1) * dh];
                    dst.copy_from_slice(&o[i * dh..(i + 1) * dh]);
                }
            }
        }
        let rg = self.rg(&[qkv.0]);
        self.push(
            Tensor::from_parts(vec![batch * seq, d], out),
            Op::Attention {
                qkv: qkv.0,
                batch,
                seq,
                heads,
                valid,
                probs,
            },
            rg,
            "attention",
        )
    }

    // ----- token bookkeeping -----

    /// Concatenates row blocks into `batch` sequences laid out back to back.
    pub fn assemble(&mut self, batch: usize, parts: &[Part]) -> Var {
        assert!(!parts.is_empty());
        let cols = match parts[0] {
            Part::Shared(v) | Part::PerSample(v) => self.value(v).cols(),
        };
        let mut spec = Vec::with_capacity(parts.len());
        for p in parts {
            let (id, shared) = match *p {
                Part::Shared(v) => (v.0, true),
                Part::PerSample(v) => (v.0, false),
            };
            let (r, c) = self.dims2(id);
            assert_eq!(c, cols, "assemble widths");
            let per = if shared {
                r
            } else {
                assert_eq!(r % batch, 0, "per-sample part rows");
                r / batch
            };
            spec.push((id, shared, per));
        }
        let seq: usize = spec.iter().map(|s| s.2).sum();
        let mut out = Vec::with_capacity(batch * seq * cols);
        for b in 0..batch {
            for &(id, shared, per) in &spec {
                let data = self.nodes[id].value.data();
                let start = if shared { 0 } else { b * per * cols };
                out.extend_from_slice(&data[start..start + per * cols]);
            }
        }
        let ids: Vec<usize> = spec.iter().map(|s| s.0).collect();
        let rg = self.rg(&ids);
        self.push(
            Tensor::from_parts(vec![batch * seq, cols], out),
            Op::Assemble { parts: spec, batch },
            rg,
            "assemble",
        )
    }

    /// Mean of rows `start..start+len` of each sequence; `ranges[b]` per sequence.
    pub fn pool_tokens(&mut self, x: Var, seq: usize, ranges: &[(usize, usize)]) -> Var {
        let (rows, c) = self.dims2(x.0);
        let batch = ranges.len();
        assert_eq!(rows, batch * seq, "pool_tokens rows");
        let xs = self.value(x).data();
        let mut out = vec![F::zero(); batch * c];
        for (b, &(start, len)) in ranges.iter().enumerate() {
            assert!(len >= 1 && start + len <= seq, "pool range");
            let inv = F::one() / F::from_usize_(len);
            let dst = &mut out[b * c..(b + 1) * c];
            for t in start..start + len {
                let src = &xs[(b * seq + t) * c..(b * seq + t + 1) * c];
                for (o, &s) in dst.iter_mut().zip(src) {
                    *o += s;
                }
            }
            dst.iter_mut().for_each(|e| *e *= inv);
        }
        let rg = self.rg(&[x.0]);
        self.push(
            Tensor::from_parts(vec![batch, c], out),
            Op::PoolTokens {
                x: x.0,
                seq,
                ranges: ranges.to_vec(),
            },
            rg,
            "pool_tokens",
        )
    }

    /// Selects rows of a matrix (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let (n, c) = self.dims2(x.0);
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            assert!(r < n, "gather row out of range");
            out.extend_from_slice(&xs[r * c..(r + 1) * c]);
        }
        let rg = self.rg(&[x.0]);
        self.push(
            Tensor::from_parts(vec![rows.len(), c], out),
            Op::Gather {
                x: x.0,
                rows: rows.to_vec(),
            },
            rg,
            "gather_rows",
        )
    }

    /// Scales each row to unit Euclidean norm; a zero row is an error.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let (n, c) = self.dims2(x.0);
        let xs = self.value(x).data();
        let mut norms = Vec::with_capacity(n);
        let mut out = Vec::with_capacity(n * c);
        for i in 0..n {
            let row = &xs[i * c..(i + 1) * c];
            let norm = kernels::dot(row, row).sqrt();
            if norm == F::zero() {
                return Err(FateError::ZeroVector { row: i });
            }
            norms.push(norm);
            out.extend(row.iter().map(|&v| v / norm));
        }
        let shape = self.value(x).shape().to_vec();
        let rg = self.rg(&[x.0]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::L2Normalize { x: x.0, norms }, rg, "l2_normalize"))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let c = v.cols();
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(c) {
            kernels::softmax_in_place(row);
        }
        let t = Tensor::from_parts(v.shape().to_vec(), out);
        let rg = self.rg(&[x.0]);
        self.push(t, Op::Softmax { x: x.0 }, rg, "softmax_rows")
    }

    // ----- losses and reductions -----

    /// `sum_i weights[i] * -log(max(probs[i, targets[i]], eps))`.
    pub fn prob_cross_entropy(&mut self, probs: Var, targets: &[usize], weights: &[F]) -> Var {
        let (n, c) = self.dims2(probs.0);
        assert_eq!(targets.len(), n);
        assert_eq!(weights.len(), n);
        let eps = F::lit(super::PROB_EPS);
        let ps = self.value(probs).data();
        let mut loss = F::zero();
        for i in 0..n {
            assert!(targets[i] < c);
            if weights[i] != F::zero() {
                loss += weights[i] * -ps[i * c + targets[i]].max(eps).ln();
            }
        }
        let rg = self.rg(&[probs.0]);
        self.push(
            Tensor::scalar(loss),
            Op::ProbCrossEntropy {
                probs: probs.0,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
            rg,
            "prob_cross_entropy",
        )
    }

    /// `sum_i weights[i] * -log softmax(logits[i])[targets[i]]`.
    ///
    /// With `exclude_diag`, column `i` is left out of row `i`'s softmax (the
    /// anchor never competes with itself). Rows with zero weight are skipped.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[F], exclude_diag: bool) -> Var {
        let (n, c) = self.dims2(logits.0);
        assert_eq!(targets.len(), n);
        assert_eq!(weights.len(), n);
        let zs = self.value(logits).data();
        let mut probs = vec![F::zero(); n * c];
        let mut loss = F::zero();
        for i in 0..n {
            if weights[i] == F::zero() {
                continue;
            }
            let t = targets[i];
            assert!(t < c && !(exclude_diag && t == i), "invalid target");
            let row = &zs[i * c..(i + 1) * c];
            let keep = |j: usize| !(exclude_diag && j == i);
            let max = (0..c).filter(|&j| keep(j)).map(|j| row[j]).fold(F::neg_infinity(), F::max);
            let mut sum = F::zero();
            let prow = &mut probs[i * c..(i + 1) * c];
            for j in (0..c).filter(|&j| keep(j)) {
                let e = (row[j] - max).exp();
                prow[j] = e;
                sum += e;
            }
            for j in (0..c).filter(|&j| keep(j)) {
                prow[j] /= sum;
            }
            let nll = sum.ln() + max - row[t];
            loss += weights[i] * nll;
        }
        let rg = self.rg(&[logits.0]);
        self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            rg,
            "softmax_cross_entropy",
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<F>();
        let rg = self.rg(&[x.0]);
        self.push(Tensor::scalar(s), Op::Sum { x: x.0 }, rg, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().copied().sum::<F>() / F::from_usize_(v.len());
        let rg = self.rg(&[x.0]);
        self.push(Tensor::scalar(s), Op::Mean { x: x.0 }, rg, "mean")
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).len(), self.value(b).len());
        let s = kernels::dot(self.value(a).data(), self.value(b).data());
        let rg = self.rg(&[a.0, b.0]);
        self.push(Tensor::scalar(s), Op::Dot { a: a.0, b: b.0 }, rg, "dot")
    }

    // ----- reverse sweep -----

    /// Gradients of the scalar `loss` for every named trainable leaf.
    ///
    /// The tape is left untouched, so repeated calls give identical results.
    pub fn backprop(&self, loss: Var) -> Result<GradMap<F>> {
        self.check_finite()?;
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(FateError::NonScalarLoss(lv.shape().to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(FateError::DetachedLoss);
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);
        let mut out: GradMap<F> = BTreeMap::new();

        for id in (0..=loss.0).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            self.backward_node(id, &g, &mut grads, &mut out);
        }
        if out.values().any(|t| !t.is_finite()) {
            return Err(FateError::NonFinite { op: "backprop" });
        }
        Ok(out)
    }

    fn backward_node(&self, id: usize, g: &[F], grads: &mut [Option<Vec<F>>], out: &mut GradMap<F>) {
        let val = |i: usize| self.nodes[i].value.data();
        let wants = |i: usize| self.nodes[i].requires_grad;
        match &self.nodes[id].op {
            Op::Leaf { name } => {
                if let Some(name) = name {
                    let shape = self.nodes[id].value.shape().to_vec();
                    match out.get_mut(name) {
                        Some(t) => {
                            for (a, &b) in t.data_mut().iter_mut().zip(g) {
                                *a += b;
                            }
                        }
                        None => {
                            out.insert(name.clone(), Tensor::from_parts(shape, g.to_vec()));
                        }
                    }
                }
            }
            &Op::MatMul { a, b, n, k, m } => {
                if wants(a) {
                    let bt = kernels::transpose(val(b), k, m);
                    let ga = slot(grads, a, n * k);
                    matmul_acc(g, &bt, ga, n, m, k);
                }
                if wants(b) {
                    let gb = slot(grads, b, k * m);
                    matmul_tn_acc(val(a), g, gb, n, k, m);
                }
            }
            &Op::MatMulNT { a, b, n, k, m } => {
                if wants(a) {
                    let ga = slot(grads, a, n * k);
                    matmul_acc(g, val(b), ga, n, m, k);
                }
                if wants(b) {
                    let gb = slot(grads, b, m * k);
                    matmul_tn_acc(g, val(a), gb, n, m, k);
                }
            }
            &Op::AddBias { x, bias } => {
                if wants(x) {
                    add_into(slot(grads, x, g.len()), g);
                }
                if wants(bias) {
                    let m = self.nodes[bias].value.len();
                    let gb = slot(grads, bias, m);
                    for row in g.chunks(m) {
                        add_into(gb, row);
                    }
                }
            }
            &Op::AddTiled { x, table } => {
                if wants(x) {
                    add_into(slot(grads, x, g.len()), g);
                }
                if wants(table) {
                    let tl = self.nodes[table].value.len();
                    let gt = slot(grads, table, tl);
                    for block in g.chunks(tl) {
                        add_into(gt, block);
                    }
                }
            }
            &Op::Add { a, b } => {
                if wants(a) {
                    add_into(slot(grads, a, g.len()), g);
                }
                if wants(b) {
                    add_into(slot(grads, b, g.len()), g);
                }
            }
            &Op::Sub { a, b } => {
                if wants(a) {
                    add_into(slot(grads, a, g.len()), g);
                }
                if wants(b) {
                    let gb = slot(grads, b, g.len());
                    for (o, &v) in gb.iter_mut().zip(g) {
                        *o -= v;
                    }
                }
            }
            &Op::Mul { a, b } => {
                if wants(a) {
                    let vb = val(b);
                    let ga = slot(grads, a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * vb[i];
                    }
                }
                if wants(b) {
                    let va = val(a);
                    let gb = slot(grads, b, g.len());
                    for i in 0..g.len() {
                        gb[i] += g[i] * va[i];
                    }
                }
            }
            &Op::Scale { x, factor } => {
                let gx = slot(grads, x, g.len());
                for (o, &v) in gx.iter_mut().zip(g) {
                    *o += v * factor;
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let d = self.nodes[gamma].value.len();
                let n = rstd.len();
                if wants(beta) {
                    let gb = slot(grads, beta, d);
                    for row in g.chunks(d) {
                        add_into(gb, row);
                    }
                }
                if wants(gamma) {
                    let gg = slot(grads, gamma, d);
                    for i in 0..n {
                        for j in 0..d {
                            gg[j] += g[i * d + j] * xhat[i * d + j];
                        }
                    }
                }
                if wants(x) {
                    let gam = val(gamma).to_vec();
                    let df = F::from_usize_(d);
                    let gx = slot(grads, x, n * d);
                    let mut dxhat = vec![F::zero(); d];
                    for i in 0..n {
                        let mut s1 = F::zero();
                        let mut s2 = F::zero();
                        for j in 0..d {
                            let v = g[i * d + j] * gam[j];
                            dxhat[j] = v;
                            s1 += v;
                            s2 += v * xhat[i * d + j];
                        }
                        let m1 = s1 / df;
                        let m2 = s2 / df;
                        for j in 0..d {
                            gx[i * d + j] += rstd[i] * (dxhat[j] - m1 - xhat[i * d + j] * m2);
                        }
                    }
                }
            }
            &Op::Gelu { x } => {
                let vx = val(x);
                let gx = slot(grads, x, g.len());
                for i in 0..g.len() {
                    gx[i] += g[i] * kernels::gelu_grad(vx[i]);
                }
            }
            &Op::Relu { x } => {
                let vx = val(x);
                let gx = slot(grads, x, g.len());
                for i in 0..g.len() {
                    if vx[i] > F::zero() {
                        gx[i] += g[i];
                    }
                }
            }
            Op::Attention {
                qkv,
                batch,
                seq,
                heads,
                valid,
                probs,
            } => {
                let (qkv, batch, seq, heads) = (*qkv, *batch, *seq, *heads);
                let src = val(qkv);
                let d = self.nodes[id].value.cols();
                let dh = d / heads;
                let scale = F::one() / F::from_usize_(dh).sqrt();
                let gq = slot(grads, qkv, batch * seq * 3 * d);
                let mut q = vec![F::zero(); seq * dh];
                let mut k = vec![F::zero(); seq * dh];
                let mut v = vec![F::zero(); seq * dh];
                let mut go = vec![F::zero(); seq * dh];
                let mut dp = vec![F::zero(); seq * seq];
                let mut dq = vec![F::zero(); seq * dh];
                let mut dk = vec![F::zero(); seq * dh];
                let mut dv = vec![F::zero(); seq * dh];
                for b in 0..batch {
                    let kv_len = valid[b];
                    for h in 0..heads {
                        gather_head(src, b, seq, d, h, dh, &mut q, &mut k, &mut v);
                        for i in 0..seq {
                            let s = &g[(b * seq + i) * d + h * dh..(b * seq + i) * d + (h + 1) * dh];
                            go[i * dh..(i + 1) * dh].copy_from_slice(s);
                        }
                        let p = &probs[((b * heads + h) * seq) * seq..((b * heads + h + 1) * seq) * seq];
                        dv.iter_mut().for_each(|e| *e = F::zero());
                        dq.iter_mut().for_each(|e| *e = F::zero());
                        dk.iter_mut().for_each(|e| *e = F::zero());
                        // dV = P^T dO
                        matmul_tn_acc(p, &go, &mut dv, seq, seq, dh);
                        // dP = dO V^T, then softmax backward into scores
                        for i in 0..seq {
                            let goi = &go[i * dh..(i + 1) * dh];
                            let prow = &p[i * seq..(i + 1) * seq];
                            let drow = &mut dp[i * seq..(i + 1) * seq];
                            let mut acc = F::zero();
                            for j in 0..kv_len {
                                let val = kernels::dot(goi, &v[j * dh..(j + 1) * dh]);
                                drow[j] = val;
                                acc += val * prow[j];
                            }
                            for j in 0..kv_len {
                                drow[j] = prow[j] * (drow[j] - acc) * scale;
                            }
                            for j in kv_len..seq {
                                drow[j] = F::zero();
                            }
                        }
                        // dQ = dS K, dK = dS^T Q
                        matmul_acc(&dp, &k, &mut dq, seq, seq, dh);
                        matmul_tn_acc(&dp, &q, &mut dk, seq, seq, dh);
                        for i in 0..seq {
                            let base = (b * seq + i) * 3 * d;
                            for e in 0..dh {
                                gq[base + h * dh + e] += dq[i * dh + e];
                                gq[base + d + h * dh + e] += dk[i * dh + e];
                                gq[base + 2 * d + h * dh + e] += dv[i * dh + e];
                            }
                        }
                    }
                }
            }
            Op::Assemble { parts, batch } => {
                let cols = self.nodes[id].value.cols();
                let seq: usize = parts.iter().map(|p| p.2).sum();
                let mut offset = 0;
                for &(pid, shared, per) in parts {
                    if wants(pid) {
                        let len = self.nodes[pid].value.len();
                        let gp = slot(grads, pid, len);
                        for b in 0..*batch {
                            let src = &g[(b * seq + offset) * cols..(b * seq + offset + per) * cols];
                            let dst_start = if shared { 0 } else { b * per * cols };
                            add_into(&mut gp[dst_start..dst_start + per * cols], src);
                        }
                    }
                    offset += per;
                }
            }
            Op::PoolTokens { x, seq, ranges } => {
                let (x, seq) = (*x, *seq);
                let c = self.nodes[id].value.cols();
                let gx = slot(grads, x, ranges.len() * seq * c);
                for (b, &(start, len)) in ranges.iter().enumerate() {
                    let inv = F::one() / F::from_usize_(len);
                    let gb = &g[b * c..(b + 1) * c];
                    for t in start..start + len {
                        let dst = &mut gx[(b * seq + t) * c..(b * seq + t + 1) * c];
                        for (o, &v) in dst.iter_mut().zip(gb) {
                            *o += v * inv;
                        }
                    }
                }
            }
            Op::Gather { x, rows } => {
                let x = *x;
                let c = self.nodes[id].value.cols();
                let len = self.nodes[x].value.len();
                let gx = slot(grads, x, len);
                for (i, &r) in rows.iter().enumerate() {
                    add_into(&mut gx[r * c..(r + 1) * c], &g[i * c..(i + 1) * c]);
                }
            }
            Op::L2Normalize { x, norms } => {
                let x = *x;
                let y = self.nodes[id].value.data();
                let c = self.nodes[id].value.cols();
                let gx = slot(grads, x, y.len());
                for (i, &norm) in norms.iter().enumerate() {
                    let yr = &y[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let proj = kernels::dot(gr, yr);
                    for j in 0..c {
                        gx[i * c + j] += (gr[j] - yr[j] * proj) / norm;
                    }
                }
            }
            &Op::Softmax { x } => {
                let y = self.nodes[id].value.data();
                let c = self.nodes[id].value.cols();
                let gx = slot(grads, x, y.len());
                for i in 0..y.len() / c {
                    let yr = &y[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let s = kernels::dot(gr, yr);
                    for j in 0..c {
                        gx[i * c + j] += yr[j] * (gr[j] - s);
                    }
                }
            }
            Op::ProbCrossEntropy {
                probs,
                targets,
                weights,
            } => {
                let probs = *probs;
                let eps = F::lit(super::PROB_EPS);
                let ps = val(probs);
                let c = self.nodes[probs].value.cols();
                let gp = slot(grads, probs, ps.len());
                for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    let p = ps[i * c + t];
                    if w != F::zero() && p > eps {
                        gp[i * c + t] += -g[0] * w / p;
                    }
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                weights,
                probs,
                ..
            } => {
                let logits = *logits;
                let c = self.nodes[logits].value.cols();
                let gl = slot(grads, logits, probs.len());
                for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    if w == F::zero() {
                        continue;
                    }
                    let scale = g[0] * w;
                    for j in 0..c {
                        gl[i * c + j] += scale * probs[i * c + j];
                    }
                    gl[i * c + t] -= scale;
                }
            }
            &Op::Sum { x } => {
                let len = self.nodes[x].value.len();
                let gx = slot(grads, x, len);
                gx.iter_mut().for_each(|e| *e += g[0]);
            }
            &Op::Mean { x } => {
                let len = self.nodes[x].value.len();
                let share = g[0] / F::from_usize_(len);
                let gx = slot(grads, x, len);
                gx.iter_mut().for_each(|e| *e += share);
            }
            &Op::Dot { a, b } => {
                if wants(a) {
                    let vb = val(b);
                    let ga = slot(grads, a, vb.len());
                    for (o, &v) in ga.iter_mut().zip(vb) {
                        *o += g[0] * v;
                    }
                }
                if wants(b) {
                    let va = val(a);
                    let gb = slot(grads, b, va.len());
                    for (o, &v) in gb.iter_mut().zip(va) {
                        *o += g[0] * v;
                    }
                }
            }
        }
    }
}

fn slot<F: Real>(grads: &mut [Option<Vec<F>>], id: usize, len: usize) -> &mut [F] {
    grads[id].get_or_insert_with(|| vec![F::zero(); len]).as_mut_slice()
}

fn add_into<F: Real>(dst: &mut [F], src: &[F]) {
    for (o, &v) in dst.iter_mut().zip(src) {
        *o += v;
    }
}

#[allow(clippy::too_many_arguments)]
fn gather_head<F: Real>(src: &[F], b: usize, seq: usize, d: usize, h: usize, dh: usize, q: &mut [F], k: &mut [F], v: &mut [F]) {
    for i in 0..seq {
        let base = (b * seq + i) * 3 * d + h * dh;
        q[i * dh..(i + 1) * dh].copy_from_slice(&src[base..base + dh]);
        k[i * dh..(i + 1) * dh].copy_from_slice(&src[base + d..base + d + dh]);
        v[i * dh..(i + 1) * dh].copy_from_slice(&src[base + 2 * d..base + 2 * d + dh]);
    }
}
