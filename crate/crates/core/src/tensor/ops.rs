use super::kernels::{self, axis_split, check_axis, Broadcast};
use super::{Mask, Op, Result, Tape, TensorError, Var};

/// Leading batch extent and trailing matrix extents of a rank >= 2 shape.
fn matrix_dims(shape: &[usize]) -> (usize, usize, usize) {
    let r = shape.len();
    (shape[..r - 2].iter().product(), shape[r - 2], shape[r - 1])
}

impl Tape {
    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> TensorError {
        TensorError::ShapeMismatch {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    /// Batched matrix product `[.., m, k] x [.., k, n]`. The right operand's
    /// batch axes must equal a suffix of the left operand's (possibly none).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() < 2 || sb.len() < 2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let (ba, m, k) = matrix_dims(sa);
        let (bb, k2, n) = matrix_dims(sb);
        let batch_a = &sa[..sa.len() - 2];
        let batch_b = &sb[..sb.len() - 2];
        if k != k2 || batch_b.len() > batch_a.len() || !batch_a.ends_with(batch_b) {
            return Err(self.mismatch("matmul", a, b));
        }
        let mut shape = batch_a.to_vec();
        shape.extend([m, n]);
        let mut out = vec![0.0; ba * m * n];
        let (da, db) = (self.data(a), self.data(b));
        for i in 0..ba {
            let j = i % bb;
            kernels::gemm(
                m,
                k,
                n,
                &da[i * m * k..(i + 1) * m * k],
                false,
                &db[j * k * n..(j + 1) * k * n],
                false,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        Ok(self.push(shape, out, Op::MatMul { a: a.0, b: b.0 }))
    }

    /// Exchanges two axes.
    pub fn transpose(&mut self, a: Var, axis0: usize, axis1: usize) -> Result<Var> {
        let shape = self.shape(a);
        check_axis("transpose", shape, axis0)?;
        check_axis("transpose", shape, axis1)?;
        let (out_shape, out) = kernels::swap_axes(self.data(a), shape, axis0, axis1);
        Ok(self.push(
            out_shape,
            out,
            Op::Transpose {
                a: a.0,
                axes: (axis0, axis1),
            },
        ))
    }

    /// Exchanges the last two axes.
    pub fn t(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(TensorError::BadAxis {
                op: "transpose",
                axis: 1,
                rank: r,
            });
        }
        self.transpose(a, r - 2, r - 1)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.data(a).len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let data = self.data(a).to_vec();
        Ok(self.push(shape.to_vec(), data, Op::Reshape { a: a.0 }))
    }

    fn binary(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let out_shape = self.shape(a).to_vec();
        let plan = Broadcast::plan(op_name, &out_shape, self.shape(b))
            .map_err(|_| self.mismatch(op_name, a, b))?;
        let (da, db) = (self.data(a), self.data(b));
        let out = match plan {
            Broadcast::Same => da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect(),
            _ => da
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, db[plan.index(i)]))
                .collect(),
        };
        Ok(self.push(out_shape, out, op))
    }

    /// `a + b`, with `b` broadcast into the shape of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add { a: a.0, b: b.0 })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub { a: a.0, b: b.0 })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul { a: a.0, b: b.0 })
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("divide", a, b, |x, y| x / y, Op::Div { a: a.0, b: b.0 })
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let shape = self.shape(a).to_vec();
        let out = self.data(a).iter().map(|&x| f(x)).collect();
        self.push(shape, out, op)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp { a: a.0 })
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log { a: a.0 })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu { a: a.0 })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid { a: a.0 })
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, |x| -x, Op::Neg { a: a.0 })
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        self.unary(a, |x| x * factor, Op::Scale { a: a.0, factor })
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar { a: a.0 })
    }

    /// Softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        check_axis("softmax", &shape, axis)?;
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.data(a);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut m = f64::NEG_INFINITY;
                for l in 0..len {
                    m = m.max(src[base + l * inner]);
                }
                let mut s = 0.0;
                for l in 0..len {
                    let e = (src[base + l * inner] - m).exp();
                    out[base + l * inner] = e;
                    s += e;
                }
                for l in 0..len {
                    out[base + l * inner] /= s;
                }
            }
        }
        Ok(self.push(shape, out, Op::Softmax { a: a.0, axis }))
    }

    /// Softmax over the last axis.
    pub fn row_softmax(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        self.softmax(a, r.saturating_sub(1))
    }

    /// `log(sum(exp(a)))` along `axis`, keeping the axis with extent 1.
    pub fn logsumexp(&mut self, a: Var, axis: usize) -> Result<Var> {
        let mut shape = self.shape(a).to_vec();
        check_axis("logsumexp", &shape, axis)?;
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.data(a);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut m = f64::NEG_INFINITY;
                for l in 0..len {
                    m = m.max(src[base + l * inner]);
                }
                let s: f64 = (0..len).map(|l| (src[base + l * inner] - m).exp()).sum();
                out[o * inner + i] = m + s.ln();
            }
        }
        shape[axis] = 1;
        Ok(self.push(shape, out, Op::LogSumExp { a: a.0, axis }))
    }

    /// Log-sum-exp over the last axis (kept with extent 1).
    pub fn row_logsumexp(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        self.logsumexp(a, r.saturating_sub(1))
    }

    /// Running log-sum-exp along `axis`: entry `p` holds `log(sum_{q<=p} exp(a_q))`.
    /// Each prefix is accumulated left to right, so entry `p` never reads `a_q` for `q > p`.
    pub fn cum_logsumexp(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        check_axis("cum_logsumexp", &shape, axis)?;
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.data(a);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut m = f64::NEG_INFINITY;
                let mut s = 0.0;
                for l in 0..len {
                    let x = src[base + l * inner];
                    if x > m {
                        s = s * (m - x).exp() + 1.0;
                        m = x;
                    } else {
                        s += (x - m).exp();
                    }
                    out[base + l * inner] = m + s.ln();
                }
            }
        }
        Ok(self.push(shape, out, Op::CumLogSumExp { a: a.0, axis }))
    }

    /// Inclusive prefix sum along `axis`.
    pub fn cumsum(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        check_axis("cumsum", &shape, axis)?;
        let (outer, len, inner) = axis_split(&shape, axis);
        let mut out = self.data(a).to_vec();
        for o in 0..outer {
            for l in 1..len {
                for i in 0..inner {
                    let cur = o * len * inner + l * inner + i;
                    out[cur] += out[cur - inner];
                }
            }
        }
        Ok(self.push(shape, out, Op::CumSum { a: a.0, axis }))
    }

    /// Sum along `axis`, keeping it with extent 1.
    pub fn sum(&mut self, a: Var, axis: usize) -> Result<Var> {
        let mut shape = self.shape(a).to_vec();
        check_axis("sum", &shape, axis)?;
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.data(a);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let row = &src[o * len * inner + l * inner..o * len * inner + (l + 1) * inner];
                for (acc, x) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += x;
                }
            }
        }
        shape[axis] = 1;
        Ok(self.push(shape, out, Op::Sum { a: a.0, axis }))
    }

    /// Sum of every entry, as a rank-0 tensor.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        self.push(Vec::new(), vec![s], Op::SumAll { a: a.0 })
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.data(a).len().max(1) as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| TensorError::Invalid {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let mut shape = self.shape(first).to_vec();
        check_axis("concat", &shape, axis)?;
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == shape.len()
                && s.iter()
                    .zip(&shape)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(self.mismatch("concat", first, p));
            }
            total += s[axis];
        }
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                let chunk = len * inner;
                out.extend_from_slice(&self.data(p)[o * chunk..(o + 1) * chunk]);
            }
        }
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                parts: parts.iter().map(|v| v.0).collect(),
                axis,
            },
        ))
    }

    /// Entries `start..start + len` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let src_shape = self.shape(a).to_vec();
        check_axis("slice", &src_shape, axis)?;
        if start + len > src_shape[axis] {
            return Err(TensorError::Invalid {
                op: "slice",
                msg: format!(
                    "range {start}..{} exceeds axis {axis} of shape {src_shape:?}",
                    start + len
                ),
            });
        }
        let (outer, full, inner) = axis_split(&src_shape, axis);
        let src = self.data(a);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full * inner + start * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = src_shape;
        shape[axis] = len;
        Ok(self.push(shape, out, Op::Slice { a: a.0, axis, start }))
    }

    /// Replaces entries selected by `mask` (broadcast into `a`) with `value`.
    pub fn masked_fill(&mut self, a: Var, mask: &Mask, value: f64) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let plan = Broadcast::plan("masked_fill", &shape, mask.shape())?;
        let full: Vec<bool> = (0..shape.iter().product())
            .map(|i| mask.data()[plan.index(i)])
            .collect();
        let out = self
            .data(a)
            .iter()
            .zip(&full)
            .map(|(&x, &m)| if m { value } else { x })
            .collect();
        Ok(self.push(shape, out, Op::MaskedFill { a: a.0, mask: full }))
    }

    /// Gathers rows of a `[vocab, d]` table: output `[ids.len(), d]`.
    pub fn index_select(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table);
        if shape.len() != 2 {
            return Err(TensorError::Invalid {
                op: "index_select",
                msg: format!("table must be rank 2, got {shape:?}"),
            });
        }
        let (rows, d) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(TensorError::Invalid {
                op: "index_select",
                msg: format!("id {bad} out of range for {rows} rows"),
            });
        }
        let src = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        Ok(self.push(
            vec![ids.len(), d],
            out,
            Op::IndexSelect {
                table: table.0,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let d = *shape.last().ok_or_else(|| TensorError::Invalid {
            op: "layer_norm",
            msg: "rank-0 input".into(),
        })?;
        let src = self.data(a);
        let rows = src.len() / d.max(1);
        let mut out = vec![0.0; src.len()];
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let x = &src[r * d..(r + 1) * d];
            let mean = x.iter().sum::<f64>() / d as f64;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + eps).sqrt();
            for (o, v) in out[r * d..(r + 1) * d].iter_mut().zip(x) {
                *o = (v - mean) * s;
            }
            rstd.push(s);
        }
        Ok(self.push(shape, out, Op::LayerNorm { a: a.0, rstd }))
    }
}
