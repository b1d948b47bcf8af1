use super::kernels::{self, axis_split, Broadcast};
use super::{Op, Result, Tape, TensorError, Var};

fn accumulate(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(acc) => {
            for (a, x) in acc.iter_mut().zip(&g) {
                *a += x;
            }
        }
        None => *slot = Some(g),
    }
}

impl Tape {
    /// Reverse sweep from a scalar `loss`. Populates `grad` on every leaf that requires it
    /// (zeros when the leaf does not influence the loss).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(TensorError::Invalid {
                op: "backward",
                msg: "empty tape".into(),
            });
        }
        let loss_shape = self.shape(loss);
        if loss_shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarLoss(loss_shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.value.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            for (parent, pg) in self.vjp(idx, &g) {
                if self.nodes[parent].value.requires_grad {
                    accumulate(&mut grads[parent], pg);
                }
            }
        }
        for (idx, node) in self.nodes.iter_mut().enumerate() {
            if matches!(node.op, Op::Leaf) && node.value.requires_grad {
                let g = grads
                    .get_mut(idx)
                    .and_then(Option::take)
                    .unwrap_or_else(|| vec![0.0; node.value.data.len()]);
                node.value.grad = Some(g);
            }
        }
        Ok(())
    }

    fn needs(&self, i: usize) -> bool {
        self.nodes[i].value.requires_grad
    }

    /// Vector-Jacobian products of node `idx` for upstream gradient `g`.
    fn vjp(&self, idx: usize, g: &[f64]) -> Vec<(usize, Vec<f64>)> {
        let node = &self.nodes[idx];
        let out = &node.value;
        let val = |i: usize| &self.nodes[i].value;
        match &node.op {
            Op::Leaf | Op::Const => Vec::new(),
            Op::MatMul { a, b } => {
                let (sa, sb) = (val(*a).shape(), val(*b).shape());
                let (ra, rb) = (sa.len(), sb.len());
                let (m, k) = (sa[ra - 2], sa[ra - 1]);
                let n = sb[rb - 1];
                let ba: usize = sa[..ra - 2].iter().product();
                let bb: usize = sb[..rb - 2].iter().product();
                let (da_src, db_src) = (val(*a).data(), val(*b).data());
                let mut res = Vec::new();
                if self.needs(*a) {
                    let mut ga = vec![0.0; ba * m * k];
                    for i in 0..ba {
                        let j = i % bb;
                        kernels::gemm(
                            m,
                            n,
                            k,
                            &g[i * m * n..(i + 1) * m * n],
                            false,
                            &db_src[j * k * n..(j + 1) * k * n],
                            true,
                            &mut ga[i * m * k..(i + 1) * m * k],
                            false,
                        );
                    }
                    res.push((*a, ga));
                }
                if self.needs(*b) {
                    let mut gb = vec![0.0; bb * k * n];
                    for i in 0..ba {
                        let j = i % bb;
                        kernels::gemm(
                            k,
                            m,
                            n,
                            &da_src[i * m * k..(i + 1) * m * k],
                            true,
                            &g[i * m * n..(i + 1) * m * n],
                            false,
                            &mut gb[j * k * n..(j + 1) * k * n],
                            true,
                        );
                    }
                    res.push((*b, gb));
                }
                res
            }
            Op::Transpose { a, axes } => {
                let (_, ga) = kernels::swap_axes(g, out.shape(), axes.0, axes.1);
                vec![(*a, ga)]
            }
            Op::Reshape { a } => vec![(*a, g.to_vec())],
            Op::Add { a, b } | Op::Sub { a, b } => {
                let plan = Broadcast::plan("add", out.shape(), val(*b).shape())
                    .expect("validated in forward");
                let mut res = vec![(*a, g.to_vec())];
                if self.needs(*b) {
                    let mut gb = plan.reduce(g, val(*b).numel());
                    if matches!(node.op, Op::Sub { .. }) {
                        gb.iter_mut().for_each(|x| *x = -*x);
                    }
                    res.push((*b, gb));
                }
                res
            }
            Op::Mul { a, b } => {
                let plan = Broadcast::plan("mul", out.shape(), val(*b).shape())
                    .expect("validated in forward");
                let (av, bv) = (val(*a).data(), val(*b).data());
                let mut res = Vec::new();
                if self.needs(*a) {
                    let ga = g
                        .iter()
                        .enumerate()
                        .map(|(i, gi)| gi * bv[plan.index(i)])
                        .collect();
                    res.push((*a, ga));
                }
                if self.needs(*b) {
                    let prod: Vec<f64> = g.iter().zip(av).map(|(gi, x)| gi * x).collect();
                    res.push((*b, plan.reduce(&prod, bv.len())));
                }
                res
            }
            Op::Div { a, b } => {
                let plan = Broadcast::plan("divide", out.shape(), val(*b).shape())
                    .expect("validated in forward");
                let (av, bv) = (val(*a).data(), val(*b).data());
                let mut res = Vec::new();
                if self.needs(*a) {
                    let ga = g
                        .iter()
                        .enumerate()
                        .map(|(i, gi)| gi / bv[plan.index(i)])
                        .collect();
                    res.push((*a, ga));
                }
                if self.needs(*b) {
                    let prod: Vec<f64> = g
                        .iter()
                        .enumerate()
                        .map(|(i, gi)| {
                            let y = bv[plan.index(i)];
                            -gi * av[i] / (y * y)
                        })
                        .collect();
                    res.push((*b, plan.reduce(&prod, bv.len())));
                }
                res
            }
            Op::Exp { a } => vec![(*a, g.iter().zip(out.data()).map(|(gi, y)| gi * y).collect())],
            Op::Log { a } => vec![(
                *a,
                g.iter().zip(val(*a).data()).map(|(gi, x)| gi / x).collect(),
            )],
            Op::Relu { a } => vec![(
                *a,
                g.iter()
                    .zip(val(*a).data())
                    .map(|(gi, &x)| if x > 0.0 { *gi } else { 0.0 })
                    .collect(),
            )],
            Op::Sigmoid { a } => vec![(
                *a,
                g.iter()
                    .zip(out.data())
                    .map(|(gi, y)| gi * y * (1.0 - y))
                    .collect(),
            )],
            Op::Neg { a } => vec![(*a, g.iter().map(|x| -x).collect())],
            Op::Scale { a, factor } => vec![(*a, g.iter().map(|x| x * factor).collect())],
            Op::AddScalar { a } => vec![(*a, g.to_vec())],
            Op::Softmax { a, axis } => {
                let (outer, len, inner) = axis_split(out.shape(), *axis);
                let y = out.data();
                let mut ga = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let dot: f64 = (0..len)
                            .map(|l| g[base + l * inner] * y[base + l * inner])
                            .sum();
                        for l in 0..len {
                            let p = base + l * inner;
                            ga[p] = y[p] * (g[p] - dot);
                        }
                    }
                }
                vec![(*a, ga)]
            }
            Op::LogSumExp { a, axis } => {
                let x = val(*a);
                let (outer, len, inner) = axis_split(x.shape(), *axis);
                let (xv, y) = (x.data(), out.data());
                let mut ga = vec![0.0; xv.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let r = o * inner + i;
                        for l in 0..len {
                            let p = o * len * inner + l * inner + i;
                            ga[p] = g[r] * (xv[p] - y[r]).exp();
                        }
                    }
                }
                vec![(*a, ga)]
            }
            Op::CumLogSumExp { a, axis } => {
                let x = val(*a);
                let (outer, len, inner) = axis_split(x.shape(), *axis);
                let (xv, y) = (x.data(), out.data());
                let mut ga = vec![0.0; xv.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        for q in 0..len {
                            let xq = xv[base + q * inner];
                            let mut acc = 0.0;
                            for p in q..len {
                                let at = base + p * inner;
                                acc += g[at] * (xq - y[at]).exp();
                            }
                            ga[base + q * inner] = acc;
                        }
                    }
                }
                vec![(*a, ga)]
            }
            Op::CumSum { a, axis } => {
                let (outer, len, inner) = axis_split(out.shape(), *axis);
                let mut ga = g.to_vec();
                for o in 0..outer {
                    for l in (0..len.saturating_sub(1)).rev() {
                        for i in 0..inner {
                            let cur = o * len * inner + l * inner + i;
                            ga[cur] += ga[cur + inner];
                        }
                    }
                }
                vec![(*a, ga)]
            }
            Op::Sum { a, axis } => {
                let (outer, len, inner) = axis_split(val(*a).shape(), *axis);
                let mut ga = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        let dst = o * len * inner + l * inner;
                        ga[dst..dst + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                vec![(*a, ga)]
            }
            Op::SumAll { a } => vec![(*a, vec![g[0]; val(*a).numel()])],
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = axis_split(out.shape(), *axis);
                let mut offset = 0;
                let mut res = Vec::new();
                for &p in parts {
                    let len = val(p).shape()[*axis];
                    if self.needs(p) {
                        let mut gp = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = o * total * inner + offset * inner;
                            gp.extend_from_slice(&g[base..base + len * inner]);
                        }
                        res.push((p, gp));
                    }
                    offset += len;
                }
                res
            }
            Op::Slice { a, axis, start } => {
                let (outer, full, inner) = axis_split(val(*a).shape(), *axis);
                let len = out.shape()[*axis];
                let mut ga = vec![0.0; outer * full * inner];
                for o in 0..outer {
                    let dst = o * full * inner + start * inner;
                    ga[dst..dst + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![(*a, ga)]
            }
            Op::MaskedFill { a, mask } => vec![(
                *a,
                g.iter()
                    .zip(mask)
                    .map(|(gi, &m)| if m { 0.0 } else { *gi })
                    .collect(),
            )],
            Op::IndexSelect { table, ids } => {
                let t = val(*table);
                let d = t.shape()[1];
                let mut gt = vec![0.0; t.numel()];
                for (r, &id) in ids.iter().enumerate() {
                    for (acc, x) in gt[id * d..(id + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                        *acc += x;
                    }
                }
                vec![(*table, gt)]
            }
            Op::LayerNorm { a, rstd } => {
                let d = *out.shape().last().expect("rank checked in forward");
                let y = out.data();
                let mut ga = vec![0.0; y.len()];
                for (r, s) in rstd.iter().enumerate() {
                    let rows = r * d..(r + 1) * d;
                    let (gr, yr) = (&g[rows.clone()], &y[rows.clone()]);
                    let mean_g = gr.iter().sum::<f64>() / d as f64;
                    let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for ((o, gi), yi) in ga[rows].iter_mut().zip(gr).zip(yr) {
                        *o = s * (gi - mean_g - yi * mean_gy);
                    }
                }
                vec![(*a, ga)]
            }
        }
    }
}
