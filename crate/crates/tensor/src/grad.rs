//! Vector-Jacobian products for every [`Op`].

use crate::error::Result;
use crate::float::{gemm, Float, MatRef};
use crate::kernels;
use crate::tape::{Node, Op};
use crate::tensor::{numel, Tensor};

fn slot<'a, F: Float>(nodes: &[Node<F>], grads: &'a mut [Option<Vec<F>>], id: usize) -> Option<&'a mut Vec<F>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let len = nodes[id].value.numel();
    Some(grads[id].get_or_insert_with(|| vec![F::zero(); len]))
}

fn add_into<F: Float>(dst: &mut [F], src: &[F]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

pub(crate) fn propagate<F: Float>(nodes: &[Node<F>], id: usize, g: &[F], grads: &mut [Option<Vec<F>>]) -> Result<()> {
    let val = |i: usize| &nodes[i].value;
    match &nodes[id].op {
        Op::Leaf { .. } => {}
        Op::Add { a, b } | Op::Sub { a, b } => {
            let sign = if matches!(nodes[id].op, Op::Sub { .. }) { -F::one() } else { F::one() };
            if let Some(ga) = slot(nodes, grads, *a) {
                add_into(ga, g);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                let len = gb.len();
                for chunk in g.chunks_exact(len) {
                    gb.iter_mut().zip(chunk).for_each(|(d, &s)| *d += sign * s);
                }
            }
        }
        Op::Mul { a, b } => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            if let Some(ga) = slot(nodes, grads, *a) {
                for (gc, dc) in g.chunks_exact(bv.len()).zip(ga.chunks_exact_mut(bv.len())) {
                    for ((d, &gg), &bb) in dc.iter_mut().zip(gc).zip(bv) {
                        *d += gg * bb;
                    }
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                for (gc, ac) in g.chunks_exact(bv.len()).zip(av.chunks_exact(bv.len())) {
                    for ((d, &gg), &aa) in gb.iter_mut().zip(gc).zip(ac) {
                        *d += gg * aa;
                    }
                }
            }
        }
        Op::Scale { x, factor } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(d, &s)| *d += s * *factor);
            }
        }
        Op::OneMinus { x } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(d, &s)| *d -= s);
            }
        }
        &Op::MatMul { a, b, m, k, n } => {
            if nodes[a].requires_grad {
                let bv = val(b).data();
                let ga = slot(nodes, grads, a).expect("requires grad");
                gemm(MatRef::row_major(g, m, n), MatRef::transposed(bv, k, n), ga, true);
            }
            if nodes[b].requires_grad {
                let av = val(a).data();
                let gb = slot(nodes, grads, b).expect("requires grad");
                gemm(MatRef::transposed(av, m, k), MatRef::row_major(g, m, n), gb, true);
            }
        }
        &Op::BatchMatMul { a, b, batch, m, k, n, trans_b } => {
            if nodes[a].requires_grad {
                let bv = val(b).data();
                let ga = slot(nodes, grads, a).expect("requires grad");
                for i in 0..batch {
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    let bi = &bv[i * k * n..(i + 1) * k * n];
                    // trans_b: b is stored [n, k], so dA = G·B; otherwise dA = G·Bᵀ.
                    let bref = if trans_b { MatRef::row_major(bi, n, k) } else { MatRef::transposed(bi, k, n) };
                    gemm(MatRef::row_major(gi, m, n), bref, &mut ga[i * m * k..(i + 1) * m * k], true);
                }
            }
            if nodes[b].requires_grad {
                let av = val(a).data();
                let gb = slot(nodes, grads, b).expect("requires grad");
                for i in 0..batch {
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    let ai = &av[i * m * k..(i + 1) * m * k];
                    let dst = &mut gb[i * k * n..(i + 1) * k * n];
                    if trans_b {
                        gemm(MatRef::transposed(gi, m, n), MatRef::row_major(ai, m, k), dst, true);
                    } else {
                        gemm(MatRef::transposed(ai, m, k), MatRef::row_major(gi, m, n), dst, true);
                    }
                }
            }
        }
        Op::ExpandBatch { x, .. } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                let len = gx.len();
                for chunk in g.chunks_exact(len) {
                    add_into(gx, chunk);
                }
            }
        }
        Op::Reshape { x } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                add_into(gx, g);
            }
        }
        Op::Permute { x, axes } => {
            if nodes[*x].requires_grad {
                let gt = Tensor::from_vec(val(id).shape(), g.to_vec())?;
                let back = kernels::permute(&gt, &kernels::inverse_axes(axes))?;
                add_into(slot(nodes, grads, *x).expect("requires grad"), back.data());
            }
        }
        &Op::Softmax { x, outer, len, inner } => {
            if let Some(gx) = slot(nodes, grads, x) {
                let y = nodes[id].value.data();
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + i;
                        let dot: F = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            gx[at(j)] += y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
            }
        }
        Op::LayerNorm { x, gamma, beta, dim, mean, rstd } => {
            let dim = *dim;
            let xv = val(*x).data();
            let gam = val(*gamma).data();
            let n = F::from_usize(dim).expect("dim");
            let xhat = |r: usize, j: usize| (xv[r * dim + j] - mean[r]) * rstd[r];
            if let Some(gg) = slot(nodes, grads, *gamma) {
                for (r, gr) in g.chunks_exact(dim).enumerate() {
                    for j in 0..dim {
                        gg[j] += gr[j] * xhat(r, j);
                    }
                }
            }
            if let Some(gb) = slot(nodes, grads, *beta) {
                for gr in g.chunks_exact(dim) {
                    add_into(gb, gr);
                }
            }
            if let Some(gx) = slot(nodes, grads, *x) {
                for (r, gr) in g.chunks_exact(dim).enumerate() {
                    let mut sum_d = F::zero();
                    let mut sum_dx = F::zero();
                    for j in 0..dim {
                        let d = gr[j] * gam[j];
                        sum_d += d;
                        sum_dx += d * xhat(r, j);
                    }
                    for j in 0..dim {
                        let d = gr[j] * gam[j];
                        gx[r * dim + j] += rstd[r] / n * (n * d - sum_d - xhat(r, j) * sum_dx);
                    }
                }
            }
        }
        Op::Relu { x } => {
            let xv = val(*x).data();
            if let Some(gx) = slot(nodes, grads, *x) {
                for ((d, &gg), &xx) in gx.iter_mut().zip(g).zip(xv) {
                    if xx > F::zero() {
                        *d += gg;
                    }
                }
            }
        }
        Op::Gelu { x } => {
            let xv = val(*x).data();
            if let Some(gx) = slot(nodes, grads, *x) {
                for ((d, &gg), &xx) in gx.iter_mut().zip(g).zip(xv) {
                    *d += gg * kernels::gelu_grad(xx);
                }
            }
        }
        Op::Sigmoid { x } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                let y = nodes[id].value.data();
                for ((d, &gg), &yy) in gx.iter_mut().zip(g).zip(y) {
                    *d += gg * yy * (F::one() - yy);
                }
            }
        }
        Op::Concat { inputs, axis } => {
            let out_shape = val(id).shape();
            let outer = numel(&out_shape[..*axis]);
            let inner = numel(&out_shape[axis + 1..]);
            let full = out_shape[*axis] * inner;
            let mut offset = 0;
            for &input in inputs {
                let run = val(input).shape()[*axis] * inner;
                if let Some(gi) = slot(nodes, grads, input) {
                    for o in 0..outer {
                        add_into(&mut gi[o * run..(o + 1) * run], &g[o * full + offset..o * full + offset + run]);
                    }
                }
                offset += run;
            }
        }
        &Op::Narrow { x, axis, start } => {
            let in_shape = val(x).shape().to_vec();
            let len = val(id).shape()[axis];
            if let Some(gx) = slot(nodes, grads, x) {
                let outer = numel(&in_shape[..axis]);
                let inner = numel(&in_shape[axis + 1..]);
                let full = in_shape[axis] * inner;
                for o in 0..outer {
                    let dst = &mut gx[o * full + start * inner..o * full + (start + len) * inner];
                    add_into(dst, &g[o * len * inner..(o + 1) * len * inner]);
                }
            }
        }
        Op::Embedding { table, indices } => {
            let dim = val(*table).shape()[1];
            if let Some(gt) = slot(nodes, grads, *table) {
                for (r, &i) in indices.iter().enumerate() {
                    add_into(&mut gt[i * dim..(i + 1) * dim], &g[r * dim..(r + 1) * dim]);
                }
            }
        }
        Op::Sum { x } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                gx.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::Mean { x } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                let s = g[0] / F::from_usize(gx.len()).expect("count");
                gx.iter_mut().for_each(|d| *d += s);
            }
        }
        Op::CrossEntropy { logits, targets, probs, counted } => {
            if *counted == 0 {
                return Ok(());
            }
            if let Some(gl) = slot(nodes, grads, *logits) {
                let classes = probs.len() / targets.len();
                let s = g[0] / F::from_usize(*counted).expect("count");
                for (r, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    for c in 0..classes {
                        let onehot = if c == t { F::one() } else { F::zero() };
                        gl[r * classes + c] += s * (probs[r * classes + c] - onehot);
                    }
                }
            }
        }
        Op::Conv2d { x, w, b, geom } => {
            let positions = geom.out_positions();
            let krows = geom.cols_rows();
            let img_len = geom.in_channels * geom.height * geom.width;
            let out_len = geom.out_channels * positions;
            if let Some(b) = b {
                if let Some(gb) = slot(nodes, grads, *b) {
                    for gs in g.chunks_exact(out_len) {
                        for (o, chunk) in gs.chunks_exact(positions).enumerate() {
                            gb[o] += chunk.iter().copied().sum::<F>();
                        }
                    }
                }
            }
            let xv = val(*x).data();
            let wv = val(*w).data();
            let mut cols = vec![F::zero(); krows * positions];
            if nodes[*w].requires_grad {
                let gw = slot(nodes, grads, *w).expect("requires grad");
                for bi in 0..geom.batch {
                    kernels::im2col(&xv[bi * img_len..(bi + 1) * img_len], geom, &mut cols);
                    gemm(
                        MatRef::row_major(&g[bi * out_len..(bi + 1) * out_len], geom.out_channels, positions),
                        MatRef::transposed(&cols, krows, positions),
                        gw,
                        true,
                    );
                }
            }
            if nodes[*x].requires_grad {
                let gx = slot(nodes, grads, *x).expect("requires grad");
                for bi in 0..geom.batch {
                    gemm(
                        MatRef::transposed(wv, geom.out_channels, krows),
                        MatRef::row_major(&g[bi * out_len..(bi + 1) * out_len], geom.out_channels, positions),
                        &mut cols,
                        false,
                    );
                    kernels::col2im(&cols, geom, &mut gx[bi * img_len..(bi + 1) * img_len]);
                }
            }
        }
        Op::Upsample2x { x } => {
            let s = val(*x).shape().to_vec();
            if let Some(gx) = slot(nodes, grads, *x) {
                let (bc, h, w) = (s[0] * s[1], s[2], s[3]);
                for p in 0..bc {
                    for i in 0..2 * h {
                        for j in 0..2 * w {
                            gx[p * h * w + (i / 2) * w + j / 2] += g[p * 4 * h * w + i * 2 * w + j];
                        }
                    }
                }
            }
        }
        Op::ReplaceRows { x, token, mask } => {
            let dim = val(*token).numel();
            if let Some(gx) = slot(nodes, grads, *x) {
                for ((dr, gr), &m) in gx.chunks_exact_mut(dim).zip(g.chunks_exact(dim)).zip(mask) {
                    if !m {
                        add_into(dr, gr);
                    }
                }
            }
            if let Some(gt) = slot(nodes, grads, *token) {
                for (gr, &m) in g.chunks_exact(dim).zip(mask) {
                    if m {
                        add_into(gt, gr);
                    }
                }
            }
        }
    }
    Ok(())
}
