//! Raw loops shared by the forward and reverse passes.

use crate::error::{Result, TensorError};
use crate::float::{gemm, Float, MatRef};
use crate::tape::ConvGeom;
use crate::tensor::Tensor;

pub(crate) fn permute<F: Float>(x: &Tensor<F>, axes: &[usize]) -> Result<Tensor<F>> {
    let rank = x.rank();
    let mut seen = vec![false; rank];
    if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
        return Err(TensorError::Dimension { op: "permute", msg: format!("invalid axes {axes:?} for rank {rank}") });
    }
    let in_shape = x.shape();
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();

    // Copy contiguous runs when the innermost axis is untouched.
    let (run, outer_rank) = if axes[rank - 1] == rank - 1 { (out_shape[rank - 1], rank - 1) } else { (1, rank) };
    let total = x.numel();
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; outer_rank];
    let src = x.data();
    while out.len() < total {
        let base: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        if run == 1 {
            out.push(src[base]);
        } else {
            out.extend_from_slice(&src[base..base + run]);
        }
        for d in (0..outer_rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Tensor::from_vec(&out_shape, out)
}

pub(crate) fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

pub(crate) fn softmax_inplace<F: Float>(data: &mut [F], outer: usize, len: usize, inner: usize) {
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let mut max = F::neg_infinity();
            for j in 0..len {
                max = max.max(data[at(j)]);
            }
            if max == F::neg_infinity() {
                for j in 0..len {
                    data[at(j)] = F::zero();
                }
                continue;
            }
            let mut sum = F::zero();
            for j in 0..len {
                let e = (data[at(j)] - max).exp();
                data[at(j)] = e;
                sum += e;
            }
            let inv = F::one() / sum;
            for j in 0..len {
                data[at(j)] *= inv;
            }
        }
    }
}

pub fn log_sum_exp<F: Float>(row: &[F]) -> f64 {
    let max = row.iter().map(|v| v.to_f64_lossy()).fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = row.iter().map(|v| (v.to_f64_lossy() - max).exp()).sum();
    max + s.ln()
}

pub(crate) fn layer_norm<F: Float>(x: &[F], gamma: &[F], beta: &[F], dim: usize, eps: F) -> (Vec<F>, Vec<F>, Vec<F>) {
    let rows = x.len() / dim;
    let n = F::from_usize(dim).expect("dim");
    let mut out = vec![F::zero(); x.len()];
    let mut means = Vec::with_capacity(rows);
    let mut rstds = Vec::with_capacity(rows);
    for (r, row) in x.chunks_exact(dim).enumerate() {
        let mean = row.iter().copied().sum::<F>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
        let rstd = F::one() / (var + eps).sqrt();
        for j in 0..dim {
            out[r * dim + j] = (row[j] - mean) * rstd * gamma[j] + beta[j];
        }
        means.push(mean);
        rstds.push(rstd);
    }
    (out, means, rstds)
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_COEF: f64 = 0.044_715;

pub(crate) fn gelu<F: Float>(x: F) -> F {
    let c = F::from_f64_lossy(SQRT_2_OVER_PI);
    let a = F::from_f64_lossy(GELU_COEF);
    let half = F::from_f64_lossy(0.5);
    half * x * (F::one() + (c * (x + a * x * x * x)).tanh())
}

pub(crate) fn gelu_grad<F: Float>(x: F) -> F {
    let c = F::from_f64_lossy(SQRT_2_OVER_PI);
    let a = F::from_f64_lossy(GELU_COEF);
    let half = F::from_f64_lossy(0.5);
    let three = F::from_f64_lossy(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + three * a * x * x)
}

pub(crate) fn sigmoid<F: Float>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

pub(crate) fn conv_geom(x: &[usize], w: &[usize], stride: usize, padding: usize) -> Result<ConvGeom> {
    if x.len() != 4 || w.len() != 4 || x[1] != w[1] {
        return Err(TensorError::Shape { op: "conv2d", lhs: x.to_vec(), rhs: w.to_vec() });
    }
    if stride == 0 {
        return Err(TensorError::Dimension { op: "conv2d", msg: "stride must be positive".into() });
    }
    let (ph, pw) = (x[2] + 2 * padding, x[3] + 2 * padding);
    if w[2] > ph || w[3] > pw {
        return Err(TensorError::Dimension {
            op: "conv2d",
            msg: format!("kernel {}x{} larger than padded input {ph}x{pw} (input {x:?}, weight {w:?})", w[2], w[3]),
        });
    }
    Ok(ConvGeom {
        batch: x[0],
        in_channels: x[1],
        height: x[2],
        width: x[3],
        out_channels: w[0],
        kernel_h: w[2],
        kernel_w: w[3],
        stride,
        padding,
        out_h: (ph - w[2]) / stride + 1,
        out_w: (pw - w[3]) / stride + 1,
    })
}

/// Unfolds one `[C, H, W]` image into `[C·kh·kw, out_h·out_w]` columns.
pub(crate) fn im2col<F: Float>(img: &[F], g: &ConvGeom, cols: &mut [F]) {
    let positions = g.out_positions();
    for c in 0..g.in_channels {
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let dst = &mut cols[row * positions..(row + 1) * positions];
                for oi in 0..g.out_h {
                    let ii = (oi * g.stride + ki) as isize - g.padding as isize;
                    let line = &mut dst[oi * g.out_w..(oi + 1) * g.out_w];
                    if ii < 0 || ii >= g.height as isize {
                        line.iter_mut().for_each(|v| *v = F::zero());
                        continue;
                    }
                    let src = &img[(c * g.height + ii as usize) * g.width..][..g.width];
                    for (oj, v) in line.iter_mut().enumerate() {
                        let jj = (oj * g.stride + kj) as isize - g.padding as isize;
                        *v = if jj < 0 || jj >= g.width as isize { F::zero() } else { src[jj as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating into `img`.
pub(crate) fn col2im<F: Float>(cols: &[F], g: &ConvGeom, img: &mut [F]) {
    let positions = g.out_positions();
    for c in 0..g.in_channels {
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let src = &cols[row * positions..(row + 1) * positions];
                for oi in 0..g.out_h {
                    let ii = (oi * g.stride + ki) as isize - g.padding as isize;
                    if ii < 0 || ii >= g.height as isize {
                        continue;
                    }
                    let dst = &mut img[(c * g.height + ii as usize) * g.width..][..g.width];
                    for oj in 0..g.out_w {
                        let jj = (oj * g.stride + kj) as isize - g.padding as isize;
                        if jj >= 0 && jj < g.width as isize {
                            dst[jj as usize] += src[oi * g.out_w + oj];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<F: Float>(x: &[F], w: &[F], bias: Option<&[F]>, g: &ConvGeom) -> Vec<F> {
    let positions = g.out_positions();
    let krows = g.cols_rows();
    let img_len = g.in_channels * g.height * g.width;
    let out_len = g.out_channels * positions;
    let mut out = vec![F::zero(); g.batch * out_len];
    let mut cols = vec![F::zero(); krows * positions];
    for b in 0..g.batch {
        im2col(&x[b * img_len..(b + 1) * img_len], g, &mut cols);
        let dst = &mut out[b * out_len..(b + 1) * out_len];
        gemm(
            MatRef::row_major(w, g.out_channels, krows),
            MatRef::row_major(&cols, krows, positions),
            dst,
            false,
        );
        if let Some(bias) = bias {
            for (o, chunk) in dst.chunks_exact_mut(positions).enumerate() {
                chunk.iter_mut().for_each(|v| *v += bias[o]);
            }
        }
    }
    out
}

/// Reference direct-loop convolution, kept independent of the im2col path.
pub fn conv2d_direct<F: Float>(x: &Tensor<F>, w: &Tensor<F>, bias: Option<&Tensor<F>>, stride: usize, padding: usize) -> Result<Tensor<F>> {
    let g = conv_geom(x.shape(), w.shape(), stride, padding)?;
    let mut out = Tensor::zeros(&[g.batch, g.out_channels, g.out_h, g.out_w]);
    let od = out.data_mut();
    for b in 0..g.batch {
        for o in 0..g.out_channels {
            for oi in 0..g.out_h {
                for oj in 0..g.out_w {
                    let mut acc = bias.map(|t| t.data()[o]).unwrap_or_else(F::zero);
                    for c in 0..g.in_channels {
                        for ki in 0..g.kernel_h {
                            for kj in 0..g.kernel_w {
                                let ii = (oi * stride + ki) as isize - padding as isize;
                                let jj = (oj * stride + kj) as isize - padding as isize;
                                if ii < 0 || jj < 0 || ii >= g.height as isize || jj >= g.width as isize {
                                    continue;
                                }
                                acc += x.get(&[b, c, ii as usize, jj as usize]) * w.get(&[o, c, ki, kj]);
                            }
                        }
                    }
                    od[((b * g.out_channels + o) * g.out_h + oi) * g.out_w + oj] = acc;
                }
            }
        }
    }
    Ok(out)
}
