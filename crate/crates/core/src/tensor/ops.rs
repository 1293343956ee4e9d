//! Forward kernels and their vector-Jacobian products.
//!
//! All kernels accumulate in index order so results are reproducible
//! run to run. Shapes must match exactly; the only broadcast is
//! scalar-with-tensor via [`scale`].

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Pointwise operations exposed through [`elementwise`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Mul,
    Silu,
}

pub fn elementwise(op: Elementwise, a: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    match (op, b) {
        (Elementwise::Add, Some(b)) => add(a, b),
        (Elementwise::Mul, Some(b)) => mul(a, b),
        (Elementwise::Silu, None) => Ok(silu(a)),
        (Elementwise::Silu, Some(_)) => Err(Error::InvalidShape {
            op: "silu",
            reason: "silu is unary".into(),
        }),
        (_, None) => Err(Error::InvalidShape {
            op: "elementwise",
            reason: format!("{op:?} needs two operands"),
        }),
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2("matmul")?;
    let (k2, n) = b.dims2("matmul")?;
    if k != k2 {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (r, c) = a.dims2("transpose")?;
    let d = a.data();
    let mut out = vec![0.0f32; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = d[i * c + j];
        }
    }
    Ok(Tensor::from_parts(vec![c, r], out))
}

fn zip_with(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Ok(Tensor::from_parts(a.shape().to_vec(), data))
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with("add", a, b, |x, y| x + y)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with("sub", a, b, |x, y| x - y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with("mul", a, b, |x, y| x * y)
}

pub fn scale(a: &Tensor, s: f32) -> Tensor {
    map(a, |x| x * s)
}

pub fn map(a: &Tensor, f: impl Fn(f32) -> f32) -> Tensor {
    Tensor::from_parts(a.shape().to_vec(), a.data().iter().map(|&x| f(x)).collect())
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(a: &Tensor) -> Tensor {
    map(a, |x| x * sigmoid(x))
}

pub fn silu_backward(x: &Tensor, grad: &Tensor) -> Result<Tensor> {
    zip_with("silu_backward", x, grad, |x, g| {
        let s = sigmoid(x);
        g * (s + x * s * (1.0 - s))
    })
}

fn last_dim(op: &'static str, a: &Tensor) -> Result<usize> {
    match a.shape().last() {
        Some(&n) if n >= 1 => Ok(n),
        _ => Err(Error::InvalidShape {
            op,
            reason: format!("last extent must be at least 1, got shape {:?}", a.shape()),
        }),
    }
}

/// Softmax over the last axis with per-row max subtraction.
pub fn softmax_lastdim(a: &Tensor) -> Result<Tensor> {
    let n = last_dim("softmax", a)?;
    let mut out = a.to_vec();
    for row in out.chunks_mut(n) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Ok(Tensor::from_parts(a.shape().to_vec(), out))
}

/// Given softmax output `y` and upstream `grad`: `y ⊙ (grad − Σ grad⊙y)` per row.
pub fn softmax_backward(y: &Tensor, grad: &Tensor) -> Result<Tensor> {
    if y.shape() != grad.shape() {
        return Err(Error::shape("softmax_backward", y.shape(), grad.shape()));
    }
    let n = last_dim("softmax_backward", y)?;
    let mut out = vec![0.0f32; y.numel()];
    for ((o, yr), gr) in out.chunks_mut(n).zip(y.data().chunks(n)).zip(grad.data().chunks(n)) {
        let dot: f32 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for ((o, &yv), &gv) in o.iter_mut().zip(yr).zip(gr) {
            *o = yv * (gv - dot);
        }
    }
    Ok(Tensor::from_parts(y.shape().to_vec(), out))
}

/// Sets entry (i, j) to −∞ wherever key j lies after query i.
pub fn causal_mask(a: &Tensor) -> Result<Tensor> {
    let (r, c) = a.dims2("causal_mask")?;
    let mut out = a.to_vec();
    for i in 0..r {
        for v in &mut out[i * c + (i + 1).min(c)..(i + 1) * c] {
            *v = f32::NEG_INFINITY;
        }
    }
    Ok(Tensor::from_parts(vec![r, c], out))
}

pub fn causal_mask_backward(grad: &Tensor) -> Result<Tensor> {
    let (r, c) = grad.dims2("causal_mask_backward")?;
    let mut out = grad.to_vec();
    for i in 0..r {
        for v in &mut out[i * c + (i + 1).min(c)..(i + 1) * c] {
            *v = 0.0;
        }
    }
    Ok(Tensor::from_parts(vec![r, c], out))
}

pub fn slice_cols(a: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let (r, c) = a.dims2("slice_cols")?;
    if start + len > c {
        return Err(Error::IndexOutOfRange {
            what: "column slice end",
            index: start + len,
            limit: c,
        });
    }
    let d = a.data();
    let mut out = Vec::with_capacity(r * len);
    for i in 0..r {
        out.extend_from_slice(&d[i * c + start..i * c + start + len]);
    }
    Ok(Tensor::from_parts(vec![r, len], out))
}

pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| Error::InvalidShape {
        op: "concat_cols",
        reason: "nothing to concatenate".into(),
    })?;
    let (r, _) = first.dims2("concat_cols")?;
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        let (pr, pc) = p.dims2("concat_cols")?;
        if pr != r {
            return Err(Error::shape("concat_cols", first.shape(), p.shape()));
        }
        widths.push(pc);
    }
    let total: usize = widths.iter().sum();
    let mut out = Vec::with_capacity(r * total);
    for i in 0..r {
        for (p, &w) in parts.iter().zip(&widths) {
            out.extend_from_slice(&p.data()[i * w..(i + 1) * w]);
        }
    }
    Ok(Tensor::from_parts(vec![r, total], out))
}

/// Concatenates along `axis` in the given order.
pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| Error::InvalidShape {
        op: "concat",
        reason: "nothing to concatenate".into(),
    })?;
    let rank = first.rank();
    if axis >= rank {
        return Err(Error::IndexOutOfRange {
            what: "concat axis",
            index: axis,
            limit: rank,
        });
    }
    for p in parts {
        let compatible = p.rank() == rank
            && p.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
        if !compatible {
            return Err(Error::shape("concat", first.shape(), p.shape()));
        }
    }
    let outer: usize = first.shape()[..axis].iter().product();
    let inner: usize = first.shape()[axis + 1..].iter().product();
    let mut shape = first.shape().to_vec();
    shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
    let mut out = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for p in parts {
            let chunk = p.shape()[axis] * inner;
            out.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    Ok(Tensor::from_parts(shape, out))
}

/// Contiguous block `index` of `count` equal blocks along `axis`.
pub fn split_block(a: &Tensor, axis: usize, count: usize, index: usize) -> Result<Tensor> {
    if axis >= a.rank() {
        return Err(Error::IndexOutOfRange {
            what: "split axis",
            index: axis,
            limit: a.rank(),
        });
    }
    let extent = a.shape()[axis];
    if count == 0 || !extent.is_multiple_of(count) {
        return Err(Error::Divisibility {
            axis,
            extent,
            devices: count,
        });
    }
    let block = extent / count;
    let outer: usize = a.shape()[..axis].iter().product();
    let inner: usize = a.shape()[axis + 1..].iter().product();
    let mut shape = a.shape().to_vec();
    shape[axis] = block;
    let mut out = Vec::with_capacity(outer * block * inner);
    for o in 0..outer {
        let base = o * extent * inner + index * block * inner;
        out.extend_from_slice(&a.data()[base..base + block * inner]);
    }
    Ok(Tensor::from_parts(shape, out))
}

/// `x / sqrt(mean(x²) + eps) ⊙ gain`, row-wise over the last axis.
pub fn rms_norm(x: &Tensor, gain: &Tensor, eps: f32) -> Result<Tensor> {
    let (_, d) = x.dims2("rms_norm")?;
    if gain.shape() != [d] {
        return Err(Error::shape("rms_norm", x.shape(), gain.shape()));
    }
    let g = gain.data();
    let mut out = x.to_vec();
    for row in out.chunks_mut(d) {
        let inv = inv_rms(row, eps);
        for (v, &gv) in row.iter_mut().zip(g) {
            *v = *v * inv * gv;
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

fn inv_rms(row: &[f32], eps: f32) -> f32 {
    let ms = row.iter().map(|v| v * v).sum::<f32>() / row.len() as f32;
    1.0 / (ms + eps).sqrt()
}

/// Returns (∂x, ∂gain).
pub fn rms_norm_backward(x: &Tensor, gain: &Tensor, eps: f32, grad: &Tensor) -> Result<(Tensor, Tensor)> {
    let (_, d) = x.dims2("rms_norm_backward")?;
    if grad.shape() != x.shape() {
        return Err(Error::shape("rms_norm_backward", x.shape(), grad.shape()));
    }
    let g = gain.data();
    let mut dx = vec![0.0f32; x.numel()];
    let mut dgain = vec![0.0f32; d];
    for ((dxr, xr), gr) in dx.chunks_mut(d).zip(x.data().chunks(d)).zip(grad.data().chunks(d)) {
        let inv = inv_rms(xr, eps);
        let mut dot = 0.0f32;
        for j in 0..d {
            let n = xr[j] * inv;
            dgain[j] += gr[j] * n;
            dot += gr[j] * g[j] * n;
        }
        let mean_dot = dot / d as f32;
        for j in 0..d {
            let n = xr[j] * inv;
            dxr[j] = inv * (gr[j] * g[j] - n * mean_dot);
        }
    }
    Ok((
        Tensor::from_parts(x.shape().to_vec(), dx),
        Tensor::from_parts(vec![d], dgain),
    ))
}

fn rope_rotate(x: &Tensor, head_dim: usize, theta: f32, sign: f64) -> Result<Tensor> {
    let (t, width) = x.dims2("rope")?;
    if head_dim == 0 || !head_dim.is_multiple_of(2) || width % head_dim != 0 {
        return Err(Error::InvalidShape {
            op: "rope",
            reason: format!("width {width} is not a multiple of even head_dim {head_dim}"),
        });
    }
    let half = head_dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|i| (theta as f64).powf(-2.0 * i as f64 / head_dim as f64))
        .collect();
    let mut out = x.to_vec();
    for pos in 0..t {
        let row = &mut out[pos * width..(pos + 1) * width];
        for (i, &f) in freqs.iter().enumerate() {
            let angle = sign * pos as f64 * f;
            let (s, c) = (angle.sin() as f32, angle.cos() as f32);
            for head in row.chunks_mut(head_dim) {
                let (a, b) = (head[2 * i], head[2 * i + 1]);
                head[2 * i] = a * c - b * s;
                head[2 * i + 1] = a * s + b * c;
            }
        }
    }
    Ok(Tensor::from_parts(vec![t, width], out))
}

/// Rotary position embedding on interleaved pairs (2i, 2i+1) of each head,
/// with frequency `theta^(-2i/head_dim)`; row index is the position.
pub fn rope(x: &Tensor, head_dim: usize, theta: f32) -> Result<Tensor> {
    rope_rotate(x, head_dim, theta, 1.0)
}

/// The rotation is orthogonal, so its adjoint is the inverse rotation.
pub fn rope_backward(grad: &Tensor, head_dim: usize, theta: f32) -> Result<Tensor> {
    rope_rotate(grad, head_dim, theta, -1.0)
}

/// Result of the masked next-token cross-entropy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrossEntropy {
    pub loss: f32,
    /// Number of positions contributing to the mean.
    pub count: usize,
}

impl CrossEntropy {
    pub fn is_empty(&self) -> bool {
        self.count == 0
    }
}

fn check_targets(logits: &Tensor, targets: &[u32], mask: &[bool]) -> Result<(usize, usize)> {
    let (t, v) = logits.dims2("cross_entropy")?;
    if targets.len() != t || mask.len() != t {
        return Err(Error::InvalidShape {
            op: "cross_entropy",
            reason: format!(
                "{t} logit rows but {} targets and {} mask entries",
                targets.len(),
                mask.len()
            ),
        });
    }
    for (&tok, &m) in targets.iter().zip(mask) {
        if m && tok as usize >= v {
            return Err(Error::IndexOutOfRange {
                what: "target id",
                index: tok as usize,
                limit: v,
            });
        }
    }
    Ok((t, v))
}

fn log_sum_exp(row: &[f32]) -> f32 {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let sum: f32 = row.iter().map(|&z| (z - max).exp()).sum();
    max + sum.ln()
}

/// Mean of `−log softmax(logits)[t, target_t]` over positions with `mask[t]`.
/// With no unmasked positions the loss is 0 and `count` is 0.
pub fn cross_entropy_next_token(logits: &Tensor, targets: &[u32], mask: &[bool]) -> Result<CrossEntropy> {
    let (_, v) = check_targets(logits, targets, mask)?;
    let mut total = 0.0f32;
    let mut count = 0usize;
    for ((row, &tok), &m) in logits.data().chunks(v).zip(targets).zip(mask) {
        if m {
            total += log_sum_exp(row) - row[tok as usize];
            count += 1;
        }
    }
    let loss = if count == 0 { 0.0 } else { total / count as f32 };
    Ok(CrossEntropy { loss, count })
}

/// ∂loss/∂logits scaled by the upstream scalar `grad`.
pub fn cross_entropy_backward(logits: &Tensor, targets: &[u32], mask: &[bool], grad: f32) -> Result<Tensor> {
    let (_, v) = check_targets(logits, targets, mask)?;
    let count = mask.iter().filter(|&&m| m).count();
    let mut out = vec![0.0f32; logits.numel()];
    if count > 0 {
        let w = grad / count as f32;
        for (((o, row), &tok), &m) in out.chunks_mut(v).zip(logits.data().chunks(v)).zip(targets).zip(mask) {
            if !m {
                continue;
            }
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f32;
            for (ov, &z) in o.iter_mut().zip(row) {
                *ov = (z - max).exp();
                sum += *ov;
            }
            for ov in o.iter_mut() {
                *ov = *ov / sum * w;
            }
            o[tok as usize] -= w;
        }
    }
    Ok(Tensor::from_parts(logits.shape().to_vec(), out))
}

/// Index of the largest entry in row `row` of a 2-D tensor; ties go to the
/// lowest index.
pub fn argmax_row(a: &Tensor, row: usize) -> Result<usize> {
    let (r, c) = a.dims2("argmax_row")?;
    if row >= r || c == 0 {
        return Err(Error::IndexOutOfRange {
            what: "row",
            index: row,
            limit: r,
        });
    }
    let vals = &a.data()[row * c..(row + 1) * c];
    let mut best = 0;
    for (j, &v) in vals.iter().enumerate() {
        if v > vals[best] {
            best = j;
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_annihilator() {
        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let m = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(matmul(&eye, &m).unwrap(), m);
        assert_eq!(matmul(&eye, &Tensor::zeros(&[2, 2])).unwrap(), Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, Error::ShapeMismatch { .. }));
    }

    #[test]
    fn elementwise_basics() {
        let a = t(&[2], &[1.0, 2.0]);
        let b = t(&[2], &[3.0, 4.0]);
        assert_eq!(elementwise(Elementwise::Add, &a, Some(&b)).unwrap().data(), &[4.0, 6.0]);
        assert_eq!(elementwise(Elementwise::Mul, &a, Some(&b)).unwrap().data(), &[3.0, 8.0]);
        assert_eq!(silu(&t(&[1], &[0.0])).data(), &[0.0]);
        assert!(elementwise(Elementwise::Add, &a, Some(&t(&[3], &[0.0; 3]))).is_err());
        assert!(elementwise(Elementwise::Add, &a, None).is_err());
        assert!(elementwise(Elementwise::Silu, &a, Some(&b)).is_err());
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let s = softmax_lastdim(&t(&[4], &[0.0; 4])).unwrap();
        assert_eq!(s.data(), &[0.25; 4]);
        let s = softmax_lastdim(&t(&[2], &[1000.0, 0.0])).unwrap();
        assert!((s.data()[0] - 1.0).abs() < 1e-6);
        assert!(s.data()[1].abs() < 1e-6);
        assert!(s.all_finite());
        assert!(softmax_lastdim(&Tensor::zeros(&[2, 0])).is_err());
    }

    #[test]
    fn causal_mask_upper_triangle() {
        let m = causal_mask(&Tensor::zeros(&[3, 3])).unwrap();
        let inf = f32::NEG_INFINITY;
        assert_eq!(m.data(), &[0.0, inf, inf, 0.0, 0.0, inf, 0.0, 0.0, 0.0]);
        let s = softmax_lastdim(&m).unwrap();
        assert_eq!(s.data()[0], 1.0);
        assert_eq!(s.data()[3..5], [0.5, 0.5]);
    }

    #[test]
    fn cross_entropy_uniform_and_peaked() {
        let ce = cross_entropy_next_token(&Tensor::zeros(&[2, 4]), &[1, 3], &[true, true]).unwrap();
        assert!((ce.loss - 4f32.ln()).abs() < 1e-6);
        assert_eq!(ce.count, 2);

        let mut row = vec![0.0f32; 5];
        row[2] = 30.0;
        let ce = cross_entropy_next_token(&t(&[1, 5], &row), &[2], &[true]).unwrap();
        assert!(ce.loss < 1e-9 && ce.loss >= 0.0);
    }

    #[test]
    fn cross_entropy_masking_and_errors() {
        let ce = cross_entropy_next_token(&Tensor::zeros(&[2, 4]), &[0, 0], &[false, false]).unwrap();
        assert_eq!(ce.loss, 0.0);
        assert!(ce.is_empty());
        // masked targets are not range-checked
        assert!(cross_entropy_next_token(&Tensor::zeros(&[1, 4]), &[9], &[false]).is_ok());
        assert!(matches!(
            cross_entropy_next_token(&Tensor::zeros(&[1, 4]), &[4], &[true]),
            Err(Error::IndexOutOfRange { index: 4, limit: 4, .. })
        ));
    }

    #[test]
    fn concat_and_split_are_inverse() {
        let a = Tensor::from_fn(&[4, 6], |i| i as f32);
        for axis in 0..2 {
            let blocks: Vec<Tensor> = (0..2).map(|i| split_block(&a, axis, 2, i).unwrap()).collect();
            let refs: Vec<&Tensor> = blocks.iter().collect();
            assert!(concat(&refs, axis).unwrap().bit_eq(&a));
        }
        assert!(matches!(split_block(&a, 1, 4, 0), Err(Error::Divisibility { axis: 1, extent: 6, devices: 4 })));
    }

    #[test]
    fn argmax_prefers_first_tie() {
        let a = t(&[1, 4], &[1.0, 3.0, 3.0, 0.0]);
        assert_eq!(argmax_row(&a, 0).unwrap(), 1);
    }
}
