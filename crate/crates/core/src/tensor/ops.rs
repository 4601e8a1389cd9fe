//! Forward and backward rules for every [`Op`].

use super::{gemm, Op, Result, Tensor, TensorError, MASK_FILL};

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn invalid(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::Invalid { op, msg: msg.into() }
}

fn arity(op: &'static str, inputs: &[&Tensor], n: usize) -> Result<()> {
    if inputs.len() != n {
        return Err(invalid(op, format!("expected {n} inputs, got {}", inputs.len())));
    }
    Ok(())
}

fn dims2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(invalid(op, format!("expected a 2-D tensor, got {s:?}"))),
    }
}

fn out(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
    Tensor {
        shape,
        data,
        grad: None,
    }
}

/// True when `b` is a row vector broadcast over the rows of `a`.
fn is_bias(a: &Tensor, b: &Tensor) -> bool {
    a.shape() != b.shape()
        && !a.shape().is_empty()
        && b.len() == a.cols()
        && matches!(b.shape(), [_] | [1, _])
}

fn erf(x: f64) -> f64 {
    libm::erf(x)
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub(super) fn forward(op: &Op, inputs: &[&Tensor]) -> Result<Tensor> {
    match op {
        Op::MatMul => {
            arity("matmul", inputs, 2)?;
            let (m, k) = dims2("matmul", inputs[0])?;
            let (k2, n) = dims2("matmul", inputs[1])?;
            if k != k2 {
                return Err(shape_err("matmul", inputs[0].shape(), inputs[1].shape()));
            }
            let mut c = vec![0.0; m * n];
            gemm(m, k, n, inputs[0].data(), false, inputs[1].data(), false, &mut c, 0.0);
            Ok(out(vec![m, n], c))
        }
        Op::Add => {
            arity("add", inputs, 2)?;
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape() == b.shape() {
                let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
                Ok(out(a.shape().to_vec(), data))
            } else if is_bias(a, b) {
                let c = a.cols();
                let data = a
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, x)| x + b.data()[i % c])
                    .collect();
                Ok(out(a.shape().to_vec(), data))
            } else {
                Err(shape_err("add", a.shape(), b.shape()))
            }
        }
        Op::Mul => {
            arity("mul", inputs, 2)?;
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape() != b.shape() {
                return Err(shape_err("mul", a.shape(), b.shape()));
            }
            let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
            Ok(out(a.shape().to_vec(), data))
        }
        Op::Scale(c) => {
            arity("scale", inputs, 1)?;
            let a = inputs[0];
            Ok(out(a.shape().to_vec(), a.data().iter().map(|x| x * c).collect()))
        }
        Op::Sum => {
            arity("sum", inputs, 1)?;
            Ok(Tensor::scalar(inputs[0].data().iter().sum()))
        }
        Op::SoftmaxLastDim => {
            arity("softmax_lastdim", inputs, 1)?;
            let a = inputs[0];
            let c = a.cols();
            let mut data = a.data().to_vec();
            if c > 0 {
                data.chunks_mut(c).for_each(softmax_in_place);
            }
            Ok(out(a.shape().to_vec(), data))
        }
        Op::LayerNorm { eps } => {
            arity("layer_norm", inputs, 3)?;
            let (x, gain, bias) = (inputs[0], inputs[1], inputs[2]);
            let d = x.cols();
            if x.shape().is_empty() || gain.shape() != [d] || bias.shape() != [d] {
                return Err(shape_err("layer_norm", x.shape(), gain.shape()));
            }
            let mut data = vec![0.0; x.len()];
            for (row, dst) in x.data().chunks(d).zip(data.chunks_mut(d)) {
                let (mean, rstd) = row_stats(row, *eps);
                for j in 0..d {
                    dst[j] = (row[j] - mean) * rstd * gain.data()[j] + bias.data()[j];
                }
            }
            Ok(out(x.shape().to_vec(), data))
        }
        Op::Gelu => {
            arity("gelu", inputs, 1)?;
            let a = inputs[0];
            let data = a.data().iter().map(|&x| 0.5 * x * (1.0 + erf(x * INV_SQRT_2))).collect();
            Ok(out(a.shape().to_vec(), data))
        }
        Op::EmbeddingLookup { ids } => {
            arity("embedding_lookup", inputs, 1)?;
            let (v, d) = dims2("embedding_lookup", inputs[0])?;
            let mut data = Vec::with_capacity(ids.len() * d);
            for &id in ids {
                if id >= v {
                    return Err(invalid("embedding_lookup", format!("id {id} out of range for {v} rows")));
                }
                data.extend_from_slice(inputs[0].row(id));
            }
            Ok(out(vec![ids.len(), d], data))
        }
        Op::ConcatRows => {
            if inputs.is_empty() {
                return Err(invalid("concat_rows", "no inputs"));
            }
            let (_, d) = dims2("concat_rows", inputs[0])?;
            let mut rows = 0;
            let mut data = Vec::new();
            for t in inputs {
                let (r, c) = dims2("concat_rows", t)?;
                if c != d {
                    return Err(shape_err("concat_rows", inputs[0].shape(), t.shape()));
                }
                rows += r;
                data.extend_from_slice(t.data());
            }
            Ok(out(vec![rows, d], data))
        }
        Op::SliceRows { start, end } => {
            arity("slice_rows", inputs, 1)?;
            let (r, c) = dims2("slice_rows", inputs[0])?;
            if start > end || *end > r {
                return Err(invalid("slice_rows", format!("range {start}..{end} out of bounds for {r} rows")));
            }
            Ok(out(vec![end - start, c], inputs[0].data()[start * c..end * c].to_vec()))
        }
        Op::CrossEntropyMasked { labels, mask } => {
            arity("cross_entropy_masked", inputs, 1)?;
            let (t, v) = dims2("cross_entropy_masked", inputs[0])?;
            check_ce(t, v, labels, mask)?;
            let count = mask.iter().filter(|&&m| m).count() as f64;
            let mut total = 0.0;
            for (i, row) in inputs[0].data().chunks(v).enumerate() {
                if mask[i] {
                    total -= log_softmax_at(row, labels[i]);
                }
            }
            Ok(Tensor::scalar(total / count))
        }
        Op::Transpose2d => {
            arity("transpose_2d", inputs, 1)?;
            let (r, c) = dims2("transpose_2d", inputs[0])?;
            Ok(out(vec![c, r], transpose(r, c, inputs[0].data())))
        }
        Op::Reshape { shape } => {
            arity("reshape", inputs, 1)?;
            let n: usize = shape.iter().product();
            if n != inputs[0].len() {
                return Err(shape_err("reshape", inputs[0].shape(), shape));
            }
            Ok(out(shape.clone(), inputs[0].data().to_vec()))
        }
        Op::CausalMaskedFill => {
            arity("causal_masked_fill", inputs, 1)?;
            let (r, c) = dims2("causal_masked_fill", inputs[0])?;
            if r != c {
                return Err(shape_err("causal_masked_fill", &[r], &[c]));
            }
            let mut data = inputs[0].data().to_vec();
            for i in 0..r {
                data[i * c + i + 1..(i + 1) * c].fill(MASK_FILL);
            }
            Ok(out(vec![r, c], data))
        }
    }
}

fn check_ce(t: usize, v: usize, labels: &[usize], mask: &[bool]) -> Result<()> {
    if labels.len() != t || mask.len() != t {
        return Err(shape_err("cross_entropy_masked", &[t, v], &[labels.len(), mask.len()]));
    }
    if let Some(&bad) = labels.iter().zip(mask).find(|(&l, &m)| m && l >= v).map(|(l, _)| l) {
        return Err(invalid("cross_entropy_masked", format!("label {bad} out of range for {v} classes")));
    }
    if !mask.iter().any(|&m| m) {
        return Err(TensorError::EmptyMask);
    }
    Ok(())
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        z += *x;
    }
    row.iter_mut().for_each(|x| *x /= z);
}

/// `log softmax(row)[label]`, computed stably.
pub(crate) fn log_softmax_at(row: &[f64], label: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
    row[label] - lse
}

fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d;
    (mean, 1.0 / (var + eps).sqrt())
}

fn transpose(r: usize, c: usize, x: &[f64]) -> Vec<f64> {
    let mut t = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            t[j * r + i] = x[i * c + j];
        }
    }
    t
}

/// Gradients for each input, `None` where `needs[i]` is false.
pub(super) fn backward(op: &Op, inputs: &[&Tensor], output: &Tensor, g: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
    let want = |i: usize| needs.get(i).copied().unwrap_or(false);
    match op {
        Op::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            let ga = want(0).then(|| {
                let mut ga = vec![0.0; m * k];
                gemm(m, n, k, g, false, b.data(), true, &mut ga, 0.0);
                ga
            });
            let gb = want(1).then(|| {
                let mut gb = vec![0.0; k * n];
                gemm(k, m, n, a.data(), true, g, false, &mut gb, 0.0);
                gb
            });
            vec![ga, gb]
        }
        Op::Add => {
            let (a, b) = (inputs[0], inputs[1]);
            let ga = want(0).then(|| g.to_vec());
            let gb = want(1).then(|| {
                if a.shape() == b.shape() {
                    g.to_vec()
                } else {
                    let c = a.cols();
                    let mut gb = vec![0.0; c];
                    for row in g.chunks(c) {
                        gb.iter_mut().zip(row).for_each(|(s, x)| *s += x);
                    }
                    gb
                }
            });
            vec![ga, gb]
        }
        Op::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            let ga = want(0).then(|| g.iter().zip(b.data()).map(|(x, y)| x * y).collect());
            let gb = want(1).then(|| g.iter().zip(a.data()).map(|(x, y)| x * y).collect());
            vec![ga, gb]
        }
        Op::Scale(c) => vec![want(0).then(|| g.iter().map(|x| x * c).collect())],
        Op::Sum => vec![want(0).then(|| vec![g[0]; inputs[0].len()])],
        Op::SoftmaxLastDim => {
            let c = output.cols();
            vec![want(0).then(|| {
                let mut gx = vec![0.0; g.len()];
                for ((y, gy), dst) in output.data().chunks(c).zip(g.chunks(c)).zip(gx.chunks_mut(c)) {
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dst[j] = y[j] * (gy[j] - dot);
                    }
                }
                gx
            })]
        }
        Op::LayerNorm { eps } => {
            let (x, gain) = (inputs[0], inputs[1]);
            let d = x.cols();
            let mut gx = want(0).then(|| vec![0.0; x.len()]);
            let mut gg = want(1).then(|| vec![0.0; d]);
            let mut gbias = want(2).then(|| vec![0.0; d]);
            let mut xhat = vec![0.0; d];
            let mut gxhat = vec![0.0; d];
            for (r, (row, gy)) in x.data().chunks(d).zip(g.chunks(d)).enumerate() {
                let (mean, rstd) = row_stats(row, *eps);
                for j in 0..d {
                    xhat[j] = (row[j] - mean) * rstd;
                    gxhat[j] = gy[j] * gain.data()[j];
                }
                if let Some(gg) = &mut gg {
                    for j in 0..d {
                        gg[j] += gy[j] * xhat[j];
                    }
                }
                if let Some(gb) = &mut gbias {
                    gb.iter_mut().zip(gy).for_each(|(s, v)| *s += v);
                }
                if let Some(gx) = &mut gx {
                    let dn = d as f64;
                    let mean_g = gxhat.iter().sum::<f64>() / dn;
                    let mean_gx = gxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / dn;
                    let dst = &mut gx[r * d..(r + 1) * d];
                    for j in 0..d {
                        dst[j] = rstd * (gxhat[j] - mean_g - xhat[j] * mean_gx);
                    }
                }
            }
            vec![gx, gg, gbias]
        }
        Op::Gelu => vec![want(0).then(|| {
            inputs[0]
                .data()
                .iter()
                .zip(g)
                .map(|(&x, gy)| {
                    let cdf = 0.5 * (1.0 + erf(x * INV_SQRT_2));
                    let pdf = INV_SQRT_2PI * (-0.5 * x * x).exp();
                    gy * (cdf + x * pdf)
                })
                .collect()
        })],
        Op::EmbeddingLookup { ids } => vec![want(0).then(|| {
            let d = inputs[0].cols();
            let mut gt = vec![0.0; inputs[0].len()];
            for (pos, &id) in ids.iter().enumerate() {
                let src = &g[pos * d..(pos + 1) * d];
                gt[id * d..(id + 1) * d].iter_mut().zip(src).for_each(|(s, v)| *s += v);
            }
            gt
        })],
        Op::ConcatRows => {
            let mut offset = 0;
            inputs
                .iter()
                .enumerate()
                .map(|(i, t)| {
                    let n = t.len();
                    let part = want(i).then(|| g[offset..offset + n].to_vec());
                    offset += n;
                    part
                })
                .collect()
        }
        Op::SliceRows { start, end } => vec![want(0).then(|| {
            let c = inputs[0].cols();
            let mut gx = vec![0.0; inputs[0].len()];
            gx[start * c..end * c].copy_from_slice(g);
            gx
        })],
        Op::CrossEntropyMasked { labels, mask } => vec![want(0).then(|| {
            let v = inputs[0].cols();
            let count = mask.iter().filter(|&&m| m).count() as f64;
            let scale = g[0] / count;
            let mut gx = vec![0.0; inputs[0].len()];
            for (i, (row, dst)) in inputs[0].data().chunks(v).zip(gx.chunks_mut(v)).enumerate() {
                if !mask[i] {
                    continue;
                }
                dst.copy_from_slice(row);
                softmax_in_place(dst);
                dst[labels[i]] -= 1.0;
                dst.iter_mut().for_each(|x| *x *= scale);
            }
            gx
        })],
        Op::Transpose2d => vec![want(0).then(|| {
            let (r, c) = (inputs[0].shape()[0], inputs[0].shape()[1]);
            transpose(c, r, g)
        })],
        Op::Reshape { .. } => vec![want(0).then(|| g.to_vec())],
        Op::CausalMaskedFill => vec![want(0).then(|| {
            let c = output.cols();
            let mut gx = g.to_vec();
            for i in 0..c {
                gx[i * c + i + 1..(i + 1) * c].fill(0.0);
            }
            gx
        })],
    }
}
