//! Forward and backward kernels for the layer primitives.
//!
//! Layout conventions: feature maps are `[C, H, W]`, convolution kernels are
//! `[C_out, C_in, kH, kW]`, dense weights are `[M, K]`.

use super::Tensor;
use crate::error::{Error, Result};

fn dims3(t: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::Dimension(format!("{what} must be [C,H,W], got {:?}", t.shape()))),
    }
}

fn conv_out_len(len: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = len + 2 * pad;
    if padded < k || !(padded - k).is_multiple_of(stride) {
        return Err(Error::Geometry(format!(
            "input length {len} with kernel {k}, stride {stride}, pad {pad} gives a non-integral output"
        )));
    }
    Ok((padded - k) / stride + 1)
}

/// Output positions `o` in `0..out` for which `o*stride + k - pad` lands in `0..len`.
fn valid_range(out: usize, len: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi_num = len as isize - 1 + pad as isize - k as isize;
    if hi_num < 0 {
        return (0, 0);
    }
    let hi = (hi_num as usize / stride + 1).min(out);
    (lo.min(hi), hi)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeometry {
    fn new(input: &Tensor, kernel: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Result<Self> {
        let (c_in, h, w) = dims3(input, "conv2d input")?;
        let [c_out, k_in, kh, kw] = *kernel.shape() else {
            return Err(Error::Dimension(format!(
                "conv2d kernel must be [C_out,C_in,kH,kW], got {:?}",
                kernel.shape()
            )));
        };
        if k_in != c_in {
            return Err(Error::Dimension(format!("kernel expects {k_in} input channels, input has {c_in}")));
        }
        bias.expect_shape(&[c_out])?;
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::Geometry(format!("kernel size {kh}x{kw} must be odd")));
        }
        if stride == 0 {
            return Err(Error::Geometry("stride must be at least 1".into()));
        }
        let oh = conv_out_len(h, kh, stride, pad)?;
        let ow = conv_out_len(w, kw, stride, pad)?;
        Ok(Self { c_in, h, w, c_out, kh, kw, oh, ow, stride, pad })
    }
}

/// 2-D cross-correlation with zero padding and per-channel bias.
pub fn conv2d(input: &Tensor, kernel: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let g = ConvGeometry::new(input, kernel, bias, stride, pad)?;
    let (x, k, b) = (input.data(), kernel.data(), bias.data());
    let mut out = vec![0.0; g.c_out * g.oh * g.ow];
    for co in 0..g.c_out {
        let plane = &mut out[co * g.oh * g.ow..(co + 1) * g.oh * g.ow];
        plane.fill(b[co]);
        for ci in 0..g.c_in {
            let xin = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..g.kh {
                let (oy0, oy1) = valid_range(g.oh, g.h, ky, g.stride, g.pad);
                for kx in 0..g.kw {
                    let wv = k[((co * g.c_in + ci) * g.kh + ky) * g.kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (ox0, ox1) = valid_range(g.ow, g.w, kx, g.stride, g.pad);
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ky - g.pad;
                        let row = &xin[iy * g.w..(iy + 1) * g.w];
                        let orow = &mut plane[oy * g.ow..(oy + 1) * g.ow];
                        if g.stride == 1 {
                            let ix0 = ox0 + kx - g.pad;
                            for (o, &xv) in orow[ox0..ox1].iter_mut().zip(&row[ix0..]) {
                                *o += wv * xv;
                            }
                        } else {
                            for ox in ox0..ox1 {
                                orow[ox] += wv * row[ox * g.stride + kx - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![g.c_out, g.oh, g.ow], out)
}

/// Gradients of [`conv2d`] with respect to input, kernel and bias.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let g = ConvGeometry::new(input, kernel, bias, stride, pad)?;
    grad_out.expect_shape(&[g.c_out, g.oh, g.ow])?;
    let (x, k, go) = (input.data(), kernel.data(), grad_out.data());
    let mut dx = vec![0.0; x.len()];
    let mut dk = vec![0.0; k.len()];
    let mut db = vec![0.0; g.c_out];
    for co in 0..g.c_out {
        let gplane = &go[co * g.oh * g.ow..(co + 1) * g.oh * g.ow];
        db[co] = gplane.iter().sum();
        for ci in 0..g.c_in {
            let xin = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            let dxin = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..g.kh {
                let (oy0, oy1) = valid_range(g.oh, g.h, ky, g.stride, g.pad);
                for kx in 0..g.kw {
                    let widx = ((co * g.c_in + ci) * g.kh + ky) * g.kw + kx;
                    let wv = k[widx];
                    let (ox0, ox1) = valid_range(g.ow, g.w, kx, g.stride, g.pad);
                    let mut acc = 0.0;
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ky - g.pad;
                        let grow = &gplane[oy * g.ow..(oy + 1) * g.ow];
                        if g.stride == 1 {
                            let ix0 = ox0 + kx - g.pad;
                            let n = ox1 - ox0;
                            let row = &xin[iy * g.w + ix0..iy * g.w + ix0 + n];
                            let drow = &mut dxin[iy * g.w + ix0..iy * g.w + ix0 + n];
                            for ((&gv, &xv), d) in grow[ox0..ox1].iter().zip(row).zip(drow) {
                                acc += gv * xv;
                                *d += gv * wv;
                            }
                        } else {
                            for ox in ox0..ox1 {
                                let ix = ox * g.stride + kx - g.pad;
                                acc += grow[ox] * xin[iy * g.w + ix];
                                dxin[iy * g.w + ix] += grow[ox] * wv;
                            }
                        }
                    }
                    dk[widx] += acc;
                }
            }
        }
    }
    Ok((
        Tensor::new(input.shape().to_vec(), dx)?,
        Tensor::new(kernel.shape().to_vec(), dk)?,
        Tensor::new(vec![g.c_out], db)?,
    ))
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Passes gradient where the forward input was strictly positive.
pub fn relu_backward(x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    x.zip_with(grad_out, |v, g| if v > 0.0 { g } else { 0.0 })
}

/// 2x2 max pooling with stride 2. Also returns, per output cell, the flat
/// input index that won (first in row-major window order on ties).
pub fn maxpool2_with_argmax(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (c, h, w) = dims3(x, "maxpool2 input")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Geometry(format!("maxpool2 needs even spatial size, got {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let data = x.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut argmax = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let base = ch * h * w + 2 * oy * w + 2 * ox;
                let mut best = base;
                for idx in [base + 1, base + w, base + w + 1] {
                    if data[idx] > data[best] {
                        best = idx;
                    }
                }
                out.push(data[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![c, oh, ow], out)?, argmax))
}

pub fn maxpool2(x: &Tensor) -> Result<Tensor> {
    maxpool2_with_argmax(x).map(|(t, _)| t)
}

pub fn maxpool2_backward(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    if grad_out.len() != argmax.len() {
        return Err(Error::Dimension("maxpool2 gradient does not match recorded argmax".into()));
    }
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&src, &g) in argmax.iter().zip(grad_out.data()) {
        d[src] += g;
    }
    Ok(dx)
}

/// Global average pooling `[K,H,W] -> [K]`.
pub fn gap(x: &Tensor) -> Result<Tensor> {
    let (k, h, w) = dims3(x, "gap input")?;
    let area = h * w;
    let data = x.data().chunks_exact(area).map(|plane| plane.iter().sum::<f64>() / area as f64).collect();
    Tensor::new(vec![k], data)
}

pub fn gap_backward(input_shape: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    let [k, h, w] = *input_shape else {
        return Err(Error::Dimension(format!("gap input must be [K,H,W], got {input_shape:?}")));
    };
    grad_out.expect_shape(&[k])?;
    let area = (h * w) as f64;
    let mut data = Vec::with_capacity(k * h * w);
    for &g in grad_out.data() {
        data.extend(std::iter::repeat_n(g / area, h * w));
    }
    Tensor::new(input_shape.to_vec(), data)
}

fn fc_dims(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<(usize, usize)> {
    let [m, k] = *weight.shape() else {
        return Err(Error::Dimension(format!("fc weight must be [M,K], got {:?}", weight.shape())));
    };
    x.expect_shape(&[k])?;
    bias.expect_shape(&[m])?;
    Ok((m, k))
}

/// Dense layer `weight · x + bias`.
pub fn fc(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (m, k) = fc_dims(x, weight, bias)?;
    let w = weight.data();
    let out = (0..m)
        .map(|i| bias.data()[i] + w[i * k..(i + 1) * k].iter().zip(x.data()).map(|(a, b)| a * b).sum::<f64>())
        .collect();
    Tensor::new(vec![m], out)
}

pub fn fc_backward(x: &Tensor, weight: &Tensor, bias: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (m, k) = fc_dims(x, weight, bias)?;
    grad_out.expect_shape(&[m])?;
    let (w, g, xd) = (weight.data(), grad_out.data(), x.data());
    let mut dx = vec![0.0; k];
    let mut dw = vec![0.0; m * k];
    for i in 0..m {
        for j in 0..k {
            dx[j] += w[i * k + j] * g[i];
            dw[i * k + j] = g[i] * xd[j];
        }
    }
    Ok((Tensor::new(vec![k], dx)?, Tensor::new(vec![m, k], dw)?, grad_out.clone()))
}

/// Numerically stable softmax of a 1-D tensor.
pub fn softmax(logits: &Tensor) -> Vec<f64> {
    let max = logits.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.data().iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Cross-entropy `-log softmax(logits)[label]` and the softmax probabilities.
pub fn softmax_xent(logits: &Tensor, label: usize) -> Result<(f64, Vec<f64>)> {
    if logits.rank() != 1 {
        return Err(Error::Dimension(format!("logits must be 1-D, got {:?}", logits.shape())));
    }
    let m = logits.len();
    if label >= m {
        return Err(Error::Index { index: label, len: m });
    }
    let max = logits.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = logits.data().iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
    Ok((log_sum - logits.data()[label], softmax(logits)))
}

/// Concatenates 1-D tensors.
pub fn concat(parts: &[&Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::Dimension("concat of zero tensors".into()));
    }
    let mut data = Vec::new();
    for p in parts {
        if p.rank() != 1 {
            return Err(Error::Dimension(format!("concat expects 1-D parts, got {:?}", p.shape())));
        }
        data.extend_from_slice(p.data());
    }
    Tensor::new(vec![data.len()], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-12 * (1.0 + a.abs().max(b.abs()))
    }

    /// Straight six-nested-loop cross-correlation.
    fn conv_oracle(x: &Tensor, k: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
        let [ci_n, h, w] = *x.shape() else { panic!() };
        let [co_n, _, kh, kw] = *k.shape() else { panic!() };
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let mut out = Tensor::zeros(&[co_n, oh, ow]);
        for co in 0..co_n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.at(&[co]);
                    for ci in 0..ci_n {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += k.at(&[co, ci, ky, kx]) * x.at(&[ci, iy as usize, ix as usize]);
                                }
                            }
                        }
                    }
                    out.set(&[co, oy, ox], acc);
                }
            }
        }
        out
    }

    #[test]
    fn conv_counts_overlapping_ones() {
        let x = Tensor::full(&[1, 3, 3], 1.0);
        let k = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &k, &Tensor::zeros(&[1]), 1, 1).unwrap();
        assert_eq!(y.at(&[0, 1, 1]), 9.0);
        assert_eq!(y.at(&[0, 0, 0]), 4.0);
        assert_eq!(y.at(&[0, 0, 1]), 6.0);
    }

    #[test]
    fn conv_unit_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[1, 5, 7], &mut rng);
        let k = Tensor::full(&[1, 1, 1, 1], 1.0);
        assert_eq!(conv2d(&x, &k, &Tensor::zeros(&[1]), 1, 0).unwrap(), x);
    }

    #[test]
    fn conv_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&[2, 5, 5], &mut rng);
        let k = random(&[3, 2, 3, 3], &mut rng);
        let b = random(&[3], &mut rng);
        let got = conv2d(&x, &k, &b, 1, 1).unwrap();
        let want = conv_oracle(&x, &k, &b, 1, 1);
        assert_eq!(got.shape(), want.shape());
        assert!(got.data().iter().zip(want.data()).all(|(&a, &b)| close(a, b)));
    }

    #[test]
    fn conv_rejects_bad_geometry() {
        let x = Tensor::zeros(&[1, 4, 4]);
        let b = Tensor::zeros(&[1]);
        let even = Tensor::zeros(&[1, 1, 2, 2]);
        assert!(matches!(conv2d(&x, &even, &b, 1, 0), Err(Error::Geometry(_))));
        let k = Tensor::zeros(&[1, 1, 3, 3]);
        // (4 - 3) / 2 is not integral
        assert!(matches!(conv2d(&x, &k, &b, 2, 0), Err(Error::Geometry(_))));
        let wrong_channels = Tensor::zeros(&[1, 2, 3, 3]);
        assert!(matches!(conv2d(&x, &wrong_channels, &b, 1, 1), Err(Error::Dimension(_))));
    }

    #[test]
    fn relu_examples() {
        let x = Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let g = relu_backward(&x, &Tensor::full(&[3], 1.0)).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn maxpool_examples() {
        let x = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(maxpool2(&x).unwrap().data(), &[4.0]);
        let c = Tensor::full(&[2, 4, 6], 1.5);
        let p = maxpool2(&c).unwrap();
        assert_eq!(p.shape(), &[2, 2, 3]);
        assert!(p.data().iter().all(|&v| v == 1.5));
        assert!(matches!(maxpool2(&Tensor::zeros(&[1, 3, 4])), Err(Error::Geometry(_))));
    }

    #[test]
    fn maxpool_matches_window_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[1, 4, 4], &mut rng);
        let got = maxpool2(&x).unwrap();
        for oy in 0..2 {
            for ox in 0..2 {
                let mut m = f64::NEG_INFINITY;
                for dy in 0..2 {
                    for dx in 0..2 {
                        m = m.max(x.at(&[0, 2 * oy + dy, 2 * ox + dx]));
                    }
                }
                assert_eq!(got.at(&[0, oy, ox]), m);
            }
        }
    }

    #[test]
    fn gap_examples() {
        let x = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(gap(&x).unwrap().data(), &[2.5]);
        assert!(gap(&Tensor::full(&[3, 5, 2], 0.7)).unwrap().data().iter().all(|&v| close(v, 0.7)));
        let g = gap_backward(&[2, 3, 3], &Tensor::full(&[2], 1.0)).unwrap();
        assert!(g.data().iter().all(|&v| close(v, 1.0 / 9.0)));
    }

    #[test]
    fn fc_examples() {
        let x = Tensor::new(vec![2], vec![2.0, 3.0]).unwrap();
        let w = Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap();
        assert_eq!(fc(&x, &w, &Tensor::zeros(&[1])).unwrap().data(), &[5.0]);
        let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(fc(&x, &eye, &Tensor::zeros(&[2])).unwrap(), x);
        assert!(matches!(fc(&x, &Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2])), Err(Error::Dimension(_))));
    }

    #[test]
    fn fc_matches_dot_product_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&[7], &mut rng);
        let w = random(&[3, 7], &mut rng);
        let b = random(&[3], &mut rng);
        let y = fc(&x, &w, &b).unwrap();
        for i in 0..3 {
            let mut acc = b.at(&[i]);
            for j in 0..7 {
                acc += w.at(&[i, j]) * x.at(&[j]);
            }
            assert!(close(y.at(&[i]), acc));
        }
    }

    #[test]
    fn xent_examples() {
        let (loss, _) = softmax_xent(&Tensor::full(&[2], 0.3), 1).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
        let big = Tensor::new(vec![2], vec![1000.0, 0.0]).unwrap();
        let (loss, p) = softmax_xent(&big, 0).unwrap();
        assert!(loss.is_finite() && loss.abs() < 1e-300);
        assert!(p.iter().all(|v| v.is_finite()));
        let (loss, _) = softmax_xent(&big, 1).unwrap();
        assert_eq!(loss, 1000.0);
        assert!(matches!(softmax_xent(&big, 2), Err(Error::Index { index: 2, len: 2 })));
    }

    #[test]
    fn xent_matches_high_precision_reference() {
        // Reference values computed with mpmath at 50 significant digits.
        let cases: [(&[f64], usize, f64); 3] = [
            (&[0.25, -1.5, 3.0, 0.125], 2, 0.123_502_645_015_403_79),
            (&[-2.0, 4.5, 1.0], 0, 6.531_208_724_463_505),
            (&[10.0, 10.000_001], 1, 0.693_146_680_560_070_7),
        ];
        for (logits, label, want) in cases {
            let t = Tensor::new(vec![logits.len()], logits.to_vec()).unwrap();
            let (loss, _) = softmax_xent(&t, label).unwrap();
            assert!((loss - want).abs() <= 1e-14 * want.abs().max(1.0), "{loss} vs {want}");
        }
    }
}
