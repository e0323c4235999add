//! Tape-free forward kernels and their vector-Jacobian products.
//!
//! Every function here is pure. The tape calls the same kernels, so forward
//! values computed with or without a tape are identical bit for bit.

use super::{Tensor, EPS_LOG};
use crate::error::{Error, Result};

/// Output extents of a convolution along one spatial axis.
fn conv_out_len(n: usize, k: usize, stride: usize, padding: usize) -> usize {
    (n + 2 * padding - k) / stride + 1
}

/// Range of output positions whose tap `k` lands inside `[0, n)`.
#[inline]
fn valid_out_range(n: usize, k: usize, stride: usize, padding: usize, out: usize) -> (usize, usize) {
    // input index = o * stride + k - padding
    let lo = if padding > k {
        (padding - k).div_ceil(stride)
    } else {
        0
    };
    let hi = if n + padding > k {
        ((n - 1 + padding - k) / stride + 1).min(out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    padding: usize,
}

fn conv_geom(input: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Result<ConvGeom> {
    let (is, ks) = (input.shape(), kernel.shape());
    if is.len() != 4 || ks.len() != 4 {
        return Err(Error::dim(
            "conv2d",
            format!("expected rank-4 input and kernel, got {is:?} and {ks:?}"),
        ));
    }
    if is[1] != ks[1] {
        return Err(Error::dim(
            "conv2d",
            format!("input channels (axis 1) {} != kernel channels (axis 1) {}", is[1], ks[1]),
        ));
    }
    if stride == 0 {
        return Err(Error::Argument("conv2d stride must be positive".into()));
    }
    let (kh, kw) = (ks[2], ks[3]);
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::dim(
            "conv2d",
            format!("kernel spatial extents (axes 2,3) must be odd, got {kh}x{kw}"),
        ));
    }
    if is[2] + 2 * padding < kh || is[3] + 2 * padding < kw {
        return Err(Error::dim(
            "conv2d",
            format!(
                "padded input (axes 2,3) {}x{} smaller than kernel {kh}x{kw}",
                is[2] + 2 * padding,
                is[3] + 2 * padding
            ),
        ));
    }
    Ok(ConvGeom {
        n: is[0],
        cin: is[1],
        h: is[2],
        w: is[3],
        cout: ks[0],
        kh,
        kw,
        ho: conv_out_len(is[2], kh, stride, padding),
        wo: conv_out_len(is[3], kw, stride, padding),
        stride,
        padding,
    })
}

/// Visits every (kernel tap, output position, input position) triple of one
/// image whose input position lies inside the unpadded input.
/// `f(row, out_pos, in_pos)` with `row = (ci * kh + ki) * kw + kj` and
/// positions flattened within a plane (`in_pos` within the whole image).
#[inline]
fn for_each_patch_entry(g: &ConvGeom, mut f: impl FnMut(usize, usize, usize)) {
    for ci in 0..g.cin {
        for ki in 0..g.kh {
            let (oh_lo, oh_hi) = valid_out_range(g.h, ki, g.stride, g.padding, g.ho);
            for kj in 0..g.kw {
                let (ow_lo, ow_hi) = valid_out_range(g.w, kj, g.stride, g.padding, g.wo);
                let row = (ci * g.kh + ki) * g.kw + kj;
                for oh in oh_lo..oh_hi {
                    let ih = oh * g.stride + ki - g.padding;
                    let in_row = (ci * g.h + ih) * g.w;
                    for ow in ow_lo..ow_hi {
                        f(row, oh * g.wo + ow, in_row + ow * g.stride + kj - g.padding);
                    }
                }
            }
        }
    }
}

/// Unfolds one image `[Cin,H,W]` into patch rows `[Cin*kh*kw, ho*wo]`;
/// padded taps stay zero.
fn im2col(image: &[f64], g: &ConvGeom) -> Vec<f64> {
    let plane = g.ho * g.wo;
    let mut cols = vec![0.0; g.cin * g.kh * g.kw * plane];
    for_each_patch_entry(g, |row, o, i| cols[row * plane + o] = image[i]);
    cols
}

/// 2-D cross-correlation (no kernel flip) of `[N,Cin,H,W]` with `[Cout,Cin,kh,kw]`.
pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let g = conv_geom(input, kernel, stride, padding)?;
    let (plane, rows, in_size) = (g.ho * g.wo, g.cin * g.kh * g.kw, g.cin * g.h * g.w);
    let mut out = vec![0.0; g.n * g.cout * plane];
    let k = kernel.data();
    for (n, image) in input.data().chunks(in_size.max(1)).enumerate().take(g.n) {
        let cols = im2col(image, &g);
        for co in 0..g.cout {
            let dst = &mut out[(n * g.cout + co) * plane..][..plane];
            for (r, src) in cols.chunks(plane).enumerate() {
                let wv = k[co * rows + r];
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d += wv * v;
                }
            }
        }
    }
    Tensor::new(&[g.n, g.cout, g.ho, g.wo], out)
}

/// Gradients of a convolution with respect to its input and kernel.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<(Tensor, Tensor)> {
    let g = conv_geom(input, kernel, stride, padding)?;
    if grad_out.shape() != [g.n, g.cout, g.ho, g.wo] {
        return Err(Error::dim(
            "conv2d_backward",
            format!("grad shape {:?}", grad_out.shape()),
        ));
    }
    let (plane, rows, in_size) = (g.ho * g.wo, g.cin * g.kh * g.kw, g.cin * g.h * g.w);
    let mut gx = vec![0.0; input.len()];
    let mut gk = vec![0.0; kernel.len()];
    let (x, k, go) = (input.data(), kernel.data(), grad_out.data());
    for n in 0..g.n {
        let cols = im2col(&x[n * in_size..(n + 1) * in_size], &g);
        let mut gcols = vec![0.0; rows * plane];
        for co in 0..g.cout {
            let go_row = &go[(n * g.cout + co) * plane..][..plane];
            for r in 0..rows {
                let src = &cols[r * plane..][..plane];
                gk[co * rows + r] += go_row.iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
                let wv = k[co * rows + r];
                for (d, &v) in gcols[r * plane..][..plane].iter_mut().zip(go_row) {
                    *d += wv * v;
                }
            }
        }
        let gx_n = &mut gx[n * in_size..(n + 1) * in_size];
        for_each_patch_entry(&g, |row, o, i| gx_n[i] += gcols[row * plane + o]);
    }
    Ok((
        Tensor::new(input.shape(), gx)?,
        Tensor::new(kernel.shape(), gk)?,
    ))
}

/// Adds a per-channel bias `[C]` to a `[N,C,H,W]` tensor.
pub fn add_channel_bias(input: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let s = input.shape();
    if s.len() != 4 || bias.shape() != [s[1]] {
        return Err(Error::dim(
            "add_channel_bias",
            format!("input {s:?}, bias {:?}", bias.shape()),
        ));
    }
    let plane = s[2] * s[3];
    let mut out = input.clone();
    for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let b = bias.data()[i % s[1]];
        chunk.iter_mut().for_each(|v| *v += b);
    }
    Ok(out)
}

/// Sums a `[N,C,H,W]` gradient down to the `[C]` bias it came from.
pub fn channel_bias_grad(grad_out: &Tensor) -> Tensor {
    let s = grad_out.shape();
    let plane = s[2] * s[3];
    let mut gb = vec![0.0; s[1]];
    for (i, chunk) in grad_out.data().chunks(plane).enumerate() {
        gb[i % s[1]] += chunk.iter().sum::<f64>();
    }
    Tensor::new(&[s[1]], gb).expect("bias grad shape")
}

pub fn relu(t: &Tensor) -> Tensor {
    t.map(|x| x.max(0.0))
}

/// Numerically stable `ln(1 + e^x)`.
#[inline]
pub fn softplus_scalar(x: f64) -> f64 {
    (-x.abs()).exp().ln_1p() + x.max(0.0)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(t: &Tensor) -> Tensor {
    t.map(softplus_scalar)
}

/// Softmax along `axis` with max subtraction.
pub fn softmax_axis(t: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, len, inner) = t.axis_split(axis, "softmax_axis")?;
    let mut out = t.clone();
    let x = t.data();
    let y = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut m = f64::NEG_INFINITY;
            for a in 0..len {
                m = m.max(x[base + a * inner]);
            }
            let mut z = 0.0;
            for a in 0..len {
                let e = (x[base + a * inner] - m).exp();
                y[base + a * inner] = e;
                z += e;
            }
            for a in 0..len {
                y[base + a * inner] /= z;
            }
        }
    }
    Ok(out)
}

/// VJP of softmax given its output `y`.
pub fn softmax_backward(y: &Tensor, gy: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, len, inner) = y.axis_split(axis, "softmax_backward")?;
    let mut gx = gy.clone();
    let (yv, gv) = (y.data(), gy.data());
    let out = gx.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let dot: f64 = (0..len).map(|a| yv[base + a * inner] * gv[base + a * inner]).sum();
            for a in 0..len {
                let j = base + a * inner;
                out[j] = yv[j] * (gv[j] - dot);
            }
        }
    }
    Ok(gx)
}

/// Divides each slice along `axis` by its sum. Inputs must be non-negative.
pub fn l1_normalize_axis(t: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, len, inner) = t.axis_split(axis, "l1_normalize_axis")?;
    if let Some(v) = t.data().iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::Domain {
            op: "l1_normalize_axis",
            detail: format!("negative or NaN entry {v}"),
        });
    }
    let mut out = t.clone();
    let y = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let s: f64 = (0..len).map(|a| y[base + a * inner]).sum();
            if s <= 0.0 {
                return Err(Error::Degenerate {
                    op: "l1_normalize_axis",
                    detail: format!("slice ({o},{i}) sums to zero"),
                });
            }
            for a in 0..len {
                y[base + a * inner] /= s;
            }
        }
    }
    Ok(out)
}

/// VJP of l1 normalization given the input `x` and output `y`.
pub fn l1_normalize_backward(x: &Tensor, y: &Tensor, gy: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, len, inner) = x.axis_split(axis, "l1_normalize_backward")?;
    let mut gx = gy.clone();
    let (xv, yv, gv) = (x.data(), y.data(), gy.data());
    let out = gx.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let s: f64 = (0..len).map(|a| xv[base + a * inner]).sum();
            let dot: f64 = (0..len).map(|a| yv[base + a * inner] * gv[base + a * inner]).sum();
            for a in 0..len {
                let j = base + a * inner;
                out[j] = (gv[j] - dot) / s;
            }
        }
    }
    Ok(gx)
}

/// Natural log; values below [`EPS_LOG`] are a domain error.
pub fn log(t: &Tensor) -> Result<Tensor> {
    if let Some(v) = t.data().iter().find(|v| !(**v >= EPS_LOG)) {
        return Err(Error::Domain {
            op: "log",
            detail: format!("argument {v} below eps_log {EPS_LOG}"),
        });
    }
    Ok(t.map(f64::ln))
}

/// `ln(max(x, floor))`.
pub fn log_floor(t: &Tensor, floor: f64) -> Tensor {
    t.map(|x| x.max(floor).ln())
}

/// Sums over `axis`, removing it from the shape.
pub fn sum_axis(t: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, len, inner) = t.axis_split(axis, "sum_axis")?;
    let mut out = vec![0.0; outer * inner];
    let x = t.data();
    for o in 0..outer {
        for a in 0..len {
            let src = &x[(o * len + a) * inner..(o * len + a + 1) * inner];
            for (d, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                *d += v;
            }
        }
    }
    let mut shape = t.shape().to_vec();
    shape.remove(axis);
    Tensor::new(&shape, out)
}

/// Repeats `grad` (the reduced shape) `len` times along `axis`.
pub fn expand_axis(t: &Tensor, axis: usize, len: usize) -> Result<Tensor> {
    if axis > t.rank() {
        return Err(Error::dim("expand_axis", format!("axis {axis} > rank {}", t.rank())));
    }
    let outer: usize = t.shape()[..axis].iter().product();
    let inner: usize = t.shape()[axis..].iter().product();
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let src = &t.data()[o * inner..(o + 1) * inner];
        for _ in 0..len {
            out.extend_from_slice(src);
        }
    }
    let mut shape = t.shape().to_vec();
    shape.insert(axis, len);
    Tensor::new(&shape, out)
}

/// Mean over the last two (spatial) axes.
pub fn global_average_pool(t: &Tensor) -> Result<Tensor> {
    let r = t.rank();
    if r < 2 {
        return Err(Error::dim(
            "global_average_pool",
            format!("need at least two spatial axes, got shape {:?}", t.shape()),
        ));
    }
    let plane = t.shape()[r - 2] * t.shape()[r - 1];
    if plane == 0 {
        return Err(Error::dim("global_average_pool", "empty spatial plane"));
    }
    let data = t
        .data()
        .chunks(plane)
        .map(|c| c.iter().sum::<f64>() / plane as f64)
        .collect();
    Tensor::new(&t.shape()[..r - 2], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Direct nested-loop cross-correlation used as the reference.
    fn conv_oracle(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (xs, ks) = (x.shape(), k.shape());
        let ho = (xs[2] + 2 * pad - ks[2]) / stride + 1;
        let wo = (xs[3] + 2 * pad - ks[3]) / stride + 1;
        let mut out = Tensor::zeros(&[xs[0], ks[0], ho, wo]);
        for n in 0..xs[0] {
            for co in 0..ks[0] {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let mut acc = 0.0;
                        for ci in 0..xs[1] {
                            for i in 0..ks[2] {
                                for j in 0..ks[3] {
                                    let ih = (oh * stride + i) as isize - pad as isize;
                                    let iw = (ow * stride + j) as isize - pad as isize;
                                    if ih < 0 || iw < 0 || ih >= xs[2] as isize || iw >= xs[3] as isize {
                                        continue;
                                    }
                                    acc += x.at(&[n, ci, ih as usize, iw as usize]) * k.at(&[co, ci, i, j]);
                                }
                            }
                        }
                        out.set(&[n, co, oh, ow], acc);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_scalar_product() {
        let x = Tensor::new(&[1, 1, 1, 1], vec![5.0]).unwrap();
        let k = Tensor::new(&[1, 1, 1, 1], vec![2.0]).unwrap();
        assert_eq!(conv2d(&x, &k, 1, 0).unwrap().data(), &[10.0]);
    }

    #[test]
    fn conv_delta_reproduces_kernel() {
        let mut x = Tensor::zeros(&[1, 1, 5, 5]);
        x.set(&[0, 0, 2, 2], 1.0);
        let k = Tensor::from_fn(&[1, 1, 3, 3], |i| (i + 1) as f64);
        let y = conv2d(&x, &k, 1, 1).unwrap();
        // Cross-correlation places the kernel flipped around the delta.
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(y.at(&[0, 0, 1 + i, 1 + j]), k.at(&[0, 0, 2 - i, 2 - j]));
            }
        }
        assert_eq!(y.sum(), k.sum());
    }

    #[test]
    fn conv_matches_loop_oracle() {
        let cases = [
            ([1, 2, 5, 5], [3, 2, 3, 3], 2, 1),
            ([2, 3, 7, 6], [4, 3, 3, 3], 1, 1),
            ([1, 1, 8, 8], [2, 1, 5, 3], 1, 2),
            ([1, 2, 9, 9], [2, 2, 3, 3], 2, 0),
            ([1, 4, 4, 4], [3, 4, 1, 1], 1, 0),
            ([1, 2, 6, 7], [2, 2, 3, 5], 3, 2),
        ];
        for (seed, (xs, ks, s, p)) in cases.into_iter().enumerate() {
            let x = random(&xs, seed as u64);
            let k = random(&ks, 100 + seed as u64);
            let fast = conv2d(&x, &k, s, p).unwrap();
            let slow = conv_oracle(&x, &k, s, p);
            assert_eq!(fast.shape(), slow.shape());
            assert!(fast.max_abs_diff(&slow) < 1e-10, "case {seed}");
        }
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        let x = Tensor::zeros(&[1, 2, 5, 5]);
        let k = Tensor::zeros(&[1, 3, 3, 3]);
        let err = conv2d(&x, &k, 1, 1).unwrap_err().to_string();
        assert!(err.contains("axis 1"), "{err}");
        assert!(conv2d(&x, &Tensor::zeros(&[1, 2, 2, 2]), 1, 0).is_err());
        assert!(conv2d(&Tensor::zeros(&[1, 2, 1, 1]), &Tensor::zeros(&[1, 2, 3, 3]), 1, 0).is_err());
    }

    #[test]
    fn softmax_known_values() {
        let t = Tensor::new(&[2], vec![0.0, 0.0]).unwrap();
        assert_eq!(softmax_axis(&t, 0).unwrap().data(), &[0.5, 0.5]);
        let t = Tensor::new(&[2], vec![0.0, 3f64.ln()]).unwrap();
        let y = softmax_axis(&t, 0).unwrap();
        assert!((y.data()[0] - 0.25).abs() < 1e-15);
        assert!((y.data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let t = random(&[3, 4, 5], 7);
        for axis in 0..3 {
            let a = softmax_axis(&t, axis).unwrap();
            let b = softmax_axis(&t.add_scalar(17.25), axis).unwrap();
            assert!(a.max_abs_diff(&b) < 1e-12);
        }
    }

    #[test]
    fn softplus_asymptotes() {
        assert!((softplus_scalar(0.0) - 2f64.ln()).abs() < 1e-15);
        assert!((softplus_scalar(50.0) - 50.0).abs() < 1e-12);
        let small = softplus_scalar(-50.0);
        assert!(((small - (-50f64).exp()) / (-50f64).exp()).abs() < 1e-15);
        assert!(softplus_scalar(-800.0) >= 0.0);
    }

    #[test]
    fn l1_normalize_values_and_errors() {
        let t = Tensor::new(&[2], vec![1.0, 3.0]).unwrap();
        assert_eq!(l1_normalize_axis(&t, 0).unwrap().data(), &[0.25, 0.75]);
        let flat = Tensor::full(&[5], 2.0);
        assert!(l1_normalize_axis(&flat, 0).unwrap().data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
        let zero = Tensor::zeros(&[2, 3]);
        assert!(matches!(l1_normalize_axis(&zero, 1), Err(Error::Degenerate { .. })));
        let neg = Tensor::new(&[2], vec![1.0, -1.0]).unwrap();
        assert!(matches!(l1_normalize_axis(&neg, 0), Err(Error::Domain { .. })));
    }

    #[test]
    fn l1_normalize_reconstructs_input() {
        let t = random(&[4, 6], 3).map(|x| x.abs() + 0.01);
        let y = l1_normalize_axis(&t, 1).unwrap();
        let sums = sum_axis(&t, 1).unwrap();
        for r in 0..4 {
            for c in 0..6 {
                assert!((y.at(&[r, c]) * sums.data()[r] - t.at(&[r, c])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn elementary_values() {
        let g = global_average_pool(&Tensor::full(&[3, 4, 5], 2.5)).unwrap();
        assert_eq!(g.shape(), &[3]);
        assert!(g.data().iter().all(|&v| (v - 2.5).abs() < 1e-15));
        let r = relu(&Tensor::new(&[2], vec![-2.0, 3.0]).unwrap());
        assert_eq!(r.data(), &[0.0, 3.0]);
        assert!(log(&Tensor::new(&[1], vec![1e-13]).unwrap()).is_err());
        assert_eq!(log(&Tensor::new(&[1], vec![1.0]).unwrap()).unwrap().data(), &[0.0]);
    }

    #[test]
    fn sum_axis_matches_loops() {
        let t = random(&[2, 3, 4, 5], 11);
        for axis in 0..4 {
            let s = sum_axis(&t, axis).unwrap();
            let mut shape = t.shape().to_vec();
            shape.remove(axis);
            let mut oracle = Tensor::zeros(&shape);
            for a in 0..2 {
                for b in 0..3 {
                    for c in 0..4 {
                        for d in 0..5 {
                            let full = [a, b, c, d];
                            let mut reduced: Vec<usize> = full.to_vec();
                            reduced.remove(axis);
                            let o = oracle.offset(&reduced);
                            oracle.data_mut()[o] += t.at(&full);
                        }
                    }
                }
            }
            assert!(s.max_abs_diff(&oracle) < 1e-12);
        }
    }

    #[test]
    fn expand_then_sum_scales() {
        let t = random(&[3, 4], 5);
        for axis in 0..=2 {
            let e = expand_axis(&t, axis, 3).unwrap();
            let back = sum_axis(&e, axis).unwrap();
            assert!(back.max_abs_diff(&t.scale(3.0)) < 1e-12);
        }
    }

    #[test]
    fn valid_range_edges() {
        // n=5, k=0, stride 2, pad 1: input = 2o - 1 valid for o in 1..=2 ; out len 3
        assert_eq!(valid_out_range(5, 0, 2, 1, 3), (1, 3));
        assert_eq!(valid_out_range(5, 2, 2, 1, 3), (0, 2));
    }
}
