//! Raw numeric kernels shared by the forward and backward passes.

use super::Scalar;

/// Output extent of a strided window sweep.
pub(crate) fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

/// Unfolds `x` (c×h×w) into columns of shape (c·k·k)×(ho·wo).
pub(crate) fn im2col<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Vec<T> {
    let ho = conv_out(h, k, stride, pad);
    let wo = conv_out(w, k, stride, pad);
    let cols_w = ho * wo;
    let mut cols = vec![T::zero(); c * k * k * cols_w];
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * cols_w..(row + 1) * cols_w];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[oy * wo + ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters columns back onto a c×h×w plane, summing overlaps.
pub(crate) fn col2im<T: Scalar>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Vec<T> {
    let ho = conv_out(h, k, stride, pad);
    let wo = conv_out(w, k, stride, pad);
    let cols_w = ho * wo;
    let mut x = vec![T::zero(); c * h * w];
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * cols_w..(row + 1) * cols_w];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            plane[iy as usize * w + ix as usize] =
                                plane[iy as usize * w + ix as usize] + src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// One axis of a bilinear interpolation table (align-corners = false).
#[derive(Clone, Debug)]
pub(crate) struct AxisTaps<T> {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub w_hi: Vec<T>,
}

pub(crate) fn axis_taps<T: Scalar>(in_len: usize, out_len: usize) -> AxisTaps<T> {
    let scale = in_len as f64 / out_len as f64;
    let mut taps = AxisTaps {
        lo: Vec::with_capacity(out_len),
        hi: Vec::with_capacity(out_len),
        w_hi: Vec::with_capacity(out_len),
    };
    for o in 0..out_len {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let lo = (src.floor() as usize).min(in_len - 1);
        let hi = (lo + 1).min(in_len - 1);
        let frac = if hi == lo { 0.0 } else { src - lo as f64 };
        taps.lo.push(lo);
        taps.hi.push(hi);
        taps.w_hi.push(T::from_f64_lossy(frac));
    }
    taps
}

pub(crate) fn resize_forward<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    ys: &AxisTaps<T>,
    xs: &AxisTaps<T>,
) -> Vec<T> {
    let oh = ys.lo.len();
    let ow = xs.lo.len();
    let mut out = vec![T::zero(); c * oh * ow];
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        let dst = &mut out[ci * oh * ow..(ci + 1) * oh * ow];
        for oy in 0..oh {
            let (y0, y1, fy) = (ys.lo[oy], ys.hi[oy], ys.w_hi[oy]);
            let gy = T::one() - fy;
            for ox in 0..ow {
                let (x0, x1, fx) = (xs.lo[ox], xs.hi[ox], xs.w_hi[ox]);
                let gx = T::one() - fx;
                let top = plane[y0 * w + x0] * gx + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * gx + plane[y1 * w + x1] * fx;
                dst[oy * ow + ox] = top * gy + bot * fy;
            }
        }
    }
    out
}

pub(crate) fn resize_backward<T: Scalar>(
    dy: &[T],
    c: usize,
    h: usize,
    w: usize,
    ys: &AxisTaps<T>,
    xs: &AxisTaps<T>,
) -> Vec<T> {
    let oh = ys.lo.len();
    let ow = xs.lo.len();
    let mut dx = vec![T::zero(); c * h * w];
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        let src = &dy[ci * oh * ow..(ci + 1) * oh * ow];
        for oy in 0..oh {
            let (y0, y1, fy) = (ys.lo[oy], ys.hi[oy], ys.w_hi[oy]);
            let gy = T::one() - fy;
            for ox in 0..ow {
                let (x0, x1, fx) = (xs.lo[ox], xs.hi[ox], xs.w_hi[ox]);
                let gx = T::one() - fx;
                let g = src[oy * ow + ox];
                plane[y0 * w + x0] = plane[y0 * w + x0] + g * gy * gx;
                plane[y0 * w + x1] = plane[y0 * w + x1] + g * gy * fx;
                plane[y1 * w + x0] = plane[y1 * w + x0] + g * fy * gx;
                plane[y1 * w + x1] = plane[y1 * w + x1] + g * fy * fx;
            }
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// `tanh` through one `exp`; much cheaper than the libm call.
fn tanh<T: Scalar>(z: T) -> T {
    let two = T::one() + T::one();
    T::one() - two / ((z + z).exp() + T::one())
}

pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64_lossy(GELU_C);
    let a = T::from_f64_lossy(GELU_A);
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let t = tanh(c * (x + a * x * x * x));
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub(crate) fn softplus<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Branch-free `exp` over a slice: Cody-Waite range reduction and a degree-6
/// polynomial, within 2 ulp of libm. Inputs below -87 flush to zero. Written
/// so the loop vectorizes.
pub(crate) fn exp_f32(xs: &mut [f32]) {
    const LN2_HI: f32 = 0.693_359_4;
    const LN2_LO: f32 = -2.121_944_4e-4;
    // 1.5 · 2^23: adding and subtracting it rounds to the nearest integer.
    const ROUND: f32 = 12_582_912.0;
    for v in xs.iter_mut() {
        let x0 = *v;
        let x = x0.max(-87.0).min(88.0);
        let n = (x * std::f32::consts::LOG2_E + ROUND) - ROUND;
        let r = x - n * LN2_HI - n * LN2_LO;
        let mut p = 1.987_569_1e-4_f32;
        p = p * r + 1.398_199_9e-3;
        p = p * r + 8.333_452e-3;
        p = p * r + 4.166_579_6e-2;
        p = p * r + 1.666_666_5e-1;
        p = p * r + 5.000_000_1e-1;
        let y = p * r * r + r + 1.0;
        // The low mantissa bits of 2^23 + n + 127 hold the biased exponent.
        let scale = f32::from_bits((n + 8_388_735.0).to_bits() << 23);
        let e = y * scale;
        *v = if x0 < -87.0 {
            0.0
        } else if x0 > 88.0 {
            f32::INFINITY
        } else if x0.is_nan() {
            x0
        } else {
            e
        };
    }
}

/// GELU over a slice; `x·σ(2z)` with `z` the tanh argument, which equals
/// `½x(1 + tanh z)`.
pub(crate) fn gelu_slice<T: Scalar>(x: &[T]) -> Vec<T> {
    let c = T::from_f64_lossy(2.0 * GELU_C);
    let a = T::from_f64_lossy(GELU_A);
    let mut e: Vec<T> = x.iter().map(|&v| c * (v + a * v * v * v)).collect();
    T::exp_slice(&mut e);
    for (o, &v) in e.iter_mut().zip(x) {
        *o = v - v / (*o + T::one());
    }
    e
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_exp_tracks_libm() {
        let xs: Vec<f32> = (-1990..=2000).map(|i| i as f32 * 0.0437).collect();
        let mut ys = xs.clone();
        exp_f32(&mut ys);
        for (&x, &y) in xs.iter().zip(&ys) {
            let want = x.exp();
            assert!(((y - want) / want).abs() < 4e-7, "exp({x}) = {y}, libm {want}");
        }
        let mut edge = [-200.0, 200.0, f32::NAN, f32::NEG_INFINITY, f32::INFINITY, 0.0];
        exp_f32(&mut edge);
        assert_eq!(edge[0], 0.0);
        assert_eq!(edge[1], f32::INFINITY);
        assert!(edge[2].is_nan());
        assert_eq!(edge[3], 0.0);
        assert_eq!(edge[4], f32::INFINITY);
        assert_eq!(edge[5], 1.0);
    }

    #[test]
    fn gelu_matches_tanh_form() {
        let xs: Vec<f64> = (-60..=60).map(|i| i as f64 * 0.25).collect();
        for (&x, &y) in xs.iter().zip(&gelu_slice(&xs)) {
            let want = 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh());
            assert!((y - want).abs() < 1e-12, "gelu({x}) = {y}, want {want}");
        }
        let big = gelu_slice(&[1e4f32, -1e4]);
        assert_eq!(big, vec![1e4, 0.0]);
    }
}
