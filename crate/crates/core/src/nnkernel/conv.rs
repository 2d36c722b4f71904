//! 3×3, stride-2, zero-padding-1 convolution on a single sample.

use super::Real;

pub(crate) fn out_size(n: usize) -> usize {
    (n - 1) / 2 + 1
}

/// Pre-activation output, `out_ch × oh × ow`.
pub(crate) fn conv_forward<T: Real>(
    input: &[T],
    in_ch: usize,
    h: usize,
    w: usize,
    kernels: &[T],
    biases: &[T],
    out_ch: usize,
) -> Vec<T> {
    let (oh, ow) = (out_size(h), out_size(w));
    let mut out = vec![T::zero(); out_ch * oh * ow];
    for o in 0..out_ch {
        let plane = &mut out[o * oh * ow..(o + 1) * oh * ow];
        plane.iter_mut().for_each(|v| *v = biases[o]);
        for i in 0..in_ch {
            let src = &input[i * h * w..(i + 1) * h * w];
            let k = &kernels[(o * in_ch + i) * 9..(o * in_ch + i + 1) * 9];
            for y in 0..oh {
                for ky in 0..3 {
                    let sy = (2 * y + ky) as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let row = &src[sy as usize * w..(sy as usize + 1) * w];
                    for x in 0..ow {
                        let mut acc = T::zero();
                        for kx in 0..3 {
                            let sx = (2 * x + kx) as isize - 1;
                            if sx >= 0 && sx < w as isize {
                                acc += k[ky * 3 + kx] * row[sx as usize];
                            }
                        }
                        plane[y * ow + x] += acc;
                    }
                }
            }
        }
    }
    out
}

/// Accumulates kernel and bias gradients and returns the input gradient
/// (skipped when `want_input` is false, e.g. for the first layer).
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward<T: Real>(
    input: &[T],
    in_ch: usize,
    h: usize,
    w: usize,
    kernels: &[T],
    out_ch: usize,
    dpre: &[T],
    dkernels: &mut [T],
    dbiases: &mut [T],
    want_input: bool,
) -> Option<Vec<T>> {
    let (oh, ow) = (out_size(h), out_size(w));
    let mut din = if want_input { Some(vec![T::zero(); in_ch * h * w]) } else { None };
    for o in 0..out_ch {
        let g = &dpre[o * oh * ow..(o + 1) * oh * ow];
        let mut bsum = T::zero();
        for v in g {
            bsum += *v;
        }
        dbiases[o] += bsum;
        for i in 0..in_ch {
            let src = &input[i * h * w..(i + 1) * h * w];
            let base = (o * in_ch + i) * 9;
            for ky in 0..3 {
                for kx in 0..3 {
                    let mut acc = T::zero();
                    for y in 0..oh {
                        let sy = (2 * y + ky) as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for x in 0..ow {
                            let sx = (2 * x + kx) as isize - 1;
                            if sx >= 0 && sx < w as isize {
                                acc += g[y * ow + x] * src[sy as usize * w + sx as usize];
                            }
                        }
                    }
                    dkernels[base + ky * 3 + kx] += acc;
                }
            }
            if let Some(din) = din.as_mut() {
                let dst = &mut din[i * h * w..(i + 1) * h * w];
                let k = &kernels[base..base + 9];
                for y in 0..oh {
                    for ky in 0..3 {
                        let sy = (2 * y + ky) as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for x in 0..ow {
                            let gv = g[y * ow + x];
                            for kx in 0..3 {
                                let sx = (2 * x + kx) as isize - 1;
                                if sx >= 0 && sx < w as isize {
                                    dst[sy as usize * w + sx as usize] += k[ky * 3 + kx] * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    din
}
