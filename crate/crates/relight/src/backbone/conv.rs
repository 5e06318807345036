//! Direct 2-D convolution kernels shared by the forward pass and both
//! backward passes. Transposed convolution reuses the same three routines
//! with the argument roles swapped, so every conv-like op in the crate is
//! backed by this one file.
//!
//! Layouts (row-major): images `[C, H, W]`, weights `[Co, Ci, Kh, Kw]`.

use super::tensor::Real;
use rayon::prelude::*;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
}

pub fn out_dim(input: usize, k: usize, spec: ConvSpec) -> usize {
    (input + 2 * spec.pad - k) / spec.stride + 1
}

/// y[co, oh, ow] = sum_{ci, kh, kw} w[co, ci, kh, kw] * x[ci, oh*s - p + kh, ow*s - p + kw]
pub fn conv_fwd<T: Real>(
    x: &[T],
    (ci, h, w): (usize, usize, usize),
    wgt: &[T],
    (co, kh, kw): (usize, usize, usize),
    spec: ConvSpec,
    out: &mut [T],
) {
    let oh = out_dim(h, kh, spec);
    let ow = out_dim(w, kw, spec);
    debug_assert_eq!(x.len(), ci * h * w);
    debug_assert_eq!(wgt.len(), co * ci * kh * kw);
    debug_assert_eq!(out.len(), co * oh * ow);

    if kh == 3 && kw == 3 && spec.stride == 1 && spec.pad == 1 && w >= 2 {
        let per_chan = |oc: usize, out_c: &mut [T]| {
            for icc in 0..ci {
                let x_c = &x[icc * h * w..(icc + 1) * h * w];
                let wb = ((oc * ci) + icc) * 9;
                let k9: [T; 9] = std::array::from_fn(|i| wgt[wb + i]);
                conv3x3_fused(x_c, h, w, &k9, out_c);
            }
        };
        run_per_channel(out, oh * ow, co * ci * 9 * oh * ow, per_chan);
        return;
    }

    let per_chan = |oc: usize, out_c: &mut [T]| {
        for icc in 0..ci {
            let x_c = &x[icc * h * w..(icc + 1) * h * w];
            let w_base = ((oc * ci) + icc) * kh * kw;
            for r in 0..kh {
                for c in 0..kw {
                    let wv = wgt[w_base + r * kw + c];
                    for orow in 0..oh {
                        let irow = (orow * spec.stride + r) as isize - spec.pad as isize;
                        if irow < 0 || irow >= h as isize {
                            continue;
                        }
                        let x_row = &x_c[irow as usize * w..irow as usize * w + w];
                        let o_row = &mut out_c[orow * ow..orow * ow + ow];
                        accumulate_row(o_row, x_row, wv, spec.stride, c as isize - spec.pad as isize, w);
                    }
                }
            }
        }
    };

    run_per_channel(out, oh * ow, co * ci * kh * kw * oh * ow, per_chan);
}

/// Fused-tap 3x3 / stride 1 / pad 1 accumulation of one input channel into
/// one output channel: each output row is written in a single pass.
#[inline]
fn conv3x3_fused<T: Real>(x_c: &[T], h: usize, w: usize, k: &[T; 9], out_c: &mut [T]) {
    for orow in 0..h {
        let o_row = &mut out_c[orow * w..(orow + 1) * w];
        let rows: [Option<&[T]>; 3] = std::array::from_fn(|r| {
            let irow = orow as isize + r as isize - 1;
            if irow < 0 || irow >= h as isize {
                None
            } else {
                Some(&x_c[irow as usize * w..(irow as usize + 1) * w])
            }
        });
        // Interior columns: all three taps of each available row are valid.
        for (r, row) in rows.iter().enumerate() {
            let Some(row) = row else { continue };
            let (k0, k1, k2) = (k[r * 3], k[r * 3 + 1], k[r * 3 + 2]);
            for owc in 1..w - 1 {
                o_row[owc] += k0 * row[owc - 1] + k1 * row[owc] + k2 * row[owc + 1];
            }
            // Edge columns: zero padding drops one tap.
            o_row[0] += k1 * row[0] + k2 * row[1];
            o_row[w - 1] += k0 * row[w - 2] + k1 * row[w - 1];
        }
    }
}

/// dx[ci, ih, iw] += sum_{co, kh, kw} w[co, ci, kh, kw] * dy[co, oh, ow]
/// with ih = oh*s - p + kh. This is also the forward pass of the transposed
/// convolution.
pub fn conv_dx<T: Real>(
    dy: &[T],
    (co, oh, ow): (usize, usize, usize),
    wgt: &[T],
    (ci, kh, kw): (usize, usize, usize),
    spec: ConvSpec,
    (h, w): (usize, usize),
    dx: &mut [T],
) {
    debug_assert_eq!(dy.len(), co * oh * ow);
    debug_assert_eq!(dx.len(), ci * h * w);

    if kh == 3 && kw == 3 && spec.stride == 1 && spec.pad == 1 && w >= 2 && (oh, ow) == (h, w) {
        // Adjoint of a same-size 3x3 conv is a 3x3 conv with the kernel
        // rotated 180 degrees and the channel roles swapped.
        let per_chan = |icc: usize, dx_c: &mut [T]| {
            for oc in 0..co {
                let dy_c = &dy[oc * oh * ow..(oc + 1) * oh * ow];
                let wb = ((oc * ci) + icc) * 9;
                let k9: [T; 9] = std::array::from_fn(|i| wgt[wb + 8 - i]);
                conv3x3_fused(dy_c, h, w, &k9, dx_c);
            }
        };
        run_per_channel(dx, h * w, co * ci * 9 * oh * ow, per_chan);
        return;
    }

    let per_chan = |icc: usize, dx_c: &mut [T]| {
        for oc in 0..co {
            let dy_c = &dy[oc * oh * ow..(oc + 1) * oh * ow];
            let w_base = ((oc * ci) + icc) * kh * kw;
            for r in 0..kh {
                for c in 0..kw {
                    let wv = wgt[w_base + r * kw + c];
                    for orow in 0..oh {
                        let irow = (orow * spec.stride + r) as isize - spec.pad as isize;
                        if irow < 0 || irow >= h as isize {
                            continue;
                        }
                        let dy_row = &dy_c[orow * ow..orow * ow + ow];
                        let dx_row = &mut dx_c[irow as usize * w..irow as usize * w + w];
                        scatter_row(dx_row, dy_row, wv, spec.stride, c as isize - spec.pad as isize, w);
                    }
                }
            }
        }
    };

    run_per_channel(dx, h * w, co * ci * kh * kw * oh * ow, per_chan);
}

/// dw[co, ci, kh, kw] = sum_{oh, ow} dy[co, oh, ow] * x[ci, oh*s - p + kh, ow*s - p + kw]
pub fn conv_dw<T: Real>(
    x: &[T],
    (ci, h, w): (usize, usize, usize),
    dy: &[T],
    (co, oh, ow): (usize, usize, usize),
    spec: ConvSpec,
    (kh, kw): (usize, usize),
    dw: &mut [T],
) {
    debug_assert_eq!(dw.len(), co * ci * kh * kw);

    if kh == 3 && kw == 3 && spec.stride == 1 && spec.pad == 1 && w >= 2 && (oh, ow) == (h, w) {
        let per_chan = |oc: usize, dw_c: &mut [T]| {
            let dy_c = &dy[oc * oh * ow..(oc + 1) * oh * ow];
            for icc in 0..ci {
                let x_c = &x[icc * h * w..(icc + 1) * h * w];
                let mut acc = [T::zero(); 9];
                for orow in 0..h {
                    let dy_row = &dy_c[orow * w..(orow + 1) * w];
                    for r in 0..3usize {
                        let irow = orow as isize + r as isize - 1;
                        if irow < 0 || irow >= h as isize {
                            continue;
                        }
                        let x_row = &x_c[irow as usize * w..(irow as usize + 1) * w];
                        let (mut a0, mut a1, mut a2) = (T::zero(), T::zero(), T::zero());
                        for owc in 1..w - 1 {
                            let d = dy_row[owc];
                            a0 += d * x_row[owc - 1];
                            a1 += d * x_row[owc];
                            a2 += d * x_row[owc + 1];
                        }
                        a1 += dy_row[0] * x_row[0];
                        a2 += dy_row[0] * x_row[1];
                        a0 += dy_row[w - 1] * x_row[w - 2];
                        a1 += dy_row[w - 1] * x_row[w - 1];
                        acc[r * 3] += a0;
                        acc[r * 3 + 1] += a1;
                        acc[r * 3 + 2] += a2;
                    }
                }
                dw_c[icc * 9..(icc + 1) * 9].copy_from_slice(&acc);
            }
        };
        run_per_channel(dw, ci * 9, co * ci * 9 * oh * ow, per_chan);
        return;
    }

    let per_chan = |oc: usize, dw_c: &mut [T]| {
        let dy_c = &dy[oc * oh * ow..(oc + 1) * oh * ow];
        for icc in 0..ci {
            let x_c = &x[icc * h * w..(icc + 1) * h * w];
            for r in 0..kh {
                for c in 0..kw {
                    let mut acc = T::zero();
                    for orow in 0..oh {
                        let irow = (orow * spec.stride + r) as isize - spec.pad as isize;
                        if irow < 0 || irow >= h as isize {
                            continue;
                        }
                        let x_row = &x_c[irow as usize * w..irow as usize * w + w];
                        let dy_row = &dy_c[orow * ow..orow * ow + ow];
                        acc += dot_row(dy_row, x_row, spec.stride, c as isize - spec.pad as isize, w);
                    }
                    dw_c[(icc * kh + r) * kw + c] = acc;
                }
            }
        }
    };

    run_per_channel(dw, ci * kh * kw, co * ci * kh * kw * oh * ow, per_chan);
}

/// o_row[ow] += wv * x_row[ow*stride + off] over valid columns.
#[inline]
fn accumulate_row<T: Real>(o_row: &mut [T], x_row: &[T], wv: T, stride: usize, off: isize, w: usize) {
    let ow_len = o_row.len();
    let (lo, hi) = col_bounds(ow_len, stride, off, w);
    if stride == 1 {
        let base = (lo as isize + off) as usize;
        let xs = &x_row[base..base + (hi - lo)];
        let os = &mut o_row[lo..hi];
        for (o, &xv) in os.iter_mut().zip(xs.iter()) {
            *o += wv * xv;
        }
    } else {
        for ocol in lo..hi {
            let icol = (ocol * stride) as isize + off;
            o_row[ocol] += wv * x_row[icol as usize];
        }
    }
}

/// dx_row[ow*stride + off] += wv * dy_row[ow] over valid columns.
#[inline]
fn scatter_row<T: Real>(dx_row: &mut [T], dy_row: &[T], wv: T, stride: usize, off: isize, w: usize) {
    let ow_len = dy_row.len();
    let (lo, hi) = col_bounds(ow_len, stride, off, w);
    if stride == 1 {
        let base = (lo as isize + off) as usize;
        let ds = &mut dx_row[base..base + (hi - lo)];
        let ys = &dy_row[lo..hi];
        for (d, &yv) in ds.iter_mut().zip(ys.iter()) {
            *d += wv * yv;
        }
    } else {
        for ocol in lo..hi {
            let icol = (ocol * stride) as isize + off;
            dx_row[icol as usize] += wv * dy_row[ocol];
        }
    }
}

/// sum_ow dy_row[ow] * x_row[ow*stride + off] over valid columns.
#[inline]
fn dot_row<T: Real>(dy_row: &[T], x_row: &[T], stride: usize, off: isize, w: usize) -> T {
    let ow_len = dy_row.len();
    let (lo, hi) = col_bounds(ow_len, stride, off, w);
    let mut acc = T::zero();
    if stride == 1 {
        let base = (lo as isize + off) as usize;
        let xs = &x_row[base..base + (hi - lo)];
        for (&yv, &xv) in dy_row[lo..hi].iter().zip(xs.iter()) {
            acc += yv * xv;
        }
    } else {
        for ocol in lo..hi {
            let icol = (ocol * stride) as isize + off;
            acc += dy_row[ocol] * x_row[icol as usize];
        }
    }
    acc
}

/// Range of output columns whose input column `ocol*stride + off` lands in [0, w).
#[inline]
fn col_bounds(ow_len: usize, stride: usize, off: isize, w: usize) -> (usize, usize) {
    let lo = if off >= 0 {
        0
    } else {
        ((-off) as usize).div_ceil(stride)
    };
    let max_in = w as isize - 1 - off;
    if max_in < 0 {
        return (0, 0);
    }
    let hi = (max_in as usize / stride + 1).min(ow_len);
    (lo.min(hi), hi)
}

/// Splits `buf` into per-channel chunks and runs `f` on each; channels are
/// independent so this parallelizes without changing any result bit.
fn run_per_channel<T: Real>(
    buf: &mut [T],
    chunk: usize,
    total_work: usize,
    f: impl Fn(usize, &mut [T]) + Sync,
) {
    const PAR_THRESHOLD: usize = 200_000;
    if total_work >= PAR_THRESHOLD && buf.len() > chunk {
        buf.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(idx, c)| f(idx, c));
    } else {
        for (idx, c) in buf.chunks_mut(chunk).enumerate() {
            f(idx, c);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Plain quadruple-loop reference, no slicing tricks.
    fn conv_ref(
        x: &[f64],
        (ci, h, w): (usize, usize, usize),
        wgt: &[f64],
        (co, kh, kw): (usize, usize, usize),
        spec: ConvSpec,
    ) -> Vec<f64> {
        let oh = out_dim(h, kh, spec);
        let ow = out_dim(w, kw, spec);
        let mut y = vec![0.0; co * oh * ow];
        for oc in 0..co {
            for orow in 0..oh {
                for ocol in 0..ow {
                    let mut acc = 0.0;
                    for icc in 0..ci {
                        for r in 0..kh {
                            for c in 0..kw {
                                let ih = (orow * spec.stride + r) as isize - spec.pad as isize;
                                let iw = (ocol * spec.stride + c) as isize - spec.pad as isize;
                                if ih < 0 || iw < 0 || ih >= h as isize || iw >= w as isize {
                                    continue;
                                }
                                acc += wgt[((oc * ci + icc) * kh + r) * kw + c]
                                    * x[(icc * h + ih as usize) * w + iw as usize];
                            }
                        }
                    }
                    y[(oc * oh + orow) * ow + ocol] = acc;
                }
            }
        }
        y
    }

    fn pseudo_data(n: usize, salt: u64) -> Vec<f64> {
        // Small deterministic values without pulling an RNG into this test.
        (0..n)
            .map(|i| {
                let v = (i as u64).wrapping_mul(2654435761).wrapping_add(salt) % 1000;
                v as f64 / 500.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn conv_fwd_matches_reference_over_strides_and_pads() {
        for &(ci, h, w, co, k, stride, pad) in &[
            (1usize, 5usize, 5usize, 1usize, 3usize, 1usize, 1usize),
            (2, 6, 6, 3, 3, 2, 1),
            (3, 7, 5, 2, 3, 1, 0),
            (2, 8, 8, 2, 4, 2, 1),
            (1, 4, 4, 1, 1, 1, 0),
        ] {
            let spec = ConvSpec { stride, pad };
            let x = pseudo_data(ci * h * w, 1);
            let wgt = pseudo_data(co * ci * k * k, 2);
            let oh = out_dim(h, k, spec);
            let ow = out_dim(w, k, spec);
            let mut y = vec![0.0; co * oh * ow];
            conv_fwd(&x, (ci, h, w), &wgt, (co, k, k), spec, &mut y);
            let yr = conv_ref(&x, (ci, h, w), &wgt, (co, k, k), spec);
            for (a, b) in y.iter().zip(yr.iter()) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn conv_dx_is_adjoint_of_conv_fwd() {
        // <conv(x), dy> == <x, conv_dx(dy)> for any x, dy.
        let (ci, h, w, co, k) = (2usize, 6usize, 5usize, 3usize, 3usize);
        for &(stride, pad) in &[(1usize, 1usize), (2, 1), (1, 0)] {
            let spec = ConvSpec { stride, pad };
            let oh = out_dim(h, k, spec);
            let ow = out_dim(w, k, spec);
            let x = pseudo_data(ci * h * w, 3);
            let wgt = pseudo_data(co * ci * k * k, 4);
            let dy = pseudo_data(co * oh * ow, 5);

            let mut y = vec![0.0; co * oh * ow];
            conv_fwd(&x, (ci, h, w), &wgt, (co, k, k), spec, &mut y);
            let mut dx = vec![0.0; ci * h * w];
            conv_dx(&dy, (co, oh, ow), &wgt, (ci, k, k), spec, (h, w), &mut dx);

            let lhs: f64 = y.iter().zip(dy.iter()).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(dx.iter()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn conv_dw_matches_directional_difference() {
        // d/dt <conv_{w + t e}(x), dy> at t=0 equals dw[e] entrywise.
        let (ci, h, w, co, k) = (2usize, 5usize, 5usize, 2usize, 3usize);
        let spec = ConvSpec { stride: 2, pad: 1 };
        let oh = out_dim(h, k, spec);
        let ow = out_dim(w, k, spec);
        let x = pseudo_data(ci * h * w, 7);
        let wgt = pseudo_data(co * ci * k * k, 8);
        let dy = pseudo_data(co * oh * ow, 9);

        let mut dw = vec![0.0; co * ci * k * k];
        conv_dw(&x, (ci, h, w), &dy, (co, oh, ow), spec, (k, k), &mut dw);

        let eps = 1e-6;
        for idx in [0usize, 5, 11, dw.len() - 1] {
            let mut wp = wgt.clone();
            wp[idx] += eps;
            let mut wm = wgt.clone();
            wm[idx] -= eps;
            let mut yp = vec![0.0; co * oh * ow];
            let mut ym = vec![0.0; co * oh * ow];
            conv_fwd(&x, (ci, h, w), &wp, (co, k, k), spec, &mut yp);
            conv_fwd(&x, (ci, h, w), &wm, (co, k, k), spec, &mut ym);
            let fp: f64 = yp.iter().zip(dy.iter()).map(|(a, b)| a * b).sum();
            let fm: f64 = ym.iter().zip(dy.iter()).map(|(a, b)| a * b).sum();
            let num = (fp - fm) / (2.0 * eps);
            assert!((num - dw[idx]).abs() < 1e-6, "{num} vs {}", dw[idx]);
        }
    }
}
