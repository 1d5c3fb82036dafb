//! 3×3, stride 1, zero-padding 1 convolution kernels (im2col + GEMM).

use crate::tensor::Scalar;

pub(crate) const K: usize = 3;
pub(crate) const KK: usize = K * K;

/// Unfold one `[Cin,H,W]` image into a `[Cin·9, H·W]` column matrix.
pub(crate) fn im2col<T: Scalar>(input: &[T], cin: usize, h: usize, w: usize, col: &mut [T]) {
    let hw = h * w;
    debug_assert_eq!(col.len(), cin * KK * hw);
    for ci in 0..cin {
        let plane = &input[ci * hw..(ci + 1) * hw];
        for dy in 0..K {
            for dx in 0..K {
                let row = &mut col[((ci * KK) + dy * K + dx) * hw..][..hw];
                let (x_lo, x_hi) = valid_range(dx, w);
                for y in 0..h {
                    let dst = &mut row[y * w..(y + 1) * w];
                    let sy = y as isize + dy as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        dst.fill(T::ZERO);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    dst[..x_lo].fill(T::ZERO);
                    dst[x_hi..].fill(T::ZERO);
                    // output x reads source x + dx - 1
                    dst[x_lo..x_hi].copy_from_slice(&src[x_lo + dx - 1..x_hi + dx - 1]);
                }
            }
        }
    }
}

/// Fold a `[Cin·9, H·W]` column-gradient matrix back, accumulating into `dinput`.
pub(crate) fn col2im_add<T: Scalar>(col: &[T], cin: usize, h: usize, w: usize, dinput: &mut [T]) {
    let hw = h * w;
    for ci in 0..cin {
        let plane = &mut dinput[ci * hw..(ci + 1) * hw];
        for dy in 0..K {
            for dx in 0..K {
                let row = &col[((ci * KK) + dy * K + dx) * hw..][..hw];
                let (x_lo, x_hi) = valid_range(dx, w);
                for y in 0..h {
                    let sy = y as isize + dy as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w + x_lo..y * w + x_hi];
                    let dst = &mut plane[sy as usize * w + x_lo + dx - 1..sy as usize * w + x_hi + dx - 1];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += *s;
                    }
                }
            }
        }
    }
}

/// Output columns `[lo, hi)` whose tap `dx` lands inside the row.
#[inline]
fn valid_range(dx: usize, w: usize) -> (usize, usize) {
    let lo = if dx == 0 { 1 } else { 0 };
    let hi = if dx == 2 { w.saturating_sub(1) } else { w };
    (lo.min(hi), hi)
}

pub(crate) struct ConvDims {
    pub b: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
}

pub(crate) fn forward<T: Scalar>(d: &ConvDims, input: &[T], weight: &[T], bias: Option<&[T]>) -> Vec<T> {
    let hw = d.h * d.w;
    let ck = d.cin * KK;
    let mut out = vec![T::ZERO; d.b * d.cout * hw];
    let mut col = vec![T::ZERO; ck * hw];
    for bi in 0..d.b {
        im2col(&input[bi * d.cin * hw..(bi + 1) * d.cin * hw], d.cin, d.h, d.w, &mut col);
        let o = &mut out[bi * d.cout * hw..(bi + 1) * d.cout * hw];
        if let Some(bias) = bias {
            for (co, chunk) in o.chunks_mut(hw).enumerate() {
                chunk.fill(bias[co]);
            }
        }
        let beta = if bias.is_some() { T::ONE } else { T::ZERO };
        T::gemm(d.cout, ck, hw, T::ONE, weight, ck as isize, 1, &col, hw as isize, 1, beta, o, hw as isize, 1);
    }
    out
}

/// Gradients of one convolution. Any of the three outputs may be skipped.
pub(crate) fn backward<T: Scalar>(
    d: &ConvDims,
    input: &[T],
    weight: &[T],
    dout: &[T],
    mut dinput: Option<&mut [T]>,
    mut dweight: Option<&mut [T]>,
    mut dbias: Option<&mut [T]>,
) {
    let hw = d.h * d.w;
    let ck = d.cin * KK;
    let mut col = vec![T::ZERO; ck * hw];
    for bi in 0..d.b {
        let g = &dout[bi * d.cout * hw..(bi + 1) * d.cout * hw];
        if let Some(db) = dbias.as_deref_mut() {
            for (co, chunk) in g.chunks(hw).enumerate() {
                db[co] += chunk.iter().copied().sum::<T>();
            }
        }
        if let Some(dw) = dweight.as_deref_mut() {
            im2col(&input[bi * d.cin * hw..(bi + 1) * d.cin * hw], d.cin, d.h, d.w, &mut col);
            // dW[Cout,CK] += G[Cout,HW] · colᵀ[HW,CK]
            T::gemm(d.cout, hw, ck, T::ONE, g, hw as isize, 1, &col, 1, hw as isize, T::ONE, dw, ck as isize, 1);
        }
        if let Some(di) = dinput.as_deref_mut() {
            // dcol[CK,HW] = Wᵀ[CK,Cout] · G[Cout,HW]
            T::gemm(ck, d.cout, hw, T::ONE, weight, 1, ck as isize, g, hw as isize, 1, T::ZERO, &mut col, hw as isize, 1);
            col2im_add(&col, d.cin, d.h, d.w, &mut di[bi * d.cin * hw..(bi + 1) * d.cin * hw]);
        }
    }
}
