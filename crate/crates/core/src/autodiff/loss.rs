//! Channel softmax and the two heat-map losses.

use crate::tensor::Scalar;

pub const KL_LOG_CLAMP: f64 = 1e-12;
pub const DICE_EPS: f64 = 1e-5;

pub(super) fn softmax<T: Scalar>([b, c, h, w]: [usize; 4], x: &[T]) -> Vec<T> {
    let hw = h * w;
    let mut out = vec![T::ZERO; x.len()];
    let mut buf = vec![T::ZERO; c];
    for bi in 0..b {
        let base = bi * c * hw;
        for p in 0..hw {
            let mut m = x[base + p];
            for ci in 1..c {
                m = m.max(x[base + ci * hw + p]);
            }
            let mut s = T::ZERO;
            for ci in 0..c {
                let e = (x[base + ci * hw + p] - m).exp();
                buf[ci] = e;
                s += e;
            }
            for ci in 0..c {
                out[base + ci * hw + p] = buf[ci] / s;
            }
        }
    }
    out
}

/// dx = p ⊙ (dp − Σ_c p·dp), per pixel.
pub(super) fn softmax_backward<T: Scalar>([b, c, h, w]: [usize; 4], p: &[T], dp: &[T]) -> Vec<T> {
    let hw = h * w;
    let mut dx = vec![T::ZERO; p.len()];
    for bi in 0..b {
        let base = bi * c * hw;
        for px in 0..hw {
            let mut dot = T::ZERO;
            for ci in 0..c {
                let i = base + ci * hw + px;
                dot += p[i] * dp[i];
            }
            for ci in 0..c {
                let i = base + ci * hw + px;
                dx[i] = p[i] * (dp[i] - dot);
            }
        }
    }
    dx
}

pub(super) fn kl<T: Scalar>([b, _, h, w]: [usize; 4], t: &[T], p: &[T]) -> T {
    let clamp = KL_LOG_CLAMP;
    let mut acc = 0.0f64;
    for (&ti, &pi) in t.iter().zip(p) {
        let ti = ti.to_f64();
        if ti > 0.0 {
            acc += ti * (ti.ln() - pi.to_f64().max(clamp).ln());
        }
    }
    T::from_f64(acc / (b * h * w) as f64)
}

pub(super) fn kl_backward<T: Scalar>([b, _, h, w]: [usize; 4], t: &[T], p: &[T], g: T) -> Vec<T> {
    let scale = g / T::from_f64((b * h * w) as f64);
    let clamp = T::from_f64(KL_LOG_CLAMP);
    t.iter()
        .zip(p)
        .map(|(&ti, &pi)| if ti > T::ZERO && pi > clamp { -scale * ti / pi } else { T::ZERO })
        .collect()
}

struct DiceSums {
    inter: f64,
    pp: f64,
    gg: f64,
}

fn dice_sums<T: Scalar>([b, c, h, w]: [usize; 4], p: &[T], g: &[T]) -> Vec<DiceSums> {
    let hw = h * w;
    let mut sums = Vec::with_capacity(b * (c - 1));
    for bi in 0..b {
        for ci in 1..c {
            let off = (bi * c + ci) * hw;
            let (ps, gs) = (&p[off..off + hw], &g[off..off + hw]);
            let mut s = DiceSums { inter: 0.0, pp: 0.0, gg: 0.0 };
            for (&pi, &gi) in ps.iter().zip(gs) {
                let (pi, gi) = (pi.to_f64(), gi.to_f64());
                s.inter += pi * gi;
                s.pp += pi * pi;
                s.gg += gi * gi;
            }
            sums.push(s);
        }
    }
    sums
}

pub(super) fn dice<T: Scalar>(dims: [usize; 4], p: &[T], g: &[T]) -> T {
    let sums = dice_sums(dims, p, g);
    let n = sums.len() as f64;
    let total: f64 = sums.iter().map(|s| 1.0 - (2.0 * s.inter + DICE_EPS) / (s.pp + s.gg + DICE_EPS)).sum();
    T::from_f64(total / n)
}

pub(super) fn dice_backward<T: Scalar>(dims: [usize; 4], p: &[T], g: &[T], upstream: T) -> Vec<T> {
    let [b, c, h, w] = dims;
    let hw = h * w;
    let sums = dice_sums(dims, p, g);
    let n = sums.len() as f64;
    let mut d = vec![T::ZERO; p.len()];
    for bi in 0..b {
        for ci in 1..c {
            let s = &sums[bi * (c - 1) + ci - 1];
            let num = 2.0 * s.inter + DICE_EPS;
            let den = s.pp + s.gg + DICE_EPS;
            // ∂/∂p of −num/den = −(2g·den − num·2p)/den²
            let a = T::from_f64(-2.0 / (den * n));
            let bcoef = T::from_f64(2.0 * num / (den * den * n));
            let off = (bi * c + ci) * hw;
            for i in off..off + hw {
                d[i] = upstream * (a * g[i] + bcoef * p[i]);
            }
        }
    }
    d
}
