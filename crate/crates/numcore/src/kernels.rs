//! Plain dense kernels shared by forward and backward passes.
//!
//! All loops run in a fixed order so results are bit-reproducible.

/// `c[n×m] += a[n×k] · b[k×m]`
pub(crate) fn gemm_nn(n: usize, k: usize, m: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * m..(i + 1) * m];
        for (p, &aip) in arow.iter().enumerate() {
            let brow = &b[p * m..(p + 1) * m];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

/// `c[k×m] += aᵀ · d` where `a` is `n×k` and `d` is `n×m`.
pub(crate) fn gemm_tn(n: usize, k: usize, m: usize, a: &[f64], d: &[f64], c: &mut [f64]) {
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let drow = &d[i * m..(i + 1) * m];
        for (p, &aip) in arow.iter().enumerate() {
            let crow = &mut c[p * m..(p + 1) * m];
            for (cv, &dv) in crow.iter_mut().zip(drow) {
                *cv += aip * dv;
            }
        }
    }
}

/// Row-major transpose of a `rows×cols` matrix.
pub(crate) fn transpose(rows: usize, cols: usize, a: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

pub(crate) fn gelu(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + inner.tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_small() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm_nn(2, 2, 2, &a, &b, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        let mut t = [0.0; 4];
        gemm_tn(2, 2, 2, &a, &b, &mut t);
        // aᵀ b
        assert_eq!(t, [26.0, 30.0, 38.0, 44.0]);
        assert_eq!(transpose(2, 2, &a), vec![1.0, 3.0, 2.0, 4.0]);
    }
}
