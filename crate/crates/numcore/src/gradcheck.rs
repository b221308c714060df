//! Central finite-difference gradient oracle.

use crate::error::{NumError, Result};
use crate::graph::{Graph, Var};
use crate::param::{ParamId, ParamStore};

#[derive(Clone, Debug)]
pub struct FdOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Evenly spaced coordinates checked per parameter tensor.
    pub max_coords: usize,
    /// Extra coordinates with the largest analytic magnitude.
    pub top_k: usize,
    /// Round-off noise of the difference quotient is taken as
    /// `roundoff_ulps · ε · max(|L₊|, |L₋|) / 2h`. Coordinates whose
    /// gradient magnitude is below `noise / tolerance` cannot resolve the
    /// relative tolerance; they must agree to within `noise` instead.
    pub roundoff_ulps: f64,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            max_coords: 16,
            top_k: 4,
            roundoff_ulps: 4.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamReport {
    pub name: String,
    pub coords_checked: usize,
    /// Coordinates checked against the absolute round-off bound.
    pub roundoff_coords: usize,
    pub max_rel_error: f64,
    /// `(flat index, analytic, numeric)` at the worst coordinate.
    pub worst: Option<(usize, f64, f64)>,
    pub failure: Option<String>,
}

#[derive(Clone, Debug)]
pub struct FdReport {
    pub params: Vec<ParamReport>,
    pub tolerance: f64,
}

impl FdReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamReport> {
        self.params
            .iter()
            .filter(move |p| p.failure.is_some() || p.max_rel_error > self.tolerance)
    }

    pub fn roundoff_coords(&self) -> usize {
        self.params.iter().map(|p| p.roundoff_coords).sum()
    }

    pub fn coords_checked(&self) -> usize {
        self.params.iter().map(|p| p.coords_checked).sum()
    }

    pub fn passed(&self) -> bool {
        self.failures().next().is_none()
    }
}

/// `|a − n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares analytic parameter gradients of `loss_fn` against central
/// differences. Only trainable parameters are checked; parameter values are
/// restored bit-exactly afterwards.
pub fn finite_difference_check<F>(
    store: &mut ParamStore,
    loss_fn: F,
    opts: &FdOptions,
) -> Result<FdReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let grads = {
        let mut g = Graph::new(store);
        let loss = loss_fn(&mut g)?;
        g.backward(loss)?;
        g.param_grads()
    };
    let ids: Vec<ParamId> = store.ids().filter(|&id| store.get(id).trainable).collect();
    let mut reports = Vec::with_capacity(ids.len());
    for id in ids {
        let numel = store.value(id).numel();
        let analytic = grads
            .get(id)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; numel]);
        let mut report = ParamReport {
            name: store.get(id).name.clone(),
            coords_checked: 0,
            roundoff_coords: 0,
            max_rel_error: 0.0,
            worst: None,
            failure: None,
        };
        if let Some(bad) = analytic.iter().position(|v| !v.is_finite()) {
            report.failure = Some(format!("non-finite analytic gradient at {bad}"));
            reports.push(report);
            continue;
        }
        for c in pick_coords(&analytic, opts) {
            let orig = store.value(id).data()[c];
            let lp = eval_at(store, id, c, orig + opts.step, &loss_fn)?;
            let lm = eval_at(store, id, c, orig - opts.step, &loss_fn)?;
            store.get_mut(id).tensor.data_mut()[c] = orig;
            report.coords_checked += 1;
            let (Some(lp), Some(lm)) = (lp, lm) else {
                report.failure = Some(format!("non-finite loss when perturbing coordinate {c}"));
                break;
            };
            let numeric = (lp - lm) / (2.0 * opts.step);
            if !numeric.is_finite() {
                report.failure = Some(format!("non-finite numeric gradient at {c}"));
                break;
            }
            let noise = opts.roundoff_ulps * f64::EPSILON * lp.abs().max(lm.abs()) / (2.0 * opts.step);
            let diff = (analytic[c] - numeric).abs();
            if analytic[c].abs().max(numeric.abs()) * opts.tolerance <= noise {
                report.roundoff_coords += 1;
                if diff > noise {
                    report.failure = Some(format!(
                        "coordinate {c}: |{} − {numeric}| exceeds round-off bound {noise:e}",
                        analytic[c]
                    ));
                    break;
                }
                continue;
            }
            let err = relative_error(analytic[c], numeric);
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((c, analytic[c], numeric));
            }
        }
        reports.push(report);
    }
    Ok(FdReport {
        params: reports,
        tolerance: opts.tolerance,
    })
}

fn eval_at<F>(store: &mut ParamStore, id: ParamId, c: usize, v: f64, loss_fn: &F) -> Result<Option<f64>>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    store.get_mut(id).tensor.data_mut()[c] = v;
    let mut g = Graph::new(store);
    match loss_fn(&mut g) {
        Ok(l) => {
            let s = g.scalar(l);
            Ok(s.is_finite().then_some(s))
        }
        Err(NumError::NonFinite { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

fn pick_coords(analytic: &[f64], opts: &FdOptions) -> Vec<usize> {
    let n = analytic.len();
    let mut coords: Vec<usize> = if n <= opts.max_coords {
        (0..n).collect()
    } else {
        (0..opts.max_coords).map(|i| i * n / opts.max_coords).collect()
    };
    let mut by_mag: Vec<usize> = (0..n).collect();
    by_mag.sort_by(|&a, &b| analytic[b].abs().total_cmp(&analytic[a].abs()).then(a.cmp(&b)));
    coords.extend(by_mag.into_iter().take(opts.top_k));
    coords.sort_unstable();
    coords.dedup();
    coords
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn linear_squared_loss_matches_closed_form() {
        // loss = sum((W x + b - y)^2)
        let mut s = ParamStore::new();
        let w = s
            .add("w", "lin", Tensor::matrix(2, 3, vec![0.3, -0.2, 0.5, 0.1, 0.7, -0.4]).unwrap())
            .unwrap();
        let b = s.add("b", "lin", Tensor::vector(vec![0.05, -0.1])).unwrap();
        let x = Tensor::matrix(3, 1, vec![1.0, -2.0, 0.5]).unwrap();
        let y = Tensor::matrix(2, 1, vec![0.2, 0.4]).unwrap();
        let loss = |g: &mut Graph| {
            let wv = g.param(w);
            let bv = g.param(b);
            let xv = g.constant(x.clone());
            let yv = g.constant(y.clone());
            let h = g.matmul(wv, xv)?;
            let bv = g.reshape(bv, &[2, 1])?;
            let h = g.add(h, bv)?;
            let r = g.sub(h, yv)?;
            let sq = g.mul(r, r)?;
            g.sum(sq)
        };
        let report = finite_difference_check(&mut s, loss, &FdOptions::default()).unwrap();
        assert!(report.max_rel_error() <= 1e-7, "{report:?}");
        // closed form: dL/db = 2 r, dL/dW = 2 r xᵀ
        let wd = s.value(w).data();
        let bd = s.value(b).data();
        let xd = x.data();
        let r: Vec<f64> = (0..2)
            .map(|i| (0..3).map(|j| wd[i * 3 + j] * xd[j]).sum::<f64>() + bd[i] - y.data()[i])
            .collect();
        let mut g = Graph::new(&s);
        let l = loss(&mut g).unwrap();
        g.backward(l).unwrap();
        let grads = g.param_grads();
        for i in 0..2 {
            assert!((grads.get(b).unwrap()[i] - 2.0 * r[i]).abs() < 1e-14);
            for j in 0..3 {
                assert!((grads.get(w).unwrap()[i * 3 + j] - 2.0 * r[i] * xd[j]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn zero_inputs_complete_without_nan() {
        let mut s = ParamStore::new();
        let w = s.add("w", "lin", Tensor::zeros(vec![2, 2])).unwrap();
        let report = finite_difference_check(
            &mut s,
            |g| {
                let wv = g.param(w);
                let x = g.constant(Tensor::zeros(vec![2, 1]));
                let h = g.matmul(wv, x)?;
                let n = g.l2_normalize(h)?;
                g.sum(n)
            },
            &FdOptions::default(),
        )
        .unwrap();
        assert!(report.params.iter().all(|p| p.failure.is_none()));
        assert!(report.max_rel_error().is_finite());
    }

    #[test]
    fn restores_values() {
        let mut s = ParamStore::new();
        let w = s.add("w", "lin", Tensor::vector(vec![0.1, 0.2, 0.3])).unwrap();
        let before = s.value(w).clone();
        finite_difference_check(
            &mut s,
            |g| {
                let v = g.param(w);
                let t = g.tanh(v)?;
                g.sum(t)
            },
            &FdOptions::default(),
        )
        .unwrap();
        assert_eq!(s.value(w), &before);
    }

    #[test]
    fn shift_invariant_bias_is_roundoff_not_error() {
        // softmax(x + b·1) does not depend on b: the true gradient is zero
        let mut s = ParamStore::new();
        let x = s.add("x", "t", Tensor::matrix(1, 4, vec![0.3, -1.2, 2.0, 0.7]).unwrap()).unwrap();
        let b = s.add("b", "t", Tensor::matrix(1, 1, vec![0.4]).unwrap()).unwrap();
        let w = Tensor::matrix(1, 4, vec![1.0, 2.0, -1.0, 0.5]).unwrap();
        let loss = |g: &mut Graph| {
            let xv = g.param(x);
            let bv = g.param(b);
            let h = g.add(xv, bv)?;
            let p = g.softmax(h, 1)?;
            let wv = g.constant(w.clone());
            let y = g.mul(p, wv)?;
            g.sum(y)
        };
        let report = finite_difference_check(&mut s, loss, &FdOptions::default()).unwrap();
        assert!(report.passed(), "{report:?}");
        let strict = FdOptions {
            roundoff_ulps: 0.0,
            ..FdOptions::default()
        };
        let report = finite_difference_check(&mut s, loss, &strict).unwrap();
        let bias = report.params.iter().find(|p| p.name == "b").unwrap();
        assert_eq!(bias.worst.map(|w| w.1.abs() < 1e-15), Some(true));
    }
}
