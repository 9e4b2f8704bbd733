use super::{Graph, RngState, Tensor, Var};
use crate::error::{Error, Result};

/// Parameter count up to which every coordinate is checked.
const FULL_SWEEP_LIMIT: usize = 10_000;
/// Coordinates sampled when the parameter set is larger than the limit.
const SAMPLED_COORDS: usize = 200;
/// Denominator floor so that near-zero gradients are compared absolutely.
const REL_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// `(param index, flat coordinate)` of the worst disagreement.
    pub worst: Option<(usize, usize)>,
}

/// Compares reverse-mode gradients with central differences
/// `(f(θ+ε) − f(θ−ε)) / 2ε`.
///
/// `loss_fn` must rebuild the loss from the supplied parameter variables on a
/// fresh graph; it is called once for the analytic pass and twice per checked
/// coordinate.
pub fn finite_diff_check<F>(
    loss_fn: F,
    params: &[Tensor],
    eps: f64,
    rng: &mut RngState,
) -> Result<FdReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("finite-difference step must be > 0, got {eps}")));
    }
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.constant(p.clone())).collect();
        let loss = loss_fn(&mut g, &vars)?;
        g.check_finite()?;
        Ok(g.scalar(loss))
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = loss_fn(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get(v)).collect();

    let total: usize = params.iter().map(Tensor::len).sum();
    let coords: Vec<(usize, usize)> = if total <= FULL_SWEEP_LIMIT {
        params
            .iter()
            .enumerate()
            .flat_map(|(p, t)| (0..t.len()).map(move |i| (p, i)))
            .collect()
    } else {
        let flat = rng.sample_without_replacement(total, SAMPLED_COORDS);
        flat.into_iter().map(|k| locate(params, k)).collect()
    };

    let mut work = params.to_vec();
    let mut report = FdReport {
        max_rel_error: 0.0,
        coords_checked: coords.len(),
        worst: None,
    };
    for (p, i) in coords {
        let orig = work[p].data()[i];
        work[p].data_mut()[i] = orig + eps;
        let up = eval(&work)?;
        work[p].data_mut()[i] = orig - eps;
        let down = eval(&work)?;
        work[p].data_mut()[i] = orig;

        let numeric = (up - down) / (2.0 * eps);
        let a = analytic[p].data()[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some((p, i));
        }
    }
    Ok(report)
}

fn locate(params: &[Tensor], mut k: usize) -> (usize, usize) {
    for (p, t) in params.iter().enumerate() {
        if k < t.len() {
            return (p, k);
        }
        k -= t.len();
    }
    unreachable!("flat index within total parameter count")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Stream;

    #[test]
    fn quadratic_is_exact_to_roundoff() {
        let mut rng = RngState::new(3, Stream::Init);
        let w = rng.normal_tensor(&[4, 5]);
        let report = finite_diff_check(
            |g, v| {
                let sq = g.square(v[0]);
                let s = g.sum(sq);
                Ok(g.scale(s, 0.5))
            },
            &[w],
            1e-5,
            &mut rng,
        )
        .unwrap();
        assert_eq!(report.coords_checked, 20);
        assert!(report.max_rel_error < 1e-8, "{report:?}");
    }

    #[test]
    fn rejects_non_positive_step() {
        let mut rng = RngState::new(3, Stream::Init);
        let r = finite_diff_check(|g, v| Ok(g.sum(v[0])), &[Tensor::scalar(1.0)], 0.0, &mut rng);
        assert!(r.is_err());
    }

    #[test]
    fn large_parameter_sets_are_subsampled() {
        let mut rng = RngState::new(3, Stream::Init);
        let w = rng.normal_tensor(&[101, 100]);
        let report =
            finite_diff_check(|g, v| Ok(g.sum(v[0])), &[w], 1e-5, &mut rng).unwrap();
        assert!(report.coords_checked >= 100 && report.coords_checked < 10_100);
    }
}
