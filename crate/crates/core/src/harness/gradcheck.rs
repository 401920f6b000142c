use motif_nn::{Bound, Graph, ParamId, ParamSet, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MotifError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Coordinates sampled per parameter tensor; smaller tensors are
    /// checked exhaustively.
    pub coords_per_param: usize,
    /// Denominator floor of the relative error, so that coordinates whose
    /// true gradient is zero compare absolutely.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            coords_per_param: 8,
            floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradEntry {
    pub param: String,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub entries: Vec<GradEntry>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_error).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> Vec<&GradEntry> {
        self.entries
            .iter()
            .filter(|e| !(e.rel_error <= self.tolerance))
            .collect()
    }

    pub fn passed(&self) -> bool {
        !self.entries.is_empty() && self.failures().is_empty()
    }
}

/// Compares `analytic` (one tensor per parameter) with central differences
/// of `loss` at sampled coordinates of the parameters in `ids` (all when
/// empty).
pub fn grad_check(
    params: &ParamSet,
    ids: &[ParamId],
    analytic: &[Tensor],
    cfg: &GradCheckConfig,
    mut loss: impl FnMut(&ParamSet) -> Result<f64>,
) -> Result<GradCheckReport> {
    if analytic.len() != params.len() {
        return Err(MotifError::Shape(format!(
            "{} gradients for {} parameters",
            analytic.len(),
            params.len()
        )));
    }
    let ids: Vec<ParamId> = if ids.is_empty() {
        (0..params.len()).collect()
    } else {
        ids.to_vec()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut work = params.clone();
    let mut entries = Vec::new();
    for id in ids {
        let n = params.get(id).len();
        let coords: Vec<usize> = if n <= cfg.coords_per_param {
            (0..n).collect()
        } else {
            (0..cfg.coords_per_param).map(|_| rng.random_range(0..n)).collect()
        };
        for j in coords {
            let orig = params.get(id).data()[j];
            work.get_mut(id).data_mut()[j] = orig + cfg.step;
            let up = loss(&work)?;
            work.get_mut(id).data_mut()[j] = orig - cfg.step;
            let down = loss(&work)?;
            work.get_mut(id).data_mut()[j] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(MotifError::Domain(format!(
                    "non-finite loss while perturbing {}[{j}]",
                    params.name(id)
                )));
            }
            let numeric = (up - down) / (2.0 * cfg.step);
            let a = analytic[id].data()[j];
            let rel_error = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
            entries.push(GradEntry {
                param: params.name(id).to_string(),
                coord: j,
                analytic: a,
                numeric,
                rel_error,
            });
        }
    }
    Ok(GradCheckReport {
        entries,
        tolerance: cfg.tolerance,
    })
}

/// [`grad_check`] for a loss built on an evaluation-mode graph.
pub fn grad_check_graph(
    params: &ParamSet,
    ids: &[ParamId],
    cfg: &GradCheckConfig,
    build: impl Fn(&Graph, &Bound) -> Result<Var>,
) -> Result<GradCheckReport> {
    let g = Graph::new();
    let bound = params.bind(&g, true);
    let root = build(&g, &bound)?;
    let value = g.value(root).item();
    if !value.is_finite() {
        return Err(MotifError::Domain(format!("non-finite loss {value}")));
    }
    let grads = g.backward(root);
    let analytic = bound.grads(&g, &grads);
    grad_check(params, ids, &analytic, cfg, |ps| {
        let g = Graph::new();
        let bound = ps.bind(&g, false);
        let root = build(&g, &bound)?;
        let v = g.value(root).item();
        Ok(v)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic() -> ParamSet {
        let mut ps = ParamSet::new();
        ps.add("theta", Tensor::new(&[2], vec![1.0, 2.0]));
        ps
    }

    #[test]
    fn quadratic_matches_closed_form() {
        let ps = quadratic();
        let r = grad_check_graph(&ps, &[], &GradCheckConfig::default(), |g, p| {
            Ok(g.sum(g.sqr(p.var(0))))
        })
        .unwrap();
        let analytic: Vec<f64> = r.entries.iter().map(|e| e.analytic).collect();
        assert_eq!(analytic, vec![2.0, 4.0]);
        assert!(r.max_rel_error() <= 1e-8, "{}", r.max_rel_error());
        assert!(r.passed());
    }

    #[test]
    fn corrupted_gradient_is_flagged() {
        let ps = quadratic();
        let doubled = vec![Tensor::new(&[2], vec![4.0, 8.0])];
        let r = grad_check(&ps, &[], &doubled, &GradCheckConfig::default(), |p| {
            Ok(p.get(0).sq_norm())
        })
        .unwrap();
        assert_eq!(r.failures().len(), 2);
        assert!(!r.passed());
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let ps = quadratic();
        let g = vec![Tensor::zeros(&[2])];
        assert!(grad_check(&ps, &[], &g, &GradCheckConfig::default(), |_| Ok(f64::NAN)).is_err());
    }
}
