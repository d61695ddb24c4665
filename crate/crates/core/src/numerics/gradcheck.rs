//! Central-finite-difference oracle for the tape's analytic gradients.
//!
//! The builder closure must be deterministic: any randomness (Gumbel noise,
//! data) has to be frozen outside and captured by value, so that every
//! perturbed re-evaluation sees the same graph.

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Tape, VarId};

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Central-difference step. Must lie in [1e-7, 1e-4].
    pub eps: f64,
    /// A parameter fails when its max relative error exceeds this.
    pub threshold: f64,
    /// Entries where both analytic and numeric gradients are below this are
    /// treated as agreeing zeros (finite differences bottom out near 1e-11).
    pub zero_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { eps: 1e-5, threshold: 1e-4, zero_floor: 1e-6 }
    }
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    /// (row, col) of the worst entry, with its two gradient values.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_err: f64,
    pub pass: bool,
    /// Set when any evaluation produced a non-finite loss; reported instead
    /// of crashing.
    pub non_finite: bool,
}

impl GradReport {
    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(|p| !p.pass)
    }
}

fn rel_err(a: f64, n: f64, zero_floor: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if scale < zero_floor {
        0.0
    } else {
        (a - n).abs() / scale
    }
}

/// Check the analytic gradient of a scalar-valued computation against central
/// finite differences, per parameter entry.
pub fn grad_check<F>(
    params: &[(String, Matrix)],
    cfg: &GradCheckConfig,
    build: F,
) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[VarId]) -> Result<VarId>,
{
    if !(1e-7..=1e-4).contains(&cfg.eps) {
        return Err(Error::InvalidConfig(format!(
            "grad_check eps must be in [1e-7, 1e-4], got {}",
            cfg.eps
        )));
    }

    let eval = |values: &[Matrix]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<VarId> = values.iter().map(|m| tape.param(m.clone())).collect();
        let loss = build(&mut tape, &ids)?;
        Ok(tape.value(loss).at(0, 0))
    };

    // Analytic pass.
    let mut tape = Tape::new();
    let ids: Vec<VarId> = params.iter().map(|(_, m)| tape.param(m.clone())).collect();
    let loss = build(&mut tape, &ids)?;
    let base_loss = tape.value(loss).at(0, 0);
    let mut non_finite = !base_loss.is_finite();
    let grads = tape.backward(loss)?;

    let mut values: Vec<Matrix> = params.iter().map(|(_, m)| m.clone()).collect();
    let mut checks = Vec::with_capacity(params.len());
    let mut overall_max = 0.0f64;

    for (p, (name, shape)) in params.iter().enumerate() {
        let analytic = grads.dense(ids[p], shape.rows(), shape.cols());
        let mut worst = (0usize, 0usize);
        let mut worst_err = 0.0f64;
        let mut worst_a = 0.0f64;
        let mut worst_n = 0.0f64;
        for i in 0..shape.rows() {
            for j in 0..shape.cols() {
                let orig = values[p].at(i, j);
                values[p].set(i, j, orig + cfg.eps);
                let up = eval(&values)?;
                values[p].set(i, j, orig - cfg.eps);
                let down = eval(&values)?;
                values[p].set(i, j, orig);
                if !up.is_finite() || !down.is_finite() {
                    non_finite = true;
                    continue;
                }
                let numeric = (up - down) / (2.0 * cfg.eps);
                let a = analytic.at(i, j);
                let err = rel_err(a, numeric, cfg.zero_floor);
                if err > worst_err {
                    worst_err = err;
                    worst = (i, j);
                    worst_a = a;
                    worst_n = numeric;
                }
            }
        }
        overall_max = overall_max.max(worst_err);
        checks.push(ParamCheck {
            name: name.clone(),
            max_rel_err: worst_err,
            worst,
            analytic: worst_a,
            numeric: worst_n,
            pass: worst_err < cfg.threshold,
        });
    }

    let pass = !non_finite && checks.iter().all(|c| c.pass);
    Ok(GradReport { params: checks, max_rel_err: overall_max, pass, non_finite })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_passes() {
        let params = vec![("w".to_string(), Matrix::scalar(3.0))];
        let report = grad_check(&params, &GradCheckConfig::default(), |tape, ids| {
            tape.mul_elem(ids[0], ids[0])
        })
        .unwrap();
        assert!(report.pass);
        assert!(report.max_rel_err < 1e-9);
    }

    #[test]
    fn softmax_sum_reports_zero_gradient_agreement() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let params = vec![("x".to_string(), Matrix::randn(3, 4, 1.0, &mut rng))];
        let report = grad_check(&params, &GradCheckConfig::default(), |tape, ids| {
            let s = tape.softmax_rows(ids[0], None)?;
            Ok(tape.mean_all(s))
        })
        .unwrap();
        assert!(report.pass);
        assert_eq!(report.max_rel_err, 0.0);
    }

    #[test]
    fn non_finite_loss_is_reported_not_crashed() {
        let params = vec![("w".to_string(), Matrix::scalar(-1.0))];
        let report = grad_check(&params, &GradCheckConfig::default(), |tape, ids| {
            // ln of a negative value with the clamp floor: finite, but force a
            // NaN through 0/0 style arithmetic instead.
            let a = tape.affine(ids[0], f64::INFINITY, 0.0);
            let b = tape.affine(ids[0], 0.0, 0.0);
            tape.mul_elem(a, b)
        })
        .unwrap();
        assert!(report.non_finite);
        assert!(!report.pass);
    }

    #[test]
    fn rejects_out_of_range_eps() {
        let params = vec![("w".to_string(), Matrix::scalar(1.0))];
        let cfg = GradCheckConfig { eps: 1e-2, ..Default::default() };
        assert!(grad_check(&params, &cfg, |tape, ids| Ok(tape.affine(ids[0], 1.0, 0.0))).is_err());
    }

    #[test]
    fn composite_primitives_pass_over_seeds() {
        // layer_norm + gelu + matmul + softmax + cross-entropy, many seeds.
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let params = vec![
                ("x".to_string(), Matrix::randn(4, 6, 1.0, &mut rng)),
                ("w".to_string(), Matrix::randn(6, 3, 0.5, &mut rng)),
                ("gain".to_string(), Matrix::randn(1, 6, 0.2, &mut rng)),
                ("bias".to_string(), Matrix::randn(1, 6, 0.2, &mut rng)),
            ];
            let report = grad_check(&params, &GradCheckConfig::default(), |tape, ids| {
                let h = tape.layer_norm(ids[0], ids[2], ids[3], 1e-6)?;
                let h = tape.gelu(h);
                let s = tape.matmul(h, ids[1])?;
                tape.cross_entropy_mean(s, &[0, 2, 1, 0])
            })
            .unwrap();
            assert!(report.pass, "seed {seed}: max rel err {}", report.max_rel_err);
        }
    }
}
