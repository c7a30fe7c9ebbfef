//! Re-use of an identified subsystem in a new interconnection.

use crate::ad::Mat;
use crate::dataset::{column_std, Dataset};
use crate::ode::{simulate, SimError};
use crate::phs::{extract_subsystem, AnalyticSubsystem, CompositeModel, ModelError, Subsystem};
use crate::plant::{gas_drive, gas_equilibrium, generate_gas_dataset, GasCoupling, GasReservoirConfig};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TransferError {
    #[error("subsystem {index} has {nx} states and {nu} inputs; the reservoir coupling needs 2 and 1")]
    Dimension { index: usize, nx: usize, nu: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferConfig {
    pub gas: GasReservoirConfig,
    pub coupling: GasCoupling,
    /// 0-based index of the subsystem attached to the reservoir.
    pub subsystem: usize,
}

impl Default for TransferConfig {
    fn default() -> Self {
        TransferConfig { gas: GasReservoirConfig::default(), coupling: GasCoupling::Skew, subsystem: 0 }
    }
}

/// `subsystem` attached to the reservoir with the configured coupling sign.
pub fn compose_with_reservoir(subsystem: Subsystem, cfg: &TransferConfig) -> Result<CompositeModel, TransferError> {
    let (nx, nu) = (subsystem.nx(), subsystem.nu());
    if nx != 2 || nu != 1 {
        return Err(TransferError::Dimension { index: cfg.subsystem, nx, nu });
    }
    cfg.gas.validate().map_err(ModelError::Invalid)?;
    let gas = Subsystem::Analytic(AnalyticSubsystem::IdealGas { gamma: cfg.gas.gamma });
    let a = cfg.gas.area;
    let mut c = Mat::zeros(3, 3);
    c.set(1, 2, -a);
    Ok(match cfg.coupling {
        GasCoupling::Skew => {
            c.set(2, 1, a);
            CompositeModel::new(vec![subsystem, gas], c)?
        }
        GasCoupling::Symmetric => {
            c.set(2, 1, -a);
            CompositeModel::with_nonskew_coupling(vec![subsystem, gas], c)?
        }
    })
}

/// Least-squares rest state: minimizes `‖ẋ(x, u)‖²` over the coordinates not
/// listed in `fixed`, by Gauss-Newton with a finite-difference Jacobian and
/// step halving. Returns the state and the final residual norm.
pub fn rest_state(model: &CompositeModel, guess: &[f64], fixed: &[usize], u: &[f64]) -> Result<(Vec<f64>, f64), ModelError> {
    let free: Vec<usize> = (0..guess.len()).filter(|i| !fixed.contains(i)).collect();
    let residual = |x: &[f64]| -> Result<Vec<f64>, ModelError> { model.dynamics(x, u) };
    let norm = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut x = guess.to_vec();
    let mut r = residual(&x)?;
    for _ in 0..200 {
        let rn = norm(&r);
        if rn < 1e-13 {
            break;
        }
        let m = r.len();
        let mut jac = Mat::zeros(m, free.len());
        for (j, &i) in free.iter().enumerate() {
            let h = 1e-6 * x[i].abs().max(1.0);
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[i] += h;
            xm[i] -= h;
            let (rp, rm) = (residual(&xp)?, residual(&xm)?);
            for k in 0..m {
                jac.set(k, j, (rp[k] - rm[k]) / (2.0 * h));
            }
        }
        let jt = jac.transpose();
        let mut normal = jt.matmul(&jac);
        for j in 0..free.len() {
            normal.set(j, j, normal.get(j, j) * (1.0 + 1e-12) + 1e-14);
        }
        let rhs = jt.matvec(&r);
        let Some(step) = solve(normal, rhs) else { break };
        let mut alpha = 1.0;
        let mut improved = false;
        while alpha > 1e-6 {
            let mut trial = x.clone();
            for (j, &i) in free.iter().enumerate() {
                trial[i] -= alpha * step[j];
            }
            let rt = residual(&trial)?;
            if norm(&rt) < rn {
                x = trial;
                r = rt;
                improved = true;
                break;
            }
            alpha *= 0.5;
        }
        if !improved {
            break;
        }
    }
    let rn = norm(&r);
    Ok((x, rn))
}

/// Gaussian elimination with partial pivoting on a small dense system.
fn solve(mut a: Mat, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a.get(i, col).abs().total_cmp(&a.get(j, col).abs()))?;
        if a.get(pivot, col).abs() < 1e-300 {
            return None;
        }
        if pivot != col {
            for c in 0..n {
                let (p, q) = (a.get(pivot, c), a.get(col, c));
                a.set(pivot, c, q);
                a.set(col, c, p);
            }
            b.swap(pivot, col);
        }
        for row in col + 1..n {
            let f = a.get(row, col) / a.get(col, col);
            for c in col..n {
                a.set(row, c, a.get(row, c) - f * a.get(col, c));
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|c| a.get(row, c) * x[c]).sum();
        x[row] = (b[row] - s) / a.get(row, row);
    }
    Some(x)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferReport {
    /// Noise-free outputs `(q̇, P)` of the analytic plant.
    pub truth: Dataset,
    pub composed: CompositeModel,
    pub initial_state: Vec<f64>,
    /// Residual norm of `ẋ` at the initial state.
    pub rest_residual: f64,
    /// Outputs of the composed model, `N × 2` (fewer rows on divergence).
    pub simulated: Mat,
    /// `truth - simulated`
    pub error: Mat,
    pub rmse: Vec<f64>,
    pub nrmse: Vec<f64>,
    pub divergent_at: Option<usize>,
}

/// Extracts subsystem `cfg.subsystem` from `model`, couples it to the
/// reservoir and simulates both the composition and the analytic plant
/// under the same volume drive, each starting at rest with `V = V₀`.
pub fn run_transfer(model: &CompositeModel, cfg: &TransferConfig, drive_seed: u64) -> Result<TransferReport, TransferError> {
    let sub = extract_subsystem(model, cfg.subsystem)?;
    let composed = compose_with_reservoir(sub, cfg)?;
    let truth = generate_gas_dataset(&cfg.gas, cfg.coupling, drive_seed, None, 0)?;
    let u = gas_drive(&cfg.gas, cfg.coupling, drive_seed)?;
    let eq = gas_equilibrium(&cfg.gas);
    let guess = [0.0, 0.0, eq[2]];
    let (x0, rest_residual) = rest_state(&composed, &guess, &[2], &[0.0, 0.0])?;
    let (simulated, divergent_at) = match simulate(&composed, &x0, &u, 1) {
        Ok(t) => (t.outputs, None),
        Err(SimError::Diverged { step, partial }) => (partial.outputs, Some(step)),
        Err(e) => return Err(e.into()),
    };
    let rows = simulated.rows;
    let simulated = if rows == 0 { Mat::zeros(0, 2) } else { simulated };
    let reference = truth.outputs.rows_range(0, rows);
    let error = reference.zip_map(&simulated, |a, b| a - b);
    let std = column_std(&truth.outputs);
    let (rmse, nrmse) = if divergent_at.is_some() {
        (vec![f64::INFINITY; 2], vec![f64::INFINITY; 2])
    } else {
        let rmse: Vec<f64> = (0..2).map(|c| (error.column(c).iter().map(|e| e * e).sum::<f64>() / rows as f64).sqrt()).collect();
        let nrmse = rmse.iter().zip(&std).map(|(r, s)| r / s).collect();
        (rmse, nrmse)
    };
    Ok(TransferReport { truth, composed, initial_state: x0, rest_residual, simulated, error, rmse, nrmse, divergent_at })
}
