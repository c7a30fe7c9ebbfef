//! Fixed-step RK4 with zero-order-hold inputs.

use crate::ad::Mat;
use crate::dataset::{Dataset, DatasetMeta, NoiseReference};
use crate::phs::{CompositeModel, ModelError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Any state magnitude above this aborts a simulation.
pub const DIVERGENCE_LIMIT: f64 = 1e8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("non-finite state at step {step}")]
    NonFinite { step: usize },
    #[error("simulation diverged at sample {step} (|x| > {DIVERGENCE_LIMIT:e})")]
    Diverged { step: usize, partial: Box<Trajectory> },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Continuous-time system with a state-dependent output map.
pub trait Dynamics {
    fn nx(&self) -> usize;
    fn nu(&self) -> usize;
    fn derivative(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>, SimError>;
    fn output(&self, x: &[f64]) -> Result<Vec<f64>, SimError>;
}

impl Dynamics for CompositeModel {
    fn nx(&self) -> usize {
        CompositeModel::nx(self)
    }

    fn nu(&self) -> usize {
        CompositeModel::nu(self)
    }

    fn derivative(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>, SimError> {
        Ok(self.dynamics(x, u)?)
    }

    fn output(&self, x: &[f64]) -> Result<Vec<f64>, SimError> {
        Ok(CompositeModel::output(self, x)?)
    }
}

/// Adapts a pair of closures to [`Dynamics`].
pub struct FnDynamics<F, H> {
    pub nx: usize,
    pub nu: usize,
    pub f: F,
    pub h: H,
}

impl<F, H> Dynamics for FnDynamics<F, H>
where
    F: Fn(&[f64], &[f64]) -> Vec<f64>,
    H: Fn(&[f64]) -> Vec<f64>,
{
    fn nx(&self) -> usize {
        self.nx
    }

    fn nu(&self) -> usize {
        self.nu
    }

    fn derivative(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>, SimError> {
        Ok((self.f)(x, u))
    }

    fn output(&self, x: &[f64]) -> Result<Vec<f64>, SimError> {
        Ok((self.h)(x))
    }
}

/// Piecewise-constant input: sample `k` holds on `[k T_s, (k+1) T_s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ZohSignal {
    /// `N × nu`
    pub samples: Mat,
    pub sample_time: f64,
}

impl ZohSignal {
    pub fn new(samples: Mat, sample_time: f64) -> Result<Self, SimError> {
        if samples.rows == 0 {
            return Err(SimError::Invalid("input signal needs at least one sample".into()));
        }
        if !(sample_time > 0.0 && sample_time.is_finite()) {
            return Err(SimError::Invalid(format!("sample time must be positive, got {sample_time}")));
        }
        Ok(ZohSignal { samples, sample_time })
    }

    pub fn len(&self) -> usize {
        self.samples.rows
    }

    pub fn is_empty(&self) -> bool {
        self.samples.rows == 0
    }

    pub fn nu(&self) -> usize {
        self.samples.cols
    }

    /// Held value at continuous time `t`, clamped to the last sample.
    pub fn value_at(&self, t: f64) -> &[f64] {
        let k = if t <= 0.0 { 0 } else { (t / self.sample_time).floor() as usize };
        self.samples.row_slice(k.min(self.samples.rows - 1))
    }
}

/// Sampled states and outputs at `t_k = k T_s`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    /// `N × nx`
    pub states: Mat,
    /// `N × ny`
    pub outputs: Mat,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn state(&self, k: usize) -> &[f64] {
        self.states.row_slice(k)
    }

    pub fn output(&self, k: usize) -> &[f64] {
        self.outputs.row_slice(k)
    }
}

/// Classic four-stage RK4 step with `u` held over the step.
pub fn rk4_step<F>(mut f: F, x: &[f64], u: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64], &[f64]) -> Vec<f64>,
{
    let axpy = |a: f64, k: &[f64]| -> Vec<f64> { x.iter().zip(k).map(|(xi, ki)| xi + a * ki).collect() };
    let k1 = f(x, u);
    let k2 = f(&axpy(0.5 * h, &k1), u);
    let k3 = f(&axpy(0.5 * h, &k2), u);
    let k4 = f(&axpy(h, &k3), u);
    (0..x.len()).map(|i| x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])).collect()
}

fn rk4_step_sys<D: Dynamics + ?Sized>(sys: &D, x: &[f64], u: &[f64], h: f64, step: usize) -> Result<Vec<f64>, SimError> {
    let mut err = None;
    let next = rk4_step(
        |xs, us| match sys.derivative(xs, us) {
            Ok(v) => v,
            Err(e) => {
                err.get_or_insert(e);
                vec![f64::NAN; xs.len()]
            }
        },
        x,
        u,
        h,
    );
    if let Some(e) = err {
        return Err(e);
    }
    if next.iter().any(|v| !v.is_finite()) {
        return Err(SimError::NonFinite { step });
    }
    Ok(next)
}

/// Simulates `sys` from `x0` over every sample of `u`, recording states and
/// outputs at `t_k = k T_s` (including `k = 0`). Each sample interval is
/// split into `substeps` RK4 steps; training and evaluation use `1`.
pub fn simulate<D: Dynamics + ?Sized>(sys: &D, x0: &[f64], u: &ZohSignal, substeps: usize) -> Result<Trajectory, SimError> {
    if x0.len() != sys.nx() {
        return Err(SimError::Invalid(format!("initial state has {} entries, system has {}", x0.len(), sys.nx())));
    }
    if u.nu() != sys.nu() {
        return Err(SimError::Invalid(format!("input has {} channels, system has {}", u.nu(), sys.nu())));
    }
    if substeps == 0 {
        return Err(SimError::Invalid("substeps must be at least 1".into()));
    }
    let n = u.len();
    let h = u.sample_time / substeps as f64;
    let mut times = Vec::with_capacity(n);
    let mut states = Vec::with_capacity(n * x0.len());
    let mut outputs = Vec::new();
    let mut ny = 0;
    let mut x = x0.to_vec();
    for k in 0..n {
        if x.iter().any(|v| v.abs() > DIVERGENCE_LIMIT || !v.is_finite()) {
            let partial = Trajectory {
                times: times.clone(),
                states: Mat::from_vec(k, x0.len(), states.clone()),
                outputs: Mat::from_vec(k, ny, outputs.clone()),
            };
            return Err(SimError::Diverged { step: k, partial: Box::new(partial) });
        }
        let y = sys.output(&x)?;
        ny = y.len();
        times.push(k as f64 * u.sample_time);
        states.extend_from_slice(&x);
        outputs.extend_from_slice(&y);
        if k + 1 < n {
            let uk = u.samples.row_slice(k);
            for _ in 0..substeps {
                x = match rk4_step_sys(sys, &x, uk, h, k) {
                    Ok(next) => next,
                    Err(SimError::NonFinite { .. }) => vec![f64::NAN; x.len()],
                    Err(e) => return Err(e),
                };
            }
        }
    }
    Ok(Trajectory { times, states: Mat::from_vec(n, x0.len(), states), outputs: Mat::from_vec(n, ny, outputs) })
}

/// Measurement noise added to sampled outputs.
#[derive(Debug, Clone, PartialEq)]
pub enum NoiseSpec {
    None,
    /// Zero-mean uniform noise with per-channel half-width
    /// `a = √3 · RMS(y) / 10^(snr/20)`.
    UniformSnr { snr_db: f64 },
    UniformHalfWidth(Vec<f64>),
}

/// Builds a dataset from a trajectory, adding output noise drawn from a
/// generator seeded with `seed`.
pub fn sample_with_noise(
    traj: &Trajectory,
    inputs: &ZohSignal,
    input_names: Vec<String>,
    output_names: Vec<String>,
    noise: &NoiseSpec,
    seed: u64,
) -> Result<Dataset, SimError> {
    if traj.is_empty() {
        return Err(SimError::Invalid("empty trajectory".into()));
    }
    if inputs.len() < traj.len() {
        return Err(SimError::Invalid("input record shorter than trajectory".into()));
    }
    let (n, ny) = traj.outputs.shape();
    let clean = traj.outputs.clone();
    let rms: Vec<f64> = (0..ny).map(|c| ((0..n).map(|r| clean.get(r, c).powi(2)).sum::<f64>() / n as f64).sqrt()).collect();
    let half_width: Vec<f64> = match noise {
        NoiseSpec::None => vec![0.0; ny],
        NoiseSpec::UniformSnr { snr_db } => rms.iter().map(|r| 3f64.sqrt() * r / 10f64.powf(snr_db / 20.0)).collect(),
        NoiseSpec::UniformHalfWidth(a) => {
            if a.len() != ny {
                return Err(SimError::Invalid(format!("{} half-widths for {ny} channels", a.len())));
            }
            a.clone()
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut noise_m = Mat::zeros(n, ny);
    for r in 0..n {
        for c in 0..ny {
            let unit: f64 = rng.random::<f64>() * 2.0 - 1.0;
            noise_m.set(r, c, half_width[c] * unit);
        }
    }
    let outputs = clean.zip_map(&noise_m, |a, b| a + b);
    let snr_achieved_db = (0..ny)
        .map(|c| {
            let ps: f64 = (0..n).map(|r| clean.get(r, c).powi(2)).sum();
            let pn: f64 = (0..n).map(|r| noise_m.get(r, c).powi(2)).sum();
            if pn == 0.0 {
                f64::INFINITY
            } else {
                10.0 * (ps / pn).log10()
            }
        })
        .collect();
    let mut meta = DatasetMeta {
        snr_target_db: match noise {
            NoiseSpec::UniformSnr { snr_db } => Some(*snr_db),
            _ => None,
        },
        snr_achieved_db,
        noise_half_width: half_width,
        reference: Some(NoiseReference { clean, noise: noise_m }),
        ..Default::default()
    };
    meta.seeds.insert("noise".into(), seed);
    let inputs_m = inputs.samples.rows_range(0, n);
    Ok(Dataset { sample_time: inputs.sample_time, input_names, output_names, inputs: inputs_m, outputs, meta })
}
