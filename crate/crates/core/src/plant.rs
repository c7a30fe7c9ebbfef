//! Reference plants and excitation signals.

use crate::ad::Mat;
use crate::dataset::Dataset;
use crate::ode::{sample_with_noise, simulate, NoiseSpec, SimError, ZohSignal};
use crate::phs::{AnalyticSubsystem, CompositeModel, ModelError, Subsystem};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// RK4 substeps per sample used when generating reference data.
pub const REFERENCE_SUBSTEPS: usize = 16;

/// Chain of masses, each tied to its predecessor (the first to a wall) by a
/// linear spring, with absolute cubic damping `dᵢ q̇ᵢ³`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MsdChainConfig {
    pub stiffness: Vec<f64>,
    pub mass: Vec<f64>,
    pub damping: Vec<f64>,
}

impl Default for MsdChainConfig {
    fn default() -> Self {
        MsdChainConfig { stiffness: vec![1.0; 3], mass: vec![2.0; 3], damping: vec![0.5; 3] }
    }
}

impl MsdChainConfig {
    pub fn uniform(count: usize, stiffness: f64, mass: f64, damping: f64) -> Self {
        MsdChainConfig { stiffness: vec![stiffness; count], mass: vec![mass; count], damping: vec![damping; count] }
    }

    pub fn count(&self) -> usize {
        self.stiffness.len()
    }

    pub fn validate(&self) -> Result<(), String> {
        let n = self.stiffness.len();
        if n == 0 || self.mass.len() != n || self.damping.len() != n {
            return Err(format!(
                "stiffness/mass/damping need equal non-zero lengths, got {}/{}/{}",
                n,
                self.mass.len(),
                self.damping.len()
            ));
        }
        if self.stiffness.iter().chain(&self.mass).any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err("stiffness and mass must be positive".into());
        }
        if self.damping.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
            return Err("damping must be non-negative".into());
        }
        Ok(())
    }

    /// Canonical description used for dataset provenance.
    pub fn describe(&self) -> String {
        format!("msd-chain k={:?} m={:?} d={:?}", self.stiffness, self.mass, self.damping)
    }
}

/// Coupling of a mass chain in elongation coordinates
/// `(e₁, p₁, e₂, p₂, …)`: `C[pᵢ₋₁, eᵢ] = +1`, `C[eᵢ, pᵢ₋₁] = -1`.
pub fn chain_interconnection(count: usize) -> Mat {
    let mut c = Mat::zeros(2 * count, 2 * count);
    for i in 1..count {
        let (p_prev, e_i) = (2 * (i - 1) + 1, 2 * i);
        c.set(p_prev, e_i, 1.0);
        c.set(e_i, p_prev, -1.0);
    }
    c
}

/// The chain as a composite of analytic mass-spring subsystems.
///
/// With `e₁ = q₁`, `eᵢ = qᵢ - qᵢ₋₁` and `pᵢ = mᵢ q̇ᵢ` this reproduces
/// `M q̈ + D q̇³ + K q = u`.
pub fn msd_chain_truth(cfg: &MsdChainConfig) -> Result<CompositeModel, ModelError> {
    cfg.validate().map_err(ModelError::Invalid)?;
    let subs = (0..cfg.count())
        .map(|i| {
            Subsystem::Analytic(AnalyticSubsystem::MassSpring {
                stiffness: cfg.stiffness[i],
                mass: cfg.mass[i],
                damping: cfg.damping[i],
            })
        })
        .collect();
    CompositeModel::new(subs, chain_interconnection(cfg.count()))
}

/// Sum of harmonically related unit sines with fixed phases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultisineConfig {
    pub base_frequency: f64,
    /// One phase per harmonic `i = 1..=len`, in `[0, 2π)`.
    pub phases: Vec<f64>,
    pub amplitude: f64,
    pub duration: f64,
    pub sample_rate: f64,
}

impl MultisineConfig {
    /// Phases drawn uniformly from `[0, 2π)` with a generator seeded by `seed`.
    pub fn random(components: usize, base_frequency: f64, duration: f64, sample_rate: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let phases = (0..components).map(|_| rng.random::<f64>() * 2.0 * PI).collect();
        MultisineConfig { base_frequency, phases, amplitude: 1.0, duration, sample_rate }
    }

    /// 40 components at `f₀ = 0.1 Hz`, 250 s at 10 Hz.
    pub fn paper_default(seed: u64) -> Self {
        MultisineConfig::random(40, 0.1, 250.0, 10.0, seed)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.phases.is_empty() {
            return Err("multisine needs at least one component".into());
        }
        if self.phases.iter().any(|p| !(0.0..2.0 * PI).contains(p)) {
            return Err("phases must lie in [0, 2π)".into());
        }
        if !(self.base_frequency > 0.0 && self.duration > 0.0 && self.sample_rate > 0.0) {
            return Err("frequency, duration and sample rate must be positive".into());
        }
        Ok(())
    }

    pub fn sample_count(&self) -> usize {
        (self.duration * self.sample_rate).round() as usize
    }

    pub fn sample_time(&self) -> f64 {
        1.0 / self.sample_rate
    }

    /// Samples at `t_k = k / sample_rate`.
    pub fn sampled(&self) -> Vec<f64> {
        let ts = self.sample_time();
        (0..self.sample_count()).map(|k| multisine(self, k as f64 * ts)).collect()
    }
}

/// `a Σᵢ sin(2π i f₀ t + φᵢ)`.
pub fn multisine(cfg: &MultisineConfig, t: f64) -> f64 {
    let w = 2.0 * PI * cfg.base_frequency * t;
    cfg.amplitude * cfg.phases.iter().enumerate().map(|(i, &phi)| (w * (i + 1) as f64 + phi).sin()).sum::<f64>()
}

fn fnv1a(text: &str) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    format!("{h:016x}")
}

/// Force on the first mass from the multisine, velocities of every mass
/// measured with uniform noise at `snr_db` (noise-free when `None`).
///
/// The reference is integrated with RK4 at `T_s / 16` from rest.
pub fn generate_msd_dataset(
    chain: &MsdChainConfig,
    excitation: &MultisineConfig,
    snr_db: Option<f64>,
    noise_seed: u64,
) -> Result<Dataset, SimError> {
    excitation.validate().map_err(SimError::Invalid)?;
    let plant = msd_chain_truth(chain)?;
    let n = chain.count();
    let u1 = excitation.sampled();
    let mut samples = Mat::zeros(u1.len(), n);
    for (k, v) in u1.iter().enumerate() {
        samples.set(k, 0, *v);
    }
    let u = ZohSignal::new(samples, excitation.sample_time())?;
    let traj = simulate(&plant, &vec![0.0; 2 * n], &u, REFERENCE_SUBSTEPS)?;
    let noise = match snr_db {
        Some(snr_db) => NoiseSpec::UniformSnr { snr_db },
        None => NoiseSpec::None,
    };
    let input_names = (1..=n).map(|i| format!("F{i}")).collect();
    let output_names = (1..=n).map(|i| format!("v{i}")).collect();
    let mut data = sample_with_noise(&traj, &u, input_names, output_names, &noise, noise_seed)?;
    data.meta.plant_digest = Some(fnv1a(&chain.describe()));
    data.meta.notes.insert("plant".into(), chain.describe());
    data.meta.notes.insert("excitation".into(), format!("multisine f0={} components={}", excitation.base_frequency, excitation.phases.len()));
    Ok(data)
}

/// Sign convention of the mass-to-gas coupling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GasCoupling {
    /// `C[p,V] = -A`, `C[V,p] = +A`: power preserving.
    Skew,
    /// `C[p,V] = C[V,p] = -A`: symmetric coupling, not power preserving.
    Symmetric,
}

/// Slider signal driving the reservoir volume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GasDriveConfig {
    pub components: usize,
    pub base_frequency: f64,
    /// Peak of `|∫ΔV dt|` as a fraction of the initial volume.
    pub volume_excursion: f64,
    pub duration: f64,
    pub sample_rate: f64,
}

impl Default for GasDriveConfig {
    fn default() -> Self {
        GasDriveConfig { components: 10, base_frequency: 0.05, volume_excursion: 0.3, duration: 250.0, sample_rate: 10.0 }
    }
}

/// Mass-spring-damper pushing on an isothermal gas reservoir.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GasReservoirConfig {
    pub area: f64,
    pub gamma: f64,
    pub stiffness: f64,
    pub mass: f64,
    pub damping: f64,
    pub initial_volume: f64,
    #[serde(default)]
    pub drive: GasDriveConfig,
}

impl Default for GasReservoirConfig {
    fn default() -> Self {
        GasReservoirConfig {
            area: 5.0,
            gamma: 1.0,
            stiffness: 1.0,
            mass: 2.0,
            damping: 0.5,
            initial_volume: 10.0,
            drive: GasDriveConfig::default(),
        }
    }
}

impl GasReservoirConfig {
    pub fn validate(&self) -> Result<(), String> {
        let positive = [self.area, self.gamma, self.stiffness, self.mass, self.initial_volume];
        if positive.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err("area, gamma, stiffness, mass and initial volume must be positive".into());
        }
        if !(self.damping >= 0.0) {
            return Err("damping must be non-negative".into());
        }
        let d = &self.drive;
        if d.components == 0 || !(d.base_frequency > 0.0 && d.duration > 0.0 && d.sample_rate > 0.0) {
            return Err("drive needs components and positive frequency, duration, sample rate".into());
        }
        if !(d.volume_excursion > 0.0 && d.volume_excursion < 1.0) {
            return Err("drive volume excursion must lie in (0, 1)".into());
        }
        Ok(())
    }

    /// Coupling block between the mass states `(q, p)` and `V`.
    pub fn coupling_block(&self) -> Mat {
        Mat::col(&[0.0, -self.area])
    }

    pub fn describe(&self) -> String {
        format!(
            "gas-msd A={} gamma={} k={} m={} d={} V0={}",
            self.area, self.gamma, self.stiffness, self.mass, self.damping, self.initial_volume
        )
    }
}

/// States `(q, p, V)`, inputs `(F, ΔV)`, outputs `(q̇, γ/V)`.
pub fn gas_msd_truth(cfg: &GasReservoirConfig, coupling: GasCoupling) -> Result<CompositeModel, ModelError> {
    cfg.validate().map_err(ModelError::Invalid)?;
    let subs = vec![
        Subsystem::Analytic(AnalyticSubsystem::MassSpring { stiffness: cfg.stiffness, mass: cfg.mass, damping: cfg.damping }),
        Subsystem::Analytic(AnalyticSubsystem::IdealGas { gamma: cfg.gamma }),
    ];
    let mut c = Mat::zeros(3, 3);
    c.set(1, 2, -cfg.area);
    match coupling {
        GasCoupling::Skew => {
            c.set(2, 1, cfg.area);
            CompositeModel::new(subs, c)
        }
        GasCoupling::Symmetric => {
            c.set(2, 1, -cfg.area);
            CompositeModel::with_nonskew_coupling(subs, c)
        }
    }
}

/// Rest state at the initial volume: `p = 0`, `k q = -A γ / V₀`.
///
/// The momentum row carries `-A` in both coupling variants, so the
/// equilibrium is the same for both.
pub fn gas_equilibrium(cfg: &GasReservoirConfig) -> [f64; 3] {
    let q = -cfg.area * cfg.gamma / (cfg.stiffness * cfg.initial_volume);
    [q, 0.0, cfg.initial_volume]
}

/// Sampled `(F, ΔV)` with `F = 0` and `ΔV` a multisine whose amplitude is
/// tuned so that the reference plant's volume peaks at
/// `V₀ (1 ± volume_excursion)` when started at equilibrium.
///
/// The mass feeds back into `V̇`, so the amplitude is found by repeated
/// simulation, starting from the scale that puts the peak of `|∫ΔV dt|`
/// at the target.
pub fn gas_drive(cfg: &GasReservoirConfig, coupling: GasCoupling, seed: u64) -> Result<ZohSignal, SimError> {
    const ITERATIONS: usize = 40;
    let plant = gas_msd_truth(cfg, coupling)?;
    let d = &cfg.drive;
    let ms = MultisineConfig::random(d.components, d.base_frequency, d.duration, d.sample_rate, seed);
    let raw = ms.sampled();
    let ts = ms.sample_time();
    let target = d.volume_excursion * cfg.initial_volume;
    let signal = |scale: f64| {
        let mut samples = Mat::zeros(raw.len(), 2);
        for (k, v) in raw.iter().enumerate() {
            samples.set(k, 1, scale * v);
        }
        ZohSignal::new(samples, ts)
    };
    let mut acc = 0.0f64;
    let mut peak = 0.0f64;
    for v in &raw {
        acc += v * ts;
        peak = peak.max(acc.abs());
    }
    if peak == 0.0 {
        return signal(0.0);
    }
    let mut scale = target / peak;
    let x0 = gas_equilibrium(cfg);
    for _ in 0..ITERATIONS {
        let u = signal(scale)?;
        let excursion = match simulate(&plant, &x0, &u, REFERENCE_SUBSTEPS) {
            Ok(t) => (0..t.len()).map(|k| t.state(k)[2]).fold(0.0f64, |m, v| if v > 0.0 { m.max((v - x0[2]).abs()) } else { f64::INFINITY }),
            Err(SimError::NonFinite { .. } | SimError::Diverged { .. }) => f64::INFINITY,
            Err(e) => return Err(e),
        };
        if !excursion.is_finite() {
            scale *= 0.5;
            continue;
        }
        let ratio = target / excursion;
        if (ratio - 1.0).abs() < 1e-3 {
            return Ok(u);
        }
        scale *= ratio;
    }
    Err(SimError::Invalid(format!("could not scale the volume drive to an excursion of {target}")))
}

/// Reference record of the gas-MSD plant started at equilibrium.
///
/// Aborts if the volume leaves `(0, ∞)`.
pub fn generate_gas_dataset(
    cfg: &GasReservoirConfig,
    coupling: GasCoupling,
    drive_seed: u64,
    snr_db: Option<f64>,
    noise_seed: u64,
) -> Result<Dataset, SimError> {
    let plant = gas_msd_truth(cfg, coupling)?;
    let u = gas_drive(cfg, coupling, drive_seed)?;
    let x0 = gas_equilibrium(cfg);
    let traj = simulate(&plant, &x0, &u, REFERENCE_SUBSTEPS)?;
    if let Some(k) = (0..traj.len()).find(|&k| traj.state(k)[2] <= 0.0) {
        return Err(SimError::Invalid(format!("reservoir volume became non-positive at sample {k}")));
    }
    let noise = match snr_db {
        Some(snr_db) => NoiseSpec::UniformSnr { snr_db },
        None => NoiseSpec::None,
    };
    let mut data = sample_with_noise(&traj, &u, vec!["F1".into(), "dV".into()], vec!["v1".into(), "P".into()], &noise, noise_seed)?;
    data.meta.seeds.insert("drive".into(), drive_seed);
    data.meta.plant_digest = Some(fnv1a(&cfg.describe()));
    data.meta.notes.insert("plant".into(), cfg.describe());
    data.meta.notes.insert("coupling".into(), format!("{coupling:?}").to_lowercase());
    Ok(data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phs::passivity_residual;

    #[test]
    fn chain_at_rest_and_displaced() {
        let plant = msd_chain_truth(&MsdChainConfig::default()).unwrap();
        assert_eq!(plant.dynamics(&[0.0; 6], &[0.0; 3]).unwrap(), vec![0.0; 6]);
        let xd = plant.dynamics(&[1.0, 0.0, 0.0, 0.0, 0.0, 0.0], &[0.0; 3]).unwrap();
        assert_eq!(xd, vec![0.0, -1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn invalid_chain_rejected() {
        let mut cfg = MsdChainConfig::default();
        cfg.mass[1] = 0.0;
        assert!(msd_chain_truth(&cfg).is_err());
        cfg = MsdChainConfig::default();
        cfg.damping.pop();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn multisine_zero_phase_and_period() {
        let mut ms = MultisineConfig::paper_default(3);
        assert!((multisine(&ms, 17.3) - multisine(&ms, 27.3)).abs() < 1e-9);
        ms.phases = vec![0.0; 40];
        assert_eq!(multisine(&ms, 0.0), 0.0);
        assert_eq!(ms.sample_count(), 2500);
    }

    #[test]
    fn gas_gradient_and_equilibrium() {
        let cfg = GasReservoirConfig::default();
        let gas = AnalyticSubsystem::IdealGas { gamma: 1.0 };
        assert_eq!(gas.grad_h(&[2.0]), vec![0.5]);
        for variant in [GasCoupling::Skew, GasCoupling::Symmetric] {
            let plant = gas_msd_truth(&cfg, variant).unwrap();
            let xd = plant.dynamics(&gas_equilibrium(&cfg), &[0.0, 0.0]).unwrap();
            assert!(xd.iter().all(|v| v.abs() < 1e-15), "{variant:?}: {xd:?}");
        }
    }

    #[test]
    fn symmetric_coupling_can_generate_energy() {
        let cfg = GasReservoirConfig::default();
        let skew = gas_msd_truth(&cfg, GasCoupling::Skew).unwrap();
        let sym = gas_msd_truth(&cfg, GasCoupling::Symmetric).unwrap();
        let x = [0.2, -1.0, 8.0];
        assert!(passivity_residual(&skew, &x, &[0.0, 0.0]).unwrap() <= 1e-10);
        assert!(passivity_residual(&sym, &x, &[0.0, 0.0]).unwrap() > 0.0);
    }

    #[test]
    fn gas_drive_scaled_to_excursion() {
        let cfg = GasReservoirConfig::default();
        let u = gas_drive(&cfg, GasCoupling::Skew, 11).unwrap();
        assert_eq!(u.len(), 2500);
        assert!((0..u.len()).all(|k| u.samples.get(k, 0) == 0.0));
        let plant = gas_msd_truth(&cfg, GasCoupling::Skew).unwrap();
        let traj = simulate(&plant, &gas_equilibrium(&cfg), &u, REFERENCE_SUBSTEPS).unwrap();
        let peak = (0..traj.len()).map(|k| (traj.state(k)[2] - 10.0).abs()).fold(0.0, f64::max);
        assert!((peak - 3.0).abs() < 3e-3, "peak {peak}");
    }
}
