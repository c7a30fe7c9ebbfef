#![allow(dead_code)]

use phnn::ad::{Mat, Parameterized, Tape};
use phnn::phs::{eval_structure, passivity_residual, CompositeModel, Subsystem, SubsystemModel};
use phnn::train::{IdentifiedModel, Normalization};
use phnn::Dataset;
use rand::Rng;

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-12);
    num / den
}

/// Central differences of `f` at `p`.
pub fn fd(p: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut q = p.to_vec();
    (0..p.len())
        .map(|i| {
            q[i] = p[i] + h;
            let a = f(&q);
            q[i] = p[i] - h;
            let b = f(&q);
            q[i] = p[i];
            (a - b) / (2.0 * h)
        })
        .collect()
}

/// Learned subsystem with weights scaled by a random factor in `[0.2, 3]`
/// and a random G and lower bound.
pub fn random_subsystem<R: Rng>(rng: &mut R, nx: usize, nu: usize) -> SubsystemModel {
    let mut s = SubsystemModel::init(nx, nu, 16, rng.random_range(-2.0..2.0), rng);
    let k: f64 = rng.random_range(0.2..3.0);
    s.visit_mut("", &mut |_, m| m.data.iter_mut().for_each(|v| *v *= k));
    s.g = Mat::from_fn(nx, nu, |_, _| rng.random_range(-1.5..1.5));
    s
}

/// Random skew coupling with zero diagonal blocks.
pub fn random_coupling<R: Rng>(rng: &mut R, dims: &[usize]) -> Mat {
    let n: usize = dims.iter().sum();
    let mut owner = Vec::new();
    for (i, &d) in dims.iter().enumerate() {
        owner.extend(std::iter::repeat_n(i, d));
    }
    let mut c = Mat::zeros(n, n);
    for r in 0..n {
        for k in r + 1..n {
            if owner[r] != owner[k] {
                let v = rng.random_range(-2.0..2.0);
                c.set(r, k, v);
                c.set(k, r, -v);
            }
        }
    }
    c
}

pub fn random_composite<R: Rng>(rng: &mut R) -> CompositeModel {
    let count = rng.random_range(1..=3);
    let dims: Vec<(usize, usize)> = (0..count).map(|_| (rng.random_range(1..=3), rng.random_range(1..=2))).collect();
    let subs: Vec<Subsystem> = dims.iter().map(|&(nx, nu)| Subsystem::Learned(random_subsystem(rng, nx, nu))).collect();
    let c = random_coupling(rng, &dims.iter().map(|d| d.0).collect::<Vec<_>>());
    CompositeModel::new(subs, c).unwrap()
}

/// Structural quantities at one point of one learned subsystem.
pub struct PointCheck {
    /// `max |J + Jᵀ|`
    pub skew_defect: f64,
    /// `vᵀ R v` for the probe `v`.
    pub r_quadratic: f64,
    /// `H - (c_lb - 1)`
    pub h_margin: f64,
}

pub fn check_subsystem(sub: &SubsystemModel, x: &[f64], v: &[f64]) -> PointCheck {
    let mut tape = Tape::new();
    let s = eval_structure(sub, x, &mut tape).unwrap();
    let j = tape.value(s.j);
    let r = tape.value(s.r);
    let n = sub.nx;
    let mut skew_defect = 0.0f64;
    for a in 0..n {
        for b in 0..n {
            skew_defect = skew_defect.max((j.get(a, b) + j.get(b, a)).abs());
        }
    }
    let rv = r.matvec(v);
    let r_quadratic = v.iter().zip(&rv).map(|(a, b)| a * b).sum();
    PointCheck { skew_defect, r_quadratic, h_margin: tape.scalar(s.h) - (sub.h_lower_bound - 1.0) }
}

pub fn passivity(model: &CompositeModel, x: &[f64], u: &[f64]) -> f64 {
    passivity_residual(model, x, u).unwrap()
}

/// Single learned subsystem with an encoder, for small training problems.
pub fn toy_identified<R: Rng>(rng: &mut R, lag: usize, nx: usize) -> IdentifiedModel {
    let sub = SubsystemModel::init(nx, 1, 8, 0.0, rng);
    let model = CompositeModel::new(vec![Subsystem::Learned(sub)], Mat::zeros(nx, nx)).unwrap();
    IdentifiedModel::new(model, lag, 8, Normalization::identity(1, 1), rng)
}

pub fn same_bits(a: &Dataset, b: &Dataset) -> bool {
    let bits = |m: &Mat| m.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    a == b && bits(&a.inputs) == bits(&b.inputs) && bits(&a.outputs) == bits(&b.outputs)
}

/// Velocities and states of `M q̈ + D q̇³ + K q = u` integrated directly in
/// position coordinates, mapped to `(eᵢ, pᵢ)` for comparison.
pub fn chain_direct(k: &[f64], m: &[f64], d: &[f64], u: &phnn::ode::ZohSignal, substeps: usize) -> Mat {
    use phnn::ode::{simulate, FnDynamics};
    let n = k.len();
    let (k2, m2, d2) = (k.to_vec(), m.to_vec(), d.to_vec());
    let f = move |x: &[f64], u: &[f64]| {
        let (q, v) = x.split_at(n);
        let mut out = v.to_vec();
        for i in 0..n {
            let e_i = q[i] - if i == 0 { 0.0 } else { q[i - 1] };
            let mut force = u[i] - k2[i] * e_i - d2[i] * v[i].powi(3);
            if i + 1 < n {
                force += k2[i + 1] * (q[i + 1] - q[i]);
            }
            out.push(force / m2[i]);
        }
        out
    };
    let sys = FnDynamics { nx: 2 * n, nu: n, f, h: |x: &[f64]| x.to_vec() };
    let traj = simulate(&sys, &vec![0.0; 2 * n], u, substeps).unwrap();
    Mat::from_fn(traj.len(), 2 * n, |r, c| {
        let x = traj.state(r);
        let i = c / 2;
        if c % 2 == 0 {
            x[i] - if i == 0 { 0.0 } else { x[i - 1] }
        } else {
            m[i] * x[n + i]
        }
    })
}

/// Multisine force on mass 1 only.
pub fn mass_one_drive(excitation: &phnn::plant::MultisineConfig, masses: usize) -> phnn::ode::ZohSignal {
    let u1 = excitation.sampled();
    let samples = Mat::from_fn(u1.len(), masses, |r, c| if c == 0 { u1[r] } else { 0.0 });
    phnn::ode::ZohSignal::new(samples, excitation.sample_time()).unwrap()
}

/// Max state discrepancy between the composite chain and direct integration.
pub fn chain_oracle_gap(chain: &phnn::plant::MsdChainConfig, excitation: &phnn::plant::MultisineConfig) -> f64 {
    let u = mass_one_drive(excitation, chain.count());
    let plant = phnn::plant::msd_chain_truth(chain).unwrap();
    let ph = phnn::ode::simulate(&plant, &vec![0.0; 2 * chain.count()], &u, phnn::plant::REFERENCE_SUBSTEPS).unwrap();
    let direct = chain_direct(&chain.stiffness, &chain.mass, &chain.damping, &u, phnn::plant::REFERENCE_SUBSTEPS);
    ph.states.data.iter().zip(&direct.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

/// Empirical RK4 order on the default chain from errors at `T_s`, `T_s/2`
/// and `T_s/4` against a `T_s/64` reference, averaged over both halvings.
pub fn rk4_order(duration: f64) -> f64 {
    let chain = phnn::plant::MsdChainConfig::default();
    let mut ex = phnn::plant::MultisineConfig::paper_default(3);
    ex.duration = duration;
    let u = mass_one_drive(&ex, 3);
    let plant = phnn::plant::msd_chain_truth(&chain).unwrap();
    let run = |s| phnn::ode::simulate(&plant, &[0.0; 6], &u, s).unwrap().states;
    let reference = run(64);
    let err = |s| {
        let x = run(s);
        x.data.iter().zip(&reference.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    };
    let (e1, e2, e4) = (err(1), err(2), err(4));
    0.5 * ((e1 / e2).log2() + (e2 / e4).log2())
}

/// Small untrained chain model with standardization taken from `data`.
pub fn toy_chain(seed: u64, data: &Dataset, lag: usize) -> IdentifiedModel {
    use rand::SeedableRng;
    let mut cfg = phnn::protocol::ProtocolConfig::for_profile(phnn::protocol::Profile::Smoke, seed);
    cfg.hidden = 6;
    cfg.encoder_hidden = 12;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let model = phnn::protocol::learned_chain(&cfg, &mut rng).unwrap();
    let norm = Normalization::from_datasets(std::slice::from_ref(data)).unwrap();
    IdentifiedModel::new(model, lag, cfg.encoder_hidden, norm, &mut rng)
}

/// Short noisy chain record.
pub fn toy_record(seed: u64, duration: f64) -> Dataset {
    let mut ex = phnn::plant::MultisineConfig::paper_default(seed);
    ex.duration = duration;
    phnn::plant::generate_msd_dataset(&phnn::plant::MsdChainConfig::default(), &ex, Some(20.0), seed + 1).unwrap()
}

/// Truncated loss on the tape and its gradient in flattening order.
pub fn tape_loss(model: &IdentifiedModel, data: &Dataset, starts: &[usize], truncation: usize) -> (f64, Vec<f64>) {
    let mut tape = Tape::new();
    let bm = model.model.bind(&mut tape, true);
    let be = model.encoder.bind(&mut tape, true);
    let l = phnn::train::subsection_loss(&mut tape, &bm, &be, data, starts, truncation, model.lag, &model.normalization).unwrap();
    let g = tape.backward(l).unwrap();
    let flat = bm.leaf_ids().into_iter().chain(be.leaf_ids()).flat_map(|id| g.wrt(&tape, id).data).collect();
    (tape.scalar(l), flat)
}

/// The same loss evaluated with plain floating point: encoder, RK4 steps
/// of the model vector field, and weighted output errors.
pub fn plain_loss(model: &IdentifiedModel, data: &Dataset, starts: &[usize], truncation: usize) -> f64 {
    let norm = &model.normalization;
    let h = data.sample_time;
    let mut sse = 0.0;
    for &t in starts {
        let mut x = model.encoder.eval_vec(&phnn::train::encoder_window(data, t, model.lag, norm));
        for k in 0..truncation {
            let u = data.input_row(t + k);
            let y = model.model.output(&x).unwrap();
            for c in 0..y.len() {
                sse += ((y[c] - data.outputs.get(t + k, c)) / norm.y_scale[c]).powi(2);
            }
            x = phnn::ode::rk4_step(|x, u| model.model.dynamics(x, u).unwrap(), &x, u, h);
        }
    }
    sse / (starts.len() * truncation) as f64
}

/// End-to-end relative gradient error for a `T = 3` toy problem.
pub fn toy_gradient_error(seed: u64) -> f64 {
    use phnn::ad::params::{assign, flatten};
    let data = toy_record(seed, 4.0);
    let model = toy_chain(seed, &data, 5);
    let starts = [5, 11, 20, 31];
    let (_, grad) = tape_loss(&model, &data, &starts, 3);
    let mut probe = model.clone();
    let numeric = fd(&flatten(&model), 1e-6, |q| {
        assign(&mut probe, q);
        plain_loss(&probe, &data, &starts, 3)
    });
    rel_err(&grad, &numeric)
}
