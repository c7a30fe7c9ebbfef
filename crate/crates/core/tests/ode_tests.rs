mod common;

use common::*;
use phnn::ode::simulate;
use phnn::plant::{generate_msd_dataset, msd_chain_truth, MsdChainConfig, MultisineConfig};

#[test]
fn rk4_converges_at_fourth_order() {
    let order = rk4_order(50.0);
    assert!((3.7..=4.3).contains(&order), "order {order}");
}

#[test]
fn undamped_free_chain_conserves_energy() {
    let chain = MsdChainConfig::uniform(3, 1.0, 2.0, 0.0);
    let plant = msd_chain_truth(&chain).unwrap();
    let mut ex = MultisineConfig::paper_default(0);
    ex.amplitude = 0.0;
    let u = mass_one_drive(&ex, 3);
    let x0 = [0.5, -0.2, 0.1, 0.3, -0.4, 0.0];
    let traj = simulate(&plant, &x0, &u, 16).unwrap();
    let h0 = plant.hamiltonian(&x0).unwrap();
    let drift = (0..traj.len()).map(|k| (plant.hamiltonian(traj.state(k)).unwrap() - h0).abs()).fold(0.0, f64::max);
    assert!(drift / h0 < 1e-8, "relative drift {drift:e}");
}

#[test]
fn achieved_snr_is_near_target() {
    let chain = MsdChainConfig::default();
    for seed in 0..3 {
        let data = generate_msd_dataset(&chain, &MultisineConfig::paper_default(seed), Some(20.0), 100 + seed).unwrap();
        assert_eq!(data.len(), 2500);
        for s in &data.meta.snr_achieved_db {
            assert!((19.5..=20.5).contains(s), "snr {s}");
        }
    }
}

#[test]
fn noiseless_record_equals_reference() {
    let data = generate_msd_dataset(&MsdChainConfig::default(), &MultisineConfig::paper_default(4), None, 9).unwrap();
    let r = data.meta.reference.as_ref().unwrap();
    assert_eq!(data.outputs, r.clean);
    assert!(r.noise.data.iter().all(|v| *v == 0.0));
    assert!(data.meta.snr_achieved_db.iter().all(|s| s.is_infinite()));
}

#[test]
fn record_uses_half_width_from_rms() {
    let data = generate_msd_dataset(&MsdChainConfig::default(), &MultisineConfig::paper_default(5), Some(20.0), 3).unwrap();
    let r = data.meta.reference.as_ref().unwrap();
    for c in 0..3 {
        let n = r.clean.rows as f64;
        let rms = ((0..r.clean.rows).map(|k| r.clean.get(k, c).powi(2)).sum::<f64>() / n).sqrt();
        let a = data.meta.noise_half_width[c];
        assert!((a - 3f64.sqrt() * rms / 10.0).abs() < 1e-12 * a.max(1.0));
        assert!((0..r.noise.rows).all(|k| r.noise.get(k, c).abs() <= a));
    }
}
