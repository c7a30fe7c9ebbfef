//! Acceptance run: one PASS/FAIL line per criterion. Not part of the default
//! test run; invoke with `cargo test -p phnn-core --test acceptance`.
//!
//! Criteria 5 and 6 read the archived full-profile model from
//! `results/full-seed0/model.json`. Set `PHNN_FULL_RETRAIN=1` to retrain the
//! full profile from scratch instead (hours on one core).

mod common;

use common::*;
use phnn::ad::params::flatten;
use phnn::ad::Mat;
use phnn::io::{self, ModelArchive};
use phnn::protocol::{derive_seed, generate_dataset, generate_splits, initial_model, Profile, ProtocolConfig};
use phnn::train::{evaluate_simulation, train, IdentifiedModel, Normalization};
use phnn::transfer::{run_transfer, TransferConfig};
use phnn::{Dataset, DatasetMeta, NoiseReference};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::PathBuf;
use std::time::Instant;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn structural_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut skew, mut r_min, mut h_margin, mut residual) = (0.0f64, f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    let evaluations = 10_000;
    for _ in 0..evaluations {
        let model = random_composite(&mut rng);
        let scale = [1.0, 10.0, 1e3][rng.random_range(0..3)];
        let x: Vec<f64> = (0..model.nx()).map(|_| rng.random_range(-scale..scale)).collect();
        let u: Vec<f64> = (0..model.nu()).map(|_| rng.random_range(-5.0..5.0)).collect();
        let mut offset = 0;
        for s in &model.subsystems {
            let n = s.nx();
            if let phnn::phs::Subsystem::Learned(l) = s {
                let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
                let c = check_subsystem(l, &x[offset..offset + n], &v);
                skew = skew.max(c.skew_defect);
                r_min = r_min.min(c.r_quadratic);
                h_margin = h_margin.min(c.h_margin);
            }
            offset += n;
        }
        residual = residual.max(passivity(&model, &x, &u));
    }
    let pass = skew <= 1e-12 && r_min >= -1e-12 && h_margin >= 0.0 && residual <= 1e-10;
    outcome(pass, format!("{evaluations} evaluations: max|J+Jᵀ| {skew:.1e}, min vᵀRv {r_min:.1e}, min H-(c_lb-1) {h_margin:.2e}, max passivity residual {residual:.1e}"))
}

fn gradient_correctness() -> Outcome {
    let errors: Vec<f64> = [1, 2].iter().map(|&s| toy_gradient_error(s)).collect();
    outcome(errors.iter().all(|e| *e <= 1e-4), format!("T=3 relative errors {:.2e} and {:.2e}", errors[0], errors[1]))
}

fn plant_oracle() -> Outcome {
    let gap = chain_oracle_gap(&phnn::plant::MsdChainConfig::default(), &phnn::plant::MultisineConfig::paper_default(1));
    outcome(gap <= 1e-6, format!("250 s, max state discrepancy {gap:.2e}"))
}

fn rk4_convergence() -> Outcome {
    let order = rk4_order(100.0);
    outcome((3.7..=4.3).contains(&order), format!("empirical order {order:.3}"))
}

fn archive_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../results/full-seed0/model.json")
}

/// Population standard deviation of the realized noise, per channel.
fn noise_std(data: &Dataset) -> Vec<f64> {
    let r = data.meta.reference.as_ref().expect("generated data carries its noise");
    (0..data.ny())
        .map(|c| {
            let col = r.noise.column(c);
            let n = col.len() as f64;
            let mean = col.iter().sum::<f64>() / n;
            (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
        })
        .collect()
}

fn noise_floor_gate(model: &IdentifiedModel, test: &Dataset) -> Outcome {
    let report = match evaluate_simulation(model, test) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("test simulation failed: {e}")),
    };
    let ratio: Vec<f64> = report.rmse.iter().zip(noise_std(test)).map(|(r, s)| r / s).collect();
    let band = report.within_band(&test.meta.noise_half_width);
    let pass = report.divergent_at.is_none() && ratio.iter().all(|r| *r <= 2.0) && band.iter().all(|b| *b >= 0.9);
    outcome(pass, format!("RMSE/noise-std {ratio:.3?}, in noise band {band:.3?}"))
}

fn identification() -> Outcome {
    let clock = Instant::now();
    let cfg = ProtocolConfig::for_profile(Profile::Smoke, 0);
    let splits = generate_splits(&cfg).unwrap();
    let mut model = initial_model(&cfg, &splits.train).unwrap();
    let smoke = train(&mut model, &splits.train, &splits.val, &cfg.train_config()).unwrap();
    let smoke_s = clock.elapsed().as_secs_f64();
    let last = *smoke.train_loss.last().unwrap();
    let reduction = smoke.initial_loss / last;
    let smoke_ok = reduction >= 10.0 && smoke_s <= 900.0;
    let smoke_text = format!("smoke: loss {:.3e} -> {last:.3e} ({reduction:.1}x) in {smoke_s:.0} s", smoke.initial_loss);

    let full_cfg = ProtocolConfig::for_profile(Profile::Full, 0);
    let test = generate_dataset(&full_cfg, full_cfg.n_train + full_cfg.n_val).unwrap();
    let full = if std::env::var_os("PHNN_FULL_RETRAIN").is_some() {
        let splits = generate_splits(&full_cfg).unwrap();
        let mut model = initial_model(&full_cfg, &splits.train).unwrap();
        train(&mut model, &splits.train, &splits.val, &full_cfg.train_config()).unwrap();
        let g = noise_floor_gate(&model, &splits.test[0]);
        outcome(g.pass, format!("full retrain: {}", g.detail))
    } else {
        match io::load_model(&archive_path()) {
            Ok(a) => {
                let g = noise_floor_gate(&a.model, &test);
                outcome(g.pass, format!("full archive: {}", g.detail))
            }
            Err(e) => outcome(false, format!("full archive unavailable: {e}")),
        }
    };
    outcome(smoke_ok && full.pass, format!("{smoke_text}; {}", full.detail))
}

fn transfer() -> Outcome {
    let archive = match io::load_model(&archive_path()) {
        Ok(a) => a,
        Err(e) => return outcome(false, format!("full archive unavailable: {e}")),
    };
    match run_transfer(&archive.model.model, &TransferConfig::default(), derive_seed(0, "transfer/drive")) {
        Ok(r) => {
            let pass = r.divergent_at.is_none() && r.nrmse.iter().all(|n| *n <= 0.15);
            outcome(pass, format!("skew variant, NRMSE {:.4?}", r.nrmse))
        }
        Err(e) => outcome(false, format!("transfer failed: {e}")),
    }
}

/// Everything a short seeded run produces, serialized.
fn seeded_run(seed: u64) -> (Vec<Vec<u8>>, Vec<u64>, String, String, String) {
    let mut cfg = ProtocolConfig::for_profile(Profile::Smoke, seed);
    cfg.train.epochs = 3;
    let splits = generate_splits(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut files = Vec::new();
    for (i, d) in splits.train.iter().chain(&splits.val).chain(&splits.test).enumerate() {
        let p = dir.path().join(format!("d{i}.csv"));
        io::write_dataset(d, &p).unwrap();
        for path in [p.clone(), io::sidecar_path(&p), p.with_extension("csv.ref")] {
            files.push(std::fs::read(path).unwrap());
        }
    }
    let mut model = initial_model(&cfg, &splits.train).unwrap();
    let report = train(&mut model, &splits.train, &splits.val, &cfg.train_config()).unwrap();
    let losses = report.train_loss.iter().map(|v| v.to_bits()).collect();
    let archive = io::archive_to_string(&ModelArchive::new(model.clone(), None)).unwrap();
    let sim = evaluate_simulation(&model, &splits.test[0]).unwrap();
    let export = io::simulation_csv(&sim, &splits.test[0]);
    let curve = io::training_curve_csv(&report, &splits.test[0].output_names);
    (files, losses, archive, export, curve)
}

fn reproducibility() -> Outcome {
    let a = seeded_run(21);
    let b = seeded_run(21);
    let c = seeded_run(22);
    let same = [a.0 == b.0, a.1 == b.1, a.2 == b.2, a.3 == b.3, a.4 == b.4];
    let pass = same.iter().all(|s| *s) && a.0 != c.0;
    outcome(pass, format!("datasets/losses/archive/plot export/curve identical {same:?}; other seed differs {}", a.0 != c.0))
}

fn random_dataset(rng: &mut ChaCha8Rng) -> Dataset {
    let (n, nu, ny) = (rng.random_range(1..200), rng.random_range(1..4), rng.random_range(1..4));
    let value = |rng: &mut ChaCha8Rng| match rng.random_range(0..4) {
        0 => f64::from_bits(rng.random::<u64>() & !(0x7ffu64 << 52) | (rng.random_range(1..2046u64) << 52)),
        1 => rng.random_range(-1.0..1.0) * 1e-300,
        _ => rng.random_range(-100.0..100.0),
    };
    let mat = |rng: &mut ChaCha8Rng, r: usize, c: usize| Mat::from_fn(r, c, |_, _| value(rng));
    let inputs = mat(rng, n, nu);
    let outputs = mat(rng, n, ny);
    let reference = Some(NoiseReference { clean: mat(rng, n, ny), noise: mat(rng, n, ny) });
    let mut meta = DatasetMeta { reference, snr_target_db: Some(20.0), ..DatasetMeta::default() };
    meta.seeds.insert("noise".into(), rng.random());
    meta.snr_achieved_db = (0..ny).map(|_| rng.random_range(15.0..25.0)).collect();
    meta.noise_half_width = (0..ny).map(|_| rng.random_range(0.0..1.0)).collect();
    Dataset {
        sample_time: rng.random_range(1e-3..1.0),
        input_names: (0..nu).map(|i| format!("u{i}")).collect(),
        output_names: (0..ny).map(|i| format!("y{i}")).collect(),
        inputs,
        outputs,
        meta,
    }
}

fn io_round_trips() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let dir = tempfile::tempdir().unwrap();
    let cases = 100;
    let mut failures = 0;
    for i in 0..cases {
        let data = random_dataset(&mut rng);
        let path = dir.path().join(format!("d{i}.csv"));
        io::write_dataset(&data, &path).unwrap();
        let back = io::read_dataset(&path).unwrap();
        let ref_bits = |d: &Dataset| {
            let r = d.meta.reference.as_ref().unwrap();
            r.clean.data.iter().chain(&r.noise.data).map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        if !same_bits(&back, &data) || ref_bits(&back) != ref_bits(&data) {
            failures += 1;
        }

        let model = random_composite(&mut rng);
        let nu = model.nu();
        let norm = Normalization { u_mean: vec![0.5; nu], u_scale: vec![2.0; nu], y_mean: vec![-0.5; nu], y_scale: vec![0.3; nu] };
        let id = IdentifiedModel::new(model, rng.random_range(1..6), 8, norm, &mut rng);
        let archive = ModelArchive::new(id, Some(format!("{i:016x}")));
        let path = dir.path().join(format!("m{i}.json"));
        io::save_model(&archive, &path).unwrap();
        let back = io::load_model(&path).unwrap();
        let bits = |m: &IdentifiedModel| flatten(m).iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        if back != archive || bits(&back.model) != bits(&archive.model) {
            failures += 1;
        }
    }
    outcome(failures == 0, format!("{cases} random datasets and archives, {failures} mismatches"))
}

fn main() {
    type Criterion = (&'static str, f64, fn() -> Outcome);
    let criteria: [Criterion; 8] = [
        ("structural invariants", 60.0, structural_invariants),
        ("gradient correctness", 60.0, gradient_correctness),
        ("composite plant oracle", 10.0, plant_oracle),
        ("RK4 order", 10.0, rk4_convergence),
        ("identification at the noise floor", f64::INFINITY, identification),
        ("transfer to the gas reservoir", 60.0, transfer),
        ("reproducibility", f64::INFINITY, reproducibility),
        ("I/O round trips", 10.0, io_round_trips),
    ];
    let mut failed = 0;
    for (i, (name, budget, run)) in criteria.iter().enumerate() {
        let clock = Instant::now();
        let o = run();
        let secs = clock.elapsed().as_secs_f64();
        let pass = o.pass && secs <= *budget;
        let limit = if budget.is_finite() { format!(" (limit {budget:.0} s)") } else { String::new() };
        println!("{} {}. {name}: {} [{secs:.1} s{limit}]", if pass { "PASS" } else { "FAIL" }, i + 1, o.detail);
        if !pass {
            failed += 1;
        }
    }
    if failed > 0 {
        eprintln!("{failed} criteria failed");
        std::process::exit(1);
    }
}
