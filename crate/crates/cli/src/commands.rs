use crate::config::ExperimentConfig;
use crate::error::CliError;
use phnn::ad::Mat;
use phnn::io::{self, digest, ModelArchive};
use phnn::protocol::{derive_seed, generate_dataset, initial_model};
use phnn::train::{evaluate_simulation, train_with_observer, EpochRecord, SimulationReport, TrainReport};
use phnn::transfer::{run_transfer, TransferReport};
use phnn::Dataset;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub const MANIFEST: &str = "manifest.toml";
pub const MODEL: &str = "model.json";

/// Dataset roles of a generated experiment. Paths are relative to the
/// manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub seed: u64,
    pub config_digest: String,
    pub train: Vec<PathBuf>,
    pub val: Vec<PathBuf>,
    pub test: Vec<PathBuf>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<(Manifest, PathBuf), CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        let m: Manifest = toml::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        if m.train.is_empty() || m.test.is_empty() {
            return Err(CliError::Validation(format!("{}: needs at least one train and one test dataset", path.display())));
        }
        let dir = path.parent().unwrap_or(Path::new("")).to_path_buf();
        Ok((m, dir))
    }

    fn read(dir: &Path, files: &[PathBuf]) -> Result<Vec<Dataset>, CliError> {
        files.iter().map(|f| io::read_dataset(&dir.join(f)).map_err(CliError::from)).collect()
    }
}

pub fn out_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out.clone().unwrap_or_else(|| PathBuf::from("phnn-out"))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(d) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(d).map_err(|e| CliError::Validation(format!("{}: {e}", d.display())))?;
    }
    std::fs::write(path, text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

pub fn config_digest(cfg: &ExperimentConfig) -> String {
    let mut c = cfg.clone();
    c.out = None;
    c.train.threads = 1;
    digest(&c.to_toml())
}

/// Writes every dataset, the resolved configuration and the manifest.
pub fn generate(cfg: &ExperimentConfig) -> Result<PathBuf, CliError> {
    let out = out_dir(cfg);
    let proto = cfg.protocol();
    let mut names = Vec::new();
    for i in 0..proto.dataset_count() {
        let d = generate_dataset(&proto, i)?;
        let rel = PathBuf::from(format!("data/dataset_{i}.csv"));
        io::write_dataset(&d, &out.join(&rel))?;
        eprintln!("wrote {} ({} samples, SNR {:.2?} dB)", rel.display(), d.len(), d.meta.snr_achieved_db);
        names.push(rel);
    }
    let test = names.split_off(proto.n_train + proto.n_val);
    let val = names.split_off(proto.n_train);
    let manifest = Manifest { seed: cfg.seed, config_digest: config_digest(cfg), train: names, val, test };
    write_text(&out.join("config.toml"), &cfg.to_toml())?;
    let path = out.join(MANIFEST);
    write_text(&path, &toml::to_string_pretty(&manifest).expect("manifest serializes"))?;
    Ok(path)
}

fn progress(total: usize) -> impl FnMut(&EpochRecord) {
    move |r: &EpochRecord| {
        let val = r.val_nrmse.as_ref().map(|v| format!("  val NRMSE {}", fmt_list(v, 4))).unwrap_or_default();
        eprintln!("epoch {:>4}/{total}  loss {:.4e}{val}  {:.1}s", r.epoch + 1, r.train_loss, r.elapsed_s);
    }
}

fn fmt_list(v: &[f64], digits: usize) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.digits$}")).collect();
    format!("[{}]", parts.join(", "))
}

/// Loss at a few milestones and the share of 10-epoch windows whose mean
/// loss fell.
pub fn trend_summary(report: &TrainReport) -> String {
    let l = &report.train_loss;
    let mut s = format!("initial loss {:.6e}\n", report.initial_loss);
    for e in [1usize, 10, 100, 1000] {
        if e <= l.len() {
            let _ = writeln!(s, "loss after epoch {e}: {:.6e}", l[e - 1]);
        }
    }
    if let Some(last) = l.last() {
        let _ = writeln!(s, "final loss ({} epochs): {last:.6e}", l.len());
        let _ = writeln!(s, "reduction vs initial: {:.2}x", report.initial_loss / last);
    }
    let means: Vec<f64> = l.chunks(10).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
    if means.len() > 1 {
        let down = means.windows(2).filter(|w| w[1] < w[0]).count();
        let _ = writeln!(s, "decreasing 10-epoch windows: {down}/{}", means.len() - 1);
    }
    if let Some(b) = report.best_epoch {
        let _ = writeln!(s, "best validation epoch: {} (mean NRMSE {:.6})", b + 1, report.val_score[b]);
    }
    let _ = writeln!(s, "wall time: {:.1}s", report.wall_time_s);
    s
}

pub struct Trained {
    pub archive: ModelArchive,
    pub report: TrainReport,
}

pub fn train(cfg: &ExperimentConfig, manifest_path: &Path) -> Result<Trained, CliError> {
    let out = out_dir(cfg);
    let (manifest, dir) = Manifest::load(manifest_path)?;
    let train_sets = Manifest::read(&dir, &manifest.train)?;
    let val_sets = Manifest::read(&dir, &manifest.val)?;
    let proto = cfg.protocol();
    let mut model = initial_model(&proto, &train_sets)?;
    let tc = proto.train_config();
    let report = train_with_observer(&mut model, &train_sets, &val_sets, &tc, &mut progress(tc.epochs))?;
    let archive = ModelArchive::new(model, Some(config_digest(cfg)));
    io::save_model(&archive, &out.join(MODEL))?;
    io::write_json(&report, &out.join("train_report.json"))?;
    let channels = train_sets[0].output_names.clone();
    io::export_training_curve(&report, &channels, &out.join("training_curve.csv"))?;
    let summary = trend_summary(&report);
    write_text(&out.join("train_summary.txt"), &summary)?;
    eprint!("{summary}");
    Ok(Trained { archive, report })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalMetrics {
    pub dataset: String,
    pub channels: Vec<String>,
    pub rmse: Vec<f64>,
    pub nrmse: Vec<f64>,
    /// Standard deviation of the added noise, per channel.
    pub noise_std: Vec<f64>,
    pub rmse_over_noise_std: Vec<f64>,
    /// Fraction of samples with `|error|` inside the noise half-width.
    pub within_noise_band: Vec<f64>,
    pub divergent_at: Option<usize>,
}

pub fn noise_std(data: &Dataset) -> Vec<f64> {
    match &data.meta.reference {
        Some(r) => (0..data.ny())
            .map(|c| {
                let col = r.noise.column(c);
                let n = col.len().max(1) as f64;
                let mean = col.iter().sum::<f64>() / n;
                (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
            })
            .collect(),
        None => data.meta.noise_half_width.iter().map(|a| a / 3f64.sqrt()).collect(),
    }
}

pub fn metrics(report: &SimulationReport, data: &Dataset, name: &str) -> EvalMetrics {
    let noise_std = noise_std(data);
    EvalMetrics {
        dataset: name.to_string(),
        channels: data.output_names.clone(),
        rmse: report.rmse.clone(),
        nrmse: report.nrmse.clone(),
        rmse_over_noise_std: report.rmse.iter().zip(&noise_std).map(|(r, s)| r / s).collect(),
        noise_std,
        within_noise_band: report.within_band(&data.meta.noise_half_width),
        divergent_at: report.divergent_at,
    }
}

/// Simulates `data` with the archived model and writes metrics and plot data
/// named after the dataset file.
pub fn eval(archive: &ModelArchive, data_path: &Path, out: &Path) -> Result<EvalMetrics, CliError> {
    let data = io::read_dataset(data_path)?;
    let report = evaluate_simulation(&archive.model, &data)?;
    let stem = data_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "data".into());
    let m = metrics(&report, &data, &stem);
    io::export_plot_data(&report, &data, &out.join(format!("eval_{stem}.csv")))?;
    io::write_json(&m, &out.join(format!("eval_{stem}.json")))?;
    eprintln!(
        "{stem}: RMSE {}  NRMSE {}  RMSE/noise-std {}  in noise band {}",
        fmt_list(&m.rmse, 5),
        fmt_list(&m.nrmse, 4),
        fmt_list(&m.rmse_over_noise_std, 3),
        fmt_list(&m.within_noise_band, 3)
    );
    if let Some(k) = m.divergent_at {
        return Err(CliError::Numerical(format!("{stem}: simulation diverged at sample {k}")));
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransferMetrics {
    pub channels: Vec<String>,
    pub rmse: Vec<f64>,
    pub nrmse: Vec<f64>,
    pub initial_state: Vec<f64>,
    pub rest_residual: f64,
    pub drive_seed: u64,
    pub divergent_at: Option<usize>,
}

pub fn transfer_csv(r: &TransferReport) -> String {
    let names = &r.truth.output_names;
    let mut s = String::from("t");
    for p in ["truth", "simulated", "error"] {
        for n in names {
            let _ = write!(s, ",{p}:{n}");
        }
    }
    s.push('\n');
    let rows = r.simulated.rows;
    let truth: Mat = r.truth.outputs.rows_range(0, rows);
    for k in 0..rows {
        let _ = write!(s, "{}", k as f64 * r.truth.sample_time);
        for v in truth.row_slice(k).iter().chain(r.simulated.row_slice(k)).chain(r.error.row_slice(k)) {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

pub fn transfer(cfg: &ExperimentConfig, archive: &ModelArchive, out: &Path) -> Result<TransferMetrics, CliError> {
    let drive_seed = derive_seed(cfg.seed, "transfer/drive");
    let r = run_transfer(&archive.model.model, &cfg.transfer, drive_seed)?;
    write_text(&out.join("transfer.csv"), &transfer_csv(&r))?;
    let m = TransferMetrics {
        channels: r.truth.output_names.clone(),
        rmse: r.rmse.clone(),
        nrmse: r.nrmse.clone(),
        initial_state: r.initial_state.clone(),
        rest_residual: r.rest_residual,
        drive_seed,
        divergent_at: r.divergent_at,
    };
    io::write_json(&m, &out.join("transfer.json"))?;
    eprintln!("transfer: NRMSE {} (rest residual {:.2e})", fmt_list(&m.nrmse, 4), m.rest_residual);
    if let Some(k) = m.divergent_at {
        return Err(CliError::Numerical(format!("transfer simulation diverged at sample {k}")));
    }
    Ok(m)
}

/// Generation, training, test evaluation and the transfer experiment.
pub fn reproduce(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let out = out_dir(cfg);
    let manifest_path = generate(cfg)?;
    let trained = train(cfg, &manifest_path)?;
    let (manifest, dir) = Manifest::load(&manifest_path)?;
    let mut summary = trend_summary(&trained.report);
    for t in &manifest.test {
        let m = eval(&trained.archive, &dir.join(t), &out)?;
        let _ = writeln!(
            summary,
            "test {}: RMSE {} NRMSE {} RMSE/noise-std {} in-band {}",
            m.dataset,
            fmt_list(&m.rmse, 5),
            fmt_list(&m.nrmse, 4),
            fmt_list(&m.rmse_over_noise_std, 3),
            fmt_list(&m.within_noise_band, 3)
        );
    }
    let tm = transfer(cfg, &trained.archive, &out)?;
    let _ = writeln!(summary, "transfer NRMSE {}", fmt_list(&tm.nrmse, 4));
    write_text(&out.join("summary.txt"), &summary)?;
    Ok(())
}
