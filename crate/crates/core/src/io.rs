//! Files: datasets, model archives and plot-ready exports.
//!
//! Numbers are written with Rust's shortest round-trip formatting, so every
//! `f64` reads back bit-identically.
//!
//! A dataset `data.csv` has the header `t,u:<name>…,y:<name>…` followed by one
//! row per sample. Its metadata lives next to it in `data.csv.meta`, one
//! `key = value` pair per line (`#` starts a comment):
//!
//! ```text
//! format = 1
//! sample_time = 0.1
//! rows = 2500
//! seed.<name> = <u64>
//! snr_target_db = 20
//! snr_achieved_db = <per output channel, comma separated>
//! noise_half_width = <per output channel, comma separated>
//! plant_digest = <hex>
//! note.<key> = <text>
//! reference = data.csv.ref
//! ```
//!
//! The optional reference file holds the noise-free outputs and the noise
//! realization with header `clean:<name>…,noise:<name>…`.

use crate::ad::{Mat, Parameterized};
use crate::dataset::{Dataset, DatasetMeta, NoiseReference};
use crate::phs::{ModelError, Subsystem};
use crate::train::{IdentifiedModel, SimulationReport, TrainReport};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const SCHEMA_VERSION: u32 = 1;
const META_FORMAT: u32 = 1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("missing metadata sidecar {0}")]
    MissingSidecar(PathBuf),
    #[error("archive schema version {found}, this build reads version {expected}")]
    Schema { found: u64, expected: u32 },
    #[error("archive field `{path}`: {message}")]
    Field { path: String, message: String },
    #[error("parameter block `{name}`: {detail}")]
    Block { name: String, detail: String },
    #[error("invalid dataset: {0}")]
    Dataset(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{0}")]
    Invalid(String),
}

fn read(path: &Path) -> Result<String, IoError> {
    fs::read_to_string(path).map_err(|source| IoError::Io { path: path.into(), source })
}

fn write(path: &Path, text: &str) -> Result<(), IoError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|source| IoError::Io { path: dir.into(), source })?;
    }
    fs::write(path, text).map_err(|source| IoError::Io { path: path.into(), source })
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    s.into()
}

fn reference_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".ref");
    s.into()
}

fn join(values: &[f64]) -> String {
    values.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
}

fn push_row(out: &mut String, values: impl IntoIterator<Item = f64>) {
    let mut first = true;
    for v in values {
        if !first {
            out.push(',');
        }
        first = false;
        let _ = write!(out, "{v}");
    }
    out.push('\n');
}

/// Writes the CSV body, the sidecar and, when present, the reference file.
pub fn write_dataset(data: &Dataset, path: &Path) -> Result<(), IoError> {
    data.validate().map_err(IoError::Dataset)?;
    let mut body = String::from("t");
    for n in &data.input_names {
        let _ = write!(body, ",u:{n}");
    }
    for n in &data.output_names {
        let _ = write!(body, ",y:{n}");
    }
    body.push('\n');
    for k in 0..data.len() {
        let t = k as f64 * data.sample_time;
        push_row(&mut body, std::iter::once(t).chain(data.input_row(k).iter().copied()).chain(data.output_row(k).iter().copied()));
    }
    write(path, &body)?;

    let m = &data.meta;
    let mut meta = format!("# phnn dataset metadata\nformat = {META_FORMAT}\nsample_time = {}\nrows = {}\n", data.sample_time, data.len());
    for (k, v) in &m.seeds {
        check_key(k)?;
        let _ = writeln!(meta, "seed.{k} = {v}");
    }
    if let Some(s) = m.snr_target_db {
        let _ = writeln!(meta, "snr_target_db = {s}");
    }
    if !m.snr_achieved_db.is_empty() {
        let _ = writeln!(meta, "snr_achieved_db = {}", join(&m.snr_achieved_db));
    }
    if !m.noise_half_width.is_empty() {
        let _ = writeln!(meta, "noise_half_width = {}", join(&m.noise_half_width));
    }
    if let Some(d) = &m.plant_digest {
        check_value(d)?;
        let _ = writeln!(meta, "plant_digest = {d}");
    }
    for (k, v) in &m.notes {
        check_key(k)?;
        check_value(v)?;
        let _ = writeln!(meta, "note.{k} = {v}");
    }
    if let Some(r) = &m.reference {
        let ref_path = reference_path(path);
        let name = ref_path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let _ = writeln!(meta, "reference = {name}");
        let mut text = String::new();
        let header: Vec<String> = data
            .output_names
            .iter()
            .map(|n| format!("clean:{n}"))
            .chain(data.output_names.iter().map(|n| format!("noise:{n}")))
            .collect();
        text.push_str(&header.join(","));
        text.push('\n');
        for k in 0..data.len() {
            push_row(&mut text, r.clean.row_slice(k).iter().copied().chain(r.noise.row_slice(k).iter().copied()));
        }
        write(&ref_path, &text)?;
    }
    write(&sidecar_path(path), &meta)
}

fn check_key(k: &str) -> Result<(), IoError> {
    if k.is_empty() || k.chars().any(|c| c.is_whitespace() || c == '=' || c == '#') {
        return Err(IoError::Invalid(format!("metadata key {k:?} must be non-empty without whitespace, '=' or '#'")));
    }
    Ok(())
}

fn check_value(v: &str) -> Result<(), IoError> {
    if v.contains(['\n', '\r']) || v.trim() != v {
        return Err(IoError::Invalid(format!("metadata value {v:?} must be a single trimmed line")));
    }
    Ok(())
}

fn parse_f64(path: &Path, line: usize, field: &str) -> Result<f64, IoError> {
    field.parse().map_err(|_| IoError::Parse { path: path.into(), line, message: format!("not a number: {field:?}") })
}

fn parse_list(path: &Path, line: usize, value: &str) -> Result<Vec<f64>, IoError> {
    value.split(',').map(|f| parse_f64(path, line, f.trim())).collect()
}

/// Non-empty lines with their 1-based numbers; `\r\n` is accepted.
fn lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
}

pub fn read_dataset(path: &Path) -> Result<Dataset, IoError> {
    let meta_path = sidecar_path(path);
    if !meta_path.exists() {
        return Err(IoError::MissingSidecar(meta_path));
    }
    let body = read(path)?;
    let mut rows = lines(&body);
    let (_, header) = rows.next().ok_or_else(|| IoError::Parse { path: path.into(), line: 1, message: "empty file".into() })?;
    let bad_header = |message: String| IoError::Parse { path: path.into(), line: 1, message };
    let mut fields = header.split(',');
    if fields.next() != Some("t") {
        return Err(bad_header("header must start with `t`".into()));
    }
    let (mut input_names, mut output_names) = (Vec::new(), Vec::new());
    for f in fields {
        if let Some(n) = f.strip_prefix("u:") {
            if !output_names.is_empty() {
                return Err(bad_header(format!("input column `{f}` after output columns")));
            }
            input_names.push(n.to_string());
        } else if let Some(n) = f.strip_prefix("y:") {
            output_names.push(n.to_string());
        } else {
            return Err(bad_header(format!("column `{f}` is neither `u:<name>` nor `y:<name>`")));
        }
    }
    let (nu, ny) = (input_names.len(), output_names.len());
    let mut inputs = Vec::new();
    let mut outputs = Vec::new();
    let mut count = 0;
    for (line, text) in rows {
        let fields: Vec<&str> = text.split(',').collect();
        if fields.len() != 1 + nu + ny {
            return Err(IoError::Parse { path: path.into(), line, message: format!("expected {} fields, found {}", 1 + nu + ny, fields.len()) });
        }
        parse_f64(path, line, fields[0])?;
        for f in &fields[1..=nu] {
            inputs.push(parse_f64(path, line, f)?);
        }
        for f in &fields[1 + nu..] {
            outputs.push(parse_f64(path, line, f)?);
        }
        count += 1;
    }

    let meta_text = read(&meta_path)?;
    let mut meta = DatasetMeta::default();
    let mut sample_time = None;
    let mut declared_rows = None;
    let mut reference = None;
    for (line, text) in lines(&meta_text) {
        let text = text.trim();
        if text.is_empty() || text.starts_with('#') {
            continue;
        }
        let err = |message: String| IoError::Parse { path: meta_path.clone(), line, message };
        let (key, value) = text.split_once('=').ok_or_else(|| err("expected `key = value`".into()))?;
        let (key, value) = (key.trim(), value.trim());
        match key {
            "format" => {
                if value != META_FORMAT.to_string() {
                    return Err(err(format!("unsupported metadata format {value}")));
                }
            }
            "sample_time" => sample_time = Some(parse_f64(&meta_path, line, value)?),
            "rows" => declared_rows = Some(value.parse::<usize>().map_err(|_| err(format!("bad row count {value:?}")))?),
            "snr_target_db" => meta.snr_target_db = Some(parse_f64(&meta_path, line, value)?),
            "snr_achieved_db" => meta.snr_achieved_db = parse_list(&meta_path, line, value)?,
            "noise_half_width" => meta.noise_half_width = parse_list(&meta_path, line, value)?,
            "plant_digest" => meta.plant_digest = Some(value.to_string()),
            "reference" => reference = Some((line, value.to_string())),
            _ => {
                if let Some(name) = key.strip_prefix("seed.") {
                    let v = value.parse().map_err(|_| err(format!("bad seed {value:?}")))?;
                    meta.seeds.insert(name.to_string(), v);
                } else if let Some(name) = key.strip_prefix("note.") {
                    meta.notes.insert(name.to_string(), value.to_string());
                } else {
                    return Err(err(format!("unknown key `{key}`")));
                }
            }
        }
    }
    let sample_time = sample_time.ok_or_else(|| IoError::Parse { path: meta_path.clone(), line: 0, message: "missing `sample_time`".into() })?;
    if let Some(r) = declared_rows {
        if r != count {
            return Err(IoError::Parse { path: path.into(), line: count + 2, message: format!("metadata declares {r} rows, file has {count}") });
        }
    }
    if let Some((line, name)) = reference {
        let ref_path = path.parent().unwrap_or(Path::new("")).join(&name);
        if !ref_path.exists() {
            return Err(IoError::Parse { path: meta_path.clone(), line, message: format!("reference file {name} not found") });
        }
        meta.reference = Some(read_reference(&ref_path, &output_names, count)?);
    }
    let data = Dataset {
        sample_time,
        input_names,
        output_names,
        inputs: Mat::from_vec(count, nu, inputs),
        outputs: Mat::from_vec(count, ny, outputs),
        meta,
    };
    data.validate().map_err(IoError::Dataset)?;
    Ok(data)
}

fn read_reference(path: &Path, names: &[String], rows: usize) -> Result<NoiseReference, IoError> {
    let text = read(path)?;
    let mut it = lines(&text);
    let expected: Vec<String> = names.iter().map(|n| format!("clean:{n}")).chain(names.iter().map(|n| format!("noise:{n}"))).collect();
    match it.next() {
        Some((_, h)) if h == expected.join(",") => {}
        _ => return Err(IoError::Parse { path: path.into(), line: 1, message: format!("expected header `{}`", expected.join(",")) }),
    }
    let ny = names.len();
    let (mut clean, mut noise) = (Vec::with_capacity(rows * ny), Vec::with_capacity(rows * ny));
    let mut count = 0;
    for (line, t) in it {
        let fields: Vec<&str> = t.split(',').collect();
        if fields.len() != 2 * ny {
            return Err(IoError::Parse { path: path.into(), line, message: format!("expected {} fields, found {}", 2 * ny, fields.len()) });
        }
        for f in &fields[..ny] {
            clean.push(parse_f64(path, line, f)?);
        }
        for f in &fields[ny..] {
            noise.push(parse_f64(path, line, f)?);
        }
        count += 1;
    }
    if count != rows {
        return Err(IoError::Parse { path: path.into(), line: count + 2, message: format!("expected {rows} rows, found {count}") });
    }
    Ok(NoiseReference { clean: Mat::from_vec(rows, ny, clean), noise: Mat::from_vec(rows, ny, noise) })
}

/// Dimensions of one subsystem of the archived composite.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub learned: bool,
    pub nx: usize,
    pub nu: usize,
}

/// Versioned, self-describing model file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelArchive {
    pub schema_version: u32,
    pub partitions: Vec<Partition>,
    pub model: IdentifiedModel,
    /// Digest of the configuration that produced the model.
    #[serde(default)]
    pub config_digest: Option<String>,
}

impl ModelArchive {
    pub fn new(model: IdentifiedModel, config_digest: Option<String>) -> Self {
        let partitions = model
            .model
            .subsystems
            .iter()
            .map(|s| Partition { learned: matches!(s, Subsystem::Learned(_)), nx: s.nx(), nu: s.nu() })
            .collect();
        ModelArchive { schema_version: SCHEMA_VERSION, partitions, model, config_digest }
    }
}

/// FNV-1a digest of arbitrary text, as 16 hex digits.
pub fn digest(text: &str) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    format!("{h:016x}")
}

pub fn archive_to_string(archive: &ModelArchive) -> Result<String, IoError> {
    check_blocks(&archive.model)?;
    serde_json::to_string_pretty(archive).map_err(|e| IoError::Invalid(e.to_string())).map(|mut s| {
        s.push('\n');
        s
    })
}

pub fn save_model(archive: &ModelArchive, path: &Path) -> Result<(), IoError> {
    write(path, &archive_to_string(archive)?)
}

pub fn archive_from_str(text: &str) -> Result<ModelArchive, IoError> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| IoError::Field { path: String::new(), message: e.to_string() })?;
    match value.get("schema_version").and_then(serde_json::Value::as_u64) {
        Some(v) if v == SCHEMA_VERSION as u64 => {}
        Some(v) => return Err(IoError::Schema { found: v, expected: SCHEMA_VERSION }),
        None => return Err(IoError::Field { path: "schema_version".into(), message: "missing or not an integer".into() }),
    }
    let mut de = serde_json::Deserializer::from_str(text);
    let archive: ModelArchive =
        serde_path_to_error::deserialize(&mut de).map_err(|e| IoError::Field { path: e.path().to_string(), message: e.inner().to_string() })?;
    check_blocks(&archive.model)?;
    archive.model.validate().map_err(|e| IoError::Invalid(e.to_string()))?;
    let expected = ModelArchive::new(archive.model.clone(), None).partitions;
    if expected != archive.partitions {
        return Err(IoError::Field { path: "partitions".into(), message: format!("listed {:?}, model has {:?}", archive.partitions, expected) });
    }
    Ok(archive)
}

pub fn load_model(path: &Path) -> Result<ModelArchive, IoError> {
    archive_from_str(&read(path)?)
}

/// Every parameter array must hold `rows × cols` finite values.
fn check_blocks(model: &IdentifiedModel) -> Result<(), IoError> {
    let mut bad = None;
    let mut check = |name: String, m: &Mat| {
        if bad.is_some() {
            return;
        }
        if m.data.len() != m.rows * m.cols {
            bad = Some(IoError::Block { name, detail: format!("{} values for a {}x{} array", m.data.len(), m.rows, m.cols) });
        } else if !m.is_finite() {
            bad = Some(IoError::Block { name, detail: "non-finite value".into() });
        }
    };
    model.visit("", &mut check);
    for (i, s) in model.model.subsystems.iter().enumerate() {
        if let Subsystem::Analytic(a) = s {
            check(format!("model.subsystems[{i}].g"), &a.g());
        }
    }
    check("model.interconnection".into(), &model.model.interconnection);
    bad.map_or(Ok(()), Err)
}

/// Columns `t`, then per output channel `measured:`, `simulated:`, `error:`
/// (`measured - simulated`), `noise_lo:` and `noise_hi:` (`∓` half-width).
pub fn simulation_csv(report: &SimulationReport, data: &Dataset) -> String {
    let ny = data.ny();
    let mut out = String::from("t");
    for prefix in ["measured", "simulated", "error", "noise_lo", "noise_hi"] {
        for n in &data.output_names {
            let _ = write!(out, ",{prefix}:{n}");
        }
    }
    out.push('\n');
    let half: Vec<f64> = (0..ny).map(|c| data.meta.noise_half_width.get(c).copied().unwrap_or(0.0)).collect();
    for k in 0..report.simulated.rows {
        let t = (report.start + k) as f64 * data.sample_time;
        let row = std::iter::once(t)
            .chain(report.measured.row_slice(k).iter().copied())
            .chain(report.simulated.row_slice(k).iter().copied())
            .chain(report.error.row_slice(k).iter().copied())
            .chain(half.iter().map(|a| -a))
            .chain(half.iter().copied());
        push_row(&mut out, row);
    }
    out
}

pub fn export_plot_data(report: &SimulationReport, data: &Dataset, path: &Path) -> Result<(), IoError> {
    write(path, &simulation_csv(report, data))
}

/// Columns `epoch,train_loss,val_score,val_nrmse:<channel>…`; missing
/// validation values are left empty.
pub fn training_curve_csv(report: &TrainReport, channels: &[String]) -> String {
    let mut out = String::from("epoch,train_loss,val_score");
    for c in channels {
        let _ = write!(out, ",val_nrmse:{c}");
    }
    out.push('\n');
    for (e, loss) in report.train_loss.iter().enumerate() {
        let _ = write!(out, "{e},{loss},");
        if let Some(s) = report.val_score.get(e) {
            let _ = write!(out, "{s}");
        }
        for c in 0..channels.len() {
            out.push(',');
            if let Some(v) = report.val_nrmse.get(e).and_then(|v| v.get(c)) {
                let _ = write!(out, "{v}");
            }
        }
        out.push('\n');
    }
    out
}

pub fn export_training_curve(report: &TrainReport, channels: &[String], path: &Path) -> Result<(), IoError> {
    write(path, &training_curve_csv(report, channels))
}

/// Writes `value` as pretty JSON followed by a newline.
pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), IoError> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| IoError::Invalid(e.to_string()))?;
    s.push('\n');
    write(path, &s)
}

/// Flat `key = value` summary, sorted by key.
pub fn write_key_values(values: &BTreeMap<String, String>, path: &Path) -> Result<(), IoError> {
    let mut s = String::new();
    for (k, v) in values {
        let _ = writeln!(s, "{k} = {v}");
    }
    write(path, &s)
}
