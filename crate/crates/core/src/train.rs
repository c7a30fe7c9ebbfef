//! Subsection-based identification of composite port-Hamiltonian models.
//!
//! Each training subsection starts at a sample `t`. Its initial state is
//! estimated by an encoder from the `n` preceding input/output samples, the
//! model is rolled out for `T` RK4 steps, and the squared output errors are
//! accumulated. Parameters of the model and the encoder are updated jointly
//! with ADAM.

use crate::ad::params::{assign, flatten};
use crate::ad::{
    adam_step, mlp_eval, Activation, AdError, AdamConfig, AdamError, AdamState, BoundMlp, Mat, MlpParams, NodeId, ParamLayout,
    Parameterized, Tape,
};
use crate::dataset::{column_mean, column_std, Dataset};
use crate::ode::{simulate, SimError, ZohSignal};
use crate::phs::{BoundComposite, CompositeModel, ModelError};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("no training data")]
    NoTrainingData,
    #[error("incompatible dataset {index}: {detail}")]
    Layout { index: usize, detail: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("subsection start {start} outside admissible range {lo}..={hi}")]
    StartOutOfRange { start: usize, lo: usize, hi: usize },
    #[error("encoder window has {got} samples, expected {expected}")]
    WindowTooShort { expected: usize, got: usize },
    #[error("non-finite loss at epoch {epoch}, batch {batch}; largest parameter block `{worst_block}` has norm {worst_norm:e}")]
    NonFiniteLoss { epoch: usize, batch: usize, worst_block: String, worst_norm: f64, param_norms: Vec<(String, f64)> },
    #[error("epoch {epoch}, batch {batch}: {source}")]
    Optimizer { epoch: usize, batch: usize, source: AdamError },
    #[error(transparent)]
    Graph(#[from] AdError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// Per-channel affine scaling of inputs and outputs.
///
/// The encoder sees standardized windows and output errors are weighted by
/// `1 / y_scale`; the dynamics themselves stay in physical units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub u_mean: Vec<f64>,
    pub u_scale: Vec<f64>,
    pub y_mean: Vec<f64>,
    pub y_scale: Vec<f64>,
}

impl Normalization {
    pub fn identity(nu: usize, ny: usize) -> Self {
        Normalization { u_mean: vec![0.0; nu], u_scale: vec![1.0; nu], y_mean: vec![0.0; ny], y_scale: vec![1.0; ny] }
    }

    /// Mean and standard deviation over all samples of all `sets`.
    /// Constant channels get scale 1.
    pub fn from_datasets(sets: &[Dataset]) -> Result<Self, TrainError> {
        let first = sets.first().ok_or(TrainError::NoTrainingData)?;
        let (nu, ny) = (first.nu(), first.ny());
        let rows: usize = sets.iter().map(Dataset::len).sum();
        let mut u = Mat::zeros(rows, nu);
        let mut y = Mat::zeros(rows, ny);
        let mut r = 0;
        for (i, s) in sets.iter().enumerate() {
            if s.nu() != nu || s.ny() != ny {
                return Err(TrainError::Layout { index: i, detail: "channel counts differ".into() });
            }
            for k in 0..s.len() {
                u.data[r * nu..(r + 1) * nu].copy_from_slice(s.input_row(k));
                y.data[r * ny..(r + 1) * ny].copy_from_slice(s.output_row(k));
                r += 1;
            }
        }
        let fix = |v: Vec<f64>| v.into_iter().map(|s| if s > 0.0 && s.is_finite() { s } else { 1.0 }).collect();
        Ok(Normalization { u_mean: column_mean(&u), u_scale: fix(column_std(&u)), y_mean: column_mean(&y), y_scale: fix(column_std(&y)) })
    }

    pub fn nu(&self) -> usize {
        self.u_mean.len()
    }

    pub fn ny(&self) -> usize {
        self.y_mean.len()
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.u_scale.len() != self.u_mean.len() || self.y_scale.len() != self.y_mean.len() {
            return Err("normalization mean/scale lengths differ".into());
        }
        let all = self.u_mean.iter().chain(&self.y_mean);
        if all.chain(&self.u_scale).chain(&self.y_scale).any(|v| !v.is_finite()) {
            return Err("non-finite normalization statistic".into());
        }
        if self.u_scale.iter().chain(&self.y_scale).any(|&s| s <= 0.0) {
            return Err("normalization scales must be positive".into());
        }
        Ok(())
    }
}

/// Encoder `n·(nu+ny) → hidden tanh → hidden residual tanh → nx`.
pub fn init_encoder<R: rand::Rng>(lag: usize, nu: usize, ny: usize, nx: usize, hidden: usize, rng: &mut R) -> MlpParams {
    MlpParams::init(
        &[lag * (nu + ny), hidden, hidden, nx],
        &[Activation::Tanh, Activation::ResidualTanh, Activation::Linear],
        rng,
    )
}

/// Composite model together with its state encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentifiedModel {
    pub model: CompositeModel,
    pub encoder: MlpParams,
    /// Encoder window length `n`.
    pub lag: usize,
    pub normalization: Normalization,
}

impl IdentifiedModel {
    /// Attaches a freshly initialized encoder to `model`. `ny` equals `nu`
    /// for port-Hamiltonian outputs.
    pub fn new<R: rand::Rng>(model: CompositeModel, lag: usize, hidden: usize, normalization: Normalization, rng: &mut R) -> Self {
        let (nx, nu) = (model.nx(), model.nu());
        let encoder = init_encoder(lag, nu, nu, nx, hidden, rng);
        IdentifiedModel { model, encoder, lag, normalization }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.model.validate()?;
        self.encoder.validate().map_err(|e| TrainError::Config(format!("encoder: {e}")))?;
        self.normalization.validate().map_err(TrainError::Config)?;
        let nu = self.model.nu();
        if self.lag == 0 {
            return Err(TrainError::Config("encoder lag must be at least 1".into()));
        }
        if self.normalization.nu() != nu || self.normalization.ny() != nu {
            return Err(TrainError::Config(format!(
                "normalization covers {} inputs / {} outputs, model has {nu} ports",
                self.normalization.nu(),
                self.normalization.ny()
            )));
        }
        if self.encoder.input_dim() != self.lag * 2 * nu || self.encoder.output_dim() != self.model.nx() {
            return Err(TrainError::Config(format!(
                "encoder maps {} -> {}, expected {} -> {}",
                self.encoder.input_dim(),
                self.encoder.output_dim(),
                self.lag * 2 * nu,
                self.model.nx()
            )));
        }
        Ok(())
    }

    /// Plain state estimate at sample `lag` from the first `lag` samples.
    pub fn initial_state(&self, data: &Dataset) -> Result<Vec<f64>, TrainError> {
        if data.len() < self.lag {
            return Err(TrainError::WindowTooShort { expected: self.lag, got: data.len() });
        }
        Ok(self.encoder.eval_vec(&encoder_window(data, self.lag, self.lag, &self.normalization)))
    }
}

impl Parameterized for IdentifiedModel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Mat)) {
        self.model.visit(&format!("{prefix}model."), f);
        self.encoder.visit(&format!("{prefix}encoder"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Mat)) {
        self.model.visit_mut(&format!("{prefix}model."), f);
        self.encoder.visit_mut(&format!("{prefix}encoder"), f);
    }
}

/// Flattened, standardized window `[u_{t-n}, y_{t-n}, …, u_{t-1}, y_{t-1}]`.
pub fn encoder_window(data: &Dataset, t: usize, lag: usize, norm: &Normalization) -> Vec<f64> {
    let mut w = Vec::with_capacity(lag * (data.nu() + data.ny()));
    for k in t - lag..t {
        w.extend(data.input_row(k).iter().enumerate().map(|(c, v)| (v - norm.u_mean[c]) / norm.u_scale[c]));
        w.extend(data.output_row(k).iter().enumerate().map(|(c, v)| (v - norm.y_mean[c]) / norm.y_scale[c]));
    }
    w
}

/// Encoder output for one window of `n` past `(u, y)` samples, given as
/// `n × nu` and `n × ny` matrices in physical units (oldest first).
pub fn encode_initial_state(
    encoder: &BoundMlp,
    past_u: &Mat,
    past_y: &Mat,
    norm: &Normalization,
    tape: &mut Tape,
) -> Result<NodeId, TrainError> {
    let lag = past_u.rows;
    let width = past_u.cols + past_y.cols;
    if past_y.rows != lag || encoder.input_dim != lag * width || lag == 0 {
        let expected = encoder.input_dim / width.max(1);
        return Err(TrainError::WindowTooShort { expected, got: lag.min(past_y.rows) });
    }
    let mut w = Vec::with_capacity(encoder.input_dim);
    for k in 0..lag {
        w.extend(past_u.row_slice(k).iter().enumerate().map(|(c, v)| (v - norm.u_mean[c]) / norm.u_scale[c]));
        w.extend(past_y.row_slice(k).iter().enumerate().map(|(c, v)| (v - norm.y_mean[c]) / norm.y_scale[c]));
    }
    let input = tape.constant(Mat::col(&w));
    Ok(mlp_eval(tape, encoder, input)?)
}

/// Admissible starts `lag ..= N - T` of one dataset.
fn admissible(len: usize, lag: usize, truncation: usize) -> Option<(usize, usize)> {
    (len >= lag + truncation).then(|| (lag, len - truncation))
}

/// Sum of weighted squared output errors over a batch of `(set, start)`
/// subsections, as a scalar node.
fn batch_sse(
    tape: &mut Tape,
    model: &BoundComposite,
    encoder: &BoundMlp,
    sets: &[Dataset],
    batch: &[(usize, usize)],
    truncation: usize,
    lag: usize,
    norm: &Normalization,
) -> Result<NodeId, TrainError> {
    let b = batch.len();
    let (nu, ny) = (norm.nu(), norm.ny());
    for &(s, t) in batch {
        let (lo, hi) = admissible(sets[s].len(), lag, truncation).unwrap_or((lag, 0));
        if t < lo || t > hi {
            return Err(TrainError::StartOutOfRange { start: t, lo, hi });
        }
    }
    let width = lag * (nu + ny);
    let mut window = Mat::zeros(width, b);
    for (j, &(s, t)) in batch.iter().enumerate() {
        for (i, v) in encoder_window(&sets[s], t, lag, norm).into_iter().enumerate() {
            window.set(i, j, v);
        }
    }
    let window = tape.constant(window);
    let mut x = mlp_eval(tape, encoder, window)?;
    let weight = tape.constant(Mat::col(&norm.y_scale.iter().map(|s| 1.0 / s).collect::<Vec<_>>()));
    let h = sets[batch[0].0].sample_time;
    let mut total: Option<NodeId> = None;
    for k in 0..truncation {
        let u = tape.constant(Mat::from_fn(nu, b, |r, j| {
            let (s, t) = batch[j];
            sets[s].inputs.get(t + k, r)
        }));
        let measured = tape.constant(Mat::from_fn(ny, b, |r, j| {
            let (s, t) = batch[j];
            sets[s].outputs.get(t + k, r)
        }));
        let ev = model.eval(tape, x, Some(u))?;
        let err = tape.sub(ev.y, measured)?;
        let scaled = tape.mul(err, weight)?;
        let sse = tape.sq_norm(scaled);
        total = Some(match total {
            Some(acc) => tape.add(acc, sse)?,
            None => sse,
        });
        if k + 1 < truncation {
            x = rk4_node(tape, model, x, ev.x_dot.expect("input supplied"), u, h)?;
        }
    }
    Ok(total.expect("truncation is at least 1"))
}

/// One RK4 step on the tape given the first stage `k1 = f(x, u)`.
fn rk4_node(tape: &mut Tape, model: &BoundComposite, x: NodeId, k1: NodeId, u: NodeId, h: f64) -> Result<NodeId, TrainError> {
    let stage = |tape: &mut Tape, k: NodeId, c: f64| -> Result<NodeId, TrainError> {
        let dx = tape.scale(k, c);
        let xs = tape.add(x, dx)?;
        Ok(model.eval(tape, xs, Some(u))?.x_dot.expect("input supplied"))
    };
    let k2 = stage(tape, k1, 0.5 * h)?;
    let k3 = stage(tape, k2, 0.5 * h)?;
    let k4 = stage(tape, k3, h)?;
    let k23 = tape.add(k2, k3)?;
    let k23 = tape.scale(k23, 2.0);
    let s = tape.add(k1, k23)?;
    let s = tape.add(s, k4)?;
    let dx = tape.scale(s, h / 6.0);
    Ok(tape.add(x, dx)?)
}

/// Mean truncated simulation loss over `starts` of one dataset:
/// the weighted squared output errors summed over every start and every
/// step `k = 0..T`, divided by the number of summed terms.
pub fn subsection_loss(
    tape: &mut Tape,
    model: &BoundComposite,
    encoder: &BoundMlp,
    data: &Dataset,
    starts: &[usize],
    truncation: usize,
    lag: usize,
    norm: &Normalization,
) -> Result<NodeId, TrainError> {
    if starts.is_empty() || truncation == 0 {
        return Err(TrainError::Config("subsection loss needs at least one start and T >= 1".into()));
    }
    let batch: Vec<(usize, usize)> = starts.iter().map(|&t| (0, t)).collect();
    let sse = batch_sse(tape, model, encoder, std::slice::from_ref(data), &batch, truncation, lag, norm)?;
    Ok(tape.scale(sse, 1.0 / (starts.len() * truncation) as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Truncation length `T` in samples.
    pub truncation: usize,
    /// Encoder lag `n` in samples.
    pub lag: usize,
    pub epochs: usize,
    /// Subsections per ADAM step.
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Seed of the per-epoch shuffling.
    pub seed: u64,
    /// Stop after this many epochs without validation improvement.
    pub patience: Option<usize>,
    /// Worker threads per batch; `1` is bitwise reproducible.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { truncation: 40, lag: 5, epochs: 1000, batch_size: 64, adam: AdamConfig::default(), seed: 0, patience: None, threads: 1 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.truncation == 0 || self.lag == 0 || self.batch_size == 0 || self.threads == 0 {
            return Err(TrainError::Config("truncation, lag, batch size and threads must be at least 1".into()));
        }
        if !(self.adam.learning_rate > 0.0) {
            return Err(TrainError::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Progress of one finished epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_nrmse: Option<Vec<f64>>,
    pub elapsed_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Loss over all training subsections before the first update.
    pub initial_loss: f64,
    /// Mean loss of each epoch, accumulated while the epoch ran.
    pub train_loss: Vec<f64>,
    /// Per epoch, per output channel NRMSE averaged over validation sets.
    pub val_nrmse: Vec<Vec<f64>>,
    /// Per epoch, mean over channels and validation sets.
    pub val_score: Vec<f64>,
    /// Epoch whose parameters were retained (0-based); `None` without validation.
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
    pub wall_time_s: f64,
    pub layout: ParamLayout,
}

fn check_sets(model: &IdentifiedModel, sets: &[Dataset], cfg: &TrainConfig, offset: usize, need_windows: bool) -> Result<(), TrainError> {
    let nu = model.model.nu();
    let ts = sets.first().map(|s| s.sample_time);
    for (i, s) in sets.iter().enumerate() {
        let index = offset + i;
        s.validate().map_err(|detail| TrainError::Layout { index, detail })?;
        if s.nu() != nu || s.ny() != nu {
            return Err(TrainError::Layout { index, detail: format!("{} inputs / {} outputs for a model with {nu} ports", s.nu(), s.ny()) });
        }
        if Some(s.sample_time) != ts {
            return Err(TrainError::Layout { index, detail: "sample times differ".into() });
        }
        if need_windows && admissible(s.len(), cfg.lag, cfg.truncation).is_none() {
            return Err(TrainError::Config(format!("dataset {index} has {} samples, needs n + T = {}", s.len(), cfg.lag + cfg.truncation)));
        }
        if !need_windows && s.len() <= cfg.lag {
            return Err(TrainError::Layout { index, detail: format!("{} samples, encoder needs more than {}", s.len(), cfg.lag) });
        }
    }
    Ok(())
}

/// Sum of squared errors and its gradient w.r.t. the flattened parameters
/// of `model`, split over `threads` contiguous chunks reduced in order.
fn sse_and_gradient(
    model: &IdentifiedModel,
    sets: &[Dataset],
    batch: &[(usize, usize)],
    cfg: &TrainConfig,
    with_gradient: bool,
) -> Result<(f64, Vec<f64>), TrainError> {
    let chunk = batch.len().div_ceil(cfg.threads.max(1)).max(1);
    let run = |part: &[(usize, usize)]| -> Result<(f64, Vec<f64>), TrainError> {
        let mut tape = Tape::new();
        let bm = model.model.bind(&mut tape, with_gradient);
        let be = model.encoder.bind(&mut tape, with_gradient);
        let sse = batch_sse(&mut tape, &bm, &be, sets, part, cfg.truncation, model.lag, &model.normalization)?;
        let value = tape.scalar(sse);
        if !with_gradient || !value.is_finite() {
            return Ok((value, Vec::new()));
        }
        let grads = tape.backward(sse)?;
        let mut flat = Vec::new();
        for id in bm.leaf_ids().into_iter().chain(be.leaf_ids()) {
            flat.extend_from_slice(&grads.wrt(&tape, id).data);
        }
        Ok((value, flat))
    };
    let parts: Vec<Result<(f64, Vec<f64>), TrainError>> = if cfg.threads <= 1 || batch.len() <= chunk {
        batch.chunks(chunk).map(run).collect()
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = batch.chunks(chunk).map(|part| scope.spawn(move || run(part))).collect();
            handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
        })
    };
    let mut total = 0.0;
    let mut grad: Vec<f64> = Vec::new();
    for p in parts {
        let (v, g) = p?;
        total += v;
        if grad.is_empty() {
            grad = g;
        } else if !g.is_empty() {
            grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
    }
    Ok((total, grad))
}

fn block_norms(model: &IdentifiedModel) -> Vec<(String, f64)> {
    let mut out = Vec::new();
    model.visit("", &mut |name, m| out.push((name, m.data.iter().map(|v| v * v).sum::<f64>().sqrt())));
    out
}

/// Trains `model` in place. With validation sets the parameters of the
/// epoch with the lowest mean validation NRMSE are kept, otherwise the
/// final ones.
pub fn train(model: &mut IdentifiedModel, train_sets: &[Dataset], val_sets: &[Dataset], cfg: &TrainConfig) -> Result<TrainReport, TrainError> {
    train_with_observer(model, train_sets, val_sets, cfg, &mut |_| {})
}

pub fn train_with_observer(
    model: &mut IdentifiedModel,
    train_sets: &[Dataset],
    val_sets: &[Dataset],
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainReport, TrainError> {
    let clock = Instant::now();
    cfg.validate()?;
    model.validate()?;
    if train_sets.is_empty() {
        return Err(TrainError::NoTrainingData);
    }
    if cfg.lag != model.lag {
        return Err(TrainError::Config(format!("config lag {} differs from encoder lag {}", cfg.lag, model.lag)));
    }
    check_sets(model, train_sets, cfg, 0, true)?;
    check_sets(model, val_sets, cfg, train_sets.len(), false)?;
    if let Some(v) = val_sets.first() {
        if v.sample_time != train_sets[0].sample_time {
            return Err(TrainError::Layout { index: train_sets.len(), detail: "sample times differ".into() });
        }
    }

    let mut starts: Vec<(usize, usize)> = Vec::new();
    for (s, d) in train_sets.iter().enumerate() {
        let (lo, hi) = admissible(d.len(), cfg.lag, cfg.truncation).expect("checked above");
        starts.extend((lo..=hi).map(|t| (s, t)));
    }
    let terms_per_epoch = (starts.len() * cfg.truncation) as f64;

    let layout = ParamLayout::of(model, "");
    let mut params = flatten(model);
    let mut adam = AdamState::new(layout.clone(), cfg.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut initial = 0.0;
    for part in starts.chunks(cfg.batch_size) {
        initial += sse_and_gradient(model, train_sets, part, cfg, false)?.0;
    }
    let mut report = TrainReport {
        initial_loss: initial / terms_per_epoch,
        train_loss: Vec::new(),
        val_nrmse: Vec::new(),
        val_score: Vec::new(),
        best_epoch: None,
        stopped_early: false,
        wall_time_s: 0.0,
        layout,
    };
    let mut best: Option<(f64, Vec<f64>)> = None;

    for epoch in 0..cfg.epochs {
        starts.shuffle(&mut rng);
        let mut epoch_sse = 0.0;
        for (bi, part) in starts.chunks(cfg.batch_size).enumerate() {
            let (sse, mut grad) = sse_and_gradient(model, train_sets, part, cfg, true)?;
            if !sse.is_finite() {
                let param_norms = block_norms(model);
                let (worst_block, worst_norm) = param_norms
                    .iter()
                    .cloned()
                    .max_by(|a, b| a.1.total_cmp(&b.1))
                    .unwrap_or_default();
                return Err(TrainError::NonFiniteLoss { epoch, batch: bi, worst_block, worst_norm, param_norms });
            }
            let tau = (part.len() * cfg.truncation) as f64;
            grad.iter_mut().for_each(|g| *g /= tau);
            adam_step(&mut params, &grad, &mut adam).map_err(|source| TrainError::Optimizer { epoch, batch: bi, source })?;
            assign(model, &params);
            epoch_sse += sse;
        }
        let loss = epoch_sse / terms_per_epoch;
        report.train_loss.push(loss);

        let mut val = None;
        if !val_sets.is_empty() {
            let ny = model.model.nu();
            let mut per_channel = vec![0.0; ny];
            for v in val_sets {
                let r = evaluate_simulation(model, v)?;
                per_channel.iter_mut().zip(&r.nrmse).for_each(|(a, b)| *a += b / val_sets.len() as f64);
            }
            let score = per_channel.iter().sum::<f64>() / ny as f64;
            report.val_nrmse.push(per_channel.clone());
            report.val_score.push(score);
            if best.as_ref().is_none_or(|(b, _)| score < *b) {
                best = Some((score, params.clone()));
                report.best_epoch = Some(epoch);
            }
            val = Some(per_channel);
        }
        observer(&EpochRecord { epoch, train_loss: loss, val_nrmse: val, elapsed_s: clock.elapsed().as_secs_f64() });
        if let (Some(p), Some(b)) = (cfg.patience, report.best_epoch) {
            if epoch - b >= p {
                report.stopped_early = true;
                break;
            }
        }
    }
    if let Some((_, p)) = best {
        assign(model, &p);
    }
    report.wall_time_s = clock.elapsed().as_secs_f64();
    Ok(report)
}

/// Free-run simulation of a whole record.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationReport {
    /// First simulated sample (`= lag`).
    pub start: usize,
    /// `(N - start) × ny`; shorter when the simulation diverged.
    pub measured: Mat,
    pub simulated: Mat,
    /// `measured - simulated`
    pub error: Mat,
    pub rmse: Vec<f64>,
    pub nrmse: Vec<f64>,
    /// Sample index at which the state left the divergence bound.
    pub divergent_at: Option<usize>,
}

impl SimulationReport {
    /// Per channel, the fraction of simulated samples with
    /// `|error| ≤ half_width`.
    pub fn within_band(&self, half_width: &[f64]) -> Vec<f64> {
        (0..self.error.cols)
            .map(|c| {
                let e = self.error.column(c);
                let a = half_width.get(c).copied().unwrap_or(0.0);
                if e.is_empty() {
                    return 0.0;
                }
                e.iter().filter(|v| v.abs() <= a).count() as f64 / e.len() as f64
            })
            .collect()
    }
}

/// Encodes the state at sample `n` from the first `n` samples, then
/// simulates the rest of the record without re-encoding.
pub fn evaluate_simulation(model: &IdentifiedModel, data: &Dataset) -> Result<SimulationReport, TrainError> {
    let lag = model.lag;
    if data.len() <= lag {
        return Err(TrainError::WindowTooShort { expected: lag + 1, got: data.len() });
    }
    let ny = data.ny();
    if data.nu() != model.model.nu() || ny != model.model.nu() {
        return Err(TrainError::Layout { index: 0, detail: "channel counts do not match the model".into() });
    }
    let x0 = model.initial_state(data)?;
    let u = ZohSignal::new(data.inputs.rows_range(lag, data.len() - lag), data.sample_time)?;
    let (simulated, divergent_at) = match simulate(&model.model, &x0, &u, 1) {
        Ok(tr) => (tr.outputs, None),
        Err(SimError::Diverged { step, partial }) => (partial.outputs, Some(lag + step)),
        Err(e) => return Err(e.into()),
    };
    let rows = simulated.rows;
    let simulated = if rows == 0 { Mat::zeros(0, ny) } else { simulated };
    let measured = data.outputs.rows_range(lag, rows);
    let error = measured.zip_map(&simulated, |a, b| a - b);
    let full = data.outputs.rows_range(lag, data.len() - lag);
    let std = column_std(&full);
    let (rmse, nrmse) = if divergent_at.is_some() {
        (vec![f64::INFINITY; ny], vec![f64::INFINITY; ny])
    } else {
        let rmse: Vec<f64> = (0..ny).map(|c| (error.column(c).iter().map(|e| e * e).sum::<f64>() / rows as f64).sqrt()).collect();
        let nrmse = rmse
            .iter()
            .zip(&std)
            .map(|(&r, &s)| if s > 0.0 { r / s } else if r == 0.0 { 0.0 } else { f64::INFINITY })
            .collect();
        (rmse, nrmse)
    };
    Ok(SimulationReport { start: lag, measured, simulated, error, rmse, nrmse, divergent_at })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phs::{AnalyticSubsystem, Subsystem, SubsystemModel};

    fn quadratic_data(n: usize) -> Dataset {
        // Quadratic storage with J = R = 0 and G = I: ẋ = u, y = x.
        let ts = 0.1;
        let inputs = Mat::from_fn(n, 1, |k, _| (0.3 * k as f64).sin());
        let mut outputs = Mat::zeros(n, 1);
        let mut x = 0.0;
        for k in 0..n {
            outputs.set(k, 0, x);
            x += ts * inputs.get(k, 0);
        }
        Dataset {
            sample_time: ts,
            input_names: vec!["u".into()],
            output_names: vec!["y".into()],
            inputs,
            outputs,
            meta: Default::default(),
        }
    }

    fn toy(seed: u64) -> IdentifiedModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sub = SubsystemModel::init(2, 1, 4, 0.0, &mut rng);
        let model = CompositeModel::new(vec![Subsystem::Learned(sub)], Mat::zeros(2, 2)).unwrap();
        IdentifiedModel::new(model, 2, 6, Normalization::identity(1, 1), &mut rng)
    }

    #[test]
    fn zero_encoder_gives_zero_state() {
        let mut m = toy(1);
        m.encoder.visit_mut("", &mut |_, p| p.data.iter_mut().for_each(|v| *v = 0.0));
        let data = quadratic_data(10);
        assert_eq!(m.initial_state(&data).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn window_ordering_matters() {
        let m = toy(2);
        let u = Mat::col(&[1.0, 2.0]);
        let y = Mat::col(&[0.5, -0.5]);
        let u_swapped = Mat::col(&[2.0, 1.0]);
        let mut tape = Tape::new();
        let enc = m.encoder.bind(&mut tape, false);
        let a = encode_initial_state(&enc, &u, &y, &m.normalization, &mut tape).unwrap();
        let b = encode_initial_state(&enc, &u_swapped, &y, &m.normalization, &mut tape).unwrap();
        assert_ne!(tape.value(a), tape.value(b));
        let short = Mat::col(&[1.0]);
        assert!(matches!(
            encode_initial_state(&enc, &short, &short, &m.normalization, &mut tape),
            Err(TrainError::WindowTooShort { .. })
        ));
    }

    #[test]
    fn exact_model_has_zero_loss() {
        // Analytic y = x model, encoder returning the last measured output
        // propagated one step: x_t = y_{t-1} + T_s u_{t-1}.
        let data = quadratic_data(30);
        let model = CompositeModel::new(vec![Subsystem::Analytic(AnalyticSubsystem::Quadratic { nx: 1, nu: 1 })], Mat::zeros(1, 1)).unwrap();
        let mut encoder = MlpParams::zeros(&[2, 1], &[Activation::Linear]);
        encoder.layers[0].weight = Mat::row(&[0.1, 1.0]);
        let m = IdentifiedModel { model, encoder, lag: 1, normalization: Normalization::identity(1, 1) };
        let mut tape = Tape::new();
        let bm = m.model.bind(&mut tape, false);
        let be = m.encoder.bind(&mut tape, false);
        let loss = subsection_loss(&mut tape, &bm, &be, &data, &[1, 5, 20], 8, 1, &m.normalization).unwrap();
        assert!(tape.scalar(loss) < 1e-24, "{}", tape.scalar(loss));
        let report = evaluate_simulation(&m, &data).unwrap();
        assert!(report.rmse[0] < 1e-12);
    }

    #[test]
    fn start_range_checked() {
        let m = toy(3);
        let data = quadratic_data(20);
        let mut tape = Tape::new();
        let bm = m.model.bind(&mut tape, true);
        let be = m.encoder.bind(&mut tape, true);
        for bad in [1, 18] {
            let r = subsection_loss(&mut tape, &bm, &be, &data, &[bad], 3, 2, &m.normalization);
            assert!(matches!(r, Err(TrainError::StartOutOfRange { .. })), "{bad}");
        }
        assert!(subsection_loss(&mut tape, &bm, &be, &data, &[2, 17], 3, 2, &m.normalization).is_ok());
    }

    #[test]
    fn zero_epochs_leave_parameters() {
        let mut m = toy(4);
        let before = m.clone();
        let cfg = TrainConfig { truncation: 3, lag: 2, epochs: 0, batch_size: 4, ..Default::default() };
        let report = train(&mut m, &[quadratic_data(20)], &[], &cfg).unwrap();
        assert!(report.train_loss.is_empty());
        assert_eq!(m, before);
    }

    #[test]
    fn training_is_deterministic_and_threads_agree() {
        let data = [quadratic_data(40)];
        let cfg = TrainConfig { truncation: 4, lag: 2, epochs: 3, batch_size: 8, seed: 9, ..Default::default() };
        let run = |threads: usize| {
            let mut m = toy(5);
            let r = train(&mut m, &data, &data, &TrainConfig { threads, ..cfg.clone() }).unwrap();
            (r.train_loss, flatten(&m))
        };
        let (a, pa) = run(1);
        let (b, pb) = run(1);
        assert_eq!(a, b);
        assert_eq!(pa, pb);
        let (c, _) = run(3);
        for (x, y) in a.iter().zip(&c) {
            assert!((x - y).abs() <= 1e-10 * x.abs().max(1.0));
        }
    }

    #[test]
    fn constant_mean_prediction_has_unit_nrmse() {
        // Zero model output: NRMSE of a zero-mean signal is RMS / std = 1.
        let mut data = quadratic_data(200);
        let mean = data.outputs.sum() / 200.0;
        data.outputs = data.outputs.map(|v| v - mean);
        let model = CompositeModel::new(vec![Subsystem::Analytic(AnalyticSubsystem::Quadratic { nx: 1, nu: 1 })], Mat::zeros(1, 1)).unwrap();
        data.inputs = Mat::zeros(200, 1);
        let encoder = MlpParams::zeros(&[2, 1], &[Activation::Linear]);
        let m = IdentifiedModel { model, encoder, lag: 1, normalization: Normalization::identity(1, 1) };
        let r = evaluate_simulation(&m, &data).unwrap();
        assert!((r.nrmse[0] - 1.0).abs() < 0.02, "{}", r.nrmse[0]);
    }
}
