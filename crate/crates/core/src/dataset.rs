use crate::ad::Mat;
use std::collections::BTreeMap;

/// Uniformly sampled input/output record.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub sample_time: f64,
    pub input_names: Vec<String>,
    pub output_names: Vec<String>,
    /// `N × nu`
    pub inputs: Mat,
    /// `N × ny`
    pub outputs: Mat,
    pub meta: DatasetMeta,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetMeta {
    /// Named seeds used to produce the record, e.g. `phases`, `noise`.
    pub seeds: BTreeMap<String, u64>,
    pub snr_target_db: Option<f64>,
    /// Per output channel.
    pub snr_achieved_db: Vec<f64>,
    /// Half-width of the uniform noise per output channel.
    pub noise_half_width: Vec<f64>,
    pub plant_digest: Option<String>,
    pub reference: Option<NoiseReference>,
    pub notes: BTreeMap<String, String>,
}

/// Noise-free outputs and the exact noise realization added to them.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseReference {
    pub clean: Mat,
    pub noise: Mat,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.outputs.rows
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.rows == 0
    }

    pub fn nu(&self) -> usize {
        self.inputs.cols
    }

    pub fn ny(&self) -> usize {
        self.outputs.cols
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.sample_time > 0.0 && self.sample_time.is_finite()) {
            return Err(format!("sample time must be positive, got {}", self.sample_time));
        }
        if self.inputs.rows != self.outputs.rows {
            return Err(format!("{} input rows vs {} output rows", self.inputs.rows, self.outputs.rows));
        }
        if self.input_names.len() != self.inputs.cols || self.output_names.len() != self.outputs.cols {
            return Err("channel names do not match column counts".into());
        }
        let mut seen = std::collections::HashSet::new();
        for n in self.input_names.iter().chain(&self.output_names) {
            if n.is_empty() || n.contains([',', '\n', '\r']) {
                return Err(format!("invalid channel name {n:?}"));
            }
            if !seen.insert(n) {
                return Err(format!("duplicate channel name {n:?}"));
            }
        }
        if let Some(r) = &self.meta.reference {
            if r.clean.shape() != self.outputs.shape() || r.noise.shape() != self.outputs.shape() {
                return Err("noise reference shape does not match outputs".into());
            }
        }
        Ok(())
    }

    /// Sample `k` of every output channel.
    pub fn output_row(&self, k: usize) -> &[f64] {
        self.outputs.row_slice(k)
    }

    pub fn input_row(&self, k: usize) -> &[f64] {
        self.inputs.row_slice(k)
    }

    /// Per-channel standard deviation of the measured outputs.
    pub fn output_std(&self) -> Vec<f64> {
        column_std(&self.outputs)
    }
}

pub(crate) fn column_mean(m: &Mat) -> Vec<f64> {
    (0..m.cols).map(|c| (0..m.rows).map(|r| m.get(r, c)).sum::<f64>() / m.rows.max(1) as f64).collect()
}

pub(crate) fn column_std(m: &Mat) -> Vec<f64> {
    let mean = column_mean(m);
    (0..m.cols)
        .map(|c| {
            let var = (0..m.rows).map(|r| (m.get(r, c) - mean[c]).powi(2)).sum::<f64>() / m.rows.max(1) as f64;
            var.sqrt()
        })
        .collect()
}
