use crate::error::CliError;
use phnn::plant::MsdChainConfig;
use phnn::protocol::{ExcitationConfig, Profile, ProtocolConfig};
use phnn::train::TrainConfig;
use phnn::transfer::TransferConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Contents of an experiment TOML file. Every key is optional; missing keys
/// take the defaults of the selected profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub profile: Profile,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub plant: MsdChainConfig,
    pub signal: SignalConfig,
    pub split: SplitConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub transfer: TransferConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignalConfig {
    pub components: usize,
    pub base_frequency: f64,
    pub amplitude: f64,
    pub duration: f64,
    pub sample_rate: f64,
    pub snr_db: f64,
    /// Skip measurement noise entirely.
    pub noiseless: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: usize,
    pub encoder_hidden: usize,
    pub h_lower_bound: f64,
}

impl ExperimentConfig {
    pub fn for_profile(profile: Profile, seed: u64) -> Self {
        let p = ProtocolConfig::for_profile(profile, seed);
        ExperimentConfig {
            seed,
            profile,
            out: None,
            plant: p.chain,
            signal: SignalConfig {
                components: p.excitation.components,
                base_frequency: p.excitation.base_frequency,
                amplitude: p.excitation.amplitude,
                duration: p.excitation.duration,
                sample_rate: p.excitation.sample_rate,
                snr_db: p.snr_db.unwrap_or(20.0),
                noiseless: p.snr_db.is_none(),
            },
            split: SplitConfig { train: p.n_train, val: p.n_val, test: p.n_test },
            model: ModelConfig { hidden: p.hidden, encoder_hidden: p.encoder_hidden, h_lower_bound: p.h_lower_bound },
            train: p.train,
            transfer: TransferConfig::default(),
        }
    }

    pub fn protocol(&self) -> ProtocolConfig {
        ProtocolConfig {
            seed: self.seed,
            chain: self.plant.clone(),
            excitation: ExcitationConfig {
                components: self.signal.components,
                base_frequency: self.signal.base_frequency,
                amplitude: self.signal.amplitude,
                duration: self.signal.duration,
                sample_rate: self.signal.sample_rate,
            },
            snr_db: (!self.signal.noiseless).then_some(self.signal.snr_db),
            n_train: self.split.train,
            n_val: self.split.val,
            n_test: self.split.test,
            hidden: self.model.hidden,
            encoder_hidden: self.model.encoder_hidden,
            h_lower_bound: self.model.h_lower_bound,
            train: self.train.clone(),
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| CliError::Validation(format!("config: {m}"));
        self.protocol().validate().map_err(bad)?;
        if self.split.test == 0 {
            return Err(bad("split.test must be at least 1".into()));
        }
        self.train.validate().map_err(|e| bad(e.to_string()))?;
        self.transfer.gas.validate().map_err(bad)?;
        if self.transfer.subsystem >= self.plant.count() {
            return Err(bad(format!("transfer.subsystem {} out of range for {} masses", self.transfer.subsystem, self.plant.count())));
        }
        let samples = (self.signal.duration * self.signal.sample_rate).round() as usize;
        if self.train.lag + self.train.truncation > samples {
            return Err(bad(format!("train.lag + train.truncation exceeds the {samples} samples per dataset")));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// Overrides from the command line.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub profile: Option<Profile>,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_table() && v.is_table() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

/// Profile defaults, then the file (if any), then command-line overrides.
pub fn load(path: Option<&Path>, ov: &Overrides) -> Result<ExperimentConfig, CliError> {
    let file: toml::Value = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))?;
            toml::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))?
        }
        None => toml::Value::Table(Default::default()),
    };
    let file_profile = match file.get("profile") {
        Some(v) => Some(
            Profile::deserialize(v.clone()).map_err(|e| CliError::Validation(format!("config field `profile`: {e}")))?,
        ),
        None => None,
    };
    let profile = ov.profile.or(file_profile).unwrap_or(Profile::Full);
    let mut merged = toml::Value::try_from(ExperimentConfig::for_profile(profile, 0)).expect("defaults serialize");
    merge(&mut merged, file);
    let mut cfg: ExperimentConfig = serde_path_to_error::deserialize(merged)
        .map_err(|e| CliError::Validation(format!("config field `{}`: {}", e.path(), e.inner())))?;
    cfg.profile = profile;
    if let Some(s) = ov.seed {
        cfg.seed = s;
    }
    if let Some(o) = &ov.out {
        cfg.out = Some(o.clone());
    }
    if let Some(t) = ov.threads {
        cfg.train.threads = t;
    }
    cfg.validate()?;
    Ok(cfg)
}
