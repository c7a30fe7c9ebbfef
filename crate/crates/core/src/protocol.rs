//! Seeded identification experiment on the mass-spring-damper chain.

use crate::ad::Mat;
use crate::dataset::Dataset;
use crate::ode::SimError;
use crate::phs::{CompositeModel, ModelError, Subsystem, SubsystemModel};
use crate::plant::{chain_interconnection, generate_msd_dataset, MsdChainConfig, MultisineConfig};
use crate::train::{IdentifiedModel, Normalization, TrainConfig, TrainError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent stream seed for `label` under `master`.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    splitmix64(master ^ h)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    /// 100 epochs, `T = 20`, one dataset per split.
    Smoke,
    /// 1000 epochs, 5 / 2 / 1 split.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExcitationConfig {
    pub components: usize,
    pub base_frequency: f64,
    pub amplitude: f64,
    pub duration: f64,
    pub sample_rate: f64,
}

impl Default for ExcitationConfig {
    fn default() -> Self {
        ExcitationConfig { components: 40, base_frequency: 0.1, amplitude: 1.0, duration: 250.0, sample_rate: 10.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    pub seed: u64,
    pub chain: MsdChainConfig,
    pub excitation: ExcitationConfig,
    /// `None` generates noise-free data.
    pub snr_db: Option<f64>,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Hidden width of the J, R and H networks.
    pub hidden: usize,
    pub encoder_hidden: usize,
    pub h_lower_bound: f64,
    /// `train.seed` is replaced by a seed derived from `seed`.
    pub train: TrainConfig,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig::for_profile(Profile::Full, 0)
    }
}

impl ProtocolConfig {
    pub fn for_profile(profile: Profile, seed: u64) -> Self {
        let (epochs, truncation, n_train, n_val, n_test) = match profile {
            Profile::Smoke => (100, 20, 1, 1, 1),
            Profile::Full => (1000, 40, 5, 2, 1),
        };
        ProtocolConfig {
            seed,
            chain: MsdChainConfig::default(),
            excitation: ExcitationConfig::default(),
            snr_db: Some(20.0),
            n_train,
            n_val,
            n_test,
            hidden: 16,
            encoder_hidden: 64,
            h_lower_bound: 0.0,
            train: TrainConfig { epochs, truncation, ..TrainConfig::default() },
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        self.chain.validate()?;
        if self.n_train == 0 {
            return Err("at least one training dataset is required".into());
        }
        if self.hidden == 0 || self.encoder_hidden == 0 {
            return Err("network widths must be positive".into());
        }
        if self.excitation.components == 0 {
            return Err("excitation needs at least one component".into());
        }
        Ok(())
    }

    pub fn dataset_count(&self) -> usize {
        self.n_train + self.n_val + self.n_test
    }

    /// Multisine of dataset `index` with phases from the derived seed.
    pub fn excitation_for(&self, index: usize) -> MultisineConfig {
        let e = &self.excitation;
        let mut ms = MultisineConfig::random(e.components, e.base_frequency, e.duration, e.sample_rate, self.phase_seed(index));
        ms.amplitude = e.amplitude;
        ms
    }

    pub fn phase_seed(&self, index: usize) -> u64 {
        derive_seed(self.seed, &format!("dataset/{index}/phases"))
    }

    pub fn noise_seed(&self, index: usize) -> u64 {
        derive_seed(self.seed, &format!("dataset/{index}/noise"))
    }

    pub fn init_seed(&self) -> u64 {
        derive_seed(self.seed, "init")
    }

    pub fn shuffle_seed(&self) -> u64 {
        derive_seed(self.seed, "shuffle")
    }

    /// Training configuration with the derived shuffling seed.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.shuffle_seed(), ..self.train.clone() }
    }
}

/// Generated datasets, in train / validation / test order.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Vec<Dataset>,
    pub val: Vec<Dataset>,
    pub test: Vec<Dataset>,
}

pub fn generate_dataset(cfg: &ProtocolConfig, index: usize) -> Result<Dataset, SimError> {
    let ms = cfg.excitation_for(index);
    let mut d = generate_msd_dataset(&cfg.chain, &ms, cfg.snr_db, cfg.noise_seed(index))?;
    d.meta.seeds.insert("master".into(), cfg.seed);
    d.meta.seeds.insert("phases".into(), cfg.phase_seed(index));
    d.meta.seeds.insert("index".into(), index as u64);
    Ok(d)
}

pub fn generate_splits(cfg: &ProtocolConfig) -> Result<Splits, SimError> {
    cfg.validate().map_err(SimError::Invalid)?;
    let mut all = (0..cfg.dataset_count()).map(|i| generate_dataset(cfg, i)).collect::<Result<Vec<_>, _>>()?;
    let test = all.split_off(cfg.n_train + cfg.n_val);
    let val = all.split_off(cfg.n_train);
    Ok(Splits { train: all, val, test })
}

/// Chain of learned two-state subsystems with the known chain coupling.
/// The coupling fixes the second state of each member as its momentum, so
/// the force input starts as the unit vector on that row.
pub fn learned_chain(cfg: &ProtocolConfig, rng: &mut ChaCha8Rng) -> Result<CompositeModel, ModelError> {
    let n = cfg.chain.count();
    let subs = (0..n)
        .map(|_| {
            let mut s = SubsystemModel::init(2, 1, cfg.hidden, cfg.h_lower_bound, rng);
            s.g = Mat::col(&[0.0, 1.0]);
            Subsystem::Learned(s)
        })
        .collect();
    CompositeModel::new(subs, chain_interconnection(n))
}

/// Untrained model with normalization from the training sets.
pub fn initial_model(cfg: &ProtocolConfig, train: &[Dataset]) -> Result<IdentifiedModel, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed());
    let model = learned_chain(cfg, &mut rng)?;
    let norm = Normalization::from_datasets(train)?;
    Ok(IdentifiedModel::new(model, cfg.train.lag, cfg.encoder_hidden, norm, &mut rng))
}

/// Known interconnection as a matrix, for reporting.
pub fn interconnection(cfg: &ProtocolConfig) -> Mat {
    chain_interconnection(cfg.chain.count())
}
