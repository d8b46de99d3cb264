use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::client::ClientConfig;
use crate::datagen::PartitionKind;
use crate::encoder::{Activation, DescStyle, EncoderConfig};
use crate::error::{Error, Result};
use crate::numerics::SimKind;
use crate::objectives::ObjectiveConfig;
use crate::server::{AggregationMode, ServerConfig};

/// Which parameters score the per-client local test sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalEvalMode {
    /// Final query aggregation recomputed with each client's own weight,
    /// then spliced.
    AggregatedWithSelf,
    /// The client's own final uploaded deltas.
    RawLocal,
    /// `RawLocal` for pathological partitions, `AggregatedWithSelf`
    /// otherwise.
    #[default]
    Auto,
}

impl LocalEvalMode {
    pub fn resolve(self, partition: PartitionKind) -> Self {
        match (self, partition) {
            (Self::Auto, PartitionKind::Path { .. }) => Self::RawLocal,
            (Self::Auto, _) => Self::AggregatedWithSelf,
            (m, _) => m,
        }
    }
}

impl std::str::FromStr for LocalEvalMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "aggregated_with_self" => Ok(Self::AggregatedWithSelf),
            "raw_local" => Ok(Self::RawLocal),
            "auto" => Ok(Self::Auto),
            other => Err(Error::Config(format!("unknown local_eval_mode {other:?}"))),
        }
    }
}

/// Everything that defines a run. Serialized flat so that every key can be
/// set from a TOML file or a `--key value` flag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Global rounds `T`.
    pub rounds: usize,
    pub num_clients: usize,
    pub local_epochs: usize,
    pub tau: f64,
    pub mu: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub rank: usize,
    pub lora_start: usize,
    pub boundary_m: usize,
    pub gamma: f64,
    pub ex_query: bool,
    pub sim_kind: SimKind,
    pub desc_style: DescStyle,
    pub upload_ratio: f64,
    pub text_epochs: usize,
    #[serde(serialize_with = "display", deserialize_with = "parse")]
    pub partition: PartitionKind,
    pub local_eval_mode: LocalEvalMode,
    pub seed: u64,
    /// Run client updates on the rayon pool.
    pub parallel: bool,

    pub num_classes: usize,
    pub d_in: usize,
    /// Minimum distance between class means, in units of `noise_std`.
    pub separation: f64,
    pub noise_std: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub num_blocks: usize,
    pub d_hidden: usize,
    pub d_embed: usize,
    pub backbone_gain: f64,
    pub desc_variants: usize,
    /// Weight of the class-mean direction in each description anchor; the
    /// rest is a random direction.
    pub desc_alignment: f64,
    /// Spread of description variants around their anchor.
    pub desc_spread: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            rounds: 10,
            num_clients: 5,
            local_epochs: 1,
            tau: 2.66,
            mu: 0.1,
            lr: 1e-3,
            batch_size: 64,
            rank: 4,
            lora_start: 2,
            boundary_m: 9,
            gamma: 0.25,
            ex_query: true,
            sim_kind: SimKind::Cosine,
            desc_style: DescStyle::Gt,
            upload_ratio: 1.0,
            text_epochs: 1,
            partition: PartitionKind::Dir { alpha: 0.1 },
            local_eval_mode: LocalEvalMode::Auto,
            seed: 0,
            parallel: true,
            num_classes: 10,
            d_in: 16,
            separation: 6.0,
            noise_std: 1.0,
            train_per_class: 200,
            test_per_class: 50,
            num_blocks: 12,
            d_hidden: 32,
            d_embed: 16,
            backbone_gain: 0.2,
            desc_variants: 4,
            desc_alignment: 0.1,
            desc_spread: 0.4,
        }
    }
}

fn display<S: Serializer>(p: &PartitionKind, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_str(p)
}

fn parse<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<PartitionKind, D::Error> {
    let s = String::deserialize(d)?;
    s.parse().map_err(serde::de::Error::custom)
}

impl RunConfig {
    /// Four Gaussian classes, one per client, ten rounds.
    pub fn smoke() -> Self {
        Self {
            num_clients: 4,
            num_classes: 4,
            partition: PartitionKind::Path { classes_per_client: 1 },
            ..Self::default()
        }
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            num_blocks: self.num_blocks,
            d_in: self.d_in,
            d_hidden: self.d_hidden,
            d_embed: self.d_embed,
            activation: Activation::Tanh,
            lora_start: self.lora_start,
            rank: self.rank,
            gamma: self.gamma,
        }
    }

    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig { tau: self.tau, mu: self.mu, sim_kind: SimKind::Cosine }
    }

    pub fn client_config(&self) -> ClientConfig {
        ClientConfig {
            local_epochs: self.local_epochs,
            batch_size: self.batch_size,
            objective: self.objective(),
            upload_ratio: self.upload_ratio,
            lr: self.lr,
        }
    }

    pub fn server_config(&self, mode: AggregationMode) -> ServerConfig {
        ServerConfig {
            boundary_m: self.boundary_m,
            ex_query: self.ex_query,
            sim_kind: self.sim_kind,
            text_epochs: self.text_epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            objective: self.objective(),
            mode,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |msg: String| Err(Error::Config(msg));
        if self.num_clients == 0 {
            return cfg("num_clients must be at least 1".into());
        }
        if self.ex_query && self.num_clients < 2 {
            return cfg("ex_query needs at least two clients".into());
        }
        if self.num_classes < 2 {
            return cfg("num_classes must be at least 2".into());
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return cfg("train_per_class and test_per_class must be positive".into());
        }
        if !(self.separation >= 0.0 && self.noise_std >= 0.0) {
            return cfg("separation and noise_std must be nonnegative".into());
        }
        if !(self.backbone_gain > 0.0 && self.backbone_gain.is_finite()) {
            return cfg(format!("backbone_gain must be positive, got {}", self.backbone_gain));
        }
        if !(0.0..=1.0).contains(&self.desc_alignment) {
            return cfg(format!("desc_alignment must lie in [0, 1], got {}", self.desc_alignment));
        }
        if !(self.desc_spread >= 0.0) {
            return cfg("desc_spread must be nonnegative".into());
        }
        if self.desc_style == DescStyle::Gt && self.desc_variants < 2 {
            return cfg("gt descriptions need desc_variants >= 2".into());
        }
        if self.text_epochs > 0 && self.batch_size == 0 {
            return cfg("batch_size must be at least 1".into());
        }
        match self.partition {
            PartitionKind::Dir { alpha } if !(alpha > 0.0 && alpha.is_finite()) => {
                return cfg(format!("dirichlet alpha must be positive, got {alpha}"));
            }
            PartitionKind::Path { classes_per_client }
                if classes_per_client == 0 || classes_per_client > self.num_classes =>
            {
                return cfg(format!("path partition needs 1..={} classes per client", self.num_classes));
            }
            _ => {}
        }
        let enc = self.encoder_config();
        enc.validate().map_err(|e| Error::Config(e.to_string()))?;
        let (l, m, depth) = (self.lora_start, self.boundary_m, self.num_blocks);
        if m < l || m > depth + 1 {
            return cfg(format!("boundary_m={m} must lie in [{l}, {}]", depth + 1));
        }
        self.client_config().validate()
    }

    /// Parses a flat TOML document; absent keys keep their defaults.
    pub fn from_toml(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        Self::from_table(table)
    }

    /// Like [`RunConfig::from_toml`] with `key = value` overrides applied on
    /// top. Override values are read as TOML literals, falling back to bare
    /// strings.
    pub fn from_toml_with(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for (key, raw) in overrides {
            table.insert(key.replace('-', "_"), override_value(raw));
        }
        Self::from_table(table)
    }

    fn from_table(table: toml::Table) -> Result<Self> {
        let cfg: Self = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes to TOML")
    }
}

fn override_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
