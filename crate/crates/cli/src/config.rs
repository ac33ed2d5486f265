//! Run configuration: one JSON document covering data, model, training,
//! evaluation and ablation switches. Missing fields take their defaults.

use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use ssft::ablation::Ablation;
use ssft::datagen::GeneratorConfig;
use ssft::evaluator::Direction;
use ssft::extractor::ModelConfig;
use ssft::losses::TrainConfig;
use ssft::trainer::Schedule;
use ssft::{Result, SsftError};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds parameter init and batch sampling. The data seed lives in `generator`.
    pub seed: u64,
    pub generator: GeneratorConfig,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub eval: EvalConfig,
    pub ablation: Ablation,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub loss: TrainConfig,
    pub schedule: Schedule,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    All,
    Single,
}

impl EvalMode {
    pub fn name(self) -> &'static str {
        match self {
            EvalMode::All => "all",
            EvalMode::Single => "single",
        }
    }
}

/// An auxiliary-set size as written by the user: a count, a percentage of
/// the query set, or every query.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SizeSpec {
    Count(usize),
    Percent(f64),
    All,
}

impl SizeSpec {
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || SsftError::config(format!("bad auxiliary size '{s}' (use N, P% or all)"));
        if s == "all" {
            return Ok(SizeSpec::All);
        }
        if let Some(p) = s.strip_suffix('%') {
            let p: f64 = p.trim().parse().map_err(|_| bad())?;
            return if p > 0.0 && p <= 100.0 {
                Ok(SizeSpec::Percent(p))
            } else {
                Err(bad())
            };
        }
        match s.parse::<usize>() {
            Ok(n) if n >= 1 => Ok(SizeSpec::Count(n)),
            _ => Err(bad()),
        }
    }

    pub fn parse_list(list: &str) -> Result<Vec<Self>> {
        let sizes = list
            .split(',')
            .filter(|p| !p.trim().is_empty())
            .map(SizeSpec::parse)
            .collect::<Result<Vec<_>>>()?;
        if sizes.is_empty() {
            return Err(SsftError::config("no auxiliary sizes given"));
        }
        Ok(sizes)
    }

    /// Query count for a query set of `n_query`, rounded and clamped to `1..=n_query`.
    pub fn resolve(self, n_query: usize) -> usize {
        let n = match self {
            SizeSpec::Count(n) => n,
            SizeSpec::Percent(p) => (p / 100.0 * n_query as f64).round() as usize,
            SizeSpec::All => n_query,
        };
        n.clamp(1, n_query.max(1))
    }
}

impl fmt::Display for SizeSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SizeSpec::Count(n) => write!(f, "{n}"),
            SizeSpec::Percent(p) => write!(f, "{p}%"),
            SizeSpec::All => f.write_str("all"),
        }
    }
}

impl Serialize for SizeSpec {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            SizeSpec::Count(n) => s.serialize_u64(*n as u64),
            _ => s.serialize_str(&self.to_string()),
        }
    }
}

impl<'de> Deserialize<'de> for SizeSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let text = match serde_json::Value::deserialize(d)? {
            serde_json::Value::String(s) => s,
            serde_json::Value::Number(n) => n.to_string(),
            other => other.to_string(),
        };
        SizeSpec::parse(&text).map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Neighbors kept per row and block of the test-time affinity.
    pub k: usize,
    pub modes: Vec<EvalMode>,
    pub direction: Direction,
    pub aux_sizes: Vec<SizeSpec>,
    pub aux_trials: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            k: 4,
            modes: vec![EvalMode::All, EvalMode::Single],
            direction: Direction::R2I,
            aux_sizes: vec![
                SizeSpec::Count(1),
                SizeSpec::Percent(25.0),
                SizeSpec::Percent(50.0),
                SizeSpec::All,
            ],
            aux_trials: 5,
        }
    }
}

impl EvalConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.k == 0 {
            v.push("eval.k must be >= 1".into());
        }
        if self.modes.is_empty() {
            v.push("eval.modes must name at least one mode".into());
        }
        if self.aux_sizes.is_empty() {
            v.push("eval.aux_sizes must name at least one size".into());
        }
        if self.aux_trials == 0 {
            v.push("eval.aux_trials must be >= 1".into());
        }
        v
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| {
            SsftError::config(format!("cannot read config {}: {e}", path.display()))
        })?;
        serde_json::from_str(&text)
            .map_err(|e| SsftError::config(format!("config {}: {e}", path.display())))
    }

    /// Every problem with the configuration, not just the first.
    pub fn violations(&self) -> Vec<String> {
        let mut v = self.generator.violations();
        v.extend(self.model.violations());
        v.extend(self.train.loss.violations());
        v.extend(self.train.schedule.violations());
        v.extend(self.eval.violations());
        v.extend(self.ablation.violations());
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(SsftError::Config(v))
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
