//! Experiment configuration: flat `key = value` lines grouped under
//! `[section]` headers, `#` comments, no nesting.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use lco_core::dist::Normalization;
use lco_core::model::{Init, ModelFamily, RewardRule, ToyEnvironment, DEFAULT_MLP_INIT_SCALE};
use lco_core::trainer::{EstimatorSpec, TrainerConfig};
use lco_core::ObjectiveKind;

use crate::tables::read_table;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub struct ConfigError {
    pub path: String,
    pub line: Option<usize>,
    pub field: Option<String>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.path)?;
        if let Some(line) = self.line {
            write!(f, ":{line}")?;
        }
        if let Some(field) = &self.field {
            write!(f, ": field `{field}`")?;
        }
        write!(f, ": {}", self.message)
    }
}

#[derive(Debug, Clone)]
struct Entry {
    value: String,
    line: usize,
}

/// The parsed but untyped file.
#[derive(Debug, Clone, Default)]
pub struct RawConfig {
    path: String,
    base_dir: PathBuf,
    sections: BTreeMap<String, BTreeMap<String, Entry>>,
}

const KNOWN: &[(&str, &[&str])] = &[
    ("run", &["seed", "plot"]),
    (
        "env",
        &["vocab", "horizon", "reward", "target", "scorer_table"],
    ),
    (
        "model",
        &[
            "family",
            "width",
            "init",
            "init_scale",
            "init_seed",
            "init_logits",
        ],
    ),
    (
        "trainer",
        &[
            "objective",
            "learning_rate",
            "steps",
            "beta",
            "clip_epsilon",
            "estimator",
            "estimator_table",
            "dpo_table",
            "ref_table",
            "normalize",
            "normalize_std",
            "grad_clip_norm",
            "snapshot_interval",
            "episodes_per_step",
            "temperature",
            "top_p",
        ],
    ),
    ("dynamics", &["compare", "smoothing_window"]),
    (
        "converge",
        &[
            "family",
            "objective",
            "vocab",
            "horizon",
            "state",
            "params",
            "learning_rate",
            "beta",
            "steps",
            "advantages",
            "z_old",
        ],
    ),
];

impl RawConfig {
    pub fn parse(text: &str, path: &Path) -> Result<Self, ConfigError> {
        let mut cfg = RawConfig {
            path: path.display().to_string(),
            base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
            sections: BTreeMap::new(),
        };
        let mut section: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            if let Some(rest) = content.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .map(str::trim)
                    .filter(|n| !n.is_empty())
                    .ok_or_else(|| {
                        cfg.error(
                            Some(line),
                            None,
                            format!("malformed section header `{content}`"),
                        )
                    })?;
                if !KNOWN.iter().any(|(s, _)| *s == name) {
                    return Err(cfg.error(Some(line), None, format!("unknown section [{name}]")));
                }
                if cfg.sections.contains_key(name) {
                    return Err(cfg.error(
                        Some(line),
                        None,
                        format!("section [{name}] appears twice"),
                    ));
                }
                cfg.sections.insert(name.to_string(), BTreeMap::new());
                section = Some(name.to_string());
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(cfg.error(
                    Some(line),
                    None,
                    format!("expected `key = value`, got `{content}`"),
                ));
            };
            let key = key.trim();
            let Some(sec) = section.clone() else {
                return Err(cfg.error(
                    Some(line),
                    Some(key),
                    "key outside of any [section]".into(),
                ));
            };
            let allowed = KNOWN
                .iter()
                .find(|(s, _)| *s == sec)
                .map(|(_, k)| *k)
                .unwrap_or(&[]);
            if !allowed.contains(&key) {
                return Err(cfg.error(
                    Some(line),
                    Some(&format!("{sec}.{key}")),
                    "unknown key".into(),
                ));
            }
            let table = cfg
                .sections
                .get_mut(&sec)
                .expect("section inserted on header");
            if table.contains_key(key) {
                return Err(cfg.error(
                    Some(line),
                    Some(&format!("{sec}.{key}")),
                    "duplicate key".into(),
                ));
            }
            table.insert(
                key.to_string(),
                Entry {
                    value: value.trim().to_string(),
                    line,
                },
            );
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
            path: path.display().to_string(),
            line: None,
            field: None,
            message: format!("cannot read config: {e}"),
        })?;
        Self::parse(&text, path)
    }

    fn error(&self, line: Option<usize>, field: Option<&str>, message: String) -> ConfigError {
        ConfigError {
            path: self.path.clone(),
            line,
            field: field.map(str::to_string),
            message,
        }
    }

    pub fn has_section(&self, section: &str) -> bool {
        self.sections.contains_key(section)
    }

    fn entry(&self, section: &str, key: &str) -> Option<&Entry> {
        self.sections.get(section).and_then(|s| s.get(key))
    }

    fn missing(&self, section: &str, key: &str) -> ConfigError {
        let line = self.sections.get(section).map(|_| None).unwrap_or(None);
        self.error(
            line,
            Some(&format!("{section}.{key}")),
            "required but missing".into(),
        )
    }

    fn parse_value<T: FromStr>(&self, section: &str, key: &str, e: &Entry) -> Result<T, ConfigError>
    where
        T::Err: fmt::Display,
    {
        e.value.parse::<T>().map_err(|err| {
            self.error(
                Some(e.line),
                Some(&format!("{section}.{key}")),
                format!("cannot parse `{}`: {err}", e.value),
            )
        })
    }

    pub fn get<T: FromStr>(&self, section: &str, key: &str) -> Result<Option<T>, ConfigError>
    where
        T::Err: fmt::Display,
    {
        self.entry(section, key)
            .map(|e| self.parse_value(section, key, e))
            .transpose()
    }

    pub fn require<T: FromStr>(&self, section: &str, key: &str) -> Result<T, ConfigError>
    where
        T::Err: fmt::Display,
    {
        self.get(section, key)?
            .ok_or_else(|| self.missing(section, key))
    }

    pub fn get_or<T: FromStr>(&self, section: &str, key: &str, default: T) -> Result<T, ConfigError>
    where
        T::Err: fmt::Display,
    {
        Ok(self.get(section, key)?.unwrap_or(default))
    }

    pub fn get_bool(&self, section: &str, key: &str, default: bool) -> Result<bool, ConfigError> {
        match self.entry(section, key) {
            None => Ok(default),
            Some(e) => match e.value.to_ascii_lowercase().as_str() {
                "true" | "yes" | "on" | "1" => Ok(true),
                "false" | "no" | "off" | "0" => Ok(false),
                other => Err(self.error(
                    Some(e.line),
                    Some(&format!("{section}.{key}")),
                    format!("expected true/false, got `{other}`"),
                )),
            },
        }
    }

    /// Whitespace-separated list.
    pub fn get_list<T: FromStr>(
        &self,
        section: &str,
        key: &str,
    ) -> Result<Option<Vec<T>>, ConfigError>
    where
        T::Err: fmt::Display,
    {
        let Some(e) = self.entry(section, key) else {
            return Ok(None);
        };
        e.value
            .split_whitespace()
            .map(|item| {
                item.parse::<T>().map_err(|err| {
                    self.error(
                        Some(e.line),
                        Some(&format!("{section}.{key}")),
                        format!("cannot parse `{item}`: {err}"),
                    )
                })
            })
            .collect::<Result<Vec<_>, _>>()
            .map(Some)
    }

    /// A table file named relative to the config's directory.
    fn table(&self, section: &str, key: &str) -> Result<Option<Vec<Vec<f64>>>, ConfigError> {
        let Some(e) = self.entry(section, key) else {
            return Ok(None);
        };
        let path = self.base_dir.join(&e.value);
        read_table(&path).map(Some).map_err(|err| {
            self.error(
                Some(e.line),
                Some(&format!("{section}.{key}")),
                format!("{}: {err}", path.display()),
            )
        })
    }

    /// Error pinned to the line of `section.key` when it is present.
    pub fn field_error(&self, section: &str, key: &str, message: impl fmt::Display) -> ConfigError {
        let line = self.entry(section, key).map(|e| e.line);
        self.error(line, Some(&format!("{section}.{key}")), message.to_string())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub family: ModelFamily,
    pub init: Init,
    pub init_seed: u64,
    /// Added to the output bias after initialization.
    pub init_logits: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsSpec {
    pub compare: [ObjectiveKind; 2],
    pub smoothing_window: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvergeFamily {
    Tabular,
    Linear,
    /// An explicit random `|V| × params` Jacobian.
    Random,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergeSpec {
    pub family: ConvergeFamily,
    pub objective: ObjectiveKind,
    pub vocab: usize,
    pub horizon: usize,
    pub state: Vec<usize>,
    pub params: usize,
    pub learning_rate: f64,
    pub beta: f64,
    pub steps: usize,
    pub advantages: Option<Vec<f64>>,
    pub z_old: Option<Vec<f64>>,
}

/// Everything a run needs; together with the seed it fully determines the output.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub plot: bool,
    pub env: Option<ToyEnvironment>,
    pub model: Option<ModelSpec>,
    pub trainer: Option<TrainerConfig>,
    pub dynamics: Option<DynamicsSpec>,
    pub converge: Option<ConvergeSpec>,
}

fn parse_family(raw: &RawConfig, section: &str) -> Result<ModelFamily, ConfigError> {
    let name: String = raw.require(section, "family")?;
    let family = ModelFamily::from_str(&name).map_err(|e| raw.field_error(section, "family", e))?;
    Ok(match (family, raw.get::<usize>(section, "width")?) {
        (ModelFamily::Mlp1 { .. }, Some(width)) => ModelFamily::Mlp1 { width },
        (f, _) => f,
    })
}

fn parse_objective(raw: &RawConfig, section: &str) -> Result<ObjectiveKind, ConfigError> {
    let name: String = raw.require(section, "objective")?;
    ObjectiveKind::from_str(&name).map_err(|e| raw.field_error(section, "objective", e))
}

fn parse_env(raw: &RawConfig) -> Result<ToyEnvironment, ConfigError> {
    let vocab: usize = raw.require("env", "vocab")?;
    let horizon: usize = raw.require("env", "horizon")?;
    let kind: String = raw.get_or("env", "reward", "target".to_string())?;
    let reward = match kind.as_str() {
        "target" => {
            let target = raw
                .get_list::<usize>("env", "target")?
                .ok_or_else(|| raw.missing("env", "target"))?;
            RewardRule::TargetMatch { target }
        }
        "scorer" => {
            let rows = raw
                .table("env", "scorer_table")?
                .ok_or_else(|| raw.missing("env", "scorer_table"))?;
            RewardRule::ScorerTable { rows }
        }
        other => {
            return Err(raw.field_error(
                "env",
                "reward",
                format!("expected `target` or `scorer`, got `{other}`"),
            ))
        }
    };
    ToyEnvironment::new(vocab, horizon, reward).map_err(|e| raw.field_error("env", "vocab", e))
}

fn parse_model(raw: &RawConfig, seed: u64) -> Result<ModelSpec, ConfigError> {
    let family = parse_family(raw, "model")?;
    let init_kind: String = raw.get_or("model", "init", "uniform".to_string())?;
    let init = match init_kind.as_str() {
        "zeros" => Init::Zeros,
        "uniform" => Init::Uniform {
            scale: raw.get_or("model", "init_scale", DEFAULT_MLP_INIT_SCALE)?,
        },
        other => {
            return Err(raw.field_error(
                "model",
                "init",
                format!("expected `zeros` or `uniform`, got `{other}`"),
            ))
        }
    };
    Ok(ModelSpec {
        family,
        init,
        init_seed: raw.get_or("model", "init_seed", seed)?,
        init_logits: raw.get_list("model", "init_logits")?,
    })
}

fn parse_trainer(raw: &RawConfig, seed: u64) -> Result<TrainerConfig, ConfigError> {
    let d = TrainerConfig::default();
    let estimator_kind: String = raw.get_or("trainer", "estimator", "sparse".to_string())?;
    let estimator = match estimator_kind.as_str() {
        "sparse" => EstimatorSpec::Sparse,
        "logprob" => EstimatorSpec::DenseLogprob {
            rows: raw
                .table("trainer", "estimator_table")?
                .ok_or_else(|| raw.missing("trainer", "estimator_table"))?,
        },
        "dpo" => EstimatorSpec::DenseDpo {
            dpo_rows: raw
                .table("trainer", "dpo_table")?
                .ok_or_else(|| raw.missing("trainer", "dpo_table"))?,
            ref_rows: raw
                .table("trainer", "ref_table")?
                .ok_or_else(|| raw.missing("trainer", "ref_table"))?,
        },
        other => {
            return Err(raw.field_error(
                "trainer",
                "estimator",
                format!("expected `sparse`, `logprob` or `dpo`, got `{other}`"),
            ))
        }
    };
    let grad_clip_norm = match raw.get::<String>("trainer", "grad_clip_norm")? {
        None => None,
        Some(s) if s.eq_ignore_ascii_case("none") => None,
        Some(_) => raw.get::<f64>("trainer", "grad_clip_norm")?,
    };
    let std = raw.get_bool("trainer", "normalize_std", false)?;
    Ok(TrainerConfig {
        objective: parse_objective(raw, "trainer")?,
        learning_rate: raw.require("trainer", "learning_rate")?,
        steps: raw.require("trainer", "steps")?,
        beta: raw.get_or("trainer", "beta", d.beta)?,
        clip_epsilon: raw.get_or("trainer", "clip_epsilon", d.clip_epsilon)?,
        estimator,
        normalize: raw.get_bool("trainer", "normalize", false)?,
        normalization: if std {
            Normalization::CenterScale {
                floor: lco_core::dist::STD_FLOOR,
            }
        } else {
            Normalization::Center
        },
        grad_clip_norm,
        seed,
        snapshot_interval: raw.get_or("trainer", "snapshot_interval", d.snapshot_interval)?,
        episodes_per_step: raw.get_or("trainer", "episodes_per_step", d.episodes_per_step)?,
        temperature: raw.get_or("trainer", "temperature", d.temperature)?,
        top_p: raw.get_or("trainer", "top_p", d.top_p)?,
    })
}

fn parse_converge(raw: &RawConfig) -> Result<ConvergeSpec, ConfigError> {
    let family_name: String = raw.require("converge", "family")?;
    let family = match family_name.to_ascii_uppercase().as_str() {
        "TABULAR" => ConvergeFamily::Tabular,
        "LINEAR" => ConvergeFamily::Linear,
        "RANDOM" => ConvergeFamily::Random,
        other => {
            return Err(raw.field_error(
                "converge",
                "family",
                format!("expected TABULAR, LINEAR or RANDOM, got `{other}`"),
            ))
        }
    };
    let objective = parse_objective(raw, "converge")?;
    if !matches!(objective, ObjectiveKind::LcoMse | ObjectiveKind::LcoLch) {
        return Err(raw.field_error(
            "converge",
            "objective",
            "convergence runs support LCO_MSE and LCO_LCH only",
        ));
    }
    let vocab: usize = raw.require("converge", "vocab")?;
    let spec = ConvergeSpec {
        family,
        objective,
        vocab,
        horizon: raw.get_or("converge", "horizon", 1)?,
        state: raw.get_list("converge", "state")?.unwrap_or_default(),
        params: raw.get_or("converge", "params", 2 * vocab)?,
        learning_rate: raw.require("converge", "learning_rate")?,
        beta: raw.get_or("converge", "beta", lco_core::target::DEFAULT_BETA)?,
        steps: raw.require("converge", "steps")?,
        advantages: raw.get_list("converge", "advantages")?,
        z_old: raw.get_list("converge", "z_old")?,
    };
    for (key, list) in [("advantages", &spec.advantages), ("z_old", &spec.z_old)] {
        if let Some(l) = list {
            if l.len() != vocab {
                return Err(raw.field_error(
                    "converge",
                    key,
                    format!("expected {vocab} values, got {}", l.len()),
                ));
            }
        }
    }
    if !(spec.learning_rate >= 0.0) {
        return Err(raw.field_error("converge", "learning_rate", "must be >= 0"));
    }
    if !(spec.beta > 0.0) {
        return Err(raw.field_error("converge", "beta", "must be > 0"));
    }
    Ok(spec)
}

impl ExperimentConfig {
    pub fn from_raw(raw: &RawConfig) -> Result<Self, ConfigError> {
        let seed = raw.get_or("run", "seed", 0u64)?;
        let env = raw.has_section("env").then(|| parse_env(raw)).transpose()?;
        let model = raw
            .has_section("model")
            .then(|| parse_model(raw, seed))
            .transpose()?;
        let trainer = raw
            .has_section("trainer")
            .then(|| parse_trainer(raw, seed))
            .transpose()?;
        if let (Some(t), Some(e)) = (&trainer, &env) {
            t.validate(e)
                .map_err(|err| raw.field_error("trainer", "objective", err))?;
        }
        let dynamics = if raw.has_section("dynamics") {
            let names = raw
                .get_list::<String>("dynamics", "compare")?
                .ok_or_else(|| raw.missing("dynamics", "compare"))?;
            if names.len() != 2 {
                return Err(raw.field_error(
                    "dynamics",
                    "compare",
                    format!("expected two objectives, got {}", names.len()),
                ));
            }
            let parse = |s: &str| {
                ObjectiveKind::from_str(s).map_err(|e| raw.field_error("dynamics", "compare", e))
            };
            Some(DynamicsSpec {
                compare: [parse(&names[0])?, parse(&names[1])?],
                smoothing_window: raw.get_or("dynamics", "smoothing_window", 50)?,
            })
        } else {
            None
        };
        let converge = raw
            .has_section("converge")
            .then(|| parse_converge(raw))
            .transpose()?;
        Ok(Self {
            seed,
            plot: raw.get_bool("run", "plot", false)?,
            env,
            model,
            trainer,
            dynamics,
            converge,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::from_raw(&RawConfig::load(path)?)
    }

    /// Error for a section a subcommand needs but the file lacks.
    pub fn need<'a, T>(
        &self,
        path: &Path,
        section: &str,
        value: &'a Option<T>,
    ) -> Result<&'a T, ConfigError> {
        value.as_ref().ok_or_else(|| ConfigError {
            path: path.display().to_string(),
            line: None,
            field: Some(format!("[{section}]")),
            message: "section required by this subcommand is missing".into(),
        })
    }
}
