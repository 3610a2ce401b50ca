//! Experiment configuration: a TOML file with `[env]`, `[algo]` and
//! `[train]` sections.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::action_space::LayoutKind;
use crate::algos::hyper::{AblationFlags, UMappoHyperparameters, UQmixHyperparameters};
use crate::algos::train::TrainConfig;
use crate::envs::{Environment, ObsMode, PropositionConfig, PropositionGame, Skirmish, SkirmishConfig};
use crate::error::{Error, Result};

/// Environment variable that roots every relative output directory.
pub const OUTPUT_ROOT_VAR: &str = "UAS_OUTPUT_ROOT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Mappo,
    Qmix,
}

/// A trainer family plus ablation flags, named like `u-qmix`, `qmix`,
/// `qmix+uas`, `qmix+cgi`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Algorithm {
    pub family: Family,
    pub flags: AblationFlags,
}

impl Algorithm {
    /// The four ablation variants of a family, in curve order.
    pub fn ablation_matrix(family: Family) -> [Algorithm; 4] {
        let f = |use_uas, use_cgi| Algorithm {
            family,
            flags: AblationFlags { use_uas, use_cgi },
        };
        [f(false, false), f(true, false), f(false, true), f(true, true)]
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let base = match self.family {
            Family::Mappo => "mappo",
            Family::Qmix => "qmix",
        };
        match (self.flags.use_uas, self.flags.use_cgi) {
            (true, true) => write!(f, "u-{base}"),
            (false, false) => write!(f, "{base}"),
            (true, false) => write!(f, "{base}+uas"),
            (false, true) => write!(f, "{base}+cgi"),
        }
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (full, rest) = match s.strip_prefix("u-") {
            Some(r) => (true, r),
            None => (false, s),
        };
        let (base, suffix) = match rest.split_once('+') {
            Some((b, x)) => (b, Some(x)),
            None => (rest, None),
        };
        let family = match base {
            "mappo" => Family::Mappo,
            "qmix" => Family::Qmix,
            _ => return Err(Error::Config(format!("unknown algorithm `{s}`"))),
        };
        let flags = match (full, suffix) {
            (true, None) => AblationFlags::FULL,
            (false, None) => AblationFlags::BASE,
            (false, Some("uas")) => AblationFlags { use_uas: true, use_cgi: false },
            (false, Some("cgi")) => AblationFlags { use_uas: false, use_cgi: true },
            _ => return Err(Error::Config(format!("unknown algorithm `{s}`"))),
        };
        Ok(Self { family, flags })
    }
}

impl Serialize for Algorithm {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Algorithm {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvKind {
    Proposition,
    Skirmish,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSection {
    pub kind: EnvKind,
    /// Must agree with every algorithm's layout when given.
    #[serde(default)]
    pub layout: Option<LayoutKind>,
    /// Append a one-hot agent index to agent inputs; defaults to on for the
    /// overlapped skirmish layout and off otherwise.
    #[serde(default)]
    pub agent_id: Option<bool>,
    #[serde(default)]
    pub proposition: Option<PropositionConfig>,
    #[serde(default)]
    pub skirmish: Option<SkirmishConfig>,
}

impl EnvSection {
    pub fn validate(&self) -> Result<()> {
        match self.kind {
            EnvKind::Proposition => {
                if self.skirmish.is_some() {
                    return Err(Error::Config("[env.skirmish] given for a proposition environment".into()));
                }
                if self.agent_id == Some(true) {
                    return Err(Error::Config(
                        "agent_id is not available for the proposition game; use obs_mode".into(),
                    ));
                }
                self.proposition.clone().unwrap_or_default().validate()
            }
            EnvKind::Skirmish => {
                if self.proposition.is_some() {
                    return Err(Error::Config("[env.proposition] given for a skirmish environment".into()));
                }
                self.skirmish.clone().unwrap_or_default().validate()
            }
        }
    }

    pub fn build(&self, layout: LayoutKind) -> Result<Box<dyn Environment>> {
        Ok(match self.kind {
            EnvKind::Proposition => Box::new(PropositionGame::new(
                self.proposition.clone().unwrap_or_default(),
                layout,
            )?),
            EnvKind::Skirmish => Box::new(Skirmish::new(self.skirmish.clone().unwrap_or_default(), layout)?),
        })
    }

    pub fn agent_id(&self, layout: LayoutKind) -> bool {
        match self.kind {
            EnvKind::Proposition => false,
            EnvKind::Skirmish => self.agent_id.unwrap_or(layout == LayoutKind::Overlapped),
        }
    }

    pub fn obs_mode(&self) -> Option<ObsMode> {
        match self.kind {
            EnvKind::Proposition => Some(self.proposition.clone().unwrap_or_default().obs_mode),
            EnvKind::Skirmish => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgoSection {
    /// Each entry trains separately and gets its own curve files.
    pub algorithms: Vec<Algorithm>,
    #[serde(default)]
    pub mappo: UMappoHyperparameters,
    #[serde(default)]
    pub qmix: UQmixHyperparameters,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Label only; not part of the hash.
    #[serde(default)]
    pub name: String,
    pub seeds: Vec<u64>,
    /// Relative paths resolve against `UAS_OUTPUT_ROOT` (or the working
    /// directory). Not part of the hash.
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    pub env: EnvSection,
    pub algo: AlgoSection,
    #[serde(default)]
    pub train: TrainConfig,
}

fn default_output() -> PathBuf {
    PathBuf::from("runs")
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Checks every section, collecting all violations.
    pub fn validate(&self) -> Result<()> {
        let mut v = Vec::new();
        let mut push = |r: Result<()>| {
            if let Err(e) = r {
                v.push(e.to_string());
            }
        };
        if self.seeds.is_empty() {
            push(Err(Error::Config("seeds must be non-empty".into())));
        }
        let mut dedup = self.seeds.clone();
        dedup.sort_unstable();
        dedup.dedup();
        if dedup.len() != self.seeds.len() {
            push(Err(Error::Config("seeds must be distinct".into())));
        }
        if self.algo.algorithms.is_empty() {
            push(Err(Error::Config("algo.algorithms must be non-empty".into())));
        }
        push(self.env.validate());
        push(self.train.validate());
        if self.algo.algorithms.iter().any(|a| a.family == Family::Mappo) {
            push(self.algo.mappo.validate());
        }
        if self.algo.algorithms.iter().any(|a| a.family == Family::Qmix) {
            push(self.algo.qmix.validate());
        }
        if let Some(layout) = self.env.layout {
            for a in &self.algo.algorithms {
                if a.flags.layout() != layout {
                    push(Err(Error::Config(format!("{a} needs the {:?} layout", a.flags.layout()))));
                }
            }
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v.join("; ")))
        }
    }

    /// SHA-256 over the canonical JSON form of every semantic field, with
    /// defaults filled in; key order in the file does not matter.
    pub fn hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = value.as_object_mut() {
            obj.remove("name");
            obj.remove("output_dir");
        }
        let canonical = serde_json::to_string(&value).expect("value serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    /// Where this configuration's runs are written.
    pub fn run_root(&self) -> PathBuf {
        let base = if self.output_dir.is_absolute() {
            self.output_dir.clone()
        } else {
            match std::env::var_os(OUTPUT_ROOT_VAR) {
                Some(root) => PathBuf::from(root).join(&self.output_dir),
                None => self.output_dir.clone(),
            }
        };
        base.join(&self.hash()[..12])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        seeds = [1, 2]
        [env]
        kind = "proposition"
        [algo]
        algorithms = ["u-qmix", "qmix"]
    "#;

    #[test]
    fn names_round_trip() {
        for name in ["u-mappo", "mappo", "mappo+uas", "mappo+cgi", "u-qmix", "qmix", "qmix+uas", "qmix+cgi"] {
            let a: Algorithm = name.parse().unwrap();
            assert_eq!(a.to_string(), name);
        }
        assert!("u-qmix+cgi".parse::<Algorithm>().is_err());
        assert!("vdn".parse::<Algorithm>().is_err());
    }

    #[test]
    fn defaults_fill_in() {
        let c = ExperimentConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(c.train.eval_interval, 10_000);
        assert_eq!(c.train.eval_episodes, 32);
        assert_eq!(c.algo.qmix.batch_size, 32);
    }

    #[test]
    fn violations_are_collected() {
        let bad = r#"
            seeds = []
            [env]
            kind = "skirmish"
            layout = "overlapped"
            [algo]
            algorithms = ["u-qmix"]
            [algo.qmix]
            buffer_size = 8
        "#;
        let msg = ExperimentConfig::from_toml(bad).unwrap_err().to_string();
        assert!(msg.contains("seeds"), "{msg}");
        assert!(msg.contains("buffer_size"), "{msg}");
        assert!(msg.contains("layout"), "{msg}");
    }

    #[test]
    fn hash_ignores_order_and_labels() {
        let a = ExperimentConfig::from_toml(MINIMAL).unwrap();
        let reordered = r#"
            name = "other label"
            output_dir = "elsewhere"
            [algo]
            algorithms = ["u-qmix", "qmix"]
            [env]
            kind = "proposition"
        "#;
        let b = ExperimentConfig::from_toml(&format!("seeds = [1, 2]\n{reordered}")).unwrap();
        assert_eq!(a.hash(), b.hash());
        let explicit_default = MINIMAL.replace("[algo]", "[algo]\nqmix = { lr = 3e-4 }");
        assert_eq!(a.hash(), ExperimentConfig::from_toml(&explicit_default).unwrap().hash());
        let changed = MINIMAL.replace("[algo]", "[algo]\nqmix = { lr = 1e-3 }");
        assert_ne!(a.hash(), ExperimentConfig::from_toml(&changed).unwrap().hash());
        let seeds = MINIMAL.replace("[1, 2]", "[1, 3]");
        assert_ne!(a.hash(), ExperimentConfig::from_toml(&seeds).unwrap().hash());
    }
}
