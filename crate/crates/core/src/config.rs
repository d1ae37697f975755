//! Pipeline configuration: built-in defaults, overlaid by a TOML file,
//! overlaid by `key=value` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{Error, Result};
use crate::localize::PnpConfig;
use crate::render::RenderConfig;
use crate::synth::SynthConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    #[serde(flatten)]
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub render: RenderConfig,
    pub pnp: PnpConfig,
}

impl PipelineConfig {
    /// Defaults < `file` < `overrides` (each `dotted.key=value`; the value is
    /// read as a TOML literal, falling back to a bare string).
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut user = Table::new();
        if let Some(path) = file {
            if !path.exists() {
                return Err(Error::MissingFile(path.to_path_buf()));
            }
            let text = std::fs::read_to_string(path)?;
            let table: Table = toml::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))?;
            merge(&mut user, table);
        }
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            let key = key.trim();
            if key.is_empty() || key.split('.').any(str::is_empty) {
                return Err(Error::Config(format!("override `{o}` has an empty key")));
            }
            let value = parse_literal(raw.trim());
            let mut leaf = Table::new();
            let mut parts: Vec<&str> = key.split('.').collect();
            let last = parts.pop().expect("non-empty key");
            leaf.insert(last.to_string(), value);
            let nested = parts
                .iter()
                .rev()
                .fold(leaf, |inner, p| Table::from_iter([(p.to_string(), Value::Table(inner))]));
            merge(&mut user, nested);
        }
        Self::from_table(user)
    }

    fn from_table(user: Table) -> Result<Self> {
        let mut tree = Table::try_from(Self::default()).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut tree, user.clone());
        let cfg: Self = tree.try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        // Keys the structs silently dropped are typos.
        let round = Table::try_from(&cfg).map_err(|e| Error::Config(e.to_string()))?;
        check_known(&user, &round, "")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: Table = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        Self::from_table(table)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.render.validate()?;
        if !(self.pnp.threshold_px > 0.0) || self.pnp.max_iters == 0 {
            return Err(Error::Config("pnp.threshold_px and pnp.max_iters must be positive".into()));
        }
        Ok(())
    }
}

fn parse_literal(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn check_known(user: &Table, known: &Table, prefix: &str) -> Result<()> {
    for (k, v) in user {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (known.get(k), v) {
            (None, _) => return Err(Error::Config(format!("unknown configuration key `{path}`"))),
            (Some(Value::Table(kt)), Value::Table(ut)) => check_known(ut, kt, &path)?,
            _ => {}
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence_is_defaults_then_file_then_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "seed = 11\n[gating]\neta = 0.5\ngamma = 0.9\n").unwrap();
        let cfg = PipelineConfig::load(Some(&path), &["gating.eta=0.05".into()]).unwrap();
        assert_eq!(cfg.train.seed, 11);
        assert_eq!(cfg.train.router.eta, 0.05);
        assert_eq!(cfg.train.router.gamma, 0.9);
        assert_eq!(cfg.train.router.tau_end, PipelineConfig::default().train.router.tau_end);
    }

    #[test]
    fn overrides_parse_literals() {
        let cfg = PipelineConfig::load(
            None,
            &[
                "experts=8".into(),
                "gating.load_balancing=false".into(),
                "gating.hidden=[32, 16]".into(),
                "synth.scene.repeated_texture=[0, 1]".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.train.experts, 8);
        assert!(!cfg.train.router.load_balancing);
        assert_eq!(cfg.train.router.hidden, vec![32, 16]);
        assert_eq!(cfg.synth.scene.repeated_texture, Some([0, 1]));
    }

    #[test]
    fn unknown_and_invalid_keys_are_rejected() {
        for bad in ["gating.etaa=1", "nope=1", "render.head.chanels=3", "gating.gamma=2.0", "experts=abc", "seed"] {
            assert!(
                matches!(PipelineConfig::load(None, &[bad.into()]), Err(Error::Config(_))),
                "{bad} accepted"
            );
        }
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            PipelineConfig::load(Some(&dir.path().join("missing.toml")), &[]),
            Err(Error::MissingFile(_))
        ));
    }

    #[test]
    fn toml_and_json_round_trip() {
        let mut cfg = PipelineConfig::default();
        cfg.train.seed = 42;
        cfg.render.lambda = 0.3;
        let text = cfg.to_toml().unwrap();
        assert_eq!(PipelineConfig::from_toml_str(&text).unwrap(), cfg);
        let json = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<PipelineConfig>(&json).unwrap(), cfg);
    }
}
