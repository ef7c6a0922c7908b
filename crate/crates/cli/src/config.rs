use std::path::Path;

use refsnake::InitialMeasure;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Experiment parameters read from TOML and command-line overrides.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub epsilon: f64,
    #[serde(default = "default_initial")]
    pub initial: InitialMeasure,
    #[serde(default = "one")]
    pub horizon: f64,
    /// Observation step; defaults to `eps^2 / 50` for `localtime` and to
    /// `horizon / 100` elsewhere.
    pub dt: Option<f64>,
    #[serde(default = "one_usize")]
    pub replicas: usize,
    pub seed: Option<u64>,
    /// Anchor or observation time.
    pub t: Option<f64>,
    /// Descendant lag for `feller`.
    pub r: Option<f64>,
    pub deltas: Option<Vec<f64>>,
    pub z_grid: Option<Vec<f64>>,
    /// Interval `A = [low, high)`.
    pub interval: Option<[f64; 2]>,
    #[serde(default = "default_c_fraction")]
    pub c_fraction: f64,
    pub lambdas: Option<Vec<f64>>,
    pub bandwidth: Option<f64>,
    /// Fine observation step on `[t, t + max delta]` for `scaling`.
    pub fine_dt: Option<f64>,
    pub gamma_range: Option<[f64; 2]>,
    pub forests: Option<usize>,
    #[serde(default = "default_fine_epsilon")]
    pub fine_epsilon: f64,
    pub n_particles: Option<usize>,
    pub density: Option<f64>,
}

fn default_initial() -> InitialMeasure {
    InitialMeasure::Uniform {
        mass: 1.0,
        low: 0.0,
        high: 1.0,
    }
}

fn one() -> f64 {
    1.0
}

fn one_usize() -> usize {
    1
}

fn default_c_fraction() -> f64 {
    0.2
}

fn default_fine_epsilon() -> f64 {
    0.01
}

/// Flags handled by clap; every other `--key value` pair is a config
/// override.
pub const RESERVED: &[&str] = &["config", "out", "seed", "jobs", "epsilon", "replicas", "set", "help", "version"];

/// Parses an override value as a TOML literal, falling back to a string.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<(), String> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|k| !k.is_empty()).ok_or(format!("empty key {key:?}"))?;
    let mut cur = table;
    for p in parts {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| format!("{p} is not a table"))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Loads the config file (if any) and applies `key=value` overrides.
/// Without `needs_epsilon` a missing epsilon defaults to 1.
pub fn load(
    path: Option<&Path>,
    overrides: &[(String, String)],
    needs_epsilon: bool,
) -> Result<ExperimentConfig, String> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| format!("cannot read config {}: {e}", p.display()))?;
            text.parse::<toml::Table>()
                .map_err(|e| format!("invalid TOML in {}: {e}", p.display()))?
        }
        None => toml::Table::new(),
    };
    for (k, v) in overrides {
        set_path(&mut table, k, parse_value(v))?;
    }
    if !table.contains_key("epsilon") && !needs_epsilon {
        table.insert("epsilon".into(), toml::Value::Float(1.0));
    }
    if !table.contains_key("epsilon") {
        return Err("epsilon is required (config file or --epsilon)".into());
    }
    toml::Value::Table(table)
        .try_into::<ExperimentConfig>()
        .map_err(|e| format!("invalid config: {e}"))
}

impl ExperimentConfig {
    pub fn validate(&self, embedding: bool) -> Result<(), String> {
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return Err(format!("epsilon must lie in (0, 1], got {}", self.epsilon));
        }
        if self.replicas < 1 {
            return Err("replicas must be at least 1".into());
        }
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return Err(format!("horizon must be positive, got {}", self.horizon));
        }
        if let Some(dt) = self.dt {
            if !(dt > 0.0) {
                return Err(format!("dt must be positive, got {dt}"));
            }
            let limit = self.epsilon * self.epsilon / 50.0;
            if embedding && dt > limit * (1.0 + 1e-9) {
                return Err(format!(
                    "dt = {dt} violates dt <= epsilon^2/50 = {limit} required for the contour embedding"
                ));
            }
        }
        if self.seed.is_none() {
            return Err("a seed is required (--seed or seed in the config)".into());
        }
        if !(self.c_fraction >= 0.0) {
            return Err("c_fraction must be nonnegative".into());
        }
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        self.seed.expect("validated")
    }

    pub fn dt_or(&self, default: f64) -> f64 {
        self.dt.unwrap_or(default)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_and_literals() {
        let o = vec![
            ("epsilon".to_string(), "0.1".to_string()),
            ("seed".to_string(), "7".to_string()),
            ("deltas".to_string(), "[0.1, 0.01]".to_string()),
            ("initial.kind".to_string(), "atoms".to_string()),
            ("initial.positions".to_string(), "[0.5]".to_string()),
        ];
        let c = load(None, &o, true).unwrap();
        assert_eq!(c.epsilon, 0.1);
        assert_eq!(c.seed, Some(7));
        assert_eq!(c.deltas, Some(vec![0.1, 0.01]));
        assert_eq!(c.initial, InitialMeasure::Atoms { positions: vec![0.5] });
        c.validate(false).unwrap();
    }

    #[test]
    fn embedding_constraint_named() {
        let o = vec![
            ("epsilon".to_string(), "0.1".to_string()),
            ("seed".to_string(), "1".to_string()),
            ("dt".to_string(), "0.01".to_string()),
        ];
        let c = load(None, &o, true).unwrap();
        assert!(c.validate(false).is_ok());
        let e = c.validate(true).unwrap_err();
        assert!(e.contains("epsilon^2/50"), "{e}");
    }

    #[test]
    fn hash_tracks_content() {
        let base = vec![
            ("epsilon".to_string(), "0.1".to_string()),
            ("seed".to_string(), "1".to_string()),
        ];
        let a = load(None, &base, true).unwrap();
        let mut more = base.clone();
        more.push(("seed".to_string(), "2".to_string()));
        let b = load(None, &more, true).unwrap();
        assert_eq!(a.hash(), load(None, &base, true).unwrap().hash());
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
