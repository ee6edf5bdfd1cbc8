//! Layered pipeline configuration: defaults, then a TOML file, then
//! `section.key=value` overrides, then command-line flags.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::chunk::DetectorConfig;
use crate::cluster::ClusterConfig;
use crate::cursor::{Rect, TraceConfig};
use crate::error::{Error, Result};
use crate::instruct::Quotas;
use crate::llm::ClientConfig;
use crate::synth::Tolerances;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IoConfig {
    /// Distractor rectangles masked during cursor extraction, in pixels.
    pub mask: Vec<Rect>,
    /// Optional mean-luma bound for the chunk content filter.
    pub min_mean_luma: Option<f64>,
    /// Drop captions outside the 20..=150 word range.
    pub filter_captions: bool,
}

impl Default for IoConfig {
    fn default() -> Self {
        IoConfig {
            mask: Vec::new(),
            min_mean_luma: None,
            filter_captions: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Single source of randomness; copied into every stage that samples.
    pub rng_seed: u64,
    /// Worker threads; 0 means one per logical CPU.
    pub jobs: usize,
    pub detector: DetectorConfig,
    pub trace: TraceConfig,
    pub cluster: ClusterConfig,
    pub client: ClientConfig,
    pub quotas: Quotas,
    pub verify: Tolerances,
    pub io: IoConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            rng_seed: 0,
            jobs: 0,
            detector: DetectorConfig::default(),
            trace: TraceConfig::default(),
            cluster: ClusterConfig::default(),
            client: ClientConfig::default(),
            quotas: Quotas::default(),
            verify: Tolerances::default(),
            io: IoConfig::default(),
        }
    }
}

/// Command-line values that sit on top of the file and `--set` layers.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FlagOverrides {
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
}

impl PipelineConfig {
    pub fn load(file: Option<&Path>, sets: &[String], flags: &FlagOverrides) -> Result<Self> {
        let mut value = toml::Value::try_from(PipelineConfig::default())
            .map_err(|e| Error::Config(format!("serializing defaults: {e}")))?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let layer: toml::Value = text
                .parse::<toml::Table>()
                .map(toml::Value::Table)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            merge(&mut value, layer, "")?;
        }
        for s in sets {
            apply_set(&mut value, s)?;
        }
        let mut cfg: PipelineConfig = value
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        if let Some(seed) = flags.seed {
            cfg.rng_seed = seed;
        }
        if let Some(jobs) = flags.jobs {
            cfg.jobs = jobs;
        }
        cfg.detector.rng_seed = cfg.rng_seed;
        cfg.cluster.rng_seed = cfg.rng_seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.detector.validate()?;
        self.cluster.validate()?;
        if !(0.0..=1.0).contains(&self.trace.min_active_fraction) {
            return Err(Error::Config("trace.min_active_fraction must lie in [0, 1]".into()));
        }
        if self.client.max_in_flight == 0 {
            return Err(Error::Config("client.max_in_flight must be positive".into()));
        }
        Ok(())
    }

    pub fn effective_jobs(&self) -> usize {
        if self.jobs > 0 {
            self.jobs
        } else {
            std::thread::available_parallelism().map_or(1, |n| n.get())
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Keys that are absent from the serialized defaults because they are unset.
const OPTIONAL_KEYS: &[&str] = &["min_mean_luma"];

fn merge(base: &mut toml::Value, layer: toml::Value, path: &str) -> Result<()> {
    match (base, layer) {
        (toml::Value::Table(b), toml::Value::Table(l)) => {
            for (k, v) in l {
                let key_path = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(&k) {
                    Some(existing) => merge(existing, v, &key_path)?,
                    None if OPTIONAL_KEYS.contains(&k.as_str()) => {
                        b.insert(k, v);
                    }
                    None => return Err(Error::Config(format!("unknown config key {key_path:?}"))),
                }
            }
        }
        (b, l) => *b = l,
    }
    Ok(())
}

/// Apply one `a.b.c=value` override. The value is read as a TOML literal,
/// falling back to a bare string.
fn apply_set(root: &mut toml::Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("--set expects key=value, got {assignment:?}")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("bad key path {path:?}")));
    }
    let parsed = format!("v = {}", raw.trim())
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let mut node = root;
    for key in &keys[..keys.len() - 1] {
        node = node
            .as_table_mut()
            .and_then(|t| t.get_mut(*key))
            .ok_or_else(|| Error::Config(format!("unknown config section {key:?} in {path:?}")))?;
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| Error::Config(format!("{path:?} does not name a table entry")))?;
    let last = keys[keys.len() - 1];
    if !table.contains_key(last) && !OPTIONAL_KEYS.contains(&last) {
        return Err(Error::Config(format!("unknown config key {path:?}")));
    }
    table.insert(last.to_string(), parsed);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = PipelineConfig::default();
        let text = cfg.to_toml().unwrap();
        let back: PipelineConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn layers_apply_in_order() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "rng_seed = 3\n[detector]\nmin_duration_s = 4.0\n[cluster]\nk_max = 5").unwrap();
        let sets = vec!["cluster.k_max=6".to_string(), "client.model=local".to_string()];
        let flags = FlagOverrides {
            seed: Some(9),
            jobs: Some(2),
        };
        let cfg = PipelineConfig::load(Some(f.path()), &sets, &flags).unwrap();
        assert_eq!(cfg.detector.min_duration_s, 4.0);
        assert_eq!(cfg.cluster.k_max, 6);
        assert_eq!(cfg.client.model, "local");
        assert_eq!(cfg.rng_seed, 9);
        assert_eq!(cfg.detector.rng_seed, 9);
        assert_eq!(cfg.cluster.rng_seed, 9);
        assert_eq!(cfg.jobs, 2);
        assert_eq!(cfg.trace, TraceConfig::default());
    }

    #[test]
    fn file_without_flags_keeps_file_seed() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "rng_seed = 3").unwrap();
        let cfg = PipelineConfig::load(Some(f.path()), &[], &FlagOverrides::default()).unwrap();
        assert_eq!(cfg.rng_seed, 3);
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        for bad in ["detector.nope=1", "nosuch.key=1", "novalue", "trace.tau=\"x\""] {
            let err = PipelineConfig::load(None, &[bad.to_string()], &FlagOverrides::default()).unwrap_err();
            assert_eq!(err.exit_code(), 1, "{bad}");
        }
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "[detector]\nbogus = 1").unwrap();
        let err = PipelineConfig::load(Some(f.path()), &[], &FlagOverrides::default()).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn invalid_values_rejected() {
        let err = PipelineConfig::load(None, &["detector.gauss_block=4".into()], &FlagOverrides::default())
            .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = PipelineConfig::load(Some(Path::new("/no/such/cfg.toml")), &[], &FlagOverrides::default())
            .unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
