//! Run configuration: every model key plus data, output and command keys,
//! in one flat `key = value` file.

use std::path::{Path, PathBuf};

use awg_core::data::{Fill, SplitRatios};
use awg_core::model::ModelConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FillMode {
    Zero,
    Interp,
}

impl From<FillMode> for Fill {
    fn from(f: FillMode) -> Fill {
        match f {
            FillMode::Zero => Fill::ZeroAfterNorm,
            FillMode::Interp => Fill::LinearInterp,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunOptions {
    /// `synth` or a CSV path.
    pub data: String,
    pub out: String,
    /// Empty means `<out>/checkpoint.awg`.
    pub checkpoint: String,
    pub train_ratio: f64,
    pub val_ratio: f64,
    pub test_ratio: f64,
    pub train_stride: usize,
    pub eval_stride: usize,
    pub eval_horizons: Vec<usize>,
    /// MCAR rate applied to evaluation inputs.
    pub mcar: f64,
    pub mcar_fill: FillMode,
    pub synth_len: usize,
    pub synth_channels: usize,
    pub synth_seed: u64,
    /// `test` for the first test window, or a CSV whose first `T` rows are used.
    pub inspect_input: String,
    pub probe_count: usize,
    pub bench_lengths: Vec<usize>,
    pub bench_repeats: usize,
    pub bench_levels: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            data: "synth".into(),
            out: "out".into(),
            checkpoint: String::new(),
            train_ratio: 0.6,
            val_ratio: 0.2,
            test_ratio: 0.2,
            train_stride: 1,
            eval_stride: 8,
            eval_horizons: vec![8, 16, 32],
            mcar: 0.0,
            mcar_fill: FillMode::Zero,
            synth_len: 4000,
            synth_channels: 1,
            synth_seed: 0,
            inspect_input: "test".into(),
            probe_count: 19,
            bench_lengths: vec![256, 512, 1024, 2048],
            bench_repeats: 5,
            bench_levels: 3,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub run: RunOptions,
}

fn table_of<T: Serialize>(v: &T) -> toml::Table {
    toml::Table::try_from(v).expect("flat structs serialize to a table")
}

impl RunConfig {
    /// Parses a flat config; keys belong either to the model or to the run,
    /// anything else is rejected.
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| CliError::Usage(format!("config: {e}")))?;
        let model_keys = table_of(&ModelConfig::default());
        let run_keys = table_of(&RunOptions::default());
        let mut model = toml::Table::new();
        let mut run = toml::Table::new();
        for (k, v) in table {
            if model_keys.contains_key(&k) {
                model.insert(k, v);
            } else if run_keys.contains_key(&k) {
                run.insert(k, v);
            } else {
                return Err(CliError::Usage(format!("config: unknown key {k:?}")));
            }
        }
        let model = model.try_into().map_err(|e: toml::de::Error| CliError::Usage(format!("config: {e}")))?;
        let run = run.try_into().map_err(|e: toml::de::Error| CliError::Usage(format!("config: {e}")))?;
        Ok(RunConfig { model, run })
    }

    pub fn to_toml(&self) -> String {
        let mut t = table_of(&self.model);
        t.extend(table_of(&self.run));
        toml::to_string(&t).expect("table serializes")
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Applies one `key=value` override, parsed with the same rules as the file.
    pub fn set(&mut self, assignment: &str) -> Result<(), CliError> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("override {assignment:?} is not key=value")))?;
        let key = key.trim();
        let mut t = toml::Table::try_from(&self.model).expect("serializes");
        t.extend(table_of(&self.run));
        if !t.contains_key(key) {
            return Err(CliError::Usage(format!("unknown key {key:?}")));
        }
        let parsed: toml::Table = format!("{key} = {}", value.trim())
            .parse()
            .or_else(|_| format!("{key} = {:?}", value.trim()).parse())
            .map_err(|e: toml::de::Error| CliError::Usage(format!("override {key}: {e}")))?;
        t.extend(parsed);
        *self = Self::from_toml(&toml::to_string(&t).expect("table serializes"))?;
        Ok(())
    }

    pub fn ratios(&self) -> SplitRatios {
        SplitRatios {
            train: self.run.train_ratio,
            val: self.run.val_ratio,
            test: self.run.test_ratio,
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(&self.run.out)
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        if self.run.checkpoint.is_empty() {
            self.out_dir().join("checkpoint.awg")
        } else {
            PathBuf::from(&self.run.checkpoint)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_covers_every_key() {
        let mut cfg = RunConfig::default();
        cfg.model.levels = 2;
        cfg.run.eval_horizons = vec![4, 8];
        let text = cfg.to_toml();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
        assert!(text.contains("lambda1 = ") && text.contains("synth_len = "));
    }

    #[test]
    fn unknown_and_mistyped_keys_are_rejected() {
        assert!(matches!(RunConfig::from_toml("warmup = 3"), Err(CliError::Usage(m)) if m.contains("warmup")));
        assert!(RunConfig::from_toml("levels = \"three\"").is_err());
        assert!(RunConfig::from_toml("[section]\nlevels = 3").is_err());
    }

    #[test]
    fn overrides_parse_like_the_file() {
        let mut cfg = RunConfig::default();
        cfg.set("levels=2").unwrap();
        cfg.set("data = some/file.csv").unwrap();
        cfg.set("eval_horizons=[4]").unwrap();
        cfg.set("mcar_fill=interp").unwrap();
        assert_eq!(cfg.model.levels, 2);
        assert_eq!(cfg.run.data, "some/file.csv");
        assert_eq!(cfg.run.eval_horizons, vec![4]);
        assert_eq!(cfg.run.mcar_fill, FillMode::Interp);
        assert!(cfg.set("nope=1").is_err());
        assert!(cfg.set("levels").is_err());
    }

    #[test]
    fn checkpoint_defaults_into_output_dir() {
        let mut cfg = RunConfig::default();
        cfg.run.out = "runs/x".into();
        assert_eq!(cfg.checkpoint_path(), PathBuf::from("runs/x/checkpoint.awg"));
        cfg.run.checkpoint = "elsewhere.awg".into();
        assert_eq!(cfg.checkpoint_path(), PathBuf::from("elsewhere.awg"));
    }
}
