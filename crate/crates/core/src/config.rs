//! Run configuration: one TOML file, dotted-path overrides, fully resolved
//! before anything runs.
//!
//! ```toml
//! out_dir = "runs/zara1"
//!
//! [data]
//! root = "/data/ethucy"        # empty: $TRAJFORMER_DATA_ROOT, then "."
//! format = "ethucy_world"
//! train = ["eth.txt", "hotel.txt"]
//! test = ["zara1.txt"]
//!
//! [model]
//! mode = "regression_tf"
//! d_model = 128
//!
//! [train]
//! epochs = 50
//! seed = 7
//!
//! [eval]
//! protocol = "best_of_n"
//! samples = 20
//! ```
//!
//! Leave-one-out runs list every dataset under `[data.datasets]` and name the
//! test one with `data.held_out`; `train` and `test` are then ignored.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{
    loo_split, make_windows, parse_annotations, read_windows_jsonl, AnnotationFormat, Dataset, DropPolicy,
    ForecastWindow, Trajectory, WindowSpec,
};
use crate::error::{Error, Result};
use crate::evaluator::Protocol;
use crate::model::{Mode, ModelConfig};
use crate::trainer::{LossKind, TrainConfig};

/// Environment variable holding the default data root.
pub const DATA_ROOT_ENV: &str = "TRAJFORMER_DATA_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub root: String,
    pub format: AnnotationFormat,
    /// Annotation files (`.txt`) or window files (`.jsonl`).
    pub train: Vec<String>,
    pub test: Vec<String>,
    pub datasets: BTreeMap<String, Vec<String>>,
    pub held_out: Option<String>,
    pub t_obs: usize,
    pub t_pred: usize,
    pub stride: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            root: String::new(),
            format: AnnotationFormat::TrajnetWorld,
            train: Vec::new(),
            test: Vec::new(),
            datasets: BTreeMap::new(),
            held_out: None,
            t_obs: 8,
            t_pred: 12,
            stride: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub mode: Mode,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub pe_base: f64,
    pub max_len: usize,
    /// Classification head only.
    pub codebook_size: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let p = ModelConfig::full(Mode::RegressionTf, 1000);
        Self {
            mode: p.mode,
            d_model: p.d_model,
            n_layers: p.n_layers,
            n_heads: p.n_heads,
            d_ff: p.d_ff,
            dropout: p.dropout,
            pe_base: p.pe_base,
            max_len: p.max_len,
            codebook_size: 1000,
        }
    }
}

impl ModelSection {
    pub fn to_config(&self) -> ModelConfig {
        let mut c = ModelConfig::sized(
            self.mode,
            self.d_model,
            self.n_layers,
            self.n_heads,
            self.d_ff,
            self.codebook_size,
        )
        .with_dropout(self.dropout);
        c.pe_base = self.pe_base;
        c.max_len = self.max_len;
        c
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolName {
    Deterministic,
    BestOfN,
    Trajnet,
}

impl std::str::FromStr for ProtocolName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "deterministic" => Ok(Self::Deterministic),
            "best_of_n" => Ok(Self::BestOfN),
            "trajnet" => Ok(Self::Trajnet),
            other => Err(Error::config(
                "eval.protocol",
                format!("unknown protocol `{other}` (deterministic, best_of_n, trajnet)"),
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub protocol: ProtocolName,
    pub samples: usize,
    pub sample_seed: u64,
    /// Use argmax instead of multinomial draws inside best-of-N.
    pub greedy: bool,
    pub horizons: Vec<usize>,
    /// Numbers of dropped observations for the missing-data ablation.
    pub drops: Vec<usize>,
    pub fill: bool,
    /// Name written into the `dataset` column.
    pub dataset: String,
    pub baseline: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            protocol: ProtocolName::Deterministic,
            samples: 20,
            sample_seed: 0,
            greedy: false,
            horizons: vec![12, 16, 20, 24, 28, 32],
            drops: (0..=6).collect(),
            fill: true,
            dataset: "test".into(),
            baseline: true,
        }
    }
}

impl EvalSection {
    pub fn protocol(&self) -> Protocol {
        match self.protocol {
            ProtocolName::BestOfN => Protocol::BestOfN {
                samples: self.samples,
                seed: self.sample_seed,
                greedy: self.greedy,
            },
            _ => Protocol::Deterministic,
        }
    }

    /// Both drop policies for every requested count; `0` appears once.
    pub fn drop_policies(&self, t_obs: usize) -> Result<Vec<DropPolicy>> {
        let mut out = Vec::new();
        for &n in &self.drops {
            if n + 2 > t_obs {
                return Err(Error::config(
                    "eval.drops",
                    format!("cannot drop {n} of {t_obs} observations; at least 2 must remain"),
                ));
            }
            out.push(DropPolicy::MostRecentInclCurrent(n));
            if n > 0 {
                out.push(DropPolicy::MostRecentExclCurrent(n));
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub out_dir: String,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            out_dir: "runs/default".into(),
            data: DataSection::default(),
            model: ModelSection::default(),
            train: TrainConfig::default(),
            eval: EvalSection::default(),
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Set `path` (dotted) in `table` to the TOML reading of `raw`, or to the
/// plain string when it does not parse.
pub fn apply_override(table: &mut toml::Table, path: &str, raw: &str) -> Result<()> {
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::config(path, "empty key in override path"));
    }
    let mut cur = table;
    for k in &keys[..keys.len() - 1] {
        let entry = cur
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(path, format!("`{k}` is not a section")))?;
    }
    cur.insert(keys[keys.len() - 1].to_string(), parse_value(raw));
    Ok(())
}

/// The loss follows the head unless set explicitly.
fn default_loss(table: &mut toml::Table) {
    let classification = table
        .get("model")
        .and_then(|m| m.get("mode"))
        .and_then(|m| m.as_str())
        .is_some_and(|m| m == "classification_tfq");
    if let Some(train) = table
        .entry("train")
        .or_insert_with(|| toml::Value::Table(toml::Table::new()))
        .as_table_mut()
    {
        train
            .entry("loss")
            .or_insert_with(|| toml::Value::String(if classification { "cross_entropy" } else { "l2" }.into()));
    }
}

/// Dotted key of a deserialization failure, `config` at the top level.
fn field_of(path: &str) -> String {
    if path == "." {
        "config".to_string()
    } else {
        path.to_string()
    }
}

impl RunConfig {
    /// Parse TOML text, apply `key=value` overrides, validate.
    pub fn from_toml(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::config("config", e.message()))?;
        for (k, v) in overrides {
            apply_override(&mut table, k, v)?;
        }
        default_loss(&mut table);
        let cfg: RunConfig = serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
            let msg = e.inner().message().to_string();
            Error::config(field_of(&e.path().to_string()), msg)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let text = match path {
            Some(p) => fs::read_to_string(p).map_err(|e| Error::config("--config", format!("{}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.to_config().validate()?;
        self.train.validate()?;
        let want = if self.model.mode.is_classification() {
            LossKind::CrossEntropy
        } else {
            LossKind::L2
        };
        if self.train.loss != want {
            return Err(Error::config(
                "train.loss",
                format!("{:?} models train with {want:?}", self.model.mode),
            ));
        }
        let d = &self.data;
        if d.t_obs < 2 || d.t_pred == 0 || d.stride == 0 {
            return Err(Error::config("data.t_obs", "need t_obs >= 2, t_pred >= 1, stride >= 1"));
        }
        if let Some(h) = &d.held_out {
            let held: Dataset = h.parse()?;
            for name in d.datasets.keys() {
                name.parse::<Dataset>()
                    .map_err(|_| Error::config(format!("data.datasets.{name}"), "not one of the five datasets"))?;
            }
            if !d.datasets.keys().any(|n| n.parse::<Dataset>().ok() == Some(held)) {
                return Err(Error::config("data.held_out", format!("`{h}` is not listed in data.datasets")));
            }
        }
        if d.t_obs + d.t_pred.max(self.eval.horizons.iter().copied().max().unwrap_or(0)) > self.model.max_len {
            return Err(Error::config("model.max_len", "shorter than t_obs plus the longest horizon"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn data_root(&self) -> PathBuf {
        if !self.data.root.is_empty() {
            return PathBuf::from(&self.data.root);
        }
        std::env::var_os(DATA_ROOT_ENV).map_or_else(|| PathBuf::from("."), PathBuf::from)
    }

    fn resolve(&self, file: &str) -> PathBuf {
        let p = Path::new(file);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.data_root().join(p)
        }
    }

    pub fn window_spec(&self) -> WindowSpec {
        WindowSpec {
            t_obs: self.data.t_obs,
            t_pred: self.data.t_pred,
            stride: self.data.stride,
        }
    }

    fn read_trajectories(&self, files: &[String]) -> Result<Vec<Trajectory>> {
        let mut out = Vec::new();
        for f in files {
            out.extend(parse_annotations(&self.resolve(f), self.data.format)?);
        }
        Ok(out)
    }

    /// Train and test trajectories per the data section. Window files have
    /// no trajectories; asking for them is a config error.
    pub fn trajectories(&self) -> Result<(Vec<Trajectory>, Vec<Trajectory>)> {
        let d = &self.data;
        if let Some(h) = &d.held_out {
            let mut all = BTreeMap::new();
            for (name, files) in &d.datasets {
                all.insert(name.parse::<Dataset>()?, self.read_trajectories(files)?);
            }
            return loo_split(&all, h);
        }
        if d.train.iter().chain(&d.test).any(|f| f.ends_with(".jsonl")) {
            return Err(Error::config("data.train", "window files carry no trajectories"));
        }
        Ok((self.read_trajectories(&d.train)?, self.read_trajectories(&d.test)?))
    }

    fn windows_from(&self, files: &[String], field: &str) -> Result<Vec<ForecastWindow>> {
        if files.is_empty() {
            return Err(Error::config(field, "no data files listed"));
        }
        let mut out = Vec::new();
        for f in files {
            let path = self.resolve(f);
            if f.ends_with(".jsonl") {
                out.extend(read_windows_jsonl(&path)?);
            } else {
                let trajs = parse_annotations(&path, self.data.format)?;
                out.extend(make_windows(&trajs, self.window_spec()));
            }
        }
        if out.is_empty() {
            return Err(Error::data(format!("`{field}` yields no windows")));
        }
        Ok(out)
    }

    pub fn train_windows(&self) -> Result<Vec<ForecastWindow>> {
        if self.data.held_out.is_some() {
            let (train, _) = self.trajectories()?;
            return non_empty(make_windows(&train, self.window_spec()), "data.datasets");
        }
        self.windows_from(&self.data.train, "data.train")
    }

    pub fn test_windows(&self) -> Result<Vec<ForecastWindow>> {
        if self.data.held_out.is_some() {
            let (_, test) = self.trajectories()?;
            return non_empty(make_windows(&test, self.window_spec()), "data.held_out");
        }
        self.windows_from(&self.data.test, "data.test")
    }

    /// Test windows with no future part, for exporting predictions of
    /// tracks whose continuation is unknown. Window files pass through.
    pub fn observation_windows(&self) -> Result<Vec<ForecastWindow>> {
        let mut c = self.clone();
        c.data.t_pred = 0;
        c.test_windows()
    }

    pub fn test_trajectories(&self) -> Result<Vec<Trajectory>> {
        if self.data.held_out.is_none() && self.data.test.is_empty() {
            return Err(Error::config("data.test", "no data files listed"));
        }
        Ok(self.trajectories()?.1)
    }
}

fn non_empty(w: Vec<ForecastWindow>, field: &str) -> Result<Vec<ForecastWindow>> {
    if w.is_empty() {
        return Err(Error::data(format!("`{field}` yields no windows")));
    }
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_resolves_to_defaults() {
        let c = RunConfig::from_toml("", &[]).unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(RunConfig::from_toml(&c.to_toml(), &[]).unwrap(), c);
    }

    #[test]
    fn dotted_overrides() {
        let o = vec![
            ("train.seed".to_string(), "42".to_string()),
            ("model.d_model".to_string(), "64".to_string()),
            ("data.train".to_string(), r#"["a.txt", "b.txt"]"#.to_string()),
            ("out_dir".to_string(), "runs/x".to_string()),
        ];
        let c = RunConfig::from_toml("[model]\nn_heads = 4\n", &o).unwrap();
        assert_eq!(c.train.seed, 42);
        assert_eq!(c.model.d_model, 64);
        assert_eq!(c.model.n_heads, 4);
        assert_eq!(c.data.train, vec!["a.txt", "b.txt"]);
        assert_eq!(c.out_dir, "runs/x");
    }

    #[test]
    fn errors_name_the_field() {
        match RunConfig::from_toml("[model]\nd_modle = 3\n", &[]) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "model.d_modle"),
            other => panic!("{other:?}"),
        }
        match RunConfig::from_toml("", &[("model.n_heads".into(), "7".into())]) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "model.n_heads"),
            other => panic!("{other:?}"),
        }
        match RunConfig::from_toml("", &[]).unwrap().train_windows() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "data.train"),
            other => panic!("{other:?}"),
        }
        assert!(RunConfig::from_toml("", &[("eval.protocol".into(), "fancy".into())]).is_err());
    }

    #[test]
    fn drop_policies_validate_n() {
        let e = EvalSection::default();
        assert_eq!(e.drop_policies(8).unwrap().len(), 13);
        let bad = EvalSection {
            drops: vec![7],
            ..EvalSection::default()
        };
        assert!(matches!(bad.drop_policies(8), Err(Error::Config { .. })));
    }
}
