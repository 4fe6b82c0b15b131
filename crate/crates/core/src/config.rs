//! Flat `key = value` experiment files.
//!
//! Blank lines and text after `#` are ignored. Every key has a default;
//! unknown keys are errors. Relative paths are taken relative to the working
//! directory of the process.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{load_graph, split_edges, EdgeSplit, Graph, LoadReport};
use crate::tensor::Tensor;
use crate::train::{TrainConfig, TRAIN_KEYS};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureSource {
    /// The feature file, or the identity matrix when none is given.
    File,
    Identity,
    /// Rows of the training adjacency (held-out edges excluded).
    TrainAdjacency,
}

impl std::fmt::Display for FeatureSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FeatureSource::File => "file",
            FeatureSource::Identity => "identity",
            FeatureSource::TrainAdjacency => "train_adjacency",
        })
    }
}

impl std::str::FromStr for FeatureSource {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "file" => Ok(FeatureSource::File),
            "identity" => Ok(FeatureSource::Identity),
            "train_adjacency" => Ok(FeatureSource::TrainAdjacency),
            _ => Err(format!(
                "unknown feature_source '{s}' (file, identity or train_adjacency)"
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub edges: Option<PathBuf>,
    pub features: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub feature_source: FeatureSource,
    pub row_normalize: bool,
    pub val_frac: f64,
    pub test_frac: f64,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            edges: None,
            features: None,
            labels: None,
            feature_source: FeatureSource::File,
            row_normalize: false,
            val_frac: 0.05,
            test_frac: 0.10,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

/// Keys specific to experiments, in addition to [`TRAIN_KEYS`].
pub const EXPERIMENT_KEYS: &[(&str, &str)] = &[
    ("edges", "edge list file (required for training)"),
    ("features", "feature file; empty means none"),
    ("labels", "label file; empty means none"),
    ("feature_source", "file, identity or train_adjacency"),
    ("row_normalize", "divide each feature row by its sum"),
    ("val_frac", "fraction of edges held out for validation"),
    ("test_frac", "fraction of edges held out for testing"),
    ("out_dir", "directory for checkpoints and records"),
];

fn opt_path(v: &str) -> Option<PathBuf> {
    let v = v.trim();
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref()
        .map(|p| p.display().to_string())
        .unwrap_or_default()
}

fn parse_field<T: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.trim()
        .parse()
        .map_err(|e| format!("{key}: cannot parse '{v}': {e}"))
}

impl ExperimentConfig {
    pub fn all_keys() -> impl Iterator<Item = &'static (&'static str, &'static str)> {
        TRAIN_KEYS.iter().chain(EXPERIMENT_KEYS)
    }

    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        match key {
            "edges" => self.edges = opt_path(value),
            "features" => self.features = opt_path(value),
            "labels" => self.labels = opt_path(value),
            "feature_source" => self.feature_source = value.trim().parse()?,
            "row_normalize" => self.row_normalize = parse_field(key, value)?,
            "val_frac" => self.val_frac = parse_field(key, value)?,
            "test_frac" => self.test_frac = parse_field(key, value)?,
            "out_dir" => self.out_dir = PathBuf::from(value.trim()),
            _ => self.train.set(key, value)?,
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "edges" => show_path(&self.edges),
            "features" => show_path(&self.features),
            "labels" => show_path(&self.labels),
            "feature_source" => self.feature_source.to_string(),
            "row_normalize" => self.row_normalize.to_string(),
            "val_frac" => self.val_frac.to_string(),
            "test_frac" => self.test_frac.to_string(),
            "out_dir" => self.out_dir.display().to_string(),
            _ => return self.train.get(key),
        })
    }

    /// Parses a config text on top of the defaults, reporting every bad line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut errors = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            match line.split_once('=') {
                Some((k, v)) => {
                    if let Err(e) = cfg.set(k.trim(), v.trim()) {
                        errors.push(format!("line {}: {e}", i + 1));
                    }
                }
                None => errors.push(format!("line {}: expected key = value", i + 1)),
            }
        }
        if errors.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(errors.join("; ")))
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Applies `key=value` overrides, reporting every bad one.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        let mut errors = Vec::new();
        for o in overrides {
            let o = o.as_ref();
            match o.split_once('=') {
                Some((k, v)) => {
                    if let Err(e) = self.set(k.trim(), v.trim()) {
                        errors.push(e);
                    }
                }
                None => errors.push(format!("override '{o}' is not key=value")),
            }
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errors.join("; ")))
        }
    }

    /// Every violated constraint, including missing inputs.
    pub fn problems(&self) -> Vec<String> {
        let mut p = self.train.problems();
        if self.edges.is_none() {
            p.push("edges is required".into());
        }
        if !(0.0..1.0).contains(&self.val_frac)
            || !(0.0..1.0).contains(&self.test_frac)
            || self.val_frac + self.test_frac >= 1.0
        {
            p.push(format!(
                "val_frac={} and test_frac={} must be non-negative and sum below 1",
                self.val_frac, self.test_frac
            ));
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p.join("; ")))
        }
    }

    /// Resolved configuration, one `key = value` line per key.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, _) in Self::all_keys() {
            let _ = writeln!(out, "{k} = {}", self.get(k).unwrap_or_default());
        }
        out
    }

    /// Short hex digest of [`ExperimentConfig::to_text`] without `seed` and
    /// `out_dir`, so repeated runs of one configuration share a hash.
    pub fn hash(&self) -> String {
        let text: String = self
            .to_text()
            .lines()
            .filter(|l| !l.starts_with("seed =") && !l.starts_with("out_dir ="))
            .map(|l| format!("{l}\n"))
            .collect();
        let digest = Sha256::digest(text.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Loads the graph named by the configuration.
    pub fn load_graph(&self) -> Result<(Graph, LoadReport)> {
        let edges = self
            .edges
            .as_deref()
            .ok_or_else(|| Error::Config("edges is required".into()))?;
        let features = match self.feature_source {
            FeatureSource::File => self.features.as_deref(),
            _ => None,
        };
        let (mut g, report) = load_graph(edges, features, self.labels.as_deref())?;
        if self.row_normalize {
            g.row_normalize_features();
        }
        Ok((g, report))
    }

    /// Splits the graph and installs the configured features on the
    /// training graph.
    pub fn split(&self, g: &Graph) -> Result<EdgeSplit> {
        let mut split = split_edges(g, self.val_frac, self.test_frac, self.train.seed)?;
        match self.feature_source {
            FeatureSource::File => {}
            FeatureSource::Identity => {
                split.train.features = Tensor::identity(g.num_nodes());
            }
            FeatureSource::TrainAdjacency => {
                split.train.features = split.train.adjacency();
                if self.row_normalize {
                    split.train.row_normalize_features();
                }
            }
        }
        Ok(split)
    }
}

/// Cartesian product of value lists over `base`, first axis varying slowest.
pub fn grid(
    base: &ExperimentConfig,
    axes: &[(String, Vec<String>)],
) -> Result<Vec<ExperimentConfig>> {
    let mut out = vec![base.clone()];
    for (key, values) in axes {
        if values.is_empty() {
            return Err(Error::Config(format!("sweep axis '{key}' has no values")));
        }
        let mut next = Vec::with_capacity(out.len() * values.len());
        for cfg in &out {
            for v in values {
                let mut c = cfg.clone();
                c.set(key, v).map_err(Error::Config)?;
                next.push(c);
            }
        }
        out = next;
    }
    Ok(out)
}

/// Parses `key=v1,v2,...` sweep axes.
pub fn parse_axis(spec: &str) -> Result<(String, Vec<String>)> {
    let (k, v) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("sweep axis '{spec}' is not key=v1,v2")))?;
    Ok((
        k.trim().to_string(),
        v.split(',').map(|s| s.trim().to_string()).collect(),
    ))
}
