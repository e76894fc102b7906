//! Experiment configuration: TOML file, defaults and `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::pipeline::read_shards;
use crate::rng::{stream_rng, streams};
use crate::trainer::{LabeledSet, TrainConfig};
use crate::videogen::{generate_corpus, Corpus, GenConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StorageConfig {
    pub videos_per_shard: usize,
    /// Existing shard directory to train on instead of generating a corpus.
    pub shards: Option<PathBuf>,
    pub shot_threshold: f64,
}

impl Default for StorageConfig {
    fn default() -> Self {
        Self {
            videos_per_shard: 100,
            shards: None,
            shot_threshold: crate::pipeline::DEFAULT_THRESHOLD,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: GenConfig,
    pub storage: StorageConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        if !(self.storage.shot_threshold > 0.0) {
            return Err(Error::Config("storage.shot_threshold must be > 0".into()));
        }
        if self.storage.videos_per_shard == 0 {
            return Err(Error::Config("storage.videos_per_shard must be >= 1".into()));
        }
        self.train.validate()?;
        self.eval.validate()
    }

    /// Defaults, then the file (if any), then overrides; unknown keys are errors.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut root = toml::Table::try_from(Self::default())
            .map_err(|e| Error::Config(format!("default config does not serialize: {e}")))?;
        if let Some(path) = path {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let file: toml::Table = toml::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            merge(&mut root, file, "")?;
        }
        for ov in overrides {
            apply_override(&mut root, ov)?;
        }
        let cfg: Self = toml::Value::Table(root)
            .try_into()
            .map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Upstream corpus: the configured shard directory, or a fresh corpus.
    pub fn corpus(&self) -> Result<Corpus> {
        match &self.storage.shards {
            Some(dir) => read_shards(dir),
            None => generate_corpus(&self.data, self.seed),
        }
    }

    /// Held-out videos for downstream tasks.
    pub fn heldout(&self) -> Result<Corpus> {
        crate::eval::heldout_corpus(&self.data, &self.eval, self.seed)
    }

    /// Labeled frames for co-training, from videos disjoint from the upstream
    /// and held-out corpora.
    pub fn labeled_set(&self) -> Result<LabeledSet> {
        let cfg = GenConfig {
            videos: (self.data.classes * 16).max(self.data.classes),
            first_id: self.data.first_id + (self.data.videos + self.eval.heldout_videos) as u32,
            ..self.data.clone()
        };
        let seed = rand::Rng::gen(&mut stream_rng(self.seed, streams::LABELED, u64::MAX - 1));
        let corpus = generate_corpus(&cfg, seed)?;
        LabeledSet::from_corpus(&corpus, self.train.labeled_images, self.seed)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn merge(dst: &mut toml::Table, src: toml::Table, prefix: &str) -> Result<()> {
    for (k, v) in src {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (dst.get_mut(&k), v) {
            (Some(toml::Value::Table(d)), toml::Value::Table(s)) => merge(d, s, &path)?,
            (_, v) => {
                dst.insert(k, v);
            }
        }
    }
    Ok(())
}

fn leaf_paths(t: &toml::Table, prefix: &str, out: &mut Vec<String>) {
    for (k, v) in t {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            toml::Value::Table(inner) => leaf_paths(inner, &path, out),
            _ => out.push(path),
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Applies `dotted.path=value`. A bare key is accepted when exactly one leaf
/// carries that name.
pub fn apply_override(root: &mut toml::Table, ov: &str) -> Result<()> {
    let (key, raw) = ov
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{ov}` is not key=value")))?;
    let key = key.trim();
    let path = if key.contains('.') {
        key.to_string()
    } else {
        let mut all = Vec::new();
        leaf_paths(root, "", &mut all);
        let hits: Vec<String> = all
            .into_iter()
            .filter(|p| p == key || p.ends_with(&format!(".{key}")))
            .collect();
        match hits.len() {
            1 => hits.into_iter().next().unwrap(),
            0 => key.to_string(),
            _ => return Err(Error::Config(format!("override key `{key}` is ambiguous: {}", hits.join(", ")))),
        }
    };
    let parts: Vec<&str> = path.split('.').collect();
    let mut table = root;
    for p in &parts[..parts.len() - 1] {
        table = match table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
        {
            toml::Value::Table(t) => t,
            _ => return Err(Error::Config(format!("override path `{path}` crosses a value"))),
        };
    }
    let mut value = parse_value(raw.trim());
    if let (Some(toml::Value::Float(_)), toml::Value::Integer(i)) = (table.get(parts[parts.len() - 1]), &value) {
        value = toml::Value::Float(*i as f64);
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = ExperimentConfig::load(None, &[]).unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        let back: ExperimentConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn overrides_and_precedence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "seed = 3\n[train]\nlambda = 0.02\n").unwrap();
        let cfg = ExperimentConfig::load(Some(&path), &["lambda=0".into(), "data.videos=50".into()]).unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.train.lambda, 0.0);
        assert_eq!(cfg.data.videos, 50);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(ExperimentConfig::load(None, &["train.no_such_key=1".into()]).is_err());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "[train]\nlamda = 0.1\n").unwrap();
        assert!(ExperimentConfig::load(Some(&path), &[]).is_err());
    }
}
