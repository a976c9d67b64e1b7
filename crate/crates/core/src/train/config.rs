//! Run configuration and its `key = value` file format.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionKind, Pooling};
use crate::error::{Error, Result};
use crate::fusion::{BranchConfig, Variant};
use crate::gin::GinConfig;
use crate::graph::DEFAULT_DEGREE_CAP;

/// Model family selected on the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantChoice {
    Single(Variant),
    /// Global-only and local-only branches trained separately, distances
    /// averaged at test time.
    Ensemble,
}

impl FromStr for VariantChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ensemble" => Ok(VariantChoice::Ensemble),
            other => other.parse().map(VariantChoice::Single).map_err(|_| {
                Error::Config(format!("unknown variant {other:?} (expected base, g, l, full or ensemble)"))
            }),
        }
    }
}

impl std::fmt::Display for VariantChoice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            VariantChoice::Single(v) => v.fmt(f),
            VariantChoice::Ensemble => f.write_str("ensemble"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub variant: VariantChoice,
    pub global_attn: String,
    pub local_attn: String,
    pub n: usize,
    pub k: usize,
    pub q: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    /// 1-based; `None` means every layer after the first.
    pub layers_used: Option<Vec<usize>>,
    pub gin_mlp_layers: usize,
    pub learn_eps: bool,
    pub learning_rate: f64,
    pub iterations: usize,
    pub validate_every: usize,
    pub val_tasks: usize,
    pub eval_tasks: usize,
    pub tasks_per_iteration: usize,
    pub seed: u64,
    pub pooling: Pooling,
    pub heads: usize,
    pub attention_layers: usize,
    pub mlp_depth: usize,
    pub num_substructures: usize,
    pub epsilon_floor: bool,
    pub degree_cap: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: PathBuf::from("data.jsonl"),
            variant: VariantChoice::Single(Variant::Base),
            global_attn: "self".into(),
            local_attn: "self".into(),
            n: 3,
            k: 5,
            q: 15,
            hidden_dim: 64,
            num_layers: 5,
            layers_used: None,
            gin_mlp_layers: 2,
            learn_eps: false,
            learning_rate: 0.001,
            iterations: 700,
            validate_every: 20,
            val_tasks: 100,
            eval_tasks: 500,
            tasks_per_iteration: 1,
            seed: 0,
            pooling: Pooling::Mean,
            heads: 2,
            attention_layers: 1,
            mlp_depth: 2,
            num_substructures: 2,
            epsilon_floor: false,
            degree_cap: DEFAULT_DEGREE_CAP,
        }
    }
}

impl RunConfig {
    pub fn gin_config(&self) -> GinConfig {
        let layers_used = self.layers_used.clone().unwrap_or_else(|| {
            if self.num_layers > 1 {
                (2..=self.num_layers).collect()
            } else {
                vec![1]
            }
        });
        GinConfig {
            num_layers: self.num_layers,
            hidden_dim: self.hidden_dim,
            mlp_layers: self.gin_mlp_layers,
            eps: 0.0,
            learn_eps: self.learn_eps,
            layers_used,
        }
    }

    fn kind(&self, name: &str) -> Result<AttentionKind> {
        AttentionKind::from_name(name, self.heads, self.attention_layers, self.mlp_depth)
    }

    fn branch(&self, variant: Variant) -> Result<BranchConfig> {
        let global = matches!(variant, Variant::GlobalOnly | Variant::Full);
        let local = matches!(variant, Variant::LocalOnly | Variant::Full);
        Ok(BranchConfig {
            variant,
            global_attn: global.then(|| self.kind(&self.global_attn)).transpose()?,
            local_attn: local.then(|| self.kind(&self.local_attn)).transpose()?,
            pooling: self.pooling,
            gin: self.gin_config(),
            num_substructures: self.num_substructures,
        })
    }

    /// The independently trained branches this run consists of.
    pub fn branches(&self) -> Result<Vec<BranchConfig>> {
        match self.variant {
            VariantChoice::Single(v) => Ok(vec![self.branch(v)?]),
            VariantChoice::Ensemble => Ok(vec![self.branch(Variant::GlobalOnly)?, self.branch(Variant::LocalOnly)?]),
        }
    }

    pub fn needs_substructures(&self) -> bool {
        match self.variant {
            VariantChoice::Single(v) => v.needs_substructures(),
            VariantChoice::Ensemble => true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n", self.n),
            ("k", self.k),
            ("q", self.q),
            ("hidden_dim", self.hidden_dim),
            ("num_layers", self.num_layers),
            ("gin_mlp_layers", self.gin_mlp_layers),
            ("validate_every", self.validate_every),
            ("val_tasks", self.val_tasks),
            ("eval_tasks", self.eval_tasks),
            ("tasks_per_iteration", self.tasks_per_iteration),
            ("heads", self.heads),
            ("attention_layers", self.attention_layers),
            ("mlp_depth", self.mlp_depth),
            ("num_substructures", self.num_substructures),
            ("degree_cap", self.degree_cap),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        for b in self.branches()? {
            b.validate()?;
        }
        Ok(())
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected `key = value`, got {line:?}"),
            })?;
            self.set(key.trim(), value.trim()).map_err(|e| Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
        }
        match key {
            "dataset" => self.dataset = PathBuf::from(value),
            "variant" => self.variant = value.parse()?,
            "global_attn" => {
                self.kind(value)?;
                self.global_attn = value.to_string();
            }
            "local_attn" => {
                self.kind(value)?;
                self.local_attn = value.to_string();
            }
            "n" => self.n = num(key, value)?,
            "k" => self.k = num(key, value)?,
            "q" => self.q = num(key, value)?,
            "hidden_dim" => self.hidden_dim = num(key, value)?,
            "num_layers" => self.num_layers = num(key, value)?,
            "layers_used" => {
                self.layers_used = Some(
                    value
                        .split(',')
                        .map(|s| num(key, s.trim()))
                        .collect::<Result<Vec<usize>>>()?,
                )
            }
            "gin_mlp_layers" => self.gin_mlp_layers = num(key, value)?,
            "learn_eps" => self.learn_eps = num(key, value)?,
            "learning_rate" => self.learning_rate = num(key, value)?,
            "iterations" => self.iterations = num(key, value)?,
            "validate_every" => self.validate_every = num(key, value)?,
            "val_tasks" => self.val_tasks = num(key, value)?,
            "eval_tasks" => self.eval_tasks = num(key, value)?,
            "tasks_per_iteration" => self.tasks_per_iteration = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "pooling" => self.pooling = value.parse()?,
            "heads" => self.heads = num(key, value)?,
            "attention_layers" => self.attention_layers = num(key, value)?,
            "mlp_depth" => self.mlp_depth = num(key, value)?,
            "num_substructures" => self.num_substructures = num(key, value)?,
            "epsilon_floor" => self.epsilon_floor = num(key, value)?,
            "degree_cap" => self.degree_cap = num(key, value)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Renders the config in the file format; `apply_text` reads it back.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("write to String");
        kv("dataset", self.dataset.display().to_string());
        kv("variant", self.variant.to_string());
        kv("global_attn", self.global_attn.clone());
        kv("local_attn", self.local_attn.clone());
        kv("n", self.n.to_string());
        kv("k", self.k.to_string());
        kv("q", self.q.to_string());
        kv("hidden_dim", self.hidden_dim.to_string());
        kv("num_layers", self.num_layers.to_string());
        if let Some(l) = &self.layers_used {
            kv("layers_used", l.iter().map(ToString::to_string).collect::<Vec<_>>().join(","));
        }
        kv("gin_mlp_layers", self.gin_mlp_layers.to_string());
        kv("learn_eps", self.learn_eps.to_string());
        kv("learning_rate", self.learning_rate.to_string());
        kv("iterations", self.iterations.to_string());
        kv("validate_every", self.validate_every.to_string());
        kv("val_tasks", self.val_tasks.to_string());
        kv("eval_tasks", self.eval_tasks.to_string());
        kv("tasks_per_iteration", self.tasks_per_iteration.to_string());
        kv("seed", self.seed.to_string());
        kv("pooling", self.pooling.to_string());
        kv("heads", self.heads.to_string());
        kv("attention_layers", self.attention_layers.to_string());
        kv("mlp_depth", self.mlp_depth.to_string());
        kv("num_substructures", self.num_substructures.to_string());
        kv("epsilon_floor", self.epsilon_floor.to_string());
        kv("degree_cap", self.degree_cap.to_string());
        s
    }
}
