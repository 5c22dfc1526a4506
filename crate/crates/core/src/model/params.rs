use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{Gradients, Tape, Tensor, Var};

pub const CHECKPOINT_FORMAT: &str = "sapkit-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Named parameter tensors for backbone, neck and head.
///
/// Naming: `backbone.*`, `neck.{layer}.*`, `fuse.*` (linear neck used when
/// the attention neck is disabled) and `head.*`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub tensors: BTreeMap<String, Tensor>,
}

/// Parameters registered on a tape for one forward pass.
#[derive(Debug, Clone)]
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("missing parameter {name}")))
    }

    /// Substitute the variable used for `name` (for example a probe leaf).
    pub fn replace(&mut self, name: &str, var: Var) {
        self.vars.insert(name.to_string(), var);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

fn truncated_normal(rng: &mut ChaCha8Rng, std: f64, n: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, std).expect("positive std");
    (0..n)
        .map(|_| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= 2.0 * std {
                break v;
            }
        })
        .collect()
}

impl ModelParams {
    /// Truncated-normal weights, zero biases, unit norm gains, zero final
    /// RTPE layer.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = config.init_std;
        let c = config.channels;
        let hidden = c * config.mlp_ratio;
        let mut tensors = BTreeMap::new();
        let mut weight = |tensors: &mut BTreeMap<String, Tensor>, name: String, shape: &[usize]| {
            let n = shape.iter().product();
            let t = Tensor::new(shape.to_vec(), truncated_normal(&mut rng, std, n)).expect("shape");
            tensors.insert(name, t);
        };

        weight(&mut tensors, "backbone.w".into(), &[config.patch_len(), c]);
        tensors.insert("backbone.b".into(), Tensor::zeros(&[c]));

        for l in 0..config.layers {
            let p = |s: &str| format!("neck.{l}.{s}");
            for proj in ["q", "k", "v", "o"] {
                weight(&mut tensors, p(&format!("{proj}.w")), &[c, c]);
                tensors.insert(p(&format!("{proj}.b")), Tensor::zeros(&[c]));
            }
            for ln in ["ln1", "ln2"] {
                tensors.insert(p(&format!("{ln}.g")), Tensor::ones(&[c]));
                tensors.insert(p(&format!("{ln}.b")), Tensor::zeros(&[c]));
            }
            weight(&mut tensors, p("mlp1.w"), &[c, hidden]);
            tensors.insert(p("mlp1.b"), Tensor::zeros(&[hidden]));
            weight(&mut tensors, p("mlp2.w"), &[hidden, c]);
            tensors.insert(p("mlp2.b"), Tensor::zeros(&[c]));
            weight(&mut tensors, p("rtpe1.w"), &[3, config.rtpe_hidden]);
            tensors.insert(p("rtpe1.b"), Tensor::zeros(&[config.rtpe_hidden]));
            tensors.insert(p("rtpe2.w"), Tensor::zeros(&[config.rtpe_hidden, config.heads]));
            tensors.insert(p("rtpe2.b"), Tensor::zeros(&[config.heads]));
        }

        weight(&mut tensors, "fuse.w".into(), &[c, c]);
        tensors.insert("fuse.b".into(), Tensor::zeros(&[c]));

        weight(&mut tensors, "head.w".into(), &[c, config.head_outputs()]);
        tensors.insert("head.b".into(), Tensor::zeros(&[config.head_outputs()]));

        Ok(Self {
            config: config.clone(),
            tensors,
        })
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter {name}")))
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    /// Register every tensor on `tape`.
    pub fn register(&self, tape: &mut Tape, requires_grad: bool) -> ParamVars {
        let vars = self
            .tensors
            .iter()
            .map(|(k, t)| (k.clone(), tape.leaf(t.clone(), requires_grad)))
            .collect();
        ParamVars { vars }
    }

    /// Gradients keyed by parameter name (zeros where none flowed).
    pub fn collect_grads(&self, vars: &ParamVars, grads: &Gradients) -> BTreeMap<String, Tensor> {
        vars.iter()
            .map(|(name, &v)| {
                let g = grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.tensors[name].shape()));
                (name.clone(), g)
            })
            .collect()
    }

    /// Zero the value path and MLP output of every attention layer; the neck
    /// then passes queries through unchanged.
    pub fn zero_residual_branches(&mut self) {
        for l in 0..self.config.layers {
            for name in ["v.w", "v.b", "o.b", "mlp2.w", "mlp2.b"] {
                if let Some(t) = self.tensors.get_mut(&format!("neck.{l}.{name}")) {
                    t.data_mut().fill(0.0);
                }
            }
        }
    }

    pub fn check_consistent(&self) -> Result<()> {
        let reference = Self::init(&self.config, 0)?;
        for (name, t) in &reference.tensors {
            let got = self.get(name)?;
            if got.shape() != t.shape() {
                return Err(Error::shape("checkpoint", got.shape(), t.shape()));
            }
        }
        if let Some(extra) = self.tensors.keys().find(|k| !reference.tensors.contains_key(*k)) {
            return Err(Error::Contract(format!("unexpected parameter {extra}")));
        }
        if !self.is_finite() {
            return Err(Error::Numeric("non-finite parameter".into()));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    config: ModelConfig,
    #[serde(default)]
    meta: serde_json::Value,
    /// Shape manifest in parameter order.
    manifest: Vec<(String, Vec<usize>)>,
    tensors: Vec<TensorRecord>,
}

/// Parameters plus free-form metadata (training configuration and the like).
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.params.config.clone(),
            meta: self.meta.clone(),
            manifest: self
                .params
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), t.shape().to_vec()))
                .collect(),
            tensors: self
                .params
                .tensors
                .iter()
                .map(|(k, t)| TensorRecord {
                    name: k.clone(),
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                })
                .collect(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: CheckpointFile = serde_json::from_str(s)?;
        if file.format != CHECKPOINT_FORMAT {
            return Err(Error::Config(format!("not a checkpoint: format {:?}", file.format)));
        }
        if file.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!("unsupported checkpoint version {}", file.version)));
        }
        file.config.validate()?;
        let mut tensors = BTreeMap::new();
        for rec in file.tensors {
            let declared = file
                .manifest
                .iter()
                .find(|(n, _)| *n == rec.name)
                .ok_or_else(|| Error::Contract(format!("{} missing from manifest", rec.name)))?;
            if declared.1 != rec.shape {
                return Err(Error::shape("checkpoint manifest", &declared.1, &rec.shape));
            }
            tensors.insert(rec.name, Tensor::new(rec.shape, rec.data)?);
        }
        let params = ModelParams {
            config: file.config,
            tensors,
        };
        params.check_consistent()?;
        Ok(Self {
            params,
            meta: file.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
