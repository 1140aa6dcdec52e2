//! Training state, outer optimizers and on-disk persistence.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{
    adam_step, checkpoint_bytes, clip_global_norm, read_checkpoint, sgd_step, AdamConfig, AdamState, GradMap, ParamSet,
};
use crate::rng::{Rng, RngSnapshot};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptKind {
    Sgd,
    Adam,
}

impl OptKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sgd" => Some(Self::Sgd),
            "adam" => Some(Self::Adam),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Sgd => "sgd",
            Self::Adam => "adam",
        }
    }
}

/// How aggregated gradients become parameter updates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OuterConfig {
    pub kind: OptKind,
    pub lr: f64,
    pub adam: AdamConfig,
    /// Global-norm clip applied before the update; `None` disables it.
    pub clip: Option<f64>,
}

impl Default for OuterConfig {
    fn default() -> Self {
        Self {
            kind: OptKind::Adam,
            lr: 1e-4,
            adam: AdamConfig::default(),
            clip: Some(5.0),
        }
    }
}

impl OuterConfig {
    pub fn sgd(lr: f64) -> Self {
        Self {
            kind: OptKind::Sgd,
            lr,
            adam: AdamConfig::default(),
            clip: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum OptState {
    Sgd,
    Adam(AdamState),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ParamSet,
    pub iteration: u64,
    /// Best validation loss recorded so far; `None` before the first evaluation.
    pub best_val: Option<f64>,
    pub patience_used: usize,
    pub opt: OptState,
    pub rng: Rng,
}

impl TrainState {
    pub fn new(params: ParamSet, outer: &OuterConfig, rng: Rng) -> Self {
        let opt = match outer.kind {
            OptKind::Sgd => OptState::Sgd,
            OptKind::Adam => OptState::Adam(AdamState::new(&params, outer.adam.clone())),
        };
        Self {
            params,
            iteration: 0,
            best_val: None,
            patience_used: 0,
            opt,
            rng,
        }
    }

    /// Records a validation loss. Returns whether it improved on the best so
    /// far; `best_val` never increases.
    pub fn observe_val(&mut self, loss: f64) -> bool {
        let improved = self.best_val.is_none_or(|b| loss < b);
        if improved {
            self.best_val = Some(loss);
            self.patience_used = 0;
        } else {
            self.patience_used += 1;
        }
        improved
    }

    /// Writes `state.bin` (tensors in checkpoint layout) and `state.json`
    /// (scalars and the RNG position) into `dir`, atomically per file.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut all = ParamSet::new();
        for (n, t) in self.params.iter() {
            all.insert(format!("param/{n}"), t.clone())?;
        }
        let adam = match &self.opt {
            OptState::Sgd => None,
            OptState::Adam(a) => {
                for (n, t) in &a.m {
                    all.insert(format!("adam.m/{n}"), t.clone())?;
                }
                for (n, t) in &a.v {
                    all.insert(format!("adam.v/{n}"), t.clone())?;
                }
                Some(AdamMeta {
                    config: a.config.clone(),
                    step: a.step,
                })
            }
        };
        let meta = StateMeta {
            iteration: self.iteration,
            best_val: self.best_val,
            patience_used: self.patience_used,
            params_version: self.params.version(),
            adam,
            rng: RngSnapshot::capture(&self.rng),
        };
        write_atomic(&dir.join("state.bin"), &checkpoint_bytes(&all))?;
        write_atomic(&dir.join("state.json"), serde_json::to_string_pretty(&meta)?.as_bytes())?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: StateMeta = serde_json::from_slice(&fs::read(dir.join("state.json"))?)
            .map_err(|e| Error::Corruption(format!("{}: {e}", dir.join("state.json").display())))?;
        let all = read_checkpoint(fs::read(dir.join("state.bin"))?.as_slice())?;
        let mut params = ParamSet::new();
        let mut m = GradMap::new();
        let mut v = GradMap::new();
        for (n, t) in all.iter() {
            if let Some(k) = n.strip_prefix("param/") {
                params.insert(k, t.clone())?;
            } else if let Some(k) = n.strip_prefix("adam.m/") {
                m.insert(k.to_string(), t.clone());
            } else if let Some(k) = n.strip_prefix("adam.v/") {
                v.insert(k.to_string(), t.clone());
            } else {
                return Err(Error::Corruption(format!("unexpected state entry {n}")));
            }
        }
        params.set_version(meta.params_version);
        let opt = match meta.adam {
            None => OptState::Sgd,
            Some(a) => {
                params.check_compatible(&m)?;
                params.check_compatible(&v)?;
                OptState::Adam(AdamState {
                    config: a.config,
                    step: a.step,
                    m,
                    v,
                })
            }
        };
        Ok(Self {
            params,
            iteration: meta.iteration,
            best_val: meta.best_val,
            patience_used: meta.patience_used,
            opt,
            rng: meta.rng.restore(),
        })
    }
}

#[derive(Serialize, Deserialize)]
struct AdamMeta {
    config: AdamConfig,
    step: u64,
}

#[derive(Serialize, Deserialize)]
struct StateMeta {
    iteration: u64,
    best_val: Option<f64>,
    patience_used: usize,
    params_version: u64,
    adam: Option<AdamMeta>,
    rng: RngSnapshot,
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Clips (if configured) and applies one optimizer update. Returns the new
/// state and the pre-clip gradient norm.
pub fn apply_update(state: &TrainState, mut grads: GradMap, outer: &OuterConfig) -> Result<(TrainState, f64)> {
    let norm = match outer.clip {
        Some(c) => {
            let n = clip_global_norm(&mut grads, c);
            if n > c {
                log::debug!("iteration {}: clipped gradient norm {n:.3} to {c}", state.iteration);
            }
            n
        }
        None => crate::params::grad_norm(&grads),
    };
    if !norm.is_finite() {
        return Err(Error::Numeric {
            op: format!("gradient norm at iteration {}", state.iteration),
        });
    }
    let (params, opt) = match &state.opt {
        OptState::Sgd => (sgd_step(&state.params, &grads, outer.lr)?, OptState::Sgd),
        OptState::Adam(a) => {
            let (p, a) = adam_step(a, &state.params, &grads, outer.lr)?;
            (p, OptState::Adam(a))
        }
    };
    Ok((
        TrainState {
            params,
            iteration: state.iteration + 1,
            best_val: state.best_val,
            patience_used: state.patience_used,
            opt,
            rng: state.rng.clone(),
        },
        norm,
    ))
}

/// Sums gradient maps entry-wise in the given order.
pub fn sum_grads(maps: &[GradMap]) -> Result<GradMap> {
    let Some(first) = maps.first() else {
        return Err(Error::Contract("no gradients to aggregate".into()));
    };
    let mut out = first.clone();
    for m in &maps[1..] {
        for (k, g) in m {
            let acc: &mut Tensor = out
                .get_mut(k)
                .ok_or_else(|| Error::Structure(format!("gradient for unknown parameter {k}")))?;
            *acc = acc.zip_map(g, |a, b| a + b)?;
        }
    }
    Ok(out)
}
