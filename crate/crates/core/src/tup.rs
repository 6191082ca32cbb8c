//! Targeted universal perturbations: one `r` with `‖r‖∞ ≤ η` sending at
//! least `1 − δ` of a set to class `t`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::{debug, info, warn};
use serde::{Deserialize, Serialize};

use crate::attacks::{materialize, minimal_targeted, project_linf, AttackConfig};
use crate::container::{self, read_file, write_file};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::Classifier;
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TupConfig {
    pub target: usize,
    pub eta: f64,
    pub delta: f64,
    /// Samples between projections; `None` means `|X|`.
    pub k: Option<usize>,
    pub max_passes: usize,
    /// Set to false to skip every projection (used by the size-of-X sweep).
    pub project: bool,
    /// Inner solver settings; `epsilon` caps each per-point step.
    pub solver: AttackConfig,
    pub seed: u64,
}

impl Default for TupConfig {
    fn default() -> Self {
        Self {
            target: 0,
            eta: 0.8,
            delta: 0.1,
            k: None,
            max_passes: 10,
            project: true,
            solver: AttackConfig::with_epsilon(1.0),
            seed: 0,
        }
    }
}

impl TupConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            return Err(Error::Config(format!("delta must be in (0, 1], got {}", self.delta)));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!("eta must be positive, got {}", self.eta)));
        }
        if self.k == Some(0) {
            return Err(Error::Config("k must be >= 1".into()));
        }
        self.solver.validate()
    }
}

/// Bookkeeping for one pass over `X` (pass 0 is the starting state).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassRecord {
    pub pass: usize,
    /// Success rate on `X` at the end of the pass.
    pub success: f64,
    pub solves: usize,
    /// Points whose inner problem was infeasible within the solver budget.
    pub infeasible: usize,
    pub projections: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TupResult<T> {
    pub r: Tensor<T>,
    pub final_success: f64,
    pub passes_used: usize,
    pub converged: bool,
    pub trace: Vec<PassRecord>,
    /// Echo of the configuration with `k` resolved.
    pub config: TupConfig,
}

impl<T> TupResult<T> {
    pub fn projections(&self) -> usize {
        self.trace.iter().map(|p| p.projections).sum()
    }
}

/// Fraction of `images + r` classified as `t`.
pub fn success_rate<T: Scalar>(model: &Classifier<T>, images: &Tensor<T>, r: &Tensor<T>, t: usize, clip: bool) -> Result<f64> {
    if images.rows() == 0 {
        return Err(Error::Precondition("success rate of an empty set".into()));
    }
    let preds = model.predict_all(&materialize(images, r, clip)?)?;
    Ok(preds.iter().filter(|&&p| p == t).count() as f64 / preds.len() as f64)
}

/// Builds a targeted universal perturbation on `x`.
///
/// Each pass visits `X` in a fresh seeded order. Every point not yet sent to
/// `t` gets a minimal targeted step that is added to `r`; after the `i`-th
/// point of a pass with `i mod k == 0`, and again at the end of the pass, `r`
/// is projected onto the η-ball. The loop stops once the success rate on `X`
/// reaches `1 − δ` or after `max_passes`. The returned `r` is the one from the
/// last pass, whose success rate is also the last trace entry.
pub fn compute_tup<T: Scalar>(model: &Classifier<T>, x: &LabeledDataset<T>, cfg: &TupConfig) -> Result<TupResult<T>> {
    cfg.validate()?;
    if x.is_empty() {
        return Err(Error::Precondition("TUP needs a nonempty X".into()));
    }
    model.check_batch(&x.images)?;
    model.check_labels(&[cfg.target], 1)?;
    let t = cfg.target;
    let n = x.len();
    let k = cfg.k.unwrap_or(n);
    let clip = cfg.solver.clip_to_valid;
    let shape = x.sample_shape().to_vec();

    let initially_t = model.predict_all(&x.images)?.iter().filter(|&&p| p == t).count();
    if initially_t > 0 {
        warn!("{initially_t} of {n} points in X are already classified as target {t}");
    }

    let mut r = Tensor::zeros(&shape);
    let mut success = success_rate(model, &x.images, &r, t, clip)?;
    let mut trace = vec![PassRecord { pass: 0, success, solves: 0, infeasible: 0, projections: 0 }];
    let mut shuffler = rng::stream(cfg.seed, rng::streams::SHUFFLE);
    let mut passes = 0;
    while success < 1.0 - cfg.delta && passes < cfg.max_passes {
        passes += 1;
        let mut rec = PassRecord { pass: passes, success: 0.0, solves: 0, infeasible: 0, projections: 0 };
        for (pos, i) in rng::permutation(n, &mut shuffler).into_iter().enumerate() {
            let count = pos + 1;
            let xi = Tensor::new(shape.clone(), x.image(i).to_vec())?;
            let z = materialize(&xi, &r, clip)?;
            if model.predict_one(&z)? != t {
                match minimal_targeted(model, &z, t, &cfg.solver) {
                    Ok(step) => {
                        r.add_assign(&step.delta)?;
                        rec.solves += 1;
                    }
                    Err(Error::Infeasible { best_margin, .. }) => {
                        debug!("point {i} infeasible (best margin {best_margin:.4}); skipped");
                        rec.infeasible += 1;
                    }
                    Err(e) => return Err(e),
                }
            }
            // The projection due at the last point coincides with the end-of-pass one.
            if cfg.project && count % k == 0 && count != n {
                r = project_linf(&r, cfg.eta);
                rec.projections += 1;
            }
        }
        if cfg.project {
            r = project_linf(&r, cfg.eta);
            rec.projections += 1;
        }
        success = success_rate(model, &x.images, &r, t, clip)?;
        rec.success = success;
        info!(
            "tup pass {passes}: success {success:.4} ({} solves, {} infeasible)",
            rec.solves, rec.infeasible
        );
        trace.push(rec);
    }
    let converged = success >= 1.0 - cfg.delta;
    Ok(TupResult {
        r,
        final_success: success,
        passes_used: passes,
        converged,
        trace,
        config: TupConfig { k: Some(k), ..cfg.clone() },
    })
}

/// JSON sidecar stored next to a persisted perturbation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TupRecord {
    pub target: usize,
    pub eta: f64,
    pub delta: f64,
    pub k: Option<usize>,
    pub seed: u64,
    pub model_hash: String,
    pub final_success: f64,
    pub converged: bool,
    pub passes_used: usize,
    pub trace: Vec<PassRecord>,
    pub config: TupConfig,
    /// Caller-supplied echo of how the run was invoked (data, sizes, paths).
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub run: serde_json::Value,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes `r` in the array container and the run metadata to `<path>.json`.
pub fn save_tup<T: Scalar>(result: &TupResult<T>, model_hash: &str, path: &Path) -> Result<TupRecord> {
    save_tup_with(result, model_hash, serde_json::Value::Null, path)
}

/// [`save_tup`] with an invocation echo stored in [`TupRecord::run`].
pub fn save_tup_with<T: Scalar>(result: &TupResult<T>, model_hash: &str, run: serde_json::Value, path: &Path) -> Result<TupRecord> {
    let c = &result.config;
    let record = TupRecord {
        target: c.target,
        eta: c.eta,
        delta: c.delta,
        k: c.k,
        seed: c.seed,
        model_hash: model_hash.to_string(),
        final_success: result.final_success,
        converged: result.converged,
        passes_used: result.passes_used,
        trace: result.trace.clone(),
        config: c.clone(),
        run,
    };
    let mut lineage = BTreeMap::new();
    lineage.insert("target".into(), c.target.to_string());
    lineage.insert("model_hash".into(), model_hash.to_string());
    lineage.insert("seed".into(), c.seed.to_string());
    container::save_array(&result.r, "r", lineage, path)?;
    write_file(&sidecar_path(path), serde_json::to_string_pretty(&record)?.as_bytes())?;
    Ok(record)
}

pub fn load_tup<T: Scalar>(path: &Path) -> Result<(Tensor<T>, TupRecord)> {
    let (_, r) = container::load_array(path)?;
    let record = serde_json::from_slice(&read_file(&sidecar_path(path))?)?;
    Ok((r, record))
}
