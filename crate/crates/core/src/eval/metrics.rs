//! Accuracy under attack, source–target heatmaps, transfer and sweeps.

use std::time::Instant;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::report::{MetricCell, MetricTable};
use crate::attacks::{fgsm_batch, materialize, minimal_targeted, pgd_batch, AttackConfig};
use crate::data::{sample_x, LabeledDataset};
use crate::error::{Error, Result};
use crate::nn::Classifier;
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::tup::{compute_tup, success_rate, TupConfig};

/// Rows per batched attack or prediction call.
const CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub enum AttackSpec<T> {
    /// `δ = 0`.
    Identity,
    /// A precomputed targeted universal perturbation.
    Tup(Option<Tensor<T>>),
    /// A precomputed untargeted universal perturbation.
    Uni(Option<Tensor<T>>),
    Fgsm(AttackConfig),
    Pgd(AttackConfig),
    /// The minimal targeted solver, aiming at `target` or `(y + 1) mod K`.
    Minimal { cfg: AttackConfig, target: Option<usize> },
}

impl<T> AttackSpec<T> {
    pub fn name(&self) -> &'static str {
        match self {
            AttackSpec::Identity => "identity",
            AttackSpec::Tup(_) => "tup",
            AttackSpec::Uni(_) => "uni",
            AttackSpec::Fgsm(_) => "fgsm",
            AttackSpec::Pgd(_) => "pgd",
            AttackSpec::Minimal { .. } => "minimal",
        }
    }
}

fn chunks(n: usize) -> impl Iterator<Item = Vec<usize>> {
    (0..n).step_by(CHUNK).map(move |s| (s..(s + CHUNK).min(n)).collect())
}

fn count_correct(preds: &[usize], labels: &[usize]) -> usize {
    preds.iter().zip(labels).filter(|(p, y)| p == y).count()
}

pub fn clean_accuracy<T: Scalar>(model: &Classifier<T>, data: &LabeledDataset<T>) -> Result<MetricCell> {
    let preds = model.predict_all(&data.images)?;
    Ok(MetricCell::ratio(count_correct(&preds, &data.labels), data.len()))
}

/// Fraction of attacked test points still classified as their true label.
///
/// `clip` applies to precomputed perturbations; per-sample attacks use their
/// own `clip_to_valid`.
pub fn accuracy_under_attack<T: Scalar>(model: &Classifier<T>, data: &LabeledDataset<T>, spec: &AttackSpec<T>, clip: bool) -> Result<MetricCell> {
    let n = data.len();
    let correct = match spec {
        AttackSpec::Identity => return clean_accuracy(model, data),
        AttackSpec::Tup(r) | AttackSpec::Uni(r) => {
            let r = r.as_ref().ok_or_else(|| Error::Config(format!("attack {} needs a precomputed perturbation", spec.name())))?;
            let preds = model.predict_all(&materialize(&data.images, r, clip)?)?;
            count_correct(&preds, &data.labels)
        }
        AttackSpec::Fgsm(cfg) | AttackSpec::Pgd(cfg) => {
            let mut correct = 0;
            for idx in chunks(n) {
                let x = data.images.gather_rows(&idx);
                let ys: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
                let res = match spec {
                    AttackSpec::Fgsm(_) => fgsm_batch(model, &x, &ys, false, cfg)?,
                    _ => pgd_batch(model, &x, &ys, false, cfg)?,
                };
                let deltas: Vec<&[T]> = res.iter().map(|r| r.delta.data()).collect();
                let d = Tensor::stack(data.sample_shape(), &deltas)?;
                let preds = model.predict(&materialize(&x, &d, cfg.clip_to_valid)?)?;
                correct += count_correct(&preds, &ys);
            }
            correct
        }
        AttackSpec::Minimal { cfg, target } => {
            let k = model.num_classes();
            let mut correct = 0;
            for i in 0..n {
                let y = data.labels[i];
                let t = target.unwrap_or((y + 1) % k);
                let x = data.images.row_tensor(i);
                let adv = if t == y || model.predict_one(&x)? == t {
                    x
                } else {
                    match minimal_targeted(model, &x, t, cfg) {
                        Ok(r) => materialize(&x, &r.delta, cfg.clip_to_valid)?,
                        Err(Error::Infeasible { .. }) => x,
                        Err(e) => return Err(e),
                    }
                };
                correct += usize::from(model.predict_one(&adv)? == y);
            }
            correct
        }
    };
    Ok(MetricCell::ratio(correct, n))
}

/// Samples of `data` whose prediction is not `t`.
pub fn exclude_predicted<T: Scalar>(model: &Classifier<T>, data: &LabeledDataset<T>, t: usize) -> Result<LabeledDataset<T>> {
    let preds = model.predict_all(&data.images)?;
    let idx: Vec<usize> = (0..data.len()).filter(|&i| preds[i] != t).collect();
    Ok(data.subset(&idx, format!("{}/not-{t}", data.name)))
}

/// Samples of `data` whose true label is not `t`.
pub fn exclude_label<T: Scalar>(data: &LabeledDataset<T>, t: usize) -> LabeledDataset<T> {
    let idx: Vec<usize> = (0..data.len()).filter(|&i| data.labels[i] != t).collect();
    data.subset(&idx, format!("{}/label-not-{t}", data.name))
}

pub enum HeatmapAttack<'a, T> {
    /// One perturbation per target class, indexed by target.
    Tup { perturbations: &'a [Tensor<T>], clip: bool },
    /// Targeted FGSM toward each target.
    Fgsm(AttackConfig),
}

/// Source–target success counts; the diagonal stays zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub n_per_pair: usize,
    /// `targeted[s][t]`: adversarial images of class `s` predicted as `t`.
    pub targeted: Vec<Vec<usize>>,
    /// `untargeted[s][t]`: the same images predicted as anything but `s`.
    pub untargeted: Vec<Vec<usize>>,
}

impl Heatmap {
    pub fn total_targeted(&self) -> usize {
        self.targeted.iter().flatten().sum()
    }

    pub fn dominated(&self) -> bool {
        self.targeted.iter().flatten().zip(self.untargeted.iter().flatten()).all(|(a, b)| a <= b)
    }

    /// Largest relative deviation of an off-diagonal targeted count from its row mean.
    pub fn max_row_deviation(&self) -> f64 {
        let k = self.targeted.len();
        let mut worst: f64 = 0.0;
        for (s, row) in self.targeted.iter().enumerate() {
            let vals: Vec<f64> = (0..k).filter(|&t| t != s).map(|t| row[t] as f64).collect();
            let mean = vals.iter().sum::<f64>() / vals.len().max(1) as f64;
            if mean > 0.0 {
                worst = vals.iter().map(|v| (v - mean).abs() / mean).fold(worst, f64::max);
            }
        }
        worst
    }

    pub fn tables(&self, prefix: &str) -> (MetricTable, MetricTable) {
        let k = self.targeted.len();
        let labels: Vec<String> = (0..k).map(|c| c.to_string()).collect();
        let mut tt = MetricTable::new(format!("{prefix}-targeted"), labels.clone(), labels.clone());
        let mut tu = MetricTable::new(format!("{prefix}-untargeted"), labels.clone(), labels);
        for s in 0..k {
            for t in (0..k).filter(|&t| t != s) {
                tt.set(s, t, MetricCell::new(self.targeted[s][t] as f64, self.n_per_pair));
                tu.set(s, t, MetricCell::new(self.untargeted[s][t] as f64, self.n_per_pair));
            }
        }
        (tt, tu)
    }
}

/// Attacks the first `n_per_pair` test images of every source class toward
/// every other class and counts targeted and untargeted successes.
pub fn heatmap_source_target<T: Scalar>(model: &Classifier<T>, data: &LabeledDataset<T>, n_per_pair: usize, attack: &HeatmapAttack<'_, T>) -> Result<Heatmap> {
    if n_per_pair == 0 {
        return Err(Error::Config("n_per_pair must be >= 1".into()));
    }
    let k = model.num_classes();
    if let HeatmapAttack::Tup { perturbations, .. } = attack {
        if perturbations.len() != k {
            return Err(Error::Config(format!("need {k} perturbations, one per target, got {}", perturbations.len())));
        }
    }
    let mut targeted = vec![vec![0; k]; k];
    let mut untargeted = vec![vec![0; k]; k];
    for s in 0..k {
        let idx = data.indices_of_class(s);
        if idx.len() < n_per_pair {
            return Err(Error::ClassTooSmall { class: s, available: idx.len(), needed: n_per_pair });
        }
        let x = data.images.gather_rows(&idx[..n_per_pair]);
        for t in (0..k).filter(|&t| t != s) {
            let adv = match attack {
                HeatmapAttack::Tup { perturbations, clip } => materialize(&x, &perturbations[t], *clip)?,
                HeatmapAttack::Fgsm(cfg) => {
                    let res = fgsm_batch(model, &x, &vec![t; n_per_pair], true, cfg)?;
                    let deltas: Vec<&[T]> = res.iter().map(|r| r.delta.data()).collect();
                    materialize(&x, &Tensor::stack(data.sample_shape(), &deltas)?, cfg.clip_to_valid)?
                }
            };
            let preds = model.predict(&adv)?;
            targeted[s][t] = preds.iter().filter(|&&p| p == t).count();
            untargeted[s][t] = preds.iter().filter(|&&p| p != s).count();
        }
    }
    Ok(Heatmap { n_per_pair, targeted, untargeted })
}

/// Cell `(i, j)`: mean over targets of the success of model `i`'s TUPs on
/// model `j`, measured on points whose true label differs from the target.
/// `tups[i]` lists `(target, r)` pairs for model `i`. The diagonal is omitted.
pub fn transfer_matrix<T: Scalar>(
    models: &[(&str, &Classifier<T>)],
    data: &LabeledDataset<T>,
    tups: &[Vec<(usize, Tensor<T>)>],
    clip: bool,
) -> Result<MetricTable> {
    if models.len() < 2 {
        return Err(Error::Precondition("transfer needs at least two models".into()));
    }
    if tups.len() != models.len() {
        return Err(Error::Config("one TUP list per model is required".into()));
    }
    let (_, first) = models[0];
    for (name, m) in models {
        if m.input_shape() != first.input_shape() || m.num_classes() != first.num_classes() {
            return Err(Error::Shape(format!("model {name} is not shape-compatible with {}", models[0].0)));
        }
    }
    let labels: Vec<String> = models.iter().map(|(n, _)| n.to_string()).collect();
    let mut table = MetricTable::new("transfer", labels.clone(), labels);
    for (i, list) in tups.iter().enumerate() {
        if list.is_empty() {
            return Err(Error::Config(format!("model {} has no TUPs", models[i].0)));
        }
        for (j, (_, mj)) in models.iter().enumerate() {
            if i == j {
                continue;
            }
            let mut sum = 0.0;
            let mut count = 0;
            for (t, r) in list {
                let pts = exclude_label(data, *t);
                sum += success_rate(mj, &pts.images, r, *t, clip)?;
                count += pts.len();
            }
            table.set(i, j, MetricCell::new(sum / list.len() as f64, count));
        }
    }
    Ok(table)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepKind {
    K,
    Eta,
    XSize,
}

impl std::str::FromStr for SweepKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "k" => Ok(SweepKind::K),
            "eta" => Ok(SweepKind::Eta),
            "xsize" | "x-size" => Ok(SweepKind::XSize),
            other => Err(Error::Config(format!("unknown sweep kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub success_x: MetricCell,
    pub success_val: MetricCell,
    pub trials: usize,
    pub projections: usize,
    pub seconds: f64,
}

/// Rows per swept value; columns for success on `X` and on validation.
pub fn sweep_table(name: &str, points: &[SweepPoint]) -> MetricTable {
    let rows: Vec<String> = points.iter().map(|p| p.value.to_string()).collect();
    let mut t = MetricTable::new(name, rows, vec!["success_x".into(), "success_val".into()]);
    for (i, p) in points.iter().enumerate() {
        t.set(i, 0, p.success_x);
        t.set(i, 1, p.success_val);
    }
    t
}

/// Mean TUP success over `trials` random targets for each size of `X`,
/// with projection disabled. `X` is drawn from `pool`; success is measured
/// on the points of `val` not predicted as the trial's target.
pub fn size_of_x_sweep<T: Scalar>(
    model: &Classifier<T>,
    pool: &LabeledDataset<T>,
    val: &LabeledDataset<T>,
    sizes: &[usize],
    trials: usize,
    base: &TupConfig,
    seed: u64,
) -> Result<Vec<SweepPoint>> {
    if sizes.is_empty() || sizes.windows(2).any(|w| w[0] >= w[1]) || sizes[0] == 0 {
        return Err(Error::Precondition(format!("sizes must be positive and strictly ascending, got {sizes:?}")));
    }
    if trials == 0 {
        return Err(Error::Config("trials must be >= 1".into()));
    }
    let k = model.num_classes();
    let mut targets_rng = rng::stream(seed, rng::streams::ATTACK);
    let targets: Vec<usize> = (0..trials).map(|_| targets_rng.random_range(0..k)).collect();
    let mut out = Vec::with_capacity(sizes.len());
    for &size in sizes {
        let started = Instant::now();
        let (mut sx, mut sv, mut nx, mut nv, mut proj) = (0.0, 0.0, 0, 0, 0);
        for (trial, &t) in targets.iter().enumerate() {
            let x = sample_x(pool, model, t, size, seed.wrapping_add(trial as u64))?;
            let cfg = TupConfig { target: t, k: None, project: false, seed: seed.wrapping_add(trial as u64), ..base.clone() };
            let res = compute_tup(model, &x, &cfg)?;
            let v = exclude_predicted(model, val, t)?;
            sx += res.final_success;
            nx += x.len();
            if !v.is_empty() {
                sv += success_rate(model, &v.images, &res.r, t, cfg.solver.clip_to_valid)?;
                nv += v.len();
            }
            proj += res.projections();
        }
        out.push(SweepPoint {
            value: size as f64,
            success_x: MetricCell::new(sx / trials as f64, nx),
            success_val: MetricCell::new(sv / trials as f64, nv),
            trials,
            projections: proj,
            seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok(out)
}

/// TUP success and wall time for each value of `k` or `η` on a fixed `X`.
pub fn param_sweep<T: Scalar>(
    model: &Classifier<T>,
    x: &LabeledDataset<T>,
    val: &LabeledDataset<T>,
    kind: SweepKind,
    values: &[f64],
    base: &TupConfig,
) -> Result<Vec<SweepPoint>> {
    if values.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(Error::Config(format!("sweep values must be positive, got {values:?}")));
    }
    let t = base.target;
    let v = exclude_predicted(model, val, t)?;
    let mut out = Vec::with_capacity(values.len());
    for &value in values {
        let cfg = match kind {
            SweepKind::K => {
                if value.fract() != 0.0 {
                    return Err(Error::Config(format!("k must be an integer, got {value}")));
                }
                TupConfig { k: Some(value as usize), ..base.clone() }
            }
            SweepKind::Eta => TupConfig { eta: value, ..base.clone() },
            SweepKind::XSize => return Err(Error::Config("use size_of_x_sweep for X sizes".into())),
        };
        let started = Instant::now();
        let res = compute_tup(model, x, &cfg)?;
        let seconds = started.elapsed().as_secs_f64();
        let sv = if v.is_empty() { 0.0 } else { success_rate(model, &v.images, &res.r, t, cfg.solver.clip_to_valid)? };
        out.push(SweepPoint {
            value,
            success_x: MetricCell::new(res.final_success, x.len()),
            success_val: MetricCell::new(sv, v.len()),
            trials: 1,
            projections: res.projections(),
            seconds,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_synthetic_gaussians;
    use crate::nn::{train_standard, Architecture, TrainConfig};

    fn setup() -> (Classifier<f64>, LabeledDataset<f64>) {
        let means = [[0.15, 0.15], [0.85, 0.15], [0.5, 0.85]];
        let ds = make_synthetic_gaussians::<f64>(30, &means, 0.06, 9).unwrap();
        let mut m = Classifier::<f64>::new(Architecture::Linear, &[2], 3, 0).unwrap();
        let cfg = TrainConfig { epochs: 60, batch_size: 15, learning_rate: 0.05, ..Default::default() };
        train_standard(&mut m, &ds, &cfg).unwrap();
        (m, ds)
    }

    #[test]
    fn identity_attack_is_clean_accuracy() {
        let (m, ds) = setup();
        let clean = clean_accuracy(&m, &ds).unwrap();
        let zero = AttackSpec::Tup(Some(Tensor::zeros(&[2])));
        assert_eq!(accuracy_under_attack(&m, &ds, &AttackSpec::Identity, true).unwrap(), clean);
        assert_eq!(accuracy_under_attack(&m, &ds, &zero, true).unwrap(), clean);
        let eps0 = AttackSpec::Fgsm(AttackConfig::with_epsilon(0.0));
        assert_eq!(accuracy_under_attack(&m, &ds, &eps0, true).unwrap(), clean);
    }

    #[test]
    fn micro_set_matches_hand_count() {
        // Class 0 iff x > 0.5 under a one-feature model.
        let m = Classifier::<f64>::linear(
            Tensor::from_f64(&[2, 1], &[1.0, -1.0]).unwrap(),
            Tensor::from_f64(&[2], &[-0.5, 0.5]).unwrap(),
        )
        .unwrap();
        let xs = [0.9, 0.8, 0.1, 0.2, 0.7, 0.3, 0.6, 0.4, 0.95, 0.05];
        let ys = vec![0, 0, 1, 0, 1, 1, 0, 0, 0, 1];
        // Correct: 0.9, 0.8, 0.1, 0.3, 0.6, 0.95, 0.05 -> 7 of 10.
        let ds = LabeledDataset::new(Tensor::from_f64(&[10, 1], &xs).unwrap(), ys, "micro").unwrap();
        assert_eq!(accuracy_under_attack(&m, &ds, &AttackSpec::Identity, true).unwrap(), MetricCell::new(0.7, 10));
    }

    #[test]
    fn missing_perturbation_is_config_error() {
        let (m, ds) = setup();
        let r = accuracy_under_attack(&m, &ds, &AttackSpec::Uni(None), true);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn pgd_and_minimal_reduce_accuracy() {
        let (m, ds) = setup();
        let clean = clean_accuracy(&m, &ds).unwrap().value;
        let pgd = accuracy_under_attack(&m, &ds, &AttackSpec::Pgd(AttackConfig::with_epsilon(0.4)), true).unwrap();
        assert!(pgd.value < clean);
        let until = AttackSpec::Minimal { cfg: AttackConfig::with_epsilon(1.0), target: None };
        assert_eq!(accuracy_under_attack(&m, &ds, &until, true).unwrap().value, 0.0);
    }

    #[test]
    fn heatmap_dominance_and_never_succeeding_attack() {
        let (m, ds) = setup();
        let zeros = vec![Tensor::zeros(&[2]); 3];
        let h0 = heatmap_source_target(&m, &ds, 5, &HeatmapAttack::Tup { perturbations: &zeros, clip: true }).unwrap();
        assert!(h0.dominated());
        // A clean, accurate model mislabels (almost) nothing.
        assert!(h0.total_targeted() <= 1);
        let h = heatmap_source_target(&m, &ds, 5, &HeatmapAttack::Fgsm(AttackConfig::with_epsilon(0.5))).unwrap();
        assert!(h.dominated());
        assert!(h.total_targeted() > 0);
        for s in 0..3 {
            assert_eq!(h.targeted[s][s], 0);
        }
        let err = heatmap_source_target(&m, &ds, 31, &HeatmapAttack::Fgsm(AttackConfig::default())).unwrap_err();
        assert!(matches!(err, Error::ClassTooSmall { class: 0, available: 30, needed: 31 }));
    }

    #[test]
    fn transfer_between_identical_models_equals_self_success() {
        let (m, ds) = setup();
        let twin = m.clone();
        let r = Tensor::from_f64(&[2], &[0.4, -0.4]).unwrap();
        let tups = vec![vec![(1, r.clone())], vec![(1, r.clone())]];
        let table = transfer_matrix(&[("a", &m), ("b", &twin)], &ds, &tups, true).unwrap();
        assert!(table.get(0, 0).is_none());
        let pts = exclude_label(&ds, 1);
        let own = success_rate(&m, &pts.images, &r, 1, true).unwrap();
        assert_eq!(table.get(0, 1).unwrap().value, own);
        assert_eq!(table.get(1, 0).unwrap().value, own);
        let other = Classifier::<f64>::new(Architecture::Linear, &[3], 3, 0).unwrap();
        assert!(transfer_matrix(&[("a", &m), ("c", &other)], &ds, &tups, true).is_err());
    }

    #[test]
    fn sweeps_validate_and_report() {
        let (m, ds) = setup();
        let base = TupConfig { eta: 0.5, ..Default::default() };
        assert!(size_of_x_sweep(&m, &ds, &ds, &[10, 5], 1, &base, 0).is_err());
        let pts = size_of_x_sweep(&m, &ds, &ds, &[5, 20], 2, &base, 0).unwrap();
        assert_eq!(pts.len(), 2);
        assert!(pts.iter().all(|p| p.projections == 0));
        let x = exclude_predicted(&m, &ds, 0).unwrap();
        let ks = param_sweep(&m, &x, &ds, SweepKind::K, &[x.len() as f64], &TupConfig { target: 0, ..base.clone() }).unwrap();
        assert!(ks[0].projections >= 1);
        let etas = param_sweep(&m, &x, &ds, SweepKind::Eta, &[0.05, 0.6], &TupConfig { target: 0, ..base }).unwrap();
        assert!(etas[1].success_x.value >= etas[0].success_x.value);
        assert_eq!(sweep_table("eta", &etas).rows(), 2);
    }
}
