use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use tupcore::attacks::{fgsm_batch, materialize, minimal_targeted, pgd_batch, universal_untargeted_best_effort, AttackConfig};
use tupcore::container::{load_array, load_checkpoint, model_hash, peek_dtype, save_array, save_checkpoint, sha256_hex};
use tupcore::data::{cifar, idx, make_synthetic_gaussians, sample_x, split_train_val, LabeledDataset, SplitSpec, DATA_DIR_ENV};
use tupcore::eval::{
    accuracy_under_attack, clean_accuracy, edge_cosine_similarity, emit_report, exclude_label, exclude_predicted, heatmap_source_target,
    param_sweep, size_of_x_sweep, sweep_table, AttackSpec, CannyParams, EvalReport, HeatmapAttack, MetricCell, MetricTable, ReportFormat,
    SweepKind,
};
use tupcore::nn::{train_standard, Architecture, Classifier, OptimizerKind, TrainConfig};
use tupcore::rat::{rat_train, RatConfig};
use tupcore::tup::{compute_tup, load_tup, save_tup_with, sidecar_path, success_rate, TupConfig, TupRecord};
use tupcore::{Dtype, Error, Result, Scalar, Tensor};

use crate::config;
use crate::{AttackArgs, Cli, Command, EvalArgs, RatArgs, SweepArgs, TrainArgs, TupArgs};

const SUBCOMMANDS: [&str; 6] = ["train", "attack", "tup", "rat", "eval", "sweep"];
const SYNTHETIC_MEANS: [[f64; 2]; 3] = [[0.2, 0.2], [0.8, 0.2], [0.5, 0.8]];

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct Globals {
    seed: Option<u64>,
    precision: Option<Dtype>,
    data_dir: Option<PathBuf>,
}

struct Ctx {
    seed: u64,
    data_dir: PathBuf,
    /// Fully resolved invocation, echoed into every artifact.
    echo: Value,
}

fn required<T: Clone>(v: &Option<T>, flag: &str) -> Result<T> {
    v.clone().ok_or_else(|| Error::Config(format!("missing --{flag}")))
}

fn parse<T: FromStr>(s: &str, what: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    s.parse().map_err(|e| Error::Config(format!("invalid {what} `{s}`: {e}")))
}

pub fn run(cli: &Cli) -> Result<Value> {
    let file = match &cli.config {
        Some(p) => config::read(p)?,
        None => Map::new(),
    };
    let globals_file: Map<String, Value> = file.iter().filter(|(k, _)| !SUBCOMMANDS.contains(&k.as_str())).map(|(k, v)| (k.clone(), v.clone())).collect();
    let flags = Globals { seed: cli.seed, precision: cli.precision, data_dir: cli.data_dir.clone() };
    let g: Globals = config::merge(&flags, Some(&Value::Object(globals_file)), "config")?;
    let data_dir = g
        .data_dir
        .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("data"));
    let seed = g.seed.unwrap_or(0);
    let name = cli.command.name();
    let section = file.get(name);

    macro_rules! resolve {
        ($args:expr) => {{
            let mut a = config::merge($args, section, name)?;
            defaults(&mut a);
            a
        }};
    }
    let (model_path, args): (Option<PathBuf>, Value) = match &cli.command {
        Command::Train(a) => (None, serde_json::to_value(resolve!(a))?),
        Command::Attack(a) => {
            let a: AttackArgs = resolve!(a);
            (a.model.clone(), serde_json::to_value(a)?)
        }
        Command::Tup(a) => {
            let a: TupArgs = resolve!(a);
            (a.model.clone(), serde_json::to_value(a)?)
        }
        Command::Rat(a) => {
            let a: RatArgs = resolve!(a);
            (a.model.clone(), serde_json::to_value(a)?)
        }
        Command::Eval(a) => {
            let a: EvalArgs = resolve!(a);
            (a.model.clone(), serde_json::to_value(a)?)
        }
        Command::Sweep(a) => {
            let a: SweepArgs = resolve!(a);
            (a.model.clone(), serde_json::to_value(a)?)
        }
    };
    let dtype = match (g.precision, &model_path) {
        (Some(p), _) => p,
        (None, Some(m)) => peek_dtype(m)?,
        (None, None) => Dtype::F32,
    };
    let echo = json!({
        "command": name,
        "seed": seed,
        "precision": dtype,
        "data_dir": data_dir,
        name: args.clone(),
    });
    let ctx = Ctx { seed, data_dir, echo };
    match dtype {
        Dtype::F32 => dispatch::<f32>(&ctx, name, args),
        Dtype::F64 => dispatch::<f64>(&ctx, name, args),
    }
}

fn dispatch<T: Scalar>(ctx: &Ctx, name: &str, args: Value) -> Result<Value> {
    match name {
        "train" => train::<T>(ctx, &serde_json::from_value(args)?),
        "attack" => attack::<T>(ctx, &serde_json::from_value(args)?),
        "tup" => tup::<T>(ctx, &serde_json::from_value(args)?),
        "rat" => rat::<T>(ctx, &serde_json::from_value(args)?),
        "eval" => eval::<T>(ctx, &serde_json::from_value(args)?),
        "sweep" => sweep::<T>(ctx, &serde_json::from_value(args)?),
        other => unreachable!("unknown command {other}"),
    }
}

trait Defaults {
    fn fill(&mut self);
}

fn defaults<A: Defaults>(a: &mut A) {
    a.fill();
}

impl Defaults for TrainArgs {
    fn fill(&mut self) {
        self.dataset.get_or_insert_with(|| "mnist".into());
        self.model.get_or_insert_with(|| "cnn".into());
        self.epochs.get_or_insert(5);
        self.batch_size.get_or_insert(64);
        self.lr.get_or_insert(1e-3);
        self.optimizer.get_or_insert_with(|| "adam".into());
    }
}

impl Defaults for AttackArgs {
    fn fill(&mut self) {
        self.method.get_or_insert_with(|| "pgd".into());
        self.eps.get_or_insert(0.3);
        self.iters.get_or_insert(40);
        self.dataset.get_or_insert_with(|| "mnist".into());
        self.split.get_or_insert_with(|| "test".into());
        self.count.get_or_insert(100);
        self.delta.get_or_insert(0.2);
    }
}

impl Defaults for TupArgs {
    fn fill(&mut self) {
        self.eta.get_or_insert(0.8);
        self.delta.get_or_insert(0.1);
        self.x_size.get_or_insert(100);
        self.max_passes.get_or_insert(10);
        self.solver_eps.get_or_insert(1.0);
        self.dataset.get_or_insert_with(|| "mnist".into());
        self.pool.get_or_insert(10_000);
    }
}

impl Defaults for RatArgs {
    fn fill(&mut self) {
        self.epochs.get_or_insert(10);
        self.batch_size.get_or_insert(64);
        self.lr.get_or_insert(1e-3);
        self.eta.get_or_insert(0.8);
        self.dataset.get_or_insert_with(|| "mnist".into());
        self.subset.get_or_insert(10_000);
        self.tup_subset.get_or_insert(1000);
    }
}

impl Defaults for EvalArgs {
    fn fill(&mut self) {
        self.dataset.get_or_insert_with(|| "mnist".into());
        self.testset.get_or_insert_with(|| "test".into());
        self.attacks.get_or_insert_with(|| vec!["identity".into()]);
        self.eps.get_or_insert(0.3);
        self.iters.get_or_insert(40);
        self.format.get_or_insert_with(|| "json".into());
        self.experiment.get_or_insert_with(|| "eval".into());
    }
}

impl Defaults for SweepArgs {
    fn fill(&mut self) {
        self.eta.get_or_insert(0.8);
        self.delta.get_or_insert(0.1);
        self.x_size.get_or_insert(100);
        self.trials.get_or_insert(3);
        self.dataset.get_or_insert_with(|| "mnist".into());
        self.pool.get_or_insert(10_000);
        self.val_size.get_or_insert(1000);
        self.format.get_or_insert_with(|| "json".into());
        if self.experiment.is_none() {
            self.experiment = Some(format!("sweep-{}", self.kind.as_deref().unwrap_or("k")));
        }
    }
}

fn is_train_split(split: &str) -> Result<bool> {
    match split {
        "train" => Ok(true),
        "test" => Ok(false),
        other => Err(Error::Config(format!("unknown split `{other}` (expected train or test)"))),
    }
}

fn num_classes(dataset: &str) -> usize {
    if dataset == "synthetic" {
        SYNTHETIC_MEANS.len()
    } else {
        10
    }
}

fn load_dataset<T: Scalar>(ctx: &Ctx, name: &str, train: bool) -> Result<LabeledDataset<T>> {
    let started = Instant::now();
    let ds = match name {
        "mnist" => idx::load_mnist_dir(&ctx.data_dir.join("mnist"), train)?,
        "cifar10" => cifar::load_cifar10_dir(&ctx.data_dir.join("cifar-10-batches-bin"), train)?,
        "synthetic" => {
            let (n, seed) = if train { (300, ctx.seed) } else { (100, ctx.seed.wrapping_add(1)) };
            let mut ds = make_synthetic_gaussians(n, &SYNTHETIC_MEANS, 0.08, seed)?;
            ds.name = format!("synthetic-{}", if train { "train" } else { "test" });
            ds
        }
        other => return Err(Error::Config(format!("unknown dataset `{other}` (expected mnist, cifar10 or synthetic)"))),
    };
    info!("loaded {} ({} samples) in {:.1}s", ds.name, ds.len(), started.elapsed().as_secs_f64());
    Ok(ds)
}

fn head<T: Scalar>(ds: LabeledDataset<T>, n: Option<usize>) -> LabeledDataset<T> {
    match n {
        Some(n) if n < ds.len() => ds.head(n),
        _ => ds,
    }
}

fn load_model<T: Scalar>(path: &Path) -> Result<Classifier<T>> {
    let stored = peek_dtype(path)?;
    if stored != T::DTYPE {
        warn!("{} is stored as {}, converting to {}", path.display(), stored.as_str(), T::DTYPE.as_str());
    }
    Ok(match stored {
        Dtype::F32 => load_checkpoint::<f32>(path)?.cast(),
        Dtype::F64 => load_checkpoint::<f64>(path)?.cast(),
    })
}

fn load_perturbation<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    Ok(match peek_dtype(path)? {
        Dtype::F32 => load_array::<f32>(path)?.1.cast(),
        Dtype::F64 => load_array::<f64>(path)?.1.cast(),
    })
}

fn load_tup_any<T: Scalar>(path: &Path) -> Result<(Tensor<T>, TupRecord)> {
    if !sidecar_path(path).exists() {
        return Err(Error::ArtifactNotFound(sidecar_path(path)));
    }
    Ok(match peek_dtype(path)? {
        Dtype::F32 => {
            let (r, rec) = load_tup::<f32>(path)?;
            (r.cast(), rec)
        }
        Dtype::F64 => {
            let (r, rec) = load_tup::<f64>(path)?;
            (r.cast(), rec)
        }
    })
}

fn file_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?))
}

fn lineage(ctx: &Ctx) -> std::collections::BTreeMap<String, String> {
    [("config".to_string(), ctx.echo.to_string())].into_iter().collect()
}

fn train<T: Scalar>(ctx: &Ctx, a: &TrainArgs) -> Result<Value> {
    let out = required(&a.out, "out")?;
    let name = a.dataset.as_deref().unwrap_or("mnist");
    let data = head(load_dataset::<T>(ctx, name, true)?, a.subset);
    let arch: Architecture = parse(a.model.as_deref().unwrap_or("cnn"), "architecture")?;
    let optimizer = match a.optimizer.as_deref().unwrap_or("adam") {
        "adam" => OptimizerKind::adam(),
        "sgd" => OptimizerKind::sgd(),
        other => return Err(Error::Config(format!("unknown optimizer `{other}` (expected adam or sgd)"))),
    };
    let cfg = TrainConfig {
        epochs: required(&a.epochs, "epochs")?,
        batch_size: required(&a.batch_size, "batch-size")?,
        learning_rate: required(&a.lr, "lr")?,
        optimizer,
        seed: ctx.seed,
        precision: T::DTYPE,
    };
    let mut model = Classifier::<T>::new(arch, data.sample_shape(), num_classes(name), ctx.seed)?;
    let log = train_standard(&mut model, &data, &cfg)?;
    model.lineage.extend(lineage(ctx));
    model.lineage.insert("dataset".into(), data.fingerprint());
    save_checkpoint(&model, &out)?;
    Ok(json!({
        "out": out,
        "model_hash": model_hash(&model),
        "epoch_losses": log.epoch_losses,
        "train_accuracy": clean_accuracy(&model, &data)?.value,
    }))
}

fn stack_deltas<T: Scalar>(shape: &[usize], deltas: &[Tensor<T>]) -> Result<Tensor<T>> {
    let rows: Vec<&[T]> = deltas.iter().map(|d| d.data()).collect();
    Tensor::stack(shape, &rows)
}

fn attack<T: Scalar>(ctx: &Ctx, a: &AttackArgs) -> Result<Value> {
    let model_path = required(&a.model, "model")?;
    let out = required(&a.out, "out")?;
    let model = load_model::<T>(&model_path)?;
    let split = is_train_split(a.split.as_deref().unwrap_or("test"))?;
    let data = head(load_dataset::<T>(ctx, a.dataset.as_deref().unwrap_or("mnist"), split)?, a.count);
    let cfg = AttackConfig {
        epsilon: required(&a.eps, "eps")?,
        max_iters: required(&a.iters, "iters")?,
        seed: ctx.seed,
        ..AttackConfig::default()
    };
    cfg.validate()?;
    let method = a.method.as_deref().unwrap_or("pgd");
    let shape = data.sample_shape().to_vec();
    let (tensor, summary) = match method {
        "fgsm" | "pgd" => {
            let mut deltas = Vec::with_capacity(data.len());
            let mut hits = 0;
            for start in (0..data.len()).step_by(256) {
                let idx: Vec<usize> = (start..(start + 256).min(data.len())).collect();
                let x = data.images.gather_rows(&idx);
                let ys: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
                let res = if method == "fgsm" { fgsm_batch(&model, &x, &ys, false, &cfg)? } else { pgd_batch(&model, &x, &ys, false, &cfg)? };
                hits += res.iter().filter(|r| r.success).count();
                deltas.extend(res.into_iter().map(|r| r.delta));
            }
            let stacked = stack_deltas(&shape, &deltas)?;
            let acc = accuracy_under_attack(&model, &data, &AttackSpec::Identity, true)?.value;
            let adv = model.predict_all(&materialize(&data.images, &stacked, true)?)?;
            let adv_acc = MetricCell::ratio(adv.iter().zip(&data.labels).filter(|(p, y)| p == y).count(), data.len()).value;
            (stacked, json!({ "success": MetricCell::ratio(hits, data.len()), "clean_accuracy": acc, "adversarial_accuracy": adv_acc }))
        }
        "minimal" => {
            let k = model.num_classes();
            let mut deltas = Vec::with_capacity(data.len());
            let (mut solved, mut infeasible, mut norm_sum) = (0, 0, 0.0);
            for i in 0..data.len() {
                let y = data.labels[i];
                let t = a.target.unwrap_or((y + 1) % k);
                let x = data.images.row_tensor(i);
                if model.predict_one(&x)? == t {
                    deltas.push(Tensor::zeros(&shape));
                    continue;
                }
                match minimal_targeted(&model, &x, t, &cfg) {
                    Ok(r) => {
                        solved += 1;
                        norm_sum += r.achieved_norm;
                        deltas.push(r.delta);
                    }
                    Err(Error::Infeasible { .. }) => {
                        infeasible += 1;
                        deltas.push(Tensor::zeros(&shape));
                    }
                    Err(e) => return Err(e),
                }
            }
            let mean_norm = if solved == 0 { 0.0 } else { norm_sum / solved as f64 };
            (stack_deltas(&shape, &deltas)?, json!({ "solved": solved, "infeasible": infeasible, "mean_norm": mean_norm }))
        }
        "uni" => {
            let delta = required(&a.delta, "delta")?;
            let res = universal_untargeted_best_effort(&model, &data, cfg.epsilon, delta, 10, &cfg)?;
            if !res.converged {
                warn!("universal perturbation stopped at fooling rate {:.3} below 1 - delta", res.fooling_rate);
            }
            (res.result.delta, json!({ "fooling_rate": res.fooling_rate, "passes": res.passes, "converged": res.converged }))
        }
        other => return Err(Error::Config(format!("unknown attack method `{other}` (expected fgsm, pgd, minimal or uni)"))),
    };
    let mut lin = lineage(ctx);
    lin.insert("model_hash".into(), model_hash(&model));
    save_array(&tensor, method, lin, &out)?;
    Ok(json!({ "out": out, "method": method, "count": data.len(), "result": summary }))
}

fn tup<T: Scalar>(ctx: &Ctx, a: &TupArgs) -> Result<Value> {
    let model_path = required(&a.model, "model")?;
    let out = required(&a.out, "out")?;
    let target = required(&a.target, "target")?;
    let model = load_model::<T>(&model_path)?;
    let pool = head(load_dataset::<T>(ctx, a.dataset.as_deref().unwrap_or("mnist"), true)?, a.pool);
    let x = sample_x(&pool, &model, target, required(&a.x_size, "x-size")?, ctx.seed)?;
    let cfg = TupConfig {
        target,
        eta: required(&a.eta, "eta")?,
        delta: required(&a.delta, "delta")?,
        k: a.k,
        max_passes: required(&a.max_passes, "max-passes")?,
        project: true,
        solver: AttackConfig { seed: ctx.seed, ..AttackConfig::with_epsilon(required(&a.solver_eps, "solver-eps")?) },
        seed: ctx.seed,
    };
    let res = compute_tup(&model, &x, &cfg)?;
    let record = save_tup_with(&res, &model_hash(&model), ctx.echo.clone(), &out)?;
    Ok(json!({
        "out": out,
        "sidecar": sidecar_path(&out),
        "target": record.target,
        "final_success": record.final_success,
        "converged": record.converged,
        "passes_used": record.passes_used,
        "norm": res.r.linf_norm().as_f64(),
    }))
}

fn rat<T: Scalar>(ctx: &Ctx, a: &RatArgs) -> Result<Value> {
    let model_path = required(&a.model, "model")?;
    let out = required(&a.out, "out")?;
    let model = load_model::<T>(&model_path)?;
    let (r_t, target) = match &a.tup {
        Some(p) => {
            let (r, rec) = load_tup_any::<T>(p)?;
            if let Some(t) = a.target.filter(|&t| t != rec.target) {
                return Err(Error::Config(format!("--target {t} disagrees with the TUP's target {}", rec.target)));
            }
            (Some(r), rec.target)
        }
        None => (None, required(&a.target, "target")?),
    };
    let data = head(load_dataset::<T>(ctx, a.dataset.as_deref().unwrap_or("mnist"), true)?, a.subset);
    let cfg = RatConfig {
        target,
        epochs: required(&a.epochs, "epochs")?,
        batch_size: required(&a.batch_size, "batch-size")?,
        learning_rate: required(&a.lr, "lr")?,
        seed: ctx.seed,
        tup: TupConfig { eta: required(&a.eta, "eta")?, seed: ctx.seed, ..TupConfig::default() },
        tup_subset: required(&a.tup_subset, "tup-subset")?,
        ..RatConfig::default()
    };
    let outcome = rat_train(&model, &data, &cfg, r_t.as_ref())?;
    let mut retrained = outcome.model;
    retrained.lineage.extend(lineage(ctx));
    retrained.lineage.insert("parent".into(), model_hash(&model));
    save_checkpoint(&retrained, &out)?;
    let tup_out = match &outcome.tup {
        Some(res) => {
            let p = PathBuf::from(format!("{}.tup", out.display()));
            save_tup_with(res, &model_hash(&model), ctx.echo.clone(), &p)?;
            Some(p)
        }
        None => None,
    };
    Ok(json!({
        "out": out,
        "model_hash": model_hash(&retrained),
        "target": target,
        "tup": tup_out,
        "partition": { "pool_t": outcome.partition.pool_t.len(), "pool_d1": outcome.partition.pool_d1.len(), "pool_d2": outcome.partition.pool_d2.len() },
        "fed": outcome.fed,
        "epoch_losses": outcome.log.epoch_losses,
    }))
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| p.display().to_string())
}

fn eval<T: Scalar>(ctx: &Ctx, a: &EvalArgs) -> Result<Value> {
    let started = Instant::now();
    let model_path = required(&a.model, "model")?;
    let dir = required(&a.report, "report")?;
    let format: ReportFormat = parse(a.format.as_deref().unwrap_or("json"), "format")?;
    let model = load_model::<T>(&model_path)?;
    let split = is_train_split(a.testset.as_deref().unwrap_or("test"))?;
    let data = head(load_dataset::<T>(ctx, a.dataset.as_deref().unwrap_or("mnist"), split)?, a.limit);
    let eps = required(&a.eps, "eps")?;
    let cfg = AttackConfig { max_iters: required(&a.iters, "iters")?, seed: ctx.seed, ..AttackConfig::with_epsilon(eps) };

    let mut report = EvalReport::new(a.experiment.clone().unwrap_or_else(|| "eval".into()), ctx.seed, ctx.echo.clone());
    report.provenance.insert("model".into(), model_hash(&model));
    report.provenance.insert("dataset".into(), data.fingerprint());

    let mut tups = Vec::new();
    for p in a.tup.iter().flatten() {
        let (r, rec) = load_tup_any::<T>(p)?;
        report.provenance.insert(format!("tup/{}", stem(p)), file_hash(p)?);
        tups.push((rec.target, r));
    }
    tups.sort_by_key(|(t, _)| *t);
    let uni = match &a.uni {
        Some(p) => {
            report.provenance.insert("uni".into(), file_hash(p)?);
            Some(load_perturbation::<T>(p)?)
        }
        None => None,
    };

    let mut rows = Vec::new();
    for name in a.attacks.iter().flatten() {
        match name.as_str() {
            "tup" => {
                if tups.is_empty() {
                    return Err(Error::Config("attack `tup` needs at least one --tup file".into()));
                }
                let mut success = Vec::new();
                for (t, r) in &tups {
                    let pts = exclude_label(&data, *t);
                    rows.push((format!("tup-t{t}"), accuracy_under_attack(&model, &pts, &AttackSpec::Tup(Some(r.clone())), true)?));
                    let eligible = exclude_predicted(&model, &data, *t)?;
                    let s = if eligible.is_empty() { 0.0 } else { success_rate(&model, &eligible.images, r, *t, true)? };
                    success.push((format!("t{t}"), MetricCell::new(s, eligible.len())));
                }
                report.tables.push(MetricTable::series("tup-success", "targeted_success", success));
            }
            other => {
                let spec = match other {
                    "identity" => AttackSpec::Identity,
                    "uni" => AttackSpec::Uni(uni.clone()),
                    "fgsm" => AttackSpec::Fgsm(cfg.clone()),
                    "pgd" => AttackSpec::Pgd(cfg.clone()),
                    "minimal" => AttackSpec::Minimal { cfg: cfg.clone(), target: None },
                    _ => return Err(Error::Config(format!("unknown attack `{other}`"))),
                };
                let cell = accuracy_under_attack(&model, &data, &spec, true)?;
                rows.push((other.to_string(), cell));
            }
        }
    }
    report.tables.insert(0, MetricTable::series("accuracy", "accuracy", rows));

    if let Some(n) = a.heatmap {
        if tups.len() != model.num_classes() || tups.iter().enumerate().any(|(i, (t, _))| i != *t) {
            return Err(Error::Config("--heatmap needs exactly one --tup per class".into()));
        }
        let rs: Vec<Tensor<T>> = tups.iter().map(|(_, r)| r.clone()).collect();
        let h = heatmap_source_target(&model, &data, n, &HeatmapAttack::Tup { perturbations: &rs, clip: true })?;
        let (tt, tu) = h.tables("heatmap-tup");
        report.tables.extend([tt, tu]);
        let f = heatmap_source_target(&model, &data, n, &HeatmapAttack::Fgsm(AttackConfig::with_epsilon(eps)))?;
        let (ft, fu) = f.tables("heatmap-fgsm");
        report.tables.extend([ft, fu]);
    }

    if let Some(n) = a.edges {
        let params = CannyParams::default();
        let mut rows = Vec::new();
        for (t, r) in &tups {
            let idx = data.indices_of_class(*t);
            let imgs = data.images.gather_rows(&idx[..n.min(idx.len())]);
            match edge_cosine_similarity(r, &imgs, &params) {
                Ok(s) => rows.push((format!("tup-t{t}"), MetricCell::new(s.mean, s.used))),
                Err(Error::Precondition(m)) => warn!("edges for target {t}: {m}"),
                Err(e) => return Err(e),
            }
            if let Some(v) = &uni {
                if let Ok(s) = edge_cosine_similarity(v, &imgs, &params) {
                    rows.push((format!("uni-t{t}"), MetricCell::new(s.mean, s.used)));
                }
            }
            let ys: Vec<usize> = idx[..n.min(idx.len())].iter().map(|&i| data.labels[i]).collect();
            let res = fgsm_batch(&model, &imgs, &ys, false, &AttackConfig::with_epsilon(eps))?;
            let (mut sum, mut used) = (0.0, 0);
            for (i, r) in res.iter().enumerate() {
                if let Ok(s) = edge_cosine_similarity(&r.delta, &imgs.gather_rows(&[i]), &params) {
                    sum += s.mean;
                    used += 1;
                }
            }
            if used > 0 {
                rows.push((format!("fgsm-t{t}"), MetricCell::new(sum / used as f64, used)));
            }
        }
        report.tables.push(MetricTable::series("edges", "cosine", rows));
    }

    if let Some(others) = &a.transfer_to {
        if tups.is_empty() {
            return Err(Error::Config("--transfer-to needs at least one --tup file".into()));
        }
        let mut t = MetricTable::new("transfer", vec![stem(&model_path)], others.iter().map(|p| stem(p)).collect());
        for (j, p) in others.iter().enumerate() {
            let other = load_model::<T>(p)?;
            if other.input_shape() != model.input_shape() || other.num_classes() != model.num_classes() {
                return Err(Error::Shape(format!("model {} is not shape-compatible", p.display())));
            }
            report.provenance.insert(format!("transfer/{}", stem(p)), model_hash(&other));
            let (mut sum, mut count) = (0.0, 0);
            for (target, r) in &tups {
                let pts = exclude_label(&data, *target);
                sum += success_rate(&other, &pts.images, r, *target, true)?;
                count += pts.len();
            }
            t.set(0, j, MetricCell::new(sum / tups.len() as f64, count));
        }
        report.tables.push(t);
    }

    report.timings.insert("total".into(), started.elapsed().as_secs_f64());
    let files = emit_report(&report, &dir, format)?;
    Ok(json!({ "files": files, "accuracy": report.tables[0].clone() }))
}

fn sweep<T: Scalar>(ctx: &Ctx, a: &SweepArgs) -> Result<Value> {
    let kind: SweepKind = parse(&required(&a.kind, "kind")?, "sweep kind")?;
    let values = required(&a.values, "values")?;
    let model_path = required(&a.model, "model")?;
    let dir = required(&a.report, "report")?;
    let format: ReportFormat = parse(a.format.as_deref().unwrap_or("json"), "format")?;
    let model = load_model::<T>(&model_path)?;
    let val_size = required(&a.val_size, "val-size")?;
    let pool_size = required(&a.pool, "pool")?;
    let train = head(load_dataset::<T>(ctx, a.dataset.as_deref().unwrap_or("mnist"), true)?, Some(pool_size + val_size));
    let (pool, val) = split_train_val(&train, &SplitSpec { validation_size: val_size, seed: ctx.seed })?;
    let base = TupConfig {
        target: a.target.unwrap_or(0),
        eta: required(&a.eta, "eta")?,
        delta: required(&a.delta, "delta")?,
        seed: ctx.seed,
        ..TupConfig::default()
    };
    let points = match kind {
        SweepKind::XSize => {
            if values.iter().any(|v| v.fract() != 0.0 || *v < 1.0) {
                return Err(Error::Config("X sizes must be positive integers".into()));
            }
            let sizes: Vec<usize> = values.iter().map(|v| *v as usize).collect();
            size_of_x_sweep(&model, &pool, &val, &sizes, required(&a.trials, "trials")?, &base, ctx.seed)?
        }
        SweepKind::K | SweepKind::Eta => {
            let base = TupConfig { target: required(&a.target, "target")?, ..base };
            let x = sample_x(&pool, &model, base.target, required(&a.x_size, "x-size")?, ctx.seed)?;
            param_sweep(&model, &x, &val, kind, &values, &base)?
        }
    };
    let name = a.experiment.clone().unwrap_or_else(|| "sweep".into());
    let mut report = EvalReport::new(name, ctx.seed, ctx.echo.clone());
    report.provenance.insert("model".into(), model_hash(&model));
    report.provenance.insert("pool".into(), pool.fingerprint());
    report.provenance.insert("validation".into(), val.fingerprint());
    report.tables.push(sweep_table("sweep", &points));
    report.tables.push(MetricTable::series(
        "projections",
        "projections",
        points.iter().map(|p| (p.value.to_string(), MetricCell::new(p.projections as f64, p.trials))).collect(),
    ));
    for p in &points {
        report.timings.insert(format!("value={}", p.value), p.seconds);
    }
    let files = emit_report(&report, &dir, format)?;
    Ok(json!({ "files": files, "points": points }))
}
