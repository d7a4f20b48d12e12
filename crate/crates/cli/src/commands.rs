use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use linkgnn::autodiff::gradcheck::{check_all_ops, ParamCheck, REL_TOL};
use linkgnn::baselines::{mlp_forward, random_allocation, GaConfig, MlpMode, MlpModel};
use linkgnn::harness::{run_sweep, run_training_comparison, SweepArtifacts, DESK_GRID};
use linkgnn::lognn::{init_model, LognnModel};
use linkgnn::mec::{check_feasibility, generate_instance, total_delay, Allocation, McInstance};
use linkgnn::nn::{self, check_model_gradients, content_hash};
use linkgnn::seeding::derive_seed;
use linkgnn::trainer::{
    train_actor_critic, train_supervised, train_unsupervised, Dataset, TrainMethod, TrainResult,
};
use linkgnn::{Error, Result};
use serde::Serialize;
use serde_json::json;

use crate::config::{parse_size, CliConfig, ModelKind};

pub struct Context {
    pub config: CliConfig,
    pub out: PathBuf,
    pub desk_scale: bool,
}

impl Context {
    fn out_dir(&self) -> Result<&Path> {
        fs::create_dir_all(&self.out)?;
        Ok(&self.out)
    }

    fn path(&self, name: &str) -> Result<PathBuf> {
        Ok(self.out_dir()?.join(name))
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<String> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, &text)?;
    Ok(content_hash(text.as_bytes()))
}

const MANIFEST: &str = "manifest.json";
const INSTANCE_DIR: &str = "instances";

pub fn gen_data(ctx: &Context) -> Result<()> {
    let train = &ctx.config.train;
    train.validate()?;
    let data = Dataset::training(train)?;
    let dir = ctx.path(INSTANCE_DIR)?;
    fs::create_dir_all(&dir)?;
    let mut files = Vec::with_capacity(data.len());
    for (k, inst) in data.instances().iter().enumerate() {
        let name = format!("{INSTANCE_DIR}/{k:05}.json");
        fs::write(ctx.out.join(&name), serde_json::to_string(inst)?)?;
        files.push(name);
    }
    let manifest = json!({
        "kind": "dataset",
        "config": train,
        "seed": train.seed,
        "count": data.len(),
        "dataset_hash": data.content_hash()?,
        "files": files,
    });
    let hash = write_json(&ctx.path(MANIFEST)?, &manifest)?;
    println!("wrote {} instances to {}", data.len(), ctx.out.display());
    println!("manifest hash {hash}");
    Ok(())
}

/// Reads a directory written by `gen-data`.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join(MANIFEST);
    if !manifest_path.is_file() {
        return Err(Error::config(format!(
            "no dataset at {} (missing {MANIFEST})",
            dir.display()
        )));
    }
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(&manifest_path)?)?;
    let files = manifest["files"]
        .as_array()
        .ok_or_else(|| Error::config(format!("{} lists no files", manifest_path.display())))?;
    let instances = files
        .iter()
        .map(|f| {
            let name = f
                .as_str()
                .ok_or_else(|| Error::config("dataset manifest holds a non-string file name"))?;
            McInstance::from_json(&fs::read_to_string(dir.join(name))?)
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(instances)
}

enum AnyModel {
    Lognn(LognnModel),
    Mlp(MlpModel),
}

impl AnyModel {
    fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read model {}: {e}", path.display())))?;
        let value: serde_json::Value = serde_json::from_str(&text)?;
        match value["kind"].as_str() {
            Some("lognn") => Ok(AnyModel::Lognn(LognnModel::from_json(&text)?)),
            Some("mlp") => Ok(AnyModel::Mlp(MlpModel::from_json(&text)?)),
            other => Err(Error::config(format!(
                "{} has unknown model kind {other:?}",
                path.display()
            ))),
        }
    }

    fn allocate(&self, inst: &McInstance) -> Result<Allocation> {
        match self {
            AnyModel::Lognn(m) => nn::allocate(m, inst),
            AnyModel::Mlp(m) => mlp_forward(m, inst, MlpMode::DirectInference),
        }
    }

    fn hash(&self) -> Result<String> {
        match self {
            AnyModel::Lognn(m) => m.content_hash(),
            AnyModel::Mlp(m) => m.content_hash(),
        }
    }
}

fn train_model<M: nn::AllocationModel>(
    model: &mut M,
    data: &Dataset,
    ctx: &Context,
) -> TrainResult {
    let cfg = &ctx.config;
    match cfg.train.method {
        TrainMethod::Unsupervised => train_unsupervised(model, data, &cfg.train),
        TrainMethod::Supervised => {
            let ga = cfg.ga.as_ref().expect("checked before training");
            train_supervised(model, data, &cfg.train, ga)
        }
        TrainMethod::ActorCritic => train_actor_critic(model, data, &cfg.train),
    }
}

pub fn train(ctx: &Context) -> Result<()> {
    let cfg = &ctx.config;
    cfg.train.validate()?;
    if cfg.train.method == TrainMethod::Supervised {
        match &cfg.ga {
            None => return Err(Error::invalid("supervised training needs a ga section")),
            Some(ga) => ga.validate()?,
        }
    }
    let data = match &cfg.dataset {
        Some(dir) => load_dataset(dir)?,
        None => Dataset::training(&cfg.train)?,
    };
    let spec = &cfg.model;
    let config_hash = cfg.train.content_hash()?;
    let (mut model, result) = match spec.kind {
        ModelKind::Lognn => {
            let mut m = init_model(spec.seed, spec.hidden_dim, spec.n_layers)?;
            let r = train_model(&mut m, &data, ctx);
            m.train_config_hash = Some(config_hash);
            (AnyModel::Lognn(m), r)
        }
        ModelKind::Mlp => {
            let sizes = &cfg.train.size_distribution;
            if sizes.len() != 1 {
                return Err(Error::invalid("an MLP trains at exactly one (N, M)"));
            }
            let (n, m) = sizes[0];
            let mut mlp = MlpModel::with_shape(
                n,
                m,
                spec.hidden_dim,
                linkgnn::baselines::MLP_LAYERS,
                spec.seed,
            )?;
            let r = train_model(&mut mlp, &data, ctx);
            mlp.train_config_hash = Some(config_hash);
            (AnyModel::Mlp(mlp), r)
        }
    };
    let (log, failure) = match result {
        Ok(log) => (log, None),
        Err(a) => ((*a.partial).clone(), Some(Error::from(a))),
    };
    log.write_csv(fs::File::create(ctx.path("train_log.csv")?)?)?;
    if let Some(e) = failure {
        write_json(&ctx.path("train_manifest.json")?, &log)?;
        return Err(e);
    }
    let model_json = match &mut model {
        AnyModel::Lognn(m) => m.to_json()?,
        AnyModel::Mlp(m) => m.to_json()?,
    };
    fs::write(ctx.path("model.json")?, &model_json)?;
    let manifest = json!({
        "command": "train",
        "config": cfg,
        "seed": cfg.train.seed,
        "dataset_hash": log.dataset_hash,
        "model_hash": model.hash()?,
        "log": log,
    });
    write_json(&ctx.path(MANIFEST)?, &manifest)?;
    if let Some(last) = log.epochs.last() {
        println!(
            "epochs {}: train {:.5}, held-out {:.5}, {:.3}s per epoch",
            log.epochs.len(),
            last.train_obj,
            last.test_obj,
            log.mean_epoch_seconds()
        );
    }
    println!("model hash {}", model.hash()?);
    Ok(())
}

#[derive(Serialize)]
struct EvalRow {
    seed: u64,
    n: usize,
    m: usize,
    delay: f64,
    random_delay: f64,
    max_violation: f64,
}

pub fn eval(ctx: &Context) -> Result<()> {
    let cfg = &ctx.config;
    let path = cfg
        .eval
        .model
        .as_ref()
        .ok_or_else(|| Error::config("eval needs eval.model"))?;
    let model = AnyModel::load(path)?;
    let data = match &cfg.eval.dataset {
        Some(dir) => load_dataset(dir)?,
        None => {
            cfg.train.validate()?;
            Dataset::held_out(&cfg.train)?
        }
    };
    let mut rows = Vec::with_capacity(data.len());
    for inst in data.instances() {
        let alloc = model.allocate(inst)?;
        let report = check_feasibility(inst, &alloc);
        if !report.is_feasible() {
            return Err(Error::numeric(format!(
                "infeasible allocation on instance {}: {report}",
                inst.seed
            )));
        }
        rows.push(EvalRow {
            seed: inst.seed,
            n: inst.n_users,
            m: inst.n_servers,
            delay: total_delay(inst, &alloc)?,
            random_delay: total_delay(inst, &random_allocation(inst, inst.seed)?)?,
            max_violation: report.max_violation(),
        });
    }
    let mut w = csv::Writer::from_path(ctx.path("eval.csv")?)?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    let mean = |f: fn(&EvalRow) -> f64| rows.iter().map(f).sum::<f64>() / rows.len() as f64;
    let summary = json!({
        "command": "eval",
        "model_hash": model.hash()?,
        "dataset_hash": data.content_hash()?,
        "instances": rows.len(),
        "mean_delay": mean(|r| r.delay),
        "mean_random_delay": mean(|r| r.random_delay),
    });
    write_json(&ctx.path(MANIFEST)?, &summary)?;
    println!(
        "{} instances: mean delay {:.5} (random {:.5})",
        rows.len(),
        mean(|r| r.delay),
        mean(|r| r.random_delay)
    );
    Ok(())
}

fn load_named<T>(method: &str, path: &Path, load: impl Fn(&str) -> Result<T>) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| {
        Error::config(format!(
            "{method}: cannot read model file {}: {e}",
            path.display()
        ))
    })?;
    load(&text)
}

pub fn sweep(ctx: &Context) -> Result<()> {
    let cfg = &ctx.config;
    let mut spec = cfg.sweep.clone();
    if ctx.desk_scale {
        spec.server_counts = DESK_GRID.to_vec();
    }
    spec.validate()?;
    let ga = cfg.ga.clone().unwrap_or_else(|| GaConfig {
        generations: if ctx.desk_scale { 100 } else { 500 },
        seed: spec.seed,
        ..GaConfig::default()
    });
    let paths = &cfg.artifacts;
    let mut artifacts = SweepArtifacts {
        ga,
        ..SweepArtifacts::default()
    };
    if let Some(p) = &paths.lognn {
        artifacts.lognn = Some(load_named("lognn", p, LognnModel::from_json)?);
    }
    if let Some(p) = &paths.mlp_di {
        artifacts.mlp_di = Some(load_named("mlp_di", p, MlpModel::from_json)?);
    }
    for (key, p) in &paths.mlp_tr {
        let size = parse_size(key)?;
        let model = load_named("mlp_tr", p, MlpModel::from_json)?;
        if model.size() != size {
            return Err(Error::config(format!(
                "mlp_tr model {} is built for {:?}, listed under {key}",
                p.display(),
                model.size()
            )));
        }
        artifacts.mlp_tr.insert(size, model);
    }
    let result = run_sweep(&spec, &artifacts)?;
    result.write_csv(fs::File::create(ctx.path("sweep.csv")?)?)?;
    result.write_instances_csv(fs::File::create(ctx.path("sweep_instances.csv")?)?)?;
    let manifest = json!({
        "command": "sweep",
        "config": cfg,
        "spec": spec,
        "ga": artifacts.ga,
        "artifact_hashes": result.artifact_hashes,
    });
    write_json(&ctx.path(MANIFEST)?, &manifest)?;
    print!("{}", result.summary());
    Ok(())
}

pub fn bench(ctx: &Context) -> Result<()> {
    let report = run_training_comparison(&ctx.config.bench)?;
    report.write_csv(fs::File::create(ctx.path("comparison.csv")?)?)?;
    write_json(&ctx.path(MANIFEST)?, &report)?;
    println!(
        "{:<8} {:<14} {:>14} {:>14}  status",
        "backbone", "method", "epoch_seconds", "final_test"
    );
    for r in &report.runs {
        println!(
            "{:<8} {:<14} {:>14.5} {:>14.5}  {}",
            format!("{:?}", r.backbone).to_lowercase(),
            r.method.to_string(),
            r.log.mean_epoch_seconds(),
            r.log.final_test_obj().unwrap_or(f64::NAN),
            r.aborted.as_deref().unwrap_or("ok")
        );
    }
    Ok(())
}

pub fn gradcheck(ctx: &Context) -> Result<()> {
    let g = &ctx.config.gradcheck;
    if g.instances == 0 {
        return Err(Error::invalid("gradcheck.instances must be >= 1"));
    }
    let ops = check_all_ops(g.seed, 5, g.fault)?;
    let failed_ops: Vec<String> = ops
        .iter()
        .filter(|c| !c.passed)
        .map(|c| format!("{} (rel error {:.3e})", c.op, c.max_rel_error))
        .collect();

    let model = init_model(g.seed, g.hidden_dim, g.n_layers)?;
    let constants = ctx.config.train.constants;
    let mut overall = ParamCheck::default();
    let mut per_instance = BTreeMap::new();
    for k in 0..g.instances {
        let inst = generate_instance(
            g.n_users,
            g.n_servers,
            derive_seed(g.seed, &[k as u64]),
            &constants,
        )?;
        let check = check_model_gradients(&model, &inst, g.fault)?;
        println!(
            "instance {k}: {} parameters, {} failed, {} one-sided at a kink, max rel error {:.3e}",
            check.n_checked, check.n_failed, check.n_one_sided, check.max_rel_error
        );
        per_instance.insert(k, check.clone());
        overall.merge(check);
    }
    let report = json!({
        "command": "gradcheck",
        "config": g,
        "tolerance": REL_TOL,
        "ops": ops,
        "failed_ops": failed_ops,
        "instances": per_instance,
        "max_rel_error": overall.max_rel_error,
        "worst_param": overall.worst_param,
        "worst_index": overall.worst_index,
    });
    write_json(&ctx.path("gradcheck.json")?, &report)?;
    println!(
        "max rel error {:.3e} at {}[{}] (tolerance {REL_TOL:e})",
        overall.max_rel_error, overall.worst_param, overall.worst_index
    );
    if failed_ops.is_empty() && overall.passed() {
        println!("gradient check passed");
        Ok(())
    } else {
        let mut msg = String::from("gradient check failed");
        if !failed_ops.is_empty() {
            msg += &format!("; ops: {}", failed_ops.join(", "));
        }
        if !overall.passed() {
            msg += &format!(
                "; worst parameter {}[{}] rel error {:.3e}",
                overall.worst_param, overall.worst_index, overall.max_rel_error
            );
        }
        Err(Error::numeric(msg))
    }
}
