//! Experiment drivers: the size sweep with inference timing and the
//! training-method comparison.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::baselines::{ga_solve, mlp_forward, random_allocation, GaConfig, MlpMode, MlpModel};
use crate::error::{Error, Result};
use crate::lognn::{init_model, LognnModel, DEFAULT_HIDDEN, DEFAULT_LAYERS};
use crate::mec::{
    check_feasibility, generate_instance, total_delay, Allocation, McInstance, PhysicalConstants,
};
use crate::nn::{self, AllocationModel};
use crate::seeding::{derive_seed, stream};
use crate::trainer::{
    train_actor_critic, train_supervised, train_unsupervised, Dataset, TrainConfig, TrainLog,
    TrainMethod, TrainResult,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Lognn,
    MlpDi,
    MlpTr,
    Ga,
    Random,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Lognn,
        Method::MlpDi,
        Method::MlpTr,
        Method::Ga,
        Method::Random,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Lognn => "lognn",
            Method::MlpDi => "mlp_di",
            Method::MlpTr => "mlp_tr",
            Method::Ga => "ga",
            Method::Random => "random",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Server counts of the full grid.
pub const FULL_GRID: [usize; 18] = [
    2, 3, 4, 5, 6, 7, 15, 16, 17, 18, 19, 20, 25, 26, 27, 28, 29, 30,
];
/// Server counts of the reduced grid.
pub const DESK_GRID: [usize; 4] = [2, 4, 8, 10];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSpec {
    pub server_counts: Vec<usize>,
    /// `N = users_per_server * M`.
    pub users_per_server: usize,
    pub instances_per_size: usize,
    pub methods: Vec<Method>,
    pub seed: u64,
    pub inference_repetitions: usize,
    pub constants: PhysicalConstants,
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec {
            server_counts: FULL_GRID.to_vec(),
            users_per_server: 2,
            instances_per_size: 64,
            methods: Method::ALL.to_vec(),
            seed: 0,
            inference_repetitions: 3,
            constants: PhysicalConstants::default(),
        }
    }
}

impl SweepSpec {
    pub fn desk_scale() -> Self {
        SweepSpec {
            server_counts: DESK_GRID.to_vec(),
            ..SweepSpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.server_counts.is_empty() || self.server_counts.contains(&0) {
            return Err(Error::invalid(
                "server_counts must be non-empty and every M >= 1",
            ));
        }
        if self.users_per_server == 0 || self.instances_per_size == 0 {
            return Err(Error::invalid(
                "users_per_server and instances_per_size must be >= 1",
            ));
        }
        if self.methods.is_empty() {
            return Err(Error::invalid("no methods requested"));
        }
        if self.inference_repetitions < 3 {
            return Err(Error::invalid("inference_repetitions must be >= 3"));
        }
        self.constants.validate()
    }

    pub fn sizes(&self) -> Vec<(usize, usize)> {
        self.server_counts
            .iter()
            .map(|&m| (self.users_per_server * m, m))
            .collect()
    }

    /// Instance `k` of the cell with `m` servers.
    pub fn instance(&self, m: usize, k: usize) -> Result<McInstance> {
        let seed = derive_seed(self.seed, &[stream::SWEEP, m as u64, k as u64]);
        generate_instance(self.users_per_server * m, m, seed, &self.constants)
    }
}

/// Trained models and solver settings a sweep draws on.
#[derive(Clone, Debug, Default)]
pub struct SweepArtifacts {
    pub lognn: Option<LognnModel>,
    /// Applied to every size in direct-inference mode.
    pub mlp_di: Option<MlpModel>,
    /// One model per `(N, M)`.
    pub mlp_tr: BTreeMap<(usize, usize), MlpModel>,
    pub ga: GaConfig,
}

impl SweepArtifacts {
    /// Every artifact a spec needs but this set lacks.
    pub fn gaps(&self, spec: &SweepSpec) -> Vec<String> {
        let mut gaps = Vec::new();
        for method in &spec.methods {
            match method {
                Method::Lognn if self.lognn.is_none() => gaps.push("lognn: no model".to_string()),
                Method::MlpDi if self.mlp_di.is_none() => gaps.push("mlp_di: no model".to_string()),
                Method::MlpTr => {
                    for (n, m) in spec.sizes() {
                        if !self.mlp_tr.contains_key(&(n, m)) {
                            gaps.push(format!("mlp_tr: no model for N={n}, M={m}"));
                        }
                    }
                }
                _ => {}
            }
        }
        gaps
    }

    pub fn hashes(&self) -> Result<BTreeMap<String, String>> {
        let mut out = BTreeMap::new();
        if let Some(m) = &self.lognn {
            out.insert("lognn".to_string(), m.content_hash()?);
        }
        if let Some(m) = &self.mlp_di {
            out.insert("mlp_di".to_string(), m.content_hash()?);
        }
        for ((n, m), model) in &self.mlp_tr {
            out.insert(format!("mlp_tr_{n}x{m}"), model.content_hash()?);
        }
        out.insert(
            "ga_config".to_string(),
            nn::content_hash(serde_json::to_string(&self.ga)?.as_bytes()),
        );
        Ok(out)
    }

    pub fn solver(&self, method: Method, size: (usize, usize)) -> Result<Solver<'_>> {
        let missing = |what: &str| Error::config(format!("missing artifact: {what}"));
        Ok(match method {
            Method::Lognn => {
                Solver::Lognn(self.lognn.as_ref().ok_or_else(|| missing("lognn model"))?)
            }
            Method::MlpDi => Solver::Mlp(
                self.mlp_di
                    .as_ref()
                    .ok_or_else(|| missing("mlp_di model"))?,
                MlpMode::DirectInference,
            ),
            Method::MlpTr => Solver::Mlp(
                self.mlp_tr.get(&size).ok_or_else(|| {
                    missing(&format!("mlp_tr model for N={}, M={}", size.0, size.1))
                })?,
                MlpMode::Exact,
            ),
            Method::Ga => Solver::Ga(&self.ga),
            Method::Random => Solver::Random(self.ga.seed),
        })
    }
}

/// Something that maps an instance to an allocation.
#[derive(Clone, Copy, Debug)]
pub enum Solver<'a> {
    Lognn(&'a LognnModel),
    Mlp(&'a MlpModel, MlpMode),
    /// Seeded per instance from the config seed and the instance seed.
    Ga(&'a GaConfig),
    /// Base seed, combined with the instance seed.
    Random(u64),
}

impl Solver<'_> {
    pub fn solve(&self, instance: &McInstance) -> Result<Allocation> {
        match *self {
            Solver::Lognn(model) => nn::allocate(model, instance),
            Solver::Mlp(model, mode) => mlp_forward(model, instance, mode),
            Solver::Ga(config) => {
                let config = GaConfig {
                    seed: derive_seed(config.seed, &[stream::GA, instance.seed]),
                    ..config.clone()
                };
                Ok(ga_solve(instance, &config)?.allocation)
            }
            Solver::Random(seed) => random_allocation(
                instance,
                derive_seed(seed, &[stream::RANDOM_ALLOC, instance.seed]),
            ),
        }
    }
}

/// Median; the mean of the two middle values for even lengths.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let k = v.len() / 2;
    if v.is_empty() {
        f64::NAN
    } else if v.len() % 2 == 1 {
        v[k]
    } else {
        0.5 * (v[k - 1] + v[k])
    }
}

/// Median wall-clock seconds of `repetitions` solves after one untimed
/// warm-up call, together with the allocation.
pub fn measure_inference(
    solver: &Solver<'_>,
    instance: &McInstance,
    repetitions: usize,
) -> Result<(Allocation, f64)> {
    if repetitions < 3 {
        return Err(Error::invalid("repetitions must be >= 3"));
    }
    let mut alloc = solver.solve(instance)?;
    let mut times = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let start = Instant::now();
        alloc = solver.solve(instance)?;
        times.push(start.elapsed().as_secs_f64());
    }
    Ok((alloc, median(&times)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub method: Method,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub seed: u64,
    pub mean_delay: f64,
    pub mean_inference_seconds: f64,
    pub mean_delay_plus_inference: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceRow {
    pub method: Method,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "N")]
    pub n: usize,
    /// Instance seed.
    pub seed: u64,
    pub delay: f64,
    pub inference_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub spec: SweepSpec,
    pub artifact_hashes: BTreeMap<String, String>,
    pub rows: Vec<SweepRow>,
    pub instances: Vec<InstanceRow>,
}

fn write_rows<W: Write, T: Serialize>(out: W, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

impl SweepResult {
    pub fn row(&self, method: Method, m: usize) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.method == method && r.m == m)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        write_rows(out, &self.rows)
    }

    pub fn write_instances_csv<W: Write>(&self, out: W) -> Result<()> {
        write_rows(out, &self.instances)
    }

    /// Fixed-width table, one line per row.
    pub fn summary(&self) -> String {
        let mut s = format!(
            "{:<8} {:>4} {:>4} {:>12} {:>14} {:>14}\n",
            "method", "M", "N", "delay", "inference_s", "delay+inf"
        );
        for r in &self.rows {
            s += &format!(
                "{:<8} {:>4} {:>4} {:>12.5} {:>14.6} {:>14.5}\n",
                r.method.name(),
                r.m,
                r.n,
                r.mean_delay,
                r.mean_inference_seconds,
                r.mean_delay_plus_inference
            );
        }
        s
    }
}

/// Mean delay and mean inference time of every method on every grid size.
/// LOGNN uses its one model for every size.
pub fn run_sweep(spec: &SweepSpec, artifacts: &SweepArtifacts) -> Result<SweepResult> {
    spec.validate()?;
    artifacts.ga.validate()?;
    let gaps = artifacts.gaps(spec);
    if !gaps.is_empty() {
        return Err(Error::config(format!(
            "missing artifacts: {}",
            gaps.join("; ")
        )));
    }
    let mut rows = Vec::new();
    let mut instances = Vec::new();
    for (n, m) in spec.sizes() {
        let cell: Vec<McInstance> = (0..spec.instances_per_size)
            .map(|k| spec.instance(m, k))
            .collect::<Result<_>>()?;
        for &method in &spec.methods {
            let solver = artifacts.solver(method, (n, m))?;
            let (mut delay_sum, mut time_sum) = (0.0, 0.0);
            for inst in &cell {
                let (alloc, secs) = measure_inference(&solver, inst, spec.inference_repetitions)?;
                let report = check_feasibility(inst, &alloc);
                if !report.is_feasible() {
                    return Err(Error::numeric(format!(
                        "{method} produced an infeasible allocation at M={m}: {report}"
                    )));
                }
                let delay = total_delay(inst, &alloc)?;
                if !(delay.is_finite() && delay > 0.0) {
                    return Err(Error::numeric(format!("{method} delay {delay} at M={m}")));
                }
                delay_sum += delay;
                time_sum += secs;
                instances.push(InstanceRow {
                    method,
                    m,
                    n,
                    seed: inst.seed,
                    delay,
                    inference_seconds: secs,
                });
            }
            let count = cell.len() as f64;
            let (mean_delay, mean_time) = (delay_sum / count, time_sum / count);
            log::info!("{method} M={m}: delay {mean_delay:.5}, inference {mean_time:.6}s");
            rows.push(SweepRow {
                method,
                m,
                n,
                seed: spec.seed,
                mean_delay,
                mean_inference_seconds: mean_time,
                mean_delay_plus_inference: mean_delay + mean_time,
            });
        }
    }
    Ok(SweepResult {
        spec: spec.clone(),
        artifact_hashes: artifacts.hashes()?,
        rows,
        instances,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    Lognn,
    Mlp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ComparisonConfig {
    /// `size_distribution` must hold exactly one `(N, M)`; `method` is
    /// ignored.
    pub train: TrainConfig,
    /// Label solver for supervised runs.
    pub ga: GaConfig,
    pub model_seed: u64,
    pub hidden_dim: usize,
    pub n_layers: usize,
}

impl Default for ComparisonConfig {
    fn default() -> Self {
        ComparisonConfig {
            train: TrainConfig {
                size_distribution: vec![(4, 2)],
                n_train_samples: 256,
                ..TrainConfig::default()
            },
            ga: GaConfig {
                generations: 100,
                ..GaConfig::default()
            },
            model_seed: 0,
            hidden_dim: DEFAULT_HIDDEN,
            n_layers: DEFAULT_LAYERS,
        }
    }
}

impl ComparisonConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.ga.validate()?;
        if self.train.size_distribution.len() != 1 {
            return Err(Error::invalid("the comparison runs at exactly one (N, M)"));
        }
        if self.hidden_dim == 0 || self.n_layers == 0 {
            return Err(Error::invalid("hidden_dim and n_layers must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRun {
    pub backbone: Backbone,
    pub method: TrainMethod,
    pub log: TrainLog,
    /// Set when the run stopped early; `log` then holds the finished epochs.
    pub aborted: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub config: ComparisonConfig,
    pub runs: Vec<ComparisonRun>,
}

impl ComparisonReport {
    pub fn run(&self, backbone: Backbone, method: TrainMethod) -> Option<&ComparisonRun> {
        self.runs
            .iter()
            .find(|r| r.backbone == backbone && r.method == method)
    }

    /// Long-format curves: one row per backbone, method and epoch.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "backbone",
            "method",
            "epoch",
            "train_obj",
            "test_obj",
            "seconds",
        ])?;
        for r in &self.runs {
            let backbone = match r.backbone {
                Backbone::Lognn => "lognn",
                Backbone::Mlp => "mlp",
            };
            for e in &r.log.epochs {
                w.write_record([
                    backbone.to_string(),
                    r.method.to_string(),
                    e.epoch.to_string(),
                    e.train_obj.to_string(),
                    e.test_obj.to_string(),
                    e.seconds.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn train_with<M: AllocationModel>(
    model: &mut M,
    method: TrainMethod,
    data: &Dataset,
    config: &ComparisonConfig,
) -> TrainResult {
    let train = TrainConfig {
        method,
        ..config.train.clone()
    };
    match method {
        TrainMethod::Unsupervised => train_unsupervised(model, data, &train),
        TrainMethod::Supervised => train_supervised(model, data, &train, &config.ga),
        TrainMethod::ActorCritic => train_actor_critic(model, data, &train),
    }
}

/// Trains LOGNN and MLP backbones with each of the three methods on one
/// shared dataset. Every run starts from the same initialization for its
/// backbone. Aborted runs are kept with their partial logs.
pub fn run_training_comparison(config: &ComparisonConfig) -> Result<ComparisonReport> {
    config.validate()?;
    let data = Dataset::training(&config.train)?;
    let (n, m) = config.train.size_distribution[0];
    let methods = [
        TrainMethod::Unsupervised,
        TrainMethod::ActorCritic,
        TrainMethod::Supervised,
    ];
    let mut runs = Vec::new();
    for backbone in [Backbone::Lognn, Backbone::Mlp] {
        for method in methods {
            let started = Instant::now();
            let result = match backbone {
                Backbone::Lognn => {
                    let mut model =
                        init_model(config.model_seed, config.hidden_dim, config.n_layers)?;
                    train_with(&mut model, method, &data, config)
                }
                Backbone::Mlp => {
                    let mut model = MlpModel::new(n, m, config.model_seed)?;
                    train_with(&mut model, method, &data, config)
                }
            };
            log::info!(
                "{backbone:?} {method}: {:.1}s",
                started.elapsed().as_secs_f64()
            );
            runs.push(match result {
                Ok(log) => ComparisonRun {
                    backbone,
                    method,
                    log,
                    aborted: None,
                },
                Err(a) => {
                    log::warn!("{backbone:?} {method} aborted: {a}");
                    ComparisonRun {
                        backbone,
                        method,
                        aborted: Some(a.to_string()),
                        log: *a.partial,
                    }
                }
            });
        }
    }
    Ok(ComparisonReport {
        config: config.clone(),
        runs,
    })
}
