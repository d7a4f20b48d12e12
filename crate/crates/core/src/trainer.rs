//! Training loops for any [`AllocationModel`]: unsupervised descent on the
//! total delay, supervised regression onto GA labels, and a deterministic
//! actor-critic.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, AdamState, Tape, Var};
use crate::baselines::{ga_solve, GaConfig};
use crate::error::{Error, Result};
use crate::mec::{
    check_feasibility, generate_instance, total_delay, Allocation, McInstance, PhysicalConstants,
};
use crate::nn::{self, AllocationModel, Mlp, ParamSet};
use crate::objective::{self, AllocationVars};
use crate::seeding::{derive_seed, rng_from_seed, stream};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMethod {
    Unsupervised,
    Supervised,
    ActorCritic,
}

impl std::fmt::Display for TrainMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TrainMethod::Unsupervised => "unsupervised",
            TrainMethod::Supervised => "supervised",
            TrainMethod::ActorCritic => "actor_critic",
        })
    }
}

/// Instance sizes used by default: `N = 2M` for `M` in `2..=10`.
pub fn mixed_sizes(servers: std::ops::RangeInclusive<usize>) -> Vec<(usize, usize)> {
    servers.map(|m| (2 * m, m)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub n_train_samples: usize,
    /// Size of the held-out set, drawn from `size_distribution`.
    pub n_test_samples: usize,
    pub lr: f64,
    pub seed: u64,
    /// `(N, M)` pairs; each instance picks one uniformly.
    pub size_distribution: Vec<(usize, usize)>,
    pub method: TrainMethod,
    pub constants: PhysicalConstants,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 500,
            batch_size: 32,
            n_train_samples: 2048,
            n_test_samples: 256,
            lr: 1e-4,
            seed: 0,
            size_distribution: mixed_sizes(2..=10),
            method: TrainMethod::Unsupervised,
            constants: PhysicalConstants::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.n_train_samples == 0 {
            return Err(Error::invalid(
                "epochs, batch_size and n_train_samples must be >= 1",
            ));
        }
        if self.batch_size > self.n_train_samples {
            return Err(Error::invalid(format!(
                "batch_size {} exceeds n_train_samples {}",
                self.batch_size, self.n_train_samples
            )));
        }
        if self.n_test_samples == 0 {
            return Err(Error::invalid("n_test_samples must be >= 1"));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::invalid(format!(
                "lr must be finite and >= 0, got {}",
                self.lr
            )));
        }
        if self.size_distribution.is_empty() {
            return Err(Error::invalid("size_distribution is empty"));
        }
        if self
            .size_distribution
            .iter()
            .any(|&(n, m)| n == 0 || m == 0)
        {
            return Err(Error::invalid(
                "every (N, M) in size_distribution must be >= 1",
            ));
        }
        self.constants.validate()
    }

    pub fn content_hash(&self) -> Result<String> {
        Ok(nn::content_hash(serde_json::to_string(self)?.as_bytes()))
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

/// Unlabelled training instances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    instances: Vec<McInstance>,
}

impl Dataset {
    pub fn new(instances: Vec<McInstance>) -> Result<Self> {
        if instances.is_empty() {
            return Err(Error::invalid("dataset is empty"));
        }
        for inst in &instances {
            inst.validate()?;
        }
        Ok(Dataset { instances })
    }

    /// `count` instances; instance `k` draws its size and its data from
    /// seeds derived from `(seed, k)`.
    pub fn generate(
        count: usize,
        sizes: &[(usize, usize)],
        seed: u64,
        constants: &PhysicalConstants,
    ) -> Result<Self> {
        if sizes.is_empty() {
            return Err(Error::invalid("no instance sizes given"));
        }
        let instances = (0..count as u64)
            .map(|k| {
                let pick = derive_seed(seed, &[stream::SIZES, k]) % sizes.len() as u64;
                let (n, m) = sizes[pick as usize];
                generate_instance(n, m, derive_seed(seed, &[stream::TRAIN, k]), constants)
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(instances)
    }

    /// Training set described by a config.
    pub fn training(config: &TrainConfig) -> Result<Self> {
        Self::generate(
            config.n_train_samples,
            &config.size_distribution,
            config.seed,
            &config.constants,
        )
    }

    /// Held-out set described by a config, from a seed stream disjoint from
    /// the training one.
    pub fn held_out(config: &TrainConfig) -> Result<Self> {
        Self::generate(
            config.n_test_samples,
            &config.size_distribution,
            derive_seed(config.seed, &[stream::HELD_OUT]),
            &config.constants,
        )
    }

    pub fn instances(&self) -> &[McInstance] {
        &self.instances
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn content_hash(&self) -> Result<String> {
        Ok(nn::content_hash(
            serde_json::to_string(&self.instances)?.as_bytes(),
        ))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean total delay of the model's allocations on the training
    /// instances, measured during the epoch.
    pub train_obj: f64,
    /// Mean total delay on the held-out set after the epoch.
    pub test_obj: f64,
    /// Wall-clock of the epoch's training work, label generation included,
    /// held-out evaluation excluded.
    pub seconds: f64,
    /// The quantity actually minimized: delay, label MSE or critic MSE.
    pub train_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub method: TrainMethod,
    pub config: TrainConfig,
    pub seed: u64,
    pub dataset_hash: String,
    pub held_out_hash: String,
    pub epochs: Vec<EpochRecord>,
    /// Instances dropped because their label could not be computed.
    pub skipped_instances: usize,
    pub model_hash: Option<String>,
}

impl TrainLog {
    fn new(
        method: TrainMethod,
        config: &TrainConfig,
        data: &Dataset,
        held_out: &Dataset,
    ) -> Result<Self> {
        Ok(TrainLog {
            method,
            config: config.clone(),
            seed: config.seed,
            dataset_hash: data.content_hash()?,
            held_out_hash: held_out.content_hash()?,
            epochs: Vec::new(),
            skipped_instances: 0,
            model_hash: None,
        })
    }

    pub fn train_curve(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_obj).collect()
    }

    pub fn test_curve(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.test_obj).collect()
    }

    pub fn mean_epoch_seconds(&self) -> f64 {
        self.epochs.iter().map(|e| e.seconds).sum::<f64>() / self.epochs.len().max(1) as f64
    }

    pub fn final_test_obj(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.test_obj)
    }

    /// `epoch,train_obj,test_obj,seconds` rows.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["epoch", "train_obj", "test_obj", "seconds"])?;
        for e in &self.epochs {
            w.write_record([
                e.epoch.to_string(),
                e.train_obj.to_string(),
                e.test_obj.to_string(),
                e.seconds.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, csv_path: &Path, manifest_path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(csv_path)?)?;
        std::fs::write(manifest_path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Trailing moving average; the first `window - 1` entries average what is
/// available.
pub fn smoothed(values: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    (0..values.len())
        .map(|k| {
            let lo = (k + 1).saturating_sub(w);
            values[lo..=k].iter().sum::<f64>() / (k + 1 - lo) as f64
        })
        .collect()
}

/// A training run stopped early. `partial` holds the completed epochs.
#[derive(Debug, thiserror::Error)]
#[error("training aborted at epoch {epoch}, batch {batch}: {source}")]
pub struct Aborted {
    pub epoch: usize,
    pub batch: usize,
    pub source: Error,
    pub partial: Box<TrainLog>,
}

impl Aborted {
    fn before_start(method: TrainMethod, config: &TrainConfig, source: Error) -> Self {
        Aborted {
            epoch: 0,
            batch: 0,
            source,
            partial: Box::new(TrainLog {
                method,
                config: config.clone(),
                seed: config.seed,
                dataset_hash: String::new(),
                held_out_hash: String::new(),
                epochs: Vec::new(),
                skipped_instances: 0,
                model_hash: None,
            }),
        }
    }
}

impl From<Aborted> for Error {
    fn from(a: Aborted) -> Error {
        let context = format!("epoch {}, batch {}", a.epoch, a.batch);
        match a.source {
            Error::Numeric(m) => Error::Numeric(format!("{context}: {m}")),
            Error::InvalidArgument(m) => Error::InvalidArgument(format!("{context}: {m}")),
            Error::Config(m) => Error::Config(format!("{context}: {m}")),
            other => other,
        }
    }
}

pub type TrainResult = std::result::Result<TrainLog, Aborted>;

fn params_hash(params: &ParamSet) -> Result<String> {
    Ok(nn::content_hash(
        serde_json::to_string(&params.to_layers())?.as_bytes(),
    ))
}

fn ensure_feasible(instance: &McInstance, alloc: &Allocation) -> Result<()> {
    let report = check_feasibility(instance, alloc);
    if report.is_feasible() {
        Ok(())
    } else {
        Err(Error::numeric(format!("infeasible allocation: {report}")))
    }
}

/// Forward pass through the projection, with the feasibility check every
/// evaluated allocation must pass.
fn project_checked<M: AllocationModel + ?Sized>(
    model: &M,
    tape: &mut Tape,
    vars: &[Var],
    instance: &McInstance,
) -> Result<AllocationVars> {
    let logits = model.forward_logits(tape, vars, instance)?;
    let alloc = objective::project(tape, &logits, instance)?;
    ensure_feasible(instance, &alloc.to_allocation(tape))?;
    Ok(alloc)
}

fn grads_of(tape: &Tape, root: Var, vars: &[Var], params: &[Tensor]) -> Result<Vec<Tensor>> {
    let g = tape.backward(root)?;
    Ok(vars
        .iter()
        .zip(params)
        .map(|(&v, t)| g.get_or_zeros(v, t.shape()))
        .collect())
}

fn check_loss(value: f64, what: &str) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::numeric(format!("non-finite {what} {value}")))
    }
}

/// Mean of per-instance gradients, summed in instance order.
fn mean_grads(per_instance: Vec<Vec<Tensor>>) -> Option<Vec<Tensor>> {
    let count = per_instance.len() as f64;
    let mut it = per_instance.into_iter();
    let mut acc = it.next()?;
    for g in it {
        for (a, b) in acc.iter_mut().zip(&g) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += y;
            }
        }
    }
    for a in &mut acc {
        a.data_mut().iter_mut().for_each(|x| *x /= count);
    }
    Some(acc)
}

/// Mean total delay of the model's allocations; every allocation is checked
/// for feasibility.
pub fn evaluate<M: AllocationModel + ?Sized>(model: &M, data: &Dataset) -> Result<f64> {
    let delays = data
        .instances()
        .par_iter()
        .map(|inst| {
            let alloc = nn::allocate(model, inst)?;
            ensure_feasible(inst, &alloc)?;
            total_delay(inst, &alloc)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(delays.iter().sum::<f64>() / delays.len() as f64)
}

fn epoch_order(config: &TrainConfig, n: usize, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_from_seed(derive_seed(
        config.seed,
        &[stream::SHUFFLE, epoch as u64],
    )));
    order
}

/// Per-batch work of one training method.
trait Step {
    /// Returns `(sum of delays, sum of losses, instances used)` over the batch.
    fn batch(&mut self, epoch: usize, batch: &[usize]) -> Result<(f64, f64, usize)>;
}

/// Shared epoch loop: shuffling, timing, held-out evaluation, abort
/// handling.
fn run<M, S>(
    model_ref: impl Fn(&S) -> &M,
    step: &mut S,
    method: TrainMethod,
    data: &Dataset,
    config: &TrainConfig,
) -> TrainResult
where
    M: AllocationModel + ?Sized,
    S: Step,
{
    let abort = |epoch, batch, source, log: TrainLog| Aborted {
        epoch,
        batch,
        source,
        partial: Box::new(log),
    };
    let setup = config.validate().and_then(|_| {
        if data.len() < config.batch_size {
            return Err(Error::invalid(format!(
                "dataset has {} instances, fewer than batch_size {}",
                data.len(),
                config.batch_size
            )));
        }
        let held_out = Dataset::held_out(config)?;
        let log = TrainLog::new(method, config, data, &held_out)?;
        Ok((held_out, log))
    });
    let (held_out, mut log) = match setup {
        Ok(v) => v,
        Err(e) => return Err(Aborted::before_start(method, config, e)),
    };

    for epoch in 1..=config.epochs {
        let start = Instant::now();
        let order = epoch_order(config, data.len(), epoch);
        let (mut delay_sum, mut loss_sum, mut used) = (0.0, 0.0, 0usize);
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            match step.batch(epoch, batch) {
                Ok((d, l, n)) => {
                    delay_sum += d;
                    loss_sum += l;
                    used += n;
                    log.skipped_instances += batch.len() - n;
                }
                Err(e) => return Err(abort(epoch, b + 1, e, log)),
            }
        }
        let seconds = start.elapsed().as_secs_f64().max(1e-9);
        let test_obj = match evaluate(model_ref(step), &held_out) {
            Ok(v) => v,
            Err(e) => return Err(abort(epoch, 0, e, log)),
        };
        let denom = used.max(1) as f64;
        log.epochs.push(EpochRecord {
            epoch,
            train_obj: delay_sum / denom,
            test_obj,
            seconds,
            train_loss: loss_sum / denom,
        });
        log::debug!(
            "{method} epoch {epoch}: train {:.5} test {:.5} ({seconds:.3}s)",
            delay_sum / denom,
            test_obj
        );
    }
    log.model_hash = params_hash(model_ref(step).params()).ok();
    Ok(log)
}

struct Unsupervised<'a, M: ?Sized> {
    model: &'a mut M,
    adam: AdamState,
    data: &'a Dataset,
}

impl<M: AllocationModel + ?Sized> Step for Unsupervised<'_, M> {
    fn batch(&mut self, _epoch: usize, batch: &[usize]) -> Result<(f64, f64, usize)> {
        let model = &*self.model;
        let data = self.data;
        let results = batch
            .par_iter()
            .map(|&k| {
                let inst = &data.instances()[k];
                model.check_instance(inst)?;
                let mut tape = Tape::new();
                let params = model.params().tensors();
                let vars = nn::bind(&mut tape, params, true);
                let alloc = project_checked(model, &mut tape, &vars, inst)?;
                let root = objective::total_delay(&mut tape, &alloc, inst)?;
                let loss = tape.scalar(root);
                check_loss(loss, "loss")?;
                Ok((loss, grads_of(&tape, root, &vars, params)?))
            })
            .collect::<Result<Vec<_>>>()?;
        let total: f64 = results.iter().map(|r| r.0).sum();
        let grads =
            mean_grads(results.into_iter().map(|r| r.1).collect()).expect("batch is non-empty");
        self.adam
            .step(self.model.params_mut().tensors_mut(), &grads)?;
        Ok((total, total, batch.len()))
    }
}

/// Descends the mean total delay of the model's own allocations. No labels
/// are involved.
pub fn train_unsupervised<M: AllocationModel + ?Sized>(
    model: &mut M,
    data: &Dataset,
    config: &TrainConfig,
) -> TrainResult {
    let adam = AdamState::new(config.adam(), model.params().tensors());
    let mut step = Unsupervised { model, adam, data };
    run(
        |s: &Unsupervised<M>| &*s.model,
        &mut step,
        TrainMethod::Unsupervised,
        data,
        config,
    )
}

/// Mean squared error between the model's projected allocation and
/// `label`, with its gradient. Also returns the allocation's total delay.
pub fn supervised_loss_and_gradients<M: AllocationModel + ?Sized>(
    model: &M,
    instance: &McInstance,
    label: &Allocation,
) -> Result<(f64, f64, Vec<Tensor>)> {
    model.check_instance(instance)?;
    let (n, m) = (instance.n_users, instance.n_servers);
    for t in [&label.offload, &label.power, &label.compute] {
        if t.shape() != (n, m) {
            return Err(Error::invalid("label shape differs from the instance"));
        }
    }
    let mut tape = Tape::new();
    let params = model.params().tensors();
    let vars = nn::bind(&mut tape, params, true);
    let alloc = project_checked(model, &mut tape, &vars, instance)?;
    let delay = total_delay(instance, &alloc.to_allocation(&tape))?;
    let mut parts = Vec::with_capacity(3);
    for (v, target) in [
        (alloc.offload, &label.offload),
        (alloc.power, &label.power),
        (alloc.compute, &label.compute),
    ] {
        let t = tape.constant(target.clone());
        let diff = tape.sub(v, t)?;
        let sq = tape.mul(diff, diff)?;
        parts.push(tape.sum(sq)?);
    }
    let s = tape.add(parts[0], parts[1])?;
    let s = tape.add(s, parts[2])?;
    let root = tape.scale(s, 1.0 / (3 * n * m) as f64)?;
    let loss = tape.scalar(root);
    check_loss(loss, "label loss")?;
    Ok((loss, delay, grads_of(&tape, root, &vars, params)?))
}

struct Supervised<'a, M: ?Sized> {
    model: &'a mut M,
    adam: AdamState,
    data: &'a Dataset,
    ga: GaConfig,
    seed: u64,
}

impl<M: AllocationModel + ?Sized> Step for Supervised<'_, M> {
    fn batch(&mut self, epoch: usize, batch: &[usize]) -> Result<(f64, f64, usize)> {
        let model = &*self.model;
        let (data, seed) = (self.data, self.seed);
        let labels: Vec<Option<Allocation>> = batch
            .par_iter()
            .map(|&k| {
                let ga = GaConfig {
                    seed: derive_seed(seed, &[stream::LABELS, epoch as u64, k as u64]),
                    ..self.ga.clone()
                };
                match ga_solve(&data.instances()[k], &ga) {
                    Ok(r) => Some(r.allocation),
                    Err(e) => {
                        log::warn!("no label for instance {k} in epoch {epoch}: {e}");
                        None
                    }
                }
            })
            .collect();
        let results = batch
            .par_iter()
            .zip(&labels)
            .filter_map(|(&k, label)| label.as_ref().map(|l| (k, l)))
            .map(|(k, label)| supervised_loss_and_gradients(model, &data.instances()[k], label))
            .collect::<Result<Vec<_>>>()?;
        let used = results.len();
        let loss: f64 = results.iter().map(|r| r.0).sum();
        let delay: f64 = results.iter().map(|r| r.1).sum();
        if let Some(grads) = mean_grads(results.into_iter().map(|r| r.2).collect()) {
            self.adam
                .step(self.model.params_mut().tensors_mut(), &grads)?;
        }
        Ok((delay, loss, used))
    }
}

/// Regresses the model's allocation onto GA solutions. A fresh label is
/// computed for every instance in every epoch with `ga.generations` as the
/// budget, and its cost is part of the epoch time.
pub fn train_supervised<M: AllocationModel + ?Sized>(
    model: &mut M,
    data: &Dataset,
    config: &TrainConfig,
    ga: &GaConfig,
) -> TrainResult {
    if let Err(e) = ga.validate() {
        return Err(Aborted::before_start(TrainMethod::Supervised, config, e));
    }
    let adam = AdamState::new(config.adam(), model.params().tensors());
    let mut step = Supervised {
        model,
        adam,
        data,
        ga: ga.clone(),
        seed: config.seed,
    };
    run(
        |s: &Supervised<M>| &*s.model,
        &mut step,
        TrainMethod::Supervised,
        data,
        config,
    )
}

pub const CRITIC_LAYERS: usize = 4;
pub const CRITIC_HIDDEN: usize = 64;

/// Perceptron predicting the total delay of `(instance, allocation)` at a
/// fixed size. Input: `[h, d, f^s, x, p, f]`, all row-major.
#[derive(Clone, Debug)]
pub struct Critic {
    n_users: usize,
    n_servers: usize,
    net: Mlp,
    params: ParamSet,
    /// Target normalization, fixed from the first batch seen.
    norm: Option<(f64, f64)>,
}

impl Critic {
    pub fn new(n_users: usize, n_servers: usize, seed: u64) -> Result<Self> {
        let nm = n_users * n_servers;
        let mut dims = vec![nm + n_users + n_servers + 3 * nm];
        dims.extend([CRITIC_HIDDEN; CRITIC_LAYERS - 1]);
        dims.push(1);
        let net = Mlp::new(dims)?;
        let mut params = ParamSet::new();
        net.init(&mut rng_from_seed(seed), "critic", &mut params);
        Ok(Critic {
            n_users,
            n_servers,
            net,
            params,
            norm: None,
        })
    }

    fn check(&self, instance: &McInstance) -> Result<()> {
        if (instance.n_users, instance.n_servers) != (self.n_users, self.n_servers) {
            return Err(Error::invalid(format!(
                "critic built for N={}, M={} cannot take N={}, M={}",
                self.n_users, self.n_servers, instance.n_users, instance.n_servers
            )));
        }
        Ok(())
    }

    fn instance_features(instance: &McInstance) -> Tensor {
        let mut x = instance.channel_gain.data().to_vec();
        x.extend(&instance.task_size);
        x.extend(&instance.server_compute);
        Tensor::row_vector(&x)
    }

    /// Normalized prediction on the tape.
    fn record(
        &self,
        tape: &mut Tape,
        params: &[Var],
        instance: &McInstance,
        alloc: &AllocationVars,
    ) -> Result<Var> {
        let nm = self.n_users * self.n_servers;
        let mut parts = vec![tape.constant(Self::instance_features(instance))];
        for v in [alloc.offload, alloc.power, alloc.compute] {
            parts.push(tape.reshape(v, 1, nm)?);
        }
        let input = tape.concat_cols(&parts)?;
        self.net.record(tape, params, input)
    }

    fn set_norm(&mut self, targets: &[f64]) {
        if self.norm.is_none() {
            let n = targets.len() as f64;
            let mean = targets.iter().sum::<f64>() / n;
            let var = targets.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n;
            let std = var.sqrt().max(1e-3 * mean.abs()).max(1e-12);
            self.norm = Some((mean, std));
        }
    }

    fn norm(&self) -> (f64, f64) {
        self.norm.unwrap_or((0.0, 1.0))
    }

    /// Predicted total delay.
    pub fn predict(&self, instance: &McInstance, alloc: &Allocation) -> Result<f64> {
        self.check(instance)?;
        let mut tape = Tape::new();
        let vars = nn::bind(&mut tape, self.params.tensors(), false);
        let a = AllocationVars {
            offload: tape.constant(alloc.offload.clone()),
            power: tape.constant(alloc.power.clone()),
            compute: tape.constant(alloc.compute.clone()),
        };
        let out = self.record(&mut tape, &vars, instance, &a)?;
        let (mean, std) = self.norm();
        Ok(mean + std * tape.scalar(out))
    }

    /// One Adam step on the normalized squared error. Returns the batch MSE
    /// in delay units, measured before the step.
    fn fit_batch(
        &mut self,
        adam: &mut AdamState,
        samples: &[(&McInstance, &Allocation, f64)],
    ) -> Result<f64> {
        let targets: Vec<f64> = samples.iter().map(|s| s.2).collect();
        self.set_norm(&targets);
        let (mean, std) = self.norm();
        let critic = &*self;
        let results = samples
            .par_iter()
            .map(|&(inst, alloc, y)| {
                critic.check(inst)?;
                let mut tape = Tape::new();
                let params = critic.params.tensors();
                let vars = nn::bind(&mut tape, params, true);
                let a = AllocationVars {
                    offload: tape.constant(alloc.offload.clone()),
                    power: tape.constant(alloc.power.clone()),
                    compute: tape.constant(alloc.compute.clone()),
                };
                let out = critic.record(&mut tape, &vars, inst, &a)?;
                let t = tape.constant(Tensor::scalar((y - mean) / std));
                let diff = tape.sub(out, t)?;
                let root = tape.mul(diff, diff)?;
                let loss = tape.scalar(root);
                check_loss(loss, "critic loss")?;
                Ok((loss, grads_of(&tape, root, &vars, params)?))
            })
            .collect::<Result<Vec<_>>>()?;
        let mse = results.iter().map(|r| r.0).sum::<f64>() / results.len() as f64 * std * std;
        if let Some(grads) = mean_grads(results.into_iter().map(|r| r.1).collect()) {
            adam.step(self.params.tensors_mut(), &grads)?;
        }
        Ok(mse)
    }
}

/// The single `(N, M)` an actor-critic run is restricted to.
fn fixed_size(data: &Dataset) -> Result<(usize, usize)> {
    let first = &data.instances()[0];
    let size = (first.n_users, first.n_servers);
    if data
        .instances()
        .iter()
        .any(|i| (i.n_users, i.n_servers) != size)
    {
        return Err(Error::invalid(
            "actor-critic needs every instance at one (N, M)",
        ));
    }
    Ok(size)
}

struct ActorCritic<'a, M: ?Sized> {
    model: &'a mut M,
    actor_adam: AdamState,
    critic: Critic,
    critic_adam: AdamState,
    data: &'a Dataset,
}

impl<M: AllocationModel + ?Sized> Step for ActorCritic<'_, M> {
    fn batch(&mut self, _epoch: usize, batch: &[usize]) -> Result<(f64, f64, usize)> {
        let data = self.data;
        let actor = &*self.model;
        let played = batch
            .par_iter()
            .map(|&k| {
                let inst = &data.instances()[k];
                let alloc = nn::allocate(actor, inst)?;
                ensure_feasible(inst, &alloc)?;
                let d = total_delay(inst, &alloc)?;
                Ok((alloc, d))
            })
            .collect::<Result<Vec<_>>>()?;
        let delay_sum: f64 = played.iter().map(|p| p.1).sum();

        let samples: Vec<(&McInstance, &Allocation, f64)> = batch
            .iter()
            .zip(&played)
            .map(|(&k, (a, d))| (&data.instances()[k], a, *d))
            .collect();
        let critic_mse = self.critic.fit_batch(&mut self.critic_adam, &samples)?;

        let critic = &self.critic;
        let grads = batch
            .par_iter()
            .map(|&k| {
                let inst = &data.instances()[k];
                let mut tape = Tape::new();
                let params = actor.params().tensors();
                let vars = nn::bind(&mut tape, params, true);
                let cvars = nn::bind(&mut tape, critic.params.tensors(), false);
                let alloc = project_checked(actor, &mut tape, &vars, inst)?;
                let root = critic.record(&mut tape, &cvars, inst, &alloc)?;
                check_loss(tape.scalar(root), "critic estimate")?;
                grads_of(&tape, root, &vars, params)
            })
            .collect::<Result<Vec<_>>>()?;
        let grads = mean_grads(grads).expect("batch is non-empty");
        self.actor_adam
            .step(self.model.params_mut().tensors_mut(), &grads)?;
        Ok((delay_sum, critic_mse * batch.len() as f64, batch.len()))
    }
}

/// Deterministic actor-critic: per batch, the critic regresses the true
/// delay of the actor's allocations, then the actor descends the critic's
/// estimate. All instances must share one size.
pub fn train_actor_critic<M: AllocationModel + ?Sized>(
    model: &mut M,
    data: &Dataset,
    config: &TrainConfig,
) -> TrainResult {
    let setup = fixed_size(data).and_then(|(n, m)| {
        if config.size_distribution.iter().any(|&s| s != (n, m)) {
            return Err(Error::invalid(
                "actor-critic needs a single size in size_distribution",
            ));
        }
        Critic::new(n, m, derive_seed(config.seed, &[stream::INIT, 1]))
    });
    let critic = match setup {
        Ok(c) => c,
        Err(e) => return Err(Aborted::before_start(TrainMethod::ActorCritic, config, e)),
    };
    let mut step = ActorCritic {
        actor_adam: AdamState::new(config.adam(), model.params().tensors()),
        critic_adam: AdamState::new(config.adam(), critic.params.tensors()),
        critic,
        model,
        data,
    };
    run(
        |s: &ActorCritic<M>| &*s.model,
        &mut step,
        TrainMethod::ActorCritic,
        data,
        config,
    )
}

/// Outcome of fitting a critic to a frozen actor.
#[derive(Clone, Debug)]
pub struct CriticFit {
    pub critic: Critic,
    /// Critic MSE on the fitted samples after training, in delay units.
    pub final_mse: f64,
    /// Variance of the delay targets.
    pub target_variance: f64,
}

/// Trains a fresh critic on the delays of a frozen actor's allocations.
pub fn fit_critic<M: AllocationModel + ?Sized>(
    actor: &M,
    data: &Dataset,
    config: &TrainConfig,
) -> Result<CriticFit> {
    config.validate()?;
    let (n, m) = fixed_size(data)?;
    let played = data
        .instances()
        .par_iter()
        .map(|inst| {
            let a = nn::allocate(actor, inst)?;
            let d = total_delay(inst, &a)?;
            Ok((a, d))
        })
        .collect::<Result<Vec<_>>>()?;
    let samples: Vec<(&McInstance, &Allocation, f64)> = data
        .instances()
        .iter()
        .zip(&played)
        .map(|(i, (a, d))| (i, a, *d))
        .collect();
    let mut critic = Critic::new(n, m, derive_seed(config.seed, &[stream::INIT, 1]))?;
    let mut adam = AdamState::new(config.adam(), critic.params.tensors());
    for epoch in 1..=config.epochs {
        for batch in epoch_order(config, samples.len(), epoch).chunks(config.batch_size) {
            let picked: Vec<_> = batch.iter().map(|&k| samples[k]).collect();
            critic.fit_batch(&mut adam, &picked)?;
        }
    }
    let targets: Vec<f64> = samples.iter().map(|s| s.2).collect();
    let mean = targets.iter().sum::<f64>() / targets.len() as f64;
    let target_variance =
        targets.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / targets.len() as f64;
    let mut sq = 0.0;
    for (inst, alloc, y) in &samples {
        sq += (critic.predict(inst, alloc)? - y).powi(2);
    }
    Ok(CriticFit {
        critic,
        final_mse: sq / samples.len() as f64,
        target_variance,
    })
}
