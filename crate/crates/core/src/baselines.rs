//! Comparison allocators: a genetic algorithm over logit chromosomes, a
//! fixed-size perceptron and a random feasible allocator.

use std::time::Instant;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::mec::{project_to_feasible, total_delay, Allocation, AllocationLogits, McInstance};
use crate::nn::{self, AllocationModel, LayerRepr, Mlp, ParamSet};
use crate::objective::LogitVars;
use crate::seeding::{derive_seed, rng_from_seed, stream};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GaConfig {
    pub population: usize,
    /// Fraction of the population kept by rank.
    pub retain_rate: f64,
    /// Per-gene mutation probability.
    pub mutation_rate: f64,
    /// Fraction of the population kept by lottery among the non-elite.
    pub selection_rate: f64,
    pub generations: usize,
    /// Standard deviation of the Gaussian mutation, in logit units.
    pub mutation_std: f64,
    pub seed: u64,
}

impl Default for GaConfig {
    fn default() -> Self {
        GaConfig {
            population: 200,
            retain_rate: 0.4,
            mutation_rate: 0.2,
            selection_rate: 0.1,
            generations: 500,
            mutation_std: 0.3,
            seed: 0,
        }
    }
}

impl GaConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("retain_rate", self.retain_rate),
            ("mutation_rate", self.mutation_rate),
            ("selection_rate", self.selection_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!(
                    "{name} must lie in [0, 1], got {v}"
                )));
            }
        }
        if self.retain_rate + self.selection_rate > 1.0 {
            return Err(Error::invalid("retain_rate + selection_rate must be <= 1"));
        }
        if self.population < 2 {
            return Err(Error::invalid("population must be >= 2"));
        }
        if !(self.mutation_std.is_finite() && self.mutation_std >= 0.0) {
            return Err(Error::invalid("mutation_std must be finite and >= 0"));
        }
        Ok(())
    }

    fn survivor_counts(&self) -> (usize, usize) {
        let p = self.population as f64;
        let retain = ((self.retain_rate * p).round() as usize).clamp(1, self.population);
        let select = ((self.selection_rate * p).round() as usize).min(self.population - retain);
        (retain, select)
    }
}

#[derive(Clone, Debug)]
pub struct GaResult {
    pub allocation: Allocation,
    pub best_delay: f64,
    pub wall_clock: f64,
    /// Best delay found so far, after the initial population and after each
    /// generation.
    pub history: Vec<f64>,
}

fn fitness(instance: &McInstance, genes: &[f64]) -> f64 {
    let delay = AllocationLogits::from_flat(instance.n_users, instance.n_servers, genes)
        .and_then(|l| project_to_feasible(&l, instance))
        .and_then(|a| total_delay(instance, &a));
    match delay {
        Ok(d) if d.is_finite() => d,
        _ => f64::INFINITY,
    }
}

fn evaluate(instance: &McInstance, pop: &[Vec<f64>]) -> Vec<f64> {
    pop.par_iter()
        .with_min_len(16)
        .map(|g| fitness(instance, g))
        .collect()
}

/// Minimizes total delay over logit chromosomes of length `3NM + N`.
pub fn ga_solve(instance: &McInstance, config: &GaConfig) -> Result<GaResult> {
    instance.validate()?;
    config.validate()?;
    let start = Instant::now();
    let genes = AllocationLogits::flat_len(instance.n_users, instance.n_servers);
    let mut rng = rng_from_seed(config.seed);
    let mutation = Normal::new(0.0, config.mutation_std)
        .map_err(|e| Error::invalid(format!("mutation_std: {e}")))?;

    let mut pop: Vec<Vec<f64>> = (0..config.population)
        .map(|_| {
            (0..genes)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect()
        })
        .collect();
    let mut fit = evaluate(instance, &pop);

    let argmin = |fit: &[f64]| {
        (0..fit.len())
            .min_by(|&a, &b| fit[a].total_cmp(&fit[b]))
            .expect("population is non-empty")
    };
    let k = argmin(&fit);
    let (mut best, mut best_genes) = (fit[k], pop[k].clone());
    let mut history = vec![best];

    let (retain, select) = config.survivor_counts();
    for _ in 0..config.generations {
        let mut order: Vec<usize> = (0..pop.len()).collect();
        order.sort_by(|&a, &b| fit[a].total_cmp(&fit[b]).then(a.cmp(&b)));
        let mut survivors: Vec<usize> = order[..retain].to_vec();
        let rest = &order[retain..];
        survivors.extend(
            index::sample(&mut rng, rest.len(), select)
                .iter()
                .map(|k| rest[k]),
        );

        let mut children = Vec::with_capacity(config.population - survivors.len());
        while survivors.len() + children.len() < config.population {
            let a = &pop[survivors[rng.random_range(0..survivors.len())]];
            let b = &pop[survivors[rng.random_range(0..survivors.len())]];
            let child: Vec<f64> = a
                .iter()
                .zip(b)
                .map(|(&ga, &gb)| {
                    let mut g = if rng.random::<bool>() { ga } else { gb };
                    if rng.random::<f64>() < config.mutation_rate {
                        g += mutation.sample(&mut rng);
                    }
                    g
                })
                .collect();
            children.push(child);
        }
        let child_fit = evaluate(instance, &children);

        let mut next_pop = Vec::with_capacity(config.population);
        let mut next_fit = Vec::with_capacity(config.population);
        for &s in &survivors {
            next_pop.push(std::mem::take(&mut pop[s]));
            next_fit.push(fit[s]);
        }
        next_pop.extend(children);
        next_fit.extend(child_fit);
        pop = next_pop;
        fit = next_fit;

        let k = argmin(&fit);
        if fit[k] < best {
            best = fit[k];
            best_genes = pop[k].clone();
        }
        history.push(best);
    }

    let logits = AllocationLogits::from_flat(instance.n_users, instance.n_servers, &best_genes)?;
    let allocation = project_to_feasible(&logits, instance)?;
    if !best.is_finite() {
        return Err(Error::numeric("genetic search found no finite delay"));
    }
    Ok(GaResult {
        allocation,
        best_delay: best,
        wall_clock: start.elapsed().as_secs_f64(),
        history,
    })
}

/// Standard-normal logits through the feasibility projection.
pub fn random_allocation(instance: &McInstance, seed: u64) -> Result<Allocation> {
    instance.validate()?;
    let (n, m) = (instance.n_users, instance.n_servers);
    let mut rng = rng_from_seed(seed);
    let genes: Vec<f64> = (0..AllocationLogits::flat_len(n, m))
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    project_to_feasible(&AllocationLogits::from_flat(n, m, &genes)?, instance)
}

pub const MLP_LAYERS: usize = 4;
pub const MLP_HIDDEN: usize = 64;

/// How an [`MlpModel`] treats instances of a size other than its own.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MlpMode {
    Exact,
    DirectInference,
}

/// Perceptron with fixed input `[h (row-major), d, f^s]` of length
/// `N0 M0 + N0 + M0` and fixed output `[x, p, f (row-major), scale]` of
/// length `3 N0 M0 + N0`.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpModel {
    n_users: usize,
    n_servers: usize,
    pub seed: u64,
    pub train_config_hash: Option<String>,
    net: Mlp,
    params: ParamSet,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MlpFile {
    kind: String,
    n_users: usize,
    n_servers: usize,
    hidden_dim: usize,
    n_layers: usize,
    seed: u64,
    train_config_hash: Option<String>,
    layers: Vec<LayerRepr>,
}

fn mlp_dims(n: usize, m: usize, hidden: usize, layers: usize) -> Vec<usize> {
    let mut dims = vec![n * m + n + m];
    dims.extend(std::iter::repeat_n(hidden, layers - 1));
    dims.push(AllocationLogits::flat_len(n, m));
    dims
}

impl MlpModel {
    pub fn new(n_users: usize, n_servers: usize, seed: u64) -> Result<Self> {
        Self::with_shape(n_users, n_servers, MLP_HIDDEN, MLP_LAYERS, seed)
    }

    pub fn with_shape(
        n_users: usize,
        n_servers: usize,
        hidden: usize,
        layers: usize,
        seed: u64,
    ) -> Result<Self> {
        if n_users == 0 || n_servers == 0 || layers == 0 {
            return Err(Error::invalid("MLP needs N0, M0 and layer count >= 1"));
        }
        let net = Mlp::new(mlp_dims(n_users, n_servers, hidden, layers))?;
        let mut params = ParamSet::new();
        net.init(&mut rng_from_seed(seed), "layer", &mut params);
        Ok(MlpModel {
            n_users,
            n_servers,
            seed,
            train_config_hash: None,
            net,
            params,
        })
    }

    pub fn size(&self) -> (usize, usize) {
        (self.n_users, self.n_servers)
    }

    pub fn input_len(&self) -> usize {
        self.net.dims[0]
    }

    pub fn output_len(&self) -> usize {
        *self.net.dims.last().expect("at least two dims")
    }

    pub fn to_json(&self) -> Result<String> {
        let d = &self.net.dims;
        let file = MlpFile {
            kind: "mlp".into(),
            n_users: self.n_users,
            n_servers: self.n_servers,
            hidden_dim: if d.len() > 2 { d[1] } else { 0 },
            n_layers: self.net.n_layers(),
            seed: self.seed,
            train_config_hash: self.train_config_hash.clone(),
            layers: self.params.to_layers(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: MlpFile = serde_json::from_str(text)?;
        if file.kind != "mlp" {
            return Err(Error::invalid(format!(
                "expected an mlp model, found {}",
                file.kind
            )));
        }
        let mut model = Self::with_shape(
            file.n_users,
            file.n_servers,
            file.hidden_dim,
            file.n_layers,
            file.seed,
        )?;
        let params = ParamSet::from_layers(file.layers);
        model.params.check_compatible(&params)?;
        if !params.is_finite() {
            return Err(Error::numeric("model file holds non-finite parameters"));
        }
        model.params = params;
        model.train_config_hash = file.train_config_hash;
        Ok(model)
    }

    pub fn content_hash(&self) -> Result<String> {
        Ok(nn::content_hash(self.to_json()?.as_bytes()))
    }

    /// Input row for the model's own frame; values outside the instance are
    /// zero, values outside the frame are dropped.
    fn features(&self, instance: &McInstance) -> Tensor {
        let (n0, m0) = (self.n_users, self.n_servers);
        let mut x = vec![0.0; self.input_len()];
        for i in 0..n0.min(instance.n_users) {
            for j in 0..m0.min(instance.n_servers) {
                x[i * m0 + j] = instance.channel_gain.get(i, j);
            }
            x[n0 * m0 + i] = instance.task_size[i];
        }
        for j in 0..m0.min(instance.n_servers) {
            x[n0 * m0 + n0 + j] = instance.server_compute[j];
        }
        Tensor::row_vector(&x)
    }

    fn record_frame(&self, tape: &mut Tape, params: &[Var], input: Var) -> Result<LogitVars> {
        let (n, m) = (self.n_users, self.n_servers);
        let out = self.net.record(tape, params, input)?;
        let channel = |tape: &mut Tape, k: usize| -> Result<Var> {
            let s = tape.slice_cols(out, k * n * m, n * m)?;
            tape.reshape(s, n, m)
        };
        let offload = channel(tape, 0)?;
        let power = channel(tape, 1)?;
        let compute = channel(tape, 2)?;
        let s = tape.slice_cols(out, 3 * n * m, n)?;
        let power_scale = tape.reshape(s, n, 1)?;
        Ok(LogitVars {
            offload,
            power,
            compute,
            power_scale,
        })
    }

    fn frame_logits(&self, instance: &McInstance) -> Result<AllocationLogits> {
        let mut tape = Tape::new();
        let vars = nn::bind(&mut tape, self.params.tensors(), false);
        let input = tape.constant(self.features(instance));
        let l = self.record_frame(&mut tape, &vars, input)?;
        Ok(AllocationLogits {
            offload: tape.value(l.offload).clone(),
            power: tape.value(l.power).clone(),
            compute: tape.value(l.compute).clone(),
            power_scale: tape.value(l.power_scale).data().to_vec(),
        })
    }
}

impl AllocationModel for MlpModel {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn check_instance(&self, instance: &McInstance) -> Result<()> {
        instance.validate()?;
        if (instance.n_users, instance.n_servers) != self.size() {
            return Err(Error::invalid(format!(
                "MLP built for N={}, M={} cannot take an instance with N={}, M={}",
                self.n_users, self.n_servers, instance.n_users, instance.n_servers
            )));
        }
        Ok(())
    }

    fn forward_logits(
        &self,
        tape: &mut Tape,
        params: &[Var],
        instance: &McInstance,
    ) -> Result<LogitVars> {
        let input = tape.constant(self.features(instance));
        self.record_frame(tape, params, input)
    }
}

/// Allocation from a fixed-size MLP. In direct-inference mode the model
/// decides for the first `N0` users and `M0` servers; every other decision
/// gets a logit drawn uniformly from `[-1, 1]`, seeded by the instance seed.
pub fn mlp_forward(model: &MlpModel, instance: &McInstance, mode: MlpMode) -> Result<Allocation> {
    if mode == MlpMode::Exact || (instance.n_users, instance.n_servers) == model.size() {
        return nn::allocate(model, instance);
    }
    instance.validate()?;
    let (n, m) = (instance.n_users, instance.n_servers);
    let (n0, m0) = model.size();
    let frame = model.frame_logits(instance)?;
    let mut rng = rng_from_seed(derive_seed(instance.seed, &[stream::MLP_FILL]));
    let mut pick = |t: &Tensor, i: usize, j: usize| {
        if i < n0 && j < m0 {
            t.get(i, j)
        } else {
            rng.random_range(-1.0..=1.0)
        }
    };
    let offload = Tensor::from_fn(n, m, |i, j| pick(&frame.offload, i, j));
    let power = Tensor::from_fn(n, m, |i, j| pick(&frame.power, i, j));
    let compute = Tensor::from_fn(n, m, |i, j| pick(&frame.compute, i, j));
    let power_scale = (0..n)
        .map(|i| {
            if i < n0 {
                frame.power_scale[i]
            } else {
                rng.random_range(-1.0..=1.0)
            }
        })
        .collect();
    project_to_feasible(
        &AllocationLogits {
            offload,
            power,
            compute,
            power_scale,
        },
        instance,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mec::{
        check_feasibility, generate_instance, optimal_delay_single, PhysicalConstants,
    };

    fn inst(n: usize, m: usize, seed: u64) -> McInstance {
        generate_instance(n, m, seed, &PhysicalConstants::default()).unwrap()
    }

    fn small(generations: usize) -> GaConfig {
        GaConfig {
            population: 40,
            generations,
            seed: 5,
            ..GaConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(GaConfig::default().validate().is_ok());
        let bad = [
            GaConfig {
                population: 1,
                ..GaConfig::default()
            },
            GaConfig {
                retain_rate: 0.95,
                ..GaConfig::default()
            },
            GaConfig {
                mutation_rate: -0.1,
                ..GaConfig::default()
            },
            GaConfig {
                selection_rate: 1.5,
                ..GaConfig::default()
            },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
        assert_eq!(GaConfig::default().survivor_counts(), (80, 20));
    }

    #[test]
    fn history_never_worsens() {
        let r = ga_solve(&inst(4, 2, 1), &small(30)).unwrap();
        assert_eq!(r.history.len(), 31);
        assert!(r.history.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(r.best_delay, *r.history.last().unwrap());
        assert!((total_delay(&inst(4, 2, 1), &r.allocation).unwrap() - r.best_delay).abs() < 1e-12);
    }

    #[test]
    fn zero_generations_is_best_initial() {
        let i = inst(3, 2, 4);
        let c = small(0);
        let r = ga_solve(&i, &c).unwrap();
        let mut rng = rng_from_seed(c.seed);
        let genes = AllocationLogits::flat_len(3, 2);
        let best = (0..c.population)
            .map(|_| {
                let g: Vec<f64> = (0..genes)
                    .map(|_| StandardNormal.sample(&mut rng))
                    .collect();
                fitness(&i, &g)
            })
            .fold(f64::INFINITY, f64::min);
        assert_eq!(r.best_delay, best);
        assert_eq!(r.history, vec![best]);
    }

    #[test]
    fn single_pair_near_optimum() {
        for seed in 0..3 {
            let i = inst(1, 1, seed);
            let r = ga_solve(&i, &small(100)).unwrap();
            let opt = optimal_delay_single(&i).unwrap();
            assert!(r.best_delay <= 1.01 * opt, "{} vs {opt}", r.best_delay);
        }
    }

    #[test]
    fn ga_beats_random() {
        let i = inst(4, 2, 8);
        let r = ga_solve(&i, &small(50)).unwrap();
        let rand = total_delay(&i, &random_allocation(&i, 3).unwrap()).unwrap();
        assert!(r.best_delay <= rand);
    }

    #[test]
    fn random_allocation_feasible_and_seeded() {
        let i = inst(6, 3, 2);
        let a = random_allocation(&i, 9).unwrap();
        assert!(check_feasibility(&i, &a).is_feasible());
        assert_eq!(a, random_allocation(&i, 9).unwrap());
        assert_ne!(a, random_allocation(&i, 10).unwrap());
    }

    #[test]
    fn mlp_shapes_and_modes() {
        let model = MlpModel::new(4, 2, 1).unwrap();
        assert_eq!(model.input_len(), 8 + 4 + 2);
        assert_eq!(model.output_len(), 3 * 8 + 4);
        assert_eq!(model.params().len(), 2 * MLP_LAYERS);

        let own = inst(4, 2, 3);
        let a = mlp_forward(&model, &own, MlpMode::Exact).unwrap();
        assert!(check_feasibility(&own, &a).is_feasible());
        assert_eq!(a, mlp_forward(&model, &own, MlpMode::Exact).unwrap());
        assert_eq!(
            a,
            mlp_forward(&model, &own, MlpMode::DirectInference).unwrap()
        );

        let big = inst(8, 4, 3);
        assert!(matches!(
            mlp_forward(&model, &big, MlpMode::Exact),
            Err(Error::InvalidArgument(_))
        ));
        for other in [big, inst(2, 1, 5), inst(3, 5, 6)] {
            let a = mlp_forward(&model, &other, MlpMode::DirectInference).unwrap();
            assert!(check_feasibility(&other, &a).is_feasible());
            assert_eq!(
                a,
                mlp_forward(&model, &other, MlpMode::DirectInference).unwrap()
            );
        }
    }

    #[test]
    fn mlp_json_round_trip() {
        let model = MlpModel::new(2, 1, 7).unwrap();
        let back = MlpModel::from_json(&model.to_json().unwrap()).unwrap();
        assert_eq!(back, model);
        assert_eq!(back.content_hash().unwrap(), model.content_hash().unwrap());
        assert!(
            MlpModel::from_json(&model.to_json().unwrap().replace("\"mlp\"", "\"lognn\"")).is_err()
        );
    }
}
