//! End-to-end acceptance checks. Every test writes one `PASS`/`FAIL` line
//! straight to stdout, so the verdicts show up even when output capture is
//! on. The tests share one lock because several of them time themselves.

use std::io::Write;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use linkgnn::autodiff::gradcheck::{ParamCheck, REL_TOL};
use linkgnn::baselines::{ga_solve, GaConfig};
use linkgnn::graph::{decode_allocation, encode_graph, node_permutation, LinkWeights};
use linkgnn::harness::{
    measure_inference, median, run_sweep, run_training_comparison, Backbone, ComparisonConfig,
    Method, Solver, SweepArtifacts, SweepSpec,
};
use linkgnn::lognn::{init_model, LognnModel};
use linkgnn::mec::{
    check_feasibility, generate_instance, optimal_delay_single, project_to_feasible, total_delay,
    Allocation, AllocationLogits, McInstance, PhysicalConstants, EPS_FLOOR, EPS_OFFLOAD,
};
use linkgnn::nn::{self, check_model_gradients};
use linkgnn::seeding::{derive_seed, rng_from_seed};
use linkgnn::trainer::{
    mixed_sizes, smoothed, train_unsupervised, Dataset, TrainConfig, TrainLog, TrainMethod,
};
use linkgnn::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(id: u32, name: &str, pass: bool, detail: &str) {
    let line = format!(
        "criterion {id} ({name}): {} | {detail}\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let mut out = std::io::stdout();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
    assert!(pass, "{}", line.trim_end());
}

fn constants() -> PhysicalConstants {
    PhysicalConstants::default()
}

fn instance(n: usize, m: usize, seed: u64) -> McInstance {
    generate_instance(n, m, seed, &constants()).unwrap()
}

fn random_logits(rng: &mut ChaCha8Rng, n: usize, m: usize) -> AllocationLogits {
    let scale = [0.1, 1.0, 10.0, 60.0][rng.random_range(0..4)];
    let mut draw =
        |rows, cols| Tensor::from_fn(rows, cols, |_, _| scale * rng.random_range(-1.0..1.0));
    AllocationLogits {
        offload: draw(n, m),
        power: draw(n, m),
        compute: draw(n, m),
        power_scale: draw(n, 1).into_vec(),
    }
}

#[test]
fn criterion_1_gradients_match_finite_differences() {
    let _guard = serial();
    let start = Instant::now();
    let model = init_model(101, 64, 2).unwrap();
    let mut total = ParamCheck::default();
    for k in 0..5 {
        let inst = instance(4, 2, derive_seed(1, &[k]));
        total.merge(check_model_gradients(&model, &inst, None).unwrap());
    }
    let elapsed = start.elapsed();
    let pass = total.passed() && elapsed < Duration::from_secs(120);
    verdict(
        1,
        "gradient correctness",
        pass,
        &format!(
            "{} entries over 5 instances, {} failed, {} one-sided (stencil crossed a kink), \
             max rel error {:.2e} at {}[{}] (tol {REL_TOL:e}), {:.1}s",
            total.n_checked,
            total.n_failed,
            total.n_one_sided,
            total.max_rel_error,
            total.worst_param,
            total.worst_index,
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_2_decoded_allocations_are_feasible() {
    let _guard = serial();
    let start = Instant::now();
    let mut rng = rng_from_seed(2);
    let mut worst = 0.0_f64;
    for k in 0..1000 {
        let (n, m) = (rng.random_range(1..=20), rng.random_range(1..=10));
        let inst = instance(n, m, derive_seed(2, &[k]));
        let logits = random_logits(&mut rng, n, m);
        let alloc = decode_allocation(&LinkWeights::from_logits(&logits), &inst).unwrap();
        worst = worst.max(check_feasibility(&inst, &alloc).max_violation());
    }
    let elapsed = start.elapsed();
    verdict(
        2,
        "feasibility",
        worst <= 1e-6 && elapsed < Duration::from_secs(60),
        &format!(
            "1000 pairs, max violation {worst:.2e} (tol 1e-6), {:.2}s",
            elapsed.as_secs_f64()
        ),
    );
}

/// Plain loops over the delay formula, sharing no code with the library.
fn scalar_delay(inst: &McInstance, a: &Allocation) -> f64 {
    let (n, m) = (inst.n_users, inst.n_servers);
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..m {
            let x = a.offload.get(i, j);
            if x < EPS_OFFLOAD {
                continue;
            }
            let mut interference = 0.0;
            for k in 0..n {
                if k != i {
                    interference += a.power.get(k, j) * inst.channel_gain.get(k, j);
                }
            }
            let sinr =
                a.power.get(i, j) * inst.channel_gain.get(i, j) / (interference + inst.noise_power);
            let rate = (inst.bandwidth * (1.0 + sinr).log2()).max(EPS_FLOOR);
            let d = inst.task_size[i];
            total +=
                d * x / rate + x * d * inst.compute_factor / a.compute.get(i, j).max(EPS_FLOOR);
        }
    }
    total
}

#[test]
fn criterion_3_delay_matches_scalar_oracle() {
    let _guard = serial();
    let start = Instant::now();
    let mut rng = rng_from_seed(3);
    let mut worst = 0.0_f64;
    for k in 0..100 {
        let (n, m) = (rng.random_range(1..=12), rng.random_range(1..=8));
        let inst = instance(n, m, derive_seed(3, &[k]));
        let alloc = project_to_feasible(&random_logits(&mut rng, n, m), &inst).unwrap();
        let a = total_delay(&inst, &alloc).unwrap();
        let b = scalar_delay(&inst, &alloc);
        worst = worst.max((a - b).abs() / b.abs());
    }
    verdict(
        3,
        "objective oracle",
        worst < 1e-9,
        &format!(
            "100 points, max rel error {worst:.2e} (tol 1e-9), {:.3}s",
            start.elapsed().as_secs_f64()
        ),
    );
}

#[test]
fn criterion_4_single_pair_optimum() {
    let _guard = serial();
    let start = Instant::now();
    let ga = GaConfig {
        generations: 500,
        seed: 4,
        ..GaConfig::default()
    };
    let mut ga_worst = 0.0_f64;
    for k in 0..10 {
        let inst = instance(1, 1, derive_seed(4, &[k]));
        let r = ga_solve(&inst, &ga).unwrap();
        ga_worst = ga_worst.max(r.best_delay / optimal_delay_single(&inst).unwrap() - 1.0);
    }

    let cfg = TrainConfig {
        epochs: 100,
        n_train_samples: 256,
        n_test_samples: 64,
        seed: 4,
        size_distribution: vec![(1, 1)],
        ..TrainConfig::default()
    };
    let mut model = init_model(4, 64, 2).unwrap();
    train_unsupervised(&mut model, &Dataset::training(&cfg).unwrap(), &cfg).unwrap();
    let held_out = Dataset::held_out(&cfg).unwrap();
    let mut gnn_worst = 0.0_f64;
    for inst in held_out.instances() {
        let d = total_delay(inst, &nn::allocate(&model, inst).unwrap()).unwrap();
        gnn_worst = gnn_worst.max(d / optimal_delay_single(inst).unwrap() - 1.0);
    }
    let elapsed = start.elapsed();
    verdict(
        4,
        "analytic optimum",
        ga_worst <= 0.01 && gnn_worst <= 0.05 && elapsed < Duration::from_secs(300),
        &format!(
            "GA-500 worst gap {:.3}% (tol 1%) on 10 instances, LOGNN worst gap {:.3}% (tol 5%) on 64, {:.1}s",
            100.0 * ga_worst,
            100.0 * gnn_worst,
            elapsed.as_secs_f64()
        ),
    );
}

struct MixedRun {
    model: LognnModel,
    log: TrainLog,
    seconds: f64,
}

/// One LOGNN trained on `N = 2M`, `M` in `2..=10`, shared by criteria 5 and 7.
fn mixed_model() -> &'static MixedRun {
    static RUN: OnceLock<MixedRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let start = Instant::now();
        let cfg = TrainConfig {
            epochs: 500,
            n_train_samples: 256,
            n_test_samples: 256,
            seed: 11,
            size_distribution: mixed_sizes(2..=10),
            ..TrainConfig::default()
        };
        let mut model = init_model(7, 64, 2).unwrap();
        let log = train_unsupervised(&mut model, &Dataset::training(&cfg).unwrap(), &cfg).unwrap();
        MixedRun {
            model,
            log,
            seconds: start.elapsed().as_secs_f64(),
        }
    })
}

#[test]
fn criterion_5_one_model_across_sizes() {
    let _guard = serial();
    let start = Instant::now();
    let run = mixed_model();
    let hash = run.model.content_hash().unwrap();
    let artifacts = SweepArtifacts {
        lognn: Some(run.model.clone()),
        ga: GaConfig {
            generations: 100,
            seed: 5,
            ..GaConfig::default()
        },
        ..SweepArtifacts::default()
    };

    let reach = SweepSpec {
        server_counts: vec![2, 4, 8, 10, 30],
        instances_per_size: 8,
        methods: vec![Method::Lognn],
        seed: 5,
        ..SweepSpec::default()
    };
    let reach_rows = run_sweep(&reach, &artifacts).unwrap();
    let runs_everywhere = reach.server_counts.iter().all(|&m| {
        reach_rows
            .row(Method::Lognn, m)
            .is_some_and(|r| r.mean_delay.is_finite() && r.mean_delay > 0.0)
    });

    let compare = SweepSpec {
        server_counts: vec![10],
        instances_per_size: 64,
        methods: vec![Method::Lognn, Method::Ga, Method::Random],
        seed: 5,
        ..SweepSpec::default()
    };
    let res = run_sweep(&compare, &artifacts).unwrap();
    let delay = |m: Method| res.row(m, 10).unwrap().mean_delay;
    let (gnn, ga, random) = (
        delay(Method::Lognn),
        delay(Method::Ga),
        delay(Method::Random),
    );
    let same_model = artifacts.lognn.as_ref().unwrap().content_hash().unwrap() == hash;
    let elapsed = start.elapsed().as_secs_f64() + run.seconds;
    let pass = runs_everywhere && same_model && gnn < ga && gnn <= 0.7 * random && elapsed < 1800.0;
    verdict(
        5,
        "scalability",
        pass,
        &format!(
            "one model (hash {}) ran at M=2,4,8,10,30: {runs_everywhere}; M=10 over 64 instances: \
             LOGNN {gnn:.3}, GA-100 {ga:.3}, random {random:.3} (LOGNN/random {:.3}, need <= 0.7); \
             {elapsed:.0}s including {:.0}s shared training",
            &hash[..12],
            gnn / random,
            run.seconds
        ),
    );
}

#[test]
fn criterion_6_training_method_ordering() {
    let _guard = serial();
    let start = Instant::now();
    let config = ComparisonConfig {
        train: TrainConfig {
            epochs: 50,
            n_train_samples: 256,
            n_test_samples: 256,
            seed: 6,
            size_distribution: vec![(4, 2)],
            ..TrainConfig::default()
        },
        ga: GaConfig {
            generations: 100,
            seed: 6,
            ..GaConfig::default()
        },
        model_seed: 6,
        ..ComparisonConfig::default()
    };
    let report = run_training_comparison(&config).unwrap();
    let mut pass = true;
    let mut detail = Vec::new();
    for backbone in [Backbone::Lognn, Backbone::Mlp] {
        let get = |m: TrainMethod| report.run(backbone, m).unwrap();
        let (u, a, s) = (
            get(TrainMethod::Unsupervised),
            get(TrainMethod::ActorCritic),
            get(TrainMethod::Supervised),
        );
        let complete = [u, a, s]
            .iter()
            .all(|r| r.aborted.is_none() && r.log.epochs.len() == config.train.epochs);
        let (tu, ta, ts) = (
            u.log.mean_epoch_seconds(),
            a.log.mean_epoch_seconds(),
            s.log.mean_epoch_seconds(),
        );
        let (fu, fs) = (
            u.log.final_test_obj().unwrap(),
            s.log.final_test_obj().unwrap(),
        );
        pass &= complete && tu < ta && ta < ts && ts >= 20.0 * tu && fu <= fs;
        detail.push(format!(
            "{backbone:?}: epoch s unsup {tu:.3} < ac {ta:.3} < sup {ts:.3} (sup/unsup {:.1}x, need >= 20); \
             final held-out unsup {fu:.3} vs sup {fs:.3}",
            ts / tu
        ));
    }
    let elapsed = start.elapsed().as_secs_f64();
    pass &= elapsed < 3600.0;
    verdict(
        6,
        "training-method ordering",
        pass,
        &format!("{}; {elapsed:.0}s", detail.join("; ")),
    );
}

#[test]
fn criterion_7_unsupervised_convergence() {
    let _guard = serial();
    let run = mixed_model();
    let train = smoothed(&run.log.train_curve(), 10);
    let (first, last) = (train[0], *train.last().unwrap());
    let final_epoch = run.log.epochs.last().unwrap();
    let gap = (final_epoch.test_obj - final_epoch.train_obj).abs() / final_epoch.train_obj;
    let pass =
        run.log.epochs.len() == 500 && last <= 0.5 * first && gap <= 0.2 && run.seconds < 1800.0;
    verdict(
        7,
        "convergence",
        pass,
        &format!(
            "smoothed train objective {first:.3} -> {last:.3} ({:.1}% reduction, need >= 50%); \
             final train {:.3} vs held-out {:.3} (gap {:.1}%, need <= 20%); {:.0}s",
            100.0 * (1.0 - last / first),
            final_epoch.train_obj,
            final_epoch.test_obj,
            100.0 * gap,
            run.seconds
        ),
    );
}

#[test]
fn criterion_8_inference_time() {
    let _guard = serial();
    let start = Instant::now();
    let model = init_model(8, 64, 2).unwrap();
    let ga = GaConfig {
        generations: 100,
        seed: 8,
        ..GaConfig::default()
    };
    let (mut gnn, mut gas) = (Vec::new(), Vec::new());
    for k in 0..8 {
        let inst = instance(20, 10, derive_seed(8, &[k]));
        gnn.push(
            measure_inference(&Solver::Lognn(&model), &inst, 5)
                .unwrap()
                .1,
        );
        gas.push(measure_inference(&Solver::Ga(&ga), &inst, 3).unwrap().1);
    }
    let (tg, ta) = (median(&gnn), median(&gas));
    verdict(
        8,
        "inference time",
        ta >= 10.0 * tg,
        &format!(
            "M=10, 8 instances: LOGNN median {:.2}ms, GA-100 median {:.1}ms ({:.0}x, need >= 10x), {:.1}s",
            1e3 * tg,
            1e3 * ta,
            ta / tg,
            start.elapsed().as_secs_f64()
        ),
    );
}

fn permutation(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

#[test]
fn criterion_9_permutation_equivariance() {
    let _guard = serial();
    let start = Instant::now();
    let mut rng = rng_from_seed(9);
    let model = init_model(9, 64, 2).unwrap();
    let (mut graph_err, mut forward_err) = (0.0_f64, 0.0_f64);
    for k in 0..50 {
        let (n, m) = (rng.random_range(1..=10), rng.random_range(1..=6));
        let inst = instance(n, m, derive_seed(9, &[k]));
        let (pu, ps) = (permutation(&mut rng, n), permutation(&mut rng, m));
        let nodes = node_permutation(&pu, &ps);

        let g = encode_graph(&inst);
        let gp = encode_graph(&inst.permuted(&pu, &ps));
        graph_err = graph_err
            .max(
                gp.node_features
                    .max_abs_diff(&g.node_features.permute_rows(&nodes)),
            )
            .max(
                gp.adjacency
                    .max_abs_diff(&g.adjacency.permute_rows(&nodes).permute_cols(&nodes)),
            );

        let out = model.forward(&g).unwrap().to_logits();
        let outp = model.forward(&gp).unwrap().to_logits();
        let perm = |t: &Tensor| t.permute_rows(&pu).permute_cols(&ps);
        let scale: Vec<f64> = pu.iter().map(|&i| out.power_scale[i]).collect();
        let scale_err = scale
            .iter()
            .zip(&outp.power_scale)
            .fold(0.0_f64, |e, (a, b)| e.max((a - b).abs()));
        forward_err = forward_err
            .max(outp.offload.max_abs_diff(&perm(&out.offload)))
            .max(outp.power.max_abs_diff(&perm(&out.power)))
            .max(outp.compute.max_abs_diff(&perm(&out.compute)))
            .max(scale_err);
    }
    let elapsed = start.elapsed().as_secs_f64();
    verdict(
        9,
        "permutation equivariance",
        graph_err <= 1e-10 && forward_err <= 1e-10,
        &format!("50 cases, encoding max error {graph_err:.1e}, forward max error {forward_err:.1e} (tol 1e-10), {elapsed:.2}s"),
    );
}
