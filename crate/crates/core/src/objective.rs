//! Differentiable versions of the feasibility projection and of the total
//! delay, recorded on an autodiff tape.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::mec::{Allocation, McInstance, EPS_FLOOR, EPS_OFFLOAD};
use crate::tensor::Tensor;

/// Logit nodes produced by a model: three `N x M` channels and an `N x 1`
/// power-scale column.
#[derive(Clone, Copy, Debug)]
pub struct LogitVars {
    pub offload: Var,
    pub power: Var,
    pub compute: Var,
    pub power_scale: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct AllocationVars {
    pub offload: Var,
    pub power: Var,
    pub compute: Var,
}

impl AllocationVars {
    pub fn to_allocation(&self, tape: &Tape) -> Allocation {
        Allocation {
            offload: tape.value(self.offload).clone(),
            power: tape.value(self.power).clone(),
            compute: tape.value(self.compute).clone(),
        }
    }
}

fn expect_shape(tape: &Tape, v: Var, shape: (usize, usize), what: &str) -> Result<()> {
    if tape.shape(v) != shape {
        return Err(Error::invalid(format!(
            "{what} has shape {:?}, expected {:?}",
            tape.shape(v),
            shape
        )));
    }
    Ok(())
}

/// Same map as [`crate::mec::project_to_feasible`], on the tape.
pub fn project(
    tape: &mut Tape,
    logits: &LogitVars,
    instance: &McInstance,
) -> Result<AllocationVars> {
    let (n, m) = (instance.n_users, instance.n_servers);
    expect_shape(tape, logits.offload, (n, m), "offload logits")?;
    expect_shape(tape, logits.power, (n, m), "power logits")?;
    expect_shape(tape, logits.compute, (n, m), "compute logits")?;
    expect_shape(tape, logits.power_scale, (n, 1), "power-scale logits")?;

    let offload = tape.row_softmax(logits.offload)?;

    let share = tape.row_softmax(logits.power)?;
    let scale = tape.sigmoid(logits.power_scale)?;
    let budget = tape.scale(scale, instance.p_max)?;
    let power = tape.mul_col_broadcast(share, budget)?;

    let capacity = tape.constant(Tensor::from_fn(n, m, |_, j| instance.server_compute[j]));
    let fraction = tape.col_softmax(logits.compute)?;
    let compute = tape.mul(fraction, capacity)?;

    Ok(AllocationVars {
        offload,
        power,
        compute,
    })
}

/// Total delay of an allocation, with the same flooring and zero-offload
/// convention as [`crate::mec::total_delay`].
pub fn total_delay(tape: &mut Tape, alloc: &AllocationVars, instance: &McInstance) -> Result<Var> {
    let (n, m) = (instance.n_users, instance.n_servers);
    for (v, what) in [
        (alloc.offload, "offload"),
        (alloc.power, "power"),
        (alloc.compute, "compute"),
    ] {
        expect_shape(tape, v, (n, m), what)?;
    }

    let gain = tape.constant(instance.channel_gain.clone());
    let signal = tape.mul(alloc.power, gain)?;
    let received = tape.col_sum(signal)?;
    let negated = tape.scale(signal, -1.0)?;
    let interference = tape.add_row_broadcast(negated, received)?;
    let interference = tape.clamp_min(interference, 0.0)?;
    let denom = tape.add_scalar(interference, instance.noise_power)?;
    let sinr = tape.div(signal, denom)?;
    let spectral = tape.log2_one_plus(sinr)?;
    let rate = tape.scale(spectral, instance.bandwidth)?;
    let rate = tape.clamp_min(rate, EPS_FLOOR)?;

    let task = tape.constant(Tensor::column(&instance.task_size));
    let bits = tape.mul_col_broadcast(alloc.offload, task)?;
    let transmit = tape.div(bits, rate)?;

    let cycles = tape.scale(bits, instance.compute_factor)?;
    let cpu = tape.clamp_min(alloc.compute, EPS_FLOOR)?;
    let process = tape.div(cycles, cpu)?;

    let terms = tape.add(transmit, process)?;
    let active = tape
        .value(alloc.offload)
        .map(|x| if x < EPS_OFFLOAD { 0.0 } else { 1.0 });
    let mask = tape.constant(active);
    let masked = tape.mul(terms, mask)?;
    tape.sum(masked)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mec::{self, generate_instance, AllocationLogits, PhysicalConstants};
    use rand::Rng;

    fn logits_on_tape(tape: &mut Tape, l: &AllocationLogits, trainable: bool) -> LogitVars {
        let mut leaf = |t: Tensor| {
            if trainable {
                tape.param(t)
            } else {
                tape.constant(t)
            }
        };
        LogitVars {
            offload: leaf(l.offload.clone()),
            power: leaf(l.power.clone()),
            compute: leaf(l.compute.clone()),
            power_scale: leaf(Tensor::column(&l.power_scale)),
        }
    }

    fn random_logits(n: usize, m: usize, seed: u64) -> AllocationLogits {
        let mut rng = crate::seeding::rng_from_seed(seed);
        let genes: Vec<f64> = (0..AllocationLogits::flat_len(n, m))
            .map(|_| rng.random_range(-2.0..2.0))
            .collect();
        AllocationLogits::from_flat(n, m, &genes).unwrap()
    }

    #[test]
    fn tape_matches_plain_evaluation() {
        for seed in 0..20 {
            let (n, m) = (1 + seed as usize % 6, 1 + seed as usize % 4);
            let inst = generate_instance(n, m, seed, &PhysicalConstants::default()).unwrap();
            let logits = random_logits(n, m, seed + 100);
            let plain_alloc = mec::project_to_feasible(&logits, &inst).unwrap();
            let plain = mec::total_delay(&inst, &plain_alloc).unwrap();

            let mut tape = Tape::new();
            let lv = logits_on_tape(&mut tape, &logits, false);
            let av = project(&mut tape, &lv, &inst).unwrap();
            assert!(
                av.to_allocation(&tape)
                    .offload
                    .max_abs_diff(&plain_alloc.offload)
                    < 1e-14
            );
            let root = total_delay(&mut tape, &av, &inst).unwrap();
            let rel = (tape.scalar(root) - plain).abs() / plain;
            assert!(rel < 1e-9, "seed {seed}: rel {rel}");
        }
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        let inst = generate_instance(3, 2, 5, &PhysicalConstants::default()).unwrap();
        let logits = random_logits(3, 2, 6);
        let eval = |l: &AllocationLogits| {
            let a = mec::project_to_feasible(l, &inst).unwrap();
            mec::total_delay(&inst, &a).unwrap()
        };
        let mut tape = Tape::new();
        let lv = logits_on_tape(&mut tape, &logits, true);
        let av = project(&mut tape, &lv, &inst).unwrap();
        let root = total_delay(&mut tape, &av, &inst).unwrap();
        let grads = tape.backward(root).unwrap();
        let mut analytic = Vec::new();
        analytic.extend_from_slice(grads.get(lv.offload).unwrap().data());
        analytic.extend_from_slice(grads.get(lv.power).unwrap().data());
        analytic.extend_from_slice(grads.get(lv.compute).unwrap().data());
        analytic.extend_from_slice(grads.get(lv.power_scale).unwrap().data());
        let flat = logits.to_flat();
        for (k, a) in analytic.iter().enumerate() {
            let mut plus = flat.clone();
            plus[k] += 1e-5;
            let mut minus = flat.clone();
            minus[k] -= 1e-5;
            let numeric = (eval(&AllocationLogits::from_flat(3, 2, &plus).unwrap())
                - eval(&AllocationLogits::from_flat(3, 2, &minus).unwrap()))
                / 2e-5;
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(err < 1e-5, "gene {k}: {a} vs {numeric}");
        }
    }
}
