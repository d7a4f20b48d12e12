//! MEC system model: instances, allocations, rate and delay formulas, the
//! total-delay objective, constraint checks and the softmax projection onto
//! the feasible set.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding::rng_from_seed;
use crate::tensor::{nested, Tensor};

/// Lower clamp applied to generated task sizes, capacities and gains.
pub const EPS_GEN: f64 = 1e-3;
/// Floor applied to `f_ij` and to the rate inside the delay objective.
pub const EPS_FLOOR: f64 = 1e-6;
/// Offload fractions below this contribute nothing to the delay.
pub const EPS_OFFLOAD: f64 = 1e-12;
/// Tolerance of [`FeasibilityReport::is_feasible`].
pub const FEASIBILITY_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhysicalConstants {
    /// Channel bandwidth `b` in Hz.
    pub bandwidth: f64,
    /// Noise power `sigma^2` in watts.
    pub noise_power: f64,
    /// CPU cycles needed per task bit.
    pub compute_factor: f64,
    /// Per-user transmit power budget.
    pub p_max: f64,
}

impl Default for PhysicalConstants {
    fn default() -> Self {
        PhysicalConstants {
            bandwidth: 1.0,
            noise_power: 0.1,
            compute_factor: 1.0,
            p_max: 1.0,
        }
    }
}

impl PhysicalConstants {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("bandwidth", self.bandwidth),
            ("noise_power", self.noise_power),
            ("compute_factor", self.compute_factor),
            ("p_max", self.p_max),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(format!(
                    "{name} must be finite and > 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// One MEC scenario with `N` users and `M` servers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McInstance {
    pub n_users: usize,
    pub n_servers: usize,
    /// Task size `d_i` per user.
    pub task_size: Vec<f64>,
    /// Computing capacity `f_j^s` per server.
    pub server_compute: Vec<f64>,
    /// Channel gain `h_ij`, `N x M`.
    #[serde(with = "nested")]
    pub channel_gain: Tensor,
    pub bandwidth: f64,
    pub noise_power: f64,
    pub compute_factor: f64,
    pub p_max: f64,
    pub seed: u64,
}

impl McInstance {
    pub fn validate(&self) -> Result<()> {
        if self.n_users == 0 || self.n_servers == 0 {
            return Err(Error::invalid(
                "instance needs at least one user and one server",
            ));
        }
        if self.task_size.len() != self.n_users {
            return Err(Error::invalid("task_size length differs from n_users"));
        }
        if self.server_compute.len() != self.n_servers {
            return Err(Error::invalid(
                "server_compute length differs from n_servers",
            ));
        }
        if self.channel_gain.shape() != (self.n_users, self.n_servers) {
            return Err(Error::invalid(format!(
                "channel_gain has shape {:?}, expected {}x{}",
                self.channel_gain.shape(),
                self.n_users,
                self.n_servers
            )));
        }
        let positive = |v: &f64| v.is_finite() && *v > 0.0;
        if !self.task_size.iter().all(positive)
            || !self.server_compute.iter().all(positive)
            || !self.channel_gain.data().iter().all(positive)
        {
            return Err(Error::invalid(
                "task sizes, capacities and gains must be > 0",
            ));
        }
        self.constants().validate()
    }

    pub fn constants(&self) -> PhysicalConstants {
        PhysicalConstants {
            bandwidth: self.bandwidth,
            noise_power: self.noise_power,
            compute_factor: self.compute_factor,
            p_max: self.p_max,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let inst: McInstance = serde_json::from_str(text)?;
        inst.validate()?;
        Ok(inst)
    }

    /// Reorders users (rows) and servers (columns).
    pub fn permuted(&self, user_perm: &[usize], server_perm: &[usize]) -> McInstance {
        McInstance {
            task_size: user_perm.iter().map(|&i| self.task_size[i]).collect(),
            server_compute: server_perm
                .iter()
                .map(|&j| self.server_compute[j])
                .collect(),
            channel_gain: self
                .channel_gain
                .permute_rows(user_perm)
                .permute_cols(server_perm),
            ..self.clone()
        }
    }

    fn check_shape(&self, name: &str, t: &Tensor) -> Result<()> {
        if t.shape() != (self.n_users, self.n_servers) {
            return Err(Error::invalid(format!(
                "{name} has shape {:?}, instance is {}x{}",
                t.shape(),
                self.n_users,
                self.n_servers
            )));
        }
        Ok(())
    }
}

/// Draws an instance with `h`, `d`, `f^s` i.i.d. uniform on `(0, 1)`,
/// clamped to `[EPS_GEN, 1]`.
pub fn generate_instance(
    n_users: usize,
    n_servers: usize,
    seed: u64,
    constants: &PhysicalConstants,
) -> Result<McInstance> {
    if n_users == 0 || n_servers == 0 {
        return Err(Error::invalid(format!(
            "instance size must be positive, got N={n_users}, M={n_servers}"
        )));
    }
    constants.validate()?;
    let mut rng = rng_from_seed(seed);
    let mut draw = || rng.random::<f64>().clamp(EPS_GEN, 1.0);
    let gains: Vec<f64> = (0..n_users * n_servers).map(|_| draw()).collect();
    let task_size = (0..n_users).map(|_| draw()).collect();
    let server_compute = (0..n_servers).map(|_| draw()).collect();
    Ok(McInstance {
        n_users,
        n_servers,
        task_size,
        server_compute,
        channel_gain: Tensor::from_vec(n_users, n_servers, gains)?,
        bandwidth: constants.bandwidth,
        noise_power: constants.noise_power,
        compute_factor: constants.compute_factor,
        p_max: constants.p_max,
        seed,
    })
}

/// Decision variables `x`, `p`, `f`, each `N x M`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Allocation {
    #[serde(with = "nested")]
    pub offload: Tensor,
    #[serde(with = "nested")]
    pub power: Tensor,
    #[serde(with = "nested")]
    pub compute: Tensor,
}

impl Allocation {
    pub fn permuted(&self, user_perm: &[usize], server_perm: &[usize]) -> Allocation {
        let p = |t: &Tensor| t.permute_rows(user_perm).permute_cols(server_perm);
        Allocation {
            offload: p(&self.offload),
            power: p(&self.power),
            compute: p(&self.compute),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.offload.is_finite() && self.power.is_finite() && self.compute.is_finite()
    }
}

/// Per-user interference `sum_{k != i} s_kj` for one column of received
/// signal powers, via prefix and suffix sums.
fn interference_column(signal: &[f64]) -> Vec<f64> {
    let n = signal.len();
    let mut suffix = vec![0.0; n + 1];
    for k in (0..n).rev() {
        suffix[k] = suffix[k + 1] + signal[k];
    }
    let mut prefix = 0.0;
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        out.push(prefix + suffix[k + 1]);
        prefix += signal[k];
    }
    out
}

/// Shannon rate `r_ij = b log2(1 + p_ij h_ij / (sum_{k != i} p_kj h_kj + sigma^2))`.
pub fn transmission_rate(instance: &McInstance, power: &Tensor) -> Result<Tensor> {
    instance.check_shape("power", power)?;
    let (n, m) = (instance.n_users, instance.n_servers);
    let h = &instance.channel_gain;
    let mut rate = Tensor::zeros(n, m);
    let mut signal = vec![0.0; n];
    for j in 0..m {
        for i in 0..n {
            signal[i] = power.get(i, j) * h.get(i, j);
        }
        let interference = interference_column(&signal);
        for i in 0..n {
            let sinr = signal[i] / (interference[i] + instance.noise_power);
            rate.set(
                i,
                j,
                instance.bandwidth * sinr.ln_1p() / std::f64::consts::LN_2,
            );
        }
    }
    Ok(rate)
}

/// Server computing latency `x_ij d_i c / f_ij`.
pub fn compute_delay(instance: &McInstance, allocation: &Allocation) -> Result<Tensor> {
    instance.check_shape("offload", &allocation.offload)?;
    instance.check_shape("compute", &allocation.compute)?;
    let c = instance.compute_factor;
    Ok(Tensor::from_fn(
        instance.n_users,
        instance.n_servers,
        |i, j| {
            let x = allocation.offload.get(i, j);
            if x < EPS_OFFLOAD {
                0.0
            } else {
                x * instance.task_size[i] * c / allocation.compute.get(i, j).max(EPS_FLOOR)
            }
        },
    ))
}

/// Sum of transmission and computing delay over all user-server pairs.
pub fn total_delay(instance: &McInstance, allocation: &Allocation) -> Result<f64> {
    instance.check_shape("offload", &allocation.offload)?;
    instance.check_shape("compute", &allocation.compute)?;
    let rate = transmission_rate(instance, &allocation.power)?;
    let c = instance.compute_factor;
    let mut total = 0.0;
    for i in 0..instance.n_users {
        let d = instance.task_size[i];
        for j in 0..instance.n_servers {
            let x = allocation.offload.get(i, j);
            if x < EPS_OFFLOAD {
                continue;
            }
            total += d * x / rate.get(i, j).max(EPS_FLOOR)
                + x * d * c / allocation.compute.get(i, j).max(EPS_FLOOR);
        }
    }
    Ok(total)
}

/// Like [`total_delay`], but rejects allocations that violate any constraint.
pub fn checked_total_delay(instance: &McInstance, allocation: &Allocation) -> Result<f64> {
    let report = check_feasibility(instance, allocation);
    if !report.is_feasible() {
        return Err(Error::invalid(format!("infeasible allocation: {report}")));
    }
    total_delay(instance, allocation)
}

/// Largest violation of each constraint; all zero for a feasible point.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityReport {
    pub offload_nonneg: f64,
    pub power_nonneg: f64,
    pub compute_nonneg: f64,
    pub offload_sum: f64,
    pub power_budget: f64,
    pub compute_budget: f64,
    /// Set when an allocation matrix has the wrong shape or non-finite entries.
    pub malformed: bool,
}

impl FeasibilityReport {
    pub fn max_violation(&self) -> f64 {
        if self.malformed {
            return f64::INFINITY;
        }
        [
            self.offload_nonneg,
            self.power_nonneg,
            self.compute_nonneg,
            self.offload_sum,
            self.power_budget,
            self.compute_budget,
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }

    pub fn is_feasible(&self) -> bool {
        self.max_violation() <= FEASIBILITY_TOL
    }
}

impl std::fmt::Display for FeasibilityReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.malformed {
            return write!(f, "malformed allocation");
        }
        write!(
            f,
            "x>=0: {:.3e}, p>=0: {:.3e}, f>=0: {:.3e}, sum x=1: {:.3e}, sum p<=pmax: {:.3e}, sum f<=fs: {:.3e}",
            self.offload_nonneg,
            self.power_nonneg,
            self.compute_nonneg,
            self.offload_sum,
            self.power_budget,
            self.compute_budget
        )
    }
}

pub fn check_feasibility(instance: &McInstance, allocation: &Allocation) -> FeasibilityReport {
    let shape = (instance.n_users, instance.n_servers);
    if allocation.offload.shape() != shape
        || allocation.power.shape() != shape
        || allocation.compute.shape() != shape
        || !allocation.is_finite()
    {
        return FeasibilityReport {
            malformed: true,
            ..Default::default()
        };
    }
    let neg = |t: &Tensor| t.data().iter().fold(0.0_f64, |acc, &v| acc.max(-v));
    let offload_sum = allocation
        .offload
        .row_sums()
        .into_iter()
        .map(|s| (s - 1.0).abs())
        .fold(0.0, f64::max);
    let power_budget = allocation
        .power
        .row_sums()
        .into_iter()
        .map(|s| (s - instance.p_max).max(0.0))
        .fold(0.0, f64::max);
    let compute_budget = allocation
        .compute
        .col_sums()
        .into_iter()
        .zip(&instance.server_compute)
        .map(|(s, cap)| (s - cap).max(0.0))
        .fold(0.0, f64::max);
    FeasibilityReport {
        offload_nonneg: neg(&allocation.offload),
        power_nonneg: neg(&allocation.power),
        compute_nonneg: neg(&allocation.compute),
        offload_sum,
        power_budget,
        compute_budget,
        malformed: false,
    }
}

/// Unconstrained decision logits: three `N x M` link channels plus one
/// per-user power-scale logit. Flattened length is `3 N M + N`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AllocationLogits {
    pub offload: Tensor,
    pub power: Tensor,
    pub compute: Tensor,
    pub power_scale: Vec<f64>,
}

impl AllocationLogits {
    pub fn zeros(n_users: usize, n_servers: usize) -> Self {
        AllocationLogits {
            offload: Tensor::zeros(n_users, n_servers),
            power: Tensor::zeros(n_users, n_servers),
            compute: Tensor::zeros(n_users, n_servers),
            power_scale: vec![0.0; n_users],
        }
    }

    pub fn flat_len(n_users: usize, n_servers: usize) -> usize {
        3 * n_users * n_servers + n_users
    }

    /// Layout: offload, power, compute (each row-major), then power scales.
    pub fn from_flat(n_users: usize, n_servers: usize, genes: &[f64]) -> Result<Self> {
        let nm = n_users * n_servers;
        if genes.len() != Self::flat_len(n_users, n_servers) {
            return Err(Error::invalid(format!(
                "expected {} logits, got {}",
                Self::flat_len(n_users, n_servers),
                genes.len()
            )));
        }
        Ok(AllocationLogits {
            offload: Tensor::from_vec(n_users, n_servers, genes[..nm].to_vec())?,
            power: Tensor::from_vec(n_users, n_servers, genes[nm..2 * nm].to_vec())?,
            compute: Tensor::from_vec(n_users, n_servers, genes[2 * nm..3 * nm].to_vec())?,
            power_scale: genes[3 * nm..].to_vec(),
        })
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(3 * self.offload.len() + self.power_scale.len());
        out.extend_from_slice(self.offload.data());
        out.extend_from_slice(self.power.data());
        out.extend_from_slice(self.compute.data());
        out.extend_from_slice(&self.power_scale);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.offload.is_finite()
            && self.power.is_finite()
            && self.compute.is_finite()
            && self.power_scale.iter().all(|v| v.is_finite())
    }
}

pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Maps arbitrary finite logits onto the feasible set:
/// `x` = row softmax, `p` = `p_max * sigmoid(scale_i) *` row softmax,
/// `f` = `f_j^s *` column softmax.
pub fn project_to_feasible(logits: &AllocationLogits, instance: &McInstance) -> Result<Allocation> {
    let (n, m) = (instance.n_users, instance.n_servers);
    instance.check_shape("offload logits", &logits.offload)?;
    instance.check_shape("power logits", &logits.power)?;
    instance.check_shape("compute logits", &logits.compute)?;
    if logits.power_scale.len() != n {
        return Err(Error::invalid("power_scale length differs from n_users"));
    }
    if !logits.is_finite() {
        return Err(Error::numeric("non-finite allocation logits"));
    }

    let mut offload = logits.offload.clone();
    let mut power = logits.power.clone();
    for i in 0..n {
        softmax_in_place(offload.row_mut(i));
        let budget = instance.p_max * sigmoid(logits.power_scale[i]);
        let row = power.row_mut(i);
        softmax_in_place(row);
        row.iter_mut().for_each(|v| *v *= budget);
    }

    let mut compute = logits.compute.transpose();
    for j in 0..m {
        let row = compute.row_mut(j);
        softmax_in_place(row);
        row.iter_mut()
            .for_each(|v| *v *= instance.server_compute[j]);
    }

    Ok(Allocation {
        offload,
        power,
        compute: compute.transpose(),
    })
}

/// Closed-form optimum for a single user and a single server: all bits go to
/// the only server at full power and full capacity.
pub fn optimal_delay_single(instance: &McInstance) -> Result<f64> {
    if instance.n_users != 1 || instance.n_servers != 1 {
        return Err(Error::invalid(format!(
            "closed form needs N = M = 1, got N={}, M={}",
            instance.n_users, instance.n_servers
        )));
    }
    let d = instance.task_size[0];
    let h = instance.channel_gain.get(0, 0);
    let rate = instance.bandwidth * (instance.p_max * h / instance.noise_power).ln_1p()
        / std::f64::consts::LN_2;
    Ok(d / rate + d * instance.compute_factor / instance.server_compute[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn unit_instance(n: usize, m: usize) -> McInstance {
        McInstance {
            n_users: n,
            n_servers: m,
            task_size: vec![1.0; n],
            server_compute: vec![1.0; m],
            channel_gain: Tensor::filled(n, m, 1.0),
            bandwidth: 1.0,
            noise_power: 1.0,
            compute_factor: 1.0,
            p_max: 1.0,
            seed: 0,
        }
    }

    #[test]
    fn generation_rejects_empty_sizes() {
        let c = PhysicalConstants::default();
        assert!(matches!(
            generate_instance(0, 1, 1, &c),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            generate_instance(1, 0, 1, &c),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn generation_small_and_deterministic() {
        let c = PhysicalConstants::default();
        let a = generate_instance(2, 1, 42, &c).unwrap();
        assert_eq!(a.channel_gain.shape(), (2, 1));
        assert!(a.channel_gain.data().iter().all(|&h| h > 0.0 && h <= 1.0));
        assert_eq!(a.p_max, 1.0);
        a.validate().unwrap();
        let b = generate_instance(2, 1, 42, &c).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn gain_mean_is_one_half() {
        let inst = generate_instance(10_000, 1, 7, &PhysicalConstants::default()).unwrap();
        let mean = inst.channel_gain.sum() / 10_000.0;
        assert!((mean - 0.5).abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn single_user_rate() {
        let inst = unit_instance(1, 1);
        let r = transmission_rate(&inst, &Tensor::scalar(1.0)).unwrap();
        assert!((r.get(0, 0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn interference_limited_rate() {
        let mut inst = unit_instance(2, 1);
        inst.noise_power = 1e-300;
        let r = transmission_rate(&inst, &Tensor::filled(2, 1, 1.0)).unwrap();
        assert!((r.get(0, 0) - 1.0).abs() < 1e-12);
        assert!((r.get(1, 0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rate_shape_mismatch() {
        let inst = unit_instance(2, 2);
        assert!(matches!(
            transmission_rate(&inst, &Tensor::zeros(2, 3)),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn compute_delay_cases() {
        let inst = unit_instance(1, 1);
        let alloc = Allocation {
            offload: Tensor::scalar(1.0),
            power: Tensor::scalar(1.0),
            compute: Tensor::scalar(0.5),
        };
        assert_eq!(compute_delay(&inst, &alloc).unwrap().get(0, 0), 2.0);
        let idle = Allocation {
            offload: Tensor::scalar(0.0),
            compute: Tensor::scalar(0.0),
            ..alloc.clone()
        };
        assert_eq!(compute_delay(&inst, &idle).unwrap().get(0, 0), 0.0);
        assert_eq!(total_delay(&inst, &alloc).unwrap(), 3.0);
    }

    #[test]
    fn zero_offload_terms_vanish() {
        let inst = unit_instance(1, 2);
        let alloc = Allocation {
            offload: Tensor::row_vector(&[1.0, 0.0]),
            power: Tensor::row_vector(&[1.0, 0.0]),
            compute: Tensor::row_vector(&[0.5, 0.0]),
        };
        assert_eq!(total_delay(&inst, &alloc).unwrap(), 3.0);
    }

    #[test]
    fn feasibility_arithmetic() {
        let inst = unit_instance(1, 2);
        let alloc = Allocation {
            offload: Tensor::row_vector(&[0.5, 0.4]),
            power: Tensor::row_vector(&[1.0, 0.5]),
            compute: Tensor::row_vector(&[0.5, 0.5]),
        };
        let rep = check_feasibility(&inst, &alloc);
        assert!((rep.offload_sum - 0.1).abs() < 1e-12);
        assert!((rep.power_budget - 0.5).abs() < 1e-12);
        assert_eq!(rep.compute_budget, 0.0);
        assert!(!rep.is_feasible());
        assert!(checked_total_delay(&inst, &alloc).is_err());

        let zero_row = Allocation {
            offload: Tensor::row_vector(&[0.0, 0.0]),
            ..alloc
        };
        assert!(checked_total_delay(&inst, &zero_row).is_err());
    }

    #[test]
    fn malformed_allocation_is_infeasible() {
        let inst = unit_instance(2, 2);
        let alloc = Allocation {
            offload: Tensor::zeros(2, 1),
            power: Tensor::zeros(2, 2),
            compute: Tensor::zeros(2, 2),
        };
        assert!(!check_feasibility(&inst, &alloc).is_feasible());
    }

    #[test]
    fn projection_of_zero_logits() {
        let inst = unit_instance(1, 2);
        let a = project_to_feasible(&AllocationLogits::zeros(1, 2), &inst).unwrap();
        assert_eq!(a.offload.data(), &[0.5, 0.5]);
        assert!(check_feasibility(&inst, &a).is_feasible());

        let inst = unit_instance(2, 1);
        let a = project_to_feasible(&AllocationLogits::zeros(2, 1), &inst).unwrap();
        assert_eq!(a.compute.data(), &[0.5, 0.5]);
    }

    #[test]
    fn projection_rejects_non_finite() {
        let inst = unit_instance(1, 1);
        let mut l = AllocationLogits::zeros(1, 1);
        l.power_scale[0] = f64::NAN;
        assert!(matches!(
            project_to_feasible(&l, &inst),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn single_pair_optimum() {
        let mut inst = unit_instance(1, 1);
        inst.server_compute = vec![0.5];
        assert!((optimal_delay_single(&inst).unwrap() - 3.0).abs() < 1e-15);
        inst.task_size = vec![2.0];
        assert!((optimal_delay_single(&inst).unwrap() - 6.0).abs() < 1e-15);
        assert!(optimal_delay_single(&unit_instance(2, 1)).is_err());
    }

    #[test]
    fn flat_logits_layout() {
        let genes: Vec<f64> = (0..AllocationLogits::flat_len(2, 3))
            .map(|v| v as f64)
            .collect();
        let l = AllocationLogits::from_flat(2, 3, &genes).unwrap();
        assert_eq!(l.power.get(0, 0), 6.0);
        assert_eq!(l.compute.get(1, 2), 17.0);
        assert_eq!(l.power_scale, vec![18.0, 19.0]);
        assert_eq!(l.to_flat(), genes);
        assert!(AllocationLogits::from_flat(2, 3, &genes[1..]).is_err());
    }

    #[test]
    fn instance_json_layout() {
        let inst = generate_instance(2, 3, 5, &PhysicalConstants::default()).unwrap();
        let v: serde_json::Value = serde_json::to_value(&inst).unwrap();
        for key in [
            "n_users",
            "n_servers",
            "task_size",
            "server_compute",
            "channel_gain",
            "bandwidth",
            "noise_power",
            "compute_factor",
            "p_max",
            "seed",
        ] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        assert_eq!(v["channel_gain"].as_array().unwrap().len(), 2);
        assert_eq!(v["channel_gain"][0].as_array().unwrap().len(), 3);
        let back = McInstance::from_json(&v.to_string()).unwrap();
        assert_eq!(back, inst);
    }
}
