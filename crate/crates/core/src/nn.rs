//! Shared plumbing for trainable allocation models: named parameter sets,
//! initialization, model serialization and the [`AllocationModel`] trait.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::gradcheck::{check_parameters, ParamCheck, Probe};
use crate::autodiff::{OpKind, Tape, Var};
use crate::error::{Error, Result};
use crate::mec::{Allocation, McInstance};
use crate::objective::{self, LogitVars};
use crate::tensor::Tensor;

/// Slope of every LeakyReLU in the toolkit.
pub const LEAKY_SLOPE: f64 = 0.01;

/// Ordered, named parameter tensors grouped into layers.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    groups: Vec<String>,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

#[derive(Serialize, Deserialize)]
struct ParamRepr {
    name: String,
    #[serde(flatten)]
    tensor: Tensor,
}

/// One serialized layer: a name and its parameter tensors.
#[derive(Serialize, Deserialize)]
pub struct LayerRepr {
    name: String,
    params: Vec<ParamRepr>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet {
            groups: Vec::new(),
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, group: &str, name: &str, tensor: Tensor) -> usize {
        self.groups.push(group.to_owned());
        self.names.push(name.to_owned());
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// `group.name` for every tensor.
    pub fn qualified_names(&self) -> Vec<String> {
        self.groups
            .iter()
            .zip(&self.names)
            .map(|(g, n)| format!("{g}.{n}"))
            .collect()
    }

    pub fn get(&self, group: &str, name: &str) -> Option<&Tensor> {
        self.groups
            .iter()
            .zip(&self.names)
            .position(|(g, n)| g == group && n == name)
            .map(|k| &self.tensors[k])
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    pub fn to_layers(&self) -> Vec<LayerRepr> {
        let mut layers: Vec<LayerRepr> = Vec::new();
        for ((g, n), t) in self.groups.iter().zip(&self.names).zip(&self.tensors) {
            if layers.last().is_none_or(|l| &l.name != g) {
                layers.push(LayerRepr {
                    name: g.clone(),
                    params: Vec::new(),
                });
            }
            layers
                .last_mut()
                .expect("pushed above")
                .params
                .push(ParamRepr {
                    name: n.clone(),
                    tensor: t.clone(),
                });
        }
        layers
    }

    pub fn from_layers(layers: Vec<LayerRepr>) -> Self {
        let mut set = ParamSet::new();
        for layer in layers {
            for p in layer.params {
                set.push(&layer.name, &p.name, p.tensor);
            }
        }
        set
    }

    /// Checks that `other` has the same names and shapes.
    pub fn check_compatible(&self, other: &ParamSet) -> Result<()> {
        if self.qualified_names() != other.qualified_names() {
            return Err(Error::invalid(
                "parameter names differ from the architecture",
            ));
        }
        for (name, (a, b)) in self
            .qualified_names()
            .iter()
            .zip(self.tensors.iter().zip(&other.tensors))
        {
            if a.shape() != b.shape() {
                return Err(Error::invalid(format!(
                    "parameter {name} has shape {:?}, architecture expects {:?}",
                    b.shape(),
                    a.shape()
                )));
            }
        }
        Ok(())
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

/// Matrix with entries uniform on `+-sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = xavier_bound(fan_in, fan_out);
    Tensor::from_fn(fan_in, fan_out, |_, _| rng.random_range(-bound..=bound))
}

pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Hex SHA-256 of a byte string.
pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// A trainable map from an instance to allocation logits.
pub trait AllocationModel: Send + Sync {
    fn params(&self) -> &ParamSet;

    fn params_mut(&mut self) -> &mut ParamSet;

    /// Rejects instances the model cannot process.
    fn check_instance(&self, instance: &McInstance) -> Result<()>;

    /// Records the forward pass. `params` holds one tape node per tensor of
    /// [`AllocationModel::params`], in order.
    fn forward_logits(
        &self,
        tape: &mut Tape,
        params: &[Var],
        instance: &McInstance,
    ) -> Result<LogitVars>;
}

/// Puts `params` on the tape, as differentiable leaves when `trainable`.
pub fn bind(tape: &mut Tape, params: &[Tensor], trainable: bool) -> Vec<Var> {
    params
        .iter()
        .map(|t| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
        .collect()
}

/// Inference: allocation produced by the model for one instance.
pub fn allocate<M: AllocationModel + ?Sized>(
    model: &M,
    instance: &McInstance,
) -> Result<Allocation> {
    model.check_instance(instance)?;
    let mut tape = Tape::new();
    let vars = bind(&mut tape, model.params().tensors(), false);
    let logits = model.forward_logits(&mut tape, &vars, instance)?;
    let alloc = objective::project(&mut tape, &logits, instance)?;
    Ok(alloc.to_allocation(&tape))
}

/// Total delay of the model's allocation, evaluated with `params` in place of
/// the model's own tensors.
pub fn delay_with_params<M: AllocationModel + ?Sized>(
    model: &M,
    params: &[Tensor],
    instance: &McInstance,
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = bind(&mut tape, params, false);
    let logits = model.forward_logits(&mut tape, &vars, instance)?;
    let alloc = objective::project(&mut tape, &logits, instance)?;
    let root = objective::total_delay(&mut tape, &alloc, instance)?;
    Ok(tape.scalar(root))
}

/// Total delay and its gradient with respect to every parameter tensor.
pub fn delay_and_gradients<M: AllocationModel + ?Sized>(
    model: &M,
    instance: &McInstance,
) -> Result<(f64, Vec<Tensor>)> {
    delay_and_gradients_with(model, instance, None)
}

pub(crate) fn delay_and_gradients_with<M: AllocationModel + ?Sized>(
    model: &M,
    instance: &McInstance,
    fault: Option<OpKind>,
) -> Result<(f64, Vec<Tensor>)> {
    model.check_instance(instance)?;
    let mut tape = Tape::new();
    if let Some(kind) = fault {
        tape.inject_fault(kind);
    }
    let tensors = model.params().tensors();
    let vars = bind(&mut tape, tensors, true);
    let logits = model.forward_logits(&mut tape, &vars, instance)?;
    let alloc = objective::project(&mut tape, &logits, instance)?;
    let root = objective::total_delay(&mut tape, &alloc, instance)?;
    let grads = tape.backward(root)?;
    let g = vars
        .iter()
        .zip(tensors)
        .map(|(&v, t)| grads.get_or_zeros(v, t.shape()))
        .collect();
    Ok((tape.scalar(root), g))
}

/// Denominator floor for whole-model gradient checks. Central differences
/// carry round-off of order `eps * |loss| / step`, so gradient entries
/// below about `1e-6 * |loss|` are compared in absolute terms.
pub fn gradient_floor(loss: f64) -> f64 {
    1e-6 * loss.abs().max(1.0)
}

/// Checks every parameter gradient of the total delay on one instance
/// against central differences. `fault` corrupts one backward rule.
pub fn check_model_gradients<M: AllocationModel + ?Sized>(
    model: &M,
    instance: &McInstance,
    fault: Option<OpKind>,
) -> Result<ParamCheck> {
    let (loss, grads) = delay_and_gradients_with(model, instance, fault)?;
    check_parameters(
        &model.params().qualified_names(),
        model.params().tensors(),
        &grads,
        gradient_floor(loss),
        |p| delay_in_place(model, p, instance),
    )
}

/// [`delay_with_params`] without copying: the tensors are moved onto the
/// tape and back.
fn delay_in_place<M: AllocationModel + ?Sized>(
    model: &M,
    params: &mut [Tensor],
    instance: &McInstance,
) -> Result<Probe> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = params
        .iter_mut()
        .map(|t| tape.constant(std::mem::take(t)))
        .collect();
    let delay = (|| {
        let logits = model.forward_logits(&mut tape, &vars, instance)?;
        let alloc = objective::project(&mut tape, &logits, instance)?;
        let root = objective::total_delay(&mut tape, &alloc, instance)?;
        Ok(Probe {
            value: tape.scalar(root),
            piece: tape.kink_pattern(),
        })
    })();
    for (t, &v) in params.iter_mut().zip(&vars) {
        *t = tape.take_value(v);
    }
    delay
}

/// Fully connected network: LeakyReLU between layers, linear output.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub dims: Vec<usize>,
}

impl Mlp {
    /// `dims = [input, hidden.., output]`; one weight and one bias per layer.
    pub fn new(dims: Vec<usize>) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::invalid(format!("bad layer dimensions {dims:?}")));
        }
        Ok(Mlp { dims })
    }

    pub fn n_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn init(&self, rng: &mut impl Rng, prefix: &str, params: &mut ParamSet) {
        for (k, w) in self.dims.windows(2).enumerate() {
            let g = format!("{prefix}{k}");
            params.push(&g, "w", xavier_uniform(rng, w[0], w[1]));
            params.push(&g, "b", Tensor::zeros(1, w[1]));
        }
    }

    /// `params` holds `2 * n_layers` nodes (weight, bias) in layer order.
    pub fn record(&self, tape: &mut Tape, params: &[Var], input: Var) -> Result<Var> {
        if params.len() != 2 * self.n_layers() {
            return Err(Error::invalid("parameter count does not match the layers"));
        }
        let mut h = input;
        for k in 0..self.n_layers() {
            h = tape.matmul(h, params[2 * k])?;
            h = tape.add_row_broadcast(h, params[2 * k + 1])?;
            if k + 1 < self.n_layers() {
                h = tape.leaky_relu(h, LEAKY_SLOPE)?;
            }
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::rng_from_seed;

    #[test]
    fn xavier_entries_within_bound() {
        let mut rng = rng_from_seed(3);
        let w = xavier_uniform(&mut rng, 100, 1000);
        let bound = xavier_bound(100, 1000);
        assert!(w.data().iter().all(|v| v.abs() <= bound));
        let max = w.data().iter().fold(0.0_f64, |a, v| a.max(v.abs()));
        assert!(max > 0.99 * bound);
    }

    #[test]
    fn layers_round_trip() {
        let mut p = ParamSet::new();
        p.push("layer0", "w", Tensor::zeros(2, 3));
        p.push("layer0", "b", Tensor::zeros(1, 3));
        p.push("readout", "w", Tensor::filled(3, 1, 0.5));
        let json = serde_json::to_string(&p.to_layers()).unwrap();
        assert!(json.contains("\"shape\":[2,3]"));
        let back = ParamSet::from_layers(serde_json::from_str(&json).unwrap());
        assert_eq!(back, p);
        assert_eq!(back.qualified_names()[2], "readout.w");
    }
}
