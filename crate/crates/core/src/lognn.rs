//! Link-output graph attention network.
//!
//! Each layer computes, for every directed link `(i <- j)` of the bipartite
//! graph,
//!
//! * a message `m_ij = LeakyReLU(W_pair [e_i ; e_j] + w_edge h_ij + b)`,
//! * an attention score `LeakyReLU(a^T [W1 e_i ; W2 e_j])`, normalized by a
//!   softmax over the neighbors of `i`,
//!
//! and updates every node with a one-hidden-layer perceptron applied to the
//! node's previous embedding and its attention-weighted neighbor average.
//! Attention uses the previous layer's embeddings.
//!
//! After the last layer the decisions are read out per link: `[p_ij, x_ij]`
//! from the user-to-server pair `(e_i, e_j, h_ij)`, `f_ij` from the
//! server-to-user pair `(e_j, e_i, h_ij)`, and one power-scale logit per
//! user node. No parameter depends on the number of users or servers.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{encode_graph, LinkWeights, ProblemGraph, NODE_FEATURES};
use crate::mec::{AllocationLogits, McInstance};
use crate::nn::{xavier_uniform, AllocationModel, LayerRepr, ParamSet, LEAKY_SLOPE};
use crate::objective::LogitVars;
use crate::seeding::rng_from_seed;
use crate::tensor::Tensor;

pub const DEFAULT_HIDDEN: usize = 64;
pub const DEFAULT_LAYERS: usize = 2;

// Matrices acting on a concatenation `[a ; b]` are stored as their two row
// blocks, so the forward pass never slices a parameter.
const LAYER_PARAMS: usize = 12;
const AGG_PAIR_DST: usize = 0;
const AGG_PAIR_SRC: usize = 1;
const AGG_EDGE: usize = 2;
const AGG_BIAS: usize = 3;
const ATTN_W1: usize = 4;
const ATTN_W2: usize = 5;
const ATTN_VEC_DST: usize = 6;
const ATTN_VEC_SRC: usize = 7;
const UPDATE_HIDDEN: usize = 8;
const UPDATE_HIDDEN_BIAS: usize = 9;
const UPDATE_OUT: usize = 10;
const UPDATE_OUT_BIAS: usize = 11;

const USER_OWN: usize = 0;
const USER_OTHER: usize = 1;
const USER_EDGE: usize = 2;
const USER_BIAS: usize = 3;
const USER_OUT: usize = 4;
const SERVER_OWN: usize = 5;
const SERVER_OTHER: usize = 6;
const SERVER_EDGE: usize = 7;
const SERVER_BIAS: usize = 8;
const SERVER_OUT: usize = 9;
const SCALE_W: usize = 10;
const SCALE_BIAS: usize = 11;

#[derive(Clone, Debug, PartialEq)]
pub struct LognnModel {
    pub hidden_dim: usize,
    pub n_layers: usize,
    pub seed: u64,
    pub train_config_hash: Option<String>,
    params: ParamSet,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LognnFile {
    kind: String,
    hidden_dim: usize,
    n_layers: usize,
    seed: u64,
    train_config_hash: Option<String>,
    layers: Vec<LayerRepr>,
}

pub fn init_model(seed: u64, hidden_dim: usize, n_layers: usize) -> Result<LognnModel> {
    if hidden_dim == 0 || n_layers == 0 {
        return Err(Error::invalid("hidden_dim and n_layers must be >= 1"));
    }
    let h = hidden_dim;
    let mut rng = rng_from_seed(seed);
    let mut params = ParamSet::new();
    let mut d_in = NODE_FEATURES;
    for layer in 0..n_layers {
        let g = format!("layer{layer}");
        let mut w = |rows, cols| xavier_uniform(&mut rng, rows, cols);
        let (dst, src) = w(2 * d_in, h).split_rows(d_in);
        params.push(&g, "agg_pair_dst", dst);
        params.push(&g, "agg_pair_src", src);
        params.push(&g, "agg_edge", w(1, h));
        params.push(&g, "agg_bias", Tensor::zeros(1, h));
        params.push(&g, "attn_w1", w(d_in, h));
        params.push(&g, "attn_w2", w(d_in, h));
        let (dst, src) = w(2 * h, 1).split_rows(h);
        params.push(&g, "attn_vec_dst", dst);
        params.push(&g, "attn_vec_src", src);
        params.push(&g, "update_hidden", w(d_in + h, h));
        params.push(&g, "update_hidden_bias", Tensor::zeros(1, h));
        params.push(&g, "update_out", w(h, h));
        params.push(&g, "update_out_bias", Tensor::zeros(1, h));
        d_in = h;
    }
    let mut w = |rows, cols| xavier_uniform(&mut rng, rows, cols);
    let (own, other) = w(2 * h, h).split_rows(h);
    params.push("readout", "user_own", own);
    params.push("readout", "user_other", other);
    params.push("readout", "user_edge", w(1, h));
    params.push("readout", "user_bias", Tensor::zeros(1, h));
    params.push("readout", "user_out", w(h, 2));
    let (own, other) = w(2 * h, h).split_rows(h);
    params.push("readout", "server_own", own);
    params.push("readout", "server_other", other);
    params.push("readout", "server_edge", w(1, h));
    params.push("readout", "server_bias", Tensor::zeros(1, h));
    params.push("readout", "server_out", w(h, 1));
    params.push("readout", "scale_w", w(h, 1));
    params.push("readout", "scale_bias", Tensor::zeros(1, 1));
    Ok(LognnModel {
        hidden_dim,
        n_layers,
        seed,
        train_config_hash: None,
        params,
    })
}

impl LognnModel {
    pub fn to_json(&self) -> Result<String> {
        let file = LognnFile {
            kind: "lognn".into(),
            hidden_dim: self.hidden_dim,
            n_layers: self.n_layers,
            seed: self.seed,
            train_config_hash: self.train_config_hash.clone(),
            layers: self.params.to_layers(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: LognnFile = serde_json::from_str(text)?;
        if file.kind != "lognn" {
            return Err(Error::invalid(format!(
                "expected a lognn model, found {}",
                file.kind
            )));
        }
        let mut model = init_model(file.seed, file.hidden_dim, file.n_layers)?;
        let params = ParamSet::from_layers(file.layers);
        model.params.check_compatible(&params)?;
        if !params.is_finite() {
            return Err(Error::numeric("model file holds non-finite parameters"));
        }
        model.params = params;
        model.train_config_hash = file.train_config_hash;
        Ok(model)
    }

    /// SHA-256 of the serialized parameters and architecture.
    pub fn content_hash(&self) -> Result<String> {
        Ok(crate::nn::content_hash(self.to_json()?.as_bytes()))
    }

    /// Forward pass on an encoded graph, returning raw link weights.
    pub fn forward(&self, graph: &ProblemGraph) -> Result<LinkWeights> {
        let mut tape = Tape::new();
        let vars = crate::nn::bind(&mut tape, self.params.tensors(), false);
        let out = self.record(&mut tape, &vars, graph)?;
        let (n, m) = (graph.n_users, graph.n_servers);
        let logits = AllocationLogits {
            offload: tape.value(out.offload).clone(),
            power: tape.value(out.power).clone(),
            compute: tape.value(out.compute).clone(),
            power_scale: tape.value(out.power_scale).data().to_vec(),
        };
        debug_assert_eq!(logits.offload.shape(), (n, m));
        Ok(LinkWeights::from_logits(&logits))
    }

    /// Attention weights of every layer, as `(dst, src, alpha)` triples.
    pub fn attention(&self, graph: &ProblemGraph) -> Result<Vec<Vec<(usize, usize, f64)>>> {
        let mut tape = Tape::new();
        let vars = crate::nn::bind(&mut tape, self.params.tensors(), false);
        let mut trace = Vec::new();
        self.record_traced(&mut tape, &vars, graph, Some(&mut trace))?;
        Ok(trace)
    }

    fn record(&self, tape: &mut Tape, p: &[Var], graph: &ProblemGraph) -> Result<LogitVars> {
        self.record_traced(tape, p, graph, None)
    }

    fn record_traced(
        &self,
        tape: &mut Tape,
        p: &[Var],
        graph: &ProblemGraph,
        mut trace: Option<&mut Vec<Vec<(usize, usize, f64)>>>,
    ) -> Result<LogitVars> {
        if p.len() != self.params.len() {
            return Err(Error::invalid("parameter binding does not match the model"));
        }
        let (n, m) = (graph.n_users, graph.n_servers);
        let edges = graph.edges()?;
        let gain = tape.constant(edges.gain.clone());
        let degree = tape.constant(edges.dst_degree.clone());

        let mut emb = tape.constant(graph.node_features.clone());
        for layer in 0..self.n_layers {
            let w = |k: usize| p[layer * LAYER_PARAMS + k];
            let numeric = |e: Error| match e {
                Error::Numeric(msg) => Error::numeric(format!("layer {layer}: {msg}")),
                other => other,
            };
            let step = (|| -> Result<Var> {
                // messages
                let to_dst = tape.matmul(emb, w(AGG_PAIR_DST))?;
                let to_src = tape.matmul(emb, w(AGG_PAIR_SRC))?;
                let at_dst = tape.row_gather(to_dst, edges.dst.clone())?;
                let at_src = tape.row_gather(to_src, edges.src.clone())?;
                let edge_term = tape.matmul(gain, w(AGG_EDGE))?;
                let pre = tape.add(at_dst, at_src)?;
                let pre = tape.add(pre, edge_term)?;
                let pre = tape.add_row_broadcast(pre, w(AGG_BIAS))?;
                let message = tape.leaky_relu(pre, LEAKY_SLOPE)?;

                // attention from the previous layer's embeddings
                let proj_dst = tape.matmul(emb, w(ATTN_W1))?;
                let proj_src = tape.matmul(emb, w(ATTN_W2))?;
                let score_dst = tape.matmul(proj_dst, w(ATTN_VEC_DST))?;
                let score_src = tape.matmul(proj_src, w(ATTN_VEC_SRC))?;
                let s_dst = tape.row_gather(score_dst, edges.dst.clone())?;
                let s_src = tape.row_gather(score_src, edges.src.clone())?;
                let score = tape.add(s_dst, s_src)?;
                let score = tape.leaky_relu(score, LEAKY_SLOPE)?;
                let alpha = tape.segment_softmax(score, edges.by_dst.clone())?;
                if let Some(t) = trace.as_deref_mut() {
                    let a = tape.value(alpha).data();
                    t.push(
                        (0..a.len())
                            .map(|k| (edges.dst[k], edges.src[k], a[k]))
                            .collect(),
                    );
                }

                // mean over neighbors of degree-rescaled attention weights,
                // i.e. the attention-weighted average of the messages
                let weight = tape.mul(alpha, degree)?;
                let weighted = tape.mul_col_broadcast(message, weight)?;
                let aggregated = tape.segment_mean(weighted, edges.by_dst.clone())?;

                // node update
                let joined = tape.concat_cols(&[emb, aggregated])?;
                let hidden = tape.matmul(joined, w(UPDATE_HIDDEN))?;
                let hidden = tape.add_row_broadcast(hidden, w(UPDATE_HIDDEN_BIAS))?;
                let hidden = tape.leaky_relu(hidden, LEAKY_SLOPE)?;
                let out = tape.matmul(hidden, w(UPDATE_OUT))?;
                let out = tape.add_row_broadcast(out, w(UPDATE_OUT_BIAS))?;
                tape.leaky_relu(out, LEAKY_SLOPE)
            })()
            .map_err(numeric)?;
            emb = step;
        }

        let r = |k: usize| p[self.n_layers * LAYER_PARAMS + k];
        let readout_err = |e: Error| match e {
            Error::Numeric(msg) => Error::numeric(format!("readout: {msg}")),
            other => other,
        };
        (|| -> Result<LogitVars> {
            let pairs = graph.pairs();
            let pair_gain = tape.constant(pairs.gain.clone());
            let mut link_head = |own_w: usize,
                                 other_w: usize,
                                 edge: usize,
                                 bias: usize,
                                 own: &std::sync::Arc<Vec<usize>>,
                                 other: &std::sync::Arc<Vec<usize>>|
             -> Result<Var> {
                let a = tape.matmul(emb, r(own_w))?;
                let b = tape.matmul(emb, r(other_w))?;
                let a = tape.row_gather(a, own.clone())?;
                let b = tape.row_gather(b, other.clone())?;
                let e = tape.matmul(pair_gain, r(edge))?;
                let pre = tape.add(a, b)?;
                let pre = tape.add(pre, e)?;
                let pre = tape.add_row_broadcast(pre, r(bias))?;
                tape.leaky_relu(pre, LEAKY_SLOPE)
            };
            // user -> server links: [p, x]
            let user_hidden = link_head(
                USER_OWN,
                USER_OTHER,
                USER_EDGE,
                USER_BIAS,
                &pairs.user,
                &pairs.server,
            )?;
            // server -> user links: f
            let server_hidden = link_head(
                SERVER_OWN,
                SERVER_OTHER,
                SERVER_EDGE,
                SERVER_BIAS,
                &pairs.server,
                &pairs.user,
            )?;

            let user_out = tape.matmul(user_hidden, r(USER_OUT))?;
            let power = tape.slice_cols(user_out, 0, 1)?;
            let power = tape.reshape(power, n, m)?;
            let offload = tape.slice_cols(user_out, 1, 1)?;
            let offload = tape.reshape(offload, n, m)?;

            let server_out = tape.matmul(server_hidden, r(SERVER_OUT))?;
            let compute = tape.reshape(server_out, n, m)?;

            let users = tape.slice_rows(emb, 0, n)?;
            let scale = tape.matmul(users, r(SCALE_W))?;
            let ones = tape.constant(Tensor::filled(n, 1, 1.0));
            let bias = tape.matmul(ones, r(SCALE_BIAS))?;
            let power_scale = tape.add(scale, bias)?;

            Ok(LogitVars {
                offload,
                power,
                compute,
                power_scale,
            })
        })()
        .map_err(readout_err)
    }
}

impl AllocationModel for LognnModel {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn check_instance(&self, instance: &McInstance) -> Result<()> {
        instance.validate()
    }

    fn forward_logits(
        &self,
        tape: &mut Tape,
        params: &[Var],
        instance: &McInstance,
    ) -> Result<LogitVars> {
        let graph = encode_graph(instance);
        self.record(tape, params, &graph)
    }
}

/// Decision dimensions `(output, feasible)` for a graph: the number of link
/// and node outputs the network emits, and the number of free decision
/// variables (`3NM` link decisions plus `N` power scales).
pub fn count_decision_dims(graph: &ProblemGraph) -> (usize, usize) {
    let (n, m) = (graph.n_users, graph.n_servers);
    let user_links = graph
        .user_nodes()
        .map(|u| graph.neighbors(u).len())
        .sum::<usize>();
    let server_links = graph
        .server_nodes()
        .map(|s| graph.neighbors(s).len())
        .sum::<usize>();
    let output = 2 * user_links + server_links + n;
    (output, AllocationLogits::flat_len(n, m))
}
