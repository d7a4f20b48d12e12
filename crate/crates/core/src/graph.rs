//! Bipartite-graph encoding of an MEC instance and decoding of predicted link
//! weights back into an allocation.

use std::sync::Arc;

use crate::autodiff::Segments;
use crate::error::{Error, Result};
use crate::mec::{project_to_feasible, Allocation, AllocationLogits, McInstance};
use crate::tensor::Tensor;

/// Width of every node feature row: `[size or capacity, is_user, is_server]`.
pub const NODE_FEATURES: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct ProblemGraph {
    pub n_users: usize,
    pub n_servers: usize,
    /// `(N + M) x 3`; users first, then servers.
    pub node_features: Tensor,
    /// `(N + M) x (N + M)`, `h_ij` across the bipartition and zero elsewhere.
    pub adjacency: Tensor,
}

/// Directed message-passing links derived from the adjacency, in row-major
/// order of `A` (receiver-major).
#[derive(Clone, Debug)]
pub struct EdgeList {
    pub dst: Arc<Vec<usize>>,
    pub src: Arc<Vec<usize>>,
    /// `L x 1` link features.
    pub gain: Tensor,
    /// Links grouped by receiving node.
    pub by_dst: Arc<Segments>,
    /// `L x 1`, in-degree of each link's receiver.
    pub dst_degree: Tensor,
}

/// User-to-server pairs in row-major `(i, j)` order, used by the readouts.
#[derive(Clone, Debug)]
pub struct PairIndex {
    pub user: Arc<Vec<usize>>,
    /// Node index of the server, i.e. `N + j`.
    pub server: Arc<Vec<usize>>,
    /// `NM x 1` channel gains.
    pub gain: Tensor,
}

impl ProblemGraph {
    pub fn n_nodes(&self) -> usize {
        self.n_users + self.n_servers
    }

    pub fn user_nodes(&self) -> std::ops::Range<usize> {
        0..self.n_users
    }

    pub fn server_nodes(&self) -> std::ops::Range<usize> {
        self.n_users..self.n_nodes()
    }

    /// Number of directed links (nonzero adjacency entries).
    pub fn link_count(&self) -> usize {
        self.adjacency.data().iter().filter(|&&a| a != 0.0).count()
    }

    pub fn neighbors(&self, node: usize) -> Vec<usize> {
        (0..self.n_nodes())
            .filter(|&k| self.adjacency.get(node, k) != 0.0)
            .collect()
    }

    pub fn edges(&self) -> Result<EdgeList> {
        let n = self.n_nodes();
        let (mut dst, mut src, mut gain) = (Vec::new(), Vec::new(), Vec::new());
        for a in 0..n {
            for b in 0..n {
                let w = self.adjacency.get(a, b);
                if w != 0.0 {
                    dst.push(a);
                    src.push(b);
                    gain.push(w);
                }
            }
        }
        let segments = Segments::new(dst.clone(), n)?;
        let dst_degree: Vec<f64> = dst.iter().map(|&d| segments.counts()[d] as f64).collect();
        Ok(EdgeList {
            gain: Tensor::column(&gain),
            dst_degree: Tensor::column(&dst_degree),
            dst: Arc::new(dst),
            src: Arc::new(src),
            by_dst: Arc::new(segments),
        })
    }

    pub fn pairs(&self) -> PairIndex {
        let (n, m) = (self.n_users, self.n_servers);
        let mut user = Vec::with_capacity(n * m);
        let mut server = Vec::with_capacity(n * m);
        let mut gain = Vec::with_capacity(n * m);
        for i in 0..n {
            for j in 0..m {
                user.push(i);
                server.push(n + j);
                gain.push(self.adjacency.get(i, n + j));
            }
        }
        PairIndex {
            user: Arc::new(user),
            server: Arc::new(server),
            gain: Tensor::column(&gain),
        }
    }
}

/// Node permutation induced by separate user and server permutations.
pub fn node_permutation(user_perm: &[usize], server_perm: &[usize]) -> Vec<usize> {
    let n = user_perm.len();
    user_perm
        .iter()
        .copied()
        .chain(server_perm.iter().map(|&j| n + j))
        .collect()
}

pub fn encode_graph(instance: &McInstance) -> ProblemGraph {
    let (n, m) = (instance.n_users, instance.n_servers);
    let mut node_features = Tensor::zeros(n + m, NODE_FEATURES);
    for i in 0..n {
        node_features
            .row_mut(i)
            .copy_from_slice(&[instance.task_size[i], 1.0, 0.0]);
    }
    for j in 0..m {
        node_features
            .row_mut(n + j)
            .copy_from_slice(&[instance.server_compute[j], 0.0, 1.0]);
    }
    let mut adjacency = Tensor::zeros(n + m, n + m);
    for i in 0..n {
        for j in 0..m {
            let h = instance.channel_gain.get(i, j);
            adjacency.set(i, n + j, h);
            adjacency.set(n + j, i, h);
        }
    }
    ProblemGraph {
        n_users: n,
        n_servers: m,
        node_features,
        adjacency,
    }
}

/// Predicted link weights (raw logits) plus the per-user power-scale logit.
#[derive(Clone, Debug, PartialEq)]
pub struct LinkWeights {
    pub n_users: usize,
    pub n_servers: usize,
    /// Row-major over `(i, j)`: `[x_ij, p_ij]` logits on the user-to-server link.
    pub user_links: Vec<[f64; 2]>,
    /// `M x N`: `f_ij` logit on the server-to-user link.
    pub server_links: Tensor,
    /// One logit per user, read out from the user node.
    pub power_scale: Vec<f64>,
}

impl LinkWeights {
    pub fn user_link(&self, i: usize, j: usize) -> [f64; 2] {
        self.user_links[i * self.n_servers + j]
    }

    pub fn to_logits(&self) -> AllocationLogits {
        let (n, m) = (self.n_users, self.n_servers);
        AllocationLogits {
            offload: Tensor::from_fn(n, m, |i, j| self.user_link(i, j)[0]),
            power: Tensor::from_fn(n, m, |i, j| self.user_link(i, j)[1]),
            compute: self.server_links.transpose(),
            power_scale: self.power_scale.clone(),
        }
    }

    pub fn from_logits(logits: &AllocationLogits) -> Self {
        let (n, m) = logits.offload.shape();
        let user_links = (0..n * m)
            .map(|k| [logits.offload.data()[k], logits.power.data()[k]])
            .collect();
        LinkWeights {
            n_users: n,
            n_servers: m,
            user_links,
            server_links: logits.compute.transpose(),
            power_scale: logits.power_scale.clone(),
        }
    }
}

pub fn decode_allocation(links: &LinkWeights, instance: &McInstance) -> Result<Allocation> {
    let (n, m) = (instance.n_users, instance.n_servers);
    if links.n_users != n
        || links.n_servers != m
        || links.user_links.len() != n * m
        || links.server_links.shape() != (m, n)
        || links.power_scale.len() != n
    {
        return Err(Error::invalid(format!(
            "link weights do not match a {n}x{m} instance"
        )));
    }
    let finite = links.user_links.iter().flatten().all(|v| v.is_finite())
        && links.server_links.is_finite()
        && links.power_scale.iter().all(|v| v.is_finite());
    if !finite {
        return Err(Error::numeric("non-finite link weights"));
    }
    project_to_feasible(&links.to_logits(), instance)
}
