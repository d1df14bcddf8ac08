//! Activation graphs of MLP blocks and how well they split into experts.
//!
//! A layer's activations form a weighted bipartite graph between its
//! neurons and the inputs. Expertness is the largest share of the squared
//! edge mass that a partition into `k` co-clusters keeps inside clusters.
//! The spectral estimate is what experiments use; the exhaustive search is
//! its oracle on tiny graphs. The module also holds the mixture-of-experts
//! view of an MLP with its information bound, and neuron criticality.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::{DMatrix, SVD};
use rand::Rng as _;
use rayon::prelude::*;
use serde::Serialize;

use crate::data::Dataset;
use crate::distill::csv_error;
use crate::error::{Error, Result};
use crate::nn::{Hooks, Layer, Linear, ReMemConfig, VitModel};
use crate::rng::{indexed_seed, rng_for, sub_seed, Rng};
use crate::tensor::{no_grad, Tensor};

const EXTRACT_CHUNK: usize = 128;
pub const KMEANS_RESTARTS: usize = 5;
pub const KMEANS_ITERATIONS: usize = 100;
pub const BRUTEFORCE_LIMIT: f64 = 1e7;
pub const MAX_SUPPORT: usize = 10_000;
/// Inputs whose reference embedding is shorter than this are skipped.
pub const MIN_EMBEDDING_NORM: f64 = 1e-9;

/// Non-negative neuron × input weights, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationGraph {
    pub n_neurons: usize,
    pub n_inputs: usize,
    pub weights: Vec<f64>,
}

impl ActivationGraph {
    pub fn new(weights: Vec<f64>, n_neurons: usize, n_inputs: usize) -> Result<ActivationGraph> {
        if weights.len() != n_neurons * n_inputs {
            return Err(Error::shape("activation graph", &[weights.len()], &[n_neurons, n_inputs]));
        }
        if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
            return Err(Error::Domain(format!("graph weight {w} is not a finite non-negative value")));
        }
        Ok(ActivationGraph {
            n_neurons,
            n_inputs,
            weights,
        })
    }

    pub fn get(&self, neuron: usize, input: usize) -> f64 {
        self.weights[neuron * self.n_inputs + input]
    }

    pub fn input_column(&self, input: usize) -> Vec<f64> {
        (0..self.n_neurons).map(|i| self.get(i, input)).collect()
    }

    /// Row `i` of the result is row `rows[i]` of `self`, likewise columns.
    pub fn permuted(&self, rows: &[usize], cols: &[usize]) -> ActivationGraph {
        let mut weights = Vec::with_capacity(self.weights.len());
        for &r in rows {
            weights.extend(cols.iter().map(|&c| self.get(r, c)));
        }
        ActivationGraph {
            n_neurons: rows.len(),
            n_inputs: cols.len(),
            weights,
        }
    }

    fn squared(&self) -> Vec<f64> {
        self.weights.iter().map(|w| w * w).collect()
    }

    pub fn total_mass(&self) -> f64 {
        self.weights.iter().map(|w| w * w).sum()
    }
}

/// Sum of squared weights between the given neurons and inputs.
pub fn cut(graph: &ActivationGraph, neurons: &[usize], inputs: &[usize]) -> Result<f64> {
    if let Some(&i) = neurons.iter().find(|&&i| i >= graph.n_neurons) {
        return Err(Error::Parameter(format!("neuron {i} out of {}", graph.n_neurons)));
    }
    if let Some(&j) = inputs.iter().find(|&&j| j >= graph.n_inputs) {
        return Err(Error::Parameter(format!("input {j} out of {}", graph.n_inputs)));
    }
    let mut total = 0.0;
    for &i in neurons {
        for &j in inputs {
            let w = graph.get(i, j);
            total += w * w;
        }
    }
    Ok(total)
}

/// Cluster labels in `0..k` for every neuron and every input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bipartition {
    pub k: usize,
    pub neuron_labels: Vec<usize>,
    pub input_labels: Vec<usize>,
}

impl Bipartition {
    pub fn members(&self, cluster: usize) -> (Vec<usize>, Vec<usize>) {
        let pick = |labels: &[usize]| {
            labels
                .iter()
                .enumerate()
                .filter(|(_, &c)| c == cluster)
                .map(|(i, _)| i)
                .collect()
        };
        (pick(&self.neuron_labels), pick(&self.input_labels))
    }

    /// Share of the squared mass kept inside clusters; 0 for an empty graph.
    pub fn score(&self, graph: &ActivationGraph) -> Result<f64> {
        if self.neuron_labels.len() != graph.n_neurons || self.input_labels.len() != graph.n_inputs {
            return Err(Error::shape(
                "bipartition",
                &[self.neuron_labels.len(), self.input_labels.len()],
                &[graph.n_neurons, graph.n_inputs],
            ));
        }
        if self.neuron_labels.iter().chain(&self.input_labels).any(|&c| c >= self.k) {
            return Err(Error::Parameter(format!("cluster label outside 0..{}", self.k)));
        }
        let total = graph.total_mass();
        if total == 0.0 {
            return Ok(0.0);
        }
        Ok(within_mass(&graph.squared(), graph.n_inputs, &self.neuron_labels, &self.input_labels) / total)
    }
}

fn within_mass(squared: &[f64], n_inputs: usize, rows: &[usize], cols: &[usize]) -> f64 {
    let mut kept = 0.0;
    for (i, &ri) in rows.iter().enumerate() {
        let row = &squared[i * n_inputs..(i + 1) * n_inputs];
        for (w, &cj) in row.iter().zip(cols) {
            if cj == ri {
                kept += w;
            }
        }
    }
    kept
}

#[derive(Debug, Clone, PartialEq)]
pub struct Expertness {
    pub expertness: f64,
    pub partition: Bipartition,
}

/// Exhaustive search over labelings in which every cluster holds at least
/// one vertex, neuron or input.
pub fn expertness_bruteforce(graph: &ActivationGraph, k: usize) -> Result<Expertness> {
    let (u, x) = (graph.n_neurons, graph.n_inputs);
    let n = u + x;
    if k == 0 || k > n {
        return Err(Error::Parameter(format!("k = {k} needs 1..={n} clusters")));
    }
    let space = (k as f64).powi(n as i32);
    if space > BRUTEFORCE_LIMIT {
        return Err(Error::Size(format!("{k}^{n} labelings exceed {BRUTEFORCE_LIMIT}")));
    }
    let squared = graph.squared();
    let total: f64 = squared.iter().sum();
    let mut labels = vec![0usize; n];
    let mut counts = vec![0usize; k];
    counts[0] = n;
    let mut best: Option<(f64, Vec<usize>)> = None;
    loop {
        if counts.iter().all(|&c| c > 0) {
            let kept = within_mass(&squared, x, &labels[..u], &labels[u..]);
            if best.as_ref().is_none_or(|(b, _)| kept > *b) {
                best = Some((kept, labels.clone()));
            }
        }
        // Odometer increment over all k^n labelings.
        let mut pos = 0;
        loop {
            if pos == n {
                let (kept, labels) = best.expect("k <= n leaves a valid labeling");
                let partition = Bipartition {
                    k,
                    neuron_labels: labels[..u].to_vec(),
                    input_labels: labels[u..].to_vec(),
                };
                let expertness = if total == 0.0 { 0.0 } else { kept / total };
                return Ok(Expertness { expertness, partition });
            }
            counts[labels[pos]] -= 1;
            labels[pos] = (labels[pos] + 1) % k;
            counts[labels[pos]] += 1;
            if labels[pos] != 0 {
                break;
            }
            pos += 1;
        }
    }
}

/// Spectral co-clustering of the squared graph followed by k-means on the
/// joint neuron/input embedding.
pub fn expertness_spectral(graph: &ActivationGraph, k: usize, seed: u64) -> Result<Expertness> {
    let (u, x) = (graph.n_neurons, graph.n_inputs);
    if k < 2 || k > u.min(x) {
        return Err(Error::Parameter(format!(
            "spectral co-clustering needs 2 <= k <= {}, got {k}",
            u.min(x)
        )));
    }
    let squared = graph.squared();
    if squared.iter().all(|&w| w == 0.0) {
        return Err(Error::Degenerate("activation graph has no nonzero edge".into()));
    }
    let inv_sqrt = |sums: Vec<f64>| -> Vec<f64> {
        sums.into_iter()
            .map(|s| if s > 0.0 { 1.0 / s.sqrt() } else { 1.0 })
            .collect()
    };
    let row_scale = inv_sqrt((0..u).map(|i| squared[i * x..(i + 1) * x].iter().sum()).collect());
    let col_scale = inv_sqrt((0..x).map(|j| (0..u).map(|i| squared[i * x + j]).sum()).collect());
    let normalized = DMatrix::from_fn(u, x, |i, j| squared[i * x + j] * row_scale[i] * col_scale[j]);
    let svd = SVD::new(normalized, true, true);
    let (left, right_t) = (svd.u.expect("requested"), svd.v_t.expect("requested"));

    let chosen = embedding_vectors(svd.singular_values.as_slice(), k);
    let mut points = vec![vec![0.0; chosen.len()]; u + x];
    for (c, &s) in chosen.iter().enumerate() {
        let mut col_u: Vec<f64> = (0..u).map(|i| left[(i, s)]).collect();
        let mut col_v: Vec<f64> = (0..x).map(|j| right_t[(s, j)]).collect();
        // Fix the sign of each singular pair so the embedding does not
        // depend on the decomposition's arbitrary choice.
        let pivot = col_u.iter().chain(&col_v).copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        if pivot < 0.0 {
            col_u.iter_mut().chain(col_v.iter_mut()).for_each(|v| *v = -*v);
        }
        for i in 0..u {
            points[i][c] = col_u[i] * row_scale[i];
        }
        for j in 0..x {
            points[u + j][c] = col_v[j] * col_scale[j];
        }
    }

    let labels = kmeans(&points, k, sub_seed(seed, "spectral-kmeans"));
    let partition = Bipartition {
        k,
        neuron_labels: labels[..u].to_vec(),
        input_labels: labels[u..].to_vec(),
    };
    let expertness = partition.score(graph)?;
    Ok(Expertness { expertness, partition })
}

/// Indices of the singular vectors used for the embedding: the ⌈log₂ k⌉
/// after the leading one, widened so that no group of tied singular values
/// is split. Exactly disconnected blocks give tied values, and a partial
/// pick from such a group would be an arbitrary basis that can merge blocks.
fn embedding_vectors(values: &[f64], k: usize) -> Vec<usize> {
    let tol = 1e-8 * values[0].max(f64::MIN_POSITIVE);
    let tied = |a: usize, b: usize| (values[a] - values[b]).abs() <= tol;
    let start = if tied(0, 1) { 0 } else { 1 };
    let mut end = (k as f64).log2().ceil() as usize;
    while end + 1 < values.len() && tied(end, end + 1) {
        end += 1;
    }
    (start..=end).collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Best of several k-means++ runs. Every cluster ends non-empty. Points are
/// visited in sorted order so the result does not depend on their order.
fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| {
        points[a]
            .iter()
            .zip(&points[b])
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let sorted: Vec<&[f64]> = order.iter().map(|&i| points[i].as_slice()).collect();
    let mut best: Option<(f64, Vec<usize>)> = None;
    for restart in 0..KMEANS_RESTARTS {
        let mut rng = rng_for(indexed_seed(seed, restart as u64), "kmeans");
        let (inertia, labels) = lloyd(&sorted, k, &mut rng);
        if best.as_ref().is_none_or(|(b, _)| inertia < *b) {
            best = Some((inertia, labels));
        }
    }
    let sorted_labels = best.expect("at least one restart").1;
    let mut labels = vec![0; points.len()];
    for (pos, &i) in order.iter().enumerate() {
        labels[i] = sorted_labels[pos];
    }
    labels
}

fn lloyd(points: &[&[f64]], k: usize, rng: &mut Rng) -> (f64, Vec<usize>) {
    let n = points.len();
    // k-means++ seeding; once every remaining point coincides with a
    // chosen center, pick an unused point uniformly.
    let mut chosen = vec![rng.random_range(0..n)];
    let mut dist: Vec<f64> = points.iter().map(|p| sq_dist(p, points[chosen[0]])).collect();
    while chosen.len() < k {
        let total: f64 = dist.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, d) in dist.iter().enumerate() {
                if *d > 0.0 && target < *d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            while dist[pick] == 0.0 {
                pick -= 1;
            }
            pick
        } else {
            let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen.push(next);
        for (d, p) in dist.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, points[next]));
        }
    }
    let dim = points[0].len();
    let mut centers: Vec<Vec<f64>> = chosen.iter().map(|&i| points[i].to_vec()).collect();
    let mut labels = vec![usize::MAX; n];
    for _ in 0..KMEANS_ITERATIONS {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let c = nearest(p, &centers);
            if labels[i] != c {
                labels[i] = c;
                changed = true;
            }
        }
        fill_empty(points, &centers, &mut labels, k);
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &c) in points.iter().zip(&labels) {
            counts[c] += 1;
            sums[c].iter_mut().zip(p.iter()).for_each(|(s, v)| *s += v);
        }
        for ((center, sum), count) in centers.iter_mut().zip(sums).zip(counts) {
            *center = sum.into_iter().map(|s| s / count as f64).collect();
        }
        if !changed {
            break;
        }
    }
    let inertia = points.iter().zip(&labels).map(|(p, &c)| sq_dist(p, &centers[c])).sum();
    (inertia, labels)
}

fn nearest(p: &[f64], centers: &[Vec<f64>]) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (c, center) in centers.iter().enumerate() {
        let d = sq_dist(p, center);
        if d < best.0 {
            best = (d, c);
        }
    }
    best.1
}

/// Moves the point farthest from its center into each empty cluster, taking
/// only from clusters that can spare one.
fn fill_empty(points: &[&[f64]], centers: &[Vec<f64>], labels: &mut [usize], k: usize) {
    loop {
        let mut counts = vec![0usize; k];
        labels.iter().for_each(|&c| counts[c] += 1);
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        let donor = (0..points.len())
            .filter(|&i| counts[labels[i]] > 1)
            .max_by(|&a, &b| {
                sq_dist(points[a], &centers[labels[a]])
                    .total_cmp(&sq_dist(points[b], &centers[labels[b]]))
                    .then(b.cmp(&a))
            })
            .expect("k <= points leaves a donor");
        labels[donor] = empty;
    }
}

/// How an input's per-token activations become graph weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenAggregation {
    /// One row per neuron; the weight is the L2 norm over tokens.
    #[default]
    L2,
    /// One row per (token, neuron) pair, token-major.
    Concat,
}

/// Graphs for every active layer, in one pass over the data. Pruned layers
/// yield `None`.
pub fn extract_graphs(
    model: &VitModel,
    remem: &ReMemConfig,
    dataset: &Dataset,
    aggregation: TokenAggregation,
) -> Result<Vec<Option<ActivationGraph>>> {
    if dataset.is_empty() {
        return Err(Error::Parameter("activation graph needs at least one input".into()));
    }
    let cfg = &model.config;
    let (tokens, d_mlp, n) = (cfg.tokens(), cfg.d_mlp, dataset.len());
    let rows = match aggregation {
        TokenAggregation::L2 => d_mlp,
        TokenAggregation::Concat => d_mlp * tokens,
    };
    let mut graphs: Vec<Option<Vec<f64>>> = (0..cfg.n_layers)
        .map(|l| (!remem.mlp_pruned(l, cfg.n_layers)).then(|| vec![0.0; rows * n]))
        .collect();
    let _g = no_grad();
    let all = dataset.all_indices();
    for (chunk_no, chunk) in all.chunks(EXTRACT_CHUNK).enumerate() {
        let out = model.forward(remem, &dataset.batch(chunk)?)?;
        for (graph, act) in graphs.iter_mut().zip(&out.mlp_activations) {
            let (Some(graph), Some(act)) = (graph, act) else {
                continue;
            };
            let act = act.data();
            for b in 0..chunk.len() {
                let input = chunk_no * EXTRACT_CHUNK + b;
                for t in 0..tokens {
                    let row = &act[(b * tokens + t) * d_mlp..(b * tokens + t + 1) * d_mlp];
                    for (i, a) in row.iter().enumerate() {
                        match aggregation {
                            TokenAggregation::L2 => graph[i * n + input] += a * a,
                            TokenAggregation::Concat => graph[(t * d_mlp + i) * n + input] = *a,
                        }
                    }
                }
            }
        }
    }
    graphs
        .into_iter()
        .map(|g| {
            g.map(|mut w| {
                if aggregation == TokenAggregation::L2 {
                    w.iter_mut().for_each(|v| *v = v.sqrt());
                }
                ActivationGraph::new(w, rows, n)
            })
            .transpose()
        })
        .collect()
}

pub fn extract_graph(model: &VitModel, remem: &ReMemConfig, layer: usize, dataset: &Dataset) -> Result<ActivationGraph> {
    let n_layers = model.config.n_layers;
    if layer >= n_layers {
        return Err(Error::Parameter(format!("layer {layer} out of {n_layers}")));
    }
    if remem.mlp_pruned(layer, n_layers) {
        return Err(Error::Structural(format!("MLP of layer {layer} is pruned")));
    }
    let mut graphs = extract_graphs(model, remem, dataset, TokenAggregation::L2)?;
    Ok(graphs.swap_remove(layer).expect("active layer"))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerExpertness {
    /// 0-based layer index.
    pub layer: usize,
    pub expertness: f64,
    pub k: usize,
    pub n_neurons: usize,
    pub n_inputs: usize,
    pub seed: u64,
}

/// Spectral expertness of every active layer; pruned layers are skipped.
pub fn expertness_profile(
    model: &VitModel,
    remem: &ReMemConfig,
    dataset: &Dataset,
    k: usize,
    seed: u64,
) -> Result<Vec<LayerExpertness>> {
    let graphs = extract_graphs(model, remem, dataset, TokenAggregation::L2)?;
    graphs
        .into_par_iter()
        .enumerate()
        .filter_map(|(layer, g)| g.map(|g| (layer, g)))
        .map(|(layer, graph)| {
            let layer_seed = indexed_seed(seed, layer as u64);
            let e = expertness_spectral(&graph, k, layer_seed)?;
            Ok(LayerExpertness {
                layer,
                expertness: e.expertness,
                k,
                n_neurons: graph.n_neurons,
                n_inputs: graph.n_inputs,
                seed,
            })
        })
        .collect()
}

pub const EXPERTNESS_HEADER: &str = "layer,expertness,k,n_neurons,n_inputs,seed";

pub fn write_expertness_csv(path: &Path, rows: &[LayerExpertness]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(EXPERTNESS_HEADER.split(',')).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.write_record([
            r.layer.to_string(),
            r.expertness.to_string(),
            r.k.to_string(),
            r.n_neurons.to_string(),
            r.n_inputs.to_string(),
            r.seed.to_string(),
        ])
        .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Sends each input to one expert by the largest gate score; ties go to
/// the lowest expert index.
#[derive(Debug, Clone, PartialEq)]
pub struct Router {
    /// `[d_in, n_experts]`, row-major.
    pub gate: Vec<f64>,
    pub d_in: usize,
    pub n_experts: usize,
}

impl Router {
    pub fn new(gate: Vec<f64>, d_in: usize, n_experts: usize) -> Result<Router> {
        if n_experts == 0 || gate.len() != d_in * n_experts {
            return Err(Error::shape("router", &[gate.len()], &[d_in, n_experts]));
        }
        Ok(Router { gate, d_in, n_experts })
    }

    pub fn route(&self, x: &[f64]) -> usize {
        let mut best = (f64::NEG_INFINITY, 0);
        for z in 0..self.n_experts {
            let s: f64 = x.iter().enumerate().map(|(i, v)| v * self.gate[i * self.n_experts + z]).sum();
            if s > best.0 {
                best = (s, z);
            }
        }
        best.1
    }
}

/// An MLP block read as a mixture of experts: each input activates only the
/// neurons of its routed expert, with activations quantized to `bits`.
#[derive(Debug, Clone)]
pub struct MoeMlp {
    pub fc1: Linear,
    pub fc2: Linear,
    pub experts: Vec<Vec<usize>>,
    pub router: Router,
    /// `None` leaves activations unquantized.
    pub bits: Option<u32>,
    /// Per-neuron `(low, high)` quantization range.
    pub ranges: Vec<(f64, f64)>,
}

impl MoeMlp {
    pub fn new(fc1: Linear, fc2: Linear, experts: Vec<Vec<usize>>, router: Router, bits: Option<u32>) -> Result<MoeMlp> {
        let d_mlp = fc1.d_out();
        if fc2.d_in() != d_mlp || router.d_in != fc1.d_in() || router.n_experts != experts.len() {
            return Err(Error::shape(
                "moe",
                &[fc1.d_in(), d_mlp, fc2.d_in()],
                &[router.d_in, router.n_experts, experts.len()],
            ));
        }
        for (z, set) in experts.iter().enumerate() {
            if set.is_empty() {
                return Err(Error::Expert(format!("expert {z} has no neurons")));
            }
            if let Some(&i) = set.iter().find(|&&i| i >= d_mlp) {
                return Err(Error::Expert(format!("expert {z} names neuron {i} of {d_mlp}")));
            }
        }
        if bits == Some(0) {
            return Err(Error::Parameter("quantization needs at least 1 bit".into()));
        }
        Ok(MoeMlp {
            fc1,
            fc2,
            experts,
            router,
            bits,
            ranges: vec![(0.0, 0.0); d_mlp],
        })
    }

    /// Wraps the MLP of a transformer layer.
    pub fn from_layer(layer: &Layer, experts: Vec<Vec<usize>>, router: Router, bits: Option<u32>) -> Result<MoeMlp> {
        MoeMlp::new(layer.fc1.clone(), layer.fc2.clone(), experts, router, bits)
    }

    /// Sets each neuron's quantization range to what it reaches on `x`.
    pub fn calibrate(&mut self, x: &Tensor) -> Result<()> {
        let _g = no_grad();
        let act = self.fc1.forward(x)?.relu();
        let d = self.fc1.d_out();
        let mut ranges = vec![(f64::INFINITY, f64::NEG_INFINITY); d];
        for row in act.data().chunks(d) {
            for (r, &a) in ranges.iter_mut().zip(row) {
                *r = (r.0.min(a), r.1.max(a));
            }
        }
        self.ranges = ranges.into_iter().map(|r| if r.0 > r.1 { (0.0, 0.0) } else { r }).collect();
        Ok(())
    }

    pub fn quantize(&self, neuron: usize, a: f64) -> f64 {
        let Some(bits) = self.bits else {
            return a;
        };
        let (lo, hi) = self.ranges[neuron];
        if hi <= lo {
            return lo;
        }
        let levels = ((1u64 << bits.min(52)) - 1) as f64;
        let step = (hi - lo) / levels;
        lo + ((a.clamp(lo, hi) - lo) / step).round() * step
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.experts.iter().map(Vec::len).collect()
    }
}

/// Rows of `x` are block inputs; returns the block outputs.
pub fn moe_forward(moe: &MoeMlp, x: &Tensor) -> Result<Tensor> {
    let _g = no_grad();
    let d_in = moe.fc1.d_in();
    if x.shape().len() != 2 || x.shape()[1] != d_in {
        return Err(Error::shape("moe_forward", x.shape(), &[0, d_in]));
    }
    let act = moe.fc1.forward(x)?.relu();
    let d_mlp = moe.fc1.d_out();
    let mut masked = vec![0.0; act.numel()];
    {
        let (xs, act) = (x.data(), act.data());
        for (r, out) in masked.chunks_mut(d_mlp).enumerate() {
            let z = moe.router.route(&xs[r * d_in..(r + 1) * d_in]);
            for &i in &moe.experts[z] {
                out[i] = moe.quantize(i, act[r * d_mlp + i]);
            }
        }
    }
    moe.fc2.forward(&Tensor::new(masked, act.shape())?)
}

/// Upper bound in bits on the information an MoE block's output carries
/// about its input: `log₂ M + Σ |S_z|·b`.
pub fn moe_mi_bound(n_experts: usize, expert_sizes: &[usize], bits: u32) -> Result<f64> {
    if n_experts == 0 || expert_sizes.len() != n_experts || expert_sizes.contains(&0) || bits == 0 {
        return Err(Error::Parameter(format!(
            "bound needs M >= 1 matching non-empty experts and b >= 1, got M = {n_experts}, sizes {expert_sizes:?}, b = {bits}"
        )));
    }
    let total: usize = expert_sizes.iter().sum();
    Ok((n_experts as f64).log2() + (total as u64 * bits as u64) as f64)
}

/// Exact output entropy in bits for inputs `x` drawn with probabilities
/// `probs`; the block is deterministic, so this equals the mutual
/// information between input and output.
pub fn moe_mi_empirical(moe: &MoeMlp, x: &Tensor, probs: &[f64]) -> Result<f64> {
    let n = x.shape().first().copied().unwrap_or(0);
    if n > MAX_SUPPORT {
        return Err(Error::Size(format!("support of {n} inputs exceeds {MAX_SUPPORT}")));
    }
    if probs.len() != n {
        return Err(Error::shape("moe_mi_empirical", &[probs.len()], &[n]));
    }
    if probs.iter().any(|p| !(*p >= 0.0)) || (probs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Domain("input probabilities must be non-negative and sum to 1".into()));
    }
    let out = moe_forward(moe, x)?;
    let d_out = moe.fc2.d_out();
    let mut mass: HashMap<Vec<u64>, f64> = HashMap::new();
    for (row, &p) in out.data().chunks(d_out).zip(probs) {
        // Normalise -0.0 so equal outputs share a key.
        let key = row.iter().map(|v| (v + 0.0).to_bits()).collect();
        *mass.entry(key).or_default() += p;
    }
    Ok(mass.values().filter(|&&p| p > 0.0).map(|p| -p * p.log2()).sum())
}

/// Largest relative change `‖ablated − base‖ / ‖base‖` over rows, skipping
/// rows whose base norm is below [`MIN_EMBEDDING_NORM`].
pub fn max_relative_change(base: &Tensor, ablated: &Tensor) -> Result<f64> {
    if base.shape() != ablated.shape() || base.shape().len() != 2 {
        return Err(Error::shape("relative change", base.shape(), ablated.shape()));
    }
    let d = base.shape()[1];
    let (b, a) = (base.data(), ablated.data());
    let mut worst: Option<f64> = None;
    for (rb, ra) in b.chunks(d).zip(a.chunks(d)) {
        let norm = rb.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < MIN_EMBEDDING_NORM {
            continue;
        }
        let change = rb.iter().zip(ra).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt() / norm;
        worst = Some(worst.map_or(change, |w| w.max(change)));
    }
    worst.ok_or_else(|| Error::Degenerate("every reference embedding is zero".into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NeuronCriticality {
    pub layer: usize,
    pub neuron: usize,
    pub sigma: f64,
}

/// Sorts by σ, largest first; equal values keep neuron order.
pub fn rank_by_sigma(mut rows: Vec<NeuronCriticality>) -> Vec<NeuronCriticality> {
    rows.sort_by(|a, b| b.sigma.total_cmp(&a.sigma).then(a.neuron.cmp(&b.neuron)));
    rows
}

/// For each neuron of the layer's MLP, the largest relative change of the
/// final CLS embedding over inputs when that neuron is silenced.
pub fn criticality(model: &VitModel, remem: &ReMemConfig, dataset: &Dataset, layer: usize) -> Result<Vec<NeuronCriticality>> {
    let cfg = &model.config;
    if layer >= cfg.n_layers {
        return Err(Error::Parameter(format!("layer {layer} out of {}", cfg.n_layers)));
    }
    if dataset.is_empty() {
        return Err(Error::Degenerate("criticality needs at least one input".into()));
    }
    let _g = no_grad();
    let images = dataset.batch(&dataset.all_indices())?;
    let base = model.forward(remem, &images)?.cls_embedding;
    let pruned = remem.mlp_pruned(layer, cfg.n_layers);
    let mut rows = Vec::with_capacity(cfg.d_mlp);
    for neuron in 0..cfg.d_mlp {
        let sigma = if pruned {
            0.0
        } else {
            let hooks = Hooks::zero_neuron(layer, neuron, cfg.d_mlp);
            let ablated = model.forward_with(remem, &images, &hooks)?.cls_embedding;
            max_relative_change(&base, &ablated)?
        };
        rows.push(NeuronCriticality { layer, neuron, sigma });
    }
    Ok(rank_by_sigma(rows))
}

pub const CRITICALITY_HEADER: &str = "layer,neuron,sigma";

pub fn write_criticality_csv(path: &Path, rows: &[NeuronCriticality]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(CRITICALITY_HEADER.split(',')).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.write_record([r.layer.to_string(), r.neuron.to_string(), r.sigma.to_string()])
            .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
