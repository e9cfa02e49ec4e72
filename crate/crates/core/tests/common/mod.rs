//! Independent oracles shared by the integration and acceptance tests.

#![allow(dead_code)]

use mpa_core::patchgrid::ImageBuffer;
use mpa_core::ratings::RatingDistribution;
use mpa_core::scorer::{Real, Scorer, ScorerConfig};
use rand::Rng;

/// Minimum cost of moving mass `supply` onto `demand` when moving one unit
/// from class `i` to class `j` costs `|i - j|`.
///
/// Solved as a min-cost flow (successive shortest paths with Bellman-Ford on
/// the residual graph), without using cumulative sums.
pub fn transport_cost(supply: &[f64], demand: &[f64]) -> f64 {
    let n = supply.len();
    assert_eq!(n, demand.len());
    let source = 2 * n;
    let sink = 2 * n + 1;
    let nodes = 2 * n + 2;
    let mut graph = FlowGraph::new(nodes);
    for i in 0..n {
        graph.add_edge(source, i, supply[i], 0.0);
        graph.add_edge(n + i, sink, demand[i], 0.0);
        for j in 0..n {
            graph.add_edge(i, n + j, f64::INFINITY, (i as f64 - j as f64).abs());
        }
    }
    graph.min_cost_flow(source, sink)
}

struct Edge {
    to: usize,
    cap: f64,
    cost: f64,
}

struct FlowGraph {
    edges: Vec<Edge>,
    adj: Vec<Vec<usize>>,
}

const FLOW_EPS: f64 = 1e-15;

impl FlowGraph {
    fn new(nodes: usize) -> Self {
        FlowGraph {
            edges: Vec::new(),
            adj: vec![Vec::new(); nodes],
        }
    }

    fn add_edge(&mut self, from: usize, to: usize, cap: f64, cost: f64) {
        self.adj[from].push(self.edges.len());
        self.edges.push(Edge { to, cap, cost });
        self.adj[to].push(self.edges.len());
        self.edges.push(Edge {
            to: from,
            cap: 0.0,
            cost: -cost,
        });
    }

    fn min_cost_flow(&mut self, source: usize, sink: usize) -> f64 {
        let nodes = self.adj.len();
        let mut total = 0.0;
        loop {
            let mut dist = vec![f64::INFINITY; nodes];
            let mut via = vec![usize::MAX; nodes];
            dist[source] = 0.0;
            for _ in 0..nodes {
                let mut changed = false;
                for u in 0..nodes {
                    if dist[u].is_infinite() {
                        continue;
                    }
                    for &e in &self.adj[u] {
                        let edge = &self.edges[e];
                        if edge.cap > FLOW_EPS && dist[u] + edge.cost < dist[edge.to] - 1e-12 {
                            dist[edge.to] = dist[u] + edge.cost;
                            via[edge.to] = e;
                            changed = true;
                        }
                    }
                }
                if !changed {
                    break;
                }
            }
            if dist[sink].is_infinite() {
                return total;
            }
            let mut bottleneck = f64::INFINITY;
            let mut v = sink;
            while v != source {
                let e = via[v];
                bottleneck = bottleneck.min(self.edges[e].cap);
                v = self.edges[e ^ 1].to;
            }
            let mut v = sink;
            while v != source {
                let e = via[v];
                self.edges[e].cap -= bottleneck;
                self.edges[e ^ 1].cap += bottleneck;
                v = self.edges[e ^ 1].to;
            }
            total += bottleneck * dist[sink];
        }
    }
}

/// A strictly positive random distribution over `n` classes.
pub fn random_dist<R: Rng>(rng: &mut R, n: usize) -> RatingDistribution {
    let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..1.0)).collect();
    let s: f64 = w.iter().sum();
    RatingDistribution::new(w.iter().map(|x| x / s).collect()).unwrap()
}

/// A random distribution that may contain exact zeros.
pub fn sparse_dist<R: Rng>(rng: &mut R, n: usize) -> RatingDistribution {
    loop {
        let w: Vec<f64> = (0..n)
            .map(|_| {
                if rng.gen_bool(0.3) {
                    0.0
                } else {
                    rng.gen_range(0.0..1.0)
                }
            })
            .collect();
        let s: f64 = w.iter().sum();
        if s > 0.0 {
            return RatingDistribution::new(w.iter().map(|x| x / s).collect()).unwrap();
        }
    }
}

pub fn noise_image<R: Rng>(rng: &mut R, w: usize, h: usize) -> ImageBuffer {
    ImageBuffer::from_fn(w, h, |_, _| [rng.gen(), rng.gen(), rng.gen()]).unwrap()
}

/// Central differences of `f` at `x`.
pub fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let plus = f(&probe);
            probe[i] = x[i] - h;
            let minus = f(&probe);
            probe[i] = x[i];
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|)` over whole vectors.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / norm(a).max(norm(b)).max(1e-300)
}

/// Two small convolutions, enough to exercise every backward path.
pub fn mini_config() -> ScorerConfig {
    ScorerConfig {
        conv_channels: vec![2, 3],
        input_min_side: 16,
        ..ScorerConfig::default()
    }
}

/// Central differences of `loss` with respect to every scorer parameter.
pub fn parameter_diff<T: Real>(
    scorer: &Scorer<T>,
    loss: impl Fn(&Scorer<T>) -> f64,
    h: f64,
) -> Vec<f64> {
    let mut probe = scorer.clone();
    let mut out = Vec::new();
    for t in 0..scorer.parameters().len() {
        for i in 0..scorer.parameters()[t].data.len() {
            let orig = scorer.parameters()[t].data[i];
            probe.parameters_mut()[t].data[i] = T::from_f64(orig.to_f64() + h);
            let plus = loss(&probe);
            probe.parameters_mut()[t].data[i] = T::from_f64(orig.to_f64() - h);
            let minus = loss(&probe);
            probe.parameters_mut()[t].data[i] = orig;
            out.push((plus - minus) / (2.0 * h));
        }
    }
    out
}
