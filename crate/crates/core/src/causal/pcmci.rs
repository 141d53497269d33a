//! PC candidate selection followed by momentary conditional independence
//! (MCI) re-testing, using [`parcorr`] as the independence test.
//!
//! At `tau_max = 0` the graph is undirected: the PC phase is run in its
//! order-independent ("stable") form over unordered pairs and the result is
//! symmetric. With `tau_max > 0` each target gets its own lagged candidate
//! set and links point from the past into the present.

use std::collections::BTreeSet;

use itertools::Itertools;
use serde::{Deserialize, Serialize};

use super::parcorr::{parcorr, CiResult};
use super::CausalPruneConfig;
use crate::error::{Error, Result};

/// Causal-strength matrix over sensors plus the RUL channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalGraph {
    pub dim: usize,
    pub strength: Vec<Vec<f64>>,
    pub significant: Vec<Vec<bool>>,
    pub alpha: f64,
}

impl CausalGraph {
    pub fn empty(dim: usize, alpha: f64) -> Self {
        CausalGraph {
            dim,
            strength: vec![vec![0.0; dim]; dim],
            significant: vec![vec![false; dim]; dim],
            alpha,
        }
    }

    pub fn link_count(&self) -> usize {
        self.significant.iter().flatten().filter(|&&s| s).count()
    }

    /// Unordered pairs `(i, j)`, `i < j`, linked in either direction.
    pub fn undirected_links(&self) -> BTreeSet<(usize, usize)> {
        let mut out = BTreeSet::new();
        for i in 0..self.dim {
            for j in 0..self.dim {
                if self.significant[i][j] {
                    out.insert((i.min(j), i.max(j)));
                }
            }
        }
        out
    }
}

fn columns(segment: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let dim = segment.first().map_or(0, Vec::len);
    if let Some(t) = segment.iter().position(|r| r.len() != dim) {
        return Err(Error::Shape(format!("segment row {t} has {} columns, expected {dim}", segment[t].len())));
    }
    Ok((0..dim).map(|j| segment.iter().map(|r| r[j]).collect()).collect())
}

fn is_constant(col: &[f64]) -> bool {
    col.iter().all(|&v| v == col[0])
}

/// Estimates the causal graph of one segment (`n` rows of `d + 1` columns).
pub fn pcmci_graph(segment: &[Vec<f64>], config: &CausalPruneConfig) -> Result<CausalGraph> {
    config.validate()?;
    let cols = columns(segment)?;
    let dim = cols.len();
    if dim <= 1 || segment.len() < 4 {
        return Ok(CausalGraph::empty(dim, config.alpha));
    }
    if config.tau_max == 0 {
        instantaneous(&cols, config)
    } else {
        lagged(&cols, config)
    }
}

struct Tester<'a> {
    alpha: f64,
    // largest conditioning set the sample count supports
    cap: usize,
    series: &'a dyn Fn(usize) -> &'a [f64],
}

impl Tester<'_> {
    fn test(&self, x: usize, y: usize, z: &[usize]) -> Result<CiResult> {
        let zs: Vec<&[f64]> = z.iter().map(|&k| (self.series)(k)).collect();
        parcorr((self.series)(x), (self.series)(y), &zs)
    }

    fn independent(&self, r: &CiResult) -> bool {
        !(r.p_value < self.alpha)
    }
}

fn instantaneous(cols: &[Vec<f64>], config: &CausalPruneConfig) -> Result<CausalGraph> {
    let dim = cols.len();
    let n = cols[0].len();
    let lookup = |k: usize| cols[k].as_slice();
    let tester = Tester {
        alpha: config.alpha,
        cap: n.saturating_sub(3),
        series: &lookup,
    };
    let live: Vec<bool> = cols.iter().map(|c| !is_constant(c)).collect();
    let mut adj: Vec<BTreeSet<usize>> = (0..dim)
        .map(|i| {
            if live[i] {
                (0..dim).filter(|&j| j != i && live[j]).collect()
            } else {
                BTreeSet::new()
            }
        })
        .collect();

    let max_p = config.max_cond_set.min(tester.cap);
    for p in 0..=max_p {
        let frozen = adj.clone();
        let mut any_testable = false;
        for i in 0..dim {
            for &j in frozen[i].iter().filter(|&&j| j > i) {
                let side_a: Vec<usize> = frozen[i].iter().copied().filter(|&k| k != j).collect();
                let side_b: Vec<usize> = frozen[j].iter().copied().filter(|&k| k != i).collect();
                if side_a.len() < p && side_b.len() < p {
                    continue;
                }
                any_testable = true;
                let mut seen: BTreeSet<Vec<usize>> = BTreeSet::new();
                let subsets = side_a.into_iter().combinations(p).chain(side_b.into_iter().combinations(p));
                for cond in subsets {
                    if !seen.insert(cond.clone()) {
                        continue;
                    }
                    if tester.independent(&tester.test(i, j, &cond)?) {
                        adj[i].remove(&j);
                        adj[j].remove(&i);
                        break;
                    }
                }
            }
        }
        if !any_testable {
            break;
        }
    }

    let mut graph = CausalGraph::empty(dim, config.alpha);
    for i in 0..dim {
        for &j in adj[i].iter().filter(|&&j| j > i) {
            let cond: Vec<usize> = adj[i]
                .union(&adj[j])
                .copied()
                .filter(|&k| k != i && k != j)
                .take(tester.cap)
                .collect();
            let r = tester.test(i, j, &cond)?;
            if !tester.independent(&r) && r.rho != 0.0 {
                graph.strength[i][j] = r.rho;
                graph.strength[j][i] = r.rho;
                graph.significant[i][j] = true;
                graph.significant[j][i] = true;
            }
        }
    }
    Ok(graph)
}

/// Lagged variable `(var, lag)` encoded as a single index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct Node {
    lag: usize,
    var: usize,
}

fn lagged(cols: &[Vec<f64>], config: &CausalPruneConfig) -> Result<CausalGraph> {
    let dim = cols.len();
    let tau_max = config.tau_max;
    let n_full = cols[0].len();
    if n_full <= tau_max + 3 {
        return Ok(CausalGraph::empty(dim, config.alpha));
    }
    let n = n_full - tau_max;
    // shifted[lag * dim + var] = cols[var][tau_max - lag .. n_full - lag]
    let shifted: Vec<&[f64]> = (0..=tau_max)
        .flat_map(|lag| (0..dim).map(move |var| (lag, var)))
        .map(|(lag, var)| &cols[var][tau_max - lag..n_full - lag])
        .collect();
    let idx = |node: Node| node.lag * dim + node.var;
    let lookup = |k: usize| shifted[k];
    let tester = Tester {
        alpha: config.alpha,
        cap: n.saturating_sub(3),
        series: &lookup,
    };
    let live: Vec<bool> = cols.iter().map(|c| !is_constant(c)).collect();

    let mut parents: Vec<BTreeSet<Node>> = Vec::with_capacity(dim);
    for target in 0..dim {
        let mut cands: BTreeSet<Node> = BTreeSet::new();
        if live[target] {
            for lag in 0..=tau_max {
                for var in 0..dim {
                    if live[var] && !(lag == 0 && var == target) {
                        cands.insert(Node { lag, var });
                    }
                }
            }
        }
        let max_p = config.max_cond_set.min(tester.cap);
        for p in 0..=max_p {
            let frozen: Vec<Node> = cands.iter().copied().collect();
            if frozen.len() <= p {
                break;
            }
            for &c in &frozen {
                let others: Vec<Node> = frozen.iter().copied().filter(|&o| o != c).collect();
                for cond in others.into_iter().combinations(p) {
                    let z: Vec<usize> = cond.iter().map(|&o| idx(o)).collect();
                    let r = tester.test(idx(c), idx(Node { lag: 0, var: target }), &z)?;
                    if tester.independent(&r) {
                        cands.remove(&c);
                        break;
                    }
                }
            }
        }
        parents.push(cands);
    }

    let mut graph = CausalGraph::empty(dim, config.alpha);
    for target in 0..dim {
        for &src in &parents[target] {
            let mut cond: BTreeSet<Node> = parents[target].iter().copied().filter(|&o| o != src).collect();
            for &pp in &parents[src.var] {
                let shifted_node = Node {
                    lag: pp.lag + src.lag,
                    var: pp.var,
                };
                if shifted_node.lag <= tau_max && !(shifted_node.lag == 0 && shifted_node.var == target) {
                    cond.insert(shifted_node);
                }
            }
            cond.remove(&src);
            let z: Vec<usize> = cond.iter().take(tester.cap).map(|&o| idx(o)).collect();
            let r = tester.test(idx(src), idx(Node { lag: 0, var: target }), &z)?;
            if tester.independent(&r) || r.rho == 0.0 || src.var == target {
                continue;
            }
            let cell = &mut graph.strength[src.var][target];
            if !graph.significant[src.var][target] || r.rho.abs() > cell.abs() {
                *cell = r.rho;
            }
            graph.significant[src.var][target] = true;
        }
    }
    Ok(graph)
}

/// Mean squared difference between two strength matrices.
pub fn causal_fidelity(global: &CausalGraph, local: &CausalGraph) -> Result<f64> {
    if global.dim != local.dim {
        return Err(Error::arg(format!(
            "graph dimensions differ: {} vs {}",
            global.dim, local.dim
        )));
    }
    if global.dim == 0 {
        return Ok(0.0);
    }
    let sum: f64 = global
        .strength
        .iter()
        .flatten()
        .zip(local.strength.iter().flatten())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sum / (global.dim * global.dim) as f64)
}
