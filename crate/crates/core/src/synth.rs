//! Ground-truth generators: linear structural causal models and degradation
//! trajectories with labelled corrupted spans.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::series::{SensorSeries, Window};

/// Linear Gaussian SCM. `adjacency[i][j]` is the coefficient of `X_i(t)` in
/// `X_j(t)`; `lag_adjacency[i][j]` the coefficient of `X_i(t - 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScmSpec {
    pub d: usize,
    pub adjacency: Vec<Vec<f64>>,
    #[serde(default)]
    pub lag_adjacency: Option<Vec<Vec<f64>>>,
    pub noise_std: f64,
    pub n: usize,
    pub seed: u64,
}

impl ScmSpec {
    /// `d` mutually independent unit-variance noise columns.
    pub fn independent(d: usize, n: usize, seed: u64) -> Self {
        ScmSpec {
            d,
            adjacency: vec![vec![0.0; d]; d],
            lag_adjacency: None,
            noise_std: 1.0,
            n,
            seed,
        }
    }
}

const LAG_BURN_IN: usize = 200;

/// Topological order of the nonzero pattern of `adj`, or `None` if cyclic.
fn topological_order(adj: &[Vec<f64>]) -> Option<Vec<usize>> {
    let d = adj.len();
    let mut indegree: Vec<usize> = (0..d).map(|j| (0..d).filter(|&i| adj[i][j] != 0.0).count()).collect();
    let mut ready: Vec<usize> = (0..d).filter(|&j| indegree[j] == 0).collect();
    let mut order = Vec::with_capacity(d);
    while let Some(i) = ready.first().copied() {
        ready.remove(0);
        order.push(i);
        for j in 0..d {
            if adj[i][j] != 0.0 {
                indegree[j] -= 1;
                if indegree[j] == 0 {
                    ready.push(j);
                    ready.sort_unstable();
                }
            }
        }
    }
    (order.len() == d).then_some(order)
}

/// Samples `n` rows of the SCM and returns them with the true instantaneous
/// adjacency pattern (`true` where a coefficient is nonzero, either lag).
pub fn gen_scm(spec: &ScmSpec) -> Result<(Vec<Vec<f64>>, Vec<Vec<bool>>)> {
    let d = spec.d;
    let square = |m: &Vec<Vec<f64>>| m.len() == d && m.iter().all(|r| r.len() == d);
    if !square(&spec.adjacency) || spec.lag_adjacency.as_ref().is_some_and(|m| !square(m)) {
        return Err(Error::arg(format!("adjacency must be {d}x{d}")));
    }
    if !(spec.noise_std > 0.0) {
        return Err(Error::arg("noise_std must be > 0"));
    }
    if (0..d).any(|i| spec.adjacency[i][i] != 0.0) {
        return Err(Error::arg("instantaneous self-loops are cyclic"));
    }
    let order = topological_order(&spec.adjacency)
        .ok_or_else(|| Error::arg("instantaneous adjacency is cyclic"))?;
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::arg(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let burn = if spec.lag_adjacency.is_some() { LAG_BURN_IN } else { 0 };
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(spec.n + burn);
    let mut prev = vec![0.0; d];
    for _ in 0..spec.n + burn {
        let mut x = vec![0.0; d];
        for &j in &order {
            let mut v = noise.sample(&mut rng);
            for i in 0..d {
                v += spec.adjacency[i][j] * x[i];
            }
            if let Some(lag) = &spec.lag_adjacency {
                for i in 0..d {
                    v += lag[i][j] * prev[i];
                }
            }
            x[j] = v;
        }
        prev.clone_from(&x);
        rows.push(x);
    }
    rows.drain(..burn);

    let truth = (0..d)
        .map(|i| {
            (0..d)
                .map(|j| {
                    spec.adjacency[i][j] != 0.0
                        || spec.lag_adjacency.as_ref().is_some_and(|m| m[i][j] != 0.0 && i != j)
                })
                .collect()
        })
        .collect();
    Ok((rows, truth))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorruptionKind {
    /// Sensor columns permuted within the span.
    ChannelShuffle,
    /// Large additive uniform noise on every sensor.
    HeavyNoise,
    /// Every sensor frozen at its value on the span's first row.
    ConstantStuck,
    /// Every value redrawn uniformly over its sensor's range within the span:
    /// no outliers, but the coupling structure is destroyed and the value
    /// distribution flattened.
    UniformReplace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DegradationSpec {
    pub units: usize,
    pub cycles_per_unit: usize,
    pub d: usize,
    /// Per-sensor intercept drift over a unit's life, entering the
    /// structural equation (and so propagating to descendants).
    pub trend_coeffs: Vec<f64>,
    /// Instantaneous cross-sensor couplings (`coupling[i][j]`: effect of
    /// sensor `i` on sensor `j`); must be acyclic.
    pub coupling: Vec<Vec<f64>>,
    pub noise_std: f64,
    pub corrupt_fraction: f64,
    pub corruption_kind: CorruptionKind,
    /// Length of the aligned spans eligible for corruption.
    pub span_len: usize,
    /// Half-width of heavy-noise corruption, in multiples of `noise_std`.
    pub heavy_noise_scale: f64,
    pub seed: u64,
}

impl Default for DegradationSpec {
    fn default() -> Self {
        let d = 6;
        let mut coupling = vec![vec![0.0; d]; d];
        coupling[0][1] = 2.0;
        coupling[2][3] = 2.0;
        coupling[4][5] = -2.0;
        DegradationSpec {
            units: 10,
            cycles_per_unit: 500,
            d,
            trend_coeffs: vec![3.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            coupling,
            noise_std: 1.0,
            corrupt_fraction: 0.2,
            corruption_kind: CorruptionKind::UniformReplace,
            span_len: 50,
            heavy_noise_scale: 6.0,
            seed: 7,
        }
    }
}

impl DegradationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.units == 0 || self.cycles_per_unit == 0 || self.d == 0 {
            return Err(Error::Config("units, cycles_per_unit and d must be >= 1".into()));
        }
        if self.trend_coeffs.len() != self.d {
            return Err(Error::Config(format!(
                "trend_coeffs has {} entries, expected {}",
                self.trend_coeffs.len(),
                self.d
            )));
        }
        if self.coupling.len() != self.d
            || self.coupling.iter().any(|r| r.len() != self.d)
            || (0..self.d).any(|i| self.coupling[i][i] != 0.0)
        {
            return Err(Error::Config(format!("coupling must be {0}x{0} with a zero diagonal", self.d)));
        }
        if !(0.0..1.0).contains(&self.corrupt_fraction) {
            return Err(Error::Config(format!(
                "corrupt_fraction must lie in [0, 1), got {}",
                self.corrupt_fraction
            )));
        }
        if self.span_len == 0 {
            return Err(Error::Config("span_len must be >= 1".into()));
        }
        if !(self.noise_std > 0.0) {
            return Err(Error::Config("noise_std must be > 0".into()));
        }
        Ok(())
    }

    pub fn spans_per_unit(&self) -> usize {
        self.cycles_per_unit / self.span_len
    }

    /// Number of corrupted spans the generator will produce.
    pub fn corrupt_span_count(&self) -> usize {
        (self.corrupt_fraction * (self.units * self.spans_per_unit()) as f64).round() as usize
    }
}

/// One corrupted span, rows `[start, start + len)` of `unit`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CorruptSpan {
    pub unit: String,
    pub start: usize,
    pub len: usize,
}

/// Generates `units` run-to-failure series plus the corrupted spans.
///
/// Sensor `j` at cycle `t` follows the coupling SCM with a drifting intercept
/// `trend_coeffs[j] * (t / (T - 1))^2`; children inherit their parents'
/// drift, so clean data keeps one linear causal structure at every time
/// scale. Unit ids are `1..=units`.
pub fn gen_degradation(spec: &DegradationSpec) -> Result<(Vec<SensorSeries>, Vec<CorruptSpan>)> {
    spec.validate()?;
    let t_len = spec.cycles_per_unit;
    let mut root = ChaCha8Rng::seed_from_u64(spec.seed);
    let unit_seeds: Vec<u64> = (0..spec.units).map(|_| root.random()).collect();

    let order = topological_order(&spec.coupling).ok_or_else(|| Error::Config("coupling is cyclic".into()))?;
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let mut series = Vec::with_capacity(spec.units);
    for (u, &seed) in unit_seeds.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let denom = (t_len.max(2) - 1) as f64;
        let mut rows = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let h = (t as f64 / denom).powi(2);
            let mut x = vec![0.0; spec.d];
            for &j in &order {
                let mut v = spec.trend_coeffs[j] * h + noise.sample(&mut rng);
                for i in 0..spec.d {
                    v += spec.coupling[i][j] * x[i];
                }
                x[j] = v;
            }
            rows.push(x);
        }
        let rul = (0..t_len).map(|t| (t_len - 1 - t) as f64).collect();
        series.push(SensorSeries::new((u + 1).to_string(), rows, rul)?);
    }

    // Spread the corrupted spans evenly over units (the remainder goes to
    // randomly chosen units) so no unit's clean structure is swamped.
    let per_unit = spec.spans_per_unit();
    let total = spec.corrupt_span_count().min(spec.units * per_unit);
    let mut unit_order: Vec<usize> = (0..spec.units).collect();
    unit_order.shuffle(&mut root);
    let mut counts = vec![total / spec.units; spec.units];
    for &u in unit_order.iter().take(total % spec.units) {
        counts[u] += 1;
    }
    let mut chosen: Vec<(usize, usize)> = Vec::with_capacity(total);
    for (u, &c) in counts.iter().enumerate() {
        let mut ks: Vec<usize> = (0..per_unit).collect();
        ks.shuffle(&mut root);
        chosen.extend(ks.into_iter().take(c).map(|k| (u, k)));
    }
    chosen.sort_unstable();

    let mut spans = Vec::with_capacity(chosen.len());
    for (u, k) in chosen {
        let start = k * spec.span_len;
        let rows = &mut series[u].readings[start..start + spec.span_len];
        corrupt(rows, spec, &mut root);
        spans.push(CorruptSpan {
            unit: series[u].unit_id.clone(),
            start,
            len: spec.span_len,
        });
    }
    Ok((series, spans))
}

fn corrupt(rows: &mut [Vec<f64>], spec: &DegradationSpec, rng: &mut ChaCha8Rng) {
    match spec.corruption_kind {
        CorruptionKind::ChannelShuffle => {
            let d = spec.d;
            let mut perm: Vec<usize> = (0..d).collect();
            if d >= 2 {
                while perm.iter().enumerate().all(|(i, &p)| i == p) {
                    perm.shuffle(rng);
                }
            }
            for row in rows.iter_mut() {
                let orig = row.clone();
                for (j, &p) in perm.iter().enumerate() {
                    row[j] = orig[p];
                }
            }
        }
        CorruptionKind::HeavyNoise => {
            let half = spec.heavy_noise_scale * spec.noise_std;
            for row in rows.iter_mut() {
                for v in row.iter_mut() {
                    *v += rng.random_range(-half..=half);
                }
            }
        }
        CorruptionKind::ConstantStuck => {
            let first = rows[0].clone();
            for row in rows.iter_mut() {
                row.clone_from(&first);
            }
        }
        CorruptionKind::UniformReplace => {
            for j in 0..spec.d {
                let (lo, hi) = rows
                    .iter()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r[j]), hi.max(r[j])));
                for row in rows.iter_mut() {
                    row[j] = if hi > lo { rng.random_range(lo..hi) } else { lo };
                }
            }
        }
    }
}

/// Number of rows of `window` that fall inside corrupted spans.
pub fn corrupted_rows(window: &Window, spans: &[CorruptSpan]) -> usize {
    let (a, b) = (window.start, window.start + window.len());
    spans
        .iter()
        .filter(|s| s.unit == window.unit_id)
        .map(|s| {
            let lo = a.max(s.start);
            let hi = b.min(s.start + s.len);
            hi.saturating_sub(lo)
        })
        .sum()
}

/// Ground-truth class of a window for selectivity scoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WindowTruth {
    /// No corrupted rows.
    Clean,
    /// At least half of the rows corrupted.
    Corrupted,
    /// Some, but fewer than half, of the rows corrupted.
    Mixed,
}

pub fn window_truth(window: &Window, spans: &[CorruptSpan]) -> WindowTruth {
    let bad = corrupted_rows(window, spans);
    if bad == 0 {
        WindowTruth::Clean
    } else if 2 * bad >= window.len() {
        WindowTruth::Corrupted
    } else {
        WindowTruth::Mixed
    }
}
