//! Stage one: causal-fidelity pruning.
//!
//! Windows are grouped into segments keyed by `(unit, RUL level)`. For each
//! segment a global graph is estimated on the full segment and a local graph
//! on every window; windows whose local graph strays too far from the global
//! one (mean squared strength difference above the threshold) are dropped.

mod parcorr;
mod pcmci;

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use parcorr::{fisher_z_pvalue, parcorr, CiResult};
pub use pcmci::{causal_fidelity, pcmci_graph, CausalGraph};

use crate::error::{Error, Result};
use crate::report;
use crate::series::{SensorSeries, Window};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CausalPruneConfig {
    pub alpha: f64,
    pub tau_max: usize,
    pub gamma: f64,
    /// When set, the alignment threshold is this constant instead of
    /// `mean - gamma * std` of the segment's fidelity scores. Written as
    /// the string `"adaptive"` when unset, since TOML has no null.
    #[serde(with = "epsilon_mode")]
    pub fixed_epsilon: Option<f64>,
    pub max_cond_set: usize,
    pub epsilon_floor: f64,
    /// Width of a segment in RUL units. Windows whose `rul_level` falls in
    /// the same `floor(rul_level / segment_span)` bucket share a segment.
    pub segment_span: f64,
}

impl Default for CausalPruneConfig {
    fn default() -> Self {
        CausalPruneConfig {
            alpha: 0.01,
            tau_max: 0,
            gamma: 2.0,
            fixed_epsilon: Some(0.1),
            max_cond_set: 3,
            epsilon_floor: 1e-9,
            segment_span: 1.0,
        }
    }
}

mod epsilon_mode {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Fixed(f64),
        Mode(String),
    }

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(x) => Repr::Fixed(*x),
            None => Repr::Mode("adaptive".into()),
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        match Option::<Repr>::deserialize(d)? {
            Some(Repr::Fixed(x)) => Ok(Some(x)),
            Some(Repr::Mode(m)) if m == "adaptive" => Ok(None),
            None => Ok(None),
            Some(Repr::Mode(m)) => Err(serde::de::Error::custom(format!(
                "fixed_epsilon must be a number or \"adaptive\", got {m:?}"
            ))),
        }
    }
}

impl CausalPruneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if !(self.gamma > 0.0) {
            return Err(Error::Config(format!("gamma must be > 0, got {}", self.gamma)));
        }
        if !(self.segment_span > 0.0) {
            return Err(Error::Config(format!("segment_span must be > 0, got {}", self.segment_span)));
        }
        Ok(())
    }
}

/// Threshold below which (inclusive) a window counts as causally aligned.
pub fn alignment_threshold(mses: &[f64], config: &CausalPruneConfig) -> Result<f64> {
    if mses.is_empty() {
        return Err(Error::arg("alignment threshold needs at least one fidelity score"));
    }
    if let Some(eps) = config.fixed_epsilon {
        return Ok(eps);
    }
    // sorted so the result does not depend on window order
    let mut sorted = mses.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mean = sorted.iter().sum::<f64>() / n;
    let var = sorted.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / n;
    Ok((mean - config.gamma * var.sqrt()).max(config.epsilon_floor))
}

/// Per-window outcome of the causal stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityRecord {
    pub window_id: usize,
    pub mse: f64,
    pub threshold: f64,
    pub retained: bool,
}

/// Segment key: unit plus RUL bucket.
pub type SegmentKey = (String, i64);

pub fn segment_key(window: &Window, config: &CausalPruneConfig) -> SegmentKey {
    (
        window.unit_id.clone(),
        (window.rul_level / config.segment_span).floor() as i64,
    )
}

/// Rows `[from, to)` of a series with RUL appended as the last column.
pub fn segment_rows(series: &SensorSeries, from: usize, to: usize) -> Vec<Vec<f64>> {
    (from..to)
        .map(|t| {
            let mut row = series.readings[t].clone();
            row.push(series.rul[t]);
            row
        })
        .collect()
}

/// Runs the causal stage. `window_id` in each record is the window's index
/// in `windows`; records come back in that order.
///
/// A segment's source rows span from its earliest window start to the end of
/// its latest window. A segment with a single window keeps it.
pub fn prune_causal(
    windows: &[Window],
    series: &[SensorSeries],
    config: &CausalPruneConfig,
) -> Result<Vec<FidelityRecord>> {
    config.validate()?;
    let by_unit: HashMap<&str, &SensorSeries> = series.iter().map(|s| (s.unit_id.as_str(), s)).collect();

    let mut groups: BTreeMap<SegmentKey, Vec<usize>> = BTreeMap::new();
    for (id, w) in windows.iter().enumerate() {
        groups.entry(segment_key(w, config)).or_default().push(id);
    }

    let mut records: Vec<Option<FidelityRecord>> = vec![None; windows.len()];
    for ((unit, _), ids) in &groups {
        let source = by_unit
            .get(unit.as_str())
            .ok_or_else(|| Error::arg(format!("no source series for unit {unit}")))?;
        let from = ids.iter().map(|&i| windows[i].start).min().expect("group is nonempty");
        let to = ids
            .iter()
            .map(|&i| windows[i].start + windows[i].len())
            .max()
            .expect("group is nonempty");
        if to > source.len() {
            return Err(Error::arg(format!(
                "window of unit {unit} ends at {to}, past the series end {}",
                source.len()
            )));
        }
        let global = pcmci_graph(&segment_rows(source, from, to), config)?;
        let mses = ids
            .iter()
            .map(|&i| causal_fidelity(&global, &pcmci_graph(&windows[i].values, config)?))
            .collect::<Result<Vec<f64>>>()?;
        let threshold = alignment_threshold(&mses, config)?;
        let keep_all = ids.len() == 1;
        for (&id, &mse) in ids.iter().zip(&mses) {
            records[id] = Some(FidelityRecord {
                window_id: id,
                mse,
                threshold,
                retained: keep_all || mse <= threshold,
            });
        }
    }
    Ok(records.into_iter().map(|r| r.expect("every window is grouped")).collect())
}

/// Writes a graph as a single JSON document.
pub fn export_graph(path: &Path, graph: &CausalGraph) -> Result<()> {
    report::write_json(path, graph)
}

pub fn import_graph(path: &Path) -> Result<CausalGraph> {
    report::read_json(path)
}
