//! High-traffic event synthesis and forecast evaluation.
//!
//! A synthetic event draws a regional population toward a venue with a
//! trapezoidal intensity (ramp in over the two hours before the start, hold,
//! ramp out over the two hours after the end). Every 5 minutes across that
//! window the users attached (strongest large-scale RSRP) to each cell within
//! the event radius are counted.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::largescale::{build_large_scale, ShadowField};
use crate::scenario::{CellId, Scenario};
use crate::users::{
    advance_users, init_users, MobilityModel, MobilityParams, Point, UserError, UserSnapshot,
};

pub const BIN_SECONDS: f64 = 300.0;
/// Padding on each side of the event, also the ramp length.
pub const WINDOW_PAD_SECONDS: f64 = 7200.0;
pub const SERIES_FORMAT_HEADER: &str = "netcomb-series 1";

#[derive(Debug, Error)]
pub enum TrafficError {
    #[error("invalid `{field}`: {message}")]
    Invalid { field: String, message: String },
    #[error("venue lies outside the map")]
    VenueOutside,
    #[error("no cell within {radius} m of the venue")]
    NoCells { radius: f64 },
    #[error("series mismatch: {0}")]
    Mismatch(String),
    #[error("history is empty")]
    EmptyHistory,
    #[error("series format error on line {line}: {message}")]
    Format { line: usize, message: String },
    #[error(transparent)]
    Users(#[from] UserError),
}

fn invalid(field: &str, message: impl Into<String>) -> TrafficError {
    TrafficError::Invalid {
        field: field.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventType {
    Concert,
    Championship,
    Esports,
}

impl EventType {
    /// Plateau attraction strength used by [`EventSpec::new`].
    pub fn default_peak_strength(self) -> f64 {
        match self {
            EventType::Concert => 0.8,
            EventType::Championship => 0.9,
            EventType::Esports => 0.6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventSpec {
    pub venue_center: Point,
    #[serde(default = "default_radius")]
    pub radius: f64,
    /// Seconds.
    pub event_start: f64,
    pub event_end: f64,
    pub event_type: EventType,
    /// Attraction strength during the event, in [0, 1]. Zero means no event.
    pub peak_strength: f64,
    /// Radius of the crowd disk around the venue.
    #[serde(default = "default_crowd_radius")]
    pub crowd_radius: f64,
    /// Mobility step used during synthesis; must divide the bin length.
    #[serde(default = "default_sim_step")]
    pub sim_step: f64,
}

fn default_radius() -> f64 {
    2000.0
}
fn default_crowd_radius() -> f64 {
    300.0
}
fn default_sim_step() -> f64 {
    10.0
}

impl EventSpec {
    pub fn new(
        event_type: EventType,
        venue_center: Point,
        event_start: f64,
        event_end: f64,
    ) -> Self {
        EventSpec {
            venue_center,
            radius: default_radius(),
            event_start,
            event_end,
            event_type,
            peak_strength: event_type.default_peak_strength(),
            crowd_radius: default_crowd_radius(),
            sim_step: default_sim_step(),
        }
    }

    pub fn duration(&self) -> f64 {
        self.event_end - self.event_start
    }

    pub fn window_start(&self) -> f64 {
        self.event_start - WINDOW_PAD_SECONDS
    }

    pub fn window_end(&self) -> f64 {
        self.event_end + WINDOW_PAD_SECONDS
    }

    pub fn validate(&self) -> Result<(), TrafficError> {
        if !(self.event_start.is_finite() && self.event_end.is_finite()) {
            return Err(invalid("event_start", "must be finite"));
        }
        if !(self.event_end > self.event_start) {
            return Err(invalid("event_end", "must be after event_start"));
        }
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(invalid("radius", "must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.peak_strength) {
            return Err(invalid("peak_strength", "must be in [0, 1]"));
        }
        if !(self.crowd_radius > 0.0 && self.crowd_radius.is_finite()) {
            return Err(invalid("crowd_radius", "must be > 0"));
        }
        let steps = BIN_SECONDS / self.sim_step;
        if !(self.sim_step > 0.0) || (steps - steps.round()).abs() > 1e-9 {
            return Err(invalid("sim_step", "must divide 300 s"));
        }
        Ok(())
    }

    /// Trapezoid in [0, 1]: zero before the window, one during the event.
    pub fn intensity(&self, t: f64) -> f64 {
        if t <= self.window_start() || t >= self.window_end() {
            0.0
        } else if t < self.event_start {
            (t - self.window_start()) / WINDOW_PAD_SECONDS
        } else if t <= self.event_end {
            1.0
        } else {
            (self.window_end() - t) / WINDOW_PAD_SECONDS
        }
    }
}

/// Bin start times from two hours before the start to two hours after the
/// end, every 5 minutes. A window that is not a whole number of bins ends
/// with a bin truncated at the window end.
pub fn event_bins(spec: &EventSpec) -> Result<Vec<f64>, TrafficError> {
    spec.validate()?;
    let span = spec.window_end() - spec.window_start();
    let n = (span / BIN_SECONDS - 1e-9).ceil() as usize;
    if n == 0 {
        return Err(invalid("event_end", "window shorter than one bin"));
    }
    Ok((0..n)
        .map(|i| spec.window_start() + i as f64 * BIN_SECONDS)
        .collect())
}

/// User counts per (cell, bin).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellCountSeries {
    pub spec: EventSpec,
    pub cells: Vec<CellId>,
    pub bins: Vec<f64>,
    /// `counts[cell][bin]`.
    pub counts: Vec<Vec<u64>>,
}

impl CellCountSeries {
    pub fn zeros(spec: EventSpec, cells: Vec<CellId>, bins: Vec<f64>) -> Self {
        let counts = vec![vec![0; bins.len()]; cells.len()];
        CellCountSeries {
            spec,
            cells,
            bins,
            counts,
        }
    }

    pub fn bin_total(&self, bin: usize) -> u64 {
        self.counts.iter().map(|row| row[bin]).sum()
    }

    pub fn row(&self, cell: CellId) -> Option<&[u64]> {
        self.cells
            .iter()
            .position(|&c| c == cell)
            .map(|i| self.counts[i].as_slice())
    }

    fn check_shape(&self) -> Result<(), TrafficError> {
        if self.counts.len() != self.cells.len() {
            return Err(TrafficError::Mismatch(format!(
                "{} cells but {} count rows",
                self.cells.len(),
                self.counts.len()
            )));
        }
        if let Some(row) = self.counts.iter().find(|r| r.len() != self.bins.len()) {
            return Err(TrafficError::Mismatch(format!(
                "count row of length {} for {} bins",
                row.len(),
                self.bins.len()
            )));
        }
        Ok(())
    }

    /// Text form:
    ///
    /// ```text
    /// netcomb-series 1
    /// spec <event spec, compact JSON>
    /// bins <t0> <t1> ...
    /// cell <id> <count per bin> ...
    /// ```
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(SERIES_FORMAT_HEADER);
        out.push('\n');
        let spec = serde_json::to_string(&self.spec).expect("event spec serializes");
        writeln!(out, "spec {spec}").unwrap();
        out.push_str("bins");
        for b in &self.bins {
            write!(out, " {b}").unwrap();
        }
        out.push('\n');
        for (cell, row) in self.cells.iter().zip(&self.counts) {
            write!(out, "cell {cell}").unwrap();
            for n in row {
                write!(out, " {n}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, TrafficError> {
        let err = |line: usize, message: String| TrafficError::Format { line, message };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim_end()));
        match lines.next() {
            Some((_, SERIES_FORMAT_HEADER)) => {}
            _ => return Err(err(1, format!("expected `{SERIES_FORMAT_HEADER}`"))),
        }
        let (n, line) = lines
            .next()
            .ok_or_else(|| err(2, "missing spec line".into()))?;
        let spec_json = line
            .strip_prefix("spec ")
            .ok_or_else(|| err(n, "expected `spec`".into()))?;
        let spec: EventSpec = serde_json::from_str(spec_json).map_err(|e| err(n, e.to_string()))?;
        let (n, line) = lines
            .next()
            .ok_or_else(|| err(3, "missing bins line".into()))?;
        let mut words = line.split_ascii_whitespace();
        if words.next() != Some("bins") {
            return Err(err(n, "expected `bins`".into()));
        }
        let bins = words
            .map(|w| {
                w.parse::<f64>()
                    .map_err(|e| err(n, format!("bin `{w}`: {e}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mut cells = Vec::new();
        let mut counts = Vec::new();
        for (n, line) in lines {
            if line.is_empty() {
                continue;
            }
            let mut words = line.split_ascii_whitespace();
            if words.next() != Some("cell") {
                return Err(err(n, "expected `cell`".into()));
            }
            let id = words
                .next()
                .ok_or_else(|| err(n, "missing cell id".into()))?
                .parse::<CellId>()
                .map_err(|e| err(n, format!("cell id: {e}")))?;
            let row = words
                .map(|w| {
                    w.parse::<u64>()
                        .map_err(|e| err(n, format!("count `{w}`: {e}")))
                })
                .collect::<Result<Vec<_>, _>>()?;
            if row.len() != bins.len() {
                return Err(err(
                    n,
                    format!("{} counts for {} bins", row.len(), bins.len()),
                ));
            }
            if cells.contains(&id) {
                return Err(err(n, format!("duplicate cell {id}")));
            }
            cells.push(id);
            counts.push(row);
        }
        Ok(CellCountSeries {
            spec,
            cells,
            bins,
            counts,
        })
    }
}

/// Ground-truth series for `spec` on `scenario`; deterministic in `seed`.
pub fn synthesize_event(
    spec: &EventSpec,
    scenario: &Scenario,
    n_users: usize,
    seed: u64,
) -> Result<CellCountSeries, TrafficError> {
    let bins = event_bins(spec)?;
    scenario.validate().map_err(|e| {
        invalid(
            &format!("scenario.{}", e.field().unwrap_or("")),
            e.to_string(),
        )
    })?;
    if !scenario
        .map_bounds
        .contains(spec.venue_center.x, spec.venue_center.y)
    {
        return Err(TrafficError::VenueOutside);
    }
    let cell_ids = scenario.cell_ids();
    let in_radius: Vec<bool> = cell_ids
        .iter()
        .map(|&id| {
            let (site, _) = scenario.cell(id).expect("id from scenario");
            Point::new(site.position.x, site.position.y).distance(&spec.venue_center) <= spec.radius
        })
        .collect();
    let cells: Vec<CellId> = cell_ids
        .iter()
        .zip(&in_radius)
        .filter(|(_, &r)| r)
        .map(|(&c, _)| c)
        .collect();
    if cells.is_empty() {
        return Err(TrafficError::NoCells {
            radius: spec.radius,
        });
    }
    // homes uniform over the map; the attractor law only takes over after init
    let home_law = MobilityParams {
        model: MobilityModel::Stationary,
        ..Default::default()
    };
    let mut population = init_users(scenario, n_users, home_law, seed)?;
    let mut law = MobilityParams::attractor(spec.venue_center, spec.crowd_radius);
    law.attractor_strength = 0.0;
    population.set_mobility(law)?;
    let shadow = ShadowField::new(scenario, seed);
    let column: Vec<Option<usize>> = {
        let mut next = 0;
        in_radius
            .iter()
            .map(|&r| {
                r.then(|| {
                    next += 1;
                    next - 1
                })
            })
            .collect()
    };
    let tx: Vec<f64> = cell_ids
        .iter()
        .map(|&id| {
            scenario
                .cell(id)
                .expect("id from scenario")
                .1
                .tx_power_per_re
        })
        .collect();
    let steps_per_bin = (BIN_SECONDS / spec.sim_step).round() as usize;
    let mut series = CellCountSeries::zeros(spec.clone(), cells, bins.clone());
    let mut attached: Vec<Option<(Point, Option<usize>)>> = vec![None; n_users];
    for (b, &t_bin) in bins.iter().enumerate() {
        if b > 0 {
            for s in 0..steps_per_bin {
                let t = bins[b - 1] + s as f64 * spec.sim_step;
                population.set_attractor_strength(spec.peak_strength * spec.intensity(t));
                advance_users(&mut population, spec.sim_step, false);
            }
        }
        let mut snapshot = population.snapshot(spec.sim_step);
        snapshot.time = t_bin;
        // idle users have not moved since the last bin; only re-attach the rest
        let moved: Vec<usize> = (0..snapshot.users.len())
            .filter(|&u| attached[u].is_none_or(|(pos, _)| pos != snapshot.users[u].position))
            .collect();
        let sub = UserSnapshot {
            users: moved.iter().map(|&u| snapshot.users[u].clone()).collect(),
            ..snapshot.clone()
        };
        let ls = build_large_scale(scenario, &sub, &shadow);
        for (row, &u) in moved.iter().enumerate() {
            let mut best: Option<(usize, f64)> = None;
            for c in 0..cell_ids.len() {
                let i = ls.index(row, c);
                if !ls.usable[i] {
                    continue;
                }
                let rsrp = tx[c] - ls.coupling_loss[i];
                if best.is_none_or(|(_, r)| rsrp > r) {
                    best = Some((c, rsrp));
                }
            }
            attached[u] = Some((snapshot.users[u].position, best.map(|(c, _)| c)));
        }
        for a in &attached {
            if let Some(col) = a.and_then(|(_, c)| c).and_then(|c| column[c]) {
                series.counts[col][b] += 1;
            }
        }
    }
    Ok(series)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellMetrics {
    pub cell_id: CellId,
    pub rmse: f64,
    pub mae: f64,
    pub rel_err: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastMetrics {
    /// Pooled over every (cell, bin).
    pub rmse: f64,
    pub mae: f64,
    /// Sum of absolute errors over total true count; `None` when the truth
    /// is all zeros.
    pub rel_err: Option<f64>,
    pub per_cell: Vec<CellMetrics>,
}

fn error_stats(pairs: impl Iterator<Item = (u64, u64)>) -> (f64, f64, Option<f64>) {
    let mut n = 0usize;
    let mut sq = 0.0;
    let mut abs = 0.0;
    let mut total = 0.0;
    for (p, t) in pairs {
        let e = p as f64 - t as f64;
        sq += e * e;
        abs += e.abs();
        total += t as f64;
        n += 1;
    }
    if n == 0 {
        return (0.0, 0.0, None);
    }
    let rel = (total > 0.0).then(|| abs / total);
    ((sq / n as f64).sqrt(), abs / n as f64, rel)
}

/// Requires identical cells and bins.
pub fn forecast_metrics(
    pred: &CellCountSeries,
    truth: &CellCountSeries,
) -> Result<ForecastMetrics, TrafficError> {
    pred.check_shape()?;
    truth.check_shape()?;
    if pred.cells != truth.cells {
        return Err(TrafficError::Mismatch("cell sets differ".into()));
    }
    if pred.bins != truth.bins {
        return Err(TrafficError::Mismatch("bin sets differ".into()));
    }
    Ok(metrics_over(
        &pred.counts,
        &truth.counts,
        &truth.cells,
        truth.bins.len(),
    ))
}

fn metrics_over(
    pred: &[Vec<u64>],
    truth: &[Vec<u64>],
    cells: &[CellId],
    bins: usize,
) -> ForecastMetrics {
    let pairs = || {
        pred.iter()
            .zip(truth)
            .flat_map(move |(p, t)| p[..bins].iter().copied().zip(t[..bins].iter().copied()))
    };
    let (rmse, mae, rel_err) = error_stats(pairs());
    let per_cell = cells
        .iter()
        .zip(pred.iter().zip(truth))
        .map(|(&cell_id, (p, t))| {
            let (rmse, mae, rel_err) =
                error_stats(p[..bins].iter().copied().zip(t[..bins].iter().copied()));
            CellMetrics {
                cell_id,
                rmse,
                mae,
                rel_err,
            }
        })
        .collect();
    ForecastMetrics {
        rmse,
        mae,
        rel_err,
        per_cell,
    }
}

/// For series of different events: bins are matched by index from the
/// window start and the longer series is cut; cells follow `truth`, with
/// cells missing from `pred` predicted as zero.
pub fn forecast_metrics_aligned(
    pred: &CellCountSeries,
    truth: &CellCountSeries,
) -> Result<ForecastMetrics, TrafficError> {
    pred.check_shape()?;
    truth.check_shape()?;
    let bins = pred.bins.len().min(truth.bins.len());
    let zeros = vec![0u64; bins];
    let aligned: Vec<Vec<u64>> = truth
        .cells
        .iter()
        .map(|&c| {
            pred.row(c)
                .map_or_else(|| zeros.clone(), |r| r[..bins].to_vec())
        })
        .collect();
    Ok(metrics_over(&aligned, &truth.counts, &truth.cells, bins))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TopKCriterion {
    #[default]
    Peak,
    Total,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopK {
    /// `(cell, score)`, best first.
    pub cells: Vec<(CellId, u64)>,
    /// Set when fewer than `k` cells exist.
    pub short: bool,
}

fn score(row: &[u64], criterion: TopKCriterion) -> u64 {
    match criterion {
        TopKCriterion::Peak => row.iter().copied().max().unwrap_or(0),
        TopKCriterion::Total => row.iter().sum(),
    }
}

/// Every cell ranked by descending score, ties to the lower cell id.
pub fn rank_cells(series: &CellCountSeries, criterion: TopKCriterion) -> Vec<(CellId, u64)> {
    let mut ranked: Vec<(CellId, u64)> = series
        .cells
        .iter()
        .zip(&series.counts)
        .map(|(&c, row)| (c, score(row, criterion)))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked
}

pub fn topk_cells(
    series: &CellCountSeries,
    k: usize,
    criterion: TopKCriterion,
) -> Result<TopK, TrafficError> {
    if k == 0 {
        return Err(invalid("k", "must be at least 1"));
    }
    series.check_shape()?;
    let mut cells = rank_cells(series, criterion);
    let short = k > cells.len();
    cells.truncate(k);
    Ok(TopK { cells, short })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopKReport {
    pub k: usize,
    pub criterion: TopKCriterion,
    pub predicted: Vec<CellId>,
    pub truth: Vec<CellId>,
    pub overlap: usize,
    /// Spearman correlation of the full rankings over the truth's cells;
    /// `None` with fewer than two cells.
    pub rank_correlation: Option<f64>,
    pub short: bool,
}

pub fn topk_report(
    pred: &CellCountSeries,
    truth: &CellCountSeries,
    k: usize,
    criterion: TopKCriterion,
) -> Result<TopKReport, TrafficError> {
    let p = topk_cells(pred, k, criterion)?;
    let t = topk_cells(truth, k, criterion)?;
    let predicted: Vec<CellId> = p.cells.iter().map(|c| c.0).collect();
    let truth_top: Vec<CellId> = t.cells.iter().map(|c| c.0).collect();
    let overlap = predicted.iter().filter(|c| truth_top.contains(c)).count();
    // rank the truth's cells in both series; cells absent from pred score 0
    let truth_rank = rank_cells(truth, criterion);
    let mut pred_scores: Vec<(CellId, u64)> = truth
        .cells
        .iter()
        .map(|&c| (c, pred.row(c).map_or(0, |r| score(r, criterion))))
        .collect();
    pred_scores.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let n = truth_rank.len();
    let rank_correlation = (n >= 2).then(|| {
        let d2: f64 = truth_rank
            .iter()
            .enumerate()
            .map(|(rt, (cell, _))| {
                let rp = pred_scores
                    .iter()
                    .position(|(c, _)| c == cell)
                    .expect("same cell set");
                let d = rt as f64 - rp as f64;
                d * d
            })
            .sum();
        let n = n as f64;
        1.0 - 6.0 * d2 / (n * (n * n - 1.0))
    });
    Ok(TopKReport {
        k,
        criterion,
        predicted,
        truth: truth_top,
        overlap,
        rank_correlation,
        short: p.short || t.short,
    })
}

/// Per (cell, bin index) rounded mean over the histories that have that
/// bin; a history lacking a cell contributes zero for it.
pub fn baseline_forecast(
    history: &[CellCountSeries],
    target: &EventSpec,
    cells: &[CellId],
) -> Result<CellCountSeries, TrafficError> {
    if history.is_empty() {
        return Err(TrafficError::EmptyHistory);
    }
    for h in history {
        h.check_shape()?;
    }
    let bins = event_bins(target)?;
    let mut out = CellCountSeries::zeros(target.clone(), cells.to_vec(), bins);
    for (ci, &cell) in cells.iter().enumerate() {
        for b in 0..out.bins.len() {
            let mut sum = 0u64;
            let mut n = 0u64;
            for h in history.iter().filter(|h| b < h.bins.len()) {
                sum += h.row(cell).map_or(0, |r| r[b]);
                n += 1;
            }
            if n > 0 {
                out.counts[ci][b] = (sum as f64 / n as f64).round() as u64;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub metrics: ForecastMetrics,
    pub topk: TopKReport,
}

/// Forecast `test` from `train` histories (possibly another event type) and
/// score it.
pub fn evaluate_transfer(
    train: &[CellCountSeries],
    test: &CellCountSeries,
    k: usize,
    criterion: TopKCriterion,
) -> Result<TransferReport, TrafficError> {
    let pred = baseline_forecast(train, &test.spec, &test.cells)?;
    Ok(TransferReport {
        metrics: forecast_metrics_aligned(&pred, test)?,
        topk: topk_report(&pred, test, k, criterion)?,
    })
}
