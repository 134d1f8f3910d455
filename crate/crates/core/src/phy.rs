//! Base-station / terminal abstraction: RSRP and SINR measurement, SINR to
//! rate and BLER mapping, an equal-share round-robin scheduler and the
//! user- and cell-level indicators it produces.

use serde::{Deserialize, Serialize};

use crate::channel::ReGridResponse;
use crate::scenario::{BlerCurve, CellId, CoverageThresholds, Scenario};
use crate::users::{UserId, UserSnapshot};

/// Spectral efficiency cap, bits/s/Hz.
pub const MAX_SPECTRAL_EFFICIENCY: f64 = 7.4;
/// Reported SINR never goes below this; a zero signal maps here.
pub const SINR_FLOOR_DB: f64 = -300.0;

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn linear_to_db(lin: f64) -> f64 {
    10.0 * lin.log10()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkMeasurement {
    pub user_id: UserId,
    /// Strongest active cell; `None` when no beam is active.
    pub serving_cell: Option<CellId>,
    /// Serving-cell RSRP, dBm.
    pub rsrp: Option<f64>,
    /// dB, floored at [`SINR_FLOOR_DB`].
    pub sinr: Option<f64>,
    /// Summed RSRP of the other active cells, mW.
    pub interference_mw: f64,
}

impl LinkMeasurement {
    pub fn is_covered(&self, t: &CoverageThresholds) -> bool {
        match (self.rsrp, self.sinr) {
            (Some(r), Some(s)) => r >= t.rsrp_dbm && s >= t.sinr_db,
            _ => false,
        }
    }
}

/// Per-cell RSRP in dBm for every link of `grid`, `None` for inactive cells.
/// The grid must be user-major over the scenario's ascending cell ids.
pub fn cell_rsrp(grid: &ReGridResponse, scenario: &Scenario) -> Vec<Vec<Option<f64>>> {
    let powers: Vec<f64> = grid.links.iter().map(|l| l.mean_power()).collect();
    rsrp_from_powers(&powers, scenario)
}

/// As [`cell_rsrp`], from per-link mean `|H|^2` (user-major).
pub fn rsrp_from_powers(powers: &[f64], scenario: &Scenario) -> Vec<Vec<Option<f64>>> {
    let cells: Vec<_> = scenario
        .cell_ids()
        .into_iter()
        .map(|id| scenario.cell(id).expect("scenario cell").1)
        .collect();
    powers
        .chunks(cells.len().max(1))
        .map(|user_links| {
            user_links
                .iter()
                .zip(&cells)
                .map(|(&p, c)| {
                    c.antenna
                        .active
                        .then(|| c.tx_power_per_re + linear_to_db(p))
                })
                .collect()
        })
        .collect()
}

/// RSRP/SINR with the stated serving rule: argmax RSRP among active cells,
/// ties to the lowest cell id.
pub fn measure(grid: &ReGridResponse, scenario: &Scenario) -> Vec<LinkMeasurement> {
    measure_with_signal_gain(grid, scenario, |_, _| 1.0)
}

/// As [`measure`], with the serving signal power multiplied by
/// `signal_gain(user, serving_cell)` (a linear factor, e.g. precoding loss).
pub fn measure_with_signal_gain(
    grid: &ReGridResponse,
    scenario: &Scenario,
    signal_gain: impl Fn(UserId, CellId) -> f64,
) -> Vec<LinkMeasurement> {
    let n_cells = scenario.num_cells().max(1);
    let powers: Vec<f64> = grid.links.iter().map(|l| l.mean_power()).collect();
    let user_ids: Vec<UserId> = grid
        .links
        .iter()
        .step_by(n_cells)
        .map(|l| l.link.user_id)
        .collect();
    measure_powers_with_signal_gain(&powers, &user_ids, scenario, signal_gain)
}

/// Measurement from per-link mean `|H|^2` (user-major over ascending cell
/// ids), for callers that never build the RE grid.
pub fn measure_powers_with_signal_gain(
    powers: &[f64],
    user_ids: &[UserId],
    scenario: &Scenario,
    signal_gain: impl Fn(UserId, CellId) -> f64,
) -> Vec<LinkMeasurement> {
    let cell_ids = scenario.cell_ids();
    let noise = db_to_linear(scenario.noise_per_re_dbm());
    let per_user = rsrp_from_powers(powers, scenario);
    per_user
        .into_iter()
        .enumerate()
        .map(|(u, rsrps)| {
            let user_id = user_ids[u];
            let mut best: Option<(usize, f64)> = None;
            for (c, r) in rsrps.iter().enumerate() {
                if let Some(r) = *r {
                    if r > f64::NEG_INFINITY && best.is_none_or(|(_, b)| r > b) {
                        best = Some((c, r));
                    }
                }
            }
            match best {
                None => LinkMeasurement {
                    user_id,
                    serving_cell: None,
                    rsrp: None,
                    sinr: None,
                    interference_mw: 0.0,
                },
                Some((sc, rsrp)) => {
                    let interference: f64 = rsrps
                        .iter()
                        .enumerate()
                        .filter(|&(c, _)| c != sc)
                        .filter_map(|(_, r)| r.map(db_to_linear))
                        .sum();
                    let signal = db_to_linear(rsrp) * signal_gain(user_id, cell_ids[sc]);
                    let sinr = linear_to_db(signal / (interference + noise)).max(SINR_FLOOR_DB);
                    LinkMeasurement {
                        user_id,
                        serving_cell: Some(cell_ids[sc]),
                        rsrp: Some(rsrp),
                        sinr: Some(sinr),
                        interference_mw: interference,
                    }
                }
            }
        })
        .collect()
}

/// Shannon rate with a spectral-efficiency cap.
pub fn sinr_to_rate(sinr_db: f64, alloc_bw_hz: f64) -> f64 {
    alloc_bw_hz
        * (1.0 + db_to_linear(sinr_db))
            .log2()
            .min(MAX_SPECTRAL_EFFICIENCY)
}

pub fn sinr_to_bler(sinr_db: f64, curve: &BlerCurve) -> f64 {
    1.0 / (1.0 + ((sinr_db - curve.midpoint_db) / curve.width_db).exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserPerf {
    pub user_id: UserId,
    pub serving_cell: Option<CellId>,
    pub rsrp: Option<f64>,
    pub sinr: Option<f64>,
    pub covered: bool,
    pub scheduled_rbs: usize,
    pub bler: f64,
    /// Served bits divided by the tick, bits/s.
    pub rate: f64,
    pub served_bits: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellKpi {
    pub cell_id: CellId,
    /// Bytes delivered this tick.
    pub total_dl_traffic: f64,
    /// Mean achieved rate over scheduled users, bits/s.
    pub avg_dl_rate: f64,
    pub avg_bler: f64,
    pub scheduled_users: usize,
}

impl CellKpi {
    fn empty(cell_id: CellId) -> Self {
        CellKpi {
            cell_id,
            total_dl_traffic: 0.0,
            avg_dl_rate: 0.0,
            avg_bler: 0.0,
            scheduled_users: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerfIndicators {
    pub tick_index: u64,
    pub time: f64,
    pub users: Vec<UserPerf>,
    pub cells: Vec<CellKpi>,
    /// Fraction of users meeting both coverage thresholds.
    pub coverage_ratio: f64,
    /// Mean achieved rate over all users, bits/s.
    pub mean_user_rate: f64,
}

/// RB split for `n` users: `base` each, the remainder going round-robin from
/// position `tick_index % n`.
pub fn rb_shares(num_rbs: usize, n: usize, tick_index: u64) -> Vec<usize> {
    if n == 0 {
        return Vec::new();
    }
    let base = num_rbs / n;
    let rem = num_rbs % n;
    let offset = (tick_index % n as u64) as usize;
    (0..n)
        .map(|i| base + usize::from((i + n - offset) % n < rem))
        .collect()
}

/// Schedules one tick. `measurements` are in snapshot order, one per user.
pub fn schedule_and_aggregate(
    measurements: &[LinkMeasurement],
    snapshot: &UserSnapshot,
    scenario: &Scenario,
    tick_index: u64,
) -> PerfIndicators {
    assert_eq!(
        measurements.len(),
        snapshot.users.len(),
        "one measurement per user"
    );
    let tick = scenario.tick;
    let mut users: Vec<UserPerf> = measurements
        .iter()
        .map(|m| UserPerf {
            user_id: m.user_id,
            serving_cell: m.serving_cell,
            rsrp: m.rsrp,
            sinr: m.sinr,
            covered: m.is_covered(&scenario.coverage),
            scheduled_rbs: 0,
            bler: 0.0,
            rate: 0.0,
            served_bits: 0.0,
        })
        .collect();
    let mut cells = Vec::new();
    for cell_id in scenario.cell_ids() {
        let attached: Vec<usize> = (0..users.len())
            .filter(|&i| users[i].serving_cell == Some(cell_id) && snapshot.users[i].has_demand())
            .collect();
        let shares = rb_shares(scenario.num_rbs, attached.len(), tick_index);
        let mut kpi = CellKpi::empty(cell_id);
        let mut bits_total = 0.0;
        let mut rate_sum = 0.0;
        let mut bler_sum = 0.0;
        for (&i, &rbs) in attached.iter().zip(&shares) {
            if rbs == 0 {
                continue;
            }
            let sinr = users[i].sinr.expect("attached users have a serving cell");
            let bler = sinr_to_bler(sinr, &scenario.bler);
            let bits =
                sinr_to_rate(sinr, rbs as f64 * scenario.rb_bandwidth_hz()) * (1.0 - bler) * tick;
            let served = snapshot.users[i]
                .pending_bits()
                .map_or(bits, |cap| bits.min(cap));
            let u = &mut users[i];
            u.scheduled_rbs = rbs;
            u.bler = bler;
            u.served_bits = served;
            u.rate = served / tick;
            bits_total += served;
            rate_sum += u.rate;
            bler_sum += bler;
            kpi.scheduled_users += 1;
        }
        if kpi.scheduled_users > 0 {
            kpi.total_dl_traffic = bits_total / 8.0;
            kpi.avg_dl_rate = rate_sum / kpi.scheduled_users as f64;
            kpi.avg_bler = bler_sum / kpi.scheduled_users as f64;
        }
        cells.push(kpi);
    }
    let n = users.len();
    let (coverage_ratio, mean_user_rate) = if n == 0 {
        (0.0, 0.0)
    } else {
        (
            users.iter().filter(|u| u.covered).count() as f64 / n as f64,
            users.iter().map(|u| u.rate).sum::<f64>() / n as f64,
        )
    };
    PerfIndicators {
        tick_index,
        time: snapshot.time,
        users,
        cells,
        coverage_ratio,
        mean_user_rate,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellCoverage {
    pub cell_id: CellId,
    pub attached_users: usize,
    pub coverage_ratio: f64,
}

/// Output of the coverage-only emulator for one tick.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageIndicators {
    pub tick_index: u64,
    pub time: f64,
    pub users: Vec<LinkMeasurement>,
    pub cells: Vec<CellCoverage>,
    pub coverage_ratio: f64,
}

pub fn coverage_summary(
    measurements: Vec<LinkMeasurement>,
    scenario: &Scenario,
    tick_index: u64,
    time: f64,
) -> CoverageIndicators {
    let t = &scenario.coverage;
    let cells = scenario
        .cell_ids()
        .into_iter()
        .map(|cell_id| {
            let attached: Vec<_> = measurements
                .iter()
                .filter(|m| m.serving_cell == Some(cell_id))
                .collect();
            let covered = attached.iter().filter(|m| m.is_covered(t)).count();
            CellCoverage {
                cell_id,
                attached_users: attached.len(),
                coverage_ratio: if attached.is_empty() {
                    0.0
                } else {
                    covered as f64 / attached.len() as f64
                },
            }
        })
        .collect();
    let coverage_ratio = if measurements.is_empty() {
        0.0
    } else {
        measurements.iter().filter(|m| m.is_covered(t)).count() as f64 / measurements.len() as f64
    };
    CoverageIndicators {
        tick_index,
        time,
        users: measurements,
        cells,
        coverage_ratio,
    }
}
