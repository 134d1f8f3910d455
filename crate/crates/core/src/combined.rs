//! The three combined emulators, built on one staged pipeline.
//!
//! Every tick runs users -> large-scale model -> small-scale fading and RE
//! response -> measurement. The protocol-stack service additionally draws
//! service arrivals and schedules traffic; the coverage service stops after
//! measurement; the link-channel service exports the RE grid. Random streams
//! are keyed by stage, so gating a stage never moves another stage's draws and
//! coverage output is an exact projection of protocol-stack output.

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{
    apply_large_scale, draw_small_scale, export, freq_response, link_mean_powers, sample_period,
    ChannelError, LinkId, ReGridResponse, SmallScaleRealization,
};
use crate::largescale::{build_large_scale, LargeScaleModel, ShadowField};
use crate::phy::{
    coverage_summary, measure_powers_with_signal_gain, measure_with_signal_gain,
    schedule_and_aggregate, CoverageIndicators, LinkMeasurement, PerfIndicators,
};
use crate::scenario::{AntennaConfig, CellId, Scenario, ScenarioError};
use crate::users::{
    init_users, step_users, MobilityParams, Population, UserError, UserId, UserSnapshot,
};

pub const GENERATOR_VERSION: &str = concat!("netcomb-core/", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Users(#[from] UserError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error("invalid request field `{field}`: {message}")]
    InvalidRequest { field: String, message: String },
    #[error("{what}: requested {requested} exceeds limit {limit}")]
    ResourceGuard {
        what: String,
        requested: u64,
        limit: u64,
    },
    #[error("run cancelled")]
    Cancelled,
}

impl SimError {
    fn request(field: &str, message: impl Into<String>) -> Self {
        SimError::InvalidRequest {
            field: field.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimMode {
    ProtocolStack,
    Coverage,
    LinkChannel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LinkSubset {
    #[default]
    All,
    /// Only each user's serving-cell link.
    Serving,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AntennaOverride {
    pub cell_id: CellId,
    pub antenna: AntennaConfig,
}

/// The C1 call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimRequest {
    pub mode: SimMode,
    pub scenario: Scenario,
    #[serde(default)]
    pub antenna_overrides: Vec<AntennaOverride>,
    pub n_users: usize,
    #[serde(default)]
    pub mobility: MobilityParams,
    /// Seconds; a positive multiple of the scenario tick.
    pub duration: f64,
    pub seed: u64,
    #[serde(default)]
    pub link_subset: LinkSubset,
}

impl SimRequest {
    pub fn num_ticks(&self) -> u64 {
        (self.duration / self.scenario.tick).round() as u64
    }

    pub fn validate(&self) -> Result<(), SimError> {
        self.scenario.validate()?;
        let ratio = self.duration / self.scenario.tick;
        if !(self.duration > 0.0)
            || ratio < 1.0 - 1e-9
            || (ratio - ratio.round()).abs() > 1e-9 * ratio.max(1.0)
        {
            return Err(SimError::request(
                "duration",
                "must be a positive multiple of tick",
            ));
        }
        for (i, o) in self.antenna_overrides.iter().enumerate() {
            if self.scenario.cell(o.cell_id).is_none() {
                return Err(SimError::request(
                    &format!("antenna_overrides[{i}].cell_id"),
                    format!("unknown cell {}", o.cell_id),
                ));
            }
            o.antenna
                .normalized()
                .validate(&format!("antenna_overrides[{i}].antenna"))?;
        }
        self.mobility.validate()?;
        let limits = &self.scenario.limits;
        if self.n_users > limits.max_users {
            return Err(SimError::ResourceGuard {
                what: "users".into(),
                requested: self.n_users as u64,
                limit: limits.max_users as u64,
            });
        }
        let link_ticks = self.n_users as u64 * self.scenario.num_cells() as u64 * self.num_ticks();
        if link_ticks > limits.max_link_ticks {
            return Err(SimError::ResourceGuard {
                what: "users x cells x ticks".into(),
                requested: link_ticks,
                limit: limits.max_link_ticks,
            });
        }
        if self.mode == SimMode::LinkChannel {
            let links_per_tick = match self.link_subset {
                LinkSubset::All => self.n_users * self.scenario.num_cells(),
                LinkSubset::Serving => self.n_users,
            } as u64;
            let bytes = links_per_tick
                * self.num_ticks()
                * (self.scenario.num_re() * self.scenario.tx_ports * self.scenario.rx_ports * 8)
                    as u64;
            if bytes > limits.max_payload_bytes {
                return Err(SimError::ResourceGuard {
                    what: "link-channel payload bytes".into(),
                    requested: bytes,
                    limit: limits.max_payload_bytes,
                });
            }
        }
        Ok(())
    }

    /// Scenario with the overrides applied and azimuths normalized.
    pub fn effective_scenario(&self) -> Scenario {
        let mut s = self.scenario.clone();
        for o in &self.antenna_overrides {
            if let Some(cell) = s.cell_mut(o.cell_id) {
                cell.antenna = o.antenna.normalized();
            }
        }
        s
    }
}

/// Which stages run in a tick.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stages {
    /// Users, channel and measurement only; link powers are accumulated
    /// without keeping the RE grid.
    Coverage,
    /// Coverage plus the RE grid.
    LinkChannel,
    /// RE grid plus service arrivals, scheduling and KPIs.
    ProtocolStack,
}

/// Everything produced by one tick.
#[derive(Debug, Clone)]
pub struct TickOutput {
    pub tick_index: u64,
    pub snapshot: UserSnapshot,
    pub large_scale: LargeScaleModel,
    /// Small-scale tap gains before large-scale scaling.
    pub small_scale: SmallScaleRealization,
    /// RE response with large-scale fading applied; `None` for
    /// [`Stages::Coverage`].
    pub grid: Option<ReGridResponse>,
    pub measurements: Vec<LinkMeasurement>,
    pub indicators: Option<PerfIndicators>,
}

/// A running simulation instance. Single owner; ticks run in order.
#[derive(Debug, Clone)]
pub struct Pipeline {
    scenario: Scenario,
    population: Population,
    shadow: ShadowField,
    small_scale: SmallScaleRealization,
    ticks_done: u64,
}

impl Pipeline {
    pub fn new(
        scenario: Scenario,
        n_users: usize,
        mobility: MobilityParams,
        seed: u64,
    ) -> Result<Self, SimError> {
        scenario.validate()?;
        let population = init_users(&scenario, n_users, mobility, seed)?;
        let shadow = ShadowField::new(&scenario, seed);
        let cell_ids = scenario.cell_ids();
        let links: Vec<LinkId> = population
            .users()
            .iter()
            .flat_map(|u| {
                cell_ids.iter().map(move |&c| LinkId {
                    user_id: u.user_id,
                    cell_id: c,
                })
            })
            .collect();
        let profile = scenario
            .tap_profile
            .on_sample_grid(sample_period(scenario.num_re()));
        let small_scale =
            draw_small_scale(&profile, &links, scenario.tx_ports, scenario.rx_ports, seed);
        Ok(Pipeline {
            scenario,
            population,
            shadow,
            small_scale,
            ticks_done: 0,
        })
    }

    pub fn from_request(req: &SimRequest) -> Result<Self, SimError> {
        req.validate()?;
        Pipeline::new(
            req.effective_scenario(),
            req.n_users,
            req.mobility.clone(),
            req.seed,
        )
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn population(&self) -> &Population {
        &self.population
    }

    pub fn ticks_done(&self) -> u64 {
        self.ticks_done
    }

    /// Replaces a cell's beam; takes effect from the next tick.
    pub fn set_antenna(&mut self, cell_id: CellId, antenna: AntennaConfig) -> bool {
        match self.scenario.cell_mut(cell_id) {
            Some(cell) => {
                cell.antenna = antenna.normalized();
                true
            }
            None => false,
        }
    }

    pub fn step(&mut self, stages: Stages) -> TickOutput {
        self.step_with_signal_gain(stages, |_, _, _| 1.0)
    }

    /// One tick with the serving signal scaled by `gain(tick, user, cell)`.
    pub fn step_with_signal_gain(
        &mut self,
        stages: Stages,
        gain: impl Fn(u64, UserId, CellId) -> f64,
    ) -> TickOutput {
        if self.ticks_done > 0 {
            self.small_scale.advance(self.scenario.tick);
        }
        let tick_index = self.ticks_done + 1;
        let snapshot = step_users(
            &mut self.population,
            self.scenario.tick,
            stages == Stages::ProtocolStack,
        );
        let large_scale = build_large_scale(&self.scenario, &snapshot, &self.shadow);
        let signal_gain = |u, c| gain(tick_index, u, c);
        let (grid, measurements) = if stages == Stages::Coverage {
            let powers = link_mean_powers(&self.small_scale, &self.scenario, &large_scale)
                .expect("pipeline keeps large- and small-scale link sets aligned");
            let m = measure_powers_with_signal_gain(
                &powers,
                &large_scale.user_ids,
                &self.scenario,
                signal_gain,
            );
            (None, m)
        } else {
            let grid = apply_large_scale(
                &large_scale,
                freq_response(&self.small_scale, &self.scenario),
            )
            .expect("pipeline keeps large- and small-scale link sets aligned");
            let m = measure_with_signal_gain(&grid, &self.scenario, signal_gain);
            (Some(grid), m)
        };
        let indicators = (stages == Stages::ProtocolStack).then(|| {
            let ind = schedule_and_aggregate(&measurements, &snapshot, &self.scenario, tick_index);
            self.population.serve(
                ind.users
                    .iter()
                    .enumerate()
                    .map(|(i, u)| (i, u.served_bits)),
            );
            ind
        });
        self.ticks_done = tick_index;
        TickOutput {
            tick_index,
            snapshot,
            large_scale,
            small_scale: self.small_scale.clone(),
            grid,
            measurements,
            indicators,
        }
    }
}

/// Progress and cancellation shared with whoever drives a run.
#[derive(Debug, Default)]
pub struct RunControl {
    ticks_done: AtomicU64,
    total_ticks: AtomicU64,
    cancel: AtomicBool,
}

impl RunControl {
    pub fn cancel(&self) {
        self.cancel.store(true, Ordering::SeqCst);
    }

    pub fn is_cancelled(&self) -> bool {
        self.cancel.load(Ordering::SeqCst)
    }

    /// `(ticks done, total ticks)`.
    pub fn progress(&self) -> (u64, u64) {
        (
            self.ticks_done.load(Ordering::SeqCst),
            self.total_ticks.load(Ordering::SeqCst),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub mode: SimMode,
    pub seed: u64,
    pub duration: f64,
    pub tick: f64,
    pub num_ticks: u64,
    pub n_users: usize,
    pub generator_version: String,
}

/// Where each sample of a link-channel payload came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleIndex {
    pub tick_index: u64,
    pub user_id: UserId,
    pub cell_id: CellId,
    /// dB, as in the large-scale model.
    pub coupling_loss: f64,
    pub usable: bool,
    /// Sum over taps of port-averaged small-scale power.
    pub small_scale_power: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkChannelDataset {
    pub shape: export::ReShape,
    pub samples: Vec<SampleIndex>,
    /// Binary export (see [`export`]).
    #[serde(skip)]
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "series", rename_all = "snake_case")]
pub enum SimOutput {
    ProtocolStack(Vec<PerfIndicators>),
    Coverage(Vec<CoverageIndicators>),
    LinkChannel(LinkChannelDataset),
}

/// The C2 output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub metadata: RunMetadata,
    pub output: SimOutput,
}

fn metadata(req: &SimRequest) -> RunMetadata {
    RunMetadata {
        mode: req.mode,
        seed: req.seed,
        duration: req.duration,
        tick: req.scenario.tick,
        num_ticks: req.num_ticks(),
        n_users: req.n_users,
        generator_version: GENERATOR_VERSION.to_string(),
    }
}

fn drive<T>(
    req: &SimRequest,
    control: &RunControl,
    mut per_tick: impl FnMut(&mut Pipeline) -> T,
) -> Result<Vec<T>, SimError> {
    let mut pipeline = Pipeline::from_request(req)?;
    let total = req.num_ticks();
    control.total_ticks.store(total, Ordering::SeqCst);
    let mut out = Vec::with_capacity(total as usize);
    for t in 0..total {
        if control.is_cancelled() {
            return Err(SimError::Cancelled);
        }
        out.push(per_tick(&mut pipeline));
        control.ticks_done.store(t + 1, Ordering::SeqCst);
    }
    Ok(out)
}

fn expect_mode(req: &SimRequest, mode: SimMode) -> Result<(), SimError> {
    if req.mode == mode {
        Ok(())
    } else {
        Err(SimError::request(
            "mode",
            format!("expected {mode:?}, got {:?}", req.mode),
        ))
    }
}

pub fn run_protocol_stack(req: &SimRequest) -> Result<SimResult, SimError> {
    run_protocol_stack_with(req, &RunControl::default())
}

pub fn run_protocol_stack_with(
    req: &SimRequest,
    control: &RunControl,
) -> Result<SimResult, SimError> {
    expect_mode(req, SimMode::ProtocolStack)?;
    let series = drive(req, control, |p| {
        p.step(Stages::ProtocolStack)
            .indicators
            .expect("protocol-stack stage yields indicators")
    })?;
    Ok(SimResult {
        metadata: metadata(req),
        output: SimOutput::ProtocolStack(series),
    })
}

pub fn run_coverage(req: &SimRequest) -> Result<SimResult, SimError> {
    run_coverage_with(req, &RunControl::default())
}

pub fn run_coverage_with(req: &SimRequest, control: &RunControl) -> Result<SimResult, SimError> {
    expect_mode(req, SimMode::Coverage)?;
    let series = drive(req, control, |p| {
        let out = p.step(Stages::Coverage);
        coverage_summary(
            out.measurements,
            p.scenario(),
            out.tick_index,
            out.snapshot.time,
        )
    })?;
    Ok(SimResult {
        metadata: metadata(req),
        output: SimOutput::Coverage(series),
    })
}

pub fn run_link_channel(req: &SimRequest) -> Result<SimResult, SimError> {
    run_link_channel_with(req, &RunControl::default())
}

pub fn run_link_channel_with(
    req: &SimRequest,
    control: &RunControl,
) -> Result<SimResult, SimError> {
    expect_mode(req, SimMode::LinkChannel)?;
    let scenario = &req.scenario;
    let ports = scenario.tx_ports * scenario.rx_ports;
    let ticks = drive(req, control, |p| {
        let out = p.step(Stages::LinkChannel);
        let grid = out
            .grid
            .as_ref()
            .expect("link-channel stage keeps the grid");
        let n_cells = out.large_scale.cell_ids.len();
        let mut picked = Vec::new();
        for (u, m) in out.measurements.iter().enumerate() {
            for c in 0..n_cells {
                let keep = match req.link_subset {
                    LinkSubset::All => true,
                    LinkSubset::Serving => m.serving_cell == Some(out.large_scale.cell_ids[c]),
                };
                if keep {
                    let i = out.large_scale.index(u, c);
                    let link = &grid.links[i];
                    picked.push((
                        SampleIndex {
                            tick_index: out.tick_index,
                            user_id: link.link.user_id,
                            cell_id: link.link.cell_id,
                            coupling_loss: out.large_scale.coupling_loss[i],
                            usable: out.large_scale.usable[i],
                            small_scale_power: out.small_scale.links[i].mean_port_power(ports),
                        },
                        link.h.clone(),
                    ));
                }
            }
        }
        picked
    })?;
    let (samples, responses): (Vec<SampleIndex>, Vec<Vec<_>>) = ticks.into_iter().flatten().unzip();
    let shape = export::ReShape {
        samples: samples.len(),
        num_re: scenario.num_re(),
        tx_ports: scenario.tx_ports,
        rx_ports: scenario.rx_ports,
    };
    let payload = export::encode(shape, responses.iter().map(Vec::as_slice));
    Ok(SimResult {
        metadata: metadata(req),
        output: SimOutput::LinkChannel(LinkChannelDataset {
            shape,
            samples,
            payload,
        }),
    })
}

/// Dispatches on `req.mode`.
pub fn run(req: &SimRequest, control: &RunControl) -> Result<SimResult, SimError> {
    match req.mode {
        SimMode::ProtocolStack => run_protocol_stack_with(req, control),
        SimMode::Coverage => run_coverage_with(req, control),
        SimMode::LinkChannel => run_link_channel_with(req, control),
    }
}
