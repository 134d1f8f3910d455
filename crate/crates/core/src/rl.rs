//! Episodic environment for multi-objective antenna optimization on top of
//! the protocol-stack pipeline.
//!
//! Actions are absolute grid values for every cell's beam. Each step applies
//! the action and advances exactly one one-second tick; the environment hands
//! back raw indicators and leaves reward design to the caller.
//! [`default_reward`] is only a convenience.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::combined::{Pipeline, SimError, SimRequest, Stages};
use crate::phy::PerfIndicators;
use crate::scenario::{validate_antenna, AntennaConfig, CellId, OffGridError, Scenario};
use crate::users::UserSnapshot;

pub const HISTOGRAM_BINS: usize = 8;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("episode_len must be >= 1")]
    EpisodeLength,
    #[error("environment ticks must be 1 s, scenario tick is {0} s")]
    TickNotOneSecond(f64),
    #[error("cell {cell_id}: {error}")]
    OffGrid {
        cell_id: CellId,
        error: OffGridError,
    },
    #[error("action must cover exactly the optimized cells: missing {missing:?}, unexpected {unexpected:?}")]
    ActionCells {
        missing: Vec<CellId>,
        unexpected: Vec<CellId>,
    },
    #[error("episode finished; reset before stepping")]
    EpisodeDone,
    #[error("environment has not been reset")]
    NotReset,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellBeam {
    pub cell_id: CellId,
    pub antenna: AntennaConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub cells: Vec<CellBeam>,
}

impl Action {
    pub fn from_scenario(s: &Scenario) -> Self {
        Action {
            cells: s
                .cell_ids()
                .into_iter()
                .map(|id| CellBeam {
                    cell_id: id,
                    antenna: s.cell(id).expect("scenario cell").1.antenna,
                })
                .collect(),
        }
    }

    /// Same beams with every cell switched off.
    pub fn all_inactive(mut self) -> Self {
        for c in &mut self.cells {
            c.antenna.active = false;
        }
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteSummary {
    pub site_id: u32,
    pub x: f64,
    pub y: f64,
    pub height: f64,
    pub cells: Vec<CellId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserDistribution {
    /// Users per serving cell, ascending cell id; out-of-coverage users
    /// are counted in `unattached`.
    pub per_cell: Vec<(CellId, usize)>,
    pub unattached: usize,
    /// Row-major `HISTOGRAM_BINS x HISTOGRAM_BINS` counts over the map, row = y.
    pub histogram: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub step_index: u64,
    pub sites: Vec<SiteSummary>,
    pub beams: Vec<CellBeam>,
    pub user_distribution: UserDistribution,
    pub business_model: String,
    pub last_indicators: PerfIndicators,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    pub tick_index: u64,
    pub snapshot: UserSnapshot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepResult {
    pub next_state: EnvState,
    pub indicators: PerfIndicators,
    pub done: bool,
    pub info: StepInfo,
}

fn business_model(s: &Scenario) -> String {
    s.service_profiles
        .iter()
        .map(|p| {
            let t = serde_json::to_value(p.service_type).expect("enum serializes");
            format!("{}@{}", t.as_str().unwrap_or("?"), p.arrival_rate)
        })
        .collect::<Vec<_>>()
        .join("+")
}

fn user_distribution(
    s: &Scenario,
    snapshot: &UserSnapshot,
    ind: &PerfIndicators,
) -> UserDistribution {
    let per_cell = s
        .cell_ids()
        .into_iter()
        .map(|id| {
            (
                id,
                ind.users
                    .iter()
                    .filter(|u| u.serving_cell == Some(id))
                    .count(),
            )
        })
        .collect();
    let unattached = ind
        .users
        .iter()
        .filter(|u| u.serving_cell.is_none())
        .count();
    let b = &s.map_bounds;
    let mut histogram = vec![0u32; HISTOGRAM_BINS * HISTOGRAM_BINS];
    let bin = |v: f64, lo: f64, span: f64| {
        (((v - lo) / span * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1)
    };
    for u in &snapshot.users {
        let col = bin(u.position.x, b.x_min, b.width());
        let row = bin(u.position.y, b.y_min, b.height());
        histogram[row * HISTOGRAM_BINS + col] += 1;
    }
    UserDistribution {
        per_cell,
        unattached,
        histogram,
    }
}

fn build_state(
    s: &Scenario,
    step_index: u64,
    snapshot: &UserSnapshot,
    ind: PerfIndicators,
) -> EnvState {
    EnvState {
        step_index,
        sites: s
            .sites
            .iter()
            .map(|site| SiteSummary {
                site_id: site.site_id,
                x: site.position.x,
                y: site.position.y,
                height: site.position.height,
                cells: site.cells.iter().map(|c| c.cell_id).collect(),
            })
            .collect(),
        beams: Action::from_scenario(s).cells,
        user_distribution: user_distribution(s, snapshot, &ind),
        business_model: business_model(s),
        last_indicators: ind,
    }
}

struct Episode {
    pipeline: Pipeline,
    episode_len: u64,
    state: EnvState,
}

/// One environment instance. Strictly sequential.
pub struct AntennaEnv {
    request: SimRequest,
    episode: Option<Episode>,
}

impl AntennaEnv {
    pub fn new(request: SimRequest) -> Result<Self, EnvError> {
        request.validate()?;
        if request.scenario.tick != 1.0 {
            return Err(EnvError::TickNotOneSecond(request.scenario.tick));
        }
        Ok(AntennaEnv {
            request,
            episode: None,
        })
    }

    pub fn request(&self) -> &SimRequest {
        &self.request
    }

    /// Fresh population and default beams, then one warm-up tick.
    pub fn reset(&mut self, episode_len: u64, seed: u64) -> Result<EnvState, EnvError> {
        if episode_len < 1 {
            return Err(EnvError::EpisodeLength);
        }
        let mut pipeline = Pipeline::new(
            self.request.effective_scenario(),
            self.request.n_users,
            self.request.mobility.clone(),
            seed,
        )?;
        let out = pipeline.step(Stages::ProtocolStack);
        let ind = out.indicators.expect("protocol-stack tick");
        let state = build_state(pipeline.scenario(), 0, &out.snapshot, ind);
        self.episode = Some(Episode {
            pipeline,
            episode_len,
            state: state.clone(),
        });
        Ok(state)
    }

    pub fn state(&self) -> Option<&EnvState> {
        self.episode.as_ref().map(|e| &e.state)
    }

    pub fn is_done(&self) -> bool {
        self.episode
            .as_ref()
            .is_some_and(|e| e.state.step_index >= e.episode_len)
    }

    /// Checks an action without touching the environment.
    pub fn check_action(&self, action: &Action) -> Result<Vec<CellBeam>, EnvError> {
        let ep = self.episode.as_ref().ok_or(EnvError::NotReset)?;
        let scenario = ep.pipeline.scenario();
        let expected = scenario.cell_ids();
        let mut given: Vec<CellId> = action.cells.iter().map(|c| c.cell_id).collect();
        given.sort_unstable();
        if given != expected {
            let missing = expected
                .iter()
                .filter(|c| !given.contains(c))
                .copied()
                .collect();
            let mut unexpected: Vec<CellId> = given
                .iter()
                .filter(|c| !expected.contains(c))
                .copied()
                .collect();
            // duplicates count as unexpected
            for w in given.windows(2) {
                if w[0] == w[1] {
                    unexpected.push(w[0]);
                }
            }
            return Err(EnvError::ActionCells {
                missing,
                unexpected,
            });
        }
        action
            .cells
            .iter()
            .map(|c| {
                validate_antenna(c.antenna.normalized(), &scenario.param_grid)
                    .map(|antenna| CellBeam {
                        cell_id: c.cell_id,
                        antenna,
                    })
                    .map_err(|error| EnvError::OffGrid {
                        cell_id: c.cell_id,
                        error,
                    })
            })
            .collect()
    }

    /// Applies `action` and advances one tick. Rejected actions leave the
    /// environment untouched.
    pub fn step(&mut self, action: &Action) -> Result<StepResult, EnvError> {
        if self.is_done() {
            return Err(EnvError::EpisodeDone);
        }
        let beams = self.check_action(action)?;
        let ep = self.episode.as_mut().ok_or(EnvError::NotReset)?;
        for b in &beams {
            ep.pipeline.set_antenna(b.cell_id, b.antenna);
        }
        let out = ep.pipeline.step(Stages::ProtocolStack);
        let indicators = out.indicators.expect("protocol-stack tick");
        let step_index = ep.state.step_index + 1;
        let state = build_state(
            ep.pipeline.scenario(),
            step_index,
            &out.snapshot,
            indicators.clone(),
        );
        ep.state = state.clone();
        Ok(StepResult {
            next_state: state,
            indicators,
            done: step_index >= ep.episode_len,
            info: StepInfo {
                tick_index: out.tick_index,
                snapshot: out.snapshot,
            },
        })
    }
}

/// `w_cov * coverage_ratio + w_rate * mean_user_rate / rate_norm`.
pub fn default_reward(ind: &PerfIndicators, w_cov: f64, w_rate: f64, rate_norm: f64) -> f64 {
    debug_assert!(
        w_cov >= 0.0 && w_rate >= 0.0,
        "weights must be non-negative"
    );
    let rate_term = if w_rate == 0.0 {
        0.0
    } else {
        w_rate * ind.mean_user_rate / rate_norm
    };
    w_cov * ind.coverage_ratio + rate_term
}
