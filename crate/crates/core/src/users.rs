//! User behavior: positions and service initiations.
//!
//! Every user owns two random streams derived from the master seed and its
//! user id, one for mobility and one for service arrivals. Growing the
//! population or skipping service draws never perturbs another user's path.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{stage, stream};
use crate::scenario::{Rect, Scenario, ServiceProfile, ServiceType};

pub type UserId = u32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum UserError {
    #[error("requested {requested} users exceeds the configured maximum of {max}")]
    TooManyUsers { requested: usize, max: usize },
    #[error("invalid mobility parameter `{field}`: {message}")]
    InvalidMobility { field: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MobilityModel {
    Stationary,
    #[default]
    RandomWaypoint,
    /// Users commute between a home position and a disk around an attractor.
    Attractor,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn distance(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MobilityParams {
    #[serde(default)]
    pub model: MobilityModel,
    /// `[min, max]` speed in m/s.
    #[serde(default = "default_speed_range")]
    pub speed_range: [f64; 2],
    #[serde(default)]
    pub attractor_center: Option<Point>,
    #[serde(default)]
    pub attractor_radius: Option<f64>,
    /// Long-run fraction of decisions that target the attractor disk.
    #[serde(default = "default_strength")]
    pub attractor_strength: f64,
    /// Mean seconds between an idle user's destination decisions.
    #[serde(default = "default_decision_interval")]
    pub decision_interval: f64,
}

fn default_speed_range() -> [f64; 2] {
    [0.5, 1.5]
}
fn default_strength() -> f64 {
    1.0
}
fn default_decision_interval() -> f64 {
    600.0
}

impl Default for MobilityParams {
    fn default() -> Self {
        MobilityParams {
            model: MobilityModel::RandomWaypoint,
            speed_range: default_speed_range(),
            attractor_center: None,
            attractor_radius: None,
            attractor_strength: default_strength(),
            decision_interval: default_decision_interval(),
        }
    }
}

impl MobilityParams {
    pub fn stationary() -> Self {
        MobilityParams {
            model: MobilityModel::Stationary,
            speed_range: [0.0, 0.0],
            ..Default::default()
        }
    }

    pub fn attractor(center: Point, radius: f64) -> Self {
        MobilityParams {
            model: MobilityModel::Attractor,
            attractor_center: Some(center),
            attractor_radius: Some(radius),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), UserError> {
        let bad = |field: &str, message: &str| UserError::InvalidMobility {
            field: field.into(),
            message: message.into(),
        };
        let [lo, hi] = self.speed_range;
        if !(lo >= 0.0 && lo <= hi && hi.is_finite()) {
            return Err(bad("speed_range", "need 0 <= min <= max"));
        }
        if !(0.0..=1.0).contains(&self.attractor_strength) {
            return Err(bad("attractor_strength", "must be in [0, 1]"));
        }
        if !(self.decision_interval > 0.0) {
            return Err(bad("decision_interval", "must be > 0"));
        }
        if self.model == MobilityModel::Attractor {
            if self.attractor_center.is_none() {
                return Err(bad("attractor_center", "required for the attractor model"));
            }
            if !matches!(self.attractor_radius, Some(r) if r > 0.0) {
                return Err(bad(
                    "attractor_radius",
                    "must be > 0 for the attractor model",
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActiveService {
    pub service_type: ServiceType,
    /// Bits still to deliver; `None` for full-buffer sessions.
    pub remaining_bits: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserState {
    pub user_id: UserId,
    pub position: Point,
    pub waypoint: Point,
    pub home: Point,
    pub speed: f64,
    pub active_services: Vec<ActiveService>,
    /// Sessions initiated during the most recent tick.
    pub initiated: Vec<ServiceType>,
}

impl UserState {
    pub fn has_demand(&self) -> bool {
        !self.active_services.is_empty()
    }

    /// Total outstanding bits; `None` when any session is unbounded.
    pub fn pending_bits(&self) -> Option<f64> {
        self.active_services
            .iter()
            .try_fold(0.0, |acc, s| s.remaining_bits.map(|b| acc + b))
    }

    /// Drains `bits` from the sessions in arrival order, dropping finished ones.
    pub fn serve(&mut self, mut bits: f64) {
        for s in self.active_services.iter_mut() {
            if bits <= 0.0 {
                break;
            }
            match s.remaining_bits.as_mut() {
                Some(rem) => {
                    let take = rem.min(bits);
                    *rem -= take;
                    bits -= take;
                }
                None => bits = 0.0,
            }
        }
        self.active_services
            .retain(|s| s.remaining_bits.is_none_or(|b| b > 0.0));
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserSnapshot {
    pub tick_index: u64,
    /// Seconds since the start of the run.
    pub time: f64,
    pub users: Vec<UserState>,
}

/// A seeded user population. Single owner; step it with [`step_users`].
#[derive(Debug, Clone)]
pub struct Population {
    bounds: Rect,
    mobility: MobilityParams,
    profiles: Vec<ServiceProfile>,
    tick_count: u64,
    users: Vec<UserState>,
    mobility_rngs: Vec<ChaCha8Rng>,
    service_rngs: Vec<ChaCha8Rng>,
}

fn uniform_in_rect(rng: &mut ChaCha8Rng, b: &Rect) -> Point {
    Point::new(
        b.x_min + rng.random::<f64>() * b.width(),
        b.y_min + rng.random::<f64>() * b.height(),
    )
}

fn uniform_in_disk(rng: &mut ChaCha8Rng, center: Point, radius: f64, b: &Rect) -> Point {
    let r = radius * rng.random::<f64>().sqrt();
    let theta = 2.0 * std::f64::consts::PI * rng.random::<f64>();
    let (x, y) = b.clamp(center.x + r * theta.cos(), center.y + r * theta.sin());
    Point::new(x, y)
}

fn draw_speed(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
    if hi > lo {
        lo + rng.random::<f64>() * (hi - lo)
    } else {
        lo
    }
}

/// Creates `n` users with ids `0..n`.
pub fn init_users(
    scenario: &Scenario,
    n: usize,
    mobility: MobilityParams,
    seed: u64,
) -> Result<Population, UserError> {
    if n > scenario.limits.max_users {
        return Err(UserError::TooManyUsers {
            requested: n,
            max: scenario.limits.max_users,
        });
    }
    mobility.validate()?;
    let bounds = scenario.map_bounds;
    let mut users = Vec::with_capacity(n);
    for id in 0..n as UserId {
        let mut rng = stream(seed, &[stage::MOBILITY_INIT, id as u64]);
        let position = match (
            mobility.model,
            mobility.attractor_center,
            mobility.attractor_radius,
        ) {
            (MobilityModel::Attractor, Some(c), Some(r)) => {
                uniform_in_disk(&mut rng, c, r, &bounds)
            }
            _ => uniform_in_rect(&mut rng, &bounds),
        };
        let speed = draw_speed(&mut rng, mobility.speed_range);
        let waypoint = match mobility.model {
            MobilityModel::RandomWaypoint => uniform_in_rect(&mut rng, &bounds),
            _ => position,
        };
        users.push(UserState {
            user_id: id,
            position,
            waypoint,
            home: position,
            speed,
            active_services: Vec::new(),
            initiated: Vec::new(),
        });
    }
    Ok(Population {
        bounds,
        mobility,
        profiles: scenario.service_profiles.clone(),
        tick_count: 0,
        mobility_rngs: (0..n as u64)
            .map(|id| stream(seed, &[stage::MOBILITY, id]))
            .collect(),
        service_rngs: (0..n as u64)
            .map(|id| stream(seed, &[stage::SERVICE, id]))
            .collect(),
        users,
    })
}

impl Population {
    pub fn users(&self) -> &[UserState] {
        &self.users
    }

    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    pub fn tick_count(&self) -> u64 {
        self.tick_count
    }

    pub fn mobility(&self) -> &MobilityParams {
        &self.mobility
    }

    /// Swaps the mobility law mid-run (homes and positions are kept).
    pub fn set_mobility(&mut self, mobility: MobilityParams) -> Result<(), UserError> {
        mobility.validate()?;
        self.mobility = mobility;
        Ok(())
    }

    pub fn set_attractor_strength(&mut self, strength: f64) {
        self.mobility.attractor_strength = strength.clamp(0.0, 1.0);
    }

    pub fn snapshot(&self, tick: f64) -> UserSnapshot {
        UserSnapshot {
            tick_index: self.tick_count,
            time: self.tick_count as f64 * tick,
            users: self.users.clone(),
        }
    }

    /// Applies scheduler output: `served` is `(user index, bits)`.
    pub fn serve(&mut self, served: impl IntoIterator<Item = (usize, f64)>) {
        for (idx, bits) in served {
            self.users[idx].serve(bits);
        }
    }

    fn pick_destination(
        &self,
        user: &UserState,
        rng: &mut ChaCha8Rng,
        tick: f64,
    ) -> Option<(Point, f64)> {
        let m = &self.mobility;
        match m.model {
            MobilityModel::Stationary => None,
            MobilityModel::RandomWaypoint => Some((
                uniform_in_rect(rng, &self.bounds),
                draw_speed(rng, m.speed_range),
            )),
            MobilityModel::Attractor => {
                let p_decide = (tick / m.decision_interval).min(1.0);
                if rng.random::<f64>() >= p_decide {
                    return None;
                }
                let target = if rng.random::<f64>() < m.attractor_strength {
                    let c = m.attractor_center.expect("validated");
                    let r = m.attractor_radius.expect("validated");
                    uniform_in_disk(rng, c, r, &self.bounds)
                } else {
                    user.home
                };
                Some((target, draw_speed(rng, m.speed_range)))
            }
        }
    }

    fn move_user(&mut self, idx: usize, tick: f64) {
        let mut rng = self.mobility_rngs[idx].clone();
        let user = &self.users[idx];
        let mut position = user.position;
        let mut waypoint = user.waypoint;
        let mut speed = user.speed;
        let at_waypoint = position.distance(&waypoint) == 0.0;
        if at_waypoint {
            if let Some((w, s)) = self.pick_destination(user, &mut rng, tick) {
                waypoint = w;
                speed = s;
            }
        } else {
            let dist = position.distance(&waypoint);
            let step = speed * tick;
            if step >= dist {
                position = waypoint;
            } else {
                let f = step / dist;
                position = Point::new(
                    position.x + (waypoint.x - position.x) * f,
                    position.y + (waypoint.y - position.y) * f,
                );
            }
        }
        let (x, y) = self.bounds.clamp(position.x, position.y);
        let user = &mut self.users[idx];
        user.position = Point::new(x, y);
        user.waypoint = waypoint;
        user.speed = speed;
        self.mobility_rngs[idx] = rng;
    }

    fn draw_services(&mut self, idx: usize, tick: f64) {
        let rng = &mut self.service_rngs[idx];
        let user = &mut self.users[idx];
        for profile in &self.profiles {
            let mean = profile.arrival_rate * tick;
            if mean <= 0.0 {
                continue;
            }
            let count = Poisson::new(mean)
                .expect("positive finite mean")
                .sample(rng) as u64;
            for _ in 0..count {
                user.initiated.push(profile.service_type);
                let demand = profile.initial_demand_bits();
                let merged = demand.is_none()
                    && user
                        .active_services
                        .iter()
                        .any(|s| s.remaining_bits.is_none());
                if !merged {
                    user.active_services.push(ActiveService {
                        service_type: profile.service_type,
                        remaining_bits: demand,
                    });
                }
            }
        }
    }
}

/// Advances every user by one tick. Service initiations are drawn only when
/// `with_services` is set; mobility draws are unaffected either way.
pub fn step_users(population: &mut Population, tick: f64, with_services: bool) -> UserSnapshot {
    advance_users(population, tick, with_services);
    population.snapshot(tick)
}

/// [`step_users`] without building a snapshot.
pub fn advance_users(population: &mut Population, tick: f64, with_services: bool) {
    for idx in 0..population.users.len() {
        population.users[idx].initiated.clear();
        population.move_user(idx, tick);
        if with_services {
            population.draw_services(idx, tick);
        }
    }
    population.tick_count += 1;
}
