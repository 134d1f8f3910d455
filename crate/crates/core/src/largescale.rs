//! Large-scale fading: log-distance path loss, a parabolic two-plane antenna
//! pattern and spatially correlated log-normal shadowing. The result is the
//! per user-cell coupling loss handed to the channel emulator.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::rng::{stage, stream};
use crate::scenario::{AntennaConfig, CellId, PropagationParams, Scenario};
use crate::users::{Point, UserId, UserSnapshot};

/// Gain of a switched-off beam.
pub const INACTIVE_GAIN: f64 = f64::NEG_INFINITY;

/// Wraps an angle difference into `[-180, 180)`.
pub fn wrap_degrees(d: f64) -> f64 {
    (d + 180.0).rem_euclid(360.0) - 180.0
}

/// Antenna gain in dBi towards a direction given as absolute bearing
/// (degrees, same convention as `cfg.azimuth`) and elevation (degrees,
/// negative below the horizon).
pub fn antenna_gain(
    cfg: &AntennaConfig,
    bearing: f64,
    elevation: f64,
    p: &PropagationParams,
) -> f64 {
    if !cfg.active {
        return INACTIVE_GAIN;
    }
    let d_az = wrap_degrees(bearing - cfg.azimuth);
    let d_el = elevation + cfg.downtilt;
    pattern_gain(cfg, d_az, d_el, p)
}

/// Gain for offsets already taken relative to boresight.
pub fn pattern_gain(cfg: &AntennaConfig, d_az: f64, d_el: f64, p: &PropagationParams) -> f64 {
    if !cfg.active {
        return INACTIVE_GAIN;
    }
    let fbr = p.front_back_ratio;
    let horizontal = (12.0 * (d_az / cfg.h_beamwidth).powi(2)).min(fbr);
    let vertical = (12.0 * (d_el / cfg.v_beamwidth).powi(2)).min(fbr);
    p.max_antenna_gain - (horizontal + vertical).min(fbr)
}

/// Log-distance path loss in dB; distances under 1 m are clamped.
pub fn path_loss(d: f64, p: &PropagationParams) -> f64 {
    p.pl_ref + 10.0 * p.pl_exponent * d.max(1.0).log10()
}

const SHADOW_COMPONENTS: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq)]
struct Wave {
    kx: f64,
    ky: f64,
    phase: f64,
}

/// Zero-mean Gaussian shadowing field with exponential spatial correlation,
/// independent per cell.
///
/// Each cell's field is a sum of random plane waves whose wavenumbers follow
/// the 2-D spectrum of `exp(-r / d_corr)`, so across seeds the covariance at
/// separation `r` is exactly `sigma^2 exp(-r / d_corr)`. Evaluation is pure:
/// any position can be queried in any order.
#[derive(Debug, Clone)]
pub struct ShadowField {
    sigma: f64,
    cells: Vec<(CellId, Vec<Wave>)>,
}

impl ShadowField {
    pub fn new(scenario: &Scenario, seed: u64) -> Self {
        let sigma = scenario.propagation.shadow_sigma;
        let corr = scenario.propagation.shadow_corr_dist;
        let cells = scenario
            .cell_ids()
            .into_iter()
            .map(|id| {
                let mut rng = stream(seed, &[stage::SHADOWING, id as u64]);
                let waves = (0..SHADOW_COMPONENTS)
                    .map(|_| {
                        // radial CDF of the spectrum: F(u) = 1 - (1 + u^2)^(-1/2), u = k d
                        let v: f64 = rng.random();
                        let u = ((1.0 - v).powi(-2) - 1.0).sqrt();
                        let k = u / corr;
                        let dir = 2.0 * std::f64::consts::PI * rng.random::<f64>();
                        let phase = 2.0 * std::f64::consts::PI * rng.random::<f64>();
                        Wave {
                            kx: k * dir.cos(),
                            ky: k * dir.sin(),
                            phase,
                        }
                    })
                    .collect();
                (id, waves)
            })
            .collect();
        ShadowField { sigma, cells }
    }

    /// Shadowing in dB at `pos` for `cell`; 0 for unknown cells.
    pub fn sample(&self, pos: Point, cell: CellId) -> f64 {
        if self.sigma == 0.0 {
            return 0.0;
        }
        let Some((_, waves)) = self.cells.iter().find(|(id, _)| *id == cell) else {
            return 0.0;
        };
        let sum: f64 = waves
            .iter()
            .map(|w| (w.kx * pos.x + w.ky * pos.y + w.phase).cos())
            .sum();
        self.sigma * (2.0 / SHADOW_COMPONENTS as f64).sqrt() * sum
    }
}

/// Geometry of one user-cell pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkGeometry {
    pub distance_3d: f64,
    pub bearing: f64,
    pub elevation: f64,
}

/// Bearing is measured counter-clockwise from the +x axis, in degrees.
pub fn link_geometry(
    site_x: f64,
    site_y: f64,
    site_h: f64,
    user: Point,
    ue_height: f64,
) -> LinkGeometry {
    let dx = user.x - site_x;
    let dy = user.y - site_y;
    let d2 = dx.hypot(dy);
    let dz = ue_height - site_h;
    LinkGeometry {
        distance_3d: d2.hypot(dz),
        bearing: dy.atan2(dx).to_degrees(),
        elevation: dz.atan2(d2).to_degrees(),
    }
}

/// Coupling loss matrix, row-major `(user, cell)` in the order of
/// `user_ids` and `cell_ids`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LargeScaleModel {
    pub time: f64,
    pub user_ids: Vec<UserId>,
    pub cell_ids: Vec<CellId>,
    /// dB. For unusable links this holds path loss plus shadowing only.
    pub coupling_loss: Vec<f64>,
    /// False where the cell's beam is switched off.
    pub usable: Vec<bool>,
}

impl LargeScaleModel {
    pub fn index(&self, user: usize, cell: usize) -> usize {
        user * self.cell_ids.len() + cell
    }

    pub fn loss(&self, user: usize, cell: usize) -> f64 {
        self.coupling_loss[self.index(user, cell)]
    }

    pub fn is_usable(&self, user: usize, cell: usize) -> bool {
        self.usable[self.index(user, cell)]
    }
}

pub fn build_large_scale(
    scenario: &Scenario,
    snapshot: &UserSnapshot,
    shadow: &ShadowField,
) -> LargeScaleModel {
    let cell_ids = scenario.cell_ids();
    let cells: Vec<_> = cell_ids
        .iter()
        .map(|&id| scenario.cell(id).expect("id from scenario"))
        .collect();
    let p = &scenario.propagation;
    let rows: Vec<Vec<(f64, bool)>> = snapshot
        .users
        .par_iter()
        .map(|user| {
            cells
                .iter()
                .map(|(site, cell)| {
                    let g = link_geometry(
                        site.position.x,
                        site.position.y,
                        site.position.height,
                        user.position,
                        scenario.ue_height,
                    );
                    let base =
                        path_loss(g.distance_3d, p) + shadow.sample(user.position, cell.cell_id);
                    if cell.antenna.active {
                        (
                            base - antenna_gain(&cell.antenna, g.bearing, g.elevation, p),
                            true,
                        )
                    } else {
                        (base, false)
                    }
                })
                .collect()
        })
        .collect();
    let (coupling_loss, usable) = rows.into_iter().flatten().unzip();
    LargeScaleModel {
        time: snapshot.time,
        user_ids: snapshot.users.iter().map(|u| u.user_id).collect(),
        cell_ids,
        coupling_loss,
        usable,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::demo_scenario;
    use proptest::prelude::*;

    fn params() -> PropagationParams {
        PropagationParams {
            pl_ref: 40.0,
            pl_exponent: 3.7,
            shadow_sigma: 8.0,
            shadow_corr_dist: 50.0,
            max_antenna_gain: 8.0,
            front_back_ratio: 30.0,
        }
    }

    fn beam(h: f64, v: f64) -> AntennaConfig {
        AntennaConfig {
            h_beamwidth: h,
            v_beamwidth: v,
            azimuth: 90.0,
            downtilt: 6.0,
            active: true,
        }
    }

    #[test]
    fn boresight_gain_is_max() {
        let cfg = beam(65.0, 10.0);
        assert_eq!(antenna_gain(&cfg, 90.0, -6.0, &params()), 8.0);
    }

    #[test]
    fn half_power_offset_costs_twelve_db() {
        let cfg = beam(65.0, 10.0);
        let g = antenna_gain(&cfg, 90.0 + 65.0, -6.0, &params());
        assert!((g - (-4.0)).abs() < 1e-12);
    }

    #[test]
    fn back_lobe_saturates_at_front_back_ratio() {
        let cfg = beam(10.0, 10.0);
        assert_eq!(antenna_gain(&cfg, 270.0, -6.0, &params()), 8.0 - 30.0);
    }

    #[test]
    fn inactive_beam_is_sentinel() {
        let cfg = AntennaConfig {
            active: false,
            ..beam(65.0, 10.0)
        };
        assert_eq!(antenna_gain(&cfg, 90.0, 0.0, &params()), f64::NEG_INFINITY);
    }

    #[test]
    fn azimuth_offsets_wrap() {
        assert_eq!(wrap_degrees(350.0), -10.0);
        assert_eq!(wrap_degrees(-190.0), 170.0);
        let cfg = AntennaConfig {
            azimuth: 355.0,
            ..beam(65.0, 10.0)
        };
        let a = antenna_gain(&cfg, 5.0, -6.0, &params());
        let b = antenna_gain(&cfg, 345.0, -6.0, &params());
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn path_loss_identities() {
        let p = params();
        assert_eq!(path_loss(1.0, &p), 40.0);
        assert_eq!(path_loss(0.2, &p), 40.0);
        let p2 = PropagationParams {
            pl_exponent: 2.0,
            ..p.clone()
        };
        assert!((path_loss(10.0, &p2) - 60.0).abs() < 1e-12);
        let step = path_loss(200.0, &p) - path_loss(100.0, &p);
        assert!((step - 11.1373).abs() < 1e-3);
    }

    #[test]
    fn zero_sigma_field_is_flat() {
        let mut s = demo_scenario(3, 1, 500.0);
        s.propagation.shadow_sigma = 0.0;
        let f = ShadowField::new(&s, 5);
        for x in [-300.0, 0.0, 123.4] {
            assert_eq!(f.sample(Point::new(x, x / 2.0), 1), 0.0);
        }
    }

    #[test]
    fn inactive_cells_flagged() {
        let mut s = demo_scenario(2, 3, 500.0);
        for c in s.sites.iter_mut().flat_map(|s| s.cells.iter_mut()) {
            c.antenna.active = false;
        }
        let pop = crate::users::init_users(&s, 4, Default::default(), 1).unwrap();
        let ls = build_large_scale(&s, &pop.snapshot(1.0), &ShadowField::new(&s, 1));
        assert_eq!(ls.usable.len(), 4 * 6);
        assert!(ls.usable.iter().all(|u| !u));
        assert!(ls.coupling_loss.iter().all(|l| l.is_finite()));
    }

    proptest! {
        #[test]
        fn attenuation_bounded_by_fbr(az in 0.0f64..360.0, el in -90.0f64..90.0,
                                      h in 1.0f64..180.0, v in 1.0f64..180.0, tilt in -90.0f64..90.0) {
            let p = params();
            let cfg = AntennaConfig { h_beamwidth: h, v_beamwidth: v, azimuth: 0.0, downtilt: tilt, active: true };
            let g = antenna_gain(&cfg, az, el, &p);
            prop_assert!(g <= p.max_antenna_gain);
            prop_assert!(g >= p.max_antenna_gain - p.front_back_ratio);
        }

        #[test]
        fn loss_monotone_along_boresight(d1 in 1.0f64..5000.0, extra in 0.0f64..5000.0) {
            let mut s = demo_scenario(1, 1, 500.0);
            s.propagation.shadow_sigma = 0.0;
            s.map_bounds = crate::scenario::Rect { x_min: -20000.0, y_min: -20000.0, x_max: 20000.0, y_max: 20000.0 };
            let cell = &mut s.sites[0].cells[0];
            cell.antenna.azimuth = 0.0;
            cell.antenna.downtilt = 0.0;
            s.ue_height = s.sites[0].position.height;
            let field = ShadowField::new(&s, 0);
            let at = |x: f64| {
                let pop = crate::users::UserSnapshot { tick_index: 0, time: 0.0, users: vec![crate::users::UserState {
                    user_id: 0, position: Point::new(x, 0.0), waypoint: Point::new(x, 0.0), home: Point::new(x, 0.0),
                    speed: 0.0, active_services: vec![], initiated: vec![] }] };
                build_large_scale(&s, &pop, &field).coupling_loss[0]
            };
            prop_assert!(at(d1) <= at(d1 + extra));
        }
    }
}
