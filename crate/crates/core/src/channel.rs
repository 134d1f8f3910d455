//! Small-scale fading and RE-level frequency responses.
//!
//! A link's multipath is a tapped delay line with Rayleigh tap gains per
//! (tx port, rx port). Gains evolve between ticks by a scalar AR(1) process.
//! [`freq_response`] evaluates every subcarrier of the RE grid and
//! [`apply_large_scale`] folds in the coupling loss from the large-scale model.

use num_complex::{Complex32, Complex64};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::largescale::LargeScaleModel;
use crate::rng::{stage, stream};
use crate::scenario::{CellId, Scenario, SUBCARRIER_SPACING_HZ};
use crate::users::UserId;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChannelError {
    #[error("large-scale model and RE grid index sets differ at link {index}")]
    IndexMismatch { index: usize },
    #[error("RE dataset decode failed: {0}")]
    Decode(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tap {
    /// Seconds.
    pub delay: f64,
    /// Linear, normalized to sum 1 across taps.
    pub power: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TapProfile {
    pub taps: Vec<Tap>,
    /// Maximum Doppler shift, Hz.
    pub doppler: f64,
}

impl Default for TapProfile {
    fn default() -> Self {
        TapProfile {
            taps: vec![
                Tap {
                    delay: 0.0,
                    power: 0.7,
                },
                Tap {
                    delay: 100e-9,
                    power: 0.2,
                },
                Tap {
                    delay: 300e-9,
                    power: 0.1,
                },
            ],
            doppler: 0.1,
        }
    }
}

impl TapProfile {
    pub fn single_tap(delay: f64) -> Self {
        TapProfile {
            taps: vec![Tap { delay, power: 1.0 }],
            doppler: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.taps.is_empty() {
            return Err("at least one tap required".into());
        }
        if self
            .taps
            .iter()
            .any(|t| !(t.delay >= 0.0 && t.delay.is_finite()))
        {
            return Err("tap delays must be finite and non-negative".into());
        }
        if self.taps.windows(2).any(|w| !(w[0].delay < w[1].delay)) {
            return Err("tap delays must be strictly increasing".into());
        }
        if self
            .taps
            .iter()
            .any(|t| !(t.power > 0.0 && t.power.is_finite()))
        {
            return Err("tap powers must be positive".into());
        }
        if !(self.doppler >= 0.0 && self.doppler.is_finite()) {
            return Err("doppler must be non-negative".into());
        }
        Ok(())
    }

    pub fn normalize(&mut self) {
        let total: f64 = self.taps.iter().map(|t| t.power).sum();
        // already-normalized profiles are left bit-identical
        if total > 0.0 && (total - 1.0).abs() > 1e-12 {
            for t in &mut self.taps {
                t.power /= total;
            }
        }
    }

    /// AR(1) coefficient between consecutive ticks.
    pub fn ar_coefficient(&self, tick: f64) -> f64 {
        (-(std::f64::consts::PI * self.doppler * tick).powi(2))
            .exp()
            .clamp(0.0, 1.0)
    }

    /// Rounds delays to multiples of `period`, merging taps that collide.
    /// On this grid the subcarrier responses of distinct taps are orthogonal
    /// over the full band.
    pub fn on_sample_grid(&self, period: f64) -> TapProfile {
        let mut taps: Vec<Tap> = Vec::with_capacity(self.taps.len());
        for t in &self.taps {
            let delay = (t.delay / period).round() * period;
            match taps.last_mut() {
                Some(last) if last.delay == delay => last.power += t.power,
                _ => taps.push(Tap {
                    delay,
                    power: t.power,
                }),
            }
        }
        TapProfile {
            taps,
            doppler: self.doppler,
        }
    }
}

/// Sample period of an `num_re`-point grid at the fixed subcarrier spacing.
pub fn sample_period(num_re: usize) -> f64 {
    1.0 / (num_re as f64 * SUBCARRIER_SPACING_HZ)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LinkId {
    pub user_id: UserId,
    pub cell_id: CellId,
}

/// Tap gains of one link, laid out `[tap][tx][rx]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkGains {
    pub link: LinkId,
    pub gains: Vec<Complex64>,
}

impl LinkGains {
    /// Sum over taps of the port-averaged tap power.
    pub fn mean_port_power(&self, ports: usize) -> f64 {
        self.gains.iter().map(|g| g.norm_sqr()).sum::<f64>() / ports as f64
    }
}

#[derive(Debug, Clone)]
pub struct SmallScaleRealization {
    pub profile: TapProfile,
    pub tx_ports: usize,
    pub rx_ports: usize,
    seed: u64,
    tick_index: u64,
    pub links: Vec<LinkGains>,
}

fn complex_gaussian<R: Rng>(rng: &mut R, variance: f64) -> Complex64 {
    let s = (variance / 2.0).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(re * s, im * s)
}

fn draw_link(
    profile: &TapProfile,
    ports: usize,
    seed: u64,
    tick: u64,
    link: LinkId,
) -> Vec<Complex64> {
    let mut rng = stream(
        seed,
        &[
            stage::SMALL_SCALE,
            tick,
            link.user_id as u64,
            link.cell_id as u64,
        ],
    );
    profile
        .taps
        .iter()
        .flat_map(|t| std::iter::repeat_n(t.power, ports))
        .map(|p| complex_gaussian(&mut rng, p))
        .collect()
}

/// Independent Rayleigh draw for every link. Each link's stream depends only
/// on `(seed, tick, user, cell)`.
pub fn draw_small_scale(
    profile: &TapProfile,
    links: &[LinkId],
    tx_ports: usize,
    rx_ports: usize,
    seed: u64,
) -> SmallScaleRealization {
    let ports = tx_ports * rx_ports;
    SmallScaleRealization {
        profile: profile.clone(),
        tx_ports,
        rx_ports,
        seed,
        tick_index: 0,
        links: links
            .iter()
            .map(|&link| LinkGains {
                link,
                gains: draw_link(profile, ports, seed, 0, link),
            })
            .collect(),
    }
}

impl SmallScaleRealization {
    pub fn tick_index(&self) -> u64 {
        self.tick_index
    }

    /// One AR(1) step: `g' = rho g + sqrt(1 - rho^2) w`.
    pub fn advance(&mut self, tick: f64) {
        let rho = self.profile.ar_coefficient(tick);
        let innovation = (1.0 - rho * rho).max(0.0).sqrt();
        self.tick_index += 1;
        let ports = self.tx_ports * self.rx_ports;
        let (profile, seed, t) = (&self.profile, self.seed, self.tick_index);
        self.links.par_iter_mut().for_each(|l| {
            if innovation == 0.0 {
                return;
            }
            let w = draw_link(profile, ports, seed, t, l.link);
            for (g, w) in l.gains.iter_mut().zip(w) {
                *g = *g * rho + w * innovation;
            }
        });
    }
}

/// Per-link frequency response, laid out `(re, tx, rx)` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkResponse {
    pub link: LinkId,
    pub h: Vec<Complex64>,
}

impl LinkResponse {
    /// Mean of `|H|^2` over every RE and port pair.
    pub fn mean_power(&self) -> f64 {
        let mut sum = 0.0;
        for v in &self.h {
            sum += v.norm_sqr();
        }
        sum / self.h.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReGridResponse {
    pub num_re: usize,
    pub tx_ports: usize,
    pub rx_ports: usize,
    pub links: Vec<LinkResponse>,
}

impl ReGridResponse {
    pub fn entries_per_link(&self) -> usize {
        self.num_re * self.tx_ports * self.rx_ports
    }
}

fn phasor_table(taps: &[Tap], num_re: usize) -> Vec<Complex64> {
    (0..num_re)
        .flat_map(|k| {
            let f = k as f64 * SUBCARRIER_SPACING_HZ;
            taps.iter()
                .map(move |t| Complex64::from_polar(1.0, -2.0 * std::f64::consts::PI * f * t.delay))
        })
        .collect()
}

/// One RE of one link: `row[p] = sum over taps of g[tap][p] * phasor[tap]`.
fn fill_row(row: &mut [Complex64], gains: &[Complex64], phasors: &[Complex64]) {
    let ports = row.len();
    for (tap, ph) in phasors.iter().enumerate() {
        let g = &gains[tap * ports..(tap + 1) * ports];
        for (out, gain) in row.iter_mut().zip(g) {
            *out += gain * ph;
        }
    }
}

fn link_scale(ls: &LargeScaleModel, i: usize) -> f64 {
    if ls.usable[i] {
        10f64.powf(-ls.coupling_loss[i] / 10.0).sqrt()
    } else {
        0.0
    }
}

fn check_alignment(ls: &LargeScaleModel, links: &[LinkId]) -> Result<(), ChannelError> {
    let n_cells = ls.cell_ids.len();
    if links.len() != ls.coupling_loss.len() {
        return Err(ChannelError::IndexMismatch {
            index: links.len().min(ls.coupling_loss.len()),
        });
    }
    for (i, l) in links.iter().enumerate() {
        let expect = LinkId {
            user_id: ls.user_ids[i / n_cells],
            cell_id: ls.cell_ids[i % n_cells],
        };
        if *l != expect {
            return Err(ChannelError::IndexMismatch { index: i });
        }
    }
    Ok(())
}

/// `H[k] = sum_l g_l exp(-j 2 pi f_k tau_l)` with `f_k = k * 15 kHz`.
pub fn freq_response(realization: &SmallScaleRealization, scenario: &Scenario) -> ReGridResponse {
    let num_re = scenario.num_re();
    let ports = realization.tx_ports * realization.rx_ports;
    let n_taps = realization.profile.taps.len();
    let phasors = phasor_table(&realization.profile.taps, num_re);
    let links = realization
        .links
        .par_iter()
        .map(|l| {
            let mut h = vec![Complex64::new(0.0, 0.0); num_re * ports];
            for k in 0..num_re {
                fill_row(
                    &mut h[k * ports..(k + 1) * ports],
                    &l.gains,
                    &phasors[k * n_taps..(k + 1) * n_taps],
                );
            }
            LinkResponse { link: l.link, h }
        })
        .collect();
    ReGridResponse {
        num_re,
        tx_ports: realization.tx_ports,
        rx_ports: realization.rx_ports,
        links,
    }
}

/// Per-link mean `|H|^2` after large-scale scaling, without keeping the grid.
/// Bit-identical to `apply_large_scale(ls, freq_response(..))` followed by
/// [`LinkResponse::mean_power`].
pub fn link_mean_powers(
    realization: &SmallScaleRealization,
    scenario: &Scenario,
    ls: &LargeScaleModel,
) -> Result<Vec<f64>, ChannelError> {
    let ids: Vec<LinkId> = realization.links.iter().map(|l| l.link).collect();
    check_alignment(ls, &ids)?;
    let num_re = scenario.num_re();
    let ports = realization.tx_ports * realization.rx_ports;
    let n_taps = realization.profile.taps.len();
    let phasors = phasor_table(&realization.profile.taps, num_re);
    Ok(realization
        .links
        .par_iter()
        .enumerate()
        .map(|(i, l)| {
            let scale = link_scale(ls, i);
            let mut row = vec![Complex64::new(0.0, 0.0); ports];
            let mut sum = 0.0;
            for k in 0..num_re {
                row.fill(Complex64::new(0.0, 0.0));
                fill_row(&mut row, &l.gains, &phasors[k * n_taps..(k + 1) * n_taps]);
                for v in row.iter_mut() {
                    *v *= scale;
                    sum += v.norm_sqr();
                }
            }
            sum / (num_re * ports) as f64
        })
        .collect())
}

/// Scales each link by `sqrt(10^(-CL/10))`; unusable links become zero.
pub fn apply_large_scale(
    ls: &LargeScaleModel,
    mut grid: ReGridResponse,
) -> Result<ReGridResponse, ChannelError> {
    let ids: Vec<LinkId> = grid.links.iter().map(|l| l.link).collect();
    check_alignment(ls, &ids)?;
    grid.links.par_iter_mut().enumerate().for_each(|(i, l)| {
        let scale = link_scale(ls, i);
        for v in l.h.iter_mut() {
            *v *= scale;
        }
    });
    Ok(grid)
}

/// Binary RE dataset: fixed little-endian header followed by interleaved
/// complex float32 samples, row-major `(sample, re, tx, rx)`.
///
/// | offset | type | field |
/// |---|---|---|
/// | 0 | `[u8; 4]` | magic `NCRE` |
/// | 4 | u32 | format version (1) |
/// | 8 | u32 | number of samples |
/// | 12 | u32 | `num_re` |
/// | 16 | u32 | tx ports |
/// | 20 | u32 | rx ports |
/// | 24 | f32 pairs | `(re, im)` |
pub mod export {
    use super::*;

    pub const MAGIC: &[u8; 4] = b"NCRE";
    pub const VERSION: u32 = 1;
    pub const HEADER_LEN: usize = 24;

    #[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
    pub struct ReShape {
        pub samples: usize,
        pub num_re: usize,
        pub tx_ports: usize,
        pub rx_ports: usize,
    }

    impl ReShape {
        pub fn entries_per_sample(&self) -> usize {
            self.num_re * self.tx_ports * self.rx_ports
        }

        pub fn payload_len(&self) -> usize {
            HEADER_LEN + self.samples * self.entries_per_sample() * 8
        }
    }

    pub fn encode<'a>(
        shape: ReShape,
        samples: impl IntoIterator<Item = &'a [Complex64]>,
    ) -> Vec<u8> {
        let mut out = Vec::with_capacity(shape.payload_len());
        out.extend_from_slice(MAGIC);
        for v in [
            VERSION,
            shape.samples as u32,
            shape.num_re as u32,
            shape.tx_ports as u32,
            shape.rx_ports as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let mut count = 0;
        for s in samples {
            assert_eq!(s.len(), shape.entries_per_sample(), "sample shape");
            for v in s {
                out.extend_from_slice(&(v.re as f32).to_le_bytes());
                out.extend_from_slice(&(v.im as f32).to_le_bytes());
            }
            count += 1;
        }
        assert_eq!(count, shape.samples, "sample count");
        out
    }

    fn read_u32(bytes: &[u8], at: usize) -> u32 {
        u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
    }

    pub fn decode_header(bytes: &[u8]) -> Result<ReShape, ChannelError> {
        if bytes.len() < HEADER_LEN {
            return Err(ChannelError::Decode("truncated header".into()));
        }
        if &bytes[..4] != MAGIC {
            return Err(ChannelError::Decode("bad magic".into()));
        }
        let version = read_u32(bytes, 4);
        if version != VERSION {
            return Err(ChannelError::Decode(format!(
                "unsupported version {version}"
            )));
        }
        Ok(ReShape {
            samples: read_u32(bytes, 8) as usize,
            num_re: read_u32(bytes, 12) as usize,
            tx_ports: read_u32(bytes, 16) as usize,
            rx_ports: read_u32(bytes, 20) as usize,
        })
    }

    /// Decodes a whole payload; fails without partial output on any size mismatch.
    pub fn decode(bytes: &[u8]) -> Result<(ReShape, Vec<Complex32>), ChannelError> {
        let shape = decode_header(bytes)?;
        if bytes.len() != shape.payload_len() {
            return Err(ChannelError::Decode(format!(
                "payload is {} bytes, header declares {}",
                bytes.len(),
                shape.payload_len()
            )));
        }
        let data = bytes[HEADER_LEN..]
            .chunks_exact(8)
            .map(|c| {
                Complex32::new(
                    f32::from_le_bytes(c[..4].try_into().expect("4 bytes")),
                    f32::from_le_bytes(c[4..].try_into().expect("4 bytes")),
                )
            })
            .collect();
        Ok((shape, data))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::demo_scenario;

    fn links(n: u32) -> Vec<LinkId> {
        (0..n)
            .map(|u| LinkId {
                user_id: u,
                cell_id: 0,
            })
            .collect()
    }

    #[test]
    fn single_tap_unit_power() {
        let profile = TapProfile::single_tap(0.0);
        let r = draw_small_scale(&profile, &links(100_000), 1, 1, 11);
        let mean: f64 = r.links.iter().map(|l| l.gains[0].norm_sqr()).sum::<f64>() / 1e5;
        assert!((mean - 1.0).abs() < 0.03, "mean {mean}");
    }

    #[test]
    fn zero_doppler_freezes() {
        let profile = TapProfile {
            doppler: 0.0,
            ..TapProfile::default()
        };
        let mut r = draw_small_scale(&profile, &links(5), 4, 2, 3);
        let before: Vec<_> = r.links.iter().map(|l| l.gains.clone()).collect();
        for _ in 0..3 {
            r.advance(1.0);
        }
        let after: Vec<_> = r.links.iter().map(|l| l.gains.clone()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn draws_are_seeded() {
        let p = TapProfile::default();
        let a = draw_small_scale(&p, &links(4), 4, 2, 8);
        let b = draw_small_scale(&p, &links(4), 4, 2, 8);
        assert_eq!(a.links, b.links);
        let mut a2 = a.clone();
        let mut b2 = b.clone();
        a2.advance(1.0);
        b2.advance(1.0);
        assert_eq!(a2.links, b2.links);
        assert_ne!(a2.links, a.links);
    }

    #[test]
    fn ar_coefficient_range() {
        let p = TapProfile {
            doppler: 0.0,
            ..TapProfile::default()
        };
        assert_eq!(p.ar_coefficient(1.0), 1.0);
        let p = TapProfile {
            doppler: 50.0,
            ..TapProfile::default()
        };
        assert!(p.ar_coefficient(1.0) < 1e-12);
    }

    #[test]
    fn flat_channel_for_zero_delay() {
        let s = demo_scenario(1, 1, 500.0);
        let mut r = draw_small_scale(&TapProfile::single_tap(0.0), &links(1), 1, 1, 0);
        r.links[0].gains[0] = Complex64::new(1.0, 0.0);
        let grid = freq_response(&r, &s);
        assert_eq!(grid.links[0].h.len(), 624);
        assert!(grid.links[0]
            .h
            .iter()
            .all(|&v| v == Complex64::new(1.0, 0.0)));
    }

    #[test]
    fn single_tap_magnitude_constant() {
        let s = demo_scenario(1, 1, 500.0);
        let tau = 1.0 / (2.0 * SUBCARRIER_SPACING_HZ * s.num_re() as f64);
        let mut r = draw_small_scale(&TapProfile::single_tap(tau), &links(1), 1, 1, 0);
        r.links[0].gains[0] = Complex64::new(1.0, 0.0);
        let grid = freq_response(&r, &s);
        assert!(grid.links[0]
            .h
            .iter()
            .all(|v| (v.norm() - 1.0).abs() < 1e-12));
    }

    #[test]
    fn sample_grid_merges_colliding_taps() {
        let p = TapProfile {
            taps: vec![
                Tap {
                    delay: 0.0,
                    power: 0.5,
                },
                Tap {
                    delay: 10e-9,
                    power: 0.3,
                },
                Tap {
                    delay: 300e-9,
                    power: 0.2,
                },
            ],
            doppler: 0.0,
        };
        let q = p.on_sample_grid(sample_period(624));
        assert_eq!(q.taps.len(), 2);
        assert!((q.taps[0].power - 0.8).abs() < 1e-15);
        q.validate().unwrap();
    }

    #[test]
    fn index_mismatch_detected() {
        let s = demo_scenario(1, 1, 500.0);
        let r = draw_small_scale(&TapProfile::default(), &links(2), 1, 1, 0);
        let grid = freq_response(&r, &s);
        let ls = LargeScaleModel {
            time: 0.0,
            user_ids: vec![0, 5],
            cell_ids: vec![0],
            coupling_loss: vec![0.0, 0.0],
            usable: vec![true, true],
        };
        assert_eq!(
            apply_large_scale(&ls, grid).unwrap_err(),
            ChannelError::IndexMismatch { index: 1 }
        );
    }

    #[test]
    fn large_scale_scaling() {
        let s = demo_scenario(1, 1, 500.0);
        let r = draw_small_scale(&TapProfile::default(), &links(3), 2, 2, 4);
        let grid = freq_response(&r, &s);
        let ls = LargeScaleModel {
            time: 0.0,
            user_ids: vec![0, 1, 2],
            cell_ids: vec![0],
            coupling_loss: vec![0.0, 20.0, 5.0],
            usable: vec![true, true, false],
        };
        let out = apply_large_scale(&ls, grid.clone()).unwrap();
        assert_eq!(out.links[0], grid.links[0]);
        let ratio = out.links[1].mean_power() / grid.links[1].mean_power();
        assert!((ratio - 0.01).abs() < 1e-12);
        assert!(out.links[2]
            .h
            .iter()
            .all(|v| *v == Complex64::new(0.0, 0.0)));
    }

    #[test]
    fn export_header_and_truncation() {
        let h = vec![Complex64::new(0.5, -0.25); 6];
        let shape = export::ReShape {
            samples: 1,
            num_re: 3,
            tx_ports: 2,
            rx_ports: 1,
        };
        let bytes = export::encode(shape, [h.as_slice()]);
        assert_eq!(bytes.len(), 24 + 6 * 8);
        assert_eq!(&bytes[..4], b"NCRE");
        let (back, data) = export::decode(&bytes).unwrap();
        assert_eq!(back, shape);
        assert_eq!(data[0], Complex32::new(0.5, -0.25));
        assert!(export::decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(export::decode(&bad).is_err());
    }
}
