//! One line per acceptance criterion. Runs as a plain binary (no libtest
//! harness) so the output is the report itself.

use std::cell::Cell;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, ensure, Result};
use nalgebra::DMatrix;
use netcomb_core::channel::{
    apply_large_scale, draw_small_scale, freq_response, sample_period, LinkGains, LinkId,
    LinkResponse, ReGridResponse, TapProfile,
};
use netcomb_core::combined::{
    run, run_coverage, run_link_channel, run_protocol_stack, LinkSubset, RunControl, SimMode,
    SimOutput, SimRequest,
};
use netcomb_core::csi::{
    extract_characteristic, generate_or_fetch, generate_or_fetch_with, nmse, system_verify,
    CsiDatasetParams, IdentityCodec, NullCodec, UniformQuantizer,
};
use netcomb_core::largescale::{LargeScaleModel, ShadowField};
use netcomb_core::phy::{measure, schedule_and_aggregate};
use netcomb_core::rl::{Action, AntennaEnv, EnvError};
use netcomb_core::scenario::{demo_scenario, Scenario, ServiceProfile, ServiceType};
use netcomb_core::store::{sha256_hex, DatasetStore};
use netcomb_core::traffic::{
    event_bins, forecast_metrics, synthesize_event, topk_cells, CellCountSeries, EventSpec,
    EventType, TopKCriterion,
};
use netcomb_core::users::{
    init_users, step_users, ActiveService, MobilityParams, Point, UserSnapshot, UserState,
};
use netcomb_service::{spawn, ServiceConfig};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

fn request(
    mode: SimMode,
    sites: usize,
    sectors: usize,
    n_users: usize,
    duration: f64,
) -> SimRequest {
    SimRequest {
        mode,
        scenario: demo_scenario(sites, sectors, 500.0),
        antenna_overrides: vec![],
        n_users,
        mobility: MobilityParams::default(),
        duration,
        seed: 424242,
        link_subset: LinkSubset::All,
    }
}

fn csi_params(n_users: usize, seed: u64, samples_per_user: usize) -> CsiDatasetParams {
    CsiDatasetParams {
        scenario: demo_scenario(1, 3, 500.0),
        n_users,
        mobility: MobilityParams::default(),
        seed,
        samples_per_user,
        subband_size: 48,
    }
}

fn temp_store() -> Result<(tempfile::TempDir, DatasetStore)> {
    let dir = tempfile::tempdir()?;
    let store = DatasetStore::open(dir.path())?;
    Ok((dir, store))
}

fn determinism() -> Result<()> {
    let started = Instant::now();
    for mode in [
        SimMode::ProtocolStack,
        SimMode::Coverage,
        SimMode::LinkChannel,
    ] {
        let req = request(mode, 1, 3, 20, 10.0);
        let a = run(&req, &RunControl::default())?;
        let b = run(&req, &RunControl::default())?;
        ensure!(a == b, "{mode:?} differs between runs");
        ensure!(
            serde_json::to_vec(&a)? == serde_json::to_vec(&b)?,
            "{mode:?} json differs"
        );
    }

    let episode = || -> Result<Vec<String>> {
        let mut env = AntennaEnv::new(request(SimMode::ProtocolStack, 1, 3, 20, 1.0))?;
        let mut out = vec![serde_json::to_string(&env.reset(10, 5)?)?];
        let action = Action::from_scenario(&env.request().scenario);
        for _ in 0..10 {
            out.push(serde_json::to_string(&env.step(&action)?)?);
        }
        Ok(out)
    };
    ensure!(episode()? == episode()?, "env episode differs");

    let params = csi_params(20, 424242, 10);
    let codec = UniformQuantizer { bits: 4 };
    let (_da, store_a) = temp_store()?;
    let (_db, store_b) = temp_store()?;
    let a = generate_or_fetch(&params, &store_a)?;
    let b = generate_or_fetch(&params, &store_b)?;
    ensure!(a.key == b.key && a.payload == b.payload && a.samples == b.samples);
    let report = system_verify(&a, &codec)?;
    ensure!(
        report == system_verify(&b, &codec)?,
        "verify report differs"
    );
    store_a.remove(&a.key)?;
    let c = generate_or_fetch(&params, &store_a)?;
    ensure!(!c.cache_hit && c.payload == a.payload && c.samples == a.samples);
    ensure!(
        system_verify(&c, &codec)? == report,
        "report differs after purge"
    );

    let s = demo_scenario(1, 3, 500.0);
    let spec = EventSpec::new(EventType::Esports, Point::new(0.0, 0.0), 1000.0, 1300.0);
    ensure!(synthesize_event(&spec, &s, 20, 9)? == synthesize_event(&spec, &s, 20, 9)?);

    let elapsed = started.elapsed();
    ensure!(elapsed.as_secs() < 60, "took {elapsed:?}");
    Ok(())
}

fn coverage_projection() -> Result<()> {
    let ps = request(SimMode::ProtocolStack, 7, 1, 100, 5.0);
    let cov = SimRequest {
        mode: SimMode::Coverage,
        ..ps.clone()
    };
    ensure!(ps.scenario.num_cells() == 7);
    let SimOutput::ProtocolStack(a) = run_protocol_stack(&ps)?.output else {
        bail!("protocol-stack output expected")
    };
    let SimOutput::Coverage(b) = run_coverage(&cov)?.output else {
        bail!("coverage output expected")
    };
    ensure!(a.len() == 5 && b.len() == 5);
    for (x, y) in a.iter().zip(&b) {
        ensure!(x.tick_index == y.tick_index && x.coverage_ratio == y.coverage_ratio);
        ensure!(x.users.len() == 100 && y.users.len() == 100);
        for (u, m) in x.users.iter().zip(&y.users) {
            ensure!(u.user_id == m.user_id && u.serving_cell == m.serving_cell);
            ensure!(
                u.rsrp.map(f64::to_bits) == m.rsrp.map(f64::to_bits)
                    && u.sinr.map(f64::to_bits) == m.sinr.map(f64::to_bits),
                "tick {} user {}",
                x.tick_index,
                u.user_id
            );
        }
    }
    Ok(())
}

fn links(users: u32, cells: u32) -> Vec<LinkId> {
    (0..users)
        .flat_map(|u| {
            (0..cells).map(move |c| LinkId {
                user_id: u,
                cell_id: c,
            })
        })
        .collect()
}

fn channel_energy() -> Result<()> {
    let scenario = demo_scenario(1, 4, 500.0);
    let ports = scenario.tx_ports * scenario.rx_ports;
    let profile = scenario
        .tap_profile
        .on_sample_grid(sample_period(scenario.num_re()));
    let ids = links(256, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let ls = LargeScaleModel {
        time: 0.0,
        user_ids: (0..256).collect(),
        cell_ids: (0..4).collect(),
        coupling_loss: (0..ids.len())
            .map(|_| rng.random_range(40.0..180.0))
            .collect(),
        usable: vec![true; ids.len()],
    };
    let ss = draw_small_scale(&profile, &ids, scenario.tx_ports, scenario.rx_ports, 5);
    let grid = apply_large_scale(&ls, freq_response(&ss, &scenario))?;
    let mut worst = 0.0f64;
    for (i, (resp, gains)) in grid.links.iter().zip(&ss.links).enumerate() {
        let ratio = resp.mean_power() / gains.mean_port_power(ports);
        worst = worst.max((ratio / 10f64.powf(-ls.coupling_loss[i] / 10.0) - 1.0).abs());
    }
    ensure!(
        worst < 1e-9,
        "{} links, worst relative deviation {worst:e}",
        ids.len()
    );

    let mut ss = draw_small_scale(
        &TapProfile::single_tap(0.0),
        &links(1, 1),
        scenario.tx_ports,
        scenario.rx_ports,
        1,
    );
    ss.links = vec![LinkGains {
        link: LinkId {
            user_id: 0,
            cell_id: 0,
        },
        gains: vec![Complex64::new(1.0, 0.0); ports],
    }];
    let single = freq_response(&ss, &scenario);
    ensure!(
        single.links[0].h.iter().all(|h| h.norm() == 1.0),
        "single tap response is not flat"
    );
    Ok(())
}

// PHY oracle pieces, written out from the formulas
fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * b.abs().max(1e-300)
}
fn noise_mw(nf: f64) -> f64 {
    10f64.powf((-174.0 + 10.0 * 15e3f64.log10() + nf) / 10.0)
}
fn shannon(sinr_lin: f64, bw: f64) -> f64 {
    bw * (1.0 + sinr_lin).log2().min(7.4)
}
fn bler(sinr_db: f64) -> f64 {
    1.0 / (1.0 + sinr_db.exp())
}

fn flat_grid(scenario: &Scenario, amp: &[Vec<Complex64>]) -> ReGridResponse {
    let entries = scenario.num_re() * scenario.tx_ports * scenario.rx_ports;
    ReGridResponse {
        num_re: scenario.num_re(),
        tx_ports: scenario.tx_ports,
        rx_ports: scenario.rx_ports,
        links: amp
            .iter()
            .enumerate()
            .flat_map(|(u, row)| {
                row.iter().enumerate().map(move |(c, &a)| LinkResponse {
                    link: LinkId {
                        user_id: u as u32,
                        cell_id: c as u32,
                    },
                    h: vec![a; entries],
                })
            })
            .collect(),
    }
}

fn phy_user(id: u32, demand: Option<f64>) -> UserState {
    UserState {
        user_id: id,
        position: Point::new(0.0, 0.0),
        waypoint: Point::new(0.0, 0.0),
        home: Point::new(0.0, 0.0),
        speed: 0.0,
        active_services: vec![ActiveService {
            service_type: if demand.is_some() {
                ServiceType::FileDownload
            } else {
                ServiceType::FullBuffer
            },
            remaining_bits: demand,
        }],
        initiated: vec![],
    }
}

fn snapshot(users: Vec<UserState>) -> UserSnapshot {
    UserSnapshot {
        tick_index: 1,
        time: 1.0,
        users,
    }
}

fn phy_oracle() -> Result<()> {
    let mut scenario = demo_scenario(1, 2, 500.0);
    scenario.num_rbs = 51;
    let amp = vec![
        vec![Complex64::new(3e-6, 1e-6), Complex64::new(1e-6, 0.0)],
        vec![Complex64::new(0.0, 2e-6), Complex64::new(5e-7, 5e-7)],
        vec![Complex64::new(1e-7, 0.0), Complex64::new(0.0, -4e-6)],
    ];
    let m = measure(&flat_grid(&scenario, &amp), &scenario);
    let n = noise_mw(scenario.noise_figure);
    let mut sinr_lin = [0.0; 3];
    for u in 0..3 {
        let rsrp: Vec<f64> = amp[u]
            .iter()
            .map(|a| 18.0 + 10.0 * a.norm_sqr().log10())
            .collect();
        let s = if rsrp[0] >= rsrp[1] { 0 } else { 1 };
        sinr_lin[u] = 10f64.powf(rsrp[s] / 10.0) / (10f64.powf(rsrp[1 - s] / 10.0) + n);
        ensure!(m[u].serving_cell == Some(s as u32), "user {u} serving");
        ensure!(
            close(m[u].rsrp.unwrap_or(f64::NAN), rsrp[s]),
            "user {u} rsrp"
        );
        ensure!(
            close(
                10f64.powf(m[u].sinr.unwrap_or(f64::NAN) / 10.0),
                sinr_lin[u]
            ),
            "user {u} sinr"
        );
    }
    let snap = snapshot(vec![
        phy_user(0, None),
        phy_user(1, Some(1e12)),
        phy_user(2, Some(1000.0)),
    ]);
    let ind = schedule_and_aggregate(&m, &snap, &scenario, 1);
    let rbs = [25.0, 26.0, 51.0];
    let mut bits = [0.0; 3];
    for u in 0..3 {
        let b = bler(10.0 * sinr_lin[u].log10());
        bits[u] = shannon(sinr_lin[u], rbs[u] * 12.0 * 15e3) * (1.0 - b);
        ensure!(ind.users[u].scheduled_rbs as f64 == rbs[u], "user {u} rbs");
        ensure!(close(ind.users[u].bler, b), "user {u} bler");
    }
    bits[2] = bits[2].min(1000.0);
    for u in 0..3 {
        ensure!(close(ind.users[u].served_bits, bits[u]), "user {u} rate");
    }
    ensure!(close(
        ind.cells[0].total_dl_traffic,
        (bits[0] + bits[1]) / 8.0
    ));
    ensure!(close(ind.cells[0].avg_dl_rate, (bits[0] + bits[1]) / 2.0));
    ensure!(close(ind.cells[1].total_dl_traffic, 1000.0 / 8.0));
    ensure!(close(ind.mean_user_rate, bits.iter().sum::<f64>() / 3.0));

    let scenario = demo_scenario(1, 3, 500.0);
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    for case in 0..200 {
        let n_users = rng.random_range(1..12);
        let amp: Vec<Vec<Complex64>> = (0..n_users)
            .map(|_| {
                (0..3)
                    .map(|_| {
                        Complex64::from_polar(
                            rng.random_range(1e-7..3e-5),
                            rng.random_range(0.0..6.3),
                        )
                    })
                    .collect()
            })
            .collect();
        let users = (0..n_users)
            .map(|u| {
                phy_user(
                    u as u32,
                    rng.random_bool(0.5).then(|| rng.random_range(1.0..1e7)),
                )
            })
            .collect();
        let m = measure(&flat_grid(&scenario, &amp), &scenario);
        let ind = schedule_and_aggregate(&m, &snapshot(users), &scenario, rng.random_range(0..100));
        for cell in &ind.cells {
            let bits: f64 = ind
                .users
                .iter()
                .filter(|u| u.serving_cell == Some(cell.cell_id))
                .map(|u| u.served_bits)
                .sum();
            ensure!(
                bits == cell.total_dl_traffic * 8.0,
                "case {case} cell {}",
                cell.cell_id
            );
        }
    }
    Ok(())
}

fn rl_env(n_users: usize) -> Result<AntennaEnv> {
    Ok(AntennaEnv::new(request(
        SimMode::ProtocolStack,
        1,
        3,
        n_users,
        1.0,
    ))?)
}

fn rl_contract() -> Result<()> {
    let mut e = rl_env(6)?;
    e.reset(10, 3)?;
    let before = e.state().cloned();
    let ok = Action::from_scenario(&e.request().scenario);
    let mut bad = ok.clone();
    bad.cells[1].antenna.downtilt = 7.3;
    match e.step(&bad) {
        Err(EnvError::OffGrid { cell_id: 1, .. }) => {}
        other => bail!("off-grid action not rejected: {other:?}"),
    }
    ensure!(
        e.state().cloned() == before,
        "state mutated by rejected action"
    );
    let mut fresh = rl_env(6)?;
    fresh.reset(10, 3)?;
    ensure!(
        e.step(&ok)? == fresh.step(&ok)?,
        "rejected action advanced the stream"
    );

    let mut e = rl_env(8)?;
    e.reset(3, 9)?;
    let r = e.step(&ok.clone().all_inactive())?;
    ensure!(r.indicators.coverage_ratio == 0.0);
    ensure!(r.indicators.cells.iter().all(|c| c.total_dl_traffic == 0.0));
    ensure!(r.indicators.users.iter().all(|u| u.served_bits == 0.0));

    let episode = || -> Result<Vec<String>> {
        let mut e = rl_env(10)?;
        let mut trace = vec![serde_json::to_string(&e.reset(50, 77)?)?];
        for k in 0..50 {
            let mut a = ok.clone();
            if k % 2 == 1 {
                a.cells[k % 3].antenna.active = false;
            }
            let r = e.step(&a)?;
            ensure!(r.done == (k == 49));
            ensure!(r.next_state.step_index == k as u64 + 1);
            // reset consumes one warm-up tick
            ensure!(r.info.tick_index == k as u64 + 2, "one tick per step");
            ensure!(
                r.info.snapshot.time == (k + 2) as f64,
                "one second per step"
            );
            trace.push(serde_json::to_string(&r)?);
        }
        Ok(trace)
    };
    ensure!(episode()? == episode()?, "50-step episode not reproducible");
    Ok(())
}

fn csi_suite() -> Result<()> {
    let (_d, store) = temp_store()?;
    let ds = generate_or_fetch(&csi_params(4, 6, 3), &store)?;
    let zero: Vec<_> = ds.samples.iter().map(|s| s.zeroed()).collect();
    let doubled: Vec<_> = ds
        .samples
        .iter()
        .map(|s| {
            let mut d = s.clone();
            d.vectors.iter_mut().for_each(|z| *z *= 2.0);
            d
        })
        .collect();
    ensure!(
        nmse(&ds.samples, &ds.samples)?.linear == 0.0,
        "identity nmse"
    );
    ensure!(nmse(&ds.samples, &zero)?.linear == 1.0, "null nmse");
    ensure!(nmse(&ds.samples, &doubled)?.linear == 1.0, "scaling nmse");

    let report = system_verify(&ds, &IdentityCodec)?;
    ensure!(
        report.ideal == report.restored,
        "identity codec changed KPIs"
    );
    ensure!(report
        .deltas
        .iter()
        .all(|d| d.total_dl_traffic == 0.0 && d.avg_dl_rate == 0.0 && d.avg_bler == 0.0));

    let (tx, rx, re) = (4, 2, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(2718);
    for case in 0..100 {
        let h: Vec<Complex64> = (0..re * tx * rx)
            .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        let (v, _) = extract_characteristic(&h, re, tx, rx, re);
        let r = DMatrix::from_fn(tx, tx, |a, b| {
            (0..re)
                .flat_map(|k| (0..rx).map(move |q| (k, q)))
                .map(|(k, q)| h[(k * tx + a) * rx + q].conj() * h[(k * tx + b) * rx + q])
                .sum::<Complex64>()
        });
        let eig = r.symmetric_eigen();
        let mut w: Vec<Complex64> = eig
            .eigenvectors
            .column(eig.eigenvalues.imax())
            .iter()
            .copied()
            .collect();
        let lead = w
            .iter()
            .find(|z| z.norm() > 1e-12)
            .copied()
            .unwrap_or(Complex64::new(1.0, 0.0));
        let phase = lead.conj() / lead.norm();
        w.iter_mut().for_each(|z| *z *= phase);
        let err = v
            .iter()
            .zip(&w)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max);
        ensure!(err < 1e-6, "subband {case}: deviation {err:e}");
    }

    let (_d, store) = temp_store()?;
    let calls = Cell::new(0);
    let counted = |req: &SimRequest| {
        calls.set(calls.get() + 1);
        run_link_channel(req)
    };
    let a = generate_or_fetch_with(&csi_params(4, 5, 3), &store, counted)?;
    let b = generate_or_fetch_with(&csi_params(4, 5, 3), &store, counted)?;
    ensure!(calls.get() == 1, "simulation ran {} times", calls.get());
    ensure!(!a.cache_hit && b.cache_hit && a.samples == b.samples);
    Ok(())
}

fn spec(minutes: f64) -> EventSpec {
    EventSpec::new(
        EventType::Concert,
        Point::new(0.0, 0.0),
        50_000.0,
        50_000.0 + minutes * 60.0,
    )
}

fn series(counts: Vec<Vec<u64>>, cells: Vec<u32>) -> CellCountSeries {
    let bins = (0..counts[0].len()).map(|b| b as f64 * 300.0).collect();
    let mut s = CellCountSeries::zeros(spec(5.0), cells, bins);
    s.counts = counts;
    s
}

fn traffic_oracle() -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for case in 0..100 {
        let cells = rng.random_range(1..8);
        let bins = rng.random_range(1..30);
        let mut draw = || -> Vec<Vec<u64>> {
            (0..cells)
                .map(|_| (0..bins).map(|_| rng.random_range(0..60)).collect())
                .collect()
        };
        let (p, t) = (draw(), draw());
        let ids: Vec<u32> = (0..cells as u32).collect();
        let m = forecast_metrics(&series(p.clone(), ids.clone()), &series(t.clone(), ids))?;
        let (mut sq, mut ab, mut tot) = (0.0, 0.0, 0.0);
        for (pr, tr) in p.iter().zip(&t) {
            for (&a, &b) in pr.iter().zip(tr) {
                let e = a as f64 - b as f64;
                sq += e * e;
                ab += e.abs();
                tot += b as f64;
            }
        }
        let n = (cells * bins) as f64;
        ensure!((m.rmse - (sq / n).sqrt()).abs() < 1e-12, "case {case} rmse");
        ensure!((m.mae - ab / n).abs() < 1e-12, "case {case} mae");
        match m.rel_err {
            Some(r) => ensure!((r - ab / tot).abs() < 1e-12, "case {case} rel_err"),
            None => ensure!(tot == 0.0, "case {case} rel_err missing"),
        }
    }

    let m = forecast_metrics(
        &series(vec![vec![3, 5]], vec![0]),
        &series(vec![vec![1, 2]], vec![0]),
    )?;
    ensure!(m.mae == 2.5, "mae {}", m.mae);
    ensure!((m.rmse - 6.5f64.sqrt()).abs() < 1e-12, "rmse {}", m.rmse);
    ensure!((m.rel_err.unwrap_or(f64::NAN) - 5.0 / 3.0).abs() < 1e-12);

    for (minutes, expect) in [(5.0, 49), (60.0, 60), (180.0, 84)] {
        let n = event_bins(&spec(minutes))?.len();
        ensure!(n == expect, "{minutes} min window: {n} bins");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..50 {
        let counts: Vec<Vec<u64>> = (0..12)
            .map(|_| (0..6).map(|_| rng.random_range(0..4)).collect())
            .collect();
        let ids: Vec<u32> = (0..12).map(|i| 100 - i * 3).collect();
        let s = series(counts.clone(), ids.clone());
        for criterion in [TopKCriterion::Peak, TopKCriterion::Total] {
            let mut full: Vec<(u32, u64)> = ids
                .iter()
                .zip(&counts)
                .map(|(&id, row)| match criterion {
                    TopKCriterion::Peak => (id, *row.iter().max().unwrap_or(&0)),
                    TopKCriterion::Total => (id, row.iter().sum()),
                })
                .collect();
            full.sort_by_key(|&(id, score)| (std::cmp::Reverse(score), id));
            for k in [1, 5, 12] {
                ensure!(
                    topk_cells(&s, k, criterion)?.cells == full[..k],
                    "topk k={k}"
                );
            }
        }
    }
    Ok(())
}

fn statistics() -> Result<()> {
    let mut s = demo_scenario(1, 1, 500.0);
    s.service_profiles = vec![ServiceProfile {
        service_type: ServiceType::FileDownload,
        arrival_rate: 2.0,
        demand: 1e6,
        session_seconds: 60.0,
    }];
    let mut pop = init_users(&s, 1000, MobilityParams::default(), 12)?;
    let mut total = 0usize;
    for _ in 0..100 {
        total += step_users(&mut pop, 1.0, true)
            .users
            .iter()
            .map(|u| u.initiated.len())
            .sum::<usize>();
    }
    let mean = total as f64 / 1e5;
    ensure!(
        (mean / 2.0 - 1.0).abs() < 0.05,
        "arrival mean {mean} for rate 2"
    );

    let sigma = s.propagation.shadow_sigma;
    let d = s.propagation.shadow_corr_dist;
    let p = Point::new(123.0, -45.0);
    let q = Point::new(123.0 + d * 0.6, -45.0 + d * 0.8);
    let n = 100_000u64;
    let (mut sx, mut sxx, mut sy, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for seed in 0..n {
        let f = ShadowField::new(&s, seed);
        let (x, y) = (f.sample(p, 0), f.sample(q, 0));
        sx += x;
        sxx += x * x;
        sy += y;
        syy += y * y;
        sxy += x * y;
    }
    let n = n as f64;
    let var_x = sxx / n - (sx / n).powi(2);
    let var_y = syy / n - (sy / n).powi(2);
    ensure!(
        (var_x.sqrt() / sigma - 1.0).abs() < 0.03,
        "shadow std {}",
        var_x.sqrt()
    );
    let rho = (sxy / n - sx / n * sy / n) / (var_x * var_y).sqrt();
    ensure!(
        (rho - (-1f64).exp()).abs() < 0.05,
        "correlation {rho} at {d} m"
    );

    let (_d, store) = temp_store()?;
    for seed in 0..20 {
        let ds = generate_or_fetch(&csi_params(10, seed, 2), &store)?;
        let ideal = system_verify(&ds, &IdentityCodec)?.restored_avg_dl_rate;
        let null = system_verify(&ds, &NullCodec)?.restored_avg_dl_rate;
        ensure!(null < ideal, "seed {seed}: null {null} vs identity {ideal}");
    }
    Ok(())
}

struct Client {
    base: String,
    http: reqwest::Client,
}

impl Client {
    async fn call(
        &self,
        method: reqwest::Method,
        path: &str,
        body: Option<&Value>,
    ) -> Result<(u16, Value)> {
        let mut rb = self.http.request(method, format!("{}{path}", self.base));
        if let Some(b) = body {
            rb = rb.json(b);
        }
        let r = rb.send().await?;
        Ok((r.status().as_u16(), r.json().await?))
    }
    async fn post(&self, path: &str, body: &Value) -> Result<(u16, Value)> {
        self.call(reqwest::Method::POST, path, Some(body)).await
    }
    async fn get(&self, path: &str) -> Result<(u16, Value)> {
        self.call(reqwest::Method::GET, path, None).await
    }
    async fn delete(&self, path: &str) -> Result<(u16, Value)> {
        self.call(reqwest::Method::DELETE, path, None).await
    }
}

fn expect(got: (u16, Value), status: u16, code: Option<&str>, what: &str) -> Result<Value> {
    let (s, v) = got;
    ensure!(s == status, "{what}: status {s}, expected {status}: {v}");
    if let Some(c) = code {
        ensure!(
            v["error"]["code"] == c,
            "{what}: error code {}",
            v["error"]["code"]
        );
    }
    Ok(v)
}

async fn conformance_inner(c: &Client) -> Result<()> {
    let mut ps = request(SimMode::ProtocolStack, 1, 3, 4, 2.0);
    let v = expect(
        c.post("/v1/simulate", &serde_json::to_value(&ps)?).await?,
        200,
        None,
        "simulate protocol-stack",
    )?;
    ensure!(v["body"]["output"]["kind"] == "protocol_stack");
    let run_id = v["body"]["run_id"].as_str().unwrap_or_default().to_string();
    let st = expect(
        c.get(&format!("/v1/status/{run_id}")).await?,
        200,
        None,
        "status",
    )?;
    ensure!(st["body"]["state"] == "done");

    ps.mode = SimMode::Coverage;
    let v = expect(
        c.post("/v1/simulate", &serde_json::to_value(&ps)?).await?,
        200,
        None,
        "simulate coverage",
    )?;
    ensure!(v["body"]["output"]["kind"] == "coverage");

    ps.mode = SimMode::LinkChannel;
    let v = expect(
        c.post("/v1/simulate", &serde_json::to_value(&ps)?).await?,
        200,
        None,
        "simulate link-channel",
    )?;
    let ds = &v["body"]["dataset"];
    let key = ds["key"].as_str().unwrap_or_default();
    let r = c
        .http
        .get(format!("{}/v1/datasets/{key}", c.base))
        .send()
        .await?;
    ensure!(r.status() == 200, "dataset download");
    let bytes = r.bytes().await?;
    ensure!(
        sha256_hex(&bytes) == ds["checksum"],
        "downloaded payload checksum"
    );
    expect(
        c.get(&format!("/v1/datasets/{key}/meta")).await?,
        200,
        None,
        "dataset meta",
    )?;

    let mut bad = serde_json::to_value(&ps)?;
    bad["duration"] = json!(-1.0);
    expect(
        c.post("/v1/simulate", &bad).await?,
        400,
        Some("invalid_request"),
        "bad duration",
    )?;
    expect(
        c.get(&format!("/v1/datasets/{}", "0f".repeat(32))).await?,
        404,
        Some("not_found"),
        "unknown dataset",
    )?;
    expect(c.get("/v1/status/nope").await?, 404, None, "unknown run")?;
    expect(
        c.delete("/v1/status/nope").await?,
        404,
        None,
        "cancel unknown run",
    )?;
    let mut huge = ps.clone();
    huge.n_users = 1_000_000;
    expect(
        c.post("/v1/simulate", &serde_json::to_value(&huge)?)
            .await?,
        429,
        Some("resource_guard"),
        "user cap",
    )?;

    let env_req = request(SimMode::ProtocolStack, 1, 3, 4, 1.0);
    let v = expect(
        c.post("/v1/env", &serde_json::to_value(&env_req)?).await?,
        200,
        None,
        "env create",
    )?;
    let id = v["body"]["env_id"].as_str().unwrap_or_default().to_string();
    let action = serde_json::to_value(Action::from_scenario(&env_req.scenario))?;
    expect(
        c.post(&format!("/v1/env/{id}/step"), &action).await?,
        409,
        Some("not_reset"),
        "step before reset",
    )?;
    expect(
        c.post(
            &format!("/v1/env/{id}/reset"),
            &json!({"episode_len": 2, "seed": 1}),
        )
        .await?,
        200,
        None,
        "env reset",
    )?;
    let mut off = action.clone();
    off["cells"][0]["antenna"]["downtilt"] = json!(7.3);
    expect(
        c.post(&format!("/v1/env/{id}/step"), &off).await?,
        422,
        Some("off_grid"),
        "off-grid step",
    )?;
    expect(
        c.post(&format!("/v1/env/{id}/step"), &action).await?,
        200,
        None,
        "env step",
    )?;
    let v = expect(
        c.post(&format!("/v1/env/{id}/step"), &action).await?,
        200,
        None,
        "env step",
    )?;
    ensure!(v["body"]["done"] == true);
    expect(
        c.post(&format!("/v1/env/{id}/step"), &action).await?,
        409,
        Some("episode_done"),
        "step after done",
    )?;
    expect(
        c.delete(&format!("/v1/env/{id}")).await?,
        200,
        None,
        "env delete",
    )?;
    expect(
        c.post(&format!("/v1/env/{id}/step"), &action).await?,
        404,
        None,
        "deleted env",
    )?;

    let params = serde_json::to_value(csi_params(3, 11, 2))?;
    let v = expect(
        c.post("/v1/csi/dataset", &params).await?,
        200,
        None,
        "csi dataset",
    )?;
    let samples = v["body"]["samples"].clone();
    let v = expect(
        c.post(
            "/v1/csi/verify",
            &json!({"params": params, "restored": samples}),
        )
        .await?,
        200,
        None,
        "csi verify",
    )?;
    ensure!(v["body"]["report"]["nmse"]["linear"] == 0.0);

    let wire = |counts: Value| {
        json!({
            "spec": serde_json::to_value(spec(5.0)).unwrap_or_default(),
            "cells": [4], "bins": [0.0, 300.0], "counts": [counts],
        })
    };
    let v = expect(
        c.post(
            "/v1/traffic/evaluate",
            &json!({"pred": wire(json!([3, 5])), "truth": wire(json!([1, 2]))}),
        )
        .await?,
        200,
        None,
        "traffic evaluate",
    )?;
    ensure!(v["body"]["metrics"]["mae"] == 2.5);
    expect(
        c.post(
            "/v1/traffic/evaluate",
            &json!({"pred": "garbage", "truth": wire(json!([1]))}),
        )
        .await?,
        400,
        None,
        "bad series",
    )?;
    expect(c.get("/v1/nowhere").await?, 404, None, "unknown route")?;
    Ok(())
}

fn service_conformance() -> Result<()> {
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let dir = tempfile::tempdir()?;
        let mut cfg = ServiceConfig::new(dir.path());
        cfg.max_users = 1000;
        let (addr, stop, handle) = spawn(cfg, "127.0.0.1:0".parse()?).await?;
        let client = Client {
            base: format!("http://{addr}"),
            http: reqwest::Client::new(),
        };
        let outcome = conformance_inner(&client).await;
        let _ = stop.send(());
        handle.await?;
        outcome
    })
}

fn main() -> ExitCode {
    let checks: [(&str, fn() -> Result<()>); 9] = [
        ("determinism", determinism),
        ("coverage-projection", coverage_projection),
        ("channel-energy", channel_energy),
        ("phy-oracle", phy_oracle),
        ("rl-contract", rl_contract),
        ("csi-suite", csi_suite),
        ("traffic-metrics-oracle", traffic_oracle),
        ("statistical-checks", statistics),
        ("service-conformance", service_conformance),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        let started = Instant::now();
        let outcome = match catch_unwind(AssertUnwindSafe(check)) {
            Ok(r) => r,
            Err(p) => Err(anyhow::anyhow!(
                "panicked: {}",
                p.downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default()
            )),
        };
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(()) => println!("PASS {name} ({secs:.1}s)"),
            Err(e) => {
                failed += 1;
                println!("FAIL {name} ({secs:.1}s): {e:#}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
