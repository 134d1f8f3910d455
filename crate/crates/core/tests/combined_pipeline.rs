use std::time::{Duration, Instant};

use netcomb_core::channel::{
    apply_large_scale, draw_small_scale, freq_response, sample_period, LinkId,
};
use netcomb_core::combined::{
    run_coverage, run_protocol_stack, LinkSubset, SimMode, SimOutput, SimRequest,
};
use netcomb_core::largescale::{build_large_scale, ShadowField};
use netcomb_core::phy::{measure, schedule_and_aggregate};
use netcomb_core::scenario::demo_scenario;
use netcomb_core::users::{init_users, step_users, MobilityParams};

fn request(
    mode: SimMode,
    sites: usize,
    sectors: usize,
    n_users: usize,
    duration: f64,
    seed: u64,
) -> SimRequest {
    SimRequest {
        mode,
        scenario: demo_scenario(sites, sectors, 500.0),
        antenna_overrides: vec![],
        n_users,
        mobility: MobilityParams::default(),
        duration,
        seed,
        link_subset: LinkSubset::All,
    }
}

#[test]
fn tiny_run_equals_hand_stepped_pipeline() {
    let req = request(SimMode::ProtocolStack, 1, 2, 2, 1.0, 2024);
    let SimOutput::ProtocolStack(series) = run_protocol_stack(&req).unwrap().output else {
        panic!("protocol-stack output expected");
    };
    let s = &req.scenario;
    let mut pop = init_users(s, 2, MobilityParams::default(), req.seed).unwrap();
    let snap = step_users(&mut pop, s.tick, true);
    let shadow = ShadowField::new(s, req.seed);
    let ls = build_large_scale(s, &snap, &shadow);
    let links: Vec<LinkId> = (0..2)
        .flat_map(|u| {
            (0..2).map(move |c| LinkId {
                user_id: u,
                cell_id: c,
            })
        })
        .collect();
    let profile = s.tap_profile.on_sample_grid(sample_period(s.num_re()));
    let ss = draw_small_scale(&profile, &links, s.tx_ports, s.rx_ports, req.seed);
    let grid = apply_large_scale(&ls, freq_response(&ss, s)).unwrap();
    let m = measure(&grid, s);
    let expect = schedule_and_aggregate(&m, &snap, s, 1);
    assert_eq!(series.len(), 1);
    assert_eq!(series[0], expect);
}

#[test]
fn coverage_is_projection_of_protocol_stack() {
    let ps = request(SimMode::ProtocolStack, 7, 1, 100, 5.0, 11);
    let cov = SimRequest {
        mode: SimMode::Coverage,
        ..ps.clone()
    };
    assert_eq!(ps.scenario.num_cells(), 7);
    let SimOutput::ProtocolStack(a) = run_protocol_stack(&ps).unwrap().output else {
        panic!()
    };
    let SimOutput::Coverage(b) = run_coverage(&cov).unwrap().output else {
        panic!()
    };
    assert_eq!(a.len(), 5);
    assert_eq!(b.len(), 5);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.tick_index, y.tick_index);
        assert_eq!(x.coverage_ratio, y.coverage_ratio);
        for (u, m) in x.users.iter().zip(&y.users) {
            assert_eq!(u.user_id, m.user_id);
            assert_eq!(u.serving_cell, m.serving_cell);
            assert_eq!(u.rsrp.map(f64::to_bits), m.rsrp.map(f64::to_bits));
            assert_eq!(u.sinr.map(f64::to_bits), m.sinr.map(f64::to_bits));
        }
    }
}

#[test]
fn all_inactive_beams_cover_nobody() {
    let mut req = request(SimMode::Coverage, 1, 3, 10, 3.0, 4);
    for site in &mut req.scenario.sites {
        for cell in &mut site.cells {
            cell.antenna.active = false;
        }
    }
    let SimOutput::Coverage(series) = run_coverage(&req).unwrap().output else {
        panic!()
    };
    assert!(series.iter().all(|t| t.coverage_ratio == 0.0));
}

#[test]
fn metadata_echoes_request_and_input_is_untouched() {
    let req = request(SimMode::ProtocolStack, 1, 3, 4, 3.0, 99);
    let before = req.clone();
    let res = run_protocol_stack(&req).unwrap();
    assert_eq!(req, before);
    assert_eq!(res.metadata.seed, 99);
    assert_eq!(res.metadata.mode, SimMode::ProtocolStack);
    assert_eq!(res.metadata.duration, 3.0);
    assert_eq!(res.metadata.num_ticks, 3);
}

fn best_of<F: FnMut()>(mut f: F, reps: usize) -> Duration {
    (0..reps)
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed()
        })
        .min()
        .unwrap()
}

#[test]
fn coverage_runs_faster_than_protocol_stack() {
    let ps = request(SimMode::ProtocolStack, 1, 3, 100, 5.0, 8);
    let cov = SimRequest {
        mode: SimMode::Coverage,
        ..ps.clone()
    };
    // warm up, then interleave so drift hits both equally
    run_coverage(&cov).unwrap();
    let mut t_cov = Duration::MAX;
    let mut t_ps = Duration::MAX;
    for _ in 0..5 {
        t_cov = t_cov.min(best_of(|| drop(run_coverage(&cov).unwrap()), 1));
        t_ps = t_ps.min(best_of(|| drop(run_protocol_stack(&ps).unwrap()), 1));
    }
    assert!(
        t_cov < t_ps,
        "coverage {t_cov:?} vs protocol stack {t_ps:?}"
    );
}
