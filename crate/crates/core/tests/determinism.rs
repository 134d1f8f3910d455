//! Every seeded entry point, run twice on fresh state, must agree bit for bit.

use std::time::Instant;

use netcomb_core::combined::{run, LinkSubset, RunControl, SimMode, SimRequest};
use netcomb_core::csi::{generate_or_fetch, system_verify, CsiDatasetParams, UniformQuantizer};
use netcomb_core::rl::{Action, AntennaEnv};
use netcomb_core::scenario::demo_scenario;
use netcomb_core::store::DatasetStore;
use netcomb_core::traffic::{synthesize_event, EventSpec, EventType};
use netcomb_core::users::{MobilityParams, Point};

fn request(mode: SimMode) -> SimRequest {
    SimRequest {
        mode,
        scenario: demo_scenario(1, 3, 500.0),
        antenna_overrides: vec![],
        n_users: 20,
        mobility: MobilityParams::default(),
        duration: 10.0,
        seed: 424242,
        link_subset: LinkSubset::All,
    }
}

#[test]
fn all_entry_points_repeat_exactly() {
    let started = Instant::now();

    for mode in [
        SimMode::ProtocolStack,
        SimMode::Coverage,
        SimMode::LinkChannel,
    ] {
        let req = request(mode);
        let a = run(&req, &RunControl::default()).unwrap();
        let b = run(&req, &RunControl::default()).unwrap();
        assert_eq!(a, b, "{mode:?}");
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    let episode = || {
        let mut env = AntennaEnv::new(request(SimMode::ProtocolStack)).unwrap();
        let mut out = vec![serde_json::to_string(&env.reset(10, 5).unwrap()).unwrap()];
        let action = Action::from_scenario(&env.request().scenario);
        for _ in 0..10 {
            out.push(serde_json::to_string(&env.step(&action).unwrap()).unwrap());
        }
        out
    };
    assert_eq!(episode(), episode());

    let params = CsiDatasetParams {
        scenario: demo_scenario(1, 3, 500.0),
        n_users: 20,
        mobility: MobilityParams::default(),
        seed: 424242,
        samples_per_user: 10,
        subband_size: 48,
    };
    let codec = UniformQuantizer { bits: 4 };
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let store_a = DatasetStore::open(dir_a.path()).unwrap();
    let store_b = DatasetStore::open(dir_b.path()).unwrap();
    let a = generate_or_fetch(&params, &store_a).unwrap();
    let b = generate_or_fetch(&params, &store_b).unwrap();
    assert_eq!(
        (&a.key, &a.payload, &a.samples),
        (&b.key, &b.payload, &b.samples)
    );
    let report = system_verify(&a, &codec).unwrap();
    assert_eq!(report, system_verify(&b, &codec).unwrap());
    store_a.remove(&a.key).unwrap();
    let c = generate_or_fetch(&params, &store_a).unwrap();
    assert!(!c.cache_hit);
    assert_eq!((&c.payload, &c.samples), (&a.payload, &a.samples));
    assert_eq!(system_verify(&c, &codec).unwrap(), report);

    let s = demo_scenario(1, 3, 500.0);
    let spec = EventSpec::new(EventType::Esports, Point::new(0.0, 0.0), 1000.0, 1300.0);
    assert_eq!(
        synthesize_event(&spec, &s, 20, 9).unwrap(),
        synthesize_event(&spec, &s, 20, 9).unwrap()
    );

    let elapsed = started.elapsed();
    assert!(elapsed.as_secs() < 60, "took {elapsed:?}");
}

#[test]
fn seeds_matter() {
    let a = run(&request(SimMode::Coverage), &RunControl::default()).unwrap();
    let mut other = request(SimMode::Coverage);
    other.seed += 1;
    let b = run(&other, &RunControl::default()).unwrap();
    assert_ne!(a.output, b.output);
}
