use std::collections::HashSet;
use std::fs::OpenOptions;
use std::io::Write;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ascend_core::config::template_config;
use ascend_core::evolution::{breed, initialize_population, select_survivors, EvolutionConfig};
use ascend_core::persistence::{read_log, replay, ExperimentStore};
use ascend_core::simulator::{run_scenario, SimulationScenario};
use ascend_core::space::SearchSpace;
use ascend_core::{ExperimentStatus, Report};

fn template_scenario() -> SimulationScenario {
    SimulationScenario::from_config(&template_config()).unwrap()
}

#[test]
fn simulated_log_replays_to_final_state() {
    let (trace, records) = run_scenario(&template_scenario()).unwrap();
    let state = replay(&records, None).unwrap();
    assert_eq!(state, trace.state);
    assert_eq!(
        Report::build(&state, 10).to_json_pretty(),
        Report::build(&trace.state, 10).to_json_pretty()
    );
    assert_eq!(state.status, ExperimentStatus::Stopped);
}

#[test]
fn replay_of_any_prefix_matches_sequence() {
    let (_, records) = run_scenario(&template_scenario()).unwrap();
    for cut in [1, 2, records.len() / 3, records.len() / 2, records.len()] {
        let state = replay(&records[..cut], None).unwrap();
        assert_eq!(state.last_sequence, records[cut - 1].sequence);
    }
}

#[test]
fn store_survives_torn_write_and_keeps_going() {
    let dir = tempfile::tempdir().unwrap();
    let store = ExperimentStore::new(dir.path()).with_snapshot_every(25);
    let mut cfg = template_config();
    cfg.scenario = None;
    cfg.evolution.maturity_age = 10;
    {
        let mut exp = store.create("live", cfg, 0).unwrap();
        exp.start(0).unwrap();
        for u in 0..80 {
            let user = format!("u{u}");
            exp.assign(&user, u).unwrap();
            if u % 3 == 0 {
                exp.record_conversion(&user, u).unwrap();
            }
            store.maybe_snapshot(exp.state()).unwrap();
        }
    }
    let before = read_log(&store.events_path("live")).unwrap().records;
    let mut file = OpenOptions::new()
        .append(true)
        .open(store.events_path("live"))
        .unwrap();
    file.write_all(br#"{"sequence":99999,"timestamp":1,"kind":"conv"#)
        .unwrap();
    drop(file);

    let (mut exp, recovery) = store.open("live").unwrap();
    assert!(recovery.truncated_at_line.is_some());
    assert_eq!(exp.state(), &replay(&before, None).unwrap());
    exp.assign("late", 1_000).unwrap();
    drop(exp);

    let after = read_log(&store.events_path("live")).unwrap();
    assert!(after.corrupt_at.is_none());
    assert_eq!(after.records.len(), before.len() + 1);
}

fn small_space() -> impl Strategy<Value = (Vec<usize>, u64)> {
    (prop::collection::vec(2usize..6, 2..7), any::<u64>())
}

proptest! {
    #[test]
    fn offspring_are_valid_and_fresh_ids((counts, seed) in small_space()) {
        let space = SearchSpace::from_counts(&counts).unwrap();
        let cfg = EvolutionConfig { population_size: 5, ..EvolutionConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut population = initialize_population(&space, &cfg, &mut rng);
        for (i, c) in population.iter_mut().enumerate() {
            c.impressions = 100;
            c.conversions = (i as u64 * 7 + seed % 5) % 20;
        }
        let refs: Vec<_> = population.iter().collect();
        let (kept, dropped) = select_survivors(&refs, cfg.population_size);
        prop_assert_eq!(kept.len() + dropped.len(), population.len());
        prop_assert!(kept.iter().all(|k| dropped.iter().all(|d| k.rate() >= d.rate())));

        let live: HashSet<_> = kept.iter().map(|c| c.genome.clone()).collect();
        let next = population.len() as u64;
        let children = breed(&space, &kept, &live, &cfg, next, 1, &mut rng);
        prop_assert_eq!(children.len(), cfg.population_size);
        for (i, child) in children.iter().enumerate() {
            prop_assert_eq!(child.id, next + i as u64);
            prop_assert_eq!(child.birth_generation, 1);
            prop_assert!(space.validate(&child.genome).is_ok());
        }
    }
}
