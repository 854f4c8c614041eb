use std::sync::Arc;

use vibropsi_core::apparatus::{FaultProfile, Motor, TranscriptEntry};
use vibropsi_core::bape::Bape;
use vibropsi_core::observer::{ObserverModel, Side};
use vibropsi_core::protocol::{engine_for, Choice, FirstOrientation, Phase, RecordStore, SessionConfig, Task};
use vibropsi_core::psymodel::{GridConfig, WeibullParams};
use vibropsi_core::simulation::{run_simulated, start_simulated};

fn small(task: Task, seed: u64) -> SessionConfig {
    let mut c = SessionConfig::new(task, "IT", seed);
    c.grid = GridConfig { a_count: 18, b_count: 8, gamma_count: 12, ..GridConfig::default() };
    c
}

fn engine(c: &SessionConfig) -> Arc<Bape> {
    Arc::new(engine_for(c).unwrap())
}

#[test]
fn targets_are_balanced_over_ten_thousand_trials() {
    let mut c = small(Task::Vt2pd, 5);
    c.grid = GridConfig { a_count: 4, b_count: 3, gamma_count: 3, ..GridConfig::default() };
    c.trials_per_block = 10_000;
    let e = engine(&c);
    let rec = run_simulated("bal", c, e, ObserverModel::flat(0.6), FaultProfile::None).unwrap();
    let first = rec.trials.iter().filter(|t| t.target == Choice::FirstA).count() as f64;
    // 4 sigma of Bin(10000, 0.5) is 200.
    assert!((first - 5000.0).abs() < 200.0, "{first}");
}

#[test]
fn pod_fires_two_generators_at_once() {
    let mut c = small(Task::Vt2pod, 8);
    c.trials_per_block = 20;
    let e = engine(&c);
    let (mut s, mut obs) = start_simulated("pod", c, e, ObserverModel::flat(0.7), FaultProfile::None).unwrap();
    while !s.is_finished() {
        let before = s.apparatus().transcript().unwrap().len();
        s.run_trial(&mut obs).unwrap();
        let bursts: Vec<_> = s.apparatus().transcript().unwrap()[before..]
            .iter()
            .filter_map(|e| match e {
                TranscriptEntry::Burst { mask, .. } => Some(*mask),
                _ => None,
            })
            .collect();
        assert_eq!(bursts.len(), 1);
        assert_eq!(bursts[0].count(), 2);
        assert!(bursts[0].contains(Motor::C));
    }
}

#[test]
fn bidirectional_record_covers_both_orientations() {
    let mut c = small(Task::Vt2pdBidirectional, 3);
    c.first_orientation = FirstOrientation::Vertical;
    let e = engine(&c);
    let rec = run_simulated("bi", c, e, ObserverModel::flat(0.8), FaultProfile::None).unwrap();
    assert_eq!(rec.trials.len(), 100);
    assert!(rec.trials[..50].iter().all(|t| t.block == 0 && t.orientation == vibropsi_core::protocol::Orientation::Vertical));
    assert!(rec.trials[50..].iter().all(|t| t.block == 1 && t.orientation == vibropsi_core::protocol::Orientation::Horizontal));
    assert!(rec.trials.iter().enumerate().all(|(i, t)| t.index == i));
}

#[test]
fn replay_writes_identical_files() {
    let c = small(Task::Vt2pod, 99);
    let e = engine(&c);
    let obs = ObserverModel::side_biased(Side::Right, 0.7);
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let files: Vec<Vec<u8>> = dirs
        .iter()
        .map(|d| {
            let rec = run_simulated("rep", c.clone(), e.clone(), obs.clone(), FaultProfile::None).unwrap();
            std::fs::read(RecordStore::new(d.path()).save(&rec).unwrap()).unwrap()
        })
        .collect();
    assert_eq!(files[0], files[1]);
}

#[test]
fn different_seeds_differ() {
    let c = small(Task::Vt2pd, 1);
    let e = engine(&c);
    let a = run_simulated("x", c.clone(), e.clone(), ObserverModel::flat(0.6), FaultProfile::None).unwrap();
    let b = run_simulated("x", SessionConfig { seed: 2, ..c }, e, ObserverModel::flat(0.6), FaultProfile::None).unwrap();
    assert_ne!(a.to_json_bytes(), b.to_json_bytes());
}

#[test]
fn no_contact_rig_fails_alignment() {
    let c = small(Task::Vt2pd, 1);
    let e = engine(&c);
    let err = run_simulated("x", c, e, ObserverModel::flat(0.6), FaultProfile::NoContact).unwrap_err();
    assert!(err.to_string().contains("alignment"));
}

#[test]
fn one_sided_observer_is_excluded_and_still_has_postmean() {
    let c = small(Task::Vt2pd, 4);
    let e = engine(&c);
    let rec = run_simulated("x", c, e, ObserverModel::side_biased(Side::Left, 1.0), FaultProfile::None).unwrap();
    assert_eq!(rec.phase, Phase::Excluded);
    assert!(rec.trials.iter().all(|t| t.response == Choice::FirstA));
    assert_eq!(rec.postmean.unwrap().curve_samples.x_values.len(), 451);
}

#[test]
fn ideal_accuracy_rises_with_separation() {
    use rand::SeedableRng;
    let truth = WeibullParams::new(22.5, 3.0, 0.5, 0.02).unwrap();
    let model = ObserverModel::ideal(truth);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
    let mut last = 0.0;
    for k in 1..=18 {
        let x = 2.5 * k as f64;
        let stim = vibropsi_core::protocol::PresentedStimulus {
            task: Task::Vt2pd,
            separation_mm: x,
            orientation: vibropsi_core::protocol::Orientation::Horizontal,
            target: Choice::FirstB,
        };
        let hits = (0..10_000)
            .filter(|_| vibropsi_core::observer::respond(&model, &stim, &mut rng).choice == Choice::FirstB)
            .count() as f64
            / 10_000.0;
        assert!(hits >= last - 0.02, "x={x}: {hits} after {last}");
        last = hits;
    }
}

#[test]
fn true_column_mass_grows_in_the_median() {
    let c = small(Task::Vt2pd, 0);
    let e = engine(&c);
    let grid = e.grid().clone();
    // Observer drawn from a grid cell.
    let (ia, ib, ig) = (8, 3, 5);
    let truth = grid.cell(grid.flatten(ia, ib, ig));
    let mut per_trial: Vec<Vec<f64>> = vec![Vec::new(); 51];
    for seed in 0..100u64 {
        let cfg = SessionConfig { seed, ..c.clone() };
        let (mut s, mut obs) = start_simulated("m", cfg, e.clone(), ObserverModel::ideal(truth), FaultProfile::None).unwrap();
        let mass = |s: &vibropsi_core::protocol::Session| -> f64 {
            s.posterior().marginals().a_weights[ia]
        };
        per_trial[0].push(mass(&s));
        for t in 1..=50 {
            s.run_trial(&mut obs).unwrap();
            per_trial[t].push(mass(&s));
        }
    }
    let medians: Vec<f64> = per_trial
        .into_iter()
        .map(|mut v| {
            v.sort_by(f64::total_cmp);
            (v[49] + v[50]) / 2.0
        })
        .collect();
    // Single-step medians over 100 runs jitter by about 0.01; compare every tenth trial.
    let checkpoints: Vec<f64> = medians.iter().step_by(10).copied().collect();
    for w in checkpoints.windows(2) {
        assert!(w[1] >= w[0], "median mass dropped: {medians:?}");
    }
    assert!(medians[50] > 2.0 * medians[0], "{medians:?}");
}
