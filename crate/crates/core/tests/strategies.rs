mod common;

use common::*;
use lltts_core::buffer::MemoryBuffer;
use lltts_core::data::{generate_task, merge_replay, ReplayDataset, TaskDataset, TaskSpec};
use lltts_core::harness::{ExperimentConfig, Checkpoint};
use lltts_core::model::{init_params, loss_and_grad, AdamState, Gradient, HeadSelector, ModelTopology, ParameterSet};
use lltts_core::rng::{self as streams, Rng};
use lltts_core::samplers::draw_dual_sized;
use lltts_core::strategies::{
    dual_step, ewc_consolidate, ewc_penalty, gem_project, gem_reference_grads, run_sequence, run_sequence_with,
    train_stage_observed, FisherState, GemState, LbsSampler, SequenceState, StageConfig, StageInputs,
    StrategyConfig, StrategyKind, GEM_TOL,
};
use rand::Rng as _;

fn topo() -> ModelTopology {
    ModelTopology {
        vocab_size: 10,
        num_languages: 3,
        ..tiny_topology()
    }
}

fn task(lang: u32, n_train: usize) -> TaskDataset {
    let t = topo();
    let spec = TaskSpec {
        n_train,
        n_dev: 4,
        n_test: 4,
        seq_len_range: (2, 4),
        ..TaskSpec::new(lang, 100 + lang as u64)
    };
    generate_task(&spec, t.vocab_size, t.frame_dim).unwrap()
}

#[test]
fn ewc_fisher_matches_brute_force() {
    let ds = task(1, 120);
    let p = random_params(&topo(), 4);
    let mut rng = streams::stream(1, "ewc-test", 0);
    let mut shadow = rng.clone();
    let f = ewc_consolidate(&p, &ds, 50, &mut rng, None).unwrap();

    let picks = rand::seq::index::sample(&mut shadow, ds.train.len(), 50).into_vec();
    let mut expected = vec![0.0; p.len()];
    for &i in &picks {
        let (_, g) = loss_and_grad(&p, &[&ds.train[i]], HeadSelector::Lbs).unwrap();
        for (e, v) in expected.iter_mut().zip(&g.values) {
            *e += v * v / 50.0;
        }
    }
    for (a, b) in f.fisher_diag.iter().zip(&expected) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
    assert_eq!(f.anchor, p.values);

    let prior = f.clone();
    let g = ewc_consolidate(&p, &ds, 50, &mut streams::stream(2, "ewc-test", 0), Some(&prior)).unwrap();
    let fresh = ewc_consolidate(&p, &ds, 50, &mut streams::stream(2, "ewc-test", 0), None).unwrap();
    for i in 0..p.len() {
        let sum = prior.fisher_diag[i] + fresh.fisher_diag[i];
        assert!((g.fisher_diag[i] - sum).abs() <= 1e-12 * sum.max(1e-300));
    }
    assert_eq!(g.tasks, 2);
}

#[test]
fn ewc_penalty_hand_case_and_finite_differences() {
    let t = topo();
    let anchor = random_params(&t, 1);
    let mut p = anchor.clone();
    p.values[0] += 1.0;
    p.values[1] += 1.0;
    let state = FisherState {
        fisher_diag: vec![1.0; p.len()],
        anchor: anchor.values.clone(),
        tasks: 1,
    };
    let (v, g) = ewc_penalty(&p, &state, 2.0).unwrap();
    assert!((v - 2.0).abs() < 1e-12);
    assert!((g.values[0] - 2.0).abs() < 1e-12 && (g.values[1] - 2.0).abs() < 1e-12);
    assert!(g.values[2..].iter().all(|x| x.abs() < 1e-12));

    let mut r = rng(8);
    let state = FisherState {
        fisher_diag: (0..p.len()).map(|_| r.gen_range(0.0..3.0)).collect(),
        anchor: (0..p.len()).map(|_| r.gen_range(-1.0..1.0)).collect(),
        tasks: 1,
    };
    let q = random_params(&t, 9);
    let (_, g) = ewc_penalty(&q, &state, 7.5).unwrap();
    let eps = 1e-5;
    for i in 0..q.len() {
        let mut a = q.clone();
        a.values[i] += eps;
        let mut b = q.clone();
        b.values[i] -= eps;
        let num = (ewc_penalty(&a, &state, 7.5).unwrap().0 - ewc_penalty(&b, &state, 7.5).unwrap().0) / (2.0 * eps);
        assert!((g.values[i] - num).abs() / num.abs().max(1.0) < 1e-6);
    }
}

#[test]
fn gem_reference_rows_match_direct_recomputation() {
    let tasks: Vec<TaskDataset> = (0..3).map(|l| task(l, 40)).collect();
    let mut buf = MemoryBuffer::new(30, 5);
    for t in &tasks {
        buf.integrate_task(t).unwrap();
    }
    let p = random_params(&topo(), 6);
    let mut rng = streams::stream(3, "gem-test", 0);
    let mut shadow = rng.clone();
    let state = gem_reference_grads(&p, &buf, 4, &mut rng).unwrap();
    assert_eq!(state.languages, vec![0, 1, 2]);
    for (lang, row) in state.languages.iter().zip(&state.reference_grads) {
        let pool = buf.language_samples(*lang);
        let mut picks = rand::seq::index::sample(&mut shadow, pool.len(), 4).into_vec();
        picks.sort_unstable();
        let batch: Vec<_> = picks.iter().map(|&i| &pool[i]).collect();
        let (_, g) = loss_and_grad(&p, &batch, HeadSelector::Lbs).unwrap();
        assert_eq!(&g, row);
        assert!(row.is_finite() && row.values.iter().any(|v| *v != 0.0));
    }
}

fn random_gem_instance(r: &mut impl rand::Rng) -> (Vec<f64>, Vec<Vec<f64>>) {
    let dim = r.gen_range(1..=20);
    let k = r.gen_range(1..=3);
    let g = (0..dim).map(|_| r.gen_range(-1.0..1.0)).collect();
    let rows = (0..k).map(|_| (0..dim).map(|_| r.gen_range(-1.0..1.0)).collect()).collect();
    (g, rows)
}

fn gem_state(rows: &[Vec<f64>]) -> GemState {
    GemState {
        languages: (0..rows.len() as u32).collect(),
        reference_grads: rows.iter().map(|r| Gradient { values: r.clone() }).collect(),
    }
}

#[test]
fn gem_projection_is_nearest_feasible_point() {
    let mut r = rng(21);
    let mut checked = 0;
    while checked < 40 {
        let (g, rows) = random_gem_instance(&mut r);
        let out = gem_project(&Gradient { values: g.clone() }, &gem_state(&rows), GEM_TOL).unwrap();
        let oracle = projection_by_active_sets(&g, &rows);
        for (a, b) in out.values.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-6);
        }
        let dist = |x: &[f64]| x.iter().zip(&g).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let best = dist(&out.values);
        // Feasible comparison points: random points pushed into the cone by the oracle.
        for _ in 0..1000 {
            let spread = r.gen_range(0.01..3.0);
            let y: Vec<f64> = g.iter().map(|v| v + r.gen_range(-spread..spread)).collect();
            let h = projection_by_active_sets(&y, &rows);
            assert!(best <= dist(&h) + 1e-9);
        }
        checked += 1;
    }
}

#[test]
fn gem_three_constraints_in_five_dims() {
    let mut r = rng(5);
    for _ in 0..50 {
        let g: Vec<f64> = (0..5).map(|_| r.gen_range(-1.0..1.0)).collect();
        let rows: Vec<Vec<f64>> = (0..3).map(|_| (0..5).map(|_| r.gen_range(-1.0..1.0)).collect()).collect();
        let out = gem_project(&Gradient { values: g.clone() }, &gem_state(&rows), GEM_TOL).unwrap();
        let oracle = projection_by_active_sets(&g, &rows);
        for (a, b) in out.values.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}

fn replay_pool<'a>(tasks: &'a [TaskDataset], buf: &'a MemoryBuffer) -> ReplayDataset<'a> {
    merge_replay(tasks.last().unwrap(), buf, 3).unwrap()
}

#[test]
fn dual_gradient_is_weighted_sum_of_branches() {
    let tasks: Vec<TaskDataset> = (0..3).map(|l| task(l, 60)).collect();
    let mut buf = MemoryBuffer::new(20, 1);
    for t in &tasks[..2] {
        buf.integrate_task(t).unwrap();
    }
    let pool = replay_pool(&tasks, &buf);
    let p = random_params(&topo(), 2);
    let mut cfg = StrategyConfig::new(StrategyKind::ReplayDual);
    for (gamma, beta) in [(0.5, 1.0), (1.3, 0.2), (1.0, 1.0)] {
        cfg.gamma = gamma;
        cfg.beta = beta;
        let mut rng = streams::stream(4, "dual-test", 0);
        let mut shadow = rng.clone();
        let (_, g) = dual_step(&cfg, &p, &pool, 12, 9, &mut rng).unwrap();
        let (lbs, rrs) = draw_dual_sized(&pool, 12, 9, &mut shadow).unwrap();
        let (_, g1) = loss_and_grad(&p, lbs.samples(), HeadSelector::Lbs).unwrap();
        let (_, g2) = loss_and_grad(&p, rrs.samples(), HeadSelector::Rrs).unwrap();
        for i in 0..p.len() {
            assert!((g.values[i] - (gamma * g1.values[i] + beta * g2.values[i])).abs() < 1e-12);
        }
    }
}

fn stage_cfg(epochs: usize) -> StageConfig {
    StageConfig {
        epochs,
        batch_size: 8,
        lr: 1e-2,
        lr_decay_epoch_fraction: 0.6,
        num_languages: 3,
        track_dev: true,
    }
}

fn trajectory(
    strategy: &StrategyConfig,
    params: &ParameterSet,
    inputs: &StageInputs<'_>,
    cfg: &StageConfig,
    seed: u64,
) -> Vec<Vec<u64>> {
    let mut steps = Vec::new();
    let opt = AdamState::new(params.len(), cfg.lr);
    let mut rng: Rng = streams::stream(seed, "stage", inputs.stage as u64);
    train_stage_observed(strategy, params.clone(), opt, cfg, inputs, &mut rng, &mut |_, p| {
        steps.push(p.values.iter().map(|v| v.to_bits()).collect())
    })
    .unwrap();
    steps
}

#[test]
fn every_strategy_matches_fine_tune_on_the_first_stage() {
    let first = task(0, 40);
    let buf = MemoryBuffer::new(30, 0);
    let inputs = StageInputs {
        stage: 0,
        current: &first,
        seen: &[&first],
        joint_tasks: &[&first],
        buffer: &buf,
        fisher: None,
    };
    let p = init_params(&topo(), 3);
    let cfg = stage_cfg(3);
    let reference = trajectory(&StrategyConfig::new(StrategyKind::FineTune), &p, &inputs, &cfg, 0);
    assert_eq!(reference.len(), 3 * 5);
    for kind in [
        StrategyKind::ReplayRandom,
        StrategyKind::ReplayWeighted,
        StrategyKind::ReplayDual,
        StrategyKind::Ewc,
        StrategyKind::Gem,
        StrategyKind::Joint,
    ] {
        assert_eq!(trajectory(&StrategyConfig::new(kind), &p, &inputs, &cfg, 0), reference, "{kind:?}");
    }
}

#[test]
fn degenerate_dual_reproduces_random_replay() {
    let tasks: Vec<TaskDataset> = (0..3).map(|l| task(l, 50)).collect();
    let mut buf = MemoryBuffer::new(24, 2);
    for t in &tasks[..2] {
        buf.integrate_task(t).unwrap();
    }
    let seen: Vec<&TaskDataset> = tasks.iter().collect();
    let inputs = StageInputs {
        stage: 2,
        current: &tasks[2],
        seen: &seen,
        joint_tasks: &seen,
        buffer: &buf,
        fisher: None,
    };
    let p = random_params(&topo(), 12);
    let cfg = stage_cfg(4);
    let mut dual = StrategyConfig::new(StrategyKind::ReplayDual);
    dual.gamma = 1.0;
    dual.beta = 0.0;
    dual.lbs_sampler = LbsSampler::Random;
    let a = trajectory(&dual, &p, &inputs, &cfg, 7);
    let b = trajectory(&StrategyConfig::new(StrategyKind::ReplayRandom), &p, &inputs, &cfg, 7);
    assert_eq!(a, b);
    // The default dual strategy takes a different path.
    assert_ne!(trajectory(&StrategyConfig::new(StrategyKind::ReplayDual), &p, &inputs, &cfg, 7), b);
}

fn small_config(kind: StrategyKind) -> ExperimentConfig {
    let mut c = ExperimentConfig::desk_profile(kind, 3);
    c.topology = ModelTopology {
        vocab_size: 12,
        embed_dim: 3,
        encoder_hidden: 5,
        trunk_dim: 5,
        frame_dim: 2,
        postnet_hidden: 3,
        num_languages: 3,
    };
    for t in &mut c.tasks {
        t.n_train = 30;
        t.n_dev = 3;
        t.n_test = 3;
        t.seq_len_range = (2, 4);
    }
    c.epochs_per_stage = 3;
    c.batch_size = 6;
    c.buffer_capacity = 12;
    c
}

#[test]
fn stages_start_from_previous_final_parameters() {
    for kind in StrategyKind::ALL {
        let config = small_config(kind);
        let tasks: Vec<TaskDataset> = config
            .tasks
            .iter()
            .map(|s| generate_task(s, config.topology.vocab_size, config.topology.frame_dim).unwrap())
            .collect();
        let mut boundaries = Vec::new();
        let (full, _) = run_sequence_with(&config, &tasks, SequenceState::initial(&config), None, &mut |s| {
            boundaries.push(s.params.clone());
            Ok(())
        })
        .unwrap();
        assert_eq!(boundaries.len(), 3);

        // Stop after one stage, round-trip through a checkpoint, then continue.
        let (_, state) = run_sequence_with(&config, &tasks, SequenceState::initial(&config), Some(1), &mut |_| Ok(())).unwrap();
        assert_eq!(state.params.values, boundaries[0].values);
        let cp = Checkpoint::from_bytes(&Checkpoint::from_state(&state, &config.hash()).to_bytes()).unwrap();
        let restored = cp.into_state(&config.topology).unwrap();
        assert!(restored.params.values.iter().zip(&boundaries[0].values).all(|(a, b)| a.to_bits() == b.to_bits()));
        let mut resumed_boundaries = Vec::new();
        let (resumed, _) = run_sequence_with(&config, &tasks, restored, None, &mut |s| {
            resumed_boundaries.push(s.params.clone());
            Ok(())
        })
        .unwrap();
        assert_eq!(resumed, full, "{kind:?}");
        assert_eq!(resumed_boundaries, boundaries[1..].to_vec());
    }
}

#[test]
fn sequence_reports_staircase_shape() {
    let mut config = small_config(StrategyKind::ReplayDual);
    let extra = TaskSpec {
        language_id: 3,
        ..config.tasks[0].clone()
    };
    config.tasks.push(extra);
    config.task_order.push(3);
    config.topology.num_languages = 4;
    let result = run_sequence(&config).unwrap();
    let cells: Vec<usize> = result.stages.iter().map(|s| s.per_language.len()).collect();
    assert_eq!(cells, vec![1, 2, 3, 4]);
    assert_eq!(cells.iter().sum::<usize>(), 10);
    for (k, stage) in result.stages.iter().enumerate() {
        let langs: Vec<u32> = stage.per_language.iter().map(|c| c.0).collect();
        assert_eq!(langs, config.task_order[..=k].to_vec());
        assert_eq!(stage.stage_language, config.task_order[k]);
    }
    assert_eq!(run_sequence(&config).unwrap(), result);

    let one = {
        let mut c = small_config(StrategyKind::FineTune);
        c.tasks.truncate(1);
        c.task_order.truncate(1);
        run_sequence(&c).unwrap()
    };
    assert_eq!(one.stages.len(), 1);
    assert_eq!(one.stages[0].per_language.len(), 1);
}
