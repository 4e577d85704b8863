use approx::assert_abs_diff_eq;
use motionparse::geometry::Pose;
use motionparse::imaging::Field;
use motionparse::losses::LossWeights;
use motionparse::optimizer::{
    decode_depth, gradient, raw_depth, run_schedule, run_stage, DepthGauge, Frames, LossObjective, Objective,
    SceneState, StageSchedule, StateGradient, StopReason,
};
use motionparse::synthoracle::{
    default_intrinsics, make_static_scene, numeric_gradient, numeric_gradient_at, random_moving_box_scene_with,
    random_static_scene, SyntheticScene,
};
use motionparse::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn frames(s: &SyntheticScene) -> Frames {
    Frames {
        target: s.target_pyramid.clone(),
        source: s.source_pyramid.clone(),
        stereo: None,
        intrinsics: s.intrinsics,
    }
}

fn gt_state(s: &SyntheticScene) -> SceneState {
    SceneState::from_ground_truth(
        &s.depth_t,
        &s.depth_s,
        &s.pose,
        &s.flow_t_to_s,
        &s.flow_s_to_t,
        DepthGauge::MeanNormalized,
    )
    .unwrap()
}

#[test]
fn decode_depth_examples() {
    let zero = Field::new(3, 2, 1);
    for &d in raw_depth(&zero).data() {
        assert_abs_diff_eq!(d, 1.0 / 0.15, epsilon = 1e-12);
    }
    let big = Field::filled(3, 2, 1, 40.0);
    for &d in raw_depth(&big).data() {
        assert_abs_diff_eq!(d, 1.0 / 0.3, epsilon = 1e-12);
        assert!(d >= 1.0 / 0.3);
    }
    for &d in decode_depth(&Field::filled(4, 4, 1, -1.3)).data() {
        assert_abs_diff_eq!(d, 1.0, epsilon = 1e-15);
    }
    let varied = Field::from_fn(4, 4, |x, y| x as f64 * 0.3 - y as f64);
    assert_abs_diff_eq!(decode_depth(&varied).mean(), 1.0, epsilon = 1e-12);
}

struct Constant;

impl Objective for Constant {
    fn value(&self, _: &SceneState) -> Result<f64> {
        Ok(4.2)
    }
    fn value_and_gradient(&self, state: &SceneState) -> Result<(f64, StateGradient)> {
        Ok((4.2, StateGradient::zeros_like(state)))
    }
}

struct FlowEnergy;

impl Objective for FlowEnergy {
    fn value(&self, state: &SceneState) -> Result<f64> {
        Ok(state.flow_t_to_s.data().iter().map(|v| v * v).sum())
    }
    fn value_and_gradient(&self, state: &SceneState) -> Result<(f64, StateGradient)> {
        let mut g = StateGradient::zeros_like(state);
        g.flow_t_to_s = state.flow_t_to_s.scale(2.0);
        Ok((self.value(state)?, g))
    }
}

struct NotFinite;

impl Objective for NotFinite {
    fn value(&self, _: &SceneState) -> Result<f64> {
        Ok(f64::NAN)
    }
    fn value_and_gradient(&self, state: &SceneState) -> Result<(f64, StateGradient)> {
        Ok((f64::NAN, StateGradient::zeros_like(state)))
    }
}

#[test]
fn gradient_examples() {
    let mut state = SceneState::smooth_init(1, 1, 5.0).unwrap();
    let g = gradient(&Constant, &state).unwrap();
    assert!(g.flatten().iter().all(|&v| v == 0.0));

    state.flow_t_to_s = Field::from_vec(1, 1, 2, vec![3.0, 4.0]).unwrap();
    let g = gradient(&FlowEnergy, &state).unwrap();
    assert_eq!(g.flow_t_to_s.data(), &[6.0, 8.0]);

    // the finite-difference oracle agrees on the same quadratic
    let x = state.parameters();
    let numeric = numeric_gradient(
        |p| {
            let mut s = state.clone();
            s.set_parameters(p).unwrap();
            FlowEnergy.value(&s).unwrap()
        },
        &x,
        1e-4,
    );
    for (a, n) in g.flatten().iter().zip(&numeric) {
        assert_abs_diff_eq!(a, n, epsilon = 1e-8);
    }

    assert!(gradient(&NotFinite, &state).is_err());
}

/// A 16x16 moving-box state away from every kink of the L1 terms.
fn perturbed_small_state(seed: u64) -> (SyntheticScene, SceneState) {
    let s = random_moving_box_scene_with(seed, 16, (0.15, 0.25)).unwrap();
    let mut state = gt_state(&s);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 77);
    for d in state.depth_t.data_mut().iter_mut().chain(state.depth_s.data_mut()) {
        *d += rng.random_range(-0.05..0.05);
    }
    for t in state.pose_twist.iter_mut() {
        *t += rng.random_range(-0.01..0.01);
    }
    for f in state
        .flow_t_to_s
        .data_mut()
        .iter_mut()
        .chain(state.flow_s_to_t.data_mut())
    {
        *f += rng.random_range(-0.5..0.5);
    }
    state.alpha_s = 0.01;
    (s, state)
}

#[test]
fn stage_three_gradient_matches_finite_differences() {
    let (s, state) = perturbed_small_state(3);
    let f = frames(&s);
    let objective = LossObjective::new(
        &f,
        LossWeights::depth_refine_stage(),
        DepthGauge::MeanNormalized,
        &state,
    )
    .unwrap();
    let g = gradient(&objective, &state).unwrap().flatten();
    let x = state.parameters();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let coords: Vec<usize> = (0..100).map(|_| rng.random_range(0..x.len())).collect();
    let numeric = numeric_gradient_at(
        |p| {
            let mut st = state.clone();
            st.set_parameters(p).unwrap();
            objective.value(&st).unwrap()
        },
        &x,
        &coords,
        1e-6,
    );
    let scale = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for (&i, n) in coords.iter().zip(&numeric) {
        let a = g[i];
        let err = (a - n).abs() / a.abs().max(n.abs()).max(1e-6 * scale);
        assert!(err < 1e-3, "coordinate {i}: analytic {a:e}, numeric {n:e}");
    }
}

#[test]
fn ground_truth_static_scene_converges_at_entry() {
    // 8 px of disparity at full resolution, 1 px at the coarsest level, so
    // both warp directions are exact
    let s = make_static_scene(&default_intrinsics(), 1.5, 6, &Pose::from_translation([0.25, 0.0, 0.0])).unwrap();
    assert_eq!(s.flow_t_to_s.get(10, 10, 0), 8.0);
    let (state, traces) = run_schedule(&frames(&s), &StageSchedule::monocular(), gt_state(&s)).unwrap();
    assert_eq!(traces.len(), 6);
    for t in &traces {
        assert_eq!(t.stop, StopReason::ConvergedAtEntry, "{}: {:?}", t.name, t.losses);
        assert_eq!(t.steps, 0);
    }
    assert_eq!(state.depth_t, gt_state(&s).depth_t);
}

#[test]
fn frozen_blocks_stay_bit_identical() {
    let (s, mut state) = perturbed_small_state(1);
    let f = frames(&s);
    let schedule = StageSchedule::monocular().with_max_iters(15);
    let before = state.clone();
    let t = run_stage(&f, schedule.gauge, &schedule.stages[0], &mut state).unwrap();
    assert!(t.steps > 0);
    assert_eq!(state.flow_t_to_s, before.flow_t_to_s);
    assert_eq!(state.flow_s_to_t, before.flow_s_to_t);

    let before = state.clone();
    let t = run_stage(&f, schedule.gauge, &schedule.stages[3], &mut state).unwrap();
    assert!(t.steps > 0);
    assert_eq!(state.depth_t, before.depth_t);
    assert_eq!(state.depth_s, before.depth_s);
    assert_eq!(state.pose_twist, before.pose_twist);
}

#[test]
fn depth_pose_objective_ignores_flow() {
    let (s, state) = perturbed_small_state(2);
    let f = frames(&s);
    let objective = LossObjective::new(&f, LossWeights::depth_stage(), DepthGauge::MeanNormalized, &state).unwrap();
    let mut other = state.clone();
    other.flow_t_to_s = other.flow_t_to_s.map(|v| v * 3.0 + 1.0);
    other.flow_s_to_t = Field::new(16, 16, 2);
    assert_eq!(objective.value(&state).unwrap(), objective.value(&other).unwrap());
    let g = gradient(&objective, &state).unwrap();
    assert!(g
        .flow_t_to_s
        .data()
        .iter()
        .chain(g.flow_s_to_t.data())
        .all(|&v| v == 0.0));
}

#[test]
fn traces_do_not_increase() {
    let (s, state) = perturbed_small_state(4);
    let schedule = StageSchedule::monocular().with_max_iters(20);
    let (_, traces) = run_schedule(&frames(&s), &schedule, state).unwrap();
    for t in &traces {
        assert!(t.losses.windows(2).all(|w| w[1] < w[0]), "{}: {:?}", t.name, t.losses);
        assert_eq!(t.losses.len(), t.steps + 1);
    }
}

#[test]
fn perturbed_pose_is_recovered() {
    let s = random_static_scene(0).unwrap();
    let mut state = gt_state(&s);
    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    let noise = Normal::new(0.0, 0.01).unwrap();
    for t in state.pose_twist.iter_mut() {
        *t += noise.sample(&mut rng);
    }
    let schedule = StageSchedule::monocular();
    run_stage(&frames(&s), schedule.gauge, &schedule.stages[0], &mut state).unwrap();
    let mean = (s.depth_t.mean() + s.depth_s.mean()) / 2.0;
    let err = (state.pose().unwrap().translation * mean - s.pose.translation).norm();
    assert!(err < 1e-3, "translation error {err}");
}

#[test]
fn unknown_profile_is_rejected() {
    assert!(StageSchedule::profile("fast").is_err());
    assert_eq!(StageSchedule::profile("stereo").unwrap().gauge, DepthGauge::Metric);
}
