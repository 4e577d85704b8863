use approx::assert_abs_diff_eq;
use motionparse::geometry::{CameraIntrinsics, Pose};
use motionparse::hmp::{
    binary_segmentation, dynamic_motion_map, moving_mask, parse, rigid_motion_map, visibility_mask, HmpInputs,
    SEGMENTATION_THRESHOLD,
};
use motionparse::imaging::{Field, Mask};
use motionparse::synthoracle::{
    default_intrinsics, make_moving_box_scene, occlusion_oracle, random_moving_box_scene, random_moving_box_scene_with,
    random_static_scene, BoxSpec, SyntheticScene,
};
use nalgebra::Vector3;
use proptest::prelude::*;

fn parse_scene(s: &SyntheticScene, alpha_s: f64) -> motionparse::hmp::HmpOutput {
    parse(&HmpInputs {
        depth_t: &s.depth_t,
        depth_s: &s.depth_s,
        flow_t_to_s: &s.flow_t_to_s,
        flow_s_to_t: &s.flow_s_to_t,
        pose: &s.pose,
        intrinsics: &s.intrinsics,
        alpha_s,
    })
    .unwrap()
}

#[test]
fn visibility_examples() {
    let v = visibility_mask(&Field::new(6, 5, 2)).unwrap();
    assert!(v.data().iter().all(|&x| x == 1.0));
    let out = Field::from_fn2(6, 5, |_, _| [6.0, 0.0]);
    assert!(visibility_mask(&out).unwrap().data().iter().all(|&x| x == 0.0));
}

#[test]
fn visibility_matches_occlusion_oracle_on_moving_box_scenes() {
    let (mut agree, mut total) = (0usize, 0usize);
    for seed in 0..5 {
        let s = random_moving_box_scene(seed).unwrap();
        let v = visibility_mask(&s.flow_s_to_t).unwrap();
        let occluded = occlusion_oracle(&s).unwrap();
        for i in 0..v.pixel_count() {
            agree += ((v.data()[i] == 0.0) == occluded.data()[i]) as usize;
            total += 1;
        }
    }
    assert!(agree as f64 / total as f64 >= 0.99, "agreement {agree}/{total}");
}

#[test]
fn rigid_motion_examples() {
    let k = CameraIntrinsics::new(20.0, 20.0, 7.5, 5.5, 16, 12).unwrap();
    let depth = Field::from_fn(16, 12, |x, y| 3.0 + 0.1 * x as f64 + 0.05 * y as f64);

    let (m_b, _) = rigid_motion_map(&depth, &Pose::identity(), &k).unwrap();
    assert!(m_b.data().iter().all(|&v| v == 0.0));

    let t = [0.3, -0.2, 0.7];
    let (m_b, _) = rigid_motion_map(&depth, &Pose::from_translation(t), &k).unwrap();
    for px in m_b.data().chunks(3) {
        for c in 0..3 {
            assert_abs_diff_eq!(px[c], t[c], epsilon = 1e-12);
        }
    }

    let pose = Pose::from_twist(&[0.0, 0.0, 0.0, 0.1, -0.2, 0.05]).unwrap();
    let (m_b, _) = rigid_motion_map(&depth, &pose, &k).unwrap();
    for y in 0..12 {
        for x in 0..16 {
            let z = depth.at(x, y);
            let phi = Vector3::new((x as f64 - k.cx) / k.fx * z, (y as f64 - k.cy) / k.fy * z, z);
            let expected = (pose.rotation - nalgebra::Matrix3::identity()) * phi;
            for c in 0..3 {
                assert_abs_diff_eq!(m_b.get(x, y, c), expected[c], epsilon = 1e-12);
            }
        }
    }
}

#[test]
fn static_scene_has_no_dynamic_motion() {
    let s = random_static_scene(2).unwrap();
    let v = visibility_mask(&s.flow_s_to_t).unwrap();
    let (m_d, valid) = dynamic_motion_map(&s.depth_t, &s.depth_s, &s.flow_t_to_s, &s.pose, &s.intrinsics, &v).unwrap();
    for i in 0..m_d.pixel_count() {
        if valid.data()[i] {
            for c in 0..3 {
                assert!(m_d.data()[3 * i + c].abs() < 1e-9);
            }
        }
    }
    let zero_v = Field::new(64, 64, 1);
    let (m_d, _) = dynamic_motion_map(&s.depth_t, &s.depth_s, &s.flow_t_to_s, &s.pose, &s.intrinsics, &zero_v).unwrap();
    assert!(m_d.data().iter().all(|&v| v == 0.0));
}

#[test]
fn translating_box_has_its_object_motion() {
    let b = BoxSpec {
        center: [0.0, 0.0],
        half_size: [15.0, 15.0],
        depth: 60.0,
        motion: Vector3::new(0.5, 0.0, 0.0),
    };
    let s = make_moving_box_scene(
        &default_intrinsics(),
        120.0,
        &b,
        &Pose::from_translation([2.0, 0.0, 0.0]),
        5,
    )
    .unwrap();
    let out = parse_scene(&s, 0.01);
    let interior = s.interior_visible();
    let expected = s.object_motion_source();
    let (mut on_box, mut on_bg) = (0, 0);
    for y in 0..64 {
        for x in 0..64 {
            if !interior.get(x, y) {
                continue;
            }
            let m = Vector3::new(out.m_d.get(x, y, 0), out.m_d.get(x, y, 1), out.m_d.get(x, y, 2));
            if s.moving.get(x, y) {
                assert!((m - expected).norm() < 1e-6, "box pixel ({x},{y}): {m:?}");
                assert_abs_diff_eq!(m.norm(), 0.5, epsilon = 1e-6);
                on_box += 1;
            } else {
                assert!(m.norm() < 1e-6, "background pixel ({x},{y}): {m:?}");
                on_bg += 1;
            }
        }
    }
    assert!(on_box > 400 && on_bg > 2000);
}

#[test]
fn moving_mask_examples() {
    let m = Field::from_vec(3, 1, 3, vec![0.0, 0.0, 0.0, 3.0, 0.0, 0.0, 0.0, 2.4, 1.8]).unwrap();
    let s = moving_mask(&m, 0.01).unwrap();
    assert_eq!(s.data()[0], 0.0);
    // 1 - e^-0.03 to 17 significant digits
    assert_abs_diff_eq!(s.data()[1], 0.029554466451491823, epsilon = 1e-15);
    assert_abs_diff_eq!(s.data()[2], 0.029554466451491823, epsilon = 1e-15);
    assert!(moving_mask(&m, 0.0).unwrap().data().iter().all(|&v| v == 0.0));
    assert!(moving_mask(&m, -0.1).is_err());
    assert_eq!(binary_segmentation(&m, 2.9).count(), 2);
    assert_eq!(binary_segmentation(&m, 3.0).count(), 0);
}

#[test]
fn parse_examples() {
    let s = random_static_scene(9).unwrap();
    let out = parse_scene(&s, 0.01);
    for i in 0..4096 {
        if out.valid.data()[i] && out.v.data()[i] == 1.0 {
            assert!(out.s.data()[i] < 1e-6);
        }
    }
    assert!(out.v.data().iter().filter(|&&v| v == 1.0).count() > 3500);

    let k = CameraIntrinsics::new(12.0, 12.0, 4.5, 4.5, 10, 10).unwrap();
    let d = Field::filled(10, 10, 1, 4.0);
    let z = Field::new(10, 10, 2);
    let out = parse(&HmpInputs {
        depth_t: &d,
        depth_s: &d,
        flow_t_to_s: &z,
        flow_s_to_t: &z,
        pose: &Pose::identity(),
        intrinsics: &k,
        alpha_s: 0.01,
    })
    .unwrap();
    assert!(out.m_b.data().iter().all(|&v| v == 0.0));
    assert!(out.m_d.data().iter().all(|&v| v == 0.0));
    assert!(out.v.data().iter().all(|&v| v == 1.0));
}

#[test]
fn segmentation_of_ground_truth_matches_box() {
    for seed in 0..3 {
        let s = random_moving_box_scene_with(seed, 128, (0.22, 0.27)).unwrap();
        let out = parse_scene(&s, 0.01);
        let iou = out.segmentation(SEGMENTATION_THRESHOLD).iou(&s.moving);
        assert!(iou >= 0.9, "seed {seed}: IoU {iou}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, max_global_rejects: 100_000, ..ProptestConfig::default() })]

    #[test]
    fn soft_mask_is_monotone_and_below_one(a in 0.0..1e4f64, b in 0.0..1e4f64, alpha in 1e-4..2.0f64) {
        // 1 - e^-x rounds to exactly 1 once x exceeds about 37
        prop_assume!(alpha * a.max(b) < 36.0);
        let m = Field::from_vec(2, 1, 3, vec![a, 0.0, 0.0, b, 0.0, 0.0]).unwrap();
        let s = moving_mask(&m, alpha).unwrap();
        prop_assert!(s.data().iter().all(|&v| (0.0..1.0).contains(&v)));
        if a < b {
            prop_assert!(s.data()[0] <= s.data()[1]);
        }
        if a < b && s.data()[1] < 1.0 - 1e-12 {
            prop_assert!(s.data()[0] < s.data()[1]);
        }
    }

    #[test]
    fn parse_is_scale_covariant(seed in 0u64..6, c in 0.2..5.0f64) {
        let s = random_moving_box_scene(seed).unwrap();
        let base = parse_scene(&s, 0.01);
        let scaled_pose = Pose::new(s.pose.rotation, s.pose.translation * c).unwrap();
        let (dt, ds) = (s.depth_t.scale(c), s.depth_s.scale(c));
        let out = parse(&HmpInputs {
            depth_t: &dt,
            depth_s: &ds,
            flow_t_to_s: &s.flow_t_to_s,
            flow_s_to_t: &s.flow_s_to_t,
            pose: &scaled_pose,
            intrinsics: &s.intrinsics,
            alpha_s: 0.01,
        }).unwrap();
        for (a, b) in out.m_b.data().iter().zip(base.m_b.data()) {
            prop_assert!((a - c * b).abs() <= 1e-9 * (1.0 + b.abs() * c));
        }
        for (a, b) in out.m_d.data().iter().zip(base.m_d.data()) {
            prop_assert!((a - c * b).abs() <= 1e-9 * (1.0 + b.abs() * c));
        }
        let near_threshold = base.m_d.norm().data().iter().filter(|n| (*n - 3.0).abs() < 1e-6).count();
        prop_assume!(near_threshold == 0);
        prop_assert_eq!(out.segmentation(3.0 * c), base.segmentation(3.0));
    }

    #[test]
    fn visibility_is_independent_of_iteration_order(seed in 0u64..20) {
        // reversing the grid in both axes and negating the flow mirrors the splat
        let s = random_moving_box_scene(seed).unwrap();
        let f = &s.flow_s_to_t;
        let (w, h) = (f.width(), f.height());
        let mirrored = Field::from_fn2(w, h, |x, y| [-f.get(w - 1 - x, h - 1 - y, 0), -f.get(w - 1 - x, h - 1 - y, 1)]);
        let v = visibility_mask(f).unwrap();
        let vm = visibility_mask(&mirrored).unwrap();
        let back = Mask::from_fn(w, h, |x, y| vm.at(w - 1 - x, h - 1 - y) == 1.0);
        let orig = Mask::from_fn(w, h, |x, y| v.at(x, y) == 1.0);
        prop_assert_eq!(orig, back);
    }
}
