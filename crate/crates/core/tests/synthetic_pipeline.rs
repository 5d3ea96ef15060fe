use std::f64::consts::FRAC_PI_2;

use crossview::geometry::Pose3DoF;
use crossview::pipeline::{scene_similarity, solve, SolveConfig};
use crossview::pose::pose_error;
use crossview::synth::{generate_scene, render_inputs, PoseMode, SceneConfig, SyntheticScene};

fn run(scene: &SyntheticScene) -> Pose3DoF {
    let r = render_inputs(scene).unwrap();
    solve(&r.volume, &r.conf_logits, &r.aerial, &scene.frame, None, &SolveConfig::default())
        .unwrap()
        .pose
}

fn lower_median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[(v.len() - 1) / 2]
}

#[test]
fn noise_free_grid_snapped_scenes_are_recovered_exactly() {
    for seed in 0..12 {
        let s = generate_scene(&SceneConfig::default(), seed, 0.0).unwrap();
        let pose = run(&s);
        let e = pose_error(&pose, &s.gt_pose, &s.geometry.aerial);
        assert!(e.trans_m < 1e-6, "seed {seed}: {} m", e.trans_m);
        assert!(e.orient_deg < 1e-9, "seed {seed}: {} deg", e.orient_deg);
        let q = pose.yaw_rad / FRAC_PI_2;
        assert!((q - q.round()).abs() < 1e-12);
    }
}

#[test]
fn noise_free_similarity_peaks_on_gt_pairs() {
    for seed in 0..5 {
        let s = generate_scene(&SceneConfig::with_n(21), seed, 0.0).unwrap();
        let r = render_inputs(&s).unwrap();
        let (_, sim) = scene_similarity(&r.volume, &r.conf_logits, &r.aerial, &SolveConfig::default()).unwrap();
        let pairs = s.frame.gt_pairs(&s.gt_pose);
        assert!(!pairs.is_empty());
        for &(g, a) in &pairs {
            let diag = sim.s[[g, a]];
            for k in 0..sim.patches() {
                if k != a {
                    assert!(diag > sim.s[[g, k]], "seed {seed}: row {g} col {k} beats gt col {a}");
                }
            }
        }
    }
}

#[test]
fn noise_free_continuous_poses_land_within_a_cell() {
    let mut cfg = SceneConfig::with_n(21);
    cfg.pose_mode = PoseMode::Continuous;
    let spacing = cfg.geometry.build().unwrap().grid.spacing_m();
    for seed in 0..10 {
        let s = generate_scene(&cfg, seed, 0.0).unwrap();
        let e = pose_error(&run(&s), &s.gt_pose, &s.geometry.aerial);
        assert!(e.trans_m < spacing, "seed {seed}: {} m", e.trans_m);
        assert!(e.orient_deg < 10.0, "seed {seed}: {} deg", e.orient_deg);
    }
}

#[test]
fn median_error_grows_with_noise() {
    let cfg = SceneConfig::with_n(21);
    let sigmas = [0.0, 0.3, 0.6, 1.0];
    let medians: Vec<f64> = sigmas
        .iter()
        .map(|&sigma| {
            let errs = (0..50)
                .map(|seed| {
                    let s = generate_scene(&cfg, seed, sigma).unwrap();
                    pose_error(&run(&s), &s.gt_pose, &s.geometry.aerial).trans_m
                })
                .collect();
            lower_median(errs)
        })
        .collect();
    for w in medians.windows(2) {
        assert!(w[0] <= w[1], "medians {medians:?}");
    }
    assert!(medians[0] < 1e-6);
    assert!(medians[3] > medians[0]);
}

#[test]
fn pipeline_is_deterministic() {
    let cfg = SceneConfig::with_n(15);
    let s = generate_scene(&cfg, 21, 0.2).unwrap();
    let r = render_inputs(&s).unwrap();
    let a = solve(&r.volume, &r.conf_logits, &r.aerial, &s.frame, None, &SolveConfig::default()).unwrap();
    let b = solve(&r.volume, &r.conf_logits, &r.aerial, &s.frame, None, &SolveConfig::default()).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.pose.t_px[0].to_bits(), b.pose.t_px[0].to_bits());
}

#[test]
fn known_yaw_path_keeps_yaw() {
    let s = generate_scene(&SceneConfig::with_n(21), 4, 0.0).unwrap();
    let r = render_inputs(&s).unwrap();
    let cfg = SolveConfig {
        known_yaw_rad: Some(s.gt_pose.yaw_rad),
        ..Default::default()
    };
    let out = solve(&r.volume, &r.conf_logits, &r.aerial, &s.frame, None, &cfg).unwrap();
    assert_eq!(out.pose.yaw_rad, s.gt_pose.yaw_rad);
    assert!(pose_error(&out.pose, &s.gt_pose, &s.geometry.aerial).trans_m < 1e-6);
}
