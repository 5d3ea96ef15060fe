use std::f64::consts::{FRAC_PI_2, PI, TAU};

use crossview::geometry::{
    aerial_px_to_metric, bev_cell_to_metric, metric_to_aerial_px, project_point_to_panorama, AerialMeta, BevGridSpec,
    CameraIntrinsics, CrossViewFrame, HeightLayerSpec, Pose3DoF,
};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn metric_aerial_round_trip(
        tx in 0.0f64..2000.0, ty in 0.0f64..2000.0, yaw in -10.0f64..10.0,
        x in -60.0f64..60.0, y in -60.0f64..60.0, gsd in 0.05f64..1.0,
    ) {
        let meta = AerialMeta::new(gsd, 2048).unwrap();
        let pose = Pose3DoF::new(tx, ty, yaw);
        let back = aerial_px_to_metric(&meta, &pose, metric_to_aerial_px(&meta, &pose, x, y));
        prop_assert!((back[0] - x).abs() < 1e-9 && (back[1] - y).abs() < 1e-9);
    }
}

proptest! {
    #[test]
    fn grid_is_point_symmetric(half in 1usize..40, extent in 1.0f64..200.0, seed in any::<u64>()) {
        let n = 2 * half + 1;
        let g = BevGridSpec::new(n, extent).unwrap();
        let ix = (seed % n as u64) as usize;
        let iy = ((seed / n as u64) % n as u64) as usize;
        let a = bev_cell_to_metric(&g, ix, iy).unwrap();
        let b = bev_cell_to_metric(&g, n - 1 - ix, n - 1 - iy).unwrap();
        prop_assert!((a.0 + b.0).abs() < 1e-9 && (a.1 + b.1).abs() < 1e-9);
        let c = bev_cell_to_metric(&g, half, half).unwrap();
        prop_assert_eq!(c, (0.0, 0.0));
    }

    #[test]
    fn layer_heights_are_affine(m in 2usize..40, lo in -50.0f64..0.0, span in 0.5f64..80.0) {
        let hi = lo + span;
        let l = HeightLayerSpec::new(m, lo, hi).unwrap();
        prop_assert_eq!(l.layer_height(0), lo);
        prop_assert!((l.layer_height(m - 1) - hi).abs() < 1e-9);
        let step = (hi - lo) / (m - 1) as f64;
        for k in 0..m {
            prop_assert!((l.layer_height(k) - (lo + k as f64 * step)).abs() < 1e-9);
            prop_assert_eq!(l.nearest_layer(l.layer_height(k)), k);
        }
        if m % 2 == 1 {
            prop_assert!((l.layer_height(m / 2) - (lo + hi) / 2.0).abs() < 1e-9);
        }
    }

    #[test]
    fn panorama_column_is_periodic_in_azimuth(r in 0.5f64..60.0, az in -PI..PI, z in -5.0f64..8.0, turns in -3i32..3) {
        let intr = CameraIntrinsics::new(1024, 512, 2.5).unwrap();
        let az2 = az + TAU * turns as f64;
        let a = project_point_to_panorama(&intr, r * az.cos(), r * az.sin(), z).unwrap();
        let b = project_point_to_panorama(&intr, r * az2.cos(), r * az2.sin(), z).unwrap();
        match (a, b) {
            (Some(a), Some(b)) => {
                let du = (a.0 - b.0).abs();
                prop_assert!(du.min(1024.0 - du) < 1e-6);
                prop_assert!((a.1 - b.1).abs() < 1e-9);
            }
            (None, None) => {}
            _ => prop_assert!(false, "visibility differs"),
        }
    }

    #[test]
    fn gt_pairs_invert_under_quarter_turns(q in 0i32..4, di in -5i32..=5, dj in -5i32..=5) {
        let grid = BevGridSpec::new(21, 20.0 * 1.775).unwrap();
        let meta = AerialMeta::new(0.12, 640).unwrap();
        let frame = CrossViewFrame::new(grid, meta, meta.center_px());
        let cell_px = grid.spacing_m() / meta.gsd();
        let pose = Pose3DoF::new(320.0 + di as f64 * cell_px, 320.0 + dj as f64 * cell_px, q as f64 * FRAC_PI_2);
        for (g, a) in frame.gt_pairs(&pose) {
            prop_assert_eq!(frame.aerial_to_ground_patch(&pose, a), Some(g));
        }
    }
}
