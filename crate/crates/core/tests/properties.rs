mod common;

use mvtrack::fusion::{knn_brute_force, CloudGeometry, PointTag};
use mvtrack::geometry::{intrinsics, look_at, Camera, Similarity, Vec3};
use mvtrack::metrics::{evaluate_track, EvalConfig};
use mvtrack::tracker::window_ranges;
use mvtrack::training::{loss_vis, loss_xyz};
use proptest::prelude::*;

fn camera(w: usize, h: usize, f: f64, eye: [f64; 3], look: [f64; 3]) -> Camera {
    let eye = Vec3::from(eye);
    let k = intrinsics(f, f, w as f64 / 2.0, h as f64 / 2.0);
    Camera::new(0, k, look_at(eye, eye + Vec3::from(look), Vec3::z()), w, h).unwrap()
}

fn coord() -> impl Strategy<Value = f64> {
    -3.0f64..3.0
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn unproject_then_project_is_identity(
        w in 8usize..640, h in 8usize..480, f in 20.0f64..900.0,
        eye in [coord(), coord(), coord()],
        look in [-1.0f64..1.0, -1.0f64..1.0, 0.3f64..1.0],
        fu in 0.0f64..1.0, fv in 0.0f64..1.0, z in 0.01f64..50.0,
    ) {
        let cam = camera(w, h, f, eye, look);
        let (u, v) = (fu * (w as f64 - 1.0), fv * (h as f64 - 1.0));
        let x = cam.unproject_pixel(u, v, z).unwrap();
        let p = cam.project_point(&x);
        let px = p.pixel().unwrap();
        prop_assert!((px[0] - u).abs() < 1e-6 * u.abs().max(1.0));
        prop_assert!((px[1] - v).abs() < 1e-6 * v.abs().max(1.0));
    }

    #[test]
    fn translated_camera_sees_translated_points(
        eye in [coord(), coord(), coord()],
        t in [coord(), coord(), coord()],
        fu in 0.0f64..1.0, fv in 0.0f64..1.0, z in 0.1f64..10.0,
    ) {
        let cam = camera(64, 48, 60.0, eye, [0.2, 0.1, 1.0]);
        let s = Similarity::translation(Vec3::from(t));
        let moved = cam.apply_similarity(&s).unwrap();
        let (u, v) = (fu * 63.0, fv * 47.0);
        let a = cam.unproject_pixel(u, v, z).unwrap();
        let b = moved.unproject_pixel(u, v, z).unwrap();
        prop_assert!((s.apply(&a) - b).norm() < 1e-9);
    }

    #[test]
    fn knn_matches_exhaustive_scan(
        pts in prop::collection::vec([coord(), coord(), coord()], 1..400),
        q in [coord(), coord(), coord()],
        k in 1usize..40,
    ) {
        let n = pts.len();
        let tags = (0..n as u32).map(|i| PointTag { view: 0, row: i, col: 0 }).collect();
        let cloud = CloudGeometry::new(pts.clone(), tags, (0..n).collect()).unwrap();
        let got = cloud.knn(&q, k).unwrap();
        prop_assert_eq!(got.len(), k.min(n));
        prop_assert_eq!(got, knn_brute_force(&pts, &q, k));
    }

    #[test]
    fn windows_cover_every_frame_with_half_overlap(len in 1usize..200, half in 1usize..16) {
        let t = 2 * half;
        let w = window_ranges(len, t);
        prop_assert_eq!(w[0].0, 0);
        prop_assert_eq!(w.last().unwrap().1, len);
        for &(s, e) in &w {
            prop_assert!(e > s && e - s <= t);
        }
        for p in w.windows(2) {
            prop_assert_eq!(p[1].0 - p[0].0, half);
            prop_assert!(p[1].0 < p[0].1);
        }
        if len <= t {
            prop_assert_eq!(w.len(), 1);
        }
    }

    #[test]
    fn metrics_stay_in_range(seed in 0u64..10_000) {
        let th = EvalConfig::default().thresholds;
        for s in common::random_series(seed, 10) {
            let m = evaluate_track(&s, &th);
            prop_assert!((0.0..=1.0).contains(&m.oa));
            for v in m.delta.iter().flatten().chain(m.aj.iter().flatten()) {
                prop_assert!((0.0..=1.0).contains(v));
            }
            if let Some(d) = &m.delta {
                prop_assert!(d.windows(2).all(|p| p[0] <= p[1]));
            }
            prop_assert_eq!(m.mte.is_some(), s.gt_vis.iter().any(|&v| v));
        }
    }

    #[test]
    fn aj_never_exceeds_delta_with_true_visibility(seed in 0u64..10_000) {
        let th = EvalConfig::default().thresholds;
        for mut s in common::random_series(seed, 10) {
            s.pred_vis = s.gt_vis.clone();
            let m = evaluate_track(&s, &th);
            if let (Some(d), Some(a)) = (m.delta, m.aj) {
                for (d, a) in d.iter().zip(&a) {
                    prop_assert!(a <= d);
                }
            }
        }
    }

    #[test]
    fn dual_metrics_agree(seed in 0u64..10_000) {
        let th = EvalConfig::default().thresholds;
        for s in common::random_series(seed, 10) {
            let m = evaluate_track(&s, &th);
            let d = common::dual_metrics(&s, &th);
            prop_assert_eq!(m.mte.is_some(), d.mte.is_some());
            if let (Some(a), Some(b)) = (m.mte, d.mte) {
                prop_assert!((a - b).abs() < 1e-9);
            }
            prop_assert!((m.oa - d.oa).abs() < 1e-9);
            for i in 0..th.len() {
                let lib_aj = m.aj.as_ref().map(|v| v[i]);
                prop_assert_eq!(lib_aj.is_some(), d.aj[i].is_some());
                if let (Some(a), Some(b)) = (lib_aj, d.aj[i]) {
                    prop_assert!((a - b).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn unit_gamma_is_mean_l1(
        data in prop::collection::vec((-2.0f64..2.0, -2.0f64..2.0, any::<bool>()), 1..40),
        m in 1usize..4,
    ) {
        let n = data.len();
        let gt: Vec<f64> = data.iter().flat_map(|d| [d.1, 0.0, d.1]).collect();
        let mask: Vec<bool> = data.iter().map(|d| d.2).collect();
        let pred: Vec<f64> = (0..m).flat_map(|mm| data.iter().flat_map(move |d| [d.0 + mm as f64, 0.5, d.1])).collect();
        let l = loss_xyz(&pred, &gt, &mask, [1, m, n, 1], 1.0).unwrap();
        let (mut sum, mut count) = (0.0, 0);
        for mm in 0..m {
            for (i, d) in data.iter().enumerate() {
                if mask[i] {
                    sum += (d.0 + mm as f64 - d.1).abs() + 0.5 + (d.1 - d.1).abs();
                    count += 1;
                }
            }
        }
        let want = if count == 0 { 0.0 } else { sum / count as f64 };
        prop_assert!((l - want).abs() < 1e-9);
    }

    #[test]
    fn vis_loss_symmetric_under_label_and_sign_swap(
        data in prop::collection::vec((-6.0f64..6.0, any::<bool>(), any::<bool>()), 1..40),
    ) {
        let x: Vec<f64> = data.iter().map(|d| d.0).collect();
        let y: Vec<bool> = data.iter().map(|d| d.1).collect();
        let m: Vec<bool> = data.iter().map(|d| d.2).collect();
        let nx: Vec<f64> = x.iter().map(|v| -v).collect();
        let ny: Vec<bool> = y.iter().map(|v| !v).collect();
        let a = loss_vis(&x, &y, &m).unwrap();
        let b = loss_vis(&nx, &ny, &m).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }
}
