use proptest::collection::vec;
use proptest::prelude::*;

use sctn::config::RunConfig;
use sctn::container::Container;
use sctn::data::{resample, segment, TrackRecord};
use sctn::metrics::{ade, fde, rmse, rmse_with, RmseMode};
use sctn::model::Profile;
use sctn::numcore::{Graph, Tensor};
use sctn::scene::Scene;

fn metric_case() -> impl Strategy<Value = (usize, usize, Vec<f64>, Vec<f64>, Vec<bool>)> {
    (1usize..=6, 1usize..=8).prop_flat_map(|(n, t)| {
        (
            Just(n),
            Just(t),
            vec(-50.0..50.0f64, n * t * 2),
            vec(-50.0..50.0f64, n * t * 2),
            vec(any::<bool>(), n).prop_map(|mut m| {
                m[0] = true;
                m
            }),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig {
        cases: 64,
        failure_persistence: None,
        ..ProptestConfig::default()
    })]

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..5, cols in 1usize..7, seed in vec(-300.0..300.0f64, 35)) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![rows, cols], seed[..rows * cols].to_vec()).unwrap());
        let s = g.softmax(x, 1).unwrap();
        for row in g.value(s).data().chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn metrics_are_translation_invariant((n, t, p, q, mask) in metric_case(), dx in -1e3..1e3f64, dy in -1e3..1e3f64) {
        let shift = |v: &[f64]| {
            let d: Vec<f64> = v.chunks(2).flat_map(|c| [c[0] + dx, c[1] + dy]).collect();
            Tensor::new(vec![n, t, 2], d).unwrap()
        };
        let (pred, gt) = (Tensor::new(vec![n, t, 2], p.clone()).unwrap(), Tensor::new(vec![n, t, 2], q.clone()).unwrap());
        let (ps, gs) = (shift(&p), shift(&q));
        for h in 1..=t {
            prop_assert!((ade(&pred, &gt, &mask, h).unwrap() - ade(&ps, &gs, &mask, h).unwrap()).abs() < 1e-9);
            prop_assert!((fde(&pred, &gt, &mask, h).unwrap() - fde(&ps, &gs, &mask, h).unwrap()).abs() < 1e-9);
            prop_assert!((rmse(&pred, &gt, &mask, h).unwrap() - rmse(&ps, &gs, &mask, h).unwrap()).abs() < 1e-9);
        }
    }

    #[test]
    fn fde_is_ade_of_the_final_frame((n, t, p, q, mask) in metric_case()) {
        let pred = Tensor::new(vec![n, t, 2], p.clone()).unwrap();
        let gt = Tensor::new(vec![n, t, 2], q.clone()).unwrap();
        let last = |v: &[f64]| {
            let d: Vec<f64> = (0..n).flat_map(|a| v[(a * t + t - 1) * 2..(a * t + t) * 2].to_vec()).collect();
            Tensor::new(vec![n, 1, 2], d).unwrap()
        };
        let single = ade(&last(&p), &last(&q), &mask, 1).unwrap();
        prop_assert!((fde(&pred, &gt, &mask, t).unwrap() - single).abs() < 1e-12);
    }

    #[test]
    fn rmse_dominates_ade((n, t, p, q, mask) in metric_case()) {
        let pred = Tensor::new(vec![n, t, 2], p).unwrap();
        let gt = Tensor::new(vec![n, t, 2], q).unwrap();
        for h in 1..=t {
            let a = ade(&pred, &gt, &mask, h).unwrap();
            prop_assert!(rmse(&pred, &gt, &mask, h).unwrap() >= a - 1e-12);
            // Per-coordinate RMSE is the Euclidean one divided by sqrt(2).
            let pc = rmse_with(&pred, &gt, &mask, h, RmseMode::PerCoordinate).unwrap();
            prop_assert!((pc * 2f64.sqrt() - rmse(&pred, &gt, &mask, h).unwrap()).abs() < 1e-9);
        }
    }

    #[test]
    fn container_round_trip_is_bit_exact(
        meta in "[ -~]{0,40}",
        tensors in vec((1usize..4, 1usize..5, vec(-1e6..1e6f32, 20)), 0..5),
    ) {
        let mut c = Container::new(meta.clone());
        for (i, (a, b, data)) in tensors.iter().enumerate() {
            c.insert(format!("t{i}/x"), Tensor::new(vec![*a, *b], data[..a * b].to_vec()).unwrap()).unwrap();
        }
        let bytes = c.to_bytes();
        let back = Container::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back.meta, &meta);
        prop_assert_eq!(back.to_bytes(), bytes);
        for (i, (a, b, data)) in tensors.iter().enumerate() {
            let t = back.get(&format!("t{i}/x")).unwrap();
            prop_assert_eq!(t.shape(), &[*a, *b][..]);
            let bits: Vec<u32> = t.data().iter().map(|v| v.to_bits()).collect();
            let want: Vec<u32> = data[..a * b].iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(bits, want);
        }
    }

    #[test]
    fn truncated_containers_are_rejected(cut in 0usize..60) {
        let mut c = Container::new("{}");
        c.insert("w", Tensor::new(vec![2, 3], vec![1.0f32; 6]).unwrap()).unwrap();
        let bytes = c.to_bytes();
        let cut = cut.min(bytes.len() - 1);
        prop_assert!(Container::from_bytes(&bytes[..cut]).is_err());
    }

    #[test]
    fn window_count_matches_closed_form(first in 0i64..50, frames in 1usize..200, factor in 1usize..4, stride in 1usize..8, len in 1usize..45) {
        let records: Vec<TrackRecord> = (0..frames as i64)
            .map(|i| TrackRecord { vehicle_id: 7, frame_id: first + i, x: 0.0, y: i as f64 })
            .collect();
        let kept = resample(&records, factor);
        prop_assert_eq!(kept.len(), frames.div_ceil(factor));
        let windows = segment(&kept, factor, stride, len);
        let expected = if kept.len() >= len { (kept.len() - len) / stride + 1 } else { 0 };
        prop_assert_eq!(windows.len(), expected);
    }

    #[test]
    fn normalization_round_trips(mut points in vec(-1e4..1e4f64, 3 * 5 * 2), last in 0usize..5) {
        points[2 * 5 * 2..].fill(0.0);
        let scene = Scene::new(3, 5, points.clone(), vec![true, true, false], 0).unwrap();
        let back = scene.normalized(last).unwrap().denormalized();
        for (a, b) in back.positions().iter().zip(&points).take(2 * 5 * 2) {
            prop_assert!((a - b).abs() < 1e-9);
        }
        let [x, y] = scene.normalized(last).unwrap().point(0, last);
        prop_assert!(x.abs() < 1e-9 && y.abs() < 1e-9);
    }

    #[test]
    fn config_text_round_trips(seed in any::<u64>(), heads in 1usize..5, per_head in 1usize..9, lr in 1e-5..1e-1f64, se in any::<bool>()) {
        let flags = vec![
            ("seed".to_string(), seed.to_string()),
            ("heads".to_string(), heads.to_string()),
            ("model_dim".to_string(), (heads * per_head).to_string()),
            ("lr".to_string(), lr.to_string()),
            ("se".to_string(), if se { "on" } else { "off" }.to_string()),
        ];
        let cfg = RunConfig::resolve(&[], &flags, Some(Profile::Desk)).unwrap();
        let text = cfg.to_text();
        let again = RunConfig::resolve(&sctn::config::parse_config_text(&text).unwrap(), &[], None).unwrap();
        prop_assert_eq!(again, cfg);
    }
}
