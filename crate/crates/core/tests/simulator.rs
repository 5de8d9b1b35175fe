//! Rendering, feature and evaluation oracles for the scene simulator.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mv2d::geometry::project_world_to_pixel;
use mv2d::simulator::{
    average_precision, eval_3d_center_distance, eval_projected_2d, generate_scene, project_box3d_unclipped,
    render_boxes, synth_feature_maps, Box3D, Detection3D, FeatureSynthConfig, SceneConfig,
};

#[test]
fn interior_points_project_inside_unclipped_box() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let (mut in_front, mut violations) = (0, 0);
    let scenes: Vec<_> = (0..100).map(|s| generate_scene(s, &SceneConfig::default()).unwrap()).collect();
    for trial in 0..10_000usize {
        let scene = &scenes[trial / 100];
        let b = &scene.objects[rng.random_range(0..scene.objects.len())];
        let view = &scene.rig[rng.random_range(0..scene.rig.len())];
        let p = b.local_to_world(std::array::from_fn(|_| rng.random_range(-1.0..=1.0)));
        let Some((u, v, _)) = project_world_to_pixel(view, &p).visible() else {
            continue;
        };
        in_front += 1;
        let bb = project_box3d_unclipped(view, b).expect("a visible point implies a box");
        let tol = 1e-9 * (1.0 + bb.x_min.abs().max(bb.x_max.abs()).max(bb.y_min.abs()).max(bb.y_max.abs()));
        if !(u >= bb.x_min - tol && u <= bb.x_max + tol && v >= bb.y_min - tol && v <= bb.y_max + tol) {
            violations += 1;
        }
    }
    assert!(in_front > 1000);
    assert_eq!(violations, 0, "{violations} of {in_front} points outside");
}

#[test]
fn object_cells_separate_from_background() {
    let channels = 16;
    let noise_std = 0.05;
    // distance between two independent noise draws of the same cell
    let floor = noise_std * (2.0 * channels as f64).sqrt();
    let (mut cells, mut above, mut total) = (0usize, 0usize, 0.0);
    for seed in 0..100u64 {
        let scene = generate_scene(seed, &SceneConfig::default()).unwrap();
        let mut empty = scene.clone();
        empty.objects.clear();
        for view in &scene.rig {
            let full = synth_feature_maps(&scene, view, channels, 16, &FeatureSynthConfig { noise_std, seed }).unwrap();
            let bare = synth_feature_maps(&empty, view, channels, 16, &FeatureSynthConfig { noise_std, seed: seed + 1_000 })
                .unwrap();
            let boxes = render_boxes(&scene.objects, view);
            for row in 0..full.height() {
                for col in 0..full.width() {
                    let (u, v) = (col as f64 * 16.0 + 8.0, row as f64 * 16.0 + 8.0);
                    if !boxes.iter().any(|b| b.contains_strict(u, v)) {
                        continue;
                    }
                    let d = full
                        .cell(row, col)
                        .iter()
                        .zip(bare.cell(row, col))
                        .map(|(a, b)| (a - b).powi(2))
                        .sum::<f64>()
                        .sqrt();
                    cells += 1;
                    total += d;
                    above += usize::from(d > floor);
                }
            }
        }
    }
    assert!(cells > 1000);
    let frac = above as f64 / cells as f64;
    assert!(frac > 0.99, "only {frac:.3} of object cells above the noise floor");
    assert!(total / cells as f64 > 5.0 * floor);
}

/// 101-point interpolated AP computed straight from the definition.
fn ap_oracle(flags: &[bool], n_gt: usize) -> f64 {
    let points: Vec<(usize, usize)> = (1..=flags.len())
        .map(|k| (flags[..k].iter().filter(|f| **f).count(), k))
        .collect();
    (0..=100)
        .map(|r| {
            points
                .iter()
                .filter(|(tp, _)| *tp * 100 >= r * n_gt)
                .map(|(tp, k)| *tp as f64 / *k as f64)
                .fold(0.0, f64::max)
        })
        .sum::<f64>()
        / 101.0
}

#[test]
fn ap_matches_direct_enumeration() {
    let cases: [(&[bool], usize); 5] = [
        (&[true, true, true], 3),
        (&[true, false, true, false], 2),
        (&[false, false, true], 4),
        (&[true, false, false, true, true, false, true], 5),
        (&[], 2),
    ];
    for (flags, n_gt) in cases {
        let got = average_precision(flags, n_gt).ap;
        assert!((got - ap_oracle(flags, n_gt)).abs() < 1e-6, "{flags:?}/{n_gt}: {got}");
    }
}

#[test]
fn projected_ap_with_duplicates_matches_enumeration() {
    let scene = generate_scene(12, &SceneConfig::default()).unwrap();
    let n = scene.objects.len();
    // originals and lower-scored exact duplicates with interleaved scores
    let mut preds = Vec::new();
    for (i, o) in scene.objects.iter().enumerate() {
        preds.push(Detection3D { bbox: *o, score: 1.0 - i as f64 / (2 * n) as f64 });
        preds.push(Detection3D { bbox: *o, score: 0.9 - i as f64 / (2 * n) as f64 });
    }
    let eval = eval_projected_2d(&preds, &scene.objects, &scene.rig, 0.5);
    assert!(!eval.per_class.is_empty());
    for (&class, curve) in &eval.per_class {
        let mut dets: Vec<(f64, bool)> = Vec::new();
        for view in &scene.rig {
            let visible = render_boxes(&scene.objects, view);
            for (k, p) in preds.iter().enumerate().filter(|(_, p)| p.bbox.class_id == class) {
                if visible.iter().any(|b| b.object_id == Some(p.bbox.object_id)) {
                    dets.push((p.score, k % 2 == 0));
                }
            }
        }
        dets.sort_by(|a, b| b.0.total_cmp(&a.0));
        let flags: Vec<bool> = dets.iter().map(|d| d.1).collect();
        let n_gt = flags.iter().filter(|f| **f).count();
        assert_eq!(curve.n_gt, n_gt);
        assert!((curve.ap - ap_oracle(&flags, n_gt)).abs() < 1e-6, "class {class}");
    }
}

/// Largest number of same-class pairs within `thr` over all one-to-one matchings.
fn max_matching(preds: &[Detection3D], gts: &[Box3D], thr: f64) -> usize {
    fn rec(p: usize, preds: &[Detection3D], gts: &[Box3D], thr: f64, used: &mut [bool]) -> usize {
        if p == preds.len() {
            return 0;
        }
        let mut best = rec(p + 1, preds, gts, thr, used);
        for j in 0..gts.len() {
            let ok = !used[j]
                && gts[j].class_id == preds[p].bbox.class_id
                && (gts[j].center_point() - preds[p].bbox.center_point()).norm() <= thr;
            if ok {
                used[j] = true;
                best = best.max(1 + rec(p + 1, preds, gts, thr, used));
                used[j] = false;
            }
        }
        best
    }
    rec(0, preds, gts, thr, &mut vec![false; gts.len()])
}

#[test]
fn centre_matching_agrees_with_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for seed in 0..50u64 {
        let cfg = SceneConfig {
            n_objects: rng.random_range(1..=7),
            ..Default::default()
        };
        let scene = generate_scene(seed, &cfg).unwrap();
        let mut preds = Vec::new();
        for o in &scene.objects {
            if rng.random_bool(0.8) {
                let mut b = *o;
                b.center[0] += rng.random_range(-1.5..1.5);
                b.center[1] += rng.random_range(-1.5..1.5);
                preds.push(Detection3D { bbox: b, score: rng.random_range(0.0..1.0) });
            }
        }
        for _ in 0..rng.random_range(0..3) {
            let mut b = scene.objects[0];
            b.center = [rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0), 1.0];
            preds.push(Detection3D { bbox: b, score: rng.random_range(0.0..1.0) });
        }
        let e = eval_3d_center_distance(&preds, &scene.objects, 2.0);
        assert_eq!(e.true_positives, max_matching(&preds, &scene.objects, 2.0), "seed {seed}");
        assert_eq!(e.recall, e.true_positives as f64 / scene.objects.len() as f64);
    }
}
