//! End-to-end flows across modules: manifest loading, splitting,
//! fitting, persistence, synthesis, refinement and scoring.

use lrf::dataset::{build_design_set, load_manifest, split, SplitSpec};
use lrf::evaluation::{fit_from_pairs, model_mse_x100, FitSpec, SolverKind};
use lrf::refinement::{compute_alpha, refine, AlphaParams};
use lrf::{ChannelStrategy, ImageBuffer, ImagePair, SparseRowModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Pairs related by a fixed random 3x3-local linear map around mid-gray,
/// with optional uniform noise. Values stay well inside [0, 1].
fn local_pairs(rng: &mut ChaCha8Rng, n: usize, side: usize, noise: f64) -> Vec<ImagePair> {
    let topology =
        lrf::Topology::build(lrf::RfGeometry::square(side, 3, 1)).expect("valid geometry");
    let true_rows: Vec<Vec<f64>> = topology
        .rows()
        .iter()
        .map(|idx| idx.iter().map(|_| rng.gen_range(-0.1..0.1)).collect())
        .collect();
    (0..n)
        .map(|_| {
            let x: Vec<f64> = (0..side * side).map(|_| rng.gen_range(0.25..0.75)).collect();
            let y: Vec<f64> = topology
                .rows()
                .iter()
                .zip(&true_rows)
                .map(|(idx, weights)| {
                    let lin: f64 = idx
                        .iter()
                        .zip(weights)
                        .map(|(&j, w)| w * (x[j as usize] - 0.5))
                        .sum();
                    let eps = if noise > 0.0 { rng.gen_range(-noise..noise) } else { 0.0 };
                    (0.5 + lin + eps).clamp(0.0, 1.0)
                })
                .collect();
            ImagePair::new(
                ImageBuffer::new(side, side, 1, x).unwrap(),
                ImageBuffer::new(side, side, 1, y).unwrap(),
            )
            .unwrap()
        })
        .collect()
}

#[test]
fn manifest_to_refined_output_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let pairs = local_pairs(&mut rng, 20, 10, 0.01);

    // Persist the pairs as PNG files plus a relative-path manifest.
    let mut lines = String::new();
    for (i, pair) in pairs.iter().enumerate() {
        pair.input.save(&dir.path().join(format!("x{i}.png"))).unwrap();
        pair.target.save(&dir.path().join(format!("y{i}.png"))).unwrap();
        lines.push_str(&format!("x{i}.png,y{i}.png\n"));
    }
    let manifest = dir.path().join("pairs.csv");
    std::fs::write(&manifest, lines).unwrap();

    let loaded = load_manifest(&manifest).unwrap();
    assert_eq!(loaded.len(), 20);

    let (train, _val, test) =
        split(loaded, &SplitSpec::new(0.8, 0.1, 0.1, 42).unwrap()).unwrap();
    assert_eq!((train.len(), test.len()), (16, 2));

    let spec = FitSpec::new(SolverKind::Masked, ChannelStrategy::Grayscale).with_rf(3, 1);
    let model = fit_from_pairs(&train, &spec, 0.01).unwrap();

    // Persistence: the file round-trips to the same bytes.
    let model_path = dir.path().join("map.lrm");
    model.save(&model_path).unwrap();
    let reloaded = SparseRowModel::load(&model_path).unwrap();
    assert_eq!(
        reloaded.to_bytes().unwrap(),
        model.to_bytes().unwrap(),
        "save/load changed the model"
    );

    // The fit generalizes: quantization noise (8-bit files) plus the
    // injected uniform noise bound the held-out error.
    let score = model_mse_x100(&reloaded, &test).unwrap();
    assert!(score < 0.02, "held-out mse_x100 was {score}");

    // Refinement stays within the per-pixel convex envelope.
    let x = &test[0].input;
    let y = reloaded.synthesize(x).unwrap();
    let params = AlphaParams::for_size(10, 10);
    let alpha = compute_alpha(&reloaded, &params).unwrap();
    let refined = refine(x, &y, &alpha).unwrap();
    for ((r, a), b) in refined.data().iter().zip(x.data()).zip(y.data()) {
        let (lo, hi) = (a.min(*b), a.max(*b));
        assert!(*r >= lo - 1e-12 && *r <= hi + 1e-12);
    }
}

#[test]
fn identity_task_puts_importance_on_weights_not_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pairs: Vec<ImagePair> = (0..6)
        .map(|_| {
            let data: Vec<f64> = (0..36).map(|_| rng.gen_range(0.0..1.0)).collect();
            let img = ImageBuffer::new(6, 6, 1, data).unwrap();
            ImagePair::new(img.clone(), img).unwrap()
        })
        .collect();
    let spec = FitSpec::new(SolverKind::Masked, ChannelStrategy::Grayscale).with_rf(1, 1);
    let model = fit_from_pairs(&pairs, &spec, 1e-6).unwrap();

    let inputs: Vec<ImageBuffer> = pairs.iter().map(|p| p.input.clone()).collect();
    let importance = model.relative_importance(&inputs).unwrap();
    assert!(
        importance.bias_mean < 1e-3,
        "identity task should not lean on biases, got {}",
        importance.bias_mean
    );
    assert!(importance.ratio > 100.0, "ratio was {}", importance.ratio);
}

fn gray_to_rgb(img: &ImageBuffer) -> ImageBuffer {
    let plane = img.plane(0).to_vec();
    let mut data = plane.clone();
    data.extend_from_slice(&plane);
    data.extend_from_slice(&plane);
    ImageBuffer::new(img.height(), img.width(), 3, data).unwrap()
}

/// With R=G=B everywhere every strategy reduces to the same scalar
/// problem: the unregularized normal equations coincide, so outputs
/// agree as λ → 0. At finite λ the channel-stacked design triples the
/// data term, which is checked separately below.
#[test]
fn equal_channel_images_make_color_strategies_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let pairs: Vec<ImagePair> = local_pairs(&mut rng, 21, 6, 0.0)
        .into_iter()
        .map(|p| ImagePair::new(gray_to_rgb(&p.input), gray_to_rgb(&p.target)).unwrap())
        .collect();

    let probe = pairs[20].input.clone();
    let train = &pairs[..20];
    let mut outputs = Vec::new();
    for strategy in [
        ChannelStrategy::PerChannel,
        ChannelStrategy::ReplicateGray,
        ChannelStrategy::JointColor,
    ] {
        let spec = FitSpec::new(SolverKind::Masked, strategy).with_rf(3, 1);
        let model = fit_from_pairs(train, &spec, 1e-12).unwrap();
        outputs.push(model.synthesize_raw(&probe).unwrap());
    }
    for raw in &outputs {
        for plane in raw {
            for (a, b) in plane.iter().zip(&outputs[0][0]) {
                assert!((a - b).abs() < 1e-10, "strategies disagree: {a} vs {b}");
            }
        }
    }
}

/// At finite λ the joint objective sums the data term over channels
/// while the penalty stays fixed, so on R=G=B images the joint fit at
/// C·λ equals the per-channel fit at λ.
#[test]
fn joint_color_penalty_scales_with_channel_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let pairs: Vec<ImagePair> = local_pairs(&mut rng, 20, 6, 0.0)
        .into_iter()
        .map(|p| ImagePair::new(gray_to_rgb(&p.input), gray_to_rgb(&p.target)).unwrap())
        .collect();

    let per = fit_from_pairs(
        &pairs,
        &FitSpec::new(SolverKind::Masked, ChannelStrategy::PerChannel).with_rf(3, 1),
        0.5,
    )
    .unwrap();
    let joint = fit_from_pairs(
        &pairs,
        &FitSpec::new(SolverKind::Masked, ChannelStrategy::JointColor).with_rf(3, 1),
        3.0 * 0.5,
    )
    .unwrap();
    for (row_p, row_j) in per.map(0).iter().zip(joint.map(0)) {
        assert_eq!(row_p.indices, row_j.indices);
        assert!((row_p.bias - row_j.bias).abs() < 1e-10);
        for (a, b) in row_p.weights.iter().zip(&row_j.weights) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }
}

#[test]
fn joint_color_on_grayscale_matches_plain_grayscale() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let pairs = local_pairs(&mut rng, 8, 5, 0.0);

    let designs_gray = build_design_set(&pairs, ChannelStrategy::Grayscale).unwrap();
    let designs_joint = build_design_set(&pairs, ChannelStrategy::JointColor).unwrap();
    assert_eq!(designs_gray.len(), 1);
    assert_eq!(designs_joint.len(), 1);
    assert_eq!(designs_gray[0].x(), designs_joint[0].x());
    assert_eq!(designs_gray[0].t(), designs_joint[0].t());

    let gray = fit_from_pairs(
        &pairs,
        &FitSpec::new(SolverKind::Masked, ChannelStrategy::Grayscale).with_rf(3, 1),
        0.3,
    )
    .unwrap();
    let joint = fit_from_pairs(
        &pairs,
        &FitSpec::new(SolverKind::Masked, ChannelStrategy::JointColor).with_rf(3, 1),
        0.3,
    )
    .unwrap();
    assert_eq!(gray.channel_maps(), joint.channel_maps());
}
