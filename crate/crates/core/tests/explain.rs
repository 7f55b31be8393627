use fundus_core::explain::{
    cam_from_activations, colormap, grad_cam, grad_cam_graph, overlay, read_heatmap_csv, region_mass, upsample,
    write_heatmap_csv, Heatmap,
};
use fundus_core::kernels::conv::ConvGeom;
use fundus_core::modelzoo::{build_model, Backbone, ModelSpec, Pretrained, Regime};
use fundus_core::{Error, Graph, PlanarImage, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const X: [f32; 16] = [
    0.2, -0.5, 1.0, 0.3, //
    0.7, 0.1, -0.2, 0.9, //
    -0.4, 0.6, 0.8, -0.1, //
    0.5, -0.3, 0.4, 1.2,
];
const K: [[f32; 9]; 3] = [
    [0.1, 0.2, -0.1, 0.0, 0.5, 0.3, -0.2, 0.1, 0.4],
    [-0.3, 0.2, 0.1, 0.4, -0.1, 0.2, 0.3, -0.2, 0.1],
    [0.2, 0.2, 0.2, -0.1, -0.1, -0.1, 0.3, 0.0, -0.3],
];
const W: [[f32; 3]; 2] = [[0.5, -1.0, 0.8], [-0.7, 1.5, 0.6]];

/// conv3x3 (pad 1, 3 channels) -> ReLU -> tap -> global average -> linear.
fn toy(g: &mut Graph, w: [[f32; 3]; 2]) -> (fundus_core::Var, fundus_core::Var) {
    let x = g.input(Tensor::new([1, 1, 4, 4], X.to_vec()), true);
    let k = g.constant(Tensor::new([3, 1, 3, 3], K.concat()));
    let a = g.conv2d(x, k, None, ConvGeom::new(1, 1, 1)).unwrap();
    let a = g.relu(a);
    g.tap("a", a);
    let p = g.global_avg_pool(a).unwrap();
    let lw = g.constant(Tensor::new([2, 3], w.concat()));
    let y = g.linear(p, lw, None).unwrap();
    (a, y)
}

fn hand_activations() -> Vec<Vec<f64>> {
    (0..3)
        .map(|k| {
            let mut out = vec![0.0; 16];
            for i in 0..4i32 {
                for j in 0..4i32 {
                    let mut s = 0.0f64;
                    for di in -1..=1i32 {
                        for dj in -1..=1i32 {
                            let (r, c) = (i + di, j + dj);
                            if (0..4).contains(&r) && (0..4).contains(&c) {
                                s += X[(r * 4 + c) as usize] as f64 * K[k][((di + 1) * 3 + dj + 1) as usize] as f64;
                            }
                        }
                    }
                    out[(i * 4 + j) as usize] = s.max(0.0);
                }
            }
            out
        })
        .collect()
}

#[test]
fn toy_cnn_matches_hand_computed_map() {
    let acts = hand_activations();
    for class in 0..2 {
        let mut g = Graph::inference();
        let (a, y) = toy(&mut g, W);
        let heat = grad_cam_graph(&g, a, y, class, "a", 4).unwrap();
        // d logit / d A_k(i, j) = W[class][k] / 16 for every cell
        let mut want: Vec<f64> = (0..16)
            .map(|p| (0..3).map(|k| W[class][k] as f64 / 16.0 * acts[k][p]).sum::<f64>().max(0.0))
            .collect();
        let m = want.iter().cloned().fold(0.0, f64::max);
        assert!(m > 0.0);
        for v in &mut want {
            *v /= m;
        }
        for (got, w) in heat.values.iter().zip(&want) {
            assert!((*got as f64 - w).abs() < 1e-5, "class {class}: {got} vs {w}");
        }
    }
}

#[test]
fn constant_score_gives_zero_map() {
    let mut g = Graph::inference();
    let (a, y) = toy(&mut g, [[0.0; 3], [0.3, 0.1, 0.2]]);
    let heat = grad_cam_graph(&g, a, y, 0, "a", 224).unwrap();
    assert_eq!((heat.width, heat.height), (224, 224));
    assert!(heat.values.iter().all(|&v| v == 0.0));
}

#[test]
fn missing_gradient_is_a_state_error() {
    let mut g = Graph::inference();
    let x = g.input(Tensor::new([1, 1, 4, 4], X.to_vec()), false);
    let k = g.constant(Tensor::new([1, 1, 3, 3], K[0].to_vec()));
    let a = g.conv2d(x, k, None, ConvGeom::new(1, 1, 1)).unwrap();
    let p = g.global_avg_pool(a).unwrap();
    let lw = g.input(Tensor::new([2, 1], vec![1.0, -1.0]), true);
    let y = g.linear(p, lw, None).unwrap();
    assert!(matches!(grad_cam_graph(&g, a, y, 1, "a", 4), Err(Error::State(_))));
    assert!(matches!(grad_cam_graph(&g, p, y, 1, "pooled", 4), Err(Error::UnsupportedLayer { .. })));
}

fn image(seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new([3, 224, 224], (0..3 * 224 * 224).map(|_| rng.random_range(-1.5f32..1.5)).collect())
}

#[test]
fn real_backbone_maps_and_logit_shift_invariance() {
    let mut m = build_model(&ModelSpec::new(Backbone::MobilenetV2, Regime::FullFinetune), &Pretrained::Random, 4).unwrap();
    let x = image(1);
    let h = grad_cam(&m, &x, "features", 1).unwrap();
    assert_eq!((h.width, h.height, h.values.len()), (224, 224, 224 * 224));
    assert!(h.values.iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(h.max() >= 0.96 && h.max() <= 1.0);
    assert_eq!(h.source_layer, "features");

    // shifting the other class's logit leaves the map unchanged
    let bias = m.store().by_name("classifier.bias").unwrap().clone();
    let mut shifted = bias.data().to_vec();
    shifted[0] += 3.0;
    m.store_mut().assign("classifier.bias", Tensor::new([2], shifted)).unwrap();
    assert_eq!(grad_cam(&m, &x, "features", 1).unwrap(), h);

    // a zero weight row makes the class score independent of the features
    let w = m.store().by_name("classifier.weight").unwrap().clone();
    let mut zeroed = w.data().to_vec();
    zeroed[1280..].iter_mut().for_each(|v| *v = 0.0);
    m.store_mut().assign("classifier.weight", Tensor::new([2, 1280], zeroed)).unwrap();
    assert!(grad_cam(&m, &x, "features", 1).unwrap().values.iter().all(|&v| v == 0.0));

    assert!(matches!(grad_cam(&m, &x, "blocks.3", 0), Err(Error::UnsupportedLayer { .. })));
}

#[test]
fn transformers_are_rejected() {
    let m = build_model(&ModelSpec::new(Backbone::VitTiny, Regime::FullFinetune), &Pretrained::Random, 0).unwrap();
    assert!(matches!(grad_cam(&m, &image(2), "features", 0), Err(Error::UnsupportedLayer { .. })));
}

#[test]
fn upsampling_keeps_the_peak_near_its_source_cell() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..30 {
        let mut coarse: Vec<f32> = (0..49).map(|_| 0.8 * rng.random::<f32>()).collect();
        let ci = rng.random_range(0..49);
        coarse[ci] = 1.0;
        let up = upsample(&coarse, 7, 7, 224, 224);
        let (ui, _) = up.iter().enumerate().fold((0, -1.0), |b, (i, &v)| if v > b.1 { (i, v) } else { b });
        let (uy, ux) = (ui / 224 / 32, ui % 224 / 32);
        let (cy, cx) = (ci / 7, ci % 7);
        assert!(uy.abs_diff(cy) <= 1 && ux.abs_diff(cx) <= 1);
        assert!(up.iter().all(|&v| v <= 1.0 + 1e-6));
    }
}

#[test]
fn normalized_maps_are_fixed_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = Tensor::new([4, 3, 3], (0..36).map(|_| rng.random_range(-1.0f32..1.0)).collect());
    let g = Tensor::new([4, 3, 3], (0..36).map(|_| rng.random_range(-1.0f32..1.0)).collect());
    let once = cam_from_activations(&a, &g).unwrap();
    let again = cam_from_activations(&Tensor::new([1, 3, 3], once.clone()), &Tensor::full([1, 3, 3], 1.0)).unwrap();
    assert_eq!(once, again);
}

fn heat(values: Vec<f32>, size: usize) -> Heatmap {
    Heatmap {
        width: size,
        height: size,
        values,
        source_layer: "features".into(),
        target_class: 1,
    }
}

#[test]
fn overlay_endpoints() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let img = PlanarImage::new(20, 20, (0..1200).map(|_| rng.random::<f32>()).collect()).unwrap();
    let h = heat((0..400).map(|i| (i % 7) as f32 / 6.0).collect(), 20);
    assert_eq!(overlay(&img, &h, 0.0).unwrap(), img);
    let zero = overlay(&img, &heat(vec![0.0; 49], 7), 1.0).unwrap();
    assert_eq!((zero.width, zero.height), (20, 20));
    let c = colormap(0.0);
    for ch in 0..3 {
        assert!(zero.plane(ch).iter().all(|&v| v == c[ch]));
    }
    assert!(matches!(overlay(&img, &h, 1.5), Err(Error::Parameter(_))));
}

#[test]
fn region_mass_and_csv_grid() {
    let size = 40;
    let centre: Vec<f32> = (0..size * size)
        .map(|i| {
            let (x, y) = ((i % size) as f32 - 19.5, (i / size) as f32 - 19.5);
            (1.0 - (x * x + y * y).sqrt() / 28.0).max(0.0)
        })
        .collect();
    let h = heat(centre, size);
    let (inside, outside) = region_mass(&h, 0.25);
    assert!(inside > outside);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("grid.csv");
    write_heatmap_csv(&p, &h).unwrap();
    let rows = read_heatmap_csv(&p).unwrap();
    assert_eq!(rows.len(), size);
    assert_eq!(rows.concat(), h.values);
}
