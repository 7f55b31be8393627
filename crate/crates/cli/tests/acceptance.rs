//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! `FUNDUS_ACCEPTANCE_ONLY=3,7` restricts the run to the listed criteria.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use fundus_core::dataset::{fuse_labels, read_pair_manifest, read_sample_manifest, stratified_split};
use fundus_core::distillation::{distill_train, kd_loss_f64, KdConfig, KlDirection};
use fundus_core::evaluation::{roc_curve, ConfusionCounts};
use fundus_core::explain::{grad_cam, grad_cam_graph};
use fundus_core::kernels::conv::ConvGeom;
use fundus_core::loader::{Example, ImageRef, ImageSet};
use fundus_core::modelzoo::{build_model, build_siamese, count_trainable_params, Backbone, ModelSpec, Pretrained, Regime};
use fundus_core::synthdata::{generate_dataset, generate_image, SynthSpec};
use fundus_core::training::{cross_entropy_f64, train, EarlyStopping, PlateauScheduler, TrainConfig, TrainOutputs};
use fundus_core::{Graph, Label, ModelHandle, SiameseSpec, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = std::result::Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: std::result::Result<T, E>) -> std::result::Result<T, String> {
    r.map_err(|e| e.to_string())
}

// 1

fn census() -> Check {
    let frozen = [
        (Backbone::VitTiny, 386),
        (Backbone::DeitTiny, 386),
        (Backbone::VitBase, 1538),
        (Backbone::DeitBase, 1538),
        (Backbone::Densenet121, 2050),
        (Backbone::SwinBase, 2050),
        (Backbone::EfficientnetB0, 2562),
        (Backbone::MobilenetV2, 2562),
        (Backbone::Resnet50, 4098),
    ];
    for (b, want) in frozen {
        let m = ok(build_model(&ModelSpec::new(b, Regime::FrozenBackbone), &Pretrained::Random, 0))?;
        let got = count_trainable_params(&m);
        ensure!(got == want, "{b} frozen: {got} != {want}");
    }
    let m = ok(build_model(&ModelSpec::new(Backbone::MobilenetV2, Regime::FullFinetune), &Pretrained::Random, 0))?;
    let ft = count_trainable_params(&m);
    ensure!(ft == 2_226_434, "mobilenet_v2 full fine-tune {ft}");
    let s = ok(build_siamese(&SiameseSpec::default(), &Pretrained::Random, 0))?;
    let total = count_trainable_params(&s);
    ensure!(total == 2_404_418, "siamese {total}");
    Ok(format!("9 frozen heads, mobilenet_v2 ft {ft}, siamese {total}"))
}

// 2

fn softmax(z: &[f64], t: f64) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| ((v - m) / t).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn kd_oracle() -> Check {
    let cfg = |alpha| KdConfig {
        temperature: 2.0,
        alpha,
        kl_direction: KlDirection::TeacherToStudent,
        label_smoothing: 0.0,
    };
    let (zs, zt) = ([2.0, 0.0], [0.0, 2.0]);
    let v = ok(kd_loss_f64(&zs, &zt, 2, &[1], &cfg(0.7)))?.0;
    let want = 2.8 * 0.5f64.tanh() + 0.3 * (1.0 + 2f64.exp()).ln();
    ensure!((v - 1.93201).abs() < 1e-4 && (v - want).abs() < 1e-12, "kd loss {v} vs {want}");
    let ce = -softmax(&zs, 1.0)[1].ln();
    let a0 = ok(kd_loss_f64(&zs, &zt, 2, &[1], &cfg(0.0)))?.0;
    ensure!((a0 - ce).abs() < 1e-12, "alpha=0 gives {a0}, hard CE {ce}");
    let (ps, pt) = (softmax(&zs, 2.0), softmax(&zt, 2.0));
    let kl: f64 = pt.iter().zip(&ps).map(|(t, s)| t * (t / s).ln()).sum();
    let a1 = ok(kd_loss_f64(&zs, &zt, 2, &[1], &cfg(1.0)))?.0;
    ensure!((a1 - 4.0 * kl).abs() < 1e-12, "alpha=1 gives {a1}, T^2 KL {}", 4.0 * kl);
    Ok(format!("kd={v:.6} alpha0={a0:.6} alpha1={a1:.6}"))
}

// 3

/// `|g_fd - g| / max(|g_fd|, |g|)` over the whole gradient vector.
fn fd_rel_error(f: &dyn Fn(&[f64]) -> (f64, Vec<f64>), z: &[f64]) -> f64 {
    let (_, g) = f(z);
    let h = 1e-3;
    let (mut diff, mut nn, mut na) = (0.0f64, 0.0f64, 0.0f64);
    for i in 0..z.len() {
        let mut p = z.to_vec();
        p[i] += h;
        let mut m = z.to_vec();
        m[i] -= h;
        let num = (f(&p).0 - f(&m).0) / (2.0 * h);
        diff += (num - g[i]).powi(2);
        nn += num * num;
        na += g[i] * g[i];
    }
    diff.sqrt() / nn.sqrt().max(na.sqrt()).max(1e-12)
}

fn gradient_checks() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut n, mut worst) = (0usize, 0.0f64);
    for _ in 0..150 {
        let b = rng.random_range(1..6);
        let zs: Vec<f64> = (0..2 * b).map(|_| rng.random_range(-4.0..4.0)).collect();
        let zt: Vec<f64> = (0..2 * b).map(|_| rng.random_range(-4.0..4.0)).collect();
        let y: Vec<usize> = (0..b).map(|_| rng.random_range(0..2)).collect();
        let eps = [0.0, 0.1][rng.random_range(0..2)];
        let ce = |z: &[f64]| cross_entropy_f64(z, 2, &y, eps, None).unwrap();
        let kd = KdConfig {
            temperature: [1.0, 2.0, 4.0][rng.random_range(0..3)],
            alpha: rng.random_range(0.0..1.0),
            kl_direction: if rng.random::<bool>() { KlDirection::TeacherToStudent } else { KlDirection::StudentToTeacher },
            label_smoothing: eps,
        };
        let kdf = |z: &[f64]| kd_loss_f64(z, &zt, 2, &y, &kd).unwrap();
        for f in [&ce as &dyn Fn(&[f64]) -> (f64, Vec<f64>), &kdf] {
            worst = worst.max(fd_rel_error(f, &zs));
            n += 1;
        }
    }
    ensure!(worst < 1e-4, "worst relative error {worst:e}");
    Ok(format!("{n} configurations, worst relative error {worst:.2e}"))
}

// 4

fn traces() -> Check {
    let lr0 = 1e-4;
    let mut s = PlateauScheduler::new(lr0, 0.5, 2);
    let lrs: Vec<f64> = [0.90, 0.89, 0.88].iter().map(|&v| s.step(v)).collect();
    ensure!(lrs == vec![lr0, lr0, 5e-5], "plateau trace {lrs:?}");
    let mut s = PlateauScheduler::new(lr0, 0.5, 2);
    let lrs: Vec<f64> = [0.5, 0.6, 0.6, 0.6, 0.7, 0.7, 0.7, 0.7, 0.7].iter().map(|&v| s.step(v)).collect();
    ensure!(
        lrs == vec![lr0, lr0, lr0, 5e-5, 5e-5, 5e-5, 2.5e-5, 2.5e-5, 1.25e-5],
        "plateau trace {lrs:?}"
    );
    let mut e = EarlyStopping::new(5);
    let mut stopped_at = None;
    for (i, v) in [0.8, 0.9, 0.85, 0.9, 0.7, 0.88, 0.9, 0.95].iter().enumerate() {
        e.observe(*v);
        if e.should_stop() {
            stopped_at = Some(i + 1);
            break;
        }
    }
    ensure!(stopped_at == Some(7) && e.best_step() == 2, "early stop at {stopped_at:?}, best {:?}", e.best_step());
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..500 {
        let mut s = PlateauScheduler::new(lr0, 0.5, 2);
        for _ in 0..rng.random_range(1..60) {
            let lr = s.step(rng.random_range(0..20) as f64 / 20.0);
            ensure!(lr == lr0 * 0.5f64.powi(s.reductions() as i32), "lr {lr} after {} reductions", s.reductions());
        }
    }
    Ok("fixed traces and 500 random sequences".into())
}

// 5

fn fusion_and_round_trip() -> Check {
    use Label::*;
    for (l, r, want) in [
        (Normal, Normal, Normal),
        (Normal, Cataract, Cataract),
        (Cataract, Normal, Cataract),
        (Cataract, Cataract, Cataract),
    ] {
        ensure!(fuse_labels(l, r) == want, "{l:?}+{r:?}");
    }
    let dir = ok(tempfile::tempdir())?;
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    cli(&["synth", "--output-dir", &s(&data), "--seed", "5", "--set", "synth.image_size=64", "--set", "synth.n_normal=20", "--set", "synth.n_cataract=20"])?;
    cli(&["prepare-data", "--output-dir", &s(&run), "--seed", "5", "--set", &set("data.metadata_csv", &data.join("metadata.csv"))])?;
    let ds = ok(generate_dataset(
        &SynthSpec {
            image_size: 64,
            n_normal: 20,
            n_cataract: 20,
            seed: 5,
            ..SynthSpec::default()
        },
        &dir.path().join("again"),
    ))?;
    let m = run.join("manifests");
    let single = ok(stratified_split(&ds.single, 0.8, 5))?;
    ensure!(ok(read_sample_manifest(&m.join("train.csv")))? == single.train, "train manifest differs");
    ensure!(ok(read_sample_manifest(&m.join("val.csv")))? == single.validation, "val manifest differs");
    let pairs = ok(stratified_split(&ds.pairs, 0.8, 5))?;
    ensure!(ok(read_pair_manifest(&m.join("train_pairs.csv")))? == pairs.train, "pair manifest differs");
    ensure!(ok(read_pair_manifest(&m.join("val_pairs.csv")))? == pairs.validation, "pair manifest differs");
    let rejects = ok(std::fs::read_to_string(m.join("rejects.csv")))?;
    ensure!(rejects.lines().count() == 1, "unexpected rejects");
    Ok(format!("4/4 fusion rows, {} images and {} pairs round-tripped", ds.single.len(), ds.pairs.len()))
}

// 6

fn small(label: Label, i: usize) -> ImageRef {
    let spec = SynthSpec {
        image_size: 64,
        ..SynthSpec::default()
    };
    ImageRef::Memory(generate_image(label, &spec, i).into())
}

fn sharing_and_freezing() -> Check {
    let m = ok(build_siamese(&SiameseSpec::default(), &Pretrained::Random, 2))?;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = Tensor::new([2, 3, 64, 64], (0..2 * 3 * 64 * 64).map(|_| rng.random_range(-2.0f32..2.0)).collect());
    let mut g = Graph::inference();
    let l = g.input(x.clone(), false);
    let r = g.input(x, false);
    ok(m.dual_forward_vars(&mut g, l, r))?;
    let e = g.value(g.tapped("embedding").ok_or("no embedding tap")?).clone();
    let half = e.data().len() / 2;
    ensure!(e.data()[..half] == e.data()[half..], "branch embeddings differ");

    let cfg = TrainConfig {
        batch_size: 4,
        max_epochs: 1,
        seed: 5,
        ..TrainConfig::default()
    };
    use Label::*;
    let single = |off: usize| {
        ImageSet::from_examples(
            (0..8)
                .map(|i| {
                    let label = if i % 2 == 0 { Normal } else { Cataract };
                    Example {
                        images: vec![small(label, off + i)],
                        label,
                    }
                })
                .collect(),
            false,
        )
    };
    let pair = |off: usize| {
        ImageSet::from_examples(
            (0..8)
                .map(|i| {
                    let (a, b) = [(Normal, Normal), (Cataract, Normal), (Normal, Cataract), (Cataract, Cataract)][i % 4];
                    Example {
                        images: vec![small(a, off + i), small(b, off + 50 + i)],
                        label: fuse_labels(a, b),
                    }
                })
                .collect(),
            true,
        )
    };
    let mut cnn = ok(build_model(&ModelSpec::new(Backbone::MobilenetV2, Regime::FrozenBackbone), &Pretrained::Random, 1))?;
    let mut siam = ok(build_siamese(&SiameseSpec::default(), &Pretrained::Random, 1))?;
    siam.set_regime(Regime::FrozenBackbone);
    let mut checked = 0;
    for (model, tr, va) in [(&mut cnn, single(0), single(100)), (&mut siam, pair(0), pair(100))] {
        let before: Vec<(String, Tensor)> = model.store().entries().iter().map(|e| (e.name.clone(), e.tensor.clone())).collect();
        ok(train(model, &ok(tr)?, &ok(va)?, &cfg, &TrainOutputs::default()))?;
        let mut head_moved = false;
        for (name, t) in &before {
            let now = model.store().by_name(name).ok_or("parameter vanished")?;
            if model.is_head_param(name) {
                head_moved |= now.data() != t.data();
            } else {
                ensure!(now.data() == t.data(), "{name} changed under the frozen regime");
                checked += 1;
            }
        }
        ensure!(head_moved, "head did not train");
    }
    Ok(format!("embeddings equal, {checked} frozen tensors bit-identical"))
}

// 7

fn synth_dir(root: &Path, name: &str, seed: u64) -> std::result::Result<fundus_core::synthdata::SynthDataset, String> {
    ok(generate_dataset(
        &SynthSpec {
            seed,
            ..SynthSpec::default()
        },
        &root.join(name),
    ))
}

fn e2e_config() -> TrainConfig {
    TrainConfig {
        max_epochs: 10,
        seed: 3,
        ..TrainConfig::default()
    }
}

fn end_to_end() -> Check {
    let dir = ok(tempfile::tempdir())?;
    let ds = synth_dir(dir.path(), "single", 1)?;
    ensure!(ds.single.len() == 200, "{} images", ds.single.len());
    let split = ok(stratified_split(&ds.single, 0.8, 7))?;
    let tr = ok(ImageSet::single(&ds.image_root, &split.train).preload())?;
    let va = ok(ImageSet::single(&ds.image_root, &split.validation).preload())?;
    let spec = ModelSpec::new(Backbone::MobilenetV2, Regime::FullFinetune);

    let t = Instant::now();
    let mut teacher = ok(build_model(&spec, &Pretrained::Random, 0))?;
    let a = ok(train(&mut teacher, &tr, &va, &e2e_config(), &TrainOutputs::default()))?;
    eprintln!("  7a: best val acc {:.4} at epoch {} ({:.0?})", a.best_val_accuracy, a.best_epoch, t.elapsed());

    let t = Instant::now();
    let mut student = ok(build_model(&spec, &Pretrained::Random, 11))?;
    let b = ok(distill_train(&teacher, &mut student, &tr, &va, &KdConfig::default(), &e2e_config(), &TrainOutputs::default()))?;
    eprintln!("  7b: best val acc {:.4} at epoch {} ({:.0?})", b.best_val_accuracy, b.best_epoch, t.elapsed());
    drop((tr, va));

    let t = Instant::now();
    let pairs_ds = synth_dir(dir.path(), "pairs", 2)?;
    ensure!(pairs_ds.pairs.len() == 100, "{} pairs", pairs_ds.pairs.len());
    let psplit = ok(stratified_split(&pairs_ds.pairs, 0.8, 7))?;
    let ptr = ok(ImageSet::dual(&pairs_ds.image_root, &psplit.train).preload())?;
    let pva = ok(ImageSet::dual(&pairs_ds.image_root, &psplit.validation).preload())?;
    // the shared extractor starts from the 7a single-eye model, trained on a disjoint synthetic set
    let mut siam = ok(build_siamese(&SiameseSpec::default(), &Pretrained::Random, 0))?;
    let loaded = ok(siam.load_extractor_from(&teacher))?;
    ensure!(loaded > 0, "no extractor tensors transferred");
    let c = ok(train(&mut siam, &ptr, &pva, &e2e_config(), &TrainOutputs::default()))?;
    eprintln!("  7c: best val acc {:.4} at epoch {} ({:.0?})", c.best_val_accuracy, c.best_epoch, t.elapsed());

    let summary = format!(
        "mobilenet_v2 ft {:.4}, distilled student {:.4}, siamese {:.4}",
        a.best_val_accuracy, b.best_val_accuracy, c.best_val_accuracy
    );
    ensure!(
        a.best_val_accuracy >= 0.95 && b.best_val_accuracy >= 0.93 && c.best_val_accuracy >= 0.90,
        "{summary}"
    );
    Ok(summary)
}

// 8

fn metric_oracles() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst = 0.0f64;
    for trial in 0..10 {
        let labels: Vec<usize> = (0..1000).map(|_| usize::from(rng.random::<f64>() < 0.4)).collect();
        let scores: Vec<f64> = labels
            .iter()
            .map(|&y| {
                let v = rng.random::<f64>() + 0.25 * y as f64;
                if trial % 2 == 0 { (v * 25.0).round() / 25.0 } else { v }
            })
            .collect();
        let auc = ok(roc_curve(&scores, &labels))?.1;
        let (mut num, mut den) = (0.0, 0.0);
        for (i, &si) in scores.iter().enumerate().filter(|(i, _)| labels[*i] == 1) {
            let _ = i;
            for (_, &sj) in scores.iter().enumerate().filter(|(j, _)| labels[*j] == 0) {
                den += 1.0;
                num += if si > sj { 1.0 } else if si == sj { 0.5 } else { 0.0 };
            }
        }
        worst = worst.max((auc - num / den).abs());
    }
    ensure!(worst < 1e-9, "AUC deviates by {worst:e}");
    for _ in 0..1000 {
        let [tp, fp, tn, fn_]: [usize; 4] = std::array::from_fn(|_| rng.random_range(0..40));
        if tp + fp + tn + fn_ == 0 {
            continue;
        }
        let mut pred = Vec::new();
        let mut lab = Vec::new();
        for (p, y, n) in [(1, 1, tp), (1, 0, fp), (0, 0, tn), (0, 1, fn_)] {
            pred.extend(std::iter::repeat_n(p, n));
            lab.extend(std::iter::repeat_n(y, n));
        }
        let c = ok(ConfusionCounts::from_predictions(&pred, &lab))?;
        ensure!(c == ConfusionCounts { tp, fp, tn, fn_ }, "confusion counts {c:?}");
        let acc = (tp + tn) as f64 / (tp + fp + tn + fn_) as f64;
        let f1 = if 2 * tp + fp + fn_ == 0 { 0.0 } else { 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64 };
        ensure!((c.accuracy() - acc).abs() < 1e-12 && (c.f1() - f1).abs() < 1e-12, "metrics for {c:?}");
    }
    Ok(format!("AUC max deviation {worst:.1e}, 1000 confusion matrices"))
}

// 9

const X: [f32; 16] = [0.2, -0.5, 1.0, 0.3, 0.7, 0.1, -0.2, 0.9, -0.4, 0.6, 0.8, -0.1, 0.5, -0.3, 0.4, 1.2];
const K: [[f32; 9]; 3] = [
    [0.1, 0.2, -0.1, 0.0, 0.5, 0.3, -0.2, 0.1, 0.4],
    [-0.3, 0.2, 0.1, 0.4, -0.1, 0.2, 0.3, -0.2, 0.1],
    [0.2, 0.2, 0.2, -0.1, -0.1, -0.1, 0.3, 0.0, -0.3],
];
const W: [[f32; 3]; 2] = [[0.5, -1.0, 0.8], [-0.7, 1.5, 0.6]];

fn grad_cam_oracle() -> Check {
    let mut worst = 0.0f64;
    for class in 0..2 {
        let mut g = Graph::inference();
        let x = g.input(Tensor::new([1, 1, 4, 4], X.to_vec()), true);
        let k = g.constant(Tensor::new([3, 1, 3, 3], K.concat()));
        let a = ok(g.conv2d(x, k, None, ConvGeom::new(1, 1, 1)))?;
        let a = g.relu(a);
        g.tap("a", a);
        let p = ok(g.global_avg_pool(a))?;
        let lw = g.constant(Tensor::new([2, 3], W.concat()));
        let y = ok(g.linear(p, lw, None))?;
        let heat = ok(grad_cam_graph(&g, a, y, class, "a", 4))?;
        let mut want = [0.0f64; 16];
        for (pos, w) in want.iter_mut().enumerate() {
            let (i, j) = ((pos / 4) as i32, (pos % 4) as i32);
            for (ch, kern) in K.iter().enumerate() {
                let mut act = 0.0f64;
                for d in 0..9i32 {
                    let (r, c) = (i + d / 3 - 1, j + d % 3 - 1);
                    if (0..4).contains(&r) && (0..4).contains(&c) {
                        act += X[(r * 4 + c) as usize] as f64 * kern[d as usize] as f64;
                    }
                }
                *w += W[class][ch] as f64 / 16.0 * act.max(0.0);
            }
            *w = w.max(0.0);
        }
        let m = want.iter().cloned().fold(0.0, f64::max);
        for (got, w) in heat.values.iter().zip(&want) {
            worst = worst.max((*got as f64 - w / m).abs());
        }
    }
    ensure!(worst < 1e-5, "toy map deviates by {worst:e}");

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let img = Tensor::new([3, 224, 224], (0..3 * 224 * 224).map(|_| rng.random_range(-1.5f32..1.5)).collect());
    let mut shapes = Vec::new();
    for b in [Backbone::MobilenetV2, Backbone::EfficientnetB0] {
        let mut m = ok(build_model(&ModelSpec::new(b, Regime::FullFinetune), &Pretrained::Random, 4))?;
        for class in 0..2 {
            let h = ok(grad_cam(&m, &img, "features", class))?;
            ensure!((h.width, h.height, h.values.len()) == (224, 224, 224 * 224), "{b} map shape");
            ensure!(h.values.iter().all(|v| (0.0..=1.0).contains(v)), "{b} map out of [0, 1]");
            // bilinear samples sit at most half a pixel from a coarse cell centre
            ensure!(h.max() >= 0.96 || h.max() == 0.0, "{b} map max {}", h.max());
        }
        zero_head(&mut m)?;
        let z = ok(grad_cam(&m, &img, "features", 1))?;
        ensure!(z.values.iter().all(|&v| v == 0.0), "{b}: zero-gradient model gave a non-zero map");
        shapes.push(b.name());
    }
    Ok(format!("toy deviation {worst:.1e}; {} maps in range; zero map for constant score", shapes.join(", ")))
}

fn zero_head(m: &mut ModelHandle) -> std::result::Result<(), String> {
    let w = m.store().by_name("classifier.weight").ok_or("no classifier.weight")?.clone();
    let zero = Tensor::new(w.shape().to_vec(), vec![0.0; w.data().len()]);
    ok(m.store_mut().assign("classifier.weight", zero))
}

// 10

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn set(key: &str, p: &Path) -> String {
    format!("{key}=\"{}\"", p.display())
}

fn cli(args: &[&str]) -> std::result::Result<(), String> {
    let mut full = vec!["fundus"];
    full.extend_from_slice(args);
    match fundus_cli::run_from(full) {
        0 => Ok(()),
        code => Err(format!("`{}` exited with {code}", args.join(" "))),
    }
}

fn csv_files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).into_iter().flatten().flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == "csv") {
                let rel = p.strip_prefix(root).unwrap().to_path_buf();
                out.insert(rel, std::fs::read(&p).unwrap_or_default());
            }
        }
    }
    out
}

fn cli_pipeline(root: &Path) -> std::result::Result<BTreeMap<PathBuf, Vec<u8>>, String> {
    let data = root.join("data");
    let run = root.join("run");
    cli(&["synth", "--output-dir", &s(&data), "--seed", "8", "--set", "synth.image_size=64", "--set", "synth.n_normal=8", "--set", "synth.n_cataract=8"])?;
    cli(&["prepare-data", "--output-dir", &s(&run), "--set", &set("data.metadata_csv", &data.join("metadata.csv"))])?;
    let base = [
        "--output-dir".to_string(),
        s(&run),
        "--set".into(),
        set("data.image_root", &data),
        "--set".into(),
        set("data.manifest_dir", &run.join("manifests")),
        "--set".into(),
        "train.max_epochs=2".into(),
        "--set".into(),
        "train.batch_size=4".into(),
    ];
    let go = |cmd: &str, extra: &[String]| {
        let mut v: Vec<&str> = vec![cmd];
        v.extend(base.iter().map(String::as_str));
        v.extend(extra.iter().map(String::as_str));
        cli(&v)
    };
    let ckpt = run.join("checkpoints/mobilenet_v2_ft.safetensors");
    go("train", &[])?;
    go("train-dual", &[])?;
    go(
        "distill",
        &["--set".into(), set("distill.teacher_checkpoint", &ckpt), "--set".into(), "distill.kd.alpha=0.5".into()],
    )?;
    go(
        "evaluate",
        &[
            "--set".into(),
            format!(
                "evaluate.checkpoints=[\"{}\", \"{}\"]",
                ckpt.display(),
                run.join("checkpoints/siamese.safetensors").display()
            ),
        ],
    )?;
    go("explain", &["--set".into(), set("explain.checkpoint", &ckpt), "--set".into(), "explain.samples=2".into()])?;
    go("benchmark", &["--set".into(), "train.max_epochs=1".into()])?;
    let mut all = csv_files(&data);
    all.extend(csv_files(&run).into_iter().map(|(k, v)| (Path::new("run").join(k), v)));
    Ok(all)
}

fn determinism() -> Check {
    let a = ok(tempfile::tempdir())?;
    let b = ok(tempfile::tempdir())?;
    let fa = cli_pipeline(a.path())?;
    let fb = cli_pipeline(b.path())?;
    ensure!(fa.keys().eq(fb.keys()), "artifact sets differ");
    for (k, v) in &fa {
        ensure!(!v.is_empty(), "{} is empty", k.display());
        ensure!(fb[k] == *v, "{} differs between runs", k.display());
    }
    Ok(format!("{} CSV artifacts from 8 subcommands byte-identical", fa.len()))
}

fn main() {
    let only: Option<Vec<usize>> = std::env::var("FUNDUS_ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let criteria: [(usize, &str, fn() -> Check); 10] = [
        (1, "parameter census", census),
        (2, "kd loss oracle", kd_oracle),
        (3, "gradient checks", gradient_checks),
        (4, "scheduler and early-stop traces", traces),
        (5, "fusion table and manifest round trip", fusion_and_round_trip),
        (6, "siamese sharing and frozen weights", sharing_and_freezing),
        (7, "end-to-end synthetic runs", end_to_end),
        (8, "metric oracles", metric_oracles),
        (9, "grad-cam oracle", grad_cam_oracle),
        (10, "determinism", determinism),
    ];
    let mut failed = 0;
    for (n, name, f) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n:>2} PASS  {name}: {detail} ({secs:.1}s)"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name}: {detail} ({secs:.1}s)");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
