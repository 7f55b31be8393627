//! Subcommand implementations. Every artifact lands under the configured output directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use fundus_core::dataset::{
    build_dual_eye_samples, class_distribution, filter_binary, load_metadata, read_pair_manifest, read_sample_manifest,
    resolve_image_root, stratified_split, write_pair_manifest, write_sample_manifest, DualEyeSample, LabeledSample,
};
use fundus_core::distillation::distill_train;
use fundus_core::evaluation::{
    compare_regimes, evaluate, write_metrics_csv, write_roc_csv, EvalMode, MetricsReport, MetricsRow,
};
use fundus_core::explain::{explain_image, save_png, write_heatmap_csv};
use fundus_core::loader::ImageSet;
use fundus_core::modelzoo::{build_model, build_siamese, load_checkpoint, Backbone, ModelHandle, Pretrained, Regime};
use fundus_core::plot;
use fundus_core::synthdata::generate_dataset;
use fundus_core::training::{train, TrainOutputs, TrainResult};
use fundus_core::{Error, Label, Result};
use log::info;

use crate::config::ExperimentConfig;

pub const MANIFEST_DIR: &str = "manifests";
pub const CHECKPOINT_DIR: &str = "checkpoints";

struct Run<'a> {
    cfg: &'a ExperimentConfig,
    out: PathBuf,
    hash: String,
}

impl Run<'_> {
    fn path(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.out.join(rel)
    }

    fn outputs(&self, stem: &str) -> TrainOutputs {
        TrainOutputs {
            checkpoint: Some(self.path(CHECKPOINT_DIR).join(format!("{stem}.safetensors"))),
            history_csv: Some(self.path(format!("history_{stem}.csv"))),
            config_hash: self.hash.clone(),
        }
    }

    fn image_root(&self) -> PathBuf {
        resolve_image_root(&self.cfg.data.image_root)
    }

    fn finish_set(&self, set: ImageSet) -> Result<ImageSet> {
        if self.cfg.data.preload {
            set.preload()
        } else {
            Ok(set)
        }
    }

    fn single_split(&self) -> Result<(Vec<LabeledSample>, Vec<LabeledSample>)> {
        if let Some(dir) = &self.cfg.data.manifest_dir {
            return Ok((read_sample_manifest(&dir.join("train.csv"))?, read_sample_manifest(&dir.join("val.csv"))?));
        }
        let meta = load_metadata(&self.cfg.data.metadata_csv)?;
        let split = stratified_split(&filter_binary(&meta.records), self.cfg.data.train_ratio, self.cfg.seed)?;
        Ok((split.train, split.validation))
    }

    fn pair_split(&self) -> Result<(Vec<DualEyeSample>, Vec<DualEyeSample>)> {
        if let Some(dir) = &self.cfg.data.manifest_dir {
            return Ok((
                read_pair_manifest(&dir.join("train_pairs.csv"))?,
                read_pair_manifest(&dir.join("val_pairs.csv"))?,
            ));
        }
        let meta = load_metadata(&self.cfg.data.metadata_csv)?;
        let split = stratified_split(&build_dual_eye_samples(&meta.records), self.cfg.data.train_ratio, self.cfg.seed)?;
        Ok((split.train, split.validation))
    }

    fn single_sets(&self) -> Result<(ImageSet, ImageSet, Vec<LabeledSample>)> {
        let (tr, va) = self.single_split()?;
        let root = self.image_root();
        Ok((
            self.finish_set(ImageSet::single(&root, &tr))?,
            self.finish_set(ImageSet::single(&root, &va))?,
            va,
        ))
    }

    fn pair_sets(&self) -> Result<(ImageSet, ImageSet)> {
        let (tr, va) = self.pair_split()?;
        let root = self.image_root();
        Ok((
            self.finish_set(ImageSet::dual(&root, &tr))?,
            self.finish_set(ImageSet::dual(&root, &va))?,
        ))
    }

    fn curves(&self, stem: &str, result: &TrainResult) -> Result<()> {
        plot::learning_curves(&self.path(format!("curves_{stem}.png")), &result.history)
    }
}

fn log_result(stem: &str, r: &TrainResult) {
    info!(
        "run={stem} best_epoch={} best_val_acc={:.6} epochs={} stopped_early={}",
        r.best_epoch,
        r.best_val_accuracy,
        r.history.len(),
        r.stopped_early
    );
}

pub fn synth(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let ds = generate_dataset(&cfg.synth, out)?;
    let counts = class_distribution(&ds.single);
    info!(
        "images={} pairs={} normal={} cataract={} metadata={}",
        ds.single.len(),
        ds.pairs.len(),
        counts.normal,
        counts.cataract,
        ds.metadata_csv.display()
    );
    Ok(())
}

pub fn prepare_data(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let meta = load_metadata(&cfg.data.metadata_csv)?;
    let dir = out.join(MANIFEST_DIR);
    let mut w = csv::Writer::from_path(ensure_parent(&dir.join("rejects.csv"))?)?;
    w.write_record(["row", "patient_id", "reason"])?;
    for r in &meta.rejects {
        w.write_record([r.row.to_string(), r.patient_id.clone(), r.reason.clone()])?;
    }
    w.flush().map_err(|e| Error::Io {
        path: dir.join("rejects.csv"),
        source: e,
    })?;

    let single = filter_binary(&meta.records);
    let split = stratified_split(&single, cfg.data.train_ratio, cfg.seed)?;
    write_sample_manifest(&dir.join("train.csv"), &split.train)?;
    write_sample_manifest(&dir.join("val.csv"), &split.validation)?;
    let pairs = build_dual_eye_samples(&meta.records);
    let psplit = stratified_split(&pairs, cfg.data.train_ratio, cfg.seed)?;
    write_pair_manifest(&dir.join("train_pairs.csv"), &psplit.train)?;
    write_pair_manifest(&dir.join("val_pairs.csv"), &psplit.validation)?;

    let mut w = csv::Writer::from_path(dir.join("summary.csv"))?;
    w.write_record(["set", "normal", "cataract", "total"])?;
    let rows = [
        ("single", class_distribution(&single)),
        ("train", class_distribution(&split.train)),
        ("val", class_distribution(&split.validation)),
        ("pairs", class_distribution(&pairs)),
        ("train_pairs", class_distribution(&psplit.train)),
        ("val_pairs", class_distribution(&psplit.validation)),
    ];
    for (name, c) in rows {
        w.write_record([name.to_string(), c.normal.to_string(), c.cataract.to_string(), c.total().to_string()])?;
    }
    w.flush().map_err(|e| Error::Io {
        path: dir.join("summary.csv"),
        source: e,
    })?;
    info!(
        "records={} rejects={} single={} pairs={} train={} val={}",
        meta.records.len(),
        meta.rejects.len(),
        single.len(),
        pairs.len(),
        split.train.len(),
        split.validation.len()
    );
    Ok(())
}

fn ensure_parent(p: &Path) -> Result<&Path> {
    if let Some(d) = p.parent() {
        std::fs::create_dir_all(d).map_err(|e| Error::Io {
            path: d.to_path_buf(),
            source: e,
        })?;
    }
    Ok(p)
}

fn stem(backbone: Backbone, regime: Regime) -> String {
    format!("{}_{}", backbone.name(), regime.short().to_lowercase())
}

pub fn train_single(cfg: &ExperimentConfig, out: &Path, hash: &str) -> Result<()> {
    let run = Run {
        cfg,
        out: out.to_path_buf(),
        hash: hash.into(),
    };
    let spec = cfg.model.spec("model")?;
    let (tr, va, _) = run.single_sets()?;
    let mut model = build_model(&spec, &cfg.model.pretrained(), cfg.seed)?;
    let name = stem(spec.backbone, spec.regime);
    info!(
        "run={name} train={} val={} params_trainable={}",
        tr.len(),
        va.len(),
        model.trainable_params()
    );
    let result = train(&mut model, &tr, &va, &cfg.train, &run.outputs(&name))?;
    log_result(&name, &result);
    run.curves(&name, &result)
}

pub fn distill(cfg: &ExperimentConfig, out: &Path, hash: &str) -> Result<()> {
    let run = Run {
        cfg,
        out: out.to_path_buf(),
        hash: hash.into(),
    };
    let teacher_path = cfg
        .distill
        .teacher_checkpoint
        .as_ref()
        .ok_or_else(|| Error::Config("distill.teacher_checkpoint is required".into()))?;
    let (teacher, _) = load_checkpoint(teacher_path)?;
    let spec = cfg.distill.student.spec("distill.student")?;
    let mut student = build_model(&spec, &cfg.distill.student.pretrained(), cfg.seed)?;
    let (tr, va, _) = run.single_sets()?;
    let name = format!("{}_distilled", spec.backbone.name());
    info!(
        "run={name} teacher={} temperature={} alpha={} kl_direction={:?}",
        teacher.display_name(),
        cfg.distill.kd.temperature,
        cfg.distill.kd.alpha,
        cfg.distill.kd.kl_direction
    );
    let result = distill_train(&teacher, &mut student, &tr, &va, &cfg.distill.kd, &cfg.train, &run.outputs(&name))?;
    log_result(&name, &result);
    run.curves(&name, &result)
}

pub fn train_dual(cfg: &ExperimentConfig, out: &Path, hash: &str) -> Result<()> {
    let run = Run {
        cfg,
        out: out.to_path_buf(),
        hash: hash.into(),
    };
    let spec = cfg.siamese.spec()?;
    let mut model = build_siamese(&spec, &Pretrained::Random, cfg.seed)?;
    if let Some(src) = &cfg.siamese.init_from {
        let single = match load_checkpoint(src) {
            Ok((m, _)) => m,
            Err(Error::Checkpoint(_)) => build_model(&spec.backbone, &Pretrained::From(src.clone()), cfg.seed)?,
            Err(e) => return Err(e),
        };
        let n = model.load_extractor_from(&single)?;
        info!("extractor_tensors_loaded={n} source={}", src.display());
    }
    model.set_regime(spec.backbone.regime);
    let (tr, va) = run.pair_sets()?;
    let name = "siamese".to_string();
    info!(
        "run={name} train_pairs={} val_pairs={} params_trainable={}",
        tr.len(),
        va.len(),
        model.trainable_params()
    );
    let result = train(&mut model, &tr, &va, &cfg.train, &run.outputs(&name))?;
    log_result(&name, &result);
    run.curves(&name, &result)
}

fn model_label(m: &ModelHandle) -> String {
    if m.is_dual() {
        "siamese".into()
    } else {
        m.spec.backbone.name().into()
    }
}

fn evaluate_model(run: &Run<'_>, model: &ModelHandle, stats: &fundus_core::NormalizationStats) -> Result<MetricsReport> {
    if model.is_dual() {
        let (_, va) = run.pair_sets()?;
        evaluate(model, &va, EvalMode::DualEye, stats)
    } else {
        let (_, va, _) = run.single_sets()?;
        evaluate(model, &va, EvalMode::SingleEye, stats)
    }
}

pub fn evaluate_cmd(cfg: &ExperimentConfig, out: &Path, hash: &str) -> Result<()> {
    let run = Run {
        cfg,
        out: out.to_path_buf(),
        hash: hash.into(),
    };
    if cfg.evaluate.checkpoints.is_empty() {
        return Err(Error::Config("evaluate.checkpoints must list at least one checkpoint".into()));
    }
    let mut loaded = Vec::new();
    for path in &cfg.evaluate.checkpoints {
        let (model, meta) = load_checkpoint(path)?;
        let report = evaluate_model(&run, &model, &meta.normalization)?;
        loaded.push((model_label(&model), model.spec.regime, model.trainable_params(), report));
    }
    let mut rows = Vec::new();
    let mut curves = Vec::new();
    for (label, regime, params, report) in &loaded {
        let clash = loaded.iter().filter(|(l, ..)| l == label).count() > 1;
        let file_stem = if clash { format!("{label}_{}", regime.name()) } else { label.clone() };
        write_roc_csv(&run.path(format!("roc_{file_stem}.csv")), &report.roc)?;
        rows.push(MetricsRow::new(label, regime.name(), report, *params));
        curves.push((file_stem, report.roc.clone()));
        info!(
            "model={label} regime={} accuracy={:.6} f1={:.6} auc={:.6}",
            regime.name(),
            report.accuracy,
            report.f1,
            report.auc
        );
    }
    write_metrics_csv(&run.path("metrics.csv"), &rows)?;
    let refs: Vec<(&str, &[_])> = curves.iter().map(|(n, p)| (n.as_str(), p.as_slice())).collect();
    plot::roc_plot(&run.path("roc.png"), &refs)
}

pub fn explain(cfg: &ExperimentConfig, out: &Path, hash: &str) -> Result<()> {
    let run = Run {
        cfg,
        out: out.to_path_buf(),
        hash: hash.into(),
    };
    let ckpt = cfg
        .explain
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::Config("explain.checkpoint is required".into()))?;
    let (model, meta) = load_checkpoint(ckpt)?;
    let (_, va, samples) = run.single_sets()?;
    let dir = run.path("explain");
    let label = model_label(&model);
    for (i, s) in samples.iter().enumerate().take(cfg.explain.samples) {
        let img = va.examples()[i].images[0].load()?;
        let class = cfg.explain.target_class.unwrap_or(s.label.index());
        let (heat, over) = explain_image(&model, &img, &meta.normalization, class, cfg.explain.opacity)?;
        let id = s
            .image_path
            .file_stem()
            .map(|x| x.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("sample{i}"));
        let class_name = Label::from_index(class)?.name();
        let base = format!("{id}_{label}_{class_name}");
        save_png(&dir.join(format!("{base}.png")), &over)?;
        write_heatmap_csv(&dir.join(format!("{base}.csv")), &heat)?;
        info!("sample={id} class={class_name} heat_max={:.6}", heat.max());
    }
    Ok(())
}

pub fn benchmark(cfg: &ExperimentConfig, out: &Path, hash: &str) -> Result<()> {
    let run = Run {
        cfg,
        out: out.to_path_buf(),
        hash: hash.into(),
    };
    let (tr, va, _) = run.single_sets()?;
    let mut results = BTreeMap::new();
    let mut rows = Vec::new();
    for b in &cfg.benchmark.backbones {
        let backbone: Backbone = b.parse()?;
        for r in &cfg.benchmark.regimes {
            let regime: Regime = r.parse()?;
            let spec = fundus_core::ModelSpec::new(backbone, regime);
            let mut model = build_model(&spec, &cfg.model.pretrained(), cfg.seed)?;
            let name = stem(backbone, regime);
            let outputs = TrainOutputs {
                checkpoint: None,
                history_csv: Some(run.path(format!("history_{name}.csv"))),
                config_hash: hash.into(),
            };
            let result = train(&mut model, &tr, &va, &cfg.train, &outputs)?;
            log_result(&name, &result);
            let report = evaluate(&model, &va, EvalMode::SingleEye, &cfg.train.normalization)?;
            write_roc_csv(&run.path(format!("roc_{name}.csv")), &report.roc)?;
            rows.push(MetricsRow::new(backbone.name(), regime.name(), &report, model.trainable_params()));
            results.insert((backbone.name().to_string(), regime), report);
        }
    }
    write_metrics_csv(&run.path("metrics.csv"), &rows)?;
    let table = compare_regimes(&results);
    table.write_csv(&run.path("ablation.csv"))?;
    std::fs::write(run.path("ablation.txt"), table.render()).map_err(|e| Error::Io {
        path: run.path("ablation.txt"),
        source: e,
    })?;
    info!("ablation_rows={}", table.rows.len());
    plot::ablation_bars(&run.path("ablation.png"), &table)
}
