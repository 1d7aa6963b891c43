use std::collections::BTreeMap;
use std::path::Path;

use wsss_core::checkpoint::{self, Slot};
use wsss_core::parallel::Execution;
use wsss_core::pipeline::{self, Augmentation, EncoderSpec, Inference, TrainConfig, Trainer};
use wsss_core::pseudo::Gammas;
use wsss_core::synthetic::{write_dataset, SynthLayout, SynthSpec};
use wsss_core::Error;

fn small_set(dir: &Path, count: usize) -> (SynthLayout, SynthSpec) {
    let spec = SynthSpec {
        count,
        height: 64,
        width: 64,
        slices_per_volume: 4,
        ..Default::default()
    };
    (write_dataset(&dir.join("data"), &spec).unwrap(), spec)
}

fn quick_config(layout: &SynthLayout, spec: &SynthSpec, out: &Path, epochs: usize) -> TrainConfig {
    let mut c = TrainConfig::desk_scale(&layout.manifest, out, spec);
    c.epochs = epochs;
    c.augment = Augmentation::off();
    c
}

fn value_hashes(path: &Path) -> BTreeMap<String, (String, Option<String>)> {
    checkpoint::load(path)
        .unwrap()
        .header
        .tensors
        .into_iter()
        .filter(|t| t.slot == Slot::Value)
        .map(|t| (t.name, (t.sha256, t.unit)))
        .collect()
}

#[test]
fn eight_images_two_hundred_steps_halve_the_loss() {
    let dir = tempfile::tempdir().unwrap();
    let (layout, spec) = small_set(dir.path(), 8);
    let mut cfg = quick_config(&layout, &spec, &dir.path().join("run"), 200);
    cfg.encoder = EncoderSpec::Preset("toy".into());
    cfg.optimizer.lr = 1e-3;
    let (_, out) = pipeline::train(cfg).unwrap();
    assert_eq!(out.steps.len(), 200);
    let first = out.first_loss().unwrap();
    let last = out.steps.last().unwrap().total;
    assert!(last <= 0.5 * first, "loss {first} -> {last}");
}

#[test]
fn seeded_runs_repeat_and_log_header_echoes_weights() {
    let dir = tempfile::tempdir().unwrap();
    let (layout, spec) = small_set(dir.path(), 8);
    let run = |name: &str| {
        let mut cfg = quick_config(&layout, &spec, &dir.path().join(name), 2);
        cfg.loss_weights = [1.0, 0.5, 0.25, 2.0];
        cfg.augment = Augmentation::default();
        pipeline::train(cfg).unwrap().1
    };
    let (a, b) = (run("a"), run("b"));
    assert_eq!(a.first_loss().unwrap().to_bits(), b.first_loss().unwrap().to_bits());
    let ha = checkpoint::load(&a.checkpoint).unwrap().header;
    let hb = checkpoint::load(&b.checkpoint).unwrap().header;
    assert_eq!(ha, hb);

    let log = std::fs::read_to_string(&a.log).unwrap();
    let header: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(header["header"]["loss_weights"], serde_json::json!([1.0, 0.5, 0.25, 2.0]));
    assert_eq!(log.lines().count(), 1 + a.steps.len());
    assert_eq!(log, std::fs::read_to_string(&b.log).unwrap());
}

#[test]
fn frozen_tensor_hashes_survive_training() {
    let dir = tempfile::tempdir().unwrap();
    let (layout, spec) = small_set(dir.path(), 8);
    let mut cfg = quick_config(&layout, &spec, &dir.path().join("run"), 2);
    cfg.freeze = vec!["proj".into(), "1".into(), "2".into()];
    cfg.keep_epoch_checkpoints = true;
    let init = dir.path().join("init.ckpt");
    Trainer::new(cfg.clone()).unwrap().save_checkpoint(&init).unwrap();
    let (_, out) = pipeline::train(cfg).unwrap();
    assert!(dir.path().join("run/epoch_001.ckpt").exists());
    assert!(dir.path().join("run/epoch_002.ckpt").exists());

    let before = value_hashes(&init);
    let after = value_hashes(&out.checkpoint);
    let mut frozen = 0;
    let mut moved = 0;
    for (name, (hash, unit)) in &before {
        let same = after[name].0 == *hash;
        match unit.as_deref() {
            Some("proj" | "1" | "2") => {
                assert!(same, "{name} changed");
                frozen += 1;
            }
            _ => moved += usize::from(!same),
        }
    }
    assert!(frozen > 0 && moved > 0);
}

#[test]
fn restored_model_exports_and_evaluates() {
    let dir = tempfile::tempdir().unwrap();
    let (layout, spec) = small_set(dir.path(), 4);
    let cfg = quick_config(&layout, &spec, &dir.path().join("run"), 1);
    let (trainer, out) = pipeline::train(cfg).unwrap();

    let direct = Inference::from_trainer(&trainer).unwrap();
    let restored = Inference::new(pipeline::restore(&out.checkpoint).unwrap(), &layout.manifest, Execution::Sequential).unwrap();
    let g = Gammas::default();
    assert_eq!(direct.foreground(1, &g).unwrap(), restored.foreground(1, &g).unwrap());

    let pseudo = dir.path().join("pseudo");
    let n = pipeline::pseudo_cmd(&out.checkpoint, &layout.manifest, 0.4, &g, &pseudo, true, Execution::Parallel).unwrap();
    assert_eq!(n, 4);
    assert!(pseudo.join("s000.png").exists() && pseudo.join("s000.json").exists());

    let again = dir.path().join("pseudo2");
    pipeline::pseudo_cmd(&out.checkpoint, &layout.manifest, 0.4, &g, &again, true, Execution::Sequential).unwrap();
    for f in ["s000.png", "s003.png", "s002.json"] {
        assert_eq!(std::fs::read(pseudo.join(f)).unwrap(), std::fs::read(again.join(f)).unwrap(), "{f}");
    }

    let m = pipeline::evaluate(&layout.masks, &layout.masks, &dir.path().join("self.json"), Execution::Parallel).unwrap();
    assert_eq!(m.miou, 1.0);
    let m = pipeline::evaluate(&pseudo, &layout.masks, &dir.path().join("metrics.json"), Execution::Parallel).unwrap();
    assert_eq!(m.classes, vec!["background", "SRF", "PED"]);
    assert!((0.0..=1.0).contains(&m.miou));

    let sweep = pipeline::sweep_cmd(&out.checkpoint, &layout.manifest, None, &dir.path().join("sweep.json"), Execution::Parallel).unwrap();
    assert_eq!(sweep.curve.len(), 101);
    let written: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("sweep.json")).unwrap()).unwrap();
    assert_eq!(written["best_lambda"].as_f64(), Some(sweep.best_lambda));
}

#[test]
fn checkpoint_must_match_the_dataset_classes() {
    let dir = tempfile::tempdir().unwrap();
    let (layout, spec) = small_set(dir.path(), 4);
    let cfg = quick_config(&layout, &spec, &dir.path().join("run"), 1);
    let (_, out) = pipeline::train(cfg).unwrap();

    let text = std::fs::read_to_string(&layout.manifest).unwrap();
    let other = dir.path().join("data/other.json");
    std::fs::write(&other, text.replace("\"PED\"", "\"CNV\"")).unwrap();
    let err = Inference::new(pipeline::restore(&out.checkpoint).unwrap(), &other, Execution::Sequential);
    assert!(err.is_err());

    let bad = pipeline::pseudo_cmd(&out.checkpoint, &layout.manifest, 1.5, &Gammas::default(), &dir.path().join("x"), false, Execution::Sequential);
    assert!(matches!(bad, Err(Error::Config(_))));
}

#[test]
fn analyze_text_writes_both_reports() {
    let dir = tempfile::tempdir().unwrap();
    let (layout, _) = small_set(dir.path(), 8);
    let out = dir.path().join("text");
    let r = pipeline::analyze_text(&layout.captions, &layout.description_cache, Some(&layout.manifest), &out).unwrap();
    assert_eq!(r.histogram.len(), 4);
    assert!(r.histogram.contains_key("healthy") && r.histogram.contains_key("SRF+PED"));
    let csv = std::fs::read_to_string(out.join("histogram.csv")).unwrap();
    assert!(csv.starts_with("group,word,count\n"));
    let sim = std::fs::read_to_string(out.join("similarity.csv")).unwrap();
    assert_eq!(sim.lines().count(), 1 + r.similarity.len());
}
