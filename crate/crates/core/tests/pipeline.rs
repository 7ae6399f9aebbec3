use std::collections::BTreeSet;

use mcil_core::config::ExperimentConfig;
use mcil_core::encoders::load_checkpoint;
use mcil_core::scenario::{build_stream, generate_synthetic, load_precomputed, save_precomputed, Split, SyntheticConfig};
use mcil_core::trainer::{run_scenario, Method, RunOptions, Session};
use proptest::prelude::*;

const TOY: &str = r#"
[data.synthetic]
classes = 4
samples_per_class = 10
visual_dim = 6
audio_dim = 5
visual_noise = 0.3
audio_noise = 1.5
correlation = 1.0
seed = 2

[model]
width = 16
blocks = 1
heads = 2
ffn_hidden = 32
router_hidden = 8
visual_tokens = 2
feature_dim = 16
audio_feature_dim = 24
vocab = 128
max_text_tokens = 8
lora_rank = 2

[train]
tasks = 2
epochs = 2
batch_size = 8
prompts = 3
seed = 4
"#;

#[test]
fn feature_file_config_loads_the_same_dataset() {
    let cfg = ExperimentConfig::from_toml(TOY).unwrap();
    let ds = cfg.load_dataset().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("toy.feat");
    save_precomputed(&ds, &path).unwrap();
    assert!(load_precomputed(&path).unwrap().bit_identical(&ds));

    let text = format!("[data]\nfeatures = {:?}\n", path.display().to_string());
    let from_file = ExperimentConfig::from_toml(&text).unwrap().load_dataset().unwrap();
    assert!(from_file.bit_identical(&ds));
}

#[test]
fn run_checkpoints_restore_to_the_recorded_rows() {
    let cfg = ExperimentConfig::from_toml(TOY).unwrap();
    let ds = cfg.load_dataset().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let options = RunOptions { checkpoint_dir: Some(dir.path()), echo: serde_json::json!("toy") };
    let record = run_scenario(&ds, &cfg.model, &cfg.fusion, &cfg.train, &options, &mut ()).unwrap();
    assert!(!record.incomplete, "{:?}", record.error);
    assert_eq!(record.method, Method::Ours);
    assert_eq!(record.checkpoints.len(), 2);

    let m1 = record.ledger.m1().unwrap();
    let m2 = record.ledger.m2().unwrap();
    assert!((0.0..=100.0).contains(&m1) && (0.0..=1.0).contains(&m2));
    assert!(record.epoch_losses.iter().flatten().all(|l| l.is_finite()));

    let rows = record.ledger.matrix.rows();
    for (t, path) in record.checkpoints.iter().enumerate() {
        let (model, echo) = load_checkpoint(path).unwrap();
        assert_eq!(echo["task"], t + 1);
        assert_eq!(echo["run"], "toy");
        let mut session = Session::new(&ds, &cfg.model, &cfg.fusion, &cfg.train).unwrap();
        session.restore(model, t + 1).unwrap();
        assert_eq!(session.evaluate_stage(t + 1).unwrap().row, rows[t]);
    }
}

#[test]
fn restore_rejects_a_checkpoint_from_the_wrong_task() {
    let cfg = ExperimentConfig::from_toml(TOY).unwrap();
    let ds = cfg.load_dataset().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let options = RunOptions { checkpoint_dir: Some(dir.path()), echo: serde_json::Value::Null };
    let record = run_scenario(&ds, &cfg.model, &cfg.fusion, &cfg.train, &options, &mut ()).unwrap();
    let (model, _) = load_checkpoint(&record.checkpoints[0]).unwrap();
    let mut session = Session::new(&ds, &cfg.model, &cfg.fusion, &cfg.train).unwrap();
    assert!(session.restore(model.clone(), 2).is_err());
    assert!(session.restore(model, 3).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn streams_partition_classes_and_samples(classes in 2usize..10, tasks in 1usize..5, seed in any::<u64>()) {
        prop_assume!(tasks <= classes);
        let ds = generate_synthetic(&SyntheticConfig {
            classes,
            samples_per_class: 5,
            visual_dim: 3,
            audio_dim: 2,
            seed,
            ..SyntheticConfig::default()
        }).unwrap();
        let stream = build_stream(&ds, tasks, seed).unwrap();
        prop_assert_eq!(stream.len(), tasks);

        let mut seen = BTreeSet::new();
        let mut sizes = Vec::new();
        for t in 1..=tasks {
            let task = stream.task(t);
            sizes.push(task.classes.len());
            for &c in &task.classes {
                prop_assert!(seen.insert(c), "class {} in two tasks", c);
            }
            for (ids, split) in [(&task.train_samples, Split::Train), (&task.test_samples, Split::Test)] {
                for &id in ids {
                    let s = ds.sample(id).unwrap();
                    prop_assert!(task.classes.contains(&s.label));
                    prop_assert_eq!(s.split, split);
                }
            }
        }
        prop_assert_eq!(seen.len(), classes);
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        let total: usize = (1..=tasks).map(|t| stream.task(t).train_samples.len() + stream.task(t).test_samples.len()).sum();
        prop_assert_eq!(total, ds.samples().len());
    }
}
