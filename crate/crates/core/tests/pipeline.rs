use tide_core::checkpoint::{load_model, load_session, step_dir};
use tide_core::experiment::{self, procedural_dataset};
use tide_core::model::{BaseModel, ModelConfig, TideModel, Toggles};
use tide_core::sample::{batch_synthesize, sample_triple};
use tide_core::scenes::{read_dataset, read_header, DepthRule, Grammar};
use tide_core::train::{encode_dataset, finetune_session, pretrain_session, TrainConfig};

fn tiny() -> ModelConfig {
    ModelConfig { image_size: 8, width: 16, image_layers: 3, mini_layers: 2, share_end: 2, share_stride: 1, ..ModelConfig::default() }
}

#[test]
fn train_checkpoint_sample_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = encode_dataset(&procedural_dataset(6, 8).unwrap()).unwrap();
    let cfg = TrainConfig { iterations: 4, mini_iterations: 3, batch: 3, ..TrainConfig::default() };

    let mut a = pretrain_session(tiny(), cfg.clone()).unwrap();
    a.run(&data, u64::MAX, Some(&dir.path().join("a"))).unwrap();
    let base: BaseModel = load_model(&dir.path().join("a")).unwrap();
    assert!(base.mini.is_some());
    assert_eq!(base.store.ids().map(|id| base.store.get(id).clone()).collect::<Vec<_>>(),
        a.model.store.ids().map(|id| a.model.store.get(id).clone()).collect::<Vec<_>>());

    let mut b = finetune_session(&base, tiny(), TrainConfig { iterations: 5, ..cfg }).unwrap();
    b.run(&data, 3, Some(&dir.path().join("b"))).unwrap();
    let mut resumed = load_session::<TideModel>(&dir.path().join("b")).unwrap();
    b.run(&data, u64::MAX, None).unwrap();
    resumed.run(&data, u64::MAX, None).unwrap();
    assert_eq!(b.history, resumed.history);
    assert!(step_dir(&dir.path().join("b"), 3).exists());

    let schedule = b.config.schedule().unwrap();
    let direct = sample_triple(&b.model, &schedule, "a wreck over a dark seabed", 7, 3, Toggles::BOTH).unwrap();
    let again = sample_triple(&resumed.model, &schedule, "a wreck over a dark seabed", 7, 3, Toggles::BOTH).unwrap();
    assert_eq!(direct, again);

    let out = dir.path().join("synth");
    batch_synthesize(&b.model, &schedule, &["a wreck over a dark seabed"], 4, 3, 7, Toggles::BOTH, &out).unwrap();
    let recs = read_dataset(&out).unwrap();
    assert_eq!(recs.len(), 4);
    assert_eq!(recs[0].1.image, direct.image);
    assert_eq!(read_header(&out).unwrap().depth_rule, DepthRule::for_grammar(&Grammar::with_size(8)));
}

#[test]
fn ablation_reports_every_variant() {
    let data = encode_dataset(&procedural_dataset(4, 8).unwrap()).unwrap();
    let cfg = TrainConfig { iterations: 2, mini_iterations: 2, batch: 2, timesteps: 10, ..TrainConfig::default() };
    let base = experiment::pretrain(tiny(), cfg.clone(), &data).unwrap();
    let captions: Vec<String> = data.iter().map(|s| s.caption.clone()).collect();
    let rule = DepthRule::for_grammar(&Grammar::with_size(8));
    let rows = experiment::ablate(&base, &tiny(), &cfg, &data, &captions, 5, 0, &rule).unwrap();
    let names: Vec<&str> = rows.iter().map(|r| r.variant.as_str()).collect();
    assert_eq!(names, ["ils_only", "tan_only", "both", "neither"]);
    assert!(rows.iter().all(|r| r.summary.samples == 4));
}
