use vqa_core::config::RunConfig;
use vqa_core::crop::{score_candidates, CropModelConfig, RegionFeaturizer, S2cNet, SalientScene};
use vqa_core::data_io::{generate_synthetic_dataset, load_manifest, LoadOptions, SyntheticSpec};
use vqa_core::fgm::{fgm_step, FgmConfig, Trainable};
use vqa_core::losses::LossKind;
use vqa_core::nn::seeded_rng;
use vqa_core::optim::Sgd;
use vqa_core::params::Parameterized;
use vqa_core::pipeline::{evaluate_checkpoint, load_data, run_training, train_to_dir, Checkpoint, FeatureStage};
use vqa_core::quality_model::DistributionHead;
use vqa_core::regressor::{QualityRegressor, TrainItem};

fn synthetic_config(extra: &str) -> RunConfig {
    RunConfig::from_toml(&format!(
        r#"
seed = 11
[data.synthetic]
n_train = 40
n_test = 12
[model]
embedding_dim = 8
hidden_dim = 16
frame_count = 4
[fgm]
epsilon = 0.01
[train]
learning_rate = 0.01
batch_size = 8
epochs = 3
optimizer = "adam"
{extra}
"#
    ))
    .unwrap()
}

fn items(cfg: &RunConfig) -> Vec<TrainItem> {
    let data = load_data(cfg).unwrap();
    FeatureStage::new(cfg, None).unwrap().items(&data.train).unwrap()
}

#[test]
fn training_reduces_loss_and_is_deterministic() {
    let cfg = synthetic_config("");
    let a = run_training(&cfg, |_, _| Ok(())).unwrap();
    let b = run_training(&cfg, |_, _| Ok(())).unwrap();
    assert!(a.summary.final_loss.fcl < a.summary.initial_loss.fcl);
    assert_eq!(serde_json::to_string(&a.log).unwrap(), serde_json::to_string(&b.log).unwrap());
    assert_eq!(a.checkpoint, b.checkpoint);
    assert_eq!(a.summary.steps, 15);
}

#[test]
fn zero_epsilon_matches_double_gradient_descent() {
    let cfg = synthetic_config("");
    let data = items(&cfg);
    let batch: Vec<&TrainItem> = data.iter().take(8).collect();
    let head = DistributionHead::new(8, 16, &mut seeded_rng(1));
    let mut fgm_model = QualityRegressor::new(head.clone(), LossKind::Fcl, 20.0);
    let mut baseline = QualityRegressor::new(head, LossKind::Fcl, 20.0);
    for _ in 0..20 {
        fgm_step(&mut fgm_model, &batch, &FgmConfig::new(0.0), &mut Sgd, 0.05).unwrap();
        let g1 = baseline.evaluate(&batch).unwrap().grads;
        let g2 = baseline.evaluate(&batch).unwrap().grads;
        for (w, (a, b)) in baseline.param_slices_mut().into_iter().zip(g1.iter().zip(&g2)) {
            for ((w, a), b) in w.iter_mut().zip(a).zip(b) {
                *w -= 0.05 * (a + b);
            }
        }
    }
    for (x, y) in fgm_model.snapshot().iter().flatten().zip(baseline.snapshot().iter().flatten()) {
        assert!((x - y).abs() < 1e-6);
    }
}

#[test]
fn zero_max_steps_leaves_the_model_untouched() {
    let mut cfg = synthetic_config("");
    cfg.train.max_steps = Some(0);
    let run = run_training(&cfg, |_, _| Ok(())).unwrap();
    assert_eq!(run.summary.steps, 0);
    assert_eq!(run.summary.initial_loss, run.summary.final_loss);
}

#[test]
fn ablation_losses_and_plain_training_run() {
    for extra in ["[loss]\nkind = \"mae\"", "[loss]\nkind = \"bce\"", ""] {
        let mut cfg = synthetic_config(extra);
        cfg.fgm = FgmConfig::disabled();
        let run = run_training(&cfg, |_, _| Ok(())).unwrap();
        assert!(run.log.iter().all(|r| r.adv_loss.is_none() && r.delta_norms.is_empty()));
    }
}

#[test]
fn manifest_run_writes_artifacts_and_evaluates() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_synthetic_dataset(&SyntheticSpec::new(24, 8), 5).unwrap();
    ds.write_to(&dir.path().join("data")).unwrap();
    let text = r#"
seed = 2
[data]
manifest = "data/manifest.csv"
mos_range = [1.0, 5.0]
[model]
embedding_dim = 8
hidden_dim = 16
frame_count = 4
[fgm]
epsilon = 0.01
[train]
learning_rate = 0.01
batch_size = 6
epochs = 20
optimizer = "adam"
[crop]
enabled = true
pretrain_scenes = 8
[output]
dir = "out"
checkpoint_every = 40
"#;
    let cfg_path = dir.path().join("run.toml");
    std::fs::write(&cfg_path, text).unwrap();
    let cfg = RunConfig::load(&cfg_path).unwrap();
    let run = train_to_dir(&cfg).unwrap();
    let out = dir.path().join("out");
    for f in ["config.toml", "train_log.jsonl", "checkpoint.json", "summary.json", "checkpoint_step_40.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let lines = std::fs::read_to_string(out.join("train_log.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), run.summary.steps);

    let ck = Checkpoint::load(&out.join("checkpoint.json")).unwrap();
    assert!(ck.crop_model.is_some());
    assert_eq!(ck.config_hash, ck.config.hash());
    let manifest = load_manifest(&dir.path().join("data/manifest.csv"), LoadOptions { scale: ck.mos_scale, check_paths: true }).unwrap();
    let train_eval = evaluate_checkpoint(&ck, &manifest, Some("train"), dir.path()).unwrap();
    assert!(train_eval.report.srocc > 0.0, "{}", train_eval.report.srocc);
    let again = evaluate_checkpoint(&ck, &manifest, Some("train"), dir.path()).unwrap();
    assert_eq!(serde_json::to_string(&train_eval).unwrap(), serde_json::to_string(&again).unwrap());
}

#[test]
fn missing_manifest_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let text = "[data]\nmanifest = \"nope.csv\"\n[fgm]\nepsilon = 0.0\n[train]\nlearning_rate = 0.1\nbatch_size = 1\nepochs = 1\n";
    let p = dir.path().join("run.toml");
    std::fs::write(&p, text).unwrap();
    let cfg = RunConfig::load(&p).unwrap();
    assert!(run_training(&cfg, |_, _| Ok(())).is_err());
}

#[test]
fn spatial_sign_changes_candidate_scores() {
    let feat = RegionFeaturizer::new(3, 8, 1);
    let scene = SalientScene::generate(32, &mut seeded_rng(4));
    let mut scores = Vec::new();
    for sign in [1i8, -1] {
        let mut cfg = CropModelConfig::new(8, 3);
        cfg.spatial_exp_sign = sign;
        let model = S2cNet::new(cfg, &mut seeded_rng(9)).unwrap();
        let s = score_candidates(scene.image.view(), &scene.candidates, &scene.detector(&feat), &model).unwrap();
        scores.push(s.iter().map(|c| c.score).collect::<Vec<_>>());
    }
    assert_ne!(scores[0], scores[1]);
}
