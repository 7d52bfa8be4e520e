use tempfile::TempDir;
use trikd::config::{ModelConfig, Preset};
use trikd::data::{Dataset, GenSpec, Sample};
use trikd::model::{forward_all, forward_hybrid, model_specs};
use trikd::nn::{Bound, ParamStore};
use trikd::train::{self, checkpoint, RunOptions, TrainConfig};
use trikd::Graph;

fn small() -> Dataset {
    Dataset::generate(&GenSpec::default(), 16, 0.5, 7).unwrap()
}

#[test]
fn three_views_share_output_shape() {
    let model = ModelConfig::preset(Preset::Desk, 4);
    let store = ParamStore::init(&model_specs(&model), 0);
    let data = small();
    let refs: Vec<&Sample> = data.samples.iter().take(2).collect();
    let mut g = Graph::new();
    let x = g.input(train::stack_images(&refs).unwrap());
    let mut b = Bound::new(&store, true);
    let out = forward_all(&mut g, &mut b, &model, x).unwrap();
    for p in out.probs {
        assert_eq!(g.shape(p.log_probs), &[2, 4, 64, 64]);
        let lp = g.data(p.log_probs);
        for pix in 0..64 * 64 {
            let s: f64 = (0..4).map(|c| lp[c * 64 * 64 + pix].exp()).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
    assert_eq!(g.shape(out.f1_cnn), g.shape(out.f1_proj));
    let (av, ah) = (g.shape(out.att_vit).to_vec(), g.shape(out.att_hyb).to_vec());
    assert_eq!(av[1], av[2]);
    assert_eq!(ah[1], ah[2]);
    assert!(ah[1] <= av[1]);
}

#[test]
fn hybrid_path_matches_predict() {
    let model = ModelConfig::preset(Preset::Desk, 4);
    let store = ParamStore::init(&model_specs(&model), 2);
    let data = small();
    let refs: Vec<&Sample> = data.samples.iter().take(3).collect();
    let mut g = Graph::new();
    let x = g.input(train::stack_images(&refs).unwrap());
    let mut b = Bound::new(&store, false);
    let out = forward_hybrid(&mut g, &mut b, &model, x).unwrap();
    let direct = g.value(out.probs.log_probs).argmax(1).unwrap().1;
    assert_eq!(train::predict(&store, &model, &refs).unwrap().labels, direct);
}

#[test]
fn disk_dataset_trains_and_checkpoints() {
    let tmp = TempDir::new().unwrap();
    let data = small();
    data.save(&tmp.path().join("data")).unwrap();
    let loaded = Dataset::load(&tmp.path().join("data")).unwrap();

    let mut cfg = TrainConfig::default();
    cfg.max_steps = 3;
    cfg.eval_count = 4;
    let out = tmp.path().join("run");
    std::fs::create_dir_all(&out).unwrap();
    let opts = RunOptions { out: Some(&out), stop_after: None };
    let (state, summary) = train::run(&cfg, &loaded, None, opts, &mut |_| {}).unwrap();
    let (_, in_memory) = train::run(&cfg, &data, None, RunOptions::default(), &mut |_| {}).unwrap();
    assert_eq!(summary.csv, in_memory.csv);

    let (text, back) = checkpoint::load(&out.join(train::CHECKPOINT_FILE)).unwrap();
    assert_eq!(back.step, 3);
    let (cfg_back, model) = train::model_from_checkpoint(&text, &back).unwrap();
    assert_eq!(cfg_back, cfg);
    assert_eq!(model.classes, 4);
    let refs: Vec<&Sample> = data.samples.iter().take(2).collect();
    assert_eq!(
        train::predict(&back.store, &model, &refs).unwrap().labels,
        train::predict(&state.store, &model, &refs).unwrap().labels
    );
    let report = train::evaluate(&back.store, &model, &data.held_out(4)).unwrap();
    assert_eq!(report.miou, summary.eval.miou);
    let csv = std::fs::read_to_string(out.join(train::METRICS_FILE)).unwrap();
    assert_eq!(csv, summary.csv);
}

#[test]
fn label_ratio_must_match_manifest() {
    let data = small();
    let mut cfg = TrainConfig::default();
    cfg.max_steps = 1;
    cfg.label_ratio = Some(0.125);
    let err = train::run(&cfg, &data, None, RunOptions::default(), &mut |_| {}).unwrap_err();
    assert!(err.to_string().contains("label_ratio"), "{err}");
}

#[test]
fn predict_rejects_other_extents() {
    let model = ModelConfig::preset(Preset::Desk, 4);
    let store = ParamStore::init(&model_specs(&model), 0);
    let spec = GenSpec { size: 32, ..GenSpec::default() };
    let other = Dataset::generate(&spec, 1, 1.0, 0).unwrap();
    let err = train::predict(&store, &model, &[&other.samples[0]]).err().unwrap();
    assert!(err.to_string().contains("32x32"), "{err}");
}
