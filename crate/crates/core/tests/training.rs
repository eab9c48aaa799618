use hazloc::data::{synth_generate, SynthConfig, Vocabulary, PROMPT};
use hazloc::model::{FineTuneMode, Model, ModelConfig};
use hazloc::training::{
    encode_dataset, evaluate, load_checkpoint, restore_state, train, EncodedSample, TrainConfig,
    TrainError, TrainMode, LOG_HEADER,
};
use hazloc::Exec;

fn setup(n: usize) -> (Model, Vec<EncodedSample>) {
    let samples = synth_generate(n, &SynthConfig::default(), 17, Exec::default()).unwrap();
    let mut corpus: Vec<&str> = samples.iter().map(|s| s.caption.as_str()).collect();
    corpus.push(PROMPT);
    let vocab = Vocabulary::build(&corpus);
    let model = Model::new(ModelConfig::toy(vocab.len()), 2).unwrap();
    let data = encode_dataset(&samples, &vocab, &model).unwrap();
    (model, data)
}

#[test]
fn checkpoint_restores_model_and_optimizer() {
    let (mut model, data) = setup(12);
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, log) = (dir.path().join("m.bin"), dir.path().join("log.csv"));
    let cfg = TrainConfig {
        epochs: 2,
        grad_accum_steps: 4,
        base_lr: 1e-3,
        mode: TrainMode::LoraFinetune,
        checkpoint_path: Some(ckpt.clone()),
        log_path: Some(log.clone()),
        validate: false,
        ..TrainConfig::default()
    };
    let out = train(&mut model, &data, &[], &cfg).unwrap();
    assert_eq!(out.steps, cfg.total_steps(data.len()));

    let text = std::fs::read_to_string(&log).unwrap();
    assert_eq!(text.lines().next(), Some(LOG_HEADER));
    assert_eq!(text.lines().count(), out.steps + 1);

    let loaded = load_checkpoint(&ckpt).unwrap();
    assert_eq!(loaded.meta.step, out.steps as u64);
    assert_eq!(loaded.meta.epoch, 2);
    let restored = Model::from_named(model.config().clone(), loaded.params).unwrap();
    assert_eq!(restored.mode(), FineTuneMode::Lora);
    assert_eq!(restored.named_tensors(), model.named_tensors());
    let state = restore_state(&restored, &loaded.moments, loaded.meta.step);
    assert_eq!(state.m, out.state.m);
    assert_eq!(state.v, out.state.v);
    assert_eq!(state.t, out.state.t);

    let a = evaluate(&model, &data, None, Exec::Sequential).unwrap();
    let b = evaluate(&restored, &data, None, Exec::Parallel).unwrap();
    assert_eq!(a, b);
}

#[test]
fn huge_learning_rate_is_reported_as_divergence() {
    let (mut model, data) = setup(16);
    let cfg = TrainConfig {
        epochs: 3,
        grad_accum_steps: 1,
        base_lr: 1e6,
        warmup_start_lr: 1e6,
        clip_max_norm: 1e9,
        mode: TrainMode::Pretrain,
        validate: false,
        ..TrainConfig::default()
    };
    match train(&mut model, &data, &[], &cfg) {
        Err(TrainError::Diverged {
            step,
            loss,
            initial,
        }) => {
            assert!(step > 1);
            assert!(!loss.is_finite() || loss > 100.0 * initial);
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn pretraining_an_adapted_model_is_rejected() {
    let (mut model, data) = setup(4);
    model.enable_lora(0).unwrap();
    let cfg = TrainConfig {
        mode: TrainMode::Pretrain,
        ..TrainConfig::default()
    };
    assert!(matches!(
        train(&mut model, &data, &[], &cfg),
        Err(TrainError::Config(_))
    ));
    assert!(matches!(
        train(&mut model, &[], &[], &TrainConfig::default()),
        Err(TrainError::Empty)
    ));
}
