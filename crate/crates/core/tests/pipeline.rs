use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tai_speech::audio;
use tai_speech::dsp::{read_taif, write_taif, Frontend, FrontendConfig};
use tai_speech::model::{forward, ModelConfig, ModelInput, ModelParams};
use tai_speech::synth::{synth_utterance, SynthConfig};

#[test]
fn wav_to_prediction_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig { duration_s: 1.0, ..Default::default() };
    let w = synth_utterance(1, &cfg, &mut ChaCha8Rng::seed_from_u64(11));
    let wav = dir.path().join("u.wav");
    audio::write_wav_i16(&wav, &w).unwrap();

    let frontend = Frontend::new(FrontendConfig::default()).unwrap();
    let feats = frontend.extract(&audio::load_canonical(&wav).unwrap()).unwrap();
    let taif = dir.path().join("u.taif");
    write_taif(&taif, &feats).unwrap();
    let back = read_taif(&taif).unwrap();
    assert_eq!(back, feats);
    // 1 s at hop 160 with a 400-sample window
    assert_eq!(back.frames, 98);

    let params = ModelParams::<f64>::init(ModelConfig::default(), 3).unwrap();
    let (y, h) = forward(&params, &ModelInput::from_features(&back).unwrap()).unwrap();
    assert!((y[0] + y[1] - 1.0).abs() <= 1e-12);
    assert!(y.iter().all(|p| *p > 0.0 && *p < 1.0));
    let cfg = ModelConfig::default();
    assert_eq!(h.shape(), [cfg.refined_len(98), cfg.d]);
}
