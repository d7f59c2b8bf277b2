use std::path::{Component, Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use tai_speech::audio::{self, ManifestEntry};
use tai_speech::autodiff::Real;
use tai_speech::config::RunConfig;
use tai_speech::dsp::{self, Frontend};
use tai_speech::model::{self, ModelInput, ModelParams};
use tai_speech::synth;
use tai_speech::train::{self, Example, Precision};
use tai_speech::verify::{self, VerifyOptions};

use crate::exit::{self, CliError};

fn load_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    match path {
        Some(p) => Ok(RunConfig::load(p)?),
        None => Ok(RunConfig::default()),
    }
}

fn manifest_dir(manifest: &Path) -> PathBuf {
    manifest.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Feature directory for a manifest: the config's `features_dir` (relative
/// to the manifest) or `<manifest dir>/features`.
fn default_features_dir(cfg: &RunConfig, manifest: &Path) -> PathBuf {
    let base = manifest_dir(manifest);
    match &cfg.paths.features_dir {
        Some(d) => base.join(d),
        None => base.join("features"),
    }
}

/// Audio path relative to the manifest, or the path without its root when it
/// lies elsewhere.
fn relative_audio_path(base: &Path, audio: &Path) -> PathBuf {
    match audio.strip_prefix(base) {
        Ok(rel) => rel.to_path_buf(),
        Err(_) => audio.components().filter(|c| matches!(c, Component::Normal(_))).collect(),
    }
}

fn example_id(base: &Path, e: &ManifestEntry) -> String {
    let rel = relative_audio_path(base, &e.audio_path);
    rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/")
}

/// `<features dir>/<audio path relative to the manifest>.taif`.
fn feature_path(features_dir: &Path, base: &Path, e: &ManifestEntry) -> PathBuf {
    features_dir.join(relative_audio_path(base, &e.audio_path)).with_extension("taif")
}

pub fn synth(config: Option<&Path>, out_dir: &Path, seed: Option<u64>) -> Result<(), CliError> {
    let mut cfg = load_config(config)?.synth;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let entries = synth::generate_corpus(&cfg, out_dir).map_err(|e| CliError::from(e).context(out_dir.display()))?;
    let ones = entries.iter().filter(|e| e.label == 1).count();
    println!("wrote {} utterances to {}", entries.len(), out_dir.display());
    println!("  class 0 (control):  {}", entries.len() - ones);
    println!("  class 1 (dementia): {ones}");
    println!("  manifest: {}", out_dir.join("manifest.csv").display());
    Ok(())
}

pub fn extract(manifest: &Path, config: Option<&Path>, out_dir: Option<&Path>, force: bool, keep_going: bool) -> Result<(), CliError> {
    let cfg = load_config(config)?;
    let entries = audio::load_manifest(manifest).map_err(|e| CliError::from(e).context(manifest.display()))?;
    let frontend = Frontend::new(cfg.frontend)?;
    let out = out_dir.map(Path::to_path_buf).unwrap_or_else(|| default_features_dir(&cfg, manifest));
    let base = manifest_dir(manifest);

    let todo: Vec<(&ManifestEntry, PathBuf)> =
        entries.iter().map(|e| (e, feature_path(&out, &base, e))).filter(|(_, p)| force || !p.exists()).collect();
    let skipped = entries.len() - todo.len();
    let decoded: Vec<Result<audio::Waveform, String>> =
        todo.par_iter().map(|(e, _)| audio::load_canonical(&e.audio_path).map_err(|err| err.to_string())).collect();
    let offenders: Vec<String> = todo
        .iter()
        .zip(&decoded)
        .filter_map(|((e, _), d)| d.as_ref().err().map(|err| format!("{}: {err}", e.audio_path.display())))
        .collect();
    for o in &offenders {
        eprintln!("undecodable: {o}");
    }
    if !offenders.is_empty() && !keep_going {
        return Err(CliError::new(exit::AUDIO, format!("{} undecodable file(s); nothing written (use --keep-going)", offenders.len())));
    }

    let written: Vec<Result<(), String>> = todo
        .par_iter()
        .zip(&decoded)
        .filter_map(|((e, path), w)| w.as_ref().ok().map(|w| (e, path, w)))
        .map(|(e, path, w)| {
            let f = frontend.extract(w).map_err(|err| format!("{}: {err}", e.audio_path.display()))?;
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir).map_err(|err| format!("{}: {err}", dir.display()))?;
            }
            dsp::write_taif(path, &f).map_err(|err| format!("{}: {err}", path.display()))
        })
        .collect();
    let mut failures = 0;
    for err in written.iter().filter_map(|r| r.as_ref().err()) {
        eprintln!("failed: {err}");
        failures += 1;
    }
    let done = written.len() - failures;
    println!("{done} feature files written, {skipped} already present, {} undecodable -> {}", offenders.len(), out.display());
    if failures > 0 {
        return Err(CliError::new(exit::IO, format!("{failures} feature file(s) could not be produced")));
    }
    if !offenders.is_empty() {
        return Err(CliError::new(exit::AUDIO, format!("{} undecodable file(s) skipped", offenders.len())));
    }
    Ok(())
}

/// Reads the feature file of every manifest row, computing it in memory when
/// the file is absent.
fn load_examples<F: Real>(manifest: &Path, cfg: &RunConfig) -> Result<Vec<Example<F>>, CliError> {
    let entries = audio::load_manifest(manifest).map_err(|e| CliError::from(e).context(manifest.display()))?;
    let frontend = Frontend::new(cfg.frontend)?;
    let dir = default_features_dir(cfg, manifest);
    let base = manifest_dir(manifest);
    let missing = entries.iter().filter(|e| !feature_path(&dir, &base, e).exists()).count();
    if missing > 0 {
        log::info!("{missing} feature files missing under {}, extracting in memory", dir.display());
    }
    entries
        .par_iter()
        .map(|e| {
            let path = feature_path(&dir, &base, e);
            let feats = if path.exists() {
                dsp::read_taif(&path).map_err(|err| CliError::from(err).context(path.display()))?
            } else {
                let w = audio::load_canonical(&e.audio_path).map_err(|err| CliError::from(err).context(e.audio_path.display()))?;
                frontend.extract(&w).map_err(|err| CliError::from(err).context(e.audio_path.display()))?
            };
            if feats.n_mels != cfg.model.n_mels {
                return Err(CliError::new(
                    exit::CONFIG,
                    format!("{}: {} mel bands, model expects {}", path.display(), feats.n_mels, cfg.model.n_mels),
                ));
            }
            let input = ModelInput::from_features(&feats)?;
            Ok(Example { id: example_id(&base, e), subject_id: e.subject_id.clone(), label: e.label, input })
        })
        .collect()
}

fn resolved_config(config: Option<&Path>, seed: Option<u64>) -> Result<RunConfig, CliError> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    Ok(cfg)
}

fn prepare_run_dir(cfg: &RunConfig, run_name: &str) -> Result<PathBuf, CliError> {
    let dir = cfg.paths.runs_dir.join(run_name);
    std::fs::create_dir_all(&dir).map_err(|e| exit::io(format!("{}: {e}", dir.display())))?;
    let path = dir.join("config.json");
    std::fs::write(&path, cfg.to_json() + "\n").map_err(|e| exit::io(format!("{}: {e}", path.display())))?;
    Ok(dir)
}

pub fn cv(manifest: &Path, config: Option<&Path>, run_name: &str, seed: Option<u64>) -> Result<(), CliError> {
    let cfg = resolved_config(config, seed)?;
    match cfg.train.precision {
        Precision::F32 => cv_typed::<f32>(manifest, &cfg, run_name),
        Precision::F64 => cv_typed::<f64>(manifest, &cfg, run_name),
    }
}

fn cv_typed<F: Real>(manifest: &Path, cfg: &RunConfig, run_name: &str) -> Result<(), CliError> {
    let start = Instant::now();
    let data = load_examples::<F>(manifest, cfg)?;
    let dir = prepare_run_dir(cfg, run_name)?;
    let report = train::run_cv(&data, cfg.model, &cfg.train, cfg.folds, Some(&dir))?;
    let pct = |v: f64| format!("{:>9.2}", 100.0 * v);
    println!("{}-fold cross-validation on {} utterances (seed {})", cfg.folds, data.len(), cfg.train.seed);
    println!("{:<6}{:>9}{:>9}{:>9}{:>10}{:>8}", "fold", "AUC", "ACC", "REC", "F1-score", "epochs");
    for f in &report.folds {
        let m = &f.metrics;
        println!("{:<6}{}{}{}{} {:>8}", m.fold, pct(m.auc), pct(m.acc), pct(m.recall), pct(m.f1), f.history.len());
    }
    // summary columns: auc, acc, precision, recall, f1
    for (name, row) in [("mean", report.mean), ("std", report.std)] {
        println!("{name:<6}{}{}{}{}", pct(row[0]), pct(row[1]), pct(row[3]), pct(row[4]));
    }
    println!("metrics: {}", dir.join("metrics.csv").display());
    println!("elapsed: {:.1} s", start.elapsed().as_secs_f64());
    Ok(())
}

pub fn train(manifest: &Path, config: Option<&Path>, run_name: &str, seed: Option<u64>) -> Result<(), CliError> {
    let cfg = resolved_config(config, seed)?;
    match cfg.train.precision {
        Precision::F32 => train_typed::<f32>(manifest, &cfg, run_name),
        Precision::F64 => train_typed::<f64>(manifest, &cfg, run_name),
    }
}

fn train_typed<F: Real>(manifest: &Path, cfg: &RunConfig, run_name: &str) -> Result<(), CliError> {
    let data = load_examples::<F>(manifest, cfg)?;
    let all: Vec<usize> = (0..data.len()).collect();
    let (fit_idx, val_idx) = train::validation_split(&data, &all, train::derive_seed(cfg.train.seed, 100))?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| data[i].clone()).collect::<Vec<_>>();
    let (fit, val) = (pick(&fit_idx), pick(&val_idx));
    let dir = prepare_run_dir(cfg, run_name)?;
    let (params, history) = train::train_one_fold(cfg.model, &fit, &val, &cfg.train)?;
    let params_path = dir.join("params.bin");
    model::save_params(&params, &params_path)?;
    train::write_epochs_csv(&dir.join("epochs.csv"), &history).map_err(exit::io)?;
    let best = train::early_stopping(&history.iter().map(|r| r.val_auc).collect::<Vec<_>>(), cfg.train.patience).best_epoch;
    println!("trained on {} utterances, validated on {}", fit.len(), val.len());
    println!("best epoch {best} of {}, validation AUC {:.4}", history.len(), history[best].val_auc);
    println!("parameters: {}", params_path.display());
    Ok(())
}

pub fn predict(params_path: &Path, wav: &Path, config: Option<&Path>) -> Result<(), CliError> {
    let cfg = load_config(config)?;
    let params: ModelParams<f64> = model::load_params(params_path).map_err(|e| CliError::from(e).context(params_path.display()))?;
    if params.config.n_mels != cfg.frontend.mel.n_mels {
        return Err(CliError::new(
            exit::PARAMS,
            format!("parameters expect {} mel bands, frontend produces {}", params.config.n_mels, cfg.frontend.mel.n_mels),
        ));
    }
    let frontend = Frontend::new(cfg.frontend)?;
    let w = audio::load_canonical(wav).map_err(|e| CliError::from(e).context(wav.display()))?;
    let feats = frontend.extract(&w).map_err(|e| CliError::from(e).context(wav.display()))?;
    let (y, _) = model::forward(&params, &ModelInput::from_features(&feats)?)?;
    println!("{:.6},{:.6}", y[0], y[1]);
    Ok(())
}

pub fn verify(perturb_gradient: f64) -> Result<(), CliError> {
    let start = Instant::now();
    let groups = verify::run_suite(&VerifyOptions { perturb_gradient });
    let mut failed = 0;
    for g in &groups {
        let tag = if g.passed() { "PASS" } else { "FAIL" };
        println!("{tag}  {} ({:.1} s)", g.name, g.seconds);
        for c in &g.checks {
            let mark = if c.passed { "ok  " } else { "FAIL" };
            println!("      {mark} {}: {}", c.name, c.detail);
        }
        failed += usize::from(!g.passed());
    }
    println!("{} of {} groups passed in {:.1} s", groups.len() - failed, groups.len(), start.elapsed().as_secs_f64());
    if failed > 0 {
        return Err(CliError::new(exit::VERIFY_FAILED, format!("{failed} verification group(s) failed")));
    }
    Ok(())
}
