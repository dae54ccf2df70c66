//! Trained-model cache shared by the test targets that need real models.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use reform_core::config::Config;
use reform_core::pipeline::{run_stage, ModelSet, Stage};

const TIMINGS_FILE: &str = "acceptance_timings.json";

static TRAINING: Mutex<()> = Mutex::new(());

pub fn config() -> Config {
    Config::default()
}

pub fn cache_dir(cfg: &Config) -> PathBuf {
    Path::new(env!("CARGO_TARGET_TMPDIR"))
        .join("acceptance-models")
        .join(&cfg.fingerprint()[..16])
}

/// Trains whatever stages are missing from the cache, recording how long
/// each took, and loads the set. The first call can take about an hour.
pub fn trained_models() -> anyhow::Result<(Config, ModelSet, BTreeMap<String, f64>)> {
    let _guard = TRAINING.lock().unwrap_or_else(|e| e.into_inner());
    let cfg = config();
    let dir = cache_dir(&cfg);
    std::fs::create_dir_all(&dir)?;
    let timings_path = dir.join(TIMINGS_FILE);
    let mut timings: BTreeMap<String, f64> = match std::fs::read(&timings_path) {
        Ok(b) => serde_json::from_slice(&b)?,
        Err(_) => BTreeMap::new(),
    };
    for stage in Stage::ALL {
        if !stage.is_done(&dir) {
            eprintln!("training {} into {}", stage.name(), dir.display());
            let t = Instant::now();
            run_stage(stage, &cfg, &dir)?;
            timings.insert(stage.name().to_string(), t.elapsed().as_secs_f64());
            std::fs::write(&timings_path, serde_json::to_vec_pretty(&timings)?)?;
        }
    }
    let models = ModelSet::load(&dir)?;
    Ok((cfg, models, timings))
}

#[allow(dead_code)]
/// The `report` object of a stage's `<stage>_report.json`.
pub fn stage_report(models: &ModelSet, stage: Stage) -> anyhow::Result<serde_json::Value> {
    let doc: serde_json::Value = serde_json::from_slice(&std::fs::read(models.dir.join(stage.report_file()))?)?;
    Ok(doc["report"].clone())
}
