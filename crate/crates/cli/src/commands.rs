use std::fs;
use std::path::{Path, PathBuf};

use negadapt::evalkit::{
    aggregate, evaluate_checkpoint, histogram2d, metrics_csv, results_table, table_csv, R2Form, RunMetrics,
};
use negadapt::formats::{decode_checkpoint, encode_checkpoint, DatasetManifest};
use negadapt::qstate::SystemKind;
use negadapt::trainer::{series_config, test_dataset, train_series, train_with, Checkpoint, EpochRecord, RunConfig};

use crate::error::CliError;
use crate::output::{read, read_text, write_atomic, write_csv};

fn load_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = read_text(path)?;
    let config: RunConfig =
        serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    config.validate()?;
    config.measurement_mode()?;
    Ok(config)
}

fn config_bytes(config: &RunConfig) -> Vec<u8> {
    serde_json::to_vec(config).expect("config serializes")
}

fn test_manifest(config: &RunConfig) -> DatasetManifest {
    DatasetManifest::new(config.system, config.test_size, config.test_seed())
}

fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,batch_size,val_loss\n");
    for r in history {
        s.push_str(&format!("{},{},{}\n", r.epoch, r.batch_size, r.val_loss));
    }
    s
}

fn log_epoch(label: &str, r: &EpochRecord) {
    eprintln!("{label} epoch {:>3}  B {:>3}  val {:.6e}", r.epoch, r.batch_size, r.val_loss);
}

pub fn gen(system: SystemKind, count: usize, seed: u64, out: &Path, export: Option<&Path>) -> Result<(), CliError> {
    let manifest = DatasetManifest::new(system, count, seed);
    manifest.validate()?;
    write_atomic(out, manifest.to_json().as_bytes())?;
    if let Some(raw) = export {
        let mut buf = Vec::new();
        manifest.export_raw(&mut buf)?;
        write_atomic(raw, &buf)?;
    }
    Ok(())
}

fn write_run(dir: &Path, ck: &Checkpoint, name: &str) -> Result<Checkpoint, CliError> {
    let bytes = encode_checkpoint(ck);
    write_atomic(&dir.join(name), &bytes)?;
    // What later commands see is the stored, 32-bit copy.
    Ok(decode_checkpoint(&bytes)?)
}

fn write_common(dir: &Path, config: &RunConfig) -> Result<(), CliError> {
    let pretty = serde_json::to_string_pretty(config).expect("config serializes");
    write_atomic(&dir.join("config.json"), pretty.as_bytes())?;
    write_atomic(&dir.join("test-manifest.json"), test_manifest(config).to_json().as_bytes())
}

pub fn train(config_path: &Path, out: &Path, progress: bool) -> Result<(), CliError> {
    let config = load_config(config_path)?;
    let label = config.strategy();
    let ck = train_with(&config, None, |r| {
        if progress {
            log_epoch(&label, r)
        }
    })?;
    write_common(out, &config)?;
    write_run(out, &ck, "checkpoint.ngck")?;
    write_csv(&out.join("history.csv"), &history_csv(&ck.history), "history", &config_bytes(&config))?;
    if progress {
        eprintln!(
            "{label} n={} best val {:.6e} at epoch {}",
            config.n, ck.best_val_loss, ck.best_epoch
        );
    }
    Ok(())
}

pub fn series(config_path: &Path, out: &Path, repeats: usize, r2: R2Form, progress: bool) -> Result<(), CliError> {
    if repeats == 0 {
        return Err(CliError::config("repeats must be at least 1"));
    }
    let config = load_config(config_path)?;
    let checkpoints = train_series(&config, repeats)?;
    write_common(out, &config)?;
    let test = test_dataset(&config)?;
    let mut metrics = Vec::with_capacity(repeats);
    for (k, ck) in checkpoints.iter().enumerate() {
        let stored = write_run(out, ck, &format!("model-{k}.ngck"))?;
        let id = format!("{}-n{}-seed{}", config.strategy(), config.n, series_config(&config, k).seeds.model);
        let m = evaluate_checkpoint(&stored, &test, &id)?;
        if progress {
            eprintln!("{id}: l1 {:.5}  best val {:.6e}", m.l1, ck.best_val_loss);
        }
        metrics.push(m);
    }
    let cfg = config_bytes(&config);
    write_csv(&out.join("metrics.csv"), &metrics_csv(&metrics), "metrics", &cfg)?;
    write_atomic(
        &out.join("metrics.json"),
        serde_json::to_string_pretty(&metrics).expect("metrics serialize").as_bytes(),
    )?;
    let agg = aggregate(&metrics, r2)?;
    write_atomic(
        &out.join("aggregate.json"),
        serde_json::to_string_pretty(&agg).expect("aggregate serializes").as_bytes(),
    )?;
    Ok(())
}

pub fn eval(
    checkpoint: &Path,
    manifest_path: &Path,
    out: &Path,
    id: Option<String>,
    histogram_sample: usize,
) -> Result<(), CliError> {
    let manifest = DatasetManifest::from_json(&read_text(manifest_path)?)?;
    if manifest.count < histogram_sample {
        return Err(CliError::config(format!(
            "manifest holds {} states, histogram needs {histogram_sample}",
            manifest.count
        )));
    }
    let ck = decode_checkpoint(&read(checkpoint)?)?;
    if ck.config.system != manifest.system {
        return Err(CliError::config(format!(
            "checkpoint is for {}, manifest for {}",
            ck.config.system, manifest.system
        )));
    }
    let id = id.unwrap_or_else(|| {
        checkpoint
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "model".into())
    });
    let data = manifest.dataset()?;
    let metrics = evaluate_checkpoint(&ck, &data, &id)?;
    let hist = histogram2d(&metrics.pairs, histogram_sample)?;

    let mut hashed = config_bytes(&ck.config);
    hashed.extend_from_slice(manifest.to_json().as_bytes());
    let all = [metrics];
    write_csv(&out.join("metrics.csv"), &metrics_csv(&all), "metrics", &hashed)?;
    write_atomic(
        &out.join("metrics.json"),
        serde_json::to_string_pretty(&all).expect("metrics serialize").as_bytes(),
    )?;
    write_csv(&out.join("histogram.csv"), &hist.to_csv(), "histogram", &hashed)?;
    Ok(())
}

fn collect_metrics(path: &Path, found: &mut Vec<PathBuf>) -> Result<(), CliError> {
    let meta = fs::metadata(path).map_err(|e| CliError::io(path, e))?;
    if meta.is_file() {
        found.push(path.to_path_buf());
        return Ok(());
    }
    let mut entries = fs::read_dir(path)
        .map_err(|e| CliError::io(path, e))?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| CliError::io(path, e))?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_metrics(&p, found)?;
        } else if p.file_name().is_some_and(|n| n == "metrics.json") {
            found.push(p);
        }
    }
    Ok(())
}

pub fn report(inputs: &[PathBuf], out: &Path, r2: R2Form) -> Result<(), CliError> {
    let mut files = Vec::new();
    for p in inputs {
        collect_metrics(p, &mut files)?;
    }
    if files.is_empty() {
        return Err(CliError::config("no metrics.json files found"));
    }
    let mut hashed = Vec::new();
    let mut metrics: Vec<RunMetrics> = Vec::new();
    for f in &files {
        let text = read_text(f)?;
        let part: Vec<RunMetrics> =
            serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", f.display())))?;
        hashed.extend_from_slice(text.as_bytes());
        metrics.extend(part);
    }
    let rows = results_table(&metrics, r2);
    let csv = table_csv(&rows);
    write_csv(&out.join("table.csv"), &csv, "table", &hashed)?;
    print!("{csv}");
    Ok(())
}
