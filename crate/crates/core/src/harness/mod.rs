//! Run directories and the operations behind the command-line tool.
//!
//! A run directory holds:
//!
//! ```text
//! config.toml                  fully expanded config
//! data/task_<id>.lltts         datasets (written by gen-data, read by train when present)
//! checkpoints/stage_<k>.json   state after k completed stages
//! result.json                  stage reports and learning curves
//! curves.csv                   epoch,language,raw,smoothed
//! report.csv                   this run's row of the stage table
//! ```

mod checkpoint;
mod config;

pub use checkpoint::{load_checkpoint, load_for_resume, save_checkpoint, Checkpoint};
pub use config::{default_topology, parse_config, ExperimentConfig};

use std::path::{Path, PathBuf};

use crate::data::format::write_atomic;
use crate::data::{generate_task, load_dataset, save_dataset, TaskDataset};
use crate::error::{Error, Result};
use crate::metrics::render_table;
use crate::strategies::{run_sequence_with, ExperimentResult, SequenceState};

pub const RESULT_FILE: &str = "result.json";

pub fn dataset_path(output_dir: &Path, language_id: u32) -> PathBuf {
    output_dir.join("data").join(format!("task_{language_id}.lltts"))
}

pub fn checkpoint_path(output_dir: &Path, completed_stages: usize) -> PathBuf {
    output_dir
        .join("checkpoints")
        .join(format!("stage_{completed_stages}.json"))
}

/// Generates every task of the config and writes the dataset files.
pub fn gen_data(config: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let t = &config.topology;
    config
        .tasks
        .iter()
        .map(|spec| {
            let ds = generate_task(spec, t.vocab_size, t.frame_dim)?;
            let path = dataset_path(&config.output_dir, spec.language_id);
            save_dataset(&ds, t.num_languages, &path)?;
            Ok(path)
        })
        .collect()
}

/// Uses the run directory's dataset files when present, generating otherwise.
fn load_or_generate(config: &ExperimentConfig) -> Result<Vec<TaskDataset>> {
    let t = &config.topology;
    config
        .tasks
        .iter()
        .map(|spec| {
            let path = dataset_path(&config.output_dir, spec.language_id);
            if !path.exists() {
                return generate_task(spec, t.vocab_size, t.frame_dim);
            }
            let ds = load_dataset(&path)?;
            let matches = ds.language_id == spec.language_id
                && ds.vocab_size == t.vocab_size
                && ds.frame_dim == t.frame_dim
                && (ds.train.len(), ds.dev.len(), ds.test.len()) == (spec.n_train, spec.n_dev, spec.n_test);
            if !matches {
                return Err(Error::Validation(format!(
                    "{} does not match the config for language {}",
                    path.display(),
                    spec.language_id
                )));
            }
            Ok(ds)
        })
        .collect()
}

fn latest_checkpoint(output_dir: &Path) -> Option<(usize, PathBuf)> {
    let entries = std::fs::read_dir(output_dir.join("checkpoints")).ok()?;
    entries
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            let k = name.strip_prefix("stage_")?.strip_suffix(".json")?.parse().ok()?;
            Some((k, e.path()))
        })
        .max_by_key(|(k, _)| *k)
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Continue from the latest checkpoint in the run directory, if any.
    pub resume: bool,
    /// Resume even if the checkpoint was written for a different config.
    pub allow_config_mismatch: bool,
    /// Stop once this many stages are complete (checkpoints are still written).
    pub stop_after: Option<usize>,
}

/// Runs the configured sequence, writing checkpoints at every stage boundary and
/// the result files once every stage is done. Returns `None` when stopped early.
pub fn train(config: &ExperimentConfig, opts: &TrainOptions) -> Result<Option<ExperimentResult>> {
    let dir = &config.output_dir;
    std::fs::create_dir_all(dir)?;
    let hash = config.hash();
    write_atomic(&dir.join("config.toml"), config.to_toml().as_bytes())?;

    let tasks = load_or_generate(config)?;
    let mut state = SequenceState::initial(config);
    if opts.resume {
        if let Some((k, path)) = latest_checkpoint(dir) {
            log::info!("resuming after stage {k} from {}", path.display());
            state = load_for_resume(&path, &hash, opts.allow_config_mismatch)?.into_state(&config.topology)?;
        }
    }
    let (result, state) = run_sequence_with(config, &tasks, state, opts.stop_after, &mut |s| {
        save_checkpoint(&Checkpoint::from_state(s, &hash), &checkpoint_path(dir, s.next_stage))
    })?;
    if state.next_stage < tasks.len() {
        return Ok(None);
    }
    write_result_files(dir, &result)?;
    Ok(Some(result))
}

pub fn write_result_files(dir: &Path, result: &ExperimentResult) -> Result<()> {
    let json = serde_json::to_vec_pretty(result).expect("result serializes");
    write_atomic(&dir.join(RESULT_FILE), &json)?;
    write_atomic(&dir.join("curves.csv"), result.curve.to_csv()?.as_bytes())?;
    write_atomic(&dir.join("report.csv"), render_table(std::slice::from_ref(result))?.as_bytes())?;
    Ok(())
}

pub fn load_result(path: &Path) -> Result<ExperimentResult> {
    let bytes = std::fs::read(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Format {
        offset: crate::buffer::byte_offset(&bytes, e.line(), e.column()),
        message: format!("{}: {e}", path.display()),
    })
}

/// Finds every `result.json` under `input` (up to two levels deep), in path order.
pub fn collect_results(input: &Path) -> Result<Vec<ExperimentResult>> {
    let mut found = Vec::new();
    let mut stack = vec![(input.to_path_buf(), 0)];
    while let Some((dir, depth)) = stack.pop() {
        let candidate = dir.join(RESULT_FILE);
        if candidate.is_file() {
            found.push(candidate);
        }
        if depth < 2 {
            for entry in std::fs::read_dir(&dir)? {
                let path = entry?.path();
                if path.is_dir() {
                    stack.push((path, depth + 1));
                }
            }
        }
    }
    found.sort();
    if found.is_empty() {
        return Err(Error::Usage(format!("no {RESULT_FILE} under {}", input.display())));
    }
    found.iter().map(|p| load_result(p)).collect()
}

/// Renders the stage table across every run under `input` and writes it to `out`.
pub fn report(input: &Path, out: &Path) -> Result<String> {
    let results = collect_results(input)?;
    let csv = render_table(&results)?;
    write_atomic(out, csv.as_bytes())?;
    Ok(csv)
}
