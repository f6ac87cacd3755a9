//! Line-delimited dataset files.
//!
//! A dataset directory holds `manifest.json`, one `<task>.<split>.jsonl` per
//! task and split (records `{sample_id, task, prompt, answer, dish_id}` with
//! token ids), and `pool.jsonl` (records `{dish_id, image}`, no answers).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::dataset::{DatasetParams, PoolImage, Sample, TaskData, TaskKind, TaskStream};
use super::vocab::Tokenizer;
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub params: DatasetParams,
    pub vocab_size: usize,
    pub vocab_hash: String,
    pub tasks: Vec<TaskKind>,
    pub templates: Vec<Vec<String>>,
    /// Hash of the experiment configuration that produced the files, if any.
    #[serde(default)]
    pub config_hash: Option<String>,
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    if !path.exists() {
        return Err(Error::StreamIncomplete(path.to_path_buf()));
    }
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

fn split_path(dir: &Path, task: TaskKind, split: &str) -> std::path::PathBuf {
    dir.join(format!("{}.{split}.jsonl", task.name()))
}

pub fn save_stream(stream: &TaskStream, dir: &Path, tok: &Tokenizer, config_hash: Option<&str>) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for t in &stream.tasks {
        write_jsonl(&split_path(dir, t.task, "train"), &t.train)?;
        write_jsonl(&split_path(dir, t.task, "test"), &t.test)?;
    }
    write_jsonl(&dir.join("pool.jsonl"), &stream.pool)?;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        params: stream.params,
        vocab_size: tok.vocab_size(),
        vocab_hash: tok.vocab_hash(),
        tasks: stream.tasks.iter().map(|t| t.task).collect(),
        templates: stream
            .tasks
            .iter()
            .map(|t| t.task.templates().iter().map(|s| s.to_string()).collect())
            .collect(),
        config_hash: config_hash.map(str::to_string),
    };
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    if !path.exists() {
        return Err(Error::StreamIncomplete(path));
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn load_stream(dir: &Path, tok: &Tokenizer) -> Result<TaskStream> {
    let manifest = load_manifest(dir)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Data(format!("unsupported dataset format {}", manifest.format_version)));
    }
    if manifest.vocab_hash != tok.vocab_hash() {
        return Err(Error::Data("dataset was written with a different vocabulary".into()));
    }
    let mut tasks = Vec::new();
    for &task in &manifest.tasks {
        let train: Vec<Sample> = read_jsonl(&split_path(dir, task, "train"))?;
        let test: Vec<Sample> = read_jsonl(&split_path(dir, task, "test"))?;
        tasks.push(TaskData { task, train, test });
    }
    let pool: Vec<PoolImage> = read_jsonl(&dir.join("pool.jsonl"))?;
    let stream = TaskStream { params: manifest.params, tasks, pool };
    stream.validate(tok)?;
    Ok(stream)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::foodstream::dataset::generate_dataset;

    fn stream(tok: &Tokenizer) -> TaskStream {
        generate_dataset(DatasetParams { num_dishes: 50, noise_level: 0.1, seed: 9 }, tok).unwrap().1
    }

    #[test]
    fn save_then_load_is_identity() {
        let tok = Tokenizer::new();
        let s = stream(&tok);
        let dir = tempfile::tempdir().unwrap();
        save_stream(&s, dir.path(), &tok, Some("abc")).unwrap();
        assert_eq!(load_stream(dir.path(), &tok).unwrap(), s);
        assert_eq!(load_manifest(dir.path()).unwrap().config_hash.as_deref(), Some("abc"));
    }

    #[test]
    fn files_are_byte_identical_across_saves() {
        let tok = Tokenizer::new();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        save_stream(&stream(&tok), a.path(), &tok, None).unwrap();
        save_stream(&stream(&tok), b.path(), &tok, None).unwrap();
        for name in ["manifest.json", "ingredient.train.jsonl", "recipe.test.jsonl", "pool.jsonl"] {
            assert_eq!(std::fs::read(a.path().join(name)).unwrap(), std::fs::read(b.path().join(name)).unwrap());
        }
    }

    #[test]
    fn corrupted_line_is_named() {
        let tok = Tokenizer::new();
        let dir = tempfile::tempdir().unwrap();
        save_stream(&stream(&tok), dir.path(), &tok, None).unwrap();
        let path = dir.path().join("recipe.train.jsonl");
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        lines[2] = "{\"sample_id\": oops";
        std::fs::write(&path, lines.join("\n")).unwrap();
        match load_stream(dir.path(), &tok).unwrap_err() {
            Error::Parse { line, path: p, .. } => {
                assert_eq!(line, 3);
                assert!(p.ends_with("recipe.train.jsonl"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_task_file_is_incomplete() {
        let tok = Tokenizer::new();
        let dir = tempfile::tempdir().unwrap();
        save_stream(&stream(&tok), dir.path(), &tok, None).unwrap();
        std::fs::remove_file(dir.path().join("nutrition.test.jsonl")).unwrap();
        assert!(matches!(load_stream(dir.path(), &tok), Err(Error::StreamIncomplete(_))));
    }

    #[test]
    fn overlapping_splits_are_rejected() {
        let tok = Tokenizer::new();
        let mut s = stream(&tok);
        let leaked = s.tasks[0].train[0].clone();
        s.tasks[0].test.push(leaked);
        assert!(s.validate(&tok).is_err());
    }
}
