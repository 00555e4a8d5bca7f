//! File helpers: JSON Lines datasets and output-directory handling.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads one record per non-empty line; errors carry the 0-based line index.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (k, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::from(e).in_record(k))?);
    }
    Ok(out)
}

/// Creates `dir`, refusing to reuse a non-empty directory unless `force`.
pub fn prepare_output_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let occupied = fs::read_dir(dir)?.next().is_some();
        if occupied && !force {
            return Err(Error::OutputExists(dir.to_path_buf()));
        }
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::generate_dataset;
    use crate::task::{Example, TaskMix};

    #[test]
    fn examples_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let data = generate_dataset(3, 5, &TaskMix::default());
        write_jsonl(&path, &data).unwrap();
        let back: Vec<Example> = read_jsonl(&path).unwrap();
        assert_eq!(back, data);
    }

    #[test]
    fn bad_line_is_reported_with_its_index() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let data = generate_dataset(3, 1, &TaskMix::default());
        write_jsonl(&path, &data).unwrap();
        let mut text = fs::read_to_string(&path).unwrap();
        text.push_str("{not json}\n");
        fs::write(&path, text).unwrap();
        let err = read_jsonl::<Example>(&path).unwrap_err();
        assert!(matches!(err, Error::Record { index: 1, .. }));
    }

    #[test]
    fn output_dir_requires_force_when_occupied() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        prepare_output_dir(&out, false).unwrap();
        prepare_output_dir(&out, false).unwrap();
        fs::write(out.join("x"), "1").unwrap();
        assert!(matches!(prepare_output_dir(&out, false), Err(Error::OutputExists(_))));
        prepare_output_dir(&out, true).unwrap();
    }
}
