//! Newline-delimited JSON helpers. One object per line, UTF-8, no BOM.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

use crate::model::{InstructionSample, ModelError};

#[derive(Debug, Error)]
pub enum JsonlError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
}

impl JsonlError {
    fn io(path: &Path, source: io::Error) -> Self {
        JsonlError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

fn for_each_line(
    path: &Path,
    mut f: impl FnMut(usize, &str) -> Result<(), String>,
) -> Result<(), JsonlError> {
    let file = File::open(path).map_err(|e| JsonlError::io(path, e))?;
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| JsonlError::io(path, e))?;
        let line = line.trim_start_matches('\u{feff}');
        if line.trim().is_empty() {
            continue;
        }
        f(n + 1, line).map_err(|message| JsonlError::Parse {
            path: path.display().to_string(),
            line: n + 1,
            message,
        })?;
    }
    Ok(())
}

pub fn read<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, JsonlError> {
    let mut out = Vec::new();
    for_each_line(path, |_, line| {
        out.push(serde_json::from_str(line).map_err(|e| e.to_string())?);
        Ok(())
    })?;
    Ok(out)
}

pub fn read_samples(path: &Path) -> Result<Vec<InstructionSample>, JsonlError> {
    let mut out = Vec::new();
    for_each_line(path, |_, line| {
        out.push(InstructionSample::from_json_str(line).map_err(|e: ModelError| e.to_string())?);
        Ok(())
    })?;
    Ok(out)
}

pub fn write<T: Serialize>(path: &Path, items: &[T]) -> Result<(), JsonlError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| JsonlError::io(path, e))?;
    }
    let file = File::create(path).map_err(|e| JsonlError::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_to(&mut w, items).map_err(|e| JsonlError::io(path, e))?;
    w.flush().map_err(|e| JsonlError::io(path, e))
}

pub fn write_to<T: Serialize, W: Write>(w: &mut W, items: &[T]) -> io::Result<()> {
    for item in items {
        serde_json::to_writer(&mut *w, item)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
