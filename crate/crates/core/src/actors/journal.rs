use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::simnet::codec::{Canonical, DecodeError};

#[derive(Debug, Error)]
pub enum JournalError {
    #[error("journal io: {0}")]
    Io(#[from] std::io::Error),
    #[error("journal {path} line {line}: {reason}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        reason: String,
    },
}

/// Append-only log of canonical entries, one hex line each, flushed per append.
#[derive(Debug)]
pub struct Journal {
    path: PathBuf,
    file: File,
}

impl Journal {
    pub fn open(path: &Path) -> Result<Self, JournalError> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append<T: Canonical>(&mut self, entry: &T) -> Result<(), JournalError> {
        writeln!(self.file, "{}", hex::encode(entry.to_bytes()))?;
        self.file.sync_data()?;
        Ok(())
    }

    /// Reads every entry. A missing file is an empty journal.
    pub fn replay<T: Canonical>(path: &Path) -> Result<Vec<T>, JournalError> {
        let file = match File::open(path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(e.into()),
        };
        let corrupt = |line: usize, reason: String| JournalError::Corrupt {
            path: path.to_path_buf(),
            line,
            reason,
        };
        let mut out = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let bytes = hex::decode(line.trim()).map_err(|e| corrupt(i + 1, e.to_string()))?;
            let entry =
                T::from_bytes(&bytes).map_err(|e: DecodeError| corrupt(i + 1, e.to_string()))?;
            out.push(entry);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn append_then_replay() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("j");
        let mut j = Journal::open(&path).unwrap();
        j.append(&7u32).unwrap();
        j.append(&9u32).unwrap();
        assert_eq!(Journal::replay::<u32>(&path).unwrap(), vec![7, 9]);
    }

    #[test]
    fn missing_file_is_empty() {
        let dir = tempfile::tempdir().unwrap();
        assert!(Journal::replay::<u32>(&dir.path().join("none")).unwrap().is_empty());
    }

    #[test]
    fn corrupt_line_is_reported_with_its_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("j");
        std::fs::write(&path, "00000001\nzz\n").unwrap();
        match Journal::replay::<u32>(&path) {
            Err(JournalError::Corrupt { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }
}
