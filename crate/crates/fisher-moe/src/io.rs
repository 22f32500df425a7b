//! Deterministic file output: atomic writes, directory locks, and a small
//! strict CSV dialect.
//!
//! Every artifact is written to a temporary file in the destination
//! directory and renamed into place, so readers never observe partial
//! content and interrupted runs never corrupt earlier results. A lock file
//! gives each output directory a single owning process. CSV files are plain
//! comma-separated UTF-8 with a header row, decimal-point floats in Rust's
//! shortest round-trip formatting, and no quoting — fields must not contain
//! commas or newlines, which all schema columns here satisfy.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::{Error, Result};

/// Writes `content` atomically: temp file in the same directory, fsync,
/// rename over the destination.
pub fn write_atomic(path: &Path, content: &str) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(content.as_bytes())?;
    tmp.flush()?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// Exclusive ownership of an output directory, backed by a lock file that
/// is removed when the guard drops.
#[derive(Debug)]
pub struct DirLock {
    lock_path: PathBuf,
}

impl DirLock {
    /// Claims `dir`, creating it if needed. Fails if another process (or a
    /// crashed run) holds the lock file.
    pub fn acquire(dir: &Path) -> Result<DirLock> {
        fs::create_dir_all(dir)?;
        let lock_path = dir.join(".lock");
        match fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&lock_path)
        {
            Ok(mut f) => {
                // the owning pid, for the error message a contender sees
                let _ = writeln!(f, "{}", std::process::id());
                Ok(DirLock { lock_path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(Error::OutputLocked(format!(
                    "output directory {} is locked by another process \
                     (remove {} if that process is gone)",
                    dir.display(),
                    lock_path.display()
                )))
            }
            Err(e) => Err(Error::Io(e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock_path);
    }
}

/// Formats a float cell: Rust's shortest round-trip decimal form.
/// Non-finite values are a schema violation, surfaced to the caller.
pub fn float_cell(v: f64) -> Result<String> {
    if !v.is_finite() {
        return Err(Error::invalid(format!(
            "refusing to write non-finite value {v} into a CSV cell"
        )));
    }
    Ok(format!("{v}"))
}

fn check_field(field: &str) -> Result<()> {
    if field.contains(',') || field.contains('\n') || field.contains('\r') {
        return Err(Error::invalid(format!(
            "CSV field {field:?} contains a separator character"
        )));
    }
    Ok(())
}

/// Renders rows under a fixed header into CSV text, enforcing rectangular
/// shape and separator-free fields.
pub fn render_csv(header: &[&str], rows: &[Vec<String>]) -> Result<String> {
    for h in header {
        check_field(h)?;
    }
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    for (i, row) in rows.iter().enumerate() {
        if row.len() != header.len() {
            return Err(Error::invalid(format!(
                "CSV row {i} has {} fields, header has {}",
                row.len(),
                header.len()
            )));
        }
        for field in row {
            check_field(field)?;
        }
        out.push_str(&row.join(","));
        out.push('\n');
    }
    Ok(out)
}

/// Writes a CSV file atomically.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    write_atomic(path, &render_csv(header, rows)?)
}

/// Strict CSV reader: returns (header, rows), rejecting ragged rows and
/// empty input. Line numbers in errors are 1-based.
pub fn read_csv_strict(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let text = fs::read_to_string(path)?;
    parse_csv_strict(&text)
        .map_err(|e| Error::invalid(format!("{}: {e}", path.display())))
}

/// Strict parse of CSV text (header required, rectangular rows).
pub fn parse_csv_strict(text: &str) -> std::result::Result<(Vec<String>, Vec<Vec<String>>), String> {
    let mut lines = text.lines();
    let header: Vec<String> = match lines.next() {
        Some(h) if !h.is_empty() => h.split(',').map(str::to_string).collect(),
        _ => return Err("line 1: missing header row".to_string()),
    };
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue; // tolerate exactly one trailing newline
        }
        let fields: Vec<String> = line.split(',').map(str::to_string).collect();
        if fields.len() != header.len() {
            return Err(format!(
                "line {}: {} fields, expected {}",
                i + 2,
                fields.len(),
                header.len()
            ));
        }
        rows.push(fields);
    }
    Ok((header, rows))
}
