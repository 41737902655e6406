//! File helpers shared by the persistence code.

use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

/// Open a temp file next to `path`, let `write` fill it, then rename it over
/// `path`. Readers never observe a half-written file.
pub fn write_atomic<F>(path: &Path, write: F) -> io::Result<()>
where
    F: FnOnce(&mut dyn Write) -> io::Result<()>,
{
    let dir = parent_dir(path);
    let tmp = tempfile::NamedTempFile::new_in(&dir)?;
    {
        let mut out = BufWriter::new(tmp.as_file());
        write(&mut out)?;
        out.flush()?;
    }
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

/// Fails early if nothing can be created next to `path`.
pub fn check_writable(path: &Path) -> io::Result<()> {
    let dir = parent_dir(path);
    if !dir.is_dir() {
        return Err(io::Error::new(
            io::ErrorKind::NotFound,
            format!("output directory {} does not exist", dir.display()),
        ));
    }
    if path.is_dir() {
        return Err(io::Error::new(
            io::ErrorKind::InvalidInput,
            format!("{} is a directory", path.display()),
        ));
    }
    tempfile::NamedTempFile::new_in(&dir).map(drop)
}

/// Serialize `rows` as strict JSONL (one compact object per `\n`-terminated line).
pub fn write_jsonl<T: Serialize>(out: &mut dyn Write, rows: &[T]) -> io::Result<()> {
    for row in rows {
        serde_json::to_writer(&mut *out, row)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn write_jsonl_file<T: Serialize>(path: &Path, rows: &[T]) -> io::Result<()> {
    write_atomic(path, |out| write_jsonl(out, rows))
}

/// Converts serde_json's (line, column) into a byte offset within `input`.
pub(crate) fn byte_offset(input: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let line_start: usize = input
        .split_inclusive('\n')
        .take(line - 1)
        .map(str::len)
        .sum();
    (line_start + column.saturating_sub(1)).min(input.len())
}
