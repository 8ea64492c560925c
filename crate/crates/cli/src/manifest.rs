//! Manifest files: one sequence path per line, optionally preceded by a
//! domain tag (`domain path`). Blank lines and `#` comments are ignored;
//! relative paths resolve against the manifest's directory.

use std::fs;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub domain: Option<String>,
    pub path: PathBuf,
}

pub fn parse(text: &str, base: &Path) -> Result<Vec<Entry>, String> {
    let mut out = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let (domain, path) = match fields.as_slice() {
            [p] => (None, *p),
            [d, p] => (Some(d.to_string()), *p),
            _ => return Err(format!("manifest line {}: expected `[domain] path`", no + 1)),
        };
        let path = Path::new(path);
        let path = if path.is_absolute() { path.to_path_buf() } else { base.join(path) };
        out.push(Entry { domain, path });
    }
    Ok(out)
}

pub fn load(path: &Path, domain: Option<&str>) -> Result<Vec<Entry>, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("cannot read manifest {}: {e}", path.display()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let entries = parse(&text, base)?;
    Ok(match domain {
        Some(d) => entries.into_iter().filter(|e| e.domain.as_deref() == Some(d)).collect(),
        None => entries,
    })
}
