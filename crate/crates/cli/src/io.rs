use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};
use survcut::survival::Observation;

use crate::error::CliError;

/// Reads a dataset CSV with header `id,x1,...,xp,a,time,status`. Schema
/// problems are reported with their line number.
pub fn read_dataset(path: &Path) -> Result<Vec<Observation>, CliError> {
    let bad = |line: u64, msg: String| CliError::Config(format!("{} line {line}: {msg}", path.display()));
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::Config(format!("cannot read dataset {}: {e}", path.display())))?;
    let header: Vec<String> = rdr.headers().map_err(|e| bad(1, e.to_string()))?.iter().map(str::to_string).collect();
    let p = header.len().saturating_sub(4);
    let mut expected = vec!["id".to_string()];
    expected.extend((1..=p).map(|j| format!("x{j}")));
    expected.extend(["a", "time", "status"].map(String::from));
    if header.len() < 5 || header != expected {
        return Err(bad(1, format!("header must be `{}`, found `{}`", expected.join(","), header.join(","))));
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| bad(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        let field = |i: usize| -> Result<f64, CliError> {
            rec[i].parse::<f64>().map_err(|_| bad(line, format!("column `{}` is not a number: `{}`", header[i], &rec[i])))
        };
        let id = rec[0].parse::<u64>().map_err(|_| bad(line, format!("id `{}` is not a nonnegative integer", &rec[0])))?;
        let x = (1..=p).map(field).collect::<Result<Vec<_>, _>>()?;
        let a = match &rec[p + 1] {
            "0" => 0,
            "1" => 1,
            v => return Err(bad(line, format!("arm must be 0 or 1, found `{v}`"))),
        };
        let time = field(p + 2)?;
        let status = rec[p + 3].parse::<u8>().map_err(|_| bad(line, format!("status `{}` is not a cause index", &rec[p + 3])))?;
        let obs = Observation::new(id, x, a, time, status).map_err(|e| bad(line, e.to_string()))?;
        out.push(obs);
    }
    if out.is_empty() {
        return Err(bad(2, "dataset has no rows".into()));
    }
    let mut ids: Vec<u64> = out.iter().map(|o| o.id).collect();
    ids.sort_unstable();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        return Err(CliError::Config(format!("{}: duplicate id {}", path.display(), w[0])));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FileRecord {
    pub name: String,
    pub sha256: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Output directory that remembers what was written, for the manifest.
pub struct OutDir {
    root: PathBuf,
    pub files: Vec<FileRecord>,
}

impl OutDir {
    pub fn create(root: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
        Ok(Self { root: root.to_path_buf(), files: Vec::new() })
    }

    pub fn path(&self) -> &Path {
        &self.root
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.root.join(name);
        fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
        self.files.push(FileRecord { name: name.to_string(), sha256: sha256_hex(bytes) });
        Ok(())
    }

    /// Writes `manifest.json` listing every file written so far.
    pub fn finish<M: Serialize>(self, manifest: &M) -> Result<(), CliError> {
        let mut value = serde_json::to_value(manifest).map_err(|e| CliError::Runtime(e.to_string()))?;
        value["files"] = serde_json::to_value(&self.files).map_err(|e| CliError::Runtime(e.to_string()))?;
        let mut text = serde_json::to_string_pretty(&value).map_err(|e| CliError::Runtime(e.to_string()))?;
        text.push('\n');
        let path = self.root.join("manifest.json");
        fs::write(&path, text).map_err(|e| CliError::io(&path, e))
    }
}

/// Serializes rows of a header-first CSV.
pub fn csv_bytes<R: Serialize>(rows: &[R]) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    w.into_inner().map_err(|e| CliError::Runtime(e.to_string()))
}
