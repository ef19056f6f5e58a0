use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::{HarnessError, Result, TOOL, VERSION};

/// Written at the top of every output file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
}

impl Provenance {
    pub fn new(config_hash: String, seed: u64) -> Self {
        Self {
            tool: TOOL.into(),
            version: VERSION.into(),
            config_hash,
            seed,
        }
    }

    /// `#`-prefixed lines preceding the CSV column header.
    pub fn csv_block(&self) -> String {
        format!(
            "# {} {}\n# config-hash {}\n# seed {}\n",
            self.tool, self.version, self.config_hash, self.seed
        )
    }
}

/// Full double precision, stable across runs.
pub fn num(v: f64) -> String {
    format!("{v:.16e}")
}

/// Output directory of one command.
#[derive(Debug, Clone)]
pub struct OutputDir {
    root: PathBuf,
    provenance: Provenance,
}

#[derive(Serialize)]
struct Stamped<'a, T: Serialize> {
    provenance: &'a Provenance,
    #[serde(flatten)]
    body: &'a T,
}

impl OutputDir {
    pub fn create(root: &Path, provenance: Provenance) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| HarnessError::io(root, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            provenance,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn path(&self, name: &str) -> PathBuf {
        crate::out_path(&self.root, name)
    }

    /// Writes the provenance block, `header`, then one line per row.
    pub fn write_csv<I, S>(&self, name: &str, header: &str, rows: I) -> Result<PathBuf>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut text = self.provenance.csv_block();
        text.push_str(header);
        text.push('\n');
        for r in rows {
            text.push_str(r.as_ref());
            text.push('\n');
        }
        self.write_bytes(name, text.as_bytes())
    }

    /// Like [`write_csv`](Self::write_csv) for writers producing their own header line.
    pub fn write_csv_with(&self, name: &str, body: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Result<PathBuf> {
        let mut buf = self.provenance.csv_block().into_bytes();
        body(&mut buf).map_err(|e| HarnessError::io(&self.path(name), e))?;
        self.write_bytes(name, &buf)
    }

    /// JSON object with a `provenance` field followed by the fields of `body`.
    pub fn write_json<T: Serialize>(&self, name: &str, body: &T) -> Result<PathBuf> {
        let stamped = Stamped {
            provenance: &self.provenance,
            body,
        };
        let mut text = serde_json::to_string_pretty(&stamped)?;
        text.push('\n');
        self.write_bytes(name, text.as_bytes())
    }

    pub fn write_bytes(&self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.path(name);
        let mut f = fs::File::create(&path).map_err(|e| HarnessError::io(&path, e))?;
        f.write_all(bytes).map_err(|e| HarnessError::io(&path, e))?;
        Ok(path)
    }
}

/// Strips `#` lines so that files from different runs can be compared on data alone.
pub fn data_rows(csv: &str) -> Vec<&str> {
    csv.lines().filter(|l| !l.starts_with('#')).collect()
}
