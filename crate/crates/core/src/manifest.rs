//! Line-oriented dataset manifests.
//!
//! One record per line, tab-separated:
//!
//! ```text
//! <relative path>  <split: sharp|blurred>  <seed: decimal or ->  <kernel: hex checksum, -, or skipped>
//! ```
//!
//! Lines starting with `#` and blank lines are ignored. Paths are relative to
//! the directory holding the manifest file.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Sharp,
    Blurred,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Sharp => "sharp",
            Split::Blurred => "blurred",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sharp" => Ok(Split::Sharp),
            "blurred" => Ok(Split::Blurred),
            other => Err(Error::Data(format!("unknown split tag `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum KernelEntry {
    /// No kernel applies (sharp images).
    None,
    Checksum(String),
    /// The source image could not be read; no output was written.
    Skipped,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRecord {
    pub path: String,
    pub split: Split,
    pub seed: Option<u64>,
    pub kernel: KernelEntry,
}

impl ManifestRecord {
    pub fn sharp(path: impl Into<String>) -> Self {
        ManifestRecord {
            path: path.into(),
            split: Split::Sharp,
            seed: None,
            kernel: KernelEntry::None,
        }
    }

    pub fn is_skipped(&self) -> bool {
        self.kernel == KernelEntry::Skipped
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Records whose images are available for use.
    pub fn usable(&self) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(|r| !r.is_skipped())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut records = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(Error::Data(format!(
                    "manifest line {}: expected 4 tab-separated fields, got {}",
                    lineno + 1,
                    fields.len()
                )));
            }
            let seed = match fields[2] {
                "-" => None,
                s => Some(s.parse::<u64>().map_err(|_| {
                    Error::Data(format!("manifest line {}: bad seed `{s}`", lineno + 1))
                })?),
            };
            let kernel = match fields[3] {
                "-" => KernelEntry::None,
                "skipped" => KernelEntry::Skipped,
                h if !h.is_empty() && h.bytes().all(|b| b.is_ascii_hexdigit()) => {
                    KernelEntry::Checksum(h.to_string())
                }
                other => {
                    return Err(Error::Data(format!(
                        "manifest line {}: bad kernel field `{other}`",
                        lineno + 1
                    )))
                }
            };
            records.push(ManifestRecord {
                path: fields[0].to_string(),
                split: fields[1].parse()?,
                seed,
                kernel,
            });
        }
        Ok(Manifest { records })
    }

    pub fn render(&self) -> String {
        let mut out = String::from("# path\tsplit\tseed\tkernel\n");
        for r in &self.records {
            let seed = r.seed.map_or_else(|| "-".to_string(), |s| s.to_string());
            let kernel = match &r.kernel {
                KernelEntry::None => "-",
                KernelEntry::Checksum(h) => h.as_str(),
                KernelEntry::Skipped => "skipped",
            };
            out.push_str(&format!("{}\t{}\t{}\t{}\n", r.path, r.split, seed, kernel));
        }
        out
    }

    /// Reads a manifest; returns it with the directory its paths are relative to.
    pub fn read(path: &Path) -> Result<(Self, PathBuf)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        Ok((Manifest::parse(&text)?, base))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        std::fs::write(path, self.render()).map_err(|e| Error::io(path, e))
    }

    /// Lists the PNG/JPEG files of a directory (sorted by name) as a sharp
    /// manifest.
    pub fn scan_dir(dir: &Path) -> Result<Self> {
        let mut names: Vec<String> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_file())
            .filter_map(|e| e.file_name().into_string().ok())
            .filter(|n| is_image_name(n))
            .collect();
        names.sort();
        Ok(Manifest {
            records: names.into_iter().map(ManifestRecord::sharp).collect(),
        })
    }
}

pub fn is_image_name(name: &str) -> bool {
    let lower = name.to_ascii_lowercase();
    [".png", ".jpg", ".jpeg"].iter().any(|ext| lower.ends_with(ext))
}
