use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use super::read_features;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Eval => "eval",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Path relative to the manifest's directory.
    pub path: String,
    pub split: Split,
    pub frames: usize,
}

/// Line-oriented list of feature files: `<relative-path>\t<train|eval>\t<frames>`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_NAME: &str = "manifest.tsv";

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |msg: &str| Error::format(path, format!("line {}: {msg}", n + 1));
            let mut cols = line.split('\t');
            let (Some(p), Some(s), Some(f), None) = (cols.next(), cols.next(), cols.next(), cols.next())
            else {
                return Err(bad("expected 3 tab-separated columns"));
            };
            let split = match s {
                "train" => Split::Train,
                "eval" => Split::Eval,
                _ => return Err(bad("split must be train or eval")),
            };
            let frames = f.parse().map_err(|_| bad("frame count is not an integer"))?;
            entries.push(ManifestEntry {
                path: p.to_string(),
                split,
                frames,
            });
        }
        Ok(Self {
            root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
            entries,
        })
    }

    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|e| format!("{}\t{}\t{}\n", e.path, e.split, e.frames))
            .collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.path)
    }

    /// Reads every sequence of a split, checking frame counts against the manifest.
    pub fn load(&self, split: Split) -> Result<Vec<Tensor>> {
        self.split(split)
            .map(|e| {
                let path = self.resolve(e);
                let t = read_features(&path)?;
                if t.rows() != e.frames {
                    return Err(Error::format(
                        &path,
                        format!("manifest says {} frames, file has {}", e.frames, t.rows()),
                    ));
                }
                Ok(t)
            })
            .collect()
    }
}
