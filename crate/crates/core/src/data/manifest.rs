//! JSON-lines dataset manifest and image-folder ingestion.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::image::Image;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    /// Relative to the manifest's directory unless absolute.
    pub path: PathBuf,
    pub identity_id: usize,
    pub camera_id: usize,
    pub split: Split,
    #[serde(default)]
    pub occluded: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub records: Vec<Record>,
    /// Directory relative paths resolve against.
    pub root: PathBuf,
}

impl Manifest {
    pub fn resolve(&self, record: &Record) -> PathBuf {
        if record.path.is_absolute() {
            record.path.clone()
        } else {
            self.root.join(&record.path)
        }
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// Number of training identities (ids are dense, so this is max + 1).
    pub fn num_train_identities(&self) -> usize {
        self.split(Split::Train)
            .map(|r| r.identity_id + 1)
            .max()
            .unwrap_or(0)
    }

    pub fn num_cameras(&self) -> usize {
        self.records
            .iter()
            .map(|r| r.camera_id + 1)
            .max()
            .unwrap_or(0)
    }

    /// Checks dense training ids, query/gallery coverage and, optionally, that paths exist.
    pub fn validate(&self, check_paths: bool) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (i, r) in self.records.iter().enumerate() {
            if !seen.insert(&r.path) {
                return Err(Error::Validation(format!(
                    "record {}: duplicate path {}",
                    i + 1,
                    r.path.display()
                )));
            }
            if check_paths && !self.resolve(r).is_file() {
                return Err(Error::Validation(format!(
                    "record {}: path {} does not exist",
                    i + 1,
                    self.resolve(r).display()
                )));
            }
        }
        let train: BTreeSet<usize> = self.split(Split::Train).map(|r| r.identity_id).collect();
        if let Some(missing) = (0..train.len()).find(|k| !train.contains(k)) {
            return Err(Error::Validation(format!(
                "training identity ids are not dense: {missing} is missing below {}",
                train.iter().max().copied().unwrap_or(0)
            )));
        }
        let gallery: BTreeSet<usize> = self.split(Split::Gallery).map(|r| r.identity_id).collect();
        for (i, r) in self.records.iter().enumerate() {
            if r.split == Split::Query && !gallery.contains(&r.identity_id) {
                return Err(Error::Validation(format!(
                    "record {}: query identity {} never appears in the gallery",
                    i + 1,
                    r.identity_id
                )));
            }
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r).expect("record serializes"));
            s.push('\n');
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl().as_bytes())
            .map_err(|e| Error::io(path, e))
    }

    /// Parses and validates a manifest, including path existence.
    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let r: Record = serde_json::from_str(&line).map_err(|e| {
                Error::Validation(format!("{} line {}: {e}", path.display(), i + 1))
            })?;
            records.push(r);
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let m = Manifest { records, root };
        m.validate(true)?;
        Ok(m)
    }
}

/// An image held in memory with its labels.
#[derive(Clone, Debug)]
pub struct Sample {
    pub image: Image,
    pub identity: usize,
    pub camera: usize,
    pub occluded: bool,
}

pub fn load_split(
    manifest: &Manifest,
    split: Split,
    height: usize,
    width: usize,
) -> Result<Vec<Sample>> {
    manifest
        .split(split)
        .map(|r| {
            Ok(Sample {
                image: Image::load(&manifest.resolve(r), height, width)?,
                identity: r.identity_id,
                camera: r.camera_id,
                occluded: r.occluded,
            })
        })
        .collect()
}

/// Parses `<pid>_c<cam>...` file names (1-based camera).
fn parse_name(name: &str) -> Option<(i64, usize)> {
    let (pid, rest) = name.split_once('_')?;
    let pid: i64 = pid.parse().ok()?;
    let cam: String = rest
        .strip_prefix('c')?
        .chars()
        .take_while(char::is_ascii_digit)
        .collect();
    let cam: usize = cam.parse().ok()?;
    (cam >= 1).then_some((pid, cam - 1))
}

const FOLDERS: [(Split, &[&str]); 3] = [
    (Split::Train, &["train", "bounding_box_train"]),
    (Split::Query, &["query"]),
    (Split::Gallery, &["gallery", "bounding_box_test"]),
];

/// Builds a manifest from a directory of `train|query|gallery` folders of
/// `<pid>_c<cam>*.{png,jpg}` images. Training ids are remapped densely;
/// test ids follow after them. Negative ids (distractors) are skipped.
pub fn ingest_folder(root: &Path) -> Result<Manifest> {
    let mut found: Vec<(Split, PathBuf, i64, usize)> = Vec::new();
    for (split, names) in FOLDERS {
        let Some(dir) = names.iter().map(|n| root.join(n)).find(|d| d.is_dir()) else {
            return Err(Error::Validation(format!(
                "{} has no {} folder",
                root.display(),
                names.join(" / ")
            )));
        };
        let mut entries: Vec<PathBuf> = std::fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                matches!(
                    p.extension().and_then(|e| e.to_str()),
                    Some("png" | "jpg" | "jpeg")
                )
            })
            .collect();
        entries.sort();
        for p in entries {
            let name = p
                .file_name()
                .and_then(|n| n.to_str())
                .unwrap_or_default()
                .to_string();
            let (pid, cam) = parse_name(&name).ok_or_else(|| {
                Error::Validation(format!("cannot parse identity/camera from {}", p.display()))
            })?;
            if pid >= 0 {
                found.push((split, p, pid, cam));
            }
        }
    }
    let mut ids: BTreeMap<(bool, i64), usize> = BTreeMap::new();
    for (split, _, pid, _) in &found {
        ids.entry((*split != Split::Train, *pid)).or_insert(0);
    }
    for (n, v) in ids.values_mut().enumerate() {
        *v = n;
    }
    let records = found
        .into_iter()
        .map(|(split, p, pid, cam)| Record {
            path: p.strip_prefix(root).map(Path::to_path_buf).unwrap_or(p),
            identity_id: ids[&(split != Split::Train, pid)],
            camera_id: cam,
            split,
            occluded: false,
        })
        .collect();
    let m = Manifest {
        records,
        root: root.to_path_buf(),
    };
    m.validate(true)?;
    Ok(m)
}
