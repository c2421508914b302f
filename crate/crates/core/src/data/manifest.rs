//! JSON-lines dataset manifests.
//!
//! Line 1 holds the header (`classes`, `seed`); every following line is one
//! image record. Image paths are relative to the manifest's directory.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{BBox, GroundTruth};
use crate::tensor::{Element, Tensor};

use super::pnm::Image;

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Annotation {
    pub class: String,
    /// `[x1, y1, x2, y2]` in pixels.
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
}

impl Annotation {
    pub fn bbox(&self) -> BBox {
        let [x1, y1, x2, y2] = self.bbox;
        BBox::new(x1, y1, x2, y2)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub image: String,
    pub width: usize,
    pub height: usize,
    pub split: Split,
    pub annotations: Vec<Annotation>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    classes: Vec<String>,
    seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub classes: Vec<String>,
    pub seed: u64,
    pub records: Vec<Record>,
}

impl Manifest {
    pub fn to_jsonl(&self) -> String {
        let header = Header {
            classes: self.classes.clone(),
            seed: self.seed,
        };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    /// Parses and checks every record; `path` only labels diagnostics.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (hl, first) = lines.next().ok_or_else(|| err(1, "missing header line".into()))?;
        let header: Header = serde_json::from_str(first).map_err(|e| err(hl + 1, e.to_string()))?;
        let mut records = Vec::new();
        let mut line_of = Vec::new();
        for (i, line) in lines {
            let r: Record = serde_json::from_str(line).map_err(|e| err(i + 1, e.to_string()))?;
            records.push(r);
            line_of.push(i + 1);
        }
        let m = Manifest {
            classes: header.classes,
            seed: header.seed,
            records,
        };
        for (r, &line) in m.records.iter().zip(&line_of) {
            m.check_record(r)
                .map_err(|msg| Error::Validation(format!("{}:{line}: {msg}", path.display())))?;
        }
        Ok(m)
    }

    fn check_record(&self, r: &Record) -> std::result::Result<(), String> {
        if r.width == 0 || r.height == 0 {
            return Err(format!("image {} has zero extent", r.image));
        }
        for (k, a) in r.annotations.iter().enumerate() {
            if !self.classes.contains(&a.class) {
                return Err(format!("annotation {k} has unknown class {:?}", a.class));
            }
            let b = a.bbox();
            if !b.is_valid() {
                return Err(format!("annotation {k} box {:?} has no area", a.bbox));
            }
            if b.x1 < 0.0 || b.y1 < 0.0 || b.x2 > r.width as f64 || b.y2 > r.height as f64 {
                return Err(format!(
                    "annotation {k} box {:?} leaves the {}x{} image",
                    a.bbox, r.width, r.height
                ));
            }
        }
        Ok(())
    }

    /// Loads a manifest file or a directory containing `manifest.jsonl`, and
    /// checks that every referenced image exists.
    pub fn load(path: &Path) -> Result<Self> {
        let file = manifest_path(path);
        let m = Self::parse(&fs::read_to_string(&file)?, &file)?;
        let root = file.parent().unwrap_or(Path::new("."));
        for r in &m.records {
            if !root.join(&r.image).is_file() {
                return Err(Error::Validation(format!(
                    "{}: image {} does not exist",
                    file.display(),
                    r.image
                )));
            }
        }
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(manifest_path(path), self.to_jsonl())?;
        Ok(())
    }

    pub fn class_id(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }

    pub fn count(&self, split: Split) -> usize {
        self.records.iter().filter(|r| r.split == split).count()
    }

    /// Fails unless the train share equals `round(train_frac * n)`.
    pub fn check_split(&self, train_frac: f64) -> Result<()> {
        let want = train_count(self.records.len(), train_frac);
        let got = self.count(Split::Train);
        if want != got {
            return Err(Error::Validation(format!(
                "manifest has {got} training images, train_frac {train_frac} expects {want}"
            )));
        }
        Ok(())
    }
}

pub fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

pub fn train_count(n: usize, train_frac: f64) -> usize {
    ((n as f64 * train_frac).round() as usize).min(n)
}

/// Seeded shuffle followed by a prefix cut; the first `round(frac * n)`
/// shuffled records become training images.
pub fn split(records: &mut [Record], train_frac: f64, seed: u64) {
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = train_count(records.len(), train_frac);
    for (rank, &i) in order.iter().enumerate() {
        records[i].split = if rank < cut { Split::Train } else { Split::Val };
    }
}

/// An image tensor `[1, 3, H, W]` with its boxes.
#[derive(Clone, Debug)]
pub struct Sample<T> {
    pub name: String,
    pub image: Tensor<T>,
    pub gts: Vec<GroundTruth>,
}

/// Reads the images of one split; `root` is the manifest's directory.
pub fn load_samples<T: Element>(m: &Manifest, root: &Path, split: Split) -> Result<Vec<Sample<T>>> {
    m.records
        .iter()
        .filter(|r| r.split == split)
        .map(|r| {
            let img = Image::read(&root.join(&r.image))?;
            if (img.width, img.height) != (r.width, r.height) {
                return Err(Error::Validation(format!(
                    "{} is {}x{}, the manifest says {}x{}",
                    r.image, img.width, img.height, r.width, r.height
                )));
            }
            let gts = r
                .annotations
                .iter()
                .map(|a| GroundTruth {
                    bbox: a.bbox(),
                    class_id: m.class_id(&a.class).expect("validated class"),
                })
                .collect();
            Ok(Sample {
                name: r.image.clone(),
                image: img.to_tensor(),
                gts,
            })
        })
        .collect()
}
