//! Labeled image sets on disk and retrieval evaluation.
//!
//! A dataset directory holds `manifest.tsv` (one line per image:
//! `image_id, identity_id, domain, split, relative_path`, tab-separated)
//! and one raw file per image containing the R, G and B planes as 8-bit
//! values.

mod eval;
mod synth;

pub use eval::{average_precision, evaluate_retrieval, RetrievalMetrics, CMC_RANKS};
pub use synth::{generate_dataset, DomainTransform, SyntheticDomainSpec};

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use awb_tensor::Tensor;

use crate::error::{AwbError, Result};

pub const MANIFEST_FILE: &str = "manifest.tsv";

/// Pixel normalization applied when images become network input.
pub const PIXEL_MEAN: f32 = 0.5;
pub const PIXEL_STD: f32 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        })
    }
}

impl FromStr for Split {
    type Err = AwbError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "query" => Ok(Split::Query),
            "gallery" => Ok(Split::Gallery),
            other => Err(AwbError::Data(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageRecord {
    pub image_id: usize,
    pub identity: usize,
    pub domain: String,
    pub split: Split,
    pub path: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub records: Vec<ImageRecord>,
    /// Planar RGB bytes per record.
    pub pixels: Vec<Vec<u8>>,
}

impl Dataset {
    pub fn empty(height: usize, width: usize) -> Self {
        Self { height, width, records: Vec::new(), pixels: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn extend(&mut self, other: Dataset) -> Result<()> {
        if (other.height, other.width) != (self.height, self.width) {
            return Err(AwbError::Data("cannot merge datasets of different image sizes".into()));
        }
        self.records.extend(other.records);
        self.pixels.extend(other.pixels);
        Ok(())
    }

    /// Indices of records in `domain` whose split is one of `splits`.
    pub fn select(&self, domain: &str, splits: &[Split]) -> Vec<usize> {
        (0..self.records.len())
            .filter(|&i| self.records[i].domain == domain && splits.contains(&self.records[i].split))
            .collect()
    }

    pub fn identities(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.records[i].identity).collect()
    }

    /// Identities relabeled densely to `0..n` in ascending order.
    pub fn dense_labels(&self, idx: &[usize]) -> Vec<usize> {
        let mut ids = self.identities(idx);
        let mut uniq = ids.clone();
        uniq.sort_unstable();
        uniq.dedup();
        for l in ids.iter_mut() {
            *l = uniq.binary_search(l).expect("present");
        }
        ids
    }

    /// Normalized `N×3×H×W` network input.
    pub fn tensor(&self, idx: &[usize]) -> Result<Tensor<f32>> {
        let per = 3 * self.height * self.width;
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            let px = self.pixels.get(i).ok_or_else(|| AwbError::Data(format!("no image at index {i}")))?;
            data.extend(px.iter().map(|&b| (b as f32 / 255.0 - PIXEL_MEAN) / PIXEL_STD));
        }
        Ok(Tensor::new(&[idx.len(), 3, self.height, self.width], data)?)
    }

    pub fn manifest(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&format!("{}\t{}\t{}\t{}\t{}\n", r.image_id, r.identity, r.domain, r.split, r.path));
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        for (r, px) in self.records.iter().zip(&self.pixels) {
            let path = dir.join(&r.path);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent).map_err(|e| AwbError::io(parent, e))?;
            }
            fs::write(&path, px).map_err(|e| AwbError::io(&path, e))?;
        }
        let m = dir.join(MANIFEST_FILE);
        fs::write(&m, self.manifest()).map_err(|e| AwbError::io(&m, e))
    }

    /// Read a dataset whose images are `height×width`.
    pub fn load(dir: &Path, height: usize, width: usize) -> Result<Self> {
        let m = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&m).map_err(|e| AwbError::io(&m, e))?;
        let mut ds = Dataset::empty(height, width);
        for (n, line) in text.lines().enumerate() {
            let bad = |what: &str| AwbError::Data(format!("{}:{}: {what}", m.display(), n + 1));
            let f: Vec<&str> = line.split('\t').collect();
            let [id, identity, domain, split, path] = f[..] else {
                return Err(bad("expected 5 tab-separated fields"));
            };
            if path.split('/').any(|c| c == ".." || c.is_empty()) {
                return Err(bad("image path must be relative and stay inside the dataset"));
            }
            let record = ImageRecord {
                image_id: id.parse().map_err(|_| bad("bad image id"))?,
                identity: identity.parse().map_err(|_| bad("bad identity id"))?,
                domain: domain.to_string(),
                split: split.parse().map_err(|_| bad("bad split"))?,
                path: path.to_string(),
            };
            let file = dir.join(path);
            let px = fs::read(&file).map_err(|e| AwbError::io(&file, e))?;
            if px.len() != 3 * height * width {
                return Err(AwbError::Data(format!(
                    "{} has {} bytes, expected {} for 3×{height}×{width}",
                    file.display(),
                    px.len(),
                    3 * height * width
                )));
            }
            ds.records.push(record);
            ds.pixels.push(px);
        }
        if ds.is_empty() {
            return Err(AwbError::Data(format!("{} lists no images", m.display())));
        }
        Ok(ds)
    }
}
