//! `root/{train,val,test}/{images,masks}/NNNN.png` plus `root/labels.csv`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffusion::ClassLabel;
use crate::error::{ensure, Error, Result};
use crate::io::{read_image, read_mask, write_image, write_mask};

use super::{healthy_counterfactual, synthesize_one, Sample, SyntheticSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LabelRow {
    id: String,
    label: ClassLabel,
    split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetEntry {
    pub id: String,
    pub sample: Sample,
}

/// Generated splits. Training holds every diseased sample followed by its
/// healthy counterfactual; validation and test are diseased only.
#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl SynthDataset {
    pub fn generate(spec: &SyntheticSpec, train: usize, val: usize, test: usize) -> Result<Self> {
        spec.validate()?;
        ensure!(
            spec.lesion_count[0] >= 1,
            Config,
            "synth.lesion_count must start at 1 so every split image is diseased"
        );
        let gen = |from: usize, n: usize| -> Result<Vec<Sample>> {
            (from..from + n).map(|i| synthesize_one(spec, i as u64)).collect()
        };
        let mut tr = gen(0, train)?;
        let healthy = tr.iter().map(healthy_counterfactual).collect::<Result<Vec<_>>>()?;
        tr.extend(healthy);
        Ok(Self {
            train: tr,
            val: gen(train, val)?,
            test: gen(train + val, test)?,
        })
    }

    pub fn split(&self, s: Split) -> &[Sample] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

pub fn write_dataset(root: &Path, ds: &SynthDataset) -> Result<()> {
    let mut rows = Vec::new();
    for split in [Split::Train, Split::Val, Split::Test] {
        for (i, s) in ds.split(split).iter().enumerate() {
            let id = format!("{i:04}");
            let dir = root.join(split.name());
            write_image(&dir.join("images").join(format!("{id}.png")), &s.image)?;
            write_mask(&dir.join("masks").join(format!("{id}.png")), &s.mask)?;
            rows.push(LabelRow {
                id,
                label: s.label,
                split,
            });
        }
    }
    let path = root.join("labels.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
    for r in &rows {
        w.serialize(r).map_err(|e| csv_err(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Data(format!("{}: {e}", path.display()))
}

/// Loads one split in `labels.csv` order. Missing masks read as empty.
pub fn read_split(root: &Path, split: Split) -> Result<Vec<DatasetEntry>> {
    let path = root.join("labels.csv");
    ensure!(path.is_file(), Input, "dataset index {} not found", path.display());
    let mut r = csv::Reader::from_path(&path).map_err(|e| csv_err(&path, e))?;
    let mut out = Vec::new();
    for row in r.deserialize::<LabelRow>() {
        let row = row.map_err(|e| csv_err(&path, e))?;
        if row.split != split {
            continue;
        }
        let dir = root.join(split.name());
        let image = read_image(&dir.join("images").join(format!("{}.png", row.id)))?;
        let mpath = dir.join("masks").join(format!("{}.png", row.id));
        let mask = if mpath.exists() {
            read_mask(&mpath)?
        } else {
            crate::raster::BinaryMask::zeros(image.width(), image.height())
        };
        ensure!(
            mask.width() == image.width() && mask.height() == image.height(),
            Data,
            "mask {} does not match its image size",
            mpath.display()
        );
        out.push(DatasetEntry {
            id: row.id,
            sample: Sample {
                image,
                mask,
                label: row.label,
            },
        });
    }
    Ok(out)
}
