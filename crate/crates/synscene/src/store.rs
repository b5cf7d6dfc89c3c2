//! On-disk dataset directories.
//!
//! ```text
//! out_dir/
//!   manifest.json
//!   train/00000_image.bin   3 x H x W  f64
//!   train/00000_seg.bin     H x W      i32   (only when the dataset labels seg)
//!   train/00000_depth.bin   1 x H x W  f64   (only when the dataset labels depth)
//!   test/...                same, always with both labels
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tensorcore::io::{read_labels, read_tensor, write_labels, write_tensor};

use crate::dataset::{make_dataset, Dataset};
use crate::error::{Result, SceneError};
use crate::scene::Sample;
use crate::spec::{DatasetSpec, Task};

pub const STORE_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn dir(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleFiles {
    pub index: usize,
    pub image: String,
    pub seg: Option<String>,
    pub inv_depth: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub split: Split,
    pub seed: u64,
    pub samples: Vec<SampleFiles>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoreManifest {
    pub schema_version: u32,
    pub spec: DatasetSpec,
    pub splits: Vec<SplitManifest>,
}

fn write_split(root: &Path, ds: &Dataset, split: Split, full_labels: bool) -> Result<SplitManifest> {
    let dir = root.join(split.dir());
    fs::create_dir_all(&dir)?;
    let n = ds.spec().image_size;
    let mut samples = Vec::with_capacity(ds.len());
    for i in 0..ds.len() {
        let s = if full_labels { ds.eval_view(i)?.clone() } else { ds.train_view(i)? };
        let stem = format!("{}/{i:05}", split.dir());
        let mut buf = Vec::new();
        write_tensor(&mut buf, &s.image)?;
        fs::write(root.join(format!("{stem}_image.bin")), &buf)?;
        let seg = match &s.seg {
            Some(lbl) => {
                let name = format!("{stem}_seg.bin");
                let ints: Vec<i32> = lbl.iter().map(|&c| c as i32).collect();
                let mut buf = Vec::new();
                write_labels(&mut buf, &[n, n], &ints)?;
                fs::write(root.join(&name), &buf)?;
                Some(name)
            }
            None => None,
        };
        let inv_depth = match &s.inv_depth {
            Some(d) => {
                let name = format!("{stem}_depth.bin");
                let mut buf = Vec::new();
                write_tensor(&mut buf, d)?;
                fs::write(root.join(&name), &buf)?;
                Some(name)
            }
            None => None,
        };
        samples.push(SampleFiles { index: i, image: format!("{stem}_image.bin"), seg, inv_depth });
    }
    Ok(SplitManifest { split, seed: ds.spec().seed, samples })
}

/// Renders both splits of `spec` into `out_dir` and writes the manifest.
pub fn write_dataset_dir(spec: &DatasetSpec, out_dir: &Path) -> Result<StoreManifest> {
    spec.validate()?;
    fs::create_dir_all(out_dir)?;
    let train = make_dataset(spec)?;
    let test = make_dataset(&spec.test_split())?;
    let manifest = StoreManifest {
        schema_version: STORE_SCHEMA_VERSION,
        spec: spec.clone(),
        splits: vec![
            write_split(out_dir, &train, Split::Train, false)?,
            write_split(out_dir, &test, Split::Test, true)?,
        ],
    };
    fs::write(out_dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<StoreManifest> {
    let m: StoreManifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
    if m.schema_version != STORE_SCHEMA_VERSION {
        return Err(SceneError::BadStore(format!("unsupported schema_version {}", m.schema_version)));
    }
    Ok(m)
}

fn read_f64(path: PathBuf) -> Result<tensorcore::Tensor> {
    Ok(read_tensor(&mut fs::read(path)?.as_slice())?)
}

/// Loads one split; the returned dataset's spec describes that split.
pub fn load_split(dir: &Path, split: Split) -> Result<Dataset> {
    let m = read_manifest(dir)?;
    let entry = m
        .splits
        .iter()
        .find(|s| s.split == split)
        .ok_or_else(|| SceneError::BadStore(format!("no {split:?} split in manifest")))?;
    let n = m.spec.image_size;
    let mut samples = Vec::with_capacity(entry.samples.len());
    for f in &entry.samples {
        let image = read_f64(dir.join(&f.image))?;
        if image.shape() != [3, n, n] {
            return Err(SceneError::BadStore(format!("{} has shape {:?}", f.image, image.shape())));
        }
        let seg = match &f.seg {
            Some(p) => {
                let (shape, lbl) = read_labels(&mut fs::read(dir.join(p))?.as_slice())?;
                if shape != [n, n] || lbl.iter().any(|&c| c < 0 || c as usize >= m.spec.num_classes) {
                    return Err(SceneError::BadStore(format!("{p} is not a valid {n}x{n} label map")));
                }
                Some(lbl.into_iter().map(|c| c as u32).collect())
            }
            None => None,
        };
        let inv_depth = f.inv_depth.as_ref().map(|p| read_f64(dir.join(p))).transpose()?;
        samples.push(Sample { image, seg, inv_depth });
    }
    let spec = match split {
        Split::Train => m.spec.clone(),
        Split::Test => {
            let mut s = m.spec.test_split();
            s.labeled_tasks = Task::ALL.into_iter().collect();
            s
        }
    };
    Dataset::from_samples(spec, samples)
}
