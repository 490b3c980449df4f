//! On-disk dataset layout:
//!
//! ```text
//! dataset.txt            key=value generation parameters
//! manifest.csv           id,path,class,labelled,mask_path
//! images/train/<id>.pgm  16-bit images of the training partitions
//! images/test/<id>.pgm   16-bit test images
//! masks/<id>.pgm         8-bit {0,255} masks (labelled and test samples)
//! ```
//!
//! Unlabelled training rows keep their class (used only for weak labels)
//! but have an empty mask path.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Class, Dataset, Partition, PhantomSample, SplitManifest};
use crate::error::{Error, Result};
use crate::io::{write_atomic, Graymap};

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    id: String,
    path: String,
    class: String,
    labelled: bool,
    mask_path: String,
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Write `dataset` under `dir`, creating it if needed.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    for sub in ["images/train", "images/test", "masks"] {
        mkdir(&dir.join(sub))?;
    }
    let mut rows = Vec::with_capacity(dataset.samples.len());
    for s in &dataset.samples {
        let part = dataset
            .manifest
            .partition_of(&s.id)
            .ok_or_else(|| Error::Config(format!("sample {} is in no partition", s.id)))?;
        let folder = if part == Partition::Test { "test" } else { "train" };
        let path = format!("images/{folder}/{}.pgm", s.id);
        Graymap::from_unit_u16(&s.image, s.size, s.size).write(&dir.join(&path))?;
        let mask_path = match &s.mask {
            Some(mask) if part != Partition::Unlabelled => {
                let p = format!("masks/{}.pgm", s.id);
                Graymap::from_unit_u8(mask, s.size, s.size).write(&dir.join(&p))?;
                p
            }
            _ => String::new(),
        };
        rows.push(Row {
            id: s.id.clone(),
            path,
            class: s.class.name().into(),
            labelled: part != Partition::Unlabelled,
            mask_path,
        });
    }
    let mut writer = csv::Writer::from_writer(Vec::new());
    for row in &rows {
        writer.serialize(row).map_err(|e| Error::Format {
            path: dir.join("manifest.csv"),
            msg: e.to_string(),
        })?;
    }
    let bytes = writer.into_inner().map_err(|e| Error::format(dir.join("manifest.csv"), e.to_string()))?;
    write_atomic(&dir.join("manifest.csv"), &bytes)?;
    let meta = format!(
        "size={}\nseed={}\nlabelled_fraction={}\ntest_fraction={}\nsamples={}\n",
        dataset.size,
        dataset.seed,
        dataset.labelled_fraction,
        dataset.test_fraction,
        dataset.samples.len()
    );
    write_atomic(&dir.join("dataset.txt"), meta.as_bytes())
}

fn parse_meta(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut map = BTreeMap::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let (k, v) = line.split_once('=').ok_or_else(|| Error::format(path, format!("expected key=value, got {line:?}")))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

fn meta_value<T: std::str::FromStr>(meta: &BTreeMap<String, String>, key: &str, path: &Path) -> Result<T> {
    meta.get(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::format(path, format!("missing or invalid {key}")))
}

fn read_image(dir: &Path, rel: &str, size: usize) -> Result<Graymap> {
    let path = dir.join(rel);
    let map = Graymap::read(&path)?;
    if map.width != size || map.height != size {
        return Err(Error::format(&path, format!("expected {size}x{size}, found {}x{}", map.width, map.height)));
    }
    Ok(map)
}

/// Read a dataset written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let meta_path = dir.join("dataset.txt");
    let meta = parse_meta(&meta_path)?;
    let size: usize = meta_value(&meta, "size", &meta_path)?;
    let seed: u64 = meta_value(&meta, "seed", &meta_path)?;
    let labelled_fraction: f64 = meta_value(&meta, "labelled_fraction", &meta_path)?;
    let test_fraction: f64 = meta_value(&meta, "test_fraction", &meta_path)?;

    let manifest_path = dir.join("manifest.csv");
    let mut reader = csv::Reader::from_path(&manifest_path).map_err(|e| Error::format(&manifest_path, e.to_string()))?;
    let mut manifest = SplitManifest {
        seed,
        ..SplitManifest::default()
    };
    let mut samples = Vec::new();
    for row in reader.deserialize::<Row>() {
        let row = row.map_err(|e| Error::format(&manifest_path, e.to_string()))?;
        let class: Class = row.class.parse().map_err(|_| Error::format(&manifest_path, format!("bad class {:?}", row.class)))?;
        let image = read_image(dir, &row.path, size)?.to_unit();
        let mask = if row.mask_path.is_empty() {
            None
        } else {
            let m = read_image(dir, &row.mask_path, size)?;
            Some(m.samples.iter().map(|&v| if v > m.maxval / 2 { 1.0 } else { 0.0 }).collect())
        };
        let is_test = row.path.starts_with("images/test/");
        if is_test {
            if class == Class::Covid {
                manifest.test_segmentation.push(row.id.clone());
            }
            manifest.test_classification.push(row.id.clone());
        } else if row.labelled {
            manifest.labelled_train.push(row.id.clone());
        } else {
            manifest.unlabelled_train.push(row.id.clone());
        }
        samples.push(PhantomSample {
            id: row.id,
            size,
            class,
            image,
            mask,
            labelled: row.labelled,
        });
    }
    samples.sort_by(|a, b| a.id.cmp(&b.id));
    for list in [
        &mut manifest.labelled_train,
        &mut manifest.unlabelled_train,
        &mut manifest.test_classification,
        &mut manifest.test_segmentation,
    ] {
        list.sort();
    }
    let expected: Option<usize> = meta.get("samples").and_then(|v| v.parse().ok());
    if expected.is_some_and(|n| n != samples.len()) {
        return Err(Error::format(&manifest_path, format!("expected {} rows, found {}", expected.unwrap_or(0), samples.len())));
    }
    let dataset = Dataset {
        size,
        seed,
        labelled_fraction,
        test_fraction,
        manifest,
        samples,
    };
    dataset.validate()?;
    Ok(dataset)
}
