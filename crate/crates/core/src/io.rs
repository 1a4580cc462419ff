//! Versioned file formats: datasets (line-delimited JSON) and shared helpers.
//!
//! A dataset file starts with one header line followed by one record per line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::channel::{FrequencyConfig, Measurement};
use crate::error::{Error, Result};
use crate::sim::{Dataset, SceneFile, Split};

pub const DATASET_FORMAT: &str = "radfield-dataset";
pub const DATASET_VERSION: &str = "1.0";

/// Rejects files whose major version differs from ours.
pub fn check_version(found: &str, supported: &str) -> Result<()> {
    let major = |v: &str| v.split('.').next().unwrap_or("").to_string();
    if major(found) != major(supported) || major(found).is_empty() {
        return Err(Error::Format(format!("unsupported format version {found} (expected {supported})")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Units {
    pub length: String,
    pub frequency: String,
    pub angle: String,
}

impl Default for Units {
    fn default() -> Self {
        Units {
            length: "m".into(),
            frequency: "Hz".into(),
            angle: "rad".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub version: String,
    pub units: Units,
    pub scene: SceneFile,
    pub frequency: FrequencyConfig,
    pub seed: u64,
    pub max_order: usize,
    pub train_fraction: f64,
    pub records: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: usize,
    pub split: Split,
    #[serde(flatten)]
    pub measurement: Measurement,
}

pub fn write_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_dataset_to(dataset, &mut out)?;
    out.flush()?;
    Ok(())
}

pub fn write_dataset_to(dataset: &Dataset, out: &mut impl Write) -> Result<()> {
    let header = DatasetHeader {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION.into(),
        units: Units::default(),
        scene: SceneFile::from_scene(&dataset.scene),
        frequency: dataset.frequency,
        seed: dataset.seed,
        max_order: dataset.max_order,
        train_fraction: dataset.train_fraction,
        records: dataset.measurements.len(),
    };
    serde_json::to_writer(&mut *out, &header)?;
    out.write_all(b"\n")?;
    for (id, (m, split)) in dataset.measurements.iter().zip(&dataset.splits).enumerate() {
        let rec = DatasetRecord {
            id,
            split: *split,
            measurement: m.clone(),
        };
        serde_json::to_writer(&mut *out, &rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::Format(format!("{}: empty dataset file", path.display())))??;
    let header: DatasetHeader = serde_json::from_str(&first)?;
    if header.format != DATASET_FORMAT {
        return Err(Error::Format(format!("not a dataset file (format '{}')", header.format)));
    }
    check_version(&header.version, DATASET_VERSION)?;
    let scene = header.scene.to_scene()?;
    let bbox = scene.bounding_box();
    let mut measurements = Vec::with_capacity(header.records);
    let mut splits = Vec::with_capacity(header.records);
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DatasetRecord = serde_json::from_str(&line)?;
        if rec.id != measurements.len() {
            return Err(Error::Format(format!("record id {} out of order", rec.id)));
        }
        if !bbox.contains(rec.measurement.position) {
            return Err(Error::Format(format!("record {} lies outside the scene box", rec.id)));
        }
        measurements.push(rec.measurement);
        splits.push(rec.split);
    }
    if measurements.len() != header.records {
        return Err(Error::Format(format!(
            "header announces {} records, found {}",
            header.records,
            measurements.len()
        )));
    }
    Ok(Dataset {
        scene,
        frequency: header.frequency,
        max_order: header.max_order,
        seed: header.seed,
        train_fraction: header.train_fraction,
        measurements,
        splits,
    })
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut out, value)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

pub fn write_json_pretty<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let reader = BufReader::new(File::open(path)?);
    Ok(serde_json::from_reader(reader)?)
}

/// Writes to a temporary sibling then renames, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{generate_dataset, Material, SceneGeometry};

    #[test]
    fn version_check() {
        assert!(check_version("1.0", "1.0").is_ok());
        assert!(check_version("1.7", "1.0").is_ok());
        assert!(check_version("2.0", "1.0").is_err());
        assert!(check_version("", "1.0").is_err());
    }

    #[test]
    fn dataset_round_trip() {
        let scene = SceneGeometry::furnished_conference_room(Material::named("wood").unwrap()).unwrap();
        let ds = generate_dataset(&scene, 20, FrequencyConfig::carrier(2.412e9).unwrap(), 2, 11, 0.8).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.jsonl");
        write_dataset(&ds, &path).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(back, ds);
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 21);
    }

    #[test]
    fn rejects_unknown_major() {
        let scene = SceneGeometry::conference_room(Material::PerfectReflector).unwrap();
        let ds = generate_dataset(&scene, 4, FrequencyConfig::carrier(2.412e9).unwrap(), 0, 1, 0.5).unwrap();
        let mut buf = Vec::new();
        write_dataset_to(&ds, &mut buf).unwrap();
        let text = String::from_utf8(buf)
            .unwrap()
            .replacen("\"version\":\"1.0\"", "\"version\":\"2.0\"", 1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.jsonl");
        std::fs::write(&path, text).unwrap();
        assert!(matches!(read_dataset(&path), Err(Error::Format(_))));
    }
}
