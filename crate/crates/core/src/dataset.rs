//! On-disk dataset layout and atomic file output.
//!
//! ```text
//! <root>/manifest.csv              case_id,split,seed,spacing_row_mm,spacing_col_mm,height,width
//! <root>/schema.toml
//! <root>/<split>/metadata.csv
//! <root>/<split>/<case_id>_image.npy   float32 (H, W)
//! <root>/<split>/<case_id>_label.npy   uint8 (H, W)
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use compseg_tensor::Tensor;
use npyz::WriterBuilder;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature::FeatureMap;
use crate::meta_codec::{read_records_csv, write_records_csv, MetadataRecord, MetadataSchema};
use crate::synth::{Case, Split};

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const SCHEMA_FILE: &str = "schema.toml";
pub const METADATA_FILE: &str = "metadata.csv";

/// Write `bytes` to a temporary sibling of `path`, then rename it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let parent = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(parent).map_err(|e| Error::io(parent, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(tmp.path(), e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// Serialize a row-major array in `.npy` format.
pub fn encode_npy<T: npyz::AutoSerialize>(data: &[T], shape: &[u64]) -> std::io::Result<Vec<u8>> {
    let mut buf = Vec::new();
    let mut w = npyz::WriteOptions::new().default_dtype().shape(shape).writer(&mut buf).begin_nd()?;
    w.extend(data)?;
    w.finish()?;
    Ok(buf)
}

fn read_npy<T: npyz::Deserialize>(path: &Path) -> Result<(Vec<T>, Vec<usize>)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let npy = npyz::NpyFile::new(BufReader::new(file)).map_err(|e| Error::io(path, e))?;
    let shape = npy.shape().iter().map(|d| *d as usize).collect();
    let data = npy.into_vec::<T>().map_err(|e| Error::io(path, e))?;
    Ok((data, shape))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ManifestRow {
    case_id: String,
    split: Split,
    seed: u64,
    spacing_row_mm: f64,
    spacing_col_mm: f64,
    height: usize,
    width: usize,
}

/// One raw (not yet preprocessed) labelled image.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetCase {
    pub case_id: String,
    pub split: Split,
    pub seed: u64,
    pub spacing_mm: (f64, f64),
    pub height: usize,
    pub width: usize,
    pub image: Vec<f32>,
    pub labels: Vec<u8>,
    pub record: MetadataRecord,
}

impl DatasetCase {
    pub fn from_case(case: &Case, spacing_mm: f64) -> Self {
        Self {
            case_id: case.case_id.clone(),
            split: case.split,
            seed: case.seed,
            spacing_mm: (spacing_mm, spacing_mm),
            height: case.sample.height(),
            width: case.sample.width(),
            image: case.sample.image.data().data().to_vec(),
            labels: case.sample.sub_labels.clone(),
            record: case.sample.record.clone(),
        }
    }

    /// The image as a `(1, 1, H, W)` feature map.
    pub fn feature_map(&self) -> Result<FeatureMap<f32>> {
        FeatureMap::new(
            Tensor::new(vec![1, 1, self.height, self.width], self.image.clone())?,
            self.spacing_mm,
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub schema: MetadataSchema,
    pub cases: Vec<DatasetCase>,
}

impl Dataset {
    pub fn from_cases(schema: MetadataSchema, cases: &[Case], spacing_mm: f64) -> Self {
        Self {
            schema,
            cases: cases.iter().map(|c| DatasetCase::from_case(c, spacing_mm)).collect(),
        }
    }

    pub fn split(&self, split: Split) -> Vec<&DatasetCase> {
        self.cases.iter().filter(|c| c.split == split).collect()
    }

    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    /// Write the dataset under `root`, which must be absent or empty. All
    /// files go to a temporary sibling directory first, renamed at the end.
    pub fn save(&self, root: &Path) -> Result<()> {
        if root.exists() {
            let mut entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
            if entries.next().is_some() {
                return Err(Error::Validation(format!("{} exists and is not empty", root.display())));
            }
        }
        let parent = match root.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        fs::create_dir_all(&parent).map_err(|e| Error::io(&parent, e))?;
        let staging = tempfile::Builder::new()
            .prefix(".dataset-")
            .tempdir_in(&parent)
            .map_err(|e| Error::io(&parent, e))?;
        self.write_into(staging.path())?;
        if root.exists() {
            fs::remove_dir(root).map_err(|e| Error::io(root, e))?;
        }
        let staged = staging.keep();
        fs::rename(&staged, root).map_err(|e| Error::io(root, e))?;
        Ok(())
    }

    fn write_into(&self, dir: &Path) -> Result<()> {
        let write = |path: PathBuf, bytes: &[u8]| fs::write(&path, bytes).map_err(|e| Error::io(path, e));
        write(dir.join(SCHEMA_FILE), self.schema.to_toml_string().as_bytes())?;
        let mut manifest = csv::Writer::from_writer(Vec::new());
        let mut by_split: BTreeMap<Split, Vec<(String, MetadataRecord)>> = BTreeMap::new();
        for c in &self.cases {
            if c.image.len() != c.height * c.width || c.labels.len() != c.height * c.width {
                return Err(Error::Shape(format!("case {} does not match {}x{}", c.case_id, c.height, c.width)));
            }
            manifest.serialize(ManifestRow {
                case_id: c.case_id.clone(),
                split: c.split,
                seed: c.seed,
                spacing_row_mm: c.spacing_mm.0,
                spacing_col_mm: c.spacing_mm.1,
                height: c.height,
                width: c.width,
            })?;
            let sub = dir.join(c.split.as_str());
            fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
            let shape = [c.height as u64, c.width as u64];
            let img = encode_npy(&c.image, &shape).map_err(|e| Error::io(&sub, e))?;
            write(sub.join(format!("{}_image.npy", c.case_id)), &img)?;
            let lab = encode_npy(&c.labels, &shape).map_err(|e| Error::io(&sub, e))?;
            write(sub.join(format!("{}_label.npy", c.case_id)), &lab)?;
            by_split.entry(c.split).or_default().push((c.case_id.clone(), c.record.clone()));
        }
        let manifest = manifest.into_inner().map_err(|e| Error::io(dir, e.into_error()))?;
        write(dir.join(MANIFEST_FILE), &manifest)?;
        for (split, rows) in by_split {
            let mut buf = Vec::new();
            write_records_csv(&mut buf, &self.schema, &rows)?;
            write(dir.join(split.as_str()).join(METADATA_FILE), &buf)?;
        }
        Ok(())
    }

    pub fn load(root: &Path) -> Result<Self> {
        let schema = MetadataSchema::load(&root.join(SCHEMA_FILE))?;
        let manifest_path = root.join(MANIFEST_FILE);
        let file = fs::File::open(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let rows: Vec<ManifestRow> = csv::Reader::from_reader(file).deserialize().collect::<csv::Result<_>>()?;
        let mut records: BTreeMap<String, MetadataRecord> = BTreeMap::new();
        for split in [Split::Train, Split::Val, Split::Test] {
            let path = root.join(split.as_str()).join(METADATA_FILE);
            if !path.exists() {
                continue;
            }
            let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
            for (id, record) in read_records_csv(file, &schema)? {
                let id = id.ok_or_else(|| Error::Parse(format!("{} lacks a case_id column", path.display())))?;
                records.insert(id, record);
            }
        }
        let mut cases = Vec::with_capacity(rows.len());
        for row in rows {
            let sub = root.join(row.split.as_str());
            let (image, ishape) = read_npy::<f32>(&sub.join(format!("{}_image.npy", row.case_id)))?;
            let (labels, lshape) = read_npy::<u8>(&sub.join(format!("{}_label.npy", row.case_id)))?;
            let expect = vec![row.height, row.width];
            if ishape != expect || lshape != expect {
                return Err(Error::Shape(format!(
                    "case {}: image {ishape:?}, labels {lshape:?}, manifest {expect:?}",
                    row.case_id
                )));
            }
            let record = records
                .remove(&row.case_id)
                .ok_or_else(|| Error::Parse(format!("no metadata row for case {}", row.case_id)))?;
            cases.push(DatasetCase {
                case_id: row.case_id,
                split: row.split,
                seed: row.seed,
                spacing_mm: (row.spacing_row_mm, row.spacing_col_mm),
                height: row.height,
                width: row.width,
                image,
                labels,
                record,
            });
        }
        Ok(Self { schema, cases })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_cases, PhantomSpec, SplitSizes};

    fn small() -> Dataset {
        let spec = PhantomSpec::default();
        let cases = generate_cases(&spec, SplitSizes::proportional(10), 100).unwrap();
        Dataset::from_cases(MetadataSchema::builtin("mms2").unwrap(), &cases, spec.spacing_mm)
    }

    #[test]
    fn round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("data");
        let ds = small();
        ds.save(&root).unwrap();
        assert!(root.join("train/case0000_image.npy").exists());
        assert_eq!(Dataset::load(&root).unwrap(), ds);
    }

    #[test]
    fn refuses_nonempty_target() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("x"), b"").unwrap();
        assert!(matches!(small().save(dir.path()), Err(Error::Validation(_))));
    }

    #[test]
    fn splits_are_disjoint_and_cover() {
        let ds = small();
        let counts: Vec<usize> = [Split::Train, Split::Val, Split::Test]
            .iter()
            .map(|s| ds.split(*s).len())
            .collect();
        assert_eq!(counts, vec![7, 1, 2]);
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
