//! On-disk clip features.
//!
//! One little-endian binary file per sample and modality:
//!
//! ```text
//! b"MCLR" | version: u32 | T: u32 | d: u32 | T*d f32 values, row-major
//! ```
//!
//! A manifest table lists the samples, one per line, after a fixed header:
//!
//! ```text
//! # classes = 5
//! id,rgb_path,flow_path,label,domain
//! src-c0-0000,features/src-c0-0000.rgb.bin,features/src-c0-0000.flow.bin,0,source
//! ```
//!
//! Paths are relative to the manifest's directory. Lines starting with `#`
//! are comments; `# classes = C` bounds the labels.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use super::{DatasetSplit, Domain, MultimodalSample};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const FEATURE_MAGIC: &[u8; 4] = b"MCLR";
pub const FEATURE_VERSION: u32 = 1;
pub const MANIFEST_HEADER: &str = "id,rgb_path,flow_path,label,domain";

pub fn write_feature_file(path: &Path, features: &Matrix) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + 4 * features.len());
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(features.rows() as u32).to_le_bytes());
    buf.extend_from_slice(&(features.cols() as u32).to_le_bytes());
    for &x in features.data() {
        buf.extend_from_slice(&(x as f32).to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_feature_file(path: &Path) -> Result<Matrix> {
    let entry = path.display().to_string();
    let bytes = fs::read(path).map_err(|e| Error::load(&entry, e.to_string()))?;
    if bytes.len() < 16 || &bytes[..4] != FEATURE_MAGIC {
        return Err(Error::load(entry, "missing MCLR header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let version = word(4);
    if version != FEATURE_VERSION {
        return Err(Error::load(entry, format!("unsupported version {version}")));
    }
    let (rows, cols) = (word(8) as usize, word(12) as usize);
    let payload = &bytes[16..];
    if payload.len() != 4 * rows * cols {
        return Err(Error::load(
            entry,
            format!("payload holds {} bytes, header says {rows}x{cols}", payload.len()),
        ));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Matrix::from_vec(rows, cols, data)
}

/// Writes every sample's features under `dir/features/` and the manifest to
/// `dir/manifest.csv`, returning the manifest path and the feature files.
pub fn write_dataset(dir: &Path, samples: &[MultimodalSample], classes: usize) -> Result<(PathBuf, Vec<PathBuf>)> {
    let feat_dir = dir.join("features");
    fs::create_dir_all(&feat_dir)?;
    let manifest_path = dir.join("manifest.csv");
    let mut out = BufWriter::new(fs::File::create(&manifest_path)?);
    writeln!(out, "# classes = {classes}")?;
    writeln!(out, "{MANIFEST_HEADER}")?;
    let mut files = Vec::with_capacity(2 * samples.len());
    for s in samples {
        let rgb_rel = format!("features/{}.rgb.bin", s.id);
        let flow_rel = format!("features/{}.flow.bin", s.id);
        write_feature_file(&dir.join(&rgb_rel), &s.rgb)?;
        write_feature_file(&dir.join(&flow_rel), &s.flow)?;
        files.push(dir.join(&rgb_rel));
        files.push(dir.join(&flow_rel));
        writeln!(out, "{},{},{},{},{}", s.id, rgb_rel, flow_rel, s.label, s.domain.as_str())?;
    }
    out.flush()?;
    Ok((manifest_path, files))
}

/// Reads every sample listed in a manifest. Returns the samples and the class
/// count (from the `# classes` comment, else one past the largest label).
pub fn load_pool(manifest_path: &Path) -> Result<(Vec<MultimodalSample>, usize)> {
    let text = fs::read_to_string(manifest_path)
        .map_err(|e| Error::load(manifest_path.display().to_string(), e.to_string()))?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut declared_classes: Option<usize> = None;
    let mut samples: Vec<MultimodalSample> = Vec::new();
    let mut saw_header = false;
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            if let Some((k, v)) = comment.split_once('=') {
                if k.trim() == "classes" {
                    let c = v
                        .trim()
                        .parse()
                        .map_err(|_| Error::load("manifest", format!("bad class count `{}`", v.trim())))?;
                    declared_classes = Some(c);
                }
            }
            continue;
        }
        if !saw_header {
            if line != MANIFEST_HEADER {
                return Err(Error::load("manifest", format!("expected header `{MANIFEST_HEADER}`")));
            }
            saw_header = true;
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let [id, rgb_path, flow_path, label, domain] = fields[..] else {
            return Err(Error::load(line, "expected 5 comma-separated fields"));
        };
        let label: usize = label
            .parse()
            .map_err(|_| Error::load(id, format!("unknown label `{label}`")))?;
        if let Some(c) = declared_classes {
            if label >= c {
                return Err(Error::load(id, format!("unknown label {label} (classes = {c})")));
            }
        }
        let domain = match domain {
            "source" => Domain::Source,
            "target" => Domain::Target,
            other => return Err(Error::load(id, format!("unknown domain `{other}`"))),
        };
        let read = |rel: &str| {
            read_feature_file(&base.join(rel)).map_err(|e| Error::load(id, e.to_string()))
        };
        let (rgb, flow) = (read(rgb_path)?, read(flow_path)?);
        if rgb.rows() != flow.rows() {
            return Err(Error::load(
                id,
                format!("shape mismatch: rgb T={} but flow T={}", rgb.rows(), flow.rows()),
            ));
        }
        if let Some(first) = samples.first() {
            if rgb.shape() != first.rgb.shape() || flow.shape() != first.flow.shape() {
                return Err(Error::load(
                    id,
                    format!("shape mismatch: {:?} differs from {:?}", rgb.shape(), first.rgb.shape()),
                ));
            }
        }
        samples.push(MultimodalSample {
            id: id.to_string(),
            rgb,
            flow,
            label,
            domain,
        });
    }
    if samples.is_empty() {
        return Err(Error::EmptyDataset(format!("{} lists no samples", manifest_path.display())));
    }
    let classes = declared_classes.unwrap_or_else(|| samples.iter().map(|s| s.label).max().unwrap_or(0) + 1);
    Ok((samples, classes))
}

/// Loads a manifest and splits it with `k` target shots per class.
pub fn load_features(manifest_path: &Path, k: usize, seed: u64) -> Result<DatasetSplit> {
    let (pool, classes) = load_pool(manifest_path)?;
    DatasetSplit::from_pool(pool, classes, k, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(id: &str, t_rgb: usize, t_flow: usize, label: usize, domain: Domain) -> MultimodalSample {
        MultimodalSample {
            id: id.into(),
            rgb: Matrix::filled(t_rgb, 3, 0.5),
            flow: Matrix::filled(t_flow, 3, -0.25),
            label,
            domain,
        }
    }

    #[test]
    fn feature_file_round_trip_and_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        let m = Matrix::from_rows(&[&[1.0, 2.5], &[-3.0, 0.125]]);
        write_feature_file(&p, &m).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], b"MCLR");
        assert_eq!(bytes.len(), 16 + 4 * 4);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(read_feature_file(&p).unwrap(), m);
    }

    #[test]
    fn manifest_happy_path() {
        let dir = tempfile::tempdir().unwrap();
        let samples = [sample("a", 4, 4, 0, Domain::Source), sample("b", 4, 4, 1, Domain::Target)];
        let (manifest, _) = write_dataset(dir.path(), &samples, 2).unwrap();
        let (pool, classes) = load_pool(&manifest).unwrap();
        assert_eq!(pool.len(), 2);
        assert_eq!(classes, 2);
        assert_eq!(pool[1], samples[1]);
    }

    #[test]
    fn clip_count_mismatch_names_sample() {
        let dir = tempfile::tempdir().unwrap();
        let samples = [sample("vid-7", 12, 10, 0, Domain::Source)];
        let (manifest, _) = write_dataset(dir.path(), &samples, 1).unwrap();
        let err = load_pool(&manifest).unwrap_err().to_string();
        assert!(err.contains("vid-7") && err.contains("mismatch"), "{err}");
    }

    #[test]
    fn empty_manifest_and_bad_entries() {
        let dir = tempfile::tempdir().unwrap();
        let (manifest, _) = write_dataset(dir.path(), &[], 3).unwrap();
        assert!(matches!(load_pool(&manifest), Err(Error::EmptyDataset(_))));

        let m2 = dir.path().join("m2.csv");
        fs::write(&m2, format!("{MANIFEST_HEADER}\nx,missing.bin,missing.bin,0,source\n")).unwrap();
        let err = load_pool(&m2).unwrap_err().to_string();
        assert!(err.contains("`x`"), "{err}");

        let samples = [sample("y", 2, 2, 4, Domain::Source)];
        write_dataset(dir.path(), &samples, 5).unwrap();
        let m3 = dir.path().join("m3.csv");
        fs::write(
            &m3,
            format!("# classes = 3\n{MANIFEST_HEADER}\ny,features/y.rgb.bin,features/y.flow.bin,4,source\n"),
        )
        .unwrap();
        let err = load_pool(&m3).unwrap_err().to_string();
        assert!(err.contains("unknown label"), "{err}");
    }
}
