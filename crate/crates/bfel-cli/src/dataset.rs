//! Dataset files: the CSV schema and the MNIST IDX importer.
//!
//! CSV schema: a header line `dim,num_classes,count`, then one row per
//! sample holding `dim` features followed by the integer label.

use std::path::Path;

use anyhow::{bail, Context, Result};

use bfel_core::data::{generate_blobs, BlobsSpec, Dataset};

use crate::config::DatasetSection;

pub fn write_csv(path: &Path, data: &Dataset) -> Result<()> {
    let mut out = String::new();
    out.push_str(&format!("{},{},{}\n", data.feature_dim(), data.num_classes(), data.len()));
    for i in 0..data.len() {
        let mut row = data
            .feature_row(i)
            .iter()
            .map(|v| format!("{v}"))
            .collect::<Vec<_>>()
            .join(",");
        row.push(',');
        row.push_str(&data.labels()[i].to_string());
        out.push_str(&row);
        out.push('\n');
    }
    std::fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

pub fn read_csv(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    let header = lines.next().context("empty dataset file")?;
    let parts: Vec<&str> = header.split(',').collect();
    if parts.len() != 3 {
        bail!("dataset header must be dim,num_classes,count");
    }
    let dim: usize = parts[0].trim().parse().context("bad dim in header")?;
    let classes: u32 = parts[1].trim().parse().context("bad num_classes in header")?;
    let count: usize = parts[2].trim().parse().context("bad count in header")?;

    let mut features = Vec::with_capacity(count * dim);
    let mut labels = Vec::with_capacity(count);
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim + 1 {
            bail!("row {}: expected {} fields, got {}", lineno + 2, dim + 1, fields.len());
        }
        for f in &fields[..dim] {
            features.push(f.trim().parse::<f64>().with_context(|| format!("row {}", lineno + 2))?);
        }
        labels.push(fields[dim].trim().parse::<u32>().with_context(|| format!("row {}", lineno + 2))?);
    }
    if labels.len() != count {
        bail!("header promised {count} rows, file holds {}", labels.len());
    }
    Dataset::new(features, labels, dim, classes).map_err(|e| anyhow::anyhow!("{e}"))
}

/// Reads the standard IDX pair (`train-images-idx3-ubyte`,
/// `train-labels-idx1-ubyte`) from a directory, taking at most `limit`
/// samples. Pixels are normalized into [0, 1].
pub fn read_mnist(dir: &Path, limit: usize) -> Result<Dataset> {
    let images = read_idx_images(&dir.join("train-images-idx3-ubyte"), limit)?;
    let labels = read_idx_labels(&dir.join("train-labels-idx1-ubyte"), limit)?;
    let (pixels, dim, n) = images;
    if labels.len() != n {
        bail!("image/label count mismatch: {n} images, {} labels", labels.len());
    }
    Dataset::new(pixels, labels, dim, 10).map_err(|e| anyhow::anyhow!("{e}"))
}

fn read_u32_be(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|s| u32::from_be_bytes(s.try_into().expect("4 bytes")))
        .context("truncated IDX header")
}

fn read_idx_images(path: &Path, limit: usize) -> Result<(Vec<f64>, usize, usize)> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if read_u32_be(&bytes, 0)? != 2051 {
        bail!("{} is not an IDX image file (bad magic)", path.display());
    }
    let n = read_u32_be(&bytes, 4)? as usize;
    let rows = read_u32_be(&bytes, 8)? as usize;
    let cols = read_u32_be(&bytes, 12)? as usize;
    let dim = rows * cols;
    let take = n.min(limit);
    let need = 16 + take * dim;
    if bytes.len() < need {
        bail!("{}: truncated image data", path.display());
    }
    let pixels = bytes[16..need].iter().map(|&b| b as f64 / 255.0).collect();
    Ok((pixels, dim, take))
}

fn read_idx_labels(path: &Path, limit: usize) -> Result<Vec<u32>> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if read_u32_be(&bytes, 0)? != 2049 {
        bail!("{} is not an IDX label file (bad magic)", path.display());
    }
    let n = read_u32_be(&bytes, 4)? as usize;
    let take = n.min(limit);
    if bytes.len() < 8 + take {
        bail!("{}: truncated label data", path.display());
    }
    Ok(bytes[8..8 + take].iter().map(|&b| b as u32).collect())
}

/// Builds the `(train, test)` pair a run uses, from the dataset section.
pub fn prepare(section: &DatasetSection, config_dir: &Path, seed: u64) -> Result<(Dataset, Dataset)> {
    let full = match section.kind.as_str() {
        "blobs" => {
            let spec = BlobsSpec {
                samples: section.samples,
                features: section.features,
                classes: section.classes,
                informative: section.informative,
                center_scale: section.center_scale,
                noise_sigma: section.noise_sigma,
            };
            generate_blobs(&spec, seed).map_err(|e| anyhow::anyhow!("{e}"))?
        }
        "csv" => {
            let path = resolve(config_dir, &section.path);
            read_csv(&path)?
        }
        "mnist" => {
            let dir = resolve(config_dir, &section.path);
            read_mnist(&dir, section.samples)?
        }
        other => bail!("unknown dataset kind {other}"),
    };
    full.split_fraction(section.train_fraction, seed)
        .map_err(|e| anyhow::anyhow!("{e}"))
}

fn resolve(dir: &Path, p: &str) -> std::path::PathBuf {
    let path = Path::new(p);
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        dir.join(path)
    }
}
