//! MNIST IDX and CSV ingestion, and the split of a dataset into sources.

use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use ndarray::{s, Array2, Axis};
use nn_emd_core::trainer::{DatasetType, SourceData, TrainingMode};
use rand::seq::SliceRandom;
use rand::SeedableRng;

use crate::config::{DatasetFormat, RunConfig};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Array2<f64>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn truncate(&mut self, n: usize) {
        let n = n.min(self.len());
        self.x = self.x.slice(s![..n, ..]).to_owned();
        self.labels.truncate(n);
    }

    pub fn classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    let b = bytes.get(at..at + 4).context("truncated idx header")?;
    Ok(u32::from_be_bytes(b.try_into().expect("4 bytes")))
}

/// Raw pixel values, flattened to one row per image.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Array2<f64>> {
    let magic = be_u32(bytes, 0)?;
    ensure!(magic == IMAGES_MAGIC, "image file magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}");
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let pixels = rows * cols;
    let body = &bytes[16..];
    ensure!(
        body.len() == count * pixels,
        "image file holds {} bytes of pixels, header promises {}",
        body.len(),
        count * pixels
    );
    Ok(Array2::from_shape_vec((count, pixels), body.iter().map(|&b| f64::from(b)).collect())?)
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0)?;
    ensure!(magic == LABELS_MAGIC, "label file magic {magic:#010x}, expected {LABELS_MAGIC:#010x}");
    let count = be_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    ensure!(body.len() == count, "label file holds {} labels, header promises {count}", body.len());
    Ok(body.iter().map(|&b| usize::from(b)).collect())
}

pub fn load_mnist(images: &Path, labels: &Path) -> Result<Dataset> {
    let x = parse_idx_images(&std::fs::read(images).with_context(|| format!("reading {}", images.display()))?)?;
    let labels = parse_idx_labels(&std::fs::read(labels).with_context(|| format!("reading {}", labels.display()))?)?;
    ensure!(
        x.nrows() == labels.len(),
        "{} images but {} labels",
        x.nrows(),
        labels.len()
    );
    Ok(Dataset { x, labels })
}

/// Headed CSV; the label column is named or else the last one.
pub fn load_csv(path: &Path, label_column: Option<&str>) -> Result<Dataset> {
    let mut reader = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let headers = reader.headers()?.clone();
    ensure!(headers.len() >= 2, "csv needs at least one feature and a label column");
    let label_idx = match label_column {
        Some(name) => headers
            .iter()
            .position(|h| h == name)
            .with_context(|| format!("no column named `{name}`"))?,
        None => headers.len() - 1,
    };
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        for (i, field) in record.iter().enumerate() {
            if i == label_idx {
                labels.push(
                    field
                        .trim()
                        .parse::<usize>()
                        .with_context(|| format!("row {}: bad label `{field}`", line + 1))?,
                );
            } else {
                values.push(
                    field
                        .trim()
                        .parse::<f64>()
                        .with_context(|| format!("row {}: bad value `{field}`", line + 1))?,
                );
            }
        }
    }
    let x = Array2::from_shape_vec((labels.len(), headers.len() - 1), values)?;
    Ok(Dataset { x, labels })
}

/// Training (`train = true`) or held-out split per the config, normalized
/// and truncated. `None` when the split is not configured.
pub fn load_split(cfg: &RunConfig, train: bool) -> Result<Option<Dataset>> {
    let (mut data, default_norm) = match cfg.dataset_format {
        DatasetFormat::MnistIdx => {
            let (images, labels) = if train {
                (&cfg.train_images, &cfg.train_labels)
            } else {
                (&cfg.test_images, &cfg.test_labels)
            };
            match (images, labels) {
                (Some(i), Some(l)) => (load_mnist(i, l)?, 255.0),
                (None, None) => return Ok(None),
                _ => bail!("idx datasets need both an image and a label file"),
            }
        }
        DatasetFormat::Csv => {
            let path = if train { &cfg.train_csv } else { &cfg.test_csv };
            match path {
                Some(p) => (load_csv(p, cfg.label_column.as_deref())?, 1.0),
                None => return Ok(None),
            }
        }
    };
    let norm = cfg.normalize.unwrap_or(default_norm);
    ensure!(norm > 0.0, "normalize must be positive");
    data.x.mapv_inplace(|v| v / norm);
    if let Some(limit) = if train { cfg.train_limit } else { cfg.test_limit } {
        data.truncate(limit);
    }
    Ok(Some(data))
}

fn split_sizes(total: usize, parts: usize) -> Vec<usize> {
    (0..parts)
        .map(|i| total / parts + usize::from(i < total % parts))
        .collect()
}

fn vertical_sources(cfg: &RunConfig, x: &Array2<f64>, labels: &[usize], rows: &[usize], first_id: usize) -> Vec<SourceData> {
    let holder = cfg.label_holder.unwrap_or(cfg.vertical_sources);
    let sub = x.select(Axis(0), rows);
    let ids: Vec<String> = rows.iter().map(|r| format!("sample-{r}")).collect();
    let mut offset = 0;
    split_sizes(x.ncols(), cfg.vertical_sources)
        .into_iter()
        .enumerate()
        .map(|(k, width)| {
            let slice = sub.slice(s![.., offset..offset + width]).to_owned();
            offset += width;
            let own = (k + 1 == holder).then(|| rows.iter().map(|&r| labels[r]).collect());
            let mut src = SourceData::new(first_id + k, DatasetType::Partial, slice, own);
            src.ids = Some(ids.clone());
            src
        })
        .collect()
}

/// Splits the training set into sources for the configured mode.
///
/// Rows are dealt after a seeded shuffle; vertical members receive
/// contiguous feature slices of near-equal width.
pub fn partition(cfg: &RunConfig, data: &Dataset) -> Result<Vec<SourceData>> {
    ensure!(!data.is_empty(), "empty training set");
    let mut rows: Vec<usize> = (0..data.len()).collect();
    rows.shuffle(&mut rand::rngs::StdRng::seed_from_u64(cfg.seed ^ 0x5eed));
    let deal = |parts: usize| {
        let mut at = 0;
        split_sizes(rows.len(), parts)
            .into_iter()
            .map(|n| {
                let chunk = rows[at..at + n].to_vec();
                at += n;
                chunk
            })
            .collect::<Vec<_>>()
    };
    let full = |id: usize, chunk: &[usize]| {
        SourceData::new(
            id,
            DatasetType::Full,
            data.x.select(Axis(0), chunk),
            Some(chunk.iter().map(|&r| data.labels[r]).collect()),
        )
    };
    let sources = match cfg.mode {
        TrainingMode::Hpt => deal(cfg.sources)
            .iter()
            .enumerate()
            .map(|(k, chunk)| full(k + 1, chunk))
            .collect(),
        TrainingMode::Vpt => {
            ensure!(cfg.vertical_sources <= data.x.ncols(), "more vertical sources than features");
            vertical_sources(cfg, &data.x, &data.labels, &rows, 1)
        }
        TrainingMode::Hybrid => {
            let chunks = deal(cfg.sources + 1);
            let mut out: Vec<SourceData> = chunks[..cfg.sources]
                .iter()
                .enumerate()
                .map(|(k, chunk)| full(k + 1, chunk))
                .collect();
            out.extend(vertical_sources(
                cfg,
                &data.x,
                &data.labels,
                &chunks[cfg.sources],
                cfg.sources + 1,
            ));
            out
        }
    };
    Ok(sources)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(count: u32, rows: u32, cols: u32, fill: usize) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [IMAGES_MAGIC, count, rows, cols] {
            b.extend(v.to_be_bytes());
        }
        b.extend((0..fill).map(|i| (i % 256) as u8));
        b
    }

    #[test]
    fn idx_parsing() {
        let x = parse_idx_images(&idx_images(2, 2, 2, 8)).unwrap();
        assert_eq!(x.dim(), (2, 4));
        assert_eq!(x[[1, 3]], 7.0);
        assert!(parse_idx_images(&idx_images(2, 2, 2, 7)).is_err());
        assert!(parse_idx_images(&idx_images(2, 2, 2, 8)[..10]).is_err());
        let mut wrong = idx_images(1, 1, 1, 1);
        wrong[3] = 0x01;
        assert!(parse_idx_images(&wrong).is_err());

        let mut labels = Vec::new();
        labels.extend(LABELS_MAGIC.to_be_bytes());
        labels.extend(3u32.to_be_bytes());
        labels.extend([7, 0, 9]);
        assert_eq!(parse_idx_labels(&labels).unwrap(), vec![7, 0, 9]);
        assert!(parse_idx_labels(&labels[..10]).is_err());
        assert!(parse_idx_images(&labels).is_err());
    }

    #[test]
    fn csv_with_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        std::fs::write(&path, "a,b,label\n2,0.2,1\n3,0.4,0\n4,0.6,1\n").unwrap();
        let d = load_csv(&path, None).unwrap();
        assert_eq!(d.x.dim(), (3, 2));
        assert_eq!(d.labels, vec![1, 0, 1]);
        let d = load_csv(&path, Some("a")).unwrap();
        assert_eq!(d.labels, vec![2, 3, 4]);
        assert_eq!(d.x.row(0).to_vec(), vec![0.2, 1.0]);
        assert!(load_csv(&path, Some("b")).is_err());
        assert!(load_csv(&path, Some("zzz")).is_err());
    }

    fn toy_config(mode: &str) -> RunConfig {
        RunConfig::from_toml(&format!(
            "mode = \"{mode}\"\narch = [6, 3, 2]\nsources = 2\nvertical_sources = 3\nbatch_size = 2"
        ))
        .unwrap()
    }

    fn toy_data() -> Dataset {
        Dataset {
            x: Array2::from_shape_fn((9, 6), |(i, j)| (i * 6 + j) as f64 / 100.0),
            labels: (0..9).map(|i| i % 2).collect(),
        }
    }

    #[test]
    fn partitions() {
        let data = toy_data();
        let hpt = partition(&toy_config("hpt"), &data).unwrap();
        assert_eq!(hpt.iter().map(|s| s.x.nrows()).collect::<Vec<_>>(), [5, 4]);
        assert!(hpt.iter().all(|s| s.meta.has_labels && s.x.ncols() == 6));

        let vpt = partition(&toy_config("vpt"), &data).unwrap();
        assert_eq!(vpt.iter().map(|s| s.x.ncols()).collect::<Vec<_>>(), [2, 2, 2]);
        assert_eq!(vpt.iter().filter(|s| s.meta.has_labels).count(), 1);
        assert!(vpt[2].meta.has_labels);

        let hybrid = partition(&toy_config("hybrid"), &data).unwrap();
        assert_eq!(hybrid.len(), 5);
        assert_eq!(hybrid[0].meta.dataset_type, DatasetType::Full);
        assert_eq!(hybrid[4].meta.source_id, 5);
        assert_eq!(hybrid[4].x.nrows(), 3);
        let total: usize = hybrid[..2].iter().map(|s| s.x.nrows()).sum::<usize>() + hybrid[2].x.nrows();
        assert_eq!(total, 9);
    }
}
