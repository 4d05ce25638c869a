//! MNIST IDX ingestion.
//!
//! Both raw and gzip-compressed IDX files are accepted; compression is
//! detected from the gzip magic bytes, not the file extension.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use ndarray::{Array2, Axis};

use crate::error::{Error, Result};
use crate::model::Batch;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;
pub const NUM_CLASSES: usize = 10;

/// Images with pixel values in `[0, 1]`, one flattened image per row.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Array2<f64>,
    labels: Vec<u8>,
    name: String,
}

impl Dataset {
    pub fn new(images: Array2<f64>, labels: Vec<u8>, name: impl Into<String>) -> Result<Self> {
        if images.nrows() != labels.len() {
            return Err(Error::CountMismatch {
                images: images.nrows(),
                labels: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
            return Err(Error::OutOfRange {
                what: "label",
                value: bad as f64,
                limit: (NUM_CLASSES - 1) as f64,
            });
        }
        Ok(Self {
            images,
            labels,
            name: name.into(),
        })
    }

    pub fn images(&self) -> &Array2<f64> {
        &self.images
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.images.ncols()
    }

    /// The first `n` samples in file order.
    pub fn subset(&self, n: usize) -> Result<Dataset> {
        if n > self.len() {
            return Err(Error::OutOfRange {
                what: "subset size",
                value: n as f64,
                limit: self.len() as f64,
            });
        }
        Ok(Dataset {
            images: self.images.slice(ndarray::s![..n, ..]).to_owned(),
            labels: self.labels[..n].to_vec(),
            name: format!("{}[..{n}]", self.name),
        })
    }

    pub fn one_hot(&self) -> Array2<f64> {
        let mut t = Array2::zeros((self.len(), NUM_CLASSES));
        for (i, &l) in self.labels.iter().enumerate() {
            t[[i, l as usize]] = 1.0;
        }
        t
    }

    /// The whole dataset as one batch with one-hot targets.
    pub fn to_batch(&self) -> Result<Batch> {
        Batch::new(self.images.clone(), self.one_hot())
    }

    pub fn batch_of(&self, indices: &[usize]) -> Result<Batch> {
        let images = self.images.select(Axis(0), indices);
        let mut targets = Array2::zeros((indices.len(), NUM_CLASSES));
        for (row, &i) in indices.iter().enumerate() {
            targets[[row, self.labels[i] as usize]] = 1.0;
        }
        Batch::new(images, targets)
    }
}

fn read_maybe_gzip(path: &Path) -> Result<Vec<u8>> {
    let io_err = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let raw = fs::read(path).map_err(io_err)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(io_err)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

struct IdxHeader<'a> {
    dims: Vec<usize>,
    body: &'a [u8],
}

fn parse_idx<'a>(bytes: &'a [u8], path: &Path, magic: u32, ndims: usize) -> Result<IdxHeader<'a>> {
    let header_len = 4 + 4 * ndims;
    if bytes.len() < 4 {
        return Err(Error::TruncatedFile {
            path: path.to_path_buf(),
            needed: 4,
            found: bytes.len(),
        });
    }
    let be = |off: usize| u32::from_be_bytes(bytes[off..off + 4].try_into().expect("4 bytes"));
    let found = be(0);
    if found != magic {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: magic,
            found,
        });
    }
    if bytes.len() < header_len {
        return Err(Error::TruncatedFile {
            path: path.to_path_buf(),
            needed: header_len,
            found: bytes.len(),
        });
    }
    let dims: Vec<usize> = (0..ndims).map(|i| be(4 + 4 * i) as usize).collect();
    let needed = header_len + dims.iter().product::<usize>();
    if bytes.len() < needed {
        return Err(Error::TruncatedFile {
            path: path.to_path_buf(),
            needed,
            found: bytes.len(),
        });
    }
    Ok(IdxHeader {
        dims,
        body: &bytes[header_len..needed],
    })
}

/// Loads an IDX image file and its label file. Pixels are scaled by 1/255.
pub fn load_mnist_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    load_mnist_idx_prefix(images_path, labels_path, usize::MAX)
}

/// Like [`load_mnist_idx`] but keeps only the first `limit` samples, so
/// small subsets never materialize the whole file as floats. Header counts
/// are still validated against each other.
pub fn load_mnist_idx_prefix(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    limit: usize,
) -> Result<Dataset> {
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();

    let image_bytes = read_maybe_gzip(images_path)?;
    let images = parse_idx(&image_bytes, images_path, IMAGES_MAGIC, 3)?;
    let label_bytes = read_maybe_gzip(labels_path)?;
    let labels = parse_idx(&label_bytes, labels_path, LABELS_MAGIC, 1)?;

    let (count, rows, cols) = (images.dims[0], images.dims[1], images.dims[2]);
    if count != labels.dims[0] {
        return Err(Error::CountMismatch {
            images: count,
            labels: labels.dims[0],
        });
    }
    if limit == 0 {
        return Err(Error::OutOfRange {
            what: "subset size",
            value: 0.0,
            limit: count as f64,
        });
    }
    let keep = count.min(limit);
    let dim = rows * cols;
    let pixels: Vec<f64> = images.body[..keep * dim].iter().map(|&p| p as f64 / 255.0).collect();
    let images = Array2::from_shape_vec((keep, dim), pixels).map_err(|e| Error::shape(e.to_string()))?;
    let name = images_path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Dataset::new(images, labels.body[..keep].to_vec(), name)
}

/// Standard MNIST file names under a root directory, preferring the
/// uncompressed variant when both exist.
pub fn mnist_paths(root: &Path, train: bool) -> (PathBuf, PathBuf) {
    let prefix = if train { "train" } else { "t10k" };
    let pick = |stem: String| {
        let raw = root.join(&stem);
        if raw.exists() {
            raw
        } else {
            root.join(format!("{stem}.gz"))
        }
    };
    (
        pick(format!("{prefix}-images-idx3-ubyte")),
        pick(format!("{prefix}-labels-idx1-ubyte")),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use flate2::write::GzEncoder;
    use flate2::Compression;
    use std::io::Write;

    fn idx(magic: u32, dims: &[u32], body: &[u8]) -> Vec<u8> {
        let mut out = magic.to_be_bytes().to_vec();
        for d in dims {
            out.extend_from_slice(&d.to_be_bytes());
        }
        out.extend_from_slice(body);
        out
    }

    fn write(dir: &Path, name: &str, bytes: &[u8]) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, bytes).unwrap();
        p
    }

    fn tiny_files(dir: &Path) -> (PathBuf, PathBuf) {
        let pixels: Vec<u8> = (0..12).map(|i| (i * 20) as u8).collect();
        let img = write(dir, "img", &idx(IMAGES_MAGIC, &[3, 2, 2], &pixels));
        let lbl = write(dir, "lbl", &idx(LABELS_MAGIC, &[3], &[7, 0, 9]));
        (img, lbl)
    }

    #[test]
    fn loads_raw_idx() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lbl) = tiny_files(dir.path());
        let ds = load_mnist_idx(&img, &lbl).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.dim(), 4);
        assert_eq!(ds.labels(), &[7, 0, 9]);
        assert_eq!(ds.images()[[1, 0]], 80.0 / 255.0);
        assert!(ds.images().iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn loads_gzip_idx() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lbl) = tiny_files(dir.path());
        let gz = |p: &Path| {
            let mut enc = GzEncoder::new(Vec::new(), Compression::default());
            enc.write_all(&fs::read(p).unwrap()).unwrap();
            enc.finish().unwrap()
        };
        let img_gz = write(dir.path(), "img.gz", &gz(&img));
        let lbl_gz = write(dir.path(), "lbl.gz", &gz(&lbl));
        let (a, b) = (load_mnist_idx(&img_gz, &lbl_gz).unwrap(), load_mnist_idx(&img, &lbl).unwrap());
        assert_eq!(a.images(), b.images());
        assert_eq!(a.labels(), b.labels());
    }

    #[test]
    fn wrong_file_is_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let (img, _) = tiny_files(dir.path());
        // images file passed as labels
        let err = load_mnist_idx(&img, &img).unwrap_err();
        assert!(matches!(
            err,
            Error::BadMagic {
                expected: LABELS_MAGIC,
                found: IMAGES_MAGIC,
                ..
            }
        ));
    }

    #[test]
    fn truncated_and_mismatched_files() {
        let dir = tempfile::tempdir().unwrap();
        let img = write(dir.path(), "short", &idx(IMAGES_MAGIC, &[3, 2, 2], &[0; 5]));
        let lbl = write(dir.path(), "lbl", &idx(LABELS_MAGIC, &[3], &[1, 2, 3]));
        assert!(matches!(
            load_mnist_idx(&img, &lbl),
            Err(Error::TruncatedFile { needed: 28, .. })
        ));

        let img = write(dir.path(), "img2", &idx(IMAGES_MAGIC, &[2, 1, 1], &[0, 255]));
        assert!(matches!(
            load_mnist_idx(&img, &lbl),
            Err(Error::CountMismatch { images: 2, labels: 3 })
        ));

        let stub = write(dir.path(), "stub", &[0, 0]);
        assert!(matches!(
            load_mnist_idx(&stub, &lbl),
            Err(Error::TruncatedFile { .. })
        ));
    }

    #[test]
    fn prefix_load_matches_subset() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lbl) = tiny_files(dir.path());
        let two = load_mnist_idx_prefix(&img, &lbl, 2).unwrap();
        let full = load_mnist_idx(&img, &lbl).unwrap();
        assert_eq!(two.images(), full.subset(2).unwrap().images());
        assert_eq!(two.labels(), &[7, 0]);
        assert_eq!(load_mnist_idx_prefix(&img, &lbl, 10).unwrap().len(), 3);
        assert!(load_mnist_idx_prefix(&img, &lbl, 0).is_err());
    }

    #[test]
    fn subset_is_prefix() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lbl) = tiny_files(dir.path());
        let ds = load_mnist_idx(&img, &lbl).unwrap();
        let two = ds.subset(2).unwrap();
        assert_eq!(two.labels(), &[7, 0]);
        assert_eq!(two.images().row(1), ds.images().row(1));
        assert_eq!(ds.subset(3).unwrap().images(), ds.images());
        assert_eq!(two.subset(1).unwrap().images(), ds.subset(1).unwrap().images());
        assert!(matches!(ds.subset(4), Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn batches_carry_one_hot_targets() {
        let ds = Dataset::new(Array2::zeros((2, 3)), vec![4, 1], "t").unwrap();
        let b = ds.batch_of(&[1, 0]).unwrap();
        assert_eq!(b.targets()[[0, 1]], 1.0);
        assert_eq!(b.targets()[[1, 4]], 1.0);
        assert_eq!(b.targets().sum(), 2.0);
        assert!(Dataset::new(Array2::zeros((1, 3)), vec![10], "t").is_err());
    }
}
