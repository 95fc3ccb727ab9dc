//! Dataset ingestion: IDX image/label pairs and numeric CSV files.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

/// Inputs `[N × sample_shape…]` with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    pub inputs: Tensor<T>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(inputs: Tensor<T>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if inputs.rank() < 2 || inputs.shape()[0] != labels.len() {
            return Err(Error::Dataset(format!("{} labels for inputs {:?}", labels.len(), inputs.shape())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Dataset(format!("label {bad} outside {classes} classes")));
        }
        Ok(Dataset { inputs, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    pub fn select(&self, rows: &[usize]) -> Result<Self> {
        Ok(Dataset {
            inputs: self.inputs.gather_rows(rows)?,
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            classes: self.classes,
        })
    }

    pub fn range(&self, start: usize, end: usize) -> Result<Self> {
        Ok(Dataset {
            inputs: self.inputs.slice_rows(start, end)?,
            labels: self.labels[start..end].to_vec(),
            classes: self.classes,
        })
    }

    pub fn cast<U: Scalar>(&self) -> Dataset<U> {
        Dataset { inputs: self.inputs.cast(), labels: self.labels.clone(), classes: self.classes }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits<T> {
    pub train: Dataset<T>,
    pub val: Dataset<T>,
    pub test: Dataset<T>,
}

impl<T: Scalar> Splits<T> {
    /// Train/validation from the head/tail of `train_full`, test as given.
    pub fn holdout_tail(train_full: &Dataset<T>, validation: usize, test: Dataset<T>) -> Result<Self> {
        let n = train_full.len();
        if validation == 0 || validation >= n {
            return Err(Error::Config(format!("validation size {validation} for {n} training items")));
        }
        Ok(Splits { train: train_full.range(0, n - validation)?, val: train_full.range(n - validation, n)?, test })
    }

    /// Seeded shuffle, then consecutive train/validation/test blocks.
    pub fn shuffled(data: &Dataset<T>, val_fraction: f64, test_fraction: f64, seed: u64) -> Result<Self> {
        if !(val_fraction > 0.0 && test_fraction > 0.0 && val_fraction + test_fraction < 1.0) {
            return Err(Error::Config(format!("split fractions {val_fraction}/{test_fraction}")));
        }
        let n = data.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_val = (n as f64 * val_fraction).round() as usize;
        let n_test = (n as f64 * test_fraction).round() as usize;
        let n_train = n.saturating_sub(n_val + n_test);
        if n_val == 0 {
            return Err(Error::EmptySplit("validation"));
        }
        if n_test == 0 {
            return Err(Error::EmptySplit("test"));
        }
        if n_train == 0 {
            return Err(Error::EmptySplit("train"));
        }
        Ok(Splits {
            train: data.select(&order[..n_train])?,
            val: data.select(&order[n_train..n_train + n_val])?,
            test: data.select(&order[n_train + n_val..])?,
        })
    }

    pub fn check_nonempty(&self) -> Result<()> {
        for (name, d) in [("train", &self.train), ("validation", &self.val), ("test", &self.test)] {
            if d.is_empty() {
                return Err(Error::EmptySplit(name));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DataSource {
    Idx { images: PathBuf, labels: PathBuf },
    Csv { path: PathBuf, label_column: String },
}

/// A loaded dataset with where it came from; CSV sources also keep the
/// original label strings in class-index order.
#[derive(Clone, Debug)]
pub struct DatasetHandle<T> {
    pub source: DataSource,
    pub data: Dataset<T>,
    pub class_names: Vec<String>,
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("four bytes")))
        .ok_or_else(|| Error::format(offset as u64, "truncated header"))
}

/// Parses IDX image bytes into `[N × 1 × rows × cols]` scaled by `1/255`.
pub fn parse_idx_images<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES {
        return Err(Error::format(0, format!("bad image magic {magic:#010x}, expected {IDX_IMAGES:#010x}")));
    }
    let (n, rows, cols) = (be_u32(bytes, 4)? as usize, be_u32(bytes, 8)? as usize, be_u32(bytes, 12)? as usize);
    let need = n * rows * cols;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(Error::format(
            bytes.len() as u64,
            format!("truncated image data: {need} bytes expected after the header, {} present", body.len()),
        ));
    }
    let data = body[..need].iter().map(|&b| T::narrow(b as f64 / 255.0)).collect();
    Tensor::new(vec![n, 1, rows, cols], data)
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS {
        return Err(Error::format(0, format!("bad label magic {magic:#010x}, expected {IDX_LABELS:#010x}")));
    }
    let n = be_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(Error::format(
            bytes.len() as u64,
            format!("truncated label data: {n} bytes expected after the header, {} present", body.len()),
        ));
    }
    Ok(body[..n].iter().map(|&b| b as usize).collect())
}

/// Loads an IDX image/label pair. Classes are `max label + 1` (at least 10).
pub fn load_idx<T: Scalar>(images: &Path, labels: &Path) -> Result<DatasetHandle<T>> {
    let inputs = parse_idx_images::<T>(&read(images)?)?;
    let labels_v = parse_idx_labels(&read(labels)?)?;
    if inputs.shape()[0] != labels_v.len() {
        return Err(Error::Dataset(format!("{} images but {} labels", inputs.shape()[0], labels_v.len())));
    }
    let classes = labels_v.iter().max().map_or(0, |&m| m + 1).max(10);
    Ok(DatasetHandle {
        source: DataSource::Idx { images: images.to_path_buf(), labels: labels.to_path_buf() },
        data: Dataset::new(inputs, labels_v, classes)?,
        class_names: (0..classes).map(|c| c.to_string()).collect(),
    })
}

/// The standard MNIST file names inside `dir`.
pub fn mnist_files(dir: &Path, train: bool) -> (PathBuf, PathBuf) {
    let prefix = if train { "train" } else { "t10k" };
    (dir.join(format!("{prefix}-images-idx3-ubyte")), dir.join(format!("{prefix}-labels-idx1-ubyte")))
}

/// MNIST with the last `validation` training images held out.
pub fn load_mnist<T: Scalar>(dir: &Path, validation: usize) -> Result<Splits<T>> {
    let (ti, tl) = mnist_files(dir, true);
    let (si, sl) = mnist_files(dir, false);
    let train = load_idx::<T>(&ti, &tl)?.data;
    let test = load_idx::<T>(&si, &sl)?.data;
    Splits::holdout_tail(&train, validation, test)
}

/// Loads a numeric CSV. `label_column` is a header name or a zero-based
/// index. Feature columns are z-scored with `σ` floored at `1e-8`; labels
/// are numbered in order of first appearance.
pub fn load_csv<T: Scalar>(path: &Path, label_column: &str, has_header: bool) -> Result<DatasetHandle<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let (data, class_names) = parse_csv(&text, label_column, has_header)?;
    Ok(DatasetHandle {
        source: DataSource::Csv { path: path.to_path_buf(), label_column: label_column.to_string() },
        data,
        class_names,
    })
}

pub fn parse_csv<T: Scalar>(text: &str, label_column: &str, has_header: bool) -> Result<(Dataset<T>, Vec<String>)> {
    let mut reader = csv::ReaderBuilder::new().has_headers(has_header).flexible(true).from_reader(text.as_bytes());
    let headers: Option<Vec<String>> =
        if has_header { Some(reader.headers()?.iter().map(|h| h.trim().to_string()).collect()) } else { None };
    let mut rows: Vec<Vec<String>> = Vec::new();
    for record in reader.records() {
        let record = record?;
        if record.iter().all(|c| c.trim().is_empty()) {
            continue;
        }
        rows.push(record.iter().map(|c| c.trim().to_string()).collect());
    }
    let width = headers.as_ref().map_or_else(|| rows.first().map_or(0, |r| r.len()), |h| h.len());
    if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != width) {
        return Err(Error::Dataset(format!("row {} has {} cells, expected {width}", i + 1, r.len())));
    }
    if rows.is_empty() || width < 2 {
        return Err(Error::Dataset("need at least one row with a label and a feature".into()));
    }
    let label_idx = match (&headers, label_column.parse::<usize>()) {
        (Some(h), _) if h.iter().any(|c| c == label_column) => h.iter().position(|c| c == label_column).unwrap(),
        (_, Ok(i)) if i < width => i,
        _ => return Err(Error::Dataset(format!("unknown label column `{label_column}`"))),
    };

    let mut class_names: Vec<String> = Vec::new();
    let mut class_of: HashMap<String, usize> = HashMap::new();
    let mut labels = Vec::with_capacity(rows.len());
    let features = width - 1;
    let mut values = vec![0.0f64; rows.len() * features];
    for (i, row) in rows.iter().enumerate() {
        let label = &row[label_idx];
        let next = class_names.len();
        let id = *class_of.entry(label.clone()).or_insert_with(|| {
            class_names.push(label.clone());
            next
        });
        labels.push(id);
        for (j, cell) in row.iter().enumerate().filter(|&(j, _)| j != label_idx).map(|(j, c)| (j - (j > label_idx) as usize, c)) {
            let v: f64 = cell
                .parse()
                .ok()
                .filter(|v: &f64| v.is_finite())
                .ok_or_else(|| Error::Dataset(format!("row {} column {}: `{cell}` is not a number", i + 1, j + 1)))?;
            values[i * features + j] = v;
        }
    }
    let n = rows.len() as f64;
    for j in 0..features {
        let mean = (0..rows.len()).map(|i| values[i * features + j]).sum::<f64>() / n;
        let var = (0..rows.len()).map(|i| (values[i * features + j] - mean).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt().max(1e-8);
        for i in 0..rows.len() {
            values[i * features + j] = (values[i * features + j] - mean) / sd;
        }
    }
    let inputs = Tensor::from_fn(&[rows.len(), features], |i| T::narrow(values[i]));
    let classes = class_names.len();
    Ok((Dataset::new(inputs, labels, classes)?, class_names))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(n: u32, rows: u32, cols: u32, fill: u8) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [IDX_IMAGES, n, rows, cols] {
            b.extend(v.to_be_bytes());
        }
        b.extend(std::iter::repeat(fill).take((n * rows * cols) as usize));
        b
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend(IDX_LABELS.to_be_bytes());
        b.extend((labels.len() as u32).to_be_bytes());
        b.extend(labels);
        b
    }

    #[test]
    fn zero_images_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
        std::fs::write(&ip, idx_images(10, 28, 28, 0)).unwrap();
        std::fs::write(&lp, idx_labels(&[0, 1, 2, 3, 4, 5, 6, 7, 8, 9])).unwrap();
        let h = load_idx::<f32>(&ip, &lp).unwrap();
        assert_eq!(h.data.inputs.shape(), &[10, 1, 28, 28]);
        assert!(h.data.inputs.data().iter().all(|&v| v == 0.0));
        assert_eq!(h.data.labels[9], 9);
    }

    #[test]
    fn pixels_are_scaled() {
        let t = parse_idx_images::<f32>(&idx_images(1, 2, 2, 255)).unwrap();
        assert!(t.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn corrupted_magic_names_offset() {
        let mut b = idx_images(1, 2, 2, 0);
        b[3] = 0x01;
        let err = parse_idx_images::<f32>(&b).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 0, .. }));
        assert!(err.to_string().contains("offset 0"));
    }

    #[test]
    fn truncated_files_are_rejected() {
        let b = idx_images(2, 2, 2, 0);
        assert!(matches!(parse_idx_images::<f32>(&b[..10]), Err(Error::Format { offset: 8, .. })));
        assert!(matches!(parse_idx_images::<f32>(&b[..b.len() - 1]), Err(Error::Format { .. })));
        assert!(parse_idx_labels(&idx_labels(&[1, 2])[..9]).is_err());
    }

    #[test]
    fn count_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
        std::fs::write(&ip, idx_images(3, 2, 2, 0)).unwrap();
        std::fs::write(&lp, idx_labels(&[0, 1])).unwrap();
        assert!(matches!(load_idx::<f32>(&ip, &lp), Err(Error::Dataset(_))));
    }

    #[test]
    fn csv_labels_in_first_appearance_order() {
        let (d, names) = parse_csv::<f64>("a,b,y\n1,2,cat\n3,4,dog\n5,6,cat\n", "y", true).unwrap();
        assert_eq!(d.labels, vec![0, 1, 0]);
        assert_eq!(names, vec!["cat", "dog"]);
        assert_eq!(d.inputs.shape(), &[3, 2]);
        let col0: Vec<f64> = (0..3).map(|i| d.inputs.data()[i * 2]).collect();
        assert!((col0.iter().sum::<f64>()).abs() < 1e-12);
        assert!((col0[2] - 1.224744871391589).abs() < 1e-12);
    }

    #[test]
    fn csv_constant_column_becomes_zero() {
        let (d, _) = parse_csv::<f64>("7,1,0\n7,2,1\n7,3,1\n", "2", false).unwrap();
        assert!((0..3).all(|i| d.inputs.data()[i * 2] == 0.0));
    }

    #[test]
    fn csv_errors() {
        assert!(parse_csv::<f64>("1,2,0\n1,0\n", "2", false).is_err());
        assert!(parse_csv::<f64>("1,x,0\n", "2", false).is_err());
        assert!(parse_csv::<f64>("a,b\n1,0\n", "label", true).is_err());
        assert!(parse_csv::<f64>("1,0\n", "5", false).is_err());
    }

    #[test]
    fn shuffled_splits_partition_the_data() {
        let (d, _) = parse_csv::<f64>(&(0..100).map(|i| format!("{i},{}\n", i % 2)).collect::<String>(), "1", false).unwrap();
        let s = Splits::shuffled(&d, 0.2, 0.2, 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (60, 20, 20));
        let mut seen: Vec<f64> = [&s.train, &s.val, &s.test].iter().flat_map(|d| d.inputs.data().to_vec()).collect();
        seen.sort_by(f64::total_cmp);
        seen.dedup();
        assert_eq!(seen.len(), 100);
    }
}
