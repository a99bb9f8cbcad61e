//! Loading and preparing the benchmark datasets from local files.
//!
//! Nothing here touches the network. `scripts/fetch_datasets.py` documents
//! where each file comes from and writes it into `data/` in the layout the
//! loaders expect.

use std::collections::BTreeSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Features, contiguous labels and a record of how the data was produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawDataset {
    pub name: String,
    pub x: Matrix,
    /// Labels in `0..num_classes()`.
    pub y: Vec<usize>,
    /// Original label value of every class index, ascending.
    pub class_values: Vec<i64>,
    pub provenance: Vec<String>,
}

impl RawDataset {
    pub fn new(name: impl Into<String>, x: Matrix, raw_labels: &[i64]) -> Result<Self> {
        let name = name.into();
        if x.rows() != raw_labels.len() {
            return Err(Error::Dimension(format!(
                "{name}: {} feature rows but {} labels",
                x.rows(),
                raw_labels.len()
            )));
        }
        if x.is_empty() {
            return Err(Error::Data(format!("{name}: dataset is empty")));
        }
        if !x.all_finite() {
            return Err(Error::Data(format!("{name}: features contain NaN or infinite values")));
        }
        let class_values: Vec<i64> = raw_labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
        let y = raw_labels
            .iter()
            .map(|v| class_values.binary_search(v).expect("value collected above"))
            .collect();
        Ok(Self {
            name,
            x,
            y,
            class_values,
            provenance: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn num_features(&self) -> usize {
        self.x.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.class_values.len()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        self.y.iter().for_each(|&c| counts[c] += 1);
        counts
    }

    fn subset(&self, rows: &[usize]) -> Result<Self> {
        let raw: Vec<i64> = rows.iter().map(|&i| self.class_values[self.y[i]]).collect();
        let mut out = Self::new(self.name.clone(), self.x.select_rows(rows), &raw)?;
        out.provenance = self.provenance.clone();
        Ok(out)
    }
}

/// Column separator of a text data file.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Delimiter {
    Comma,
    Tab,
    Semicolon,
    /// Any run of spaces or tabs.
    Whitespace,
}

/// Where the target lives in each row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelColumn {
    First,
    Last,
    Index(usize),
    /// The last `n` columns are a one-hot (or multi-hot) encoding.
    OneHotTail(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub delimiter: Delimiter,
    pub has_header: bool,
    pub label: LabelColumn,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            delimiter: Delimiter::Comma,
            has_header: true,
            label: LabelColumn::Last,
        }
    }
}

fn open_maybe_gz(path: &Path) -> Result<Box<dyn Read>> {
    let mut file = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut magic = [0u8; 2];
    let n = file
        .read(&mut magic)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let head = std::io::Cursor::new(magic[..n].to_vec());
    let chained = head.chain(file);
    if n == 2 && magic == [0x1f, 0x8b] {
        Ok(Box::new(GzDecoder::new(chained)))
    } else {
        Ok(Box::new(chained))
    }
}

fn file_digest(path: &Path) -> Result<String> {
    let mut file = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut hasher = Sha256::new();
    std::io::copy(&mut file, &mut hasher).map_err(|e| Error::io(format!("hashing {}", path.display()), e))?;
    let digest = hasher.finalize();
    Ok(digest.iter().take(8).map(|b| format!("{b:02x}")).collect())
}

fn split_fields(line: &str, delimiter: Delimiter) -> Vec<&str> {
    match delimiter {
        Delimiter::Whitespace => line.split_whitespace().collect(),
        Delimiter::Comma => line.split(',').map(str::trim).collect(),
        Delimiter::Tab => line.split('\t').map(str::trim).collect(),
        Delimiter::Semicolon => line.split(';').map(str::trim).collect(),
    }
}

/// Parses a delimited text file (optionally gzip-compressed) into a dataset.
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<RawDataset> {
    let reader = BufReader::new(open_maybe_gz(path)?);
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };

    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut width: Option<usize> = None;
    let mut ties = 0usize;

    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        if (schema.has_header && i == 0) || line.trim().is_empty() {
            continue;
        }
        let fields = split_fields(&line, schema.delimiter);
        match width {
            None => width = Some(fields.len()),
            Some(w) if w != fields.len() => {
                return Err(parse_err(lineno, format!("expected {w} fields, found {}", fields.len())));
            }
            _ => {}
        }
        let values = fields
            .iter()
            .enumerate()
            .map(|(col, f)| {
                f.parse::<f64>()
                    .map_err(|_| parse_err(lineno, format!("column {}: {f:?} is not a number", col + 1)))
            })
            .collect::<Result<Vec<f64>>>()?;

        let n = values.len();
        let label_of = |v: f64| -> Result<i64> {
            if v.fract() != 0.0 || !v.is_finite() {
                return Err(parse_err(lineno, format!("label {v} is not an integer")));
            }
            Ok(v as i64)
        };
        match schema.label {
            LabelColumn::OneHotTail(k) => {
                if k == 0 || k >= n {
                    return Err(parse_err(lineno, format!("cannot take {k} target columns from {n} fields")));
                }
                let (x, t) = values.split_at(n - k);
                let (label, tie) = onehot_row(t).map_err(|m| parse_err(lineno, m))?;
                ties += usize::from(tie);
                labels.push(label as i64);
                features.extend(x.iter().map(|&v| v as f32));
            }
            column => {
                let c = match column {
                    LabelColumn::First => 0,
                    LabelColumn::Last => n - 1,
                    LabelColumn::Index(c) => c,
                    LabelColumn::OneHotTail(_) => unreachable!(),
                };
                if c >= n {
                    return Err(parse_err(lineno, format!("label column {c} out of range for {n} fields")));
                }
                labels.push(label_of(values[c])?);
                features.extend(
                    values
                        .iter()
                        .enumerate()
                        .filter(|&(j, _)| j != c)
                        .map(|(_, &v)| v as f32),
                );
            }
        }
    }

    if labels.is_empty() {
        return Err(Error::Data(format!("{}: no data rows", path.display())));
    }
    let d = features.len() / labels.len();
    let name = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("dataset")
        .trim_end_matches(".csv")
        .to_string();
    let mut ds = RawDataset::new(name, Matrix::new(labels.len(), d, features)?, &labels)?;
    ds.provenance.push(format!(
        "loaded {} rows from {} (sha256 {})",
        ds.len(),
        path.display(),
        file_digest(path)?
    ));
    if ties > 0 {
        ds.provenance
            .push(format!("{ties} rows had several active targets; lowest index kept"));
    }
    Ok(ds)
}

fn onehot_row(t: &[f64]) -> std::result::Result<(usize, bool), String> {
    let best = t
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    if !(best > 0.0) {
        return Err("target row has no active class".into());
    }
    let mut hits = t.iter().enumerate().filter(|(_, &v)| v == best).map(|(i, _)| i);
    let first = hits.next().expect("maximum is attained");
    Ok((first, hits.next().is_some()))
}

/// Converts one-hot target rows to class indices. Ties go to the lowest index.
pub fn onehot_to_index(targets: &Matrix) -> Result<Vec<usize>> {
    targets
        .iter_rows()
        .enumerate()
        .map(|(i, row)| {
            let row: Vec<f64> = row.iter().map(|&v| f64::from(v)).collect();
            onehot_row(&row)
                .map(|(c, _)| c)
                .map_err(|m| Error::Data(format!("row {i}: {m}")))
        })
        .collect()
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    open_maybe_gz(path)?
        .read_to_end(&mut buf)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    Ok(buf)
}

fn be_u32(buf: &[u8], offset: usize, path: &Path) -> Result<u32> {
    buf.get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Data(format!("{}: truncated IDX header", path.display())))
}

/// Reads an IDX image file and its label file. Pixels are scaled to `[0, 1]`.
pub fn load_idx_images(images_path: &Path, labels_path: &Path) -> Result<RawDataset> {
    let images = read_all(images_path)?;
    let labels = read_all(labels_path)?;

    let magic = be_u32(&images, 0, images_path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Data(format!(
            "{}: bad image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}",
            images_path.display()
        )));
    }
    let magic = be_u32(&labels, 0, labels_path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Data(format!(
            "{}: bad label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}",
            labels_path.display()
        )));
    }

    let n = be_u32(&images, 4, images_path)? as usize;
    let rows = be_u32(&images, 8, images_path)? as usize;
    let cols = be_u32(&images, 12, images_path)? as usize;
    let n_labels = be_u32(&labels, 4, labels_path)? as usize;
    if n != n_labels {
        return Err(Error::Data(format!("{n} images but {n_labels} labels")));
    }
    let pixels = rows * cols;
    let body = &images[16..];
    if body.len() < n * pixels {
        return Err(Error::Data(format!(
            "{}: truncated, expected {} pixel bytes, found {}",
            images_path.display(),
            n * pixels,
            body.len()
        )));
    }
    let label_body = &labels[8..];
    if label_body.len() < n {
        return Err(Error::Data(format!("{}: truncated label data", labels_path.display())));
    }

    let x = body[..n * pixels].iter().map(|&p| f32::from(p) / 255.0).collect();
    let y: Vec<i64> = label_body[..n].iter().map(|&l| i64::from(l)).collect();
    let mut ds = RawDataset::new("fashion_mnist", Matrix::new(n, pixels, x)?, &y)?;
    ds.provenance.push(format!(
        "loaded {n} images of {rows}x{cols} from {} (sha256 {}) and {} (sha256 {})",
        images_path.display(),
        file_digest(images_path)?,
        labels_path.display(),
        file_digest(labels_path)?
    ));
    Ok(ds)
}

/// Keeps the rows whose original label is in `keep` and remaps the labels to
/// `0..keep.len()` in ascending order of the original values.
pub fn filter_classes(ds: &RawDataset, keep: &[i64]) -> Result<RawDataset> {
    if keep.is_empty() {
        return Err(Error::Data("class filter keeps no classes".into()));
    }
    if let Some(missing) = keep.iter().find(|v| !ds.class_values.contains(v)) {
        return Err(Error::Data(format!(
            "{}: class {missing} does not occur (classes: {:?})",
            ds.name, ds.class_values
        )));
    }
    let rows: Vec<usize> = (0..ds.len())
        .filter(|&i| keep.contains(&ds.class_values[ds.y[i]]))
        .collect();
    let mut out = ds.subset(&rows)?;
    out.provenance
        .push(format!("kept classes {keep:?}: {} rows", out.len()));
    Ok(out)
}

/// Seeded stratified subsample of at most `cap` rows. Per-class quotas follow
/// the largest remainder method, so every class stays within one sample of
/// its proportional share. Selected rows keep their original order.
pub fn stratified_subsample(ds: &RawDataset, cap: usize, seed: u64) -> Result<RawDataset> {
    if cap >= ds.len() {
        return Ok(ds.clone());
    }
    if cap < ds.num_classes() {
        return Err(Error::Config(format!(
            "subsample cap {cap} is smaller than the {} classes",
            ds.num_classes()
        )));
    }
    let counts = ds.class_counts();
    let n = ds.len();
    let mut quotas: Vec<usize> = counts.iter().map(|&c| c * cap / n).collect();
    let mut remainders: Vec<(usize, usize)> = counts
        .iter()
        .enumerate()
        .map(|(k, &c)| (c * cap % n, k))
        .collect();
    remainders.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let short = cap - quotas.iter().sum::<usize>();
    for &(_, k) in remainders.iter().take(short) {
        quotas[k] += 1;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(cap);
    for (class, &quota) in quotas.iter().enumerate() {
        let mut members: Vec<usize> = (0..n).filter(|&i| ds.y[i] == class).collect();
        members.shuffle(&mut rng);
        rows.extend_from_slice(&members[..quota]);
    }
    rows.sort_unstable();
    let mut out = ds.subset(&rows)?;
    out.provenance.push(format!(
        "stratified subsample to {} rows (seed {seed})",
        out.len()
    ));
    Ok(out)
}

/// The benchmark suite.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Wine,
    BreastCancer,
    Covertype,
    FashionMnist,
    SteelPlatesFaults,
}

/// Size limits a prepared dataset must satisfy.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DatasetShape {
    pub max_rows: usize,
    /// `Some(n)` when the row count is fixed.
    pub exact_rows: Option<usize>,
    pub features: usize,
    pub classes: usize,
}

impl DatasetKind {
    pub const ALL: [DatasetKind; 5] = [
        DatasetKind::Wine,
        DatasetKind::BreastCancer,
        DatasetKind::Covertype,
        DatasetKind::FashionMnist,
        DatasetKind::SteelPlatesFaults,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Wine => "wine",
            DatasetKind::BreastCancer => "breast_cancer",
            DatasetKind::Covertype => "covertype",
            DatasetKind::FashionMnist => "fashion_mnist",
            DatasetKind::SteelPlatesFaults => "steel_plates_faults",
        }
    }

    /// File names looked up under the data directory when none are given.
    pub fn default_files(self) -> &'static [&'static str] {
        match self {
            DatasetKind::Wine => &["wine.csv"],
            DatasetKind::BreastCancer => &["breast_cancer.csv"],
            DatasetKind::Covertype => &["covtype.data.gz"],
            DatasetKind::FashionMnist => &["train-images-idx3-ubyte.gz", "train-labels-idx1-ubyte.gz"],
            DatasetKind::SteelPlatesFaults => &["Faults.NNA"],
        }
    }

    pub fn default_cap(self) -> Option<usize> {
        match self {
            DatasetKind::Covertype => Some(5000),
            DatasetKind::FashionMnist => Some(3000),
            _ => None,
        }
    }

    pub fn shape(self) -> DatasetShape {
        let (max_rows, exact_rows, features, classes) = match self {
            DatasetKind::Wine => (178, Some(178), 13, 3),
            DatasetKind::BreastCancer => (569, Some(569), 30, 2),
            DatasetKind::Covertype => (5000, None, 54, 3),
            DatasetKind::FashionMnist => (3000, None, 784, 3),
            DatasetKind::SteelPlatesFaults => (1941, Some(1941), 27, 7),
        };
        DatasetShape {
            max_rows,
            exact_rows,
            features,
            classes,
        }
    }

    fn schema(self) -> CsvSchema {
        match self {
            DatasetKind::Covertype => CsvSchema {
                delimiter: Delimiter::Comma,
                has_header: false,
                label: LabelColumn::Last,
            },
            DatasetKind::SteelPlatesFaults => CsvSchema {
                delimiter: Delimiter::Whitespace,
                has_header: false,
                label: LabelColumn::OneHotTail(7),
            },
            _ => CsvSchema::default(),
        }
    }

    /// Loads `files` and applies the class filter and subsampling of this
    /// dataset. `cap` overrides the default subsample size; a cap only ever
    /// shrinks the data.
    pub fn prepare(self, files: &[PathBuf], cap: Option<usize>, seed: u64) -> Result<RawDataset> {
        let expected = self.default_files().len();
        if files.len() != expected {
            return Err(Error::Config(format!(
                "{} needs {expected} input file(s), got {}",
                self.name(),
                files.len()
            )));
        }
        let mut ds = match self {
            DatasetKind::FashionMnist => load_idx_images(&files[0], &files[1])?,
            _ => load_csv(&files[0], &self.schema())?,
        };
        ds.name = self.name().to_string();
        match self {
            DatasetKind::Covertype => ds = filter_classes(&ds, &[1, 2, 3])?,
            DatasetKind::FashionMnist => ds = filter_classes(&ds, &[0, 1, 2])?,
            _ => {}
        }
        if let Some(cap) = cap.or(self.default_cap()) {
            ds = stratified_subsample(&ds, cap, seed)?;
        }
        self.check(&ds)?;
        Ok(ds)
    }

    fn check(self, ds: &RawDataset) -> Result<()> {
        let shape = self.shape();
        let rows_ok = match shape.exact_rows {
            Some(n) => ds.len() == n || ds.len() < n && ds.provenance.iter().any(|p| p.contains("subsample")),
            None => ds.len() <= shape.max_rows,
        };
        if !rows_ok || ds.num_features() != shape.features || ds.num_classes() != shape.classes {
            return Err(Error::Data(format!(
                "{} has {} rows, {} features and {} classes; expected {}{} rows, {} features and {} classes",
                self.name(),
                ds.len(),
                ds.num_features(),
                ds.num_classes(),
                if shape.exact_rows.is_some() { "" } else { "at most " },
                shape.max_rows,
                shape.features,
                shape.classes
            )));
        }
        Ok(())
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase().replace(['-', ' '], "_");
        let kind = match key.as_str() {
            "wine" => DatasetKind::Wine,
            "breast_cancer" | "breastcancer" | "wdbc" => DatasetKind::BreastCancer,
            "covertype" | "covtype" => DatasetKind::Covertype,
            "fashion_mnist" | "fashionmnist" => DatasetKind::FashionMnist,
            "steel_plates_faults" | "steelplatesfaults" | "steel" => DatasetKind::SteelPlatesFaults,
            _ => return Err(Error::Config(format!("unknown dataset {s:?}"))),
        };
        Ok(kind)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(dir: &Path, name: &str, content: &[u8]) -> PathBuf {
        let path = dir.join(name);
        File::create(&path).unwrap().write_all(content).unwrap();
        path
    }

    fn toy(labels: &[i64]) -> RawDataset {
        let x = Matrix::new(labels.len(), 1, (0..labels.len()).map(|i| i as f32).collect()).unwrap();
        RawDataset::new("toy", x, labels).unwrap()
    }

    #[test]
    fn csv_with_header_and_label_last() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "a.csv", b"f1,f2,target\n1.5,2,7\n3,4,5\n\n-1,0,7\n");
        let ds = load_csv(&p, &CsvSchema::default()).unwrap();
        assert_eq!(ds.x.shape(), (3, 2));
        assert_eq!(ds.x.row(0), &[1.5, 2.0]);
        assert_eq!(ds.class_values, vec![5, 7]);
        assert_eq!(ds.y, vec![1, 0, 1]);
        assert_eq!(ds.name, "a");
    }

    #[test]
    fn csv_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "bad.csv", b"a,b\n1,0\n1,x\n");
        match load_csv(&p, &CsvSchema::default()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
        let p = write(dir.path(), "ragged.csv", b"a,b\n1,0\n1,2,3\n");
        assert!(matches!(load_csv(&p, &CsvSchema::default()), Err(Error::Parse { line: 3, .. })));
        let p = write(dir.path(), "empty.csv", b"a,b\n");
        assert!(matches!(load_csv(&p, &CsvSchema::default()), Err(Error::Data(_))));
    }

    #[test]
    fn gzip_and_whitespace_onehot() {
        let dir = tempfile::tempdir().unwrap();
        let mut gz = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::default());
        gz.write_all(b"1 2\t0 1 0\n3  4 1 0 0\n5 6 0 1 1\n").unwrap();
        let p = write(dir.path(), "t.nna.gz", &gz.finish().unwrap());
        let schema = CsvSchema {
            delimiter: Delimiter::Whitespace,
            has_header: false,
            label: LabelColumn::OneHotTail(3),
        };
        let ds = load_csv(&p, &schema).unwrap();
        assert_eq!(ds.x.shape(), (3, 2));
        assert_eq!(ds.y, vec![1, 0, 1]);
        assert!(ds.provenance.iter().any(|p| p.contains("lowest index")));
    }

    #[test]
    fn onehot_conversion() {
        let t = Matrix::new(3, 4, vec![0., 0., 0., 1., 1., 0., 0., 0., 0., 1., 1., 0.]).unwrap();
        assert_eq!(onehot_to_index(&t).unwrap(), vec![3, 0, 1]);
        let zero = Matrix::new(1, 2, vec![0.0, 0.0]).unwrap();
        assert!(onehot_to_index(&zero).is_err());
    }

    fn idx_files(dir: &Path, images: &[u8], n: u32, labels: &[u8]) -> (PathBuf, PathBuf) {
        let mut img = vec![];
        img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        img.extend_from_slice(&n.to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        img.extend_from_slice(images);
        let mut lab = vec![];
        lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        lab.extend_from_slice(&n.to_be_bytes());
        lab.extend_from_slice(labels);
        (write(dir, "img.idx", &img), write(dir, "lab.idx", &lab))
    }

    #[test]
    fn idx_images_are_flattened_and_scaled() {
        let dir = tempfile::tempdir().unwrap();
        let (i, l) = idx_files(dir.path(), &[0, 0, 0, 0, 255, 0, 51, 255], 2, &[3, 1]);
        let ds = load_idx_images(&i, &l).unwrap();
        assert_eq!(ds.x.shape(), (2, 4));
        assert_eq!(ds.x.row(0), &[0.0; 4]);
        assert_eq!(ds.x.row(1), &[1.0, 0.0, 0.2, 1.0]);
        assert_eq!(ds.class_values, vec![1, 3]);
        assert_eq!(ds.y, vec![1, 0]);
    }

    #[test]
    fn idx_rejects_bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let (i, l) = idx_files(dir.path(), &[0; 7], 2, &[0, 1]);
        assert!(load_idx_images(&i, &l).is_err());
        let (i, l) = idx_files(dir.path(), &[0; 8], 2, &[0, 1]);
        assert!(load_idx_images(&l, &i).is_err());
    }

    #[test]
    fn filter_remaps_in_ascending_order() {
        let ds = toy(&[4, 1, 2, 3, 2, 1, 4]);
        let f = filter_classes(&ds, &[4, 1, 2]).unwrap();
        assert_eq!(f.class_values, vec![1, 2, 4]);
        assert_eq!(f.y, vec![2, 0, 1, 1, 0, 2]);
        assert_eq!(f.x.as_slice(), &[0.0, 1.0, 2.0, 4.0, 5.0, 6.0]);
        assert!(filter_classes(&ds, &[9]).is_err());
        assert!(filter_classes(&ds, &[]).is_err());
    }

    #[test]
    fn subsample_respects_cap_and_proportions() {
        let labels: Vec<i64> = (0..1000).map(|i| if i % 10 < 6 { 0 } else if i % 10 < 9 { 1 } else { 2 }).collect();
        let ds = toy(&labels);
        let s = stratified_subsample(&ds, 101, 3).unwrap();
        assert_eq!(s.len(), 101);
        let counts = s.class_counts();
        for (c, share) in counts.iter().zip([0.6, 0.3, 0.1]) {
            assert!((*c as f64 - 101.0 * share).abs() <= 1.0, "{counts:?}");
        }
        assert_eq!(s, stratified_subsample(&ds, 101, 3).unwrap());
        assert_ne!(s.x, stratified_subsample(&ds, 101, 4).unwrap().x);
        assert_eq!(stratified_subsample(&ds, 5000, 3).unwrap(), ds);
        assert!(stratified_subsample(&ds, 2, 3).is_err());
    }

    #[test]
    fn dataset_names_parse() {
        for kind in DatasetKind::ALL {
            assert_eq!(kind.name().parse::<DatasetKind>().unwrap(), kind);
        }
        assert_eq!("WDBC".parse::<DatasetKind>().unwrap(), DatasetKind::BreastCancer);
        assert!("iris".parse::<DatasetKind>().is_err());
    }
}
