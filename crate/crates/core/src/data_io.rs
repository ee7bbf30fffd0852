//! Labeled datasets, their on-disk containers, and the seeded session split.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{shape, Error, Result};
use crate::harness::SessionStream;
use crate::io_util::{write_file, ByteReader};

const DS_MAGIC: &[u8; 4] = b"OFDS";
const DS_VERSION: u32 = 1;
const DS_HEADER_LEN: usize = 17;
pub const CIFAR_RECORD_LEN: usize = 3074;
pub const CIFAR_PIXELS: usize = 3072;

/// Samples with uniform input dimension and integer class labels.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabeledDataset {
    input_dim: usize,
    inputs: Vec<Vec<f64>>,
    labels: Vec<u32>,
}

impl LabeledDataset {
    pub fn new(input_dim: usize) -> Self {
        Self {
            input_dim,
            ..Self::default()
        }
    }

    pub fn from_parts(input_dim: usize, inputs: Vec<Vec<f64>>, labels: Vec<u32>) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(shape(format!("{} inputs with {} labels", inputs.len(), labels.len())));
        }
        let mut ds = Self::new(input_dim);
        for (x, y) in inputs.into_iter().zip(labels) {
            ds.push(x, y)?;
        }
        Ok(ds)
    }

    pub fn push(&mut self, input: Vec<f64>, label: u32) -> Result<()> {
        if input.len() != self.input_dim {
            return Err(shape(format!("sample of length {} in a dataset of dim {}", input.len(), self.input_dim)));
        }
        self.inputs.push(input);
        self.labels.push(label);
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.inputs
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn get(&self, i: usize) -> (&[f64], u32) {
        (&self.inputs[i], self.labels[i])
    }

    pub fn classes(&self) -> BTreeSet<u32> {
        self.labels.iter().copied().collect()
    }

    /// Sample indices grouped by label, in ascending label order.
    pub fn indices_by_class(&self) -> BTreeMap<u32, Vec<usize>> {
        let mut map: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, &y) in self.labels.iter().enumerate() {
            map.entry(y).or_default().push(i);
        }
        map
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            input_dim: self.input_dim,
            inputs: indices.iter().map(|&i| self.inputs[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Samples whose label is in `classes`, in original order.
    pub fn filter_classes(&self, classes: &BTreeSet<u32>) -> Self {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| classes.contains(&self.labels[i])).collect();
        self.subset(&idx)
    }

    pub fn samples_of(&self, class_id: u32) -> Vec<Vec<f64>> {
        self.labels
            .iter()
            .zip(&self.inputs)
            .filter(|(y, _)| **y == class_id)
            .map(|(_, x)| x.clone())
            .collect()
    }
}

/// Element type of a raw-binary payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
    /// Bytes scaled to `[0, 1]` on load.
    U8Image,
}

impl DType {
    fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
            DType::U8Image => 2,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            2 => Some(DType::U8Image),
            _ => None,
        }
    }

    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
            DType::U8Image => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataFormat {
    RawBinary,
    Csv,
}

impl DataFormat {
    /// `.csv` files are CSV; everything else is raw binary.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => DataFormat::Csv,
            _ => DataFormat::RawBinary,
        }
    }
}

pub fn encode_raw(ds: &LabeledDataset, dtype: DType) -> Vec<u8> {
    let mut out = Vec::with_capacity(DS_HEADER_LEN + ds.len() * (ds.input_dim * dtype.width() + 4));
    out.extend_from_slice(DS_MAGIC);
    for v in [DS_VERSION, ds.len() as u32, ds.input_dim as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.push(dtype.code());
    for x in &ds.inputs {
        for &v in x {
            match dtype {
                DType::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                DType::F64 => out.extend_from_slice(&v.to_le_bytes()),
                DType::U8Image => out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8),
            }
        }
    }
    for y in &ds.labels {
        out.extend_from_slice(&y.to_le_bytes());
    }
    out
}

pub fn decode_raw(bytes: &[u8]) -> Result<LabeledDataset> {
    let corrupt = |m: String| Error::CorruptHeader(m);
    let mut r = ByteReader::new(bytes);
    if r.take(4) != Some(DS_MAGIC.as_slice()) {
        return Err(corrupt("dataset: bad magic".into()));
    }
    let short = || Error::CorruptHeader("dataset: header truncated".into());
    let version = r.u32().ok_or_else(short)?;
    if version != DS_VERSION {
        return Err(corrupt(format!("dataset: version {version}, expected {DS_VERSION}")));
    }
    let count = r.u32().ok_or_else(short)? as usize;
    let dim = r.u32().ok_or_else(short)? as usize;
    let code = r.u8().ok_or_else(short)?;
    let dtype = DType::from_code(code).ok_or_else(|| corrupt(format!("dataset: unknown dtype {code}")))?;
    let expected = count as u64 * (dim as u64 * dtype.width() as u64 + 4);
    if (r.remaining() as u64) < expected {
        return Err(Error::TruncatedPayload {
            expected: expected as usize,
            found: r.remaining(),
        });
    }
    if r.remaining() as u64 > expected {
        return Err(corrupt(format!("dataset: {} trailing bytes", r.remaining() as u64 - expected)));
    }
    let mut inputs = Vec::with_capacity(count);
    for _ in 0..count {
        let row = (0..dim)
            .map(|_| match dtype {
                DType::F32 => r.f32().map(f64::from),
                DType::F64 => r.f64(),
                DType::U8Image => r.u8().map(|b| b as f64 / 255.0),
            })
            .collect::<Option<Vec<_>>>()
            .ok_or_else(short)?;
        inputs.push(row);
    }
    let labels = (0..count).map(|_| r.u32()).collect::<Option<Vec<_>>>().ok_or_else(short)?;
    LabeledDataset::from_parts(dim, inputs, labels)
}

pub fn encode_csv(ds: &LabeledDataset) -> String {
    let mut out = String::from("label");
    for j in 0..ds.input_dim {
        write!(out, ",f{j}").unwrap();
    }
    out.push('\n');
    for (x, y) in ds.inputs.iter().zip(&ds.labels) {
        write!(out, "{y}").unwrap();
        for v in x {
            write!(out, ",{v:?}").unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn decode_csv(text: &str) -> Result<LabeledDataset> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| Error::CorruptHeader("csv: empty file".into()))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.first() != Some(&"label") || cols.iter().skip(1).enumerate().any(|(j, c)| *c != format!("f{j}")) {
        return Err(Error::CorruptHeader(format!("csv: expected header label,f0,f1,..., got {header:?}")));
    }
    let dim = cols.len() - 1;
    let mut ds = LabeledDataset::new(dim);
    for (n, line) in lines.enumerate() {
        let bad = |what: &str| Error::CorruptHeader(format!("csv row {}: {what}", n + 1));
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != dim + 1 {
            return Err(bad(&format!("{} fields, expected {}", fields.len(), dim + 1)));
        }
        let label = fields[0].parse::<u32>().map_err(|_| bad("label is not a nonnegative integer"))?;
        let x = fields[1..]
            .iter()
            .map(|f| f.parse::<f64>().map_err(|_| bad(&format!("bad value {f:?}"))))
            .collect::<Result<Vec<_>>>()?;
        ds.push(x, label)?;
    }
    Ok(ds)
}

pub fn load_dataset(path: &Path, format: DataFormat) -> Result<LabeledDataset> {
    match format {
        DataFormat::RawBinary => decode_raw(&fs::read(path)?),
        DataFormat::Csv => decode_csv(&fs::read_to_string(path)?),
    }
}

pub fn save_dataset(ds: &LabeledDataset, path: &Path, format: DataFormat, dtype: DType) -> Result<()> {
    let bytes = match format {
        DataFormat::RawBinary => encode_raw(ds, dtype),
        DataFormat::Csv => encode_csv(ds).into_bytes(),
    };
    write_file(path, &bytes)?;
    Ok(())
}

/// Parses a CIFAR-100 binary batch: per record a coarse label byte, a fine
/// label byte and 3072 pixel bytes. Keeps the fine label.
pub fn decode_cifar(bytes: &[u8]) -> Result<LabeledDataset> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD_LEN) {
        return Err(Error::SizeNotMultipleOfRecord(bytes.len() as u64));
    }
    let mut ds = LabeledDataset::new(CIFAR_PIXELS);
    for rec in bytes.chunks_exact(CIFAR_RECORD_LEN) {
        let x = rec[2..].iter().map(|&b| b as f64 / 255.0).collect();
        ds.push(x, rec[1] as u32)?;
    }
    Ok(ds)
}

pub fn load_cifar_batch(path: &Path) -> Result<LabeledDataset> {
    decode_cifar(&fs::read(path)?)
}

/// Shape of a session split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitConfig {
    pub base_classes: usize,
    pub sessions: usize,
    pub ways: usize,
    pub shots: usize,
    /// Training samples kept per base class; `None` keeps every sample left
    /// after the test draw.
    pub per_class_cap: Option<usize>,
    pub test_per_class: usize,
}

/// Which dataset rows went where. Test indices refer to the separate test
/// set when one was given.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SplitIndices {
    pub base: Vec<usize>,
    pub sessions: Vec<Vec<usize>>,
    pub test: Vec<usize>,
}

/// Splits a dataset into a base session, `sessions` incremental sessions of
/// `ways × shots`, and a test set over every used class.
///
/// Classes are taken in ascending id order: the first `base_classes` form the
/// base session and each incremental session takes the next `ways`. Within a
/// class, samples are drawn in a seeded random order; without a separate test
/// set, the first `test_per_class` drawn go to the test split.
pub fn split_fscil(
    dataset: &LabeledDataset,
    test_set: Option<&LabeledDataset>,
    cfg: &SplitConfig,
    seed: u64,
) -> Result<(SessionStream, SplitIndices)> {
    if cfg.base_classes == 0 || cfg.ways == 0 || cfg.shots == 0 {
        return Err(Error::InvalidConfig("base_classes, ways and shots must be positive".into()));
    }
    if let Some(t) = test_set {
        if t.input_dim() != dataset.input_dim() {
            return Err(shape("test set dimension differs from training set"));
        }
    }
    let by_class = dataset.indices_by_class();
    let needed = cfg.base_classes + cfg.sessions * cfg.ways;
    if by_class.len() < needed {
        return Err(Error::InsufficientClasses {
            needed,
            available: by_class.len(),
        });
    }
    let test_by_class = test_set.map(LabeledDataset::indices_by_class);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = SplitIndices {
        sessions: vec![Vec::new(); cfg.sessions],
        ..SplitIndices::default()
    };
    for (k, (&class, rows)) in by_class.iter().take(needed).enumerate() {
        let mut rows = rows.clone();
        rows.shuffle(&mut rng);
        let train_want = if k < cfg.base_classes {
            cfg.per_class_cap
        } else {
            Some(cfg.shots)
        };
        let (test_rows, train_pool) = match &test_by_class {
            Some(tbc) => {
                let mut t = tbc.get(&class).cloned().unwrap_or_default();
                t.shuffle(&mut rng);
                if t.len() < cfg.test_per_class {
                    return Err(Error::InsufficientSamples {
                        class_id: class,
                        needed: cfg.test_per_class,
                        available: t.len(),
                    });
                }
                t.truncate(cfg.test_per_class);
                (t, rows)
            }
            None => {
                let split = cfg.test_per_class.min(rows.len());
                let train = rows.split_off(split);
                (rows, train)
            }
        };
        let test_short = test_by_class.is_none() && test_rows.len() < cfg.test_per_class;
        let train_short = train_want.is_some_and(|w| train_pool.len() < w) || train_pool.is_empty();
        if test_short || train_short {
            let available = by_class[&class].len();
            let needed = cfg.test_per_class * usize::from(test_by_class.is_none()) + train_want.unwrap_or(1);
            return Err(Error::InsufficientSamples {
                class_id: class,
                needed,
                available,
            });
        }
        let train: Vec<usize> = match train_want {
            Some(w) => train_pool[..w].to_vec(),
            None => train_pool,
        };
        if k < cfg.base_classes {
            idx.base.extend(train);
        } else {
            idx.sessions[(k - cfg.base_classes) / cfg.ways].extend(train);
        }
        idx.test.extend(test_rows);
    }
    let test_source = test_set.unwrap_or(dataset);
    let stream = SessionStream {
        base: dataset.subset(&idx.base),
        sessions: idx.sessions.iter().map(|s| dataset.subset(s)).collect(),
        ways: cfg.ways,
        shots: cfg.shots,
        test: test_source.subset(&idx.test),
    };
    Ok((stream, idx))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::validate_stream;
    use rand::Rng;

    fn toy(classes: u32, per_class: usize, dim: usize, seed: u64) -> LabeledDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ds = LabeledDataset::new(dim);
        for c in 0..classes {
            for _ in 0..per_class {
                ds.push((0..dim).map(|_| rng.random_range(0.0..1.0)).collect(), c).unwrap();
            }
        }
        ds
    }

    #[test]
    fn raw_round_trips() {
        let ds = toy(2, 2, 3, 1).subset(&[0, 1, 3]);
        let back = decode_raw(&encode_raw(&ds, DType::F64)).unwrap();
        assert_eq!(back, ds);
        let back = decode_raw(&encode_raw(&ds, DType::F32)).unwrap();
        assert_eq!(back.labels(), ds.labels());
        for (a, b) in back.inputs().iter().flatten().zip(ds.inputs().iter().flatten()) {
            assert!((a - b).abs() < 1e-7);
        }
        let back = decode_raw(&encode_raw(&ds, DType::U8Image)).unwrap();
        for (a, b) in back.inputs().iter().flatten().zip(ds.inputs().iter().flatten()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn raw_errors() {
        let ds = toy(2, 2, 3, 2);
        let bytes = encode_raw(&ds, DType::F64);
        assert!(matches!(decode_raw(&bytes[..bytes.len() - 5]), Err(Error::TruncatedPayload { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_raw(&bad), Err(Error::CorruptHeader(_))));
        let mut bad = bytes.clone();
        bad[16] = 9;
        assert!(matches!(decode_raw(&bad), Err(Error::CorruptHeader(_))));
        assert!(matches!(decode_raw(&bytes[..10]), Err(Error::CorruptHeader(_))));
    }

    #[test]
    fn csv_round_trips() {
        let ds = toy(3, 2, 4, 3);
        let text = encode_csv(&ds);
        assert!(text.starts_with("label,f0,f1,f2,f3\n"));
        assert_eq!(decode_csv(&text).unwrap(), ds);
        assert!(decode_csv("lbl,f0\n1,2\n").is_err());
        assert!(decode_csv("label,f0\n1,2,3\n").is_err());
        assert!(decode_csv("label,f0\n-1,2\n").is_err());
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = toy(2, 3, 2, 4);
        for (name, fmt) in [("d.bin", DataFormat::RawBinary), ("d.csv", DataFormat::Csv)] {
            let p = dir.path().join(name);
            save_dataset(&ds, &p, fmt, DType::F64).unwrap();
            assert_eq!(DataFormat::from_path(&p), fmt);
            assert_eq!(load_dataset(&p, fmt).unwrap(), ds);
        }
        assert!(matches!(load_dataset(&dir.path().join("missing.bin"), DataFormat::RawBinary), Err(Error::Io(_))));
    }

    #[test]
    fn cifar_records() {
        let mut bytes = Vec::new();
        for (coarse, fine, px) in [(3u8, 17u8, 0u8), (4, 99, 255)] {
            bytes.push(coarse);
            bytes.push(fine);
            bytes.extend((0..CIFAR_PIXELS).map(|i| if i == 5 { 51 } else { px }));
        }
        let ds = decode_cifar(&bytes).unwrap();
        assert_eq!(ds.labels(), &[17, 99]);
        assert_eq!(ds.inputs()[0][0], 0.0);
        assert_eq!(ds.inputs()[0][5], 0.2);
        assert_eq!(ds.inputs()[1][0], 1.0);
        assert!(decode_cifar(&[]).unwrap().is_empty());
        assert!(matches!(decode_cifar(&vec![0; 3073]), Err(Error::SizeNotMultipleOfRecord(3073))));
    }

    #[test]
    fn full_benchmark_split_uses_every_class() {
        let ds = toy(100, 8, 1, 5);
        let cfg = SplitConfig {
            base_classes: 60,
            sessions: 8,
            ways: 5,
            shots: 5,
            per_class_cap: Some(5),
            test_per_class: 3,
        };
        let (stream, _) = split_fscil(&ds, None, &cfg, 1).unwrap();
        let mut used = stream.base.classes();
        for s in &stream.sessions {
            used.extend(s.classes());
        }
        assert_eq!(used.len(), 100);
        assert!(validate_stream(&stream).is_ok());
        let too_many = SplitConfig { sessions: 9, ..cfg };
        assert!(matches!(
            split_fscil(&ds, None, &too_many, 1),
            Err(Error::InsufficientClasses { needed: 105, available: 100 })
        ));
    }

    #[test]
    fn desk_split_is_valid_disjoint_and_seeded() {
        let ds = toy(18, 40, 2, 6);
        let cfg = SplitConfig {
            base_classes: 10,
            sessions: 4,
            ways: 2,
            shots: 5,
            per_class_cap: Some(15),
            test_per_class: 20,
        };
        let (stream, idx) = split_fscil(&ds, None, &cfg, 7).unwrap();
        assert!(validate_stream(&stream).is_ok());
        assert_eq!(idx.base.len(), 150);
        assert_eq!(idx.test.len(), 18 * 20);
        let mut all: Vec<usize> = idx.base.iter().chain(idx.sessions.iter().flatten()).chain(&idx.test).copied().collect();
        let n = all.len();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), n);
        assert_eq!(split_fscil(&ds, None, &cfg, 7).unwrap().1, idx);
        assert_ne!(split_fscil(&ds, None, &cfg, 8).unwrap().1, idx);
    }

    #[test]
    fn split_with_separate_test_set() {
        let train = toy(6, 10, 2, 8);
        let test = toy(6, 4, 2, 9);
        let cfg = SplitConfig {
            base_classes: 2,
            sessions: 2,
            ways: 2,
            shots: 3,
            per_class_cap: None,
            test_per_class: 4,
        };
        let (stream, idx) = split_fscil(&train, Some(&test), &cfg, 1).unwrap();
        assert_eq!(stream.base.len(), 20);
        assert_eq!(stream.test.len(), 24);
        assert_eq!(idx.test.len(), 24);
        let starved = SplitConfig { test_per_class: 5, ..cfg.clone() };
        assert!(matches!(split_fscil(&train, Some(&test), &starved, 1), Err(Error::InsufficientSamples { .. })));
        let short = SplitConfig { shots: 11, ..cfg };
        assert!(matches!(split_fscil(&train, Some(&test), &short, 1), Err(Error::InsufficientSamples { .. })));
    }
}
