//! Labelled I/Q datasets: generation, the `AMRD` file format and stratified
//! splitting.
//!
//! ```text
//! "AMRD"  u32 version (=1)  u32 record_count  u32 signal_length  u16 num_classes
//! record := u16 label  i16 snr_db  f32[signal_length] I  f32[signal_length] Q
//! ```
//!
//! Everything is little-endian.

use std::collections::BTreeMap;
use std::path::Path;

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{apply_awgn, modulate, normalize_power, ModScheme};
use crate::error::{Error, Result};
use crate::nn::{ExampleSource, Tensor, INPUT_CHANNELS};
use crate::rng;

pub const MAGIC: &[u8; 4] = b"AMRD";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 18;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub schemes: Vec<ModScheme>,
    pub snr_grid: Vec<i16>,
    pub examples_per_class_per_snr: usize,
    pub signal_length: usize,
    pub samples_per_symbol: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            schemes: vec![
                ModScheme::Bpsk,
                ModScheme::Qpsk,
                ModScheme::Psk8,
                ModScheme::Pam4,
                ModScheme::Qam16,
                ModScheme::Cpfsk,
            ],
            snr_grid: vec![10, 12, 14, 16, 18],
            examples_per_class_per_snr: 400,
            signal_length: 128,
            samples_per_symbol: 8,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: &str| {
            Err(Error::InvalidConfig {
                key: key.into(),
                message: message.into(),
            })
        };
        if self.schemes.is_empty() {
            return bad("schemes", "at least one modulation is required");
        }
        if self.schemes.len() > u16::MAX as usize {
            return bad("schemes", "too many classes");
        }
        if self.snr_grid.is_empty() {
            return bad("snr_grid", "must not be empty");
        }
        if self.examples_per_class_per_snr == 0 {
            return bad("examples_per_class_per_snr", "must be positive");
        }
        if self.signal_length == 0 || self.samples_per_symbol == 0 {
            return bad("signal_length", "signal_length and samples_per_symbol must be positive");
        }
        Ok(())
    }
}

/// One labelled example.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalExample {
    /// `2 × N`: in-phase row then quadrature row.
    pub iq: Tensor<f32>,
    pub label: usize,
    pub snr_db: i16,
}

/// In-memory dataset, examples stored contiguously as `[I..., Q...]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalDataset {
    signal_length: usize,
    num_classes: usize,
    labels: Vec<u16>,
    snrs: Vec<i16>,
    iq: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellCount {
    pub label: usize,
    pub snr_db: i16,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub records: usize,
    pub signal_length: usize,
    pub num_classes: usize,
    pub cells: Vec<CellCount>,
}

fn format_err(message: impl Into<String>) -> Error {
    Error::Format {
        file: "dataset",
        message: message.into(),
    }
}

impl SignalDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn signal_length(&self) -> usize {
        self.signal_length
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn snr_db(&self, i: usize) -> i16 {
        self.snrs[i]
    }

    /// `[I..., Q...]` samples of example `i`.
    pub fn samples(&self, i: usize) -> &[f32] {
        let n = 2 * self.signal_length;
        &self.iq[i * n..(i + 1) * n]
    }

    pub fn example(&self, i: usize) -> SignalExample {
        SignalExample {
            iq: Tensor::new(vec![INPUT_CHANNELS, self.signal_length], self.samples(i).to_vec())
                .expect("example shape"),
            label: self.label(i),
            snr_db: self.snrs[i],
        }
    }

    /// Stacks examples into a `b × 2 × N` tensor with their labels.
    pub fn gather(&self, indices: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        let mut data = Vec::with_capacity(indices.len() * 2 * self.signal_length);
        for &i in indices {
            data.extend_from_slice(self.samples(i));
        }
        let x = Tensor::new(vec![indices.len(), INPUT_CHANNELS, self.signal_length], data)
            .expect("batch shape");
        (x, indices.iter().map(|&i| self.label(i)).collect())
    }

    /// Examples with `snr_db >= min_snr_db`, in original order.
    pub fn filter_min_snr(&self, min_snr_db: i16) -> SignalDataset {
        let keep: Vec<usize> = (0..self.len()).filter(|&i| self.snrs[i] >= min_snr_db).collect();
        let mut iq = Vec::with_capacity(keep.len() * 2 * self.signal_length);
        for &i in &keep {
            iq.extend_from_slice(self.samples(i));
        }
        SignalDataset {
            signal_length: self.signal_length,
            num_classes: self.num_classes,
            labels: keep.iter().map(|&i| self.labels[i]).collect(),
            snrs: keep.iter().map(|&i| self.snrs[i]).collect(),
            iq,
        }
    }

    pub fn summary(&self) -> DatasetSummary {
        let mut cells: BTreeMap<(usize, i16), usize> = BTreeMap::new();
        for i in 0..self.len() {
            *cells.entry((self.label(i), self.snrs[i])).or_default() += 1;
        }
        DatasetSummary {
            records: self.len(),
            signal_length: self.signal_length,
            num_classes: self.num_classes,
            cells: cells
                .into_iter()
                .map(|((label, snr_db), count)| CellCount { label, snr_db, count })
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.len() * (4 + 8 * self.signal_length));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.signal_length as u32).to_le_bytes());
        out.extend_from_slice(&(self.num_classes as u16).to_le_bytes());
        for i in 0..self.len() {
            out.extend_from_slice(&self.labels[i].to_le_bytes());
            out.extend_from_slice(&self.snrs[i].to_le_bytes());
            for v in self.samples(i) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
            return Err(format_err("bad magic (expected \"AMRD\")"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        let version = u32_at(4);
        if version != VERSION as usize {
            return Err(format_err(format!("unsupported version {version}")));
        }
        let count = u32_at(8);
        let signal_length = u32_at(12);
        let num_classes = u16::from_le_bytes([bytes[16], bytes[17]]) as usize;
        if signal_length == 0 || num_classes == 0 {
            return Err(format_err("signal_length and num_classes must be positive"));
        }
        let record = 4 + 8 * signal_length;
        let expected = count
            .checked_mul(record)
            .and_then(|n| n.checked_add(HEADER_LEN))
            .ok_or_else(|| format_err("record count overflows"))?;
        if bytes.len() != expected {
            return Err(format_err(format!(
                "expected {expected} bytes for {count} records, found {}",
                bytes.len()
            )));
        }
        let mut labels = Vec::with_capacity(count);
        let mut snrs = Vec::with_capacity(count);
        let mut iq = Vec::with_capacity(count * 2 * signal_length);
        for rec in bytes[HEADER_LEN..].chunks_exact(record) {
            let label = u16::from_le_bytes([rec[0], rec[1]]);
            if label as usize >= num_classes {
                return Err(format_err(format!("label {label} >= {num_classes} classes")));
            }
            labels.push(label);
            snrs.push(i16::from_le_bytes([rec[2], rec[3]]));
            iq.extend(
                rec[4..]
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap())),
            );
        }
        Ok(SignalDataset {
            signal_length,
            num_classes,
            labels,
            snrs,
            iq,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// One clean-then-noisy example: unit power before noise, and again after.
fn synthesize<R: Rng>(scheme: ModScheme, snr_db: f64, spec: &DatasetSpec, rng: &mut R) -> Vec<f32> {
    let n_sym = spec.signal_length.div_ceil(spec.samples_per_symbol);
    let symbols: Vec<usize> = (0..n_sym).map(|_| rng.random_range(0..scheme.alphabet_size())).collect();
    let mut clean: Vec<Complex64> = modulate(scheme, &symbols, spec.samples_per_symbol).expect("valid symbols");
    clean.truncate(spec.signal_length);
    normalize_power(&mut clean);
    let mut noisy = apply_awgn(&clean, snr_db, rng);
    normalize_power(&mut noisy);
    noisy
        .iter()
        .map(|c| c.re as f32)
        .chain(noisy.iter().map(|c| c.im as f32))
        .collect()
}

/// Builds the dataset in memory. Cells `(class, snr)` are generated in
/// parallel from independently derived seeds, then laid out class-major.
pub fn synthesize_dataset(spec: &DatasetSpec) -> Result<SignalDataset> {
    spec.validate()?;
    let cells: Vec<(usize, i16)> = (0..spec.schemes.len())
        .flat_map(|c| spec.snr_grid.iter().map(move |&s| (c, s)))
        .collect();
    let blocks: Vec<Vec<f32>> = cells
        .par_iter()
        .map(|&(class, snr)| {
            let mut r = rng::derived(spec.seed, &[class as u64, snr as i64 as u64]);
            let mut out = Vec::with_capacity(spec.examples_per_class_per_snr * 2 * spec.signal_length);
            for _ in 0..spec.examples_per_class_per_snr {
                out.extend(synthesize(spec.schemes[class], snr as f64, spec, &mut r));
            }
            out
        })
        .collect();
    let n = spec.examples_per_class_per_snr;
    Ok(SignalDataset {
        signal_length: spec.signal_length,
        num_classes: spec.schemes.len(),
        labels: cells.iter().flat_map(|&(c, _)| std::iter::repeat_n(c as u16, n)).collect(),
        snrs: cells.iter().flat_map(|&(_, s)| std::iter::repeat_n(s, n)).collect(),
        iq: blocks.concat(),
    })
}

/// Generates the dataset described by `spec` and writes it to `path`.
pub fn generate_dataset(spec: &DatasetSpec, path: &Path) -> Result<DatasetSummary> {
    let data = synthesize_dataset(spec)?;
    data.write(path)?;
    Ok(data.summary())
}

/// Disjoint train/validation/test index sets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Stratified split: every `(class, snr)` cell is shuffled and divided by
/// `ratios` independently.
pub fn split(data: &SignalDataset, ratios: [f64; 3], seed: u64) -> Result<Split> {
    if ratios.iter().any(|r| !(r.is_finite() && *r >= 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidConfig {
            key: "split".into(),
            message: format!("ratios {ratios:?} must be non-negative and sum to 1"),
        });
    }
    let mut cells: BTreeMap<(u16, i16), Vec<usize>> = BTreeMap::new();
    for i in 0..data.len() {
        cells.entry((data.labels[i], data.snrs[i])).or_default().push(i);
    }
    let mut out = Split {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for ((label, snr), mut idx) in cells {
        idx.shuffle(&mut rng::derived(seed, &[label as u64, snr as i64 as u64]));
        let n = idx.len();
        let n_train = ((ratios[0] * n as f64).round() as usize).min(n);
        let n_val = ((ratios[1] * n as f64).round() as usize).min(n - n_train);
        out.train.extend_from_slice(&idx[..n_train]);
        out.val.extend_from_slice(&idx[n_train..n_train + n_val]);
        out.test.extend_from_slice(&idx[n_train + n_val..]);
    }
    out.train.sort_unstable();
    out.val.sort_unstable();
    out.test.sort_unstable();
    Ok(out)
}

/// A view of some examples of a dataset.
#[derive(Debug, Clone, Copy)]
pub struct Subset<'a> {
    pub data: &'a SignalDataset,
    pub indices: &'a [usize],
}

impl ExampleSource for Subset<'_> {
    fn len(&self) -> usize {
        self.indices.len()
    }

    fn batch(&self, indices: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        let global: Vec<usize> = indices.iter().map(|&i| self.indices[i]).collect();
        self.data.gather(&global)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> DatasetSpec {
        DatasetSpec {
            schemes: ModScheme::ALL.to_vec(),
            snr_grid: vec![-4, 0, 4, 8, 12],
            examples_per_class_per_snr: 100,
            signal_length: 32,
            samples_per_symbol: 4,
            seed: 17,
        }
    }

    #[test]
    fn bookkeeping_and_balance() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.amrd");
        let summary = generate_dataset(&small_spec(), &path).unwrap();
        assert_eq!(summary.records, 3500);
        assert_eq!(summary.cells.len(), 35);
        assert!(summary.cells.iter().all(|c| c.count == 100));
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3500);
        let loaded = SignalDataset::read(&path).unwrap();
        assert_eq!(loaded.summary(), summary);
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = synthesize_dataset(&small_spec()).unwrap().to_bytes();
        let b = synthesize_dataset(&small_spec()).unwrap().to_bytes();
        assert_eq!(a, b);
        let mut other = small_spec();
        other.seed += 1;
        assert_ne!(a, synthesize_dataset(&other).unwrap().to_bytes());
    }

    #[test]
    fn examples_have_unit_power() {
        let data = synthesize_dataset(&small_spec()).unwrap();
        for i in (0..data.len()).step_by(97) {
            let p = data.samples(i).iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / 32.0;
            assert!((p - 1.0).abs() < 1e-5, "example {i}: {p}");
        }
    }

    #[test]
    fn split_sizes_and_disjointness() {
        let data = synthesize_dataset(&small_spec()).unwrap();
        let s = split(&data, [0.6, 0.2, 0.2], 3).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (2100, 700, 700));
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..3500).collect::<Vec<_>>());

        let s = split(&data, [1.0, 0.0, 0.0], 3).unwrap();
        assert_eq!(s.train.len(), 3500);
        assert!(split(&data, [0.5, 0.2, 0.2], 3).is_err());
        assert!(split(&data, [1.2, -0.2, 0.0], 3).is_err());
    }

    #[test]
    fn split_is_stratified_per_cell() {
        // odd cell size so rounding matters
        let mut spec = small_spec();
        spec.examples_per_class_per_snr = 37;
        let data = synthesize_dataset(&spec).unwrap();
        let s = split(&data, [0.6, 0.2, 0.2], 5).unwrap();
        // exhaustive per-cell count oracle
        let count = |idx: &[usize], label: usize, snr: i16| {
            idx.iter().filter(|&&i| data.label(i) == label && data.snr_db(i) == snr).count() as f64
        };
        for label in 0..spec.schemes.len() {
            for &snr in &spec.snr_grid {
                assert!((count(&s.train, label, snr) - 0.6 * 37.0).abs() <= 1.0);
                assert!((count(&s.val, label, snr) - 0.2 * 37.0).abs() <= 1.0);
                assert!((count(&s.test, label, snr) - 0.2 * 37.0).abs() <= 1.0);
            }
        }
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let data = synthesize_dataset(&small_spec()).unwrap();
        let mut bytes = data.to_bytes();
        assert!(SignalDataset::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        bytes[1] = b'Z';
        assert!(SignalDataset::from_bytes(&bytes).is_err());
    }

    #[test]
    fn high_snr_filter() {
        let data = synthesize_dataset(&small_spec()).unwrap();
        let high = data.filter_min_snr(8);
        assert_eq!(high.len(), 2 * 7 * 100);
        assert!((0..high.len()).all(|i| high.snr_db(i) >= 8));
    }
}
