//! Datasets: IDX ingestion, synthetic Gaussian mixtures, subsampling and
//! client partitioning.

use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Labelled examples; `inputs` is `n × d`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if inputs.shape().len() != 2 {
            return Err(Error::dim("dataset inputs", "n × d matrix", format!("{:?}", inputs.shape())));
        }
        if inputs.rows() != labels.len() {
            return Err(Error::dim("dataset labels", inputs.rows(), labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Index {
                context: "dataset label",
                index: bad,
                limit: classes,
            });
        }
        Ok(Self { inputs, labels, classes })
    }

    pub fn empty(dim: usize, classes: usize) -> Self {
        Self {
            inputs: Tensor::zeros(&[0, dim]),
            labels: Vec::new(),
            classes,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn input(&self, i: usize) -> &[f64] {
        self.inputs.row(i)
    }

    /// Rows `idx` in the given order.
    pub fn select(&self, idx: &[usize]) -> Dataset {
        let d = self.dim();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(self.input(i));
        }
        Dataset {
            inputs: Tensor::matrix(idx.len(), d, data).expect("sized above"),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }

    /// Indices of every sample with label `class`, in dataset order.
    pub fn class_indices(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == class).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Concatenation of several datasets with the same dimension.
    pub fn concat(parts: &[Dataset]) -> Result<Dataset> {
        let first = parts.first().ok_or_else(|| Error::Usage("concat of zero datasets".into()))?;
        let (d, classes) = (first.dim(), parts.iter().map(|p| p.classes).max().unwrap_or(0));
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for p in parts {
            if p.dim() != d {
                return Err(Error::dim("concat", d, p.dim()));
            }
            data.extend_from_slice(p.inputs.data());
            labels.extend_from_slice(&p.labels);
        }
        Dataset::new(Tensor::matrix(labels.len(), d, data)?, labels, classes)
    }

    /// `label,x0,x1,…` with a header row.
    pub fn write_csv(&self, out: &mut impl Write) -> Result<()> {
        let header: Vec<String> = std::iter::once("label".to_string())
            .chain((0..self.dim()).map(|j| format!("x{j}")))
            .collect();
        writeln!(out, "{}", header.join(","))?;
        for i in 0..self.len() {
            let row: Vec<String> = self.input(i).iter().map(|v| format!("{v:?}")).collect();
            writeln!(out, "{},{}", self.labels[i], row.join(","))?;
        }
        Ok(())
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Cursor<'_> {
    fn fail(&self, offset: usize, message: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: offset as u64,
            message: message.into(),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let end = self.pos + 4;
        let chunk = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| self.fail(self.pos, format!("truncated header: missing {what}")))?;
        self.pos = end;
        Ok(u32::from_be_bytes(chunk.try_into().expect("4 bytes")))
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() < self.pos + n {
            return Err(self.fail(
                self.bytes.len(),
                format!("truncated {what}: need {n} bytes from offset {}, file has {}", self.pos, self.bytes.len()),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

/// Parses an IDX image file into `n × (rows·cols)` pixels scaled by 1/255.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let mut cur = Cursor { bytes, pos: 0, path };
    let magic = cur.u32("magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(cur.fail(0, format!("bad image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}")));
    }
    let n = cur.u32("item count")? as usize;
    let rows = cur.u32("row count")? as usize;
    let cols = cur.u32("column count")? as usize;
    let d = rows * cols;
    let pixels = cur.take(n * d, "pixel data")?;
    let data = pixels.iter().map(|&b| b as f64 / 255.0).collect();
    Tensor::matrix(n, d, data)
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<usize>> {
    let mut cur = Cursor { bytes, pos: 0, path };
    let magic = cur.u32("magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(cur.fail(0, format!("bad label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}")));
    }
    let n = cur.u32("item count")? as usize;
    Ok(cur.take(n, "label data")?.iter().map(|&b| b as usize).collect())
}

/// Loads an IDX image/label pair (raw or gzip-compressed).
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let inputs = parse_idx_images(&read_maybe_gz(images_path)?, images_path)?;
    let labels = parse_idx_labels(&read_maybe_gz(labels_path)?, labels_path)?;
    if inputs.rows() != labels.len() {
        return Err(Error::Format {
            path: labels_path.to_path_buf(),
            offset: 4,
            message: format!("{} labels for {} images", labels.len(), inputs.rows()),
        });
    }
    let classes = labels.iter().max().map_or(0, |&m| m + 1);
    Dataset::new(inputs, labels, classes)
}

/// Serializes a dataset as IDX bytes; pixels are rounded back to `0..=255`.
pub fn encode_idx(ds: &Dataset, rows: usize, cols: usize) -> Result<(Vec<u8>, Vec<u8>)> {
    if rows * cols != ds.dim() {
        return Err(Error::dim("encode_idx image size", ds.dim(), rows * cols));
    }
    let mut images = Vec::with_capacity(16 + ds.inputs.len());
    for v in [IDX_IMAGES_MAGIC, ds.len() as u32, rows as u32, cols as u32] {
        images.extend_from_slice(&v.to_be_bytes());
    }
    images.extend(ds.inputs.data().iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    let mut labels = Vec::with_capacity(8 + ds.len());
    for v in [IDX_LABELS_MAGIC, ds.len() as u32] {
        labels.extend_from_slice(&v.to_be_bytes());
    }
    for &y in &ds.labels {
        let b = u8::try_from(y).map_err(|_| Error::Index {
            context: "IDX label byte",
            index: y,
            limit: 256,
        })?;
        labels.push(b);
    }
    Ok((images, labels))
}

/// Seeded selection of `n_keep` samples without replacement, kept in dataset order.
/// Stratified selection allocates per class by largest remainder.
pub fn subsample(ds: &Dataset, n_keep: usize, seed: u64, stratified: bool) -> Result<Dataset> {
    if n_keep > ds.len() {
        return Err(Error::Config(format!(
            "cannot keep {n_keep} of {} samples",
            ds.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep: Vec<usize> = if stratified {
        let n = ds.len();
        let counts = ds.class_counts();
        let mut quota: Vec<usize> = counts.iter().map(|&c| c * n_keep / n.max(1)).collect();
        let mut rem: Vec<(usize, usize)> = counts
            .iter()
            .enumerate()
            .map(|(k, &c)| (c * n_keep % n.max(1), k))
            .collect();
        // largest remainder first, ties to the lower class index
        rem.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut missing = n_keep - quota.iter().sum::<usize>();
        for &(_, k) in &rem {
            if missing == 0 {
                break;
            }
            if quota[k] < counts[k] {
                quota[k] += 1;
                missing -= 1;
            }
        }
        let mut keep = Vec::with_capacity(n_keep);
        for (k, &q) in quota.iter().enumerate() {
            let members = ds.class_indices(k);
            keep.extend(index::sample(&mut rng, members.len(), q).into_iter().map(|i| members[i]));
        }
        keep
    } else {
        index::sample(&mut rng, ds.len(), n_keep).into_vec()
    };
    keep.sort_unstable();
    Ok(ds.select(&keep))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PartitionScheme {
    /// Random equal-size shards (sizes differ by at most one).
    #[default]
    Balanced,
    /// Every sample goes to a uniformly random shard.
    Multinomial,
}

impl std::str::FromStr for PartitionScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "balanced" => Ok(Self::Balanced),
            "multinomial" => Ok(Self::Multinomial),
            other => Err(Error::Config(format!("unknown partition scheme `{other}`"))),
        }
    }
}

impl std::fmt::Display for PartitionScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Balanced => "balanced",
            Self::Multinomial => "multinomial",
        })
    }
}

pub fn partition_uniform(ds: &Dataset, shards: usize, seed: u64) -> Result<Vec<Dataset>> {
    partition(ds, shards, seed, PartitionScheme::Balanced)
}

/// Disjoint random cover of `ds` by `shards` datasets; each shard keeps dataset order.
pub fn partition(ds: &Dataset, shards: usize, seed: u64, scheme: PartitionScheme) -> Result<Vec<Dataset>> {
    if shards == 0 {
        return Err(Error::Config("need at least one shard".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment: Vec<Vec<usize>> = vec![Vec::new(); shards];
    match scheme {
        PartitionScheme::Balanced => {
            let mut order: Vec<usize> = (0..ds.len()).collect();
            order.shuffle(&mut rng);
            let (base, extra) = (ds.len() / shards, ds.len() % shards);
            let mut start = 0;
            for (s, bucket) in assignment.iter_mut().enumerate() {
                let size = base + usize::from(s < extra);
                bucket.extend_from_slice(&order[start..start + size]);
                start += size;
            }
        }
        PartitionScheme::Multinomial => {
            for i in 0..ds.len() {
                assignment[rng.gen_range(0..shards)].push(i);
            }
        }
    }
    Ok(assignment
        .into_iter()
        .map(|mut idx| {
            idx.sort_unstable();
            ds.select(&idx)
        })
        .collect())
}

/// Class `c` is a unit-covariance Gaussian centred at `sep · u_c`, with `u_c`
/// a seeded random unit direction. Samples are class-blocked.
pub fn synth_mixture(classes: usize, dim: usize, per_class: usize, sep: f64, seed: u64) -> Result<Dataset> {
    synth_mixture_stream(classes, dim, per_class, sep, seed, 0)
}

/// Same class centres as [`synth_mixture`] with `seed`, independent samples per `stream`.
pub fn synth_mixture_stream(classes: usize, dim: usize, per_class: usize, sep: f64, seed: u64, stream: u64) -> Result<Dataset> {
    if classes == 0 || dim == 0 {
        return Err(Error::Config("synthetic mixture needs positive classes and dim".into()));
    }
    let mut dir_rng = ChaCha8Rng::seed_from_u64(seed);
    let centres: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| dir_rng.sample::<f64, _>(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|x| sep * x / norm).collect()
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(crate::seed::derive_seed(seed, "synth-samples", stream));
    let mut data = Vec::with_capacity(classes * per_class * dim);
    let mut labels = Vec::with_capacity(classes * per_class);
    for (c, centre) in centres.iter().enumerate() {
        for _ in 0..per_class {
            data.extend(centre.iter().map(|m| m + rng.sample::<f64, _>(StandardNormal)));
            labels.push(c);
        }
    }
    Dataset::new(Tensor::matrix(labels.len(), dim, data)?, labels, classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn idx_bytes(n: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [IDX_IMAGES_MAGIC, n, rows, cols] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend_from_slice(pixels);
        b
    }

    fn label_bytes(labels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [IDX_LABELS_MAGIC, labels.len() as u32] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend_from_slice(labels);
        b
    }

    fn toy(n: usize, classes: usize) -> Dataset {
        let data = (0..n * 2).map(|i| i as f64).collect();
        Dataset::new(Tensor::matrix(n, 2, data).unwrap(), (0..n).map(|i| i % classes).collect(), classes).unwrap()
    }

    #[test]
    fn single_zero_image() {
        let img = parse_idx_images(&idx_bytes(1, 28, 28, &[0; 784]), Path::new("x")).unwrap();
        assert_eq!(img.shape(), &[1, 784]);
        assert!(img.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_images_scale_known_bytes() {
        let pixels = [0u8, 255, 51, 102, 1, 2, 3, 254];
        let img = parse_idx_images(&idx_bytes(2, 2, 2, &pixels), Path::new("x")).unwrap();
        assert_eq!(img.shape(), &[2, 4]);
        assert_eq!(img.row(0), &[0.0, 1.0, 0.2, 0.4]);
        assert_eq!(img.row(1), &[1.0 / 255.0, 2.0 / 255.0, 3.0 / 255.0, 254.0 / 255.0]);
    }

    #[test]
    fn bad_magic_reports_offset_zero() {
        let mut b = idx_bytes(1, 1, 1, &[0]);
        b[3] = 0x01;
        match parse_idx_images(&b, Path::new("img")) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_idx_labels(&idx_bytes(1, 1, 1, &[0]), Path::new("l")), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn truncation_reports_offset() {
        let b = idx_bytes(2, 2, 2, &[1, 2, 3]);
        match parse_idx_images(&b, Path::new("img")) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 19),
            other => panic!("{other:?}"),
        }
        match parse_idx_images(&b[..10], Path::new("img")) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 8),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn load_idx_reads_raw_and_gzip_files() {
        let dir = tempfile::tempdir().unwrap();
        let pixels: Vec<u8> = (0..3 * 4).map(|i| (i * 20) as u8).collect();
        let img = idx_bytes(3, 2, 2, &pixels);
        let lab = label_bytes(&[2, 0, 1]);
        std::fs::write(dir.path().join("img"), &img).unwrap();
        std::fs::write(dir.path().join("lab"), &lab).unwrap();
        let raw = load_idx(&dir.path().join("img"), &dir.path().join("lab")).unwrap();

        let gz = |b: &[u8]| {
            let mut e = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::default());
            e.write_all(b).unwrap();
            e.finish().unwrap()
        };
        std::fs::write(dir.path().join("img.gz"), gz(&img)).unwrap();
        std::fs::write(dir.path().join("lab.gz"), gz(&lab)).unwrap();
        let zipped = load_idx(&dir.path().join("img.gz"), &dir.path().join("lab.gz")).unwrap();
        assert_eq!(raw, zipped);
        assert_eq!(raw.labels, vec![2, 0, 1]);
        assert_eq!(raw.classes, 3);
    }

    #[test]
    fn label_count_mismatch_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("img"), idx_bytes(2, 1, 1, &[0, 0])).unwrap();
        std::fs::write(dir.path().join("lab"), label_bytes(&[1])).unwrap();
        assert!(matches!(load_idx(&dir.path().join("img"), &dir.path().join("lab")), Err(Error::Format { .. })));
    }

    #[test]
    fn partition_edge_cases() {
        let ds = toy(7, 3);
        assert_eq!(partition_uniform(&ds, 1, 5).unwrap(), vec![ds.clone()]);
        let singles = partition_uniform(&ds, 7, 5).unwrap();
        assert!(singles.iter().all(|s| s.len() == 1));
    }

    #[test]
    fn twelve_hundred_over_five_gives_240_each() {
        let ds = toy(1200, 10);
        let shards = partition_uniform(&ds, 5, 0).unwrap();
        assert!(shards.iter().all(|s| s.len() == 240));
        let mut union: Vec<u64> = shards.iter().flat_map(|s| s.inputs.data().iter().step_by(2).map(|v| *v as u64)).collect();
        union.sort_unstable();
        let mut original: Vec<u64> = ds.inputs.data().iter().step_by(2).map(|v| *v as u64).collect();
        original.sort_unstable();
        assert_eq!(union, original);
    }

    #[test]
    fn stratified_subsample_keeps_class_proportions() {
        let ds = toy(1000, 10);
        let sub = subsample(&ds, 120, 3, true).unwrap();
        assert_eq!(sub.len(), 120);
        assert!(sub.class_counts().iter().all(|&c| c == 12));
        let plain = subsample(&ds, 120, 3, false).unwrap();
        assert_eq!(plain.len(), 120);
        assert!(subsample(&ds, 1001, 3, false).is_err());
    }

    #[test]
    fn synthetic_mixture_is_seeded_and_centred() {
        let a = synth_mixture(3, 5, 400, 4.0, 9).unwrap();
        assert_eq!(a, synth_mixture(3, 5, 400, 4.0, 9).unwrap());
        assert_eq!(a.class_counts(), vec![400, 400, 400]);
        // sample mean of each class sits at radius ≈ sep
        for c in 0..3 {
            let idx = a.class_indices(c);
            let mut mean = vec![0.0; 5];
            for &i in &idx {
                for (m, v) in mean.iter_mut().zip(a.input(i)) {
                    *m += v / idx.len() as f64;
                }
            }
            let r = mean.iter().map(|m| m * m).sum::<f64>().sqrt();
            assert!((r - 4.0).abs() < 0.3, "radius {r}");
        }
        let test = synth_mixture_stream(3, 5, 10, 4.0, 9, 1).unwrap();
        assert_ne!(test.inputs.row(0), a.inputs.row(0));
    }

    #[test]
    fn csv_dump_has_header_and_rows() {
        let ds = toy(2, 2);
        let mut out = Vec::new();
        ds.write_csv(&mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "label,x0,x1\n0,0.0,1.0\n1,2.0,3.0\n");
    }

    proptest! {
        #[test]
        fn shards_are_disjoint_cover(n in 0usize..200, shards in 1usize..12, seed in 0u64..1000, multinomial in any::<bool>()) {
            let ds = toy(n, 4);
            let scheme = if multinomial { PartitionScheme::Multinomial } else { PartitionScheme::Balanced };
            let parts = partition(&ds, shards, seed, scheme).unwrap();
            let mut ids: Vec<u64> = parts.iter().flat_map(|s| s.inputs.data().iter().step_by(2).map(|v| *v as u64)).collect();
            ids.sort_unstable();
            prop_assert_eq!(ids, (0..n as u64).map(|i| 2 * i).collect::<Vec<_>>());
            if !multinomial {
                let sizes: Vec<usize> = parts.iter().map(Dataset::len).collect();
                prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            }
        }

        #[test]
        fn idx_round_trip(pixels in prop::collection::vec(any::<u8>(), 12), labels in prop::collection::vec(0u8..10, 3)) {
            let img = parse_idx_images(&idx_bytes(3, 2, 2, &pixels), Path::new("x")).unwrap();
            prop_assert!(img.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            let ds = Dataset::new(img, labels.iter().map(|&l| l as usize).collect(), 10).unwrap();
            let (ib, lb) = encode_idx(&ds, 2, 2).unwrap();
            let back = Dataset::new(parse_idx_images(&ib, Path::new("x")).unwrap(), parse_idx_labels(&lb, Path::new("y")).unwrap(), 10).unwrap();
            prop_assert_eq!(back, ds);
        }
    }
}
