//! The synthetic Gaussian-quadrant benchmark.
//!
//! Each 32x32 image is split into four 16x16 quadrants, numbered like the
//! Cartesian plane: Q1 top-right, Q2 top-left, Q3 bottom-left, Q4
//! bottom-right. Q1 is blank, Q2 and Q4 hold a Gaussian blob whose variance
//! carries the true group signal, and Q3 holds a blob whose variance is the
//! confounder (`metadata_sigma2`). Group 0 draws both variances from
//! `U[1,4)`, group 1 from `U[3,6)`.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::MetadataMatrix;
use crate::tensor::Tensor;

pub const IMAGE_SIZE: usize = 32;
pub const QUADRANT: usize = 16;
pub const GROUP0_RANGE: (f64, f64) = (1.0, 4.0);
pub const GROUP1_RANGE: (f64, f64) = (3.0, 6.0);
pub const DEFAULT_N_PER_GROUP: usize = 1000;
pub const DEFAULT_EVAL_FRACTION: f64 = 0.2;

const DESCRIPTOR: &str = "descriptor.txt";
const IMAGES: &str = "images.f32";
const SAMPLES: &str = "samples.csv";
const FORMAT_TAG: &str = "confound-guard-synth/1";

/// `exp(-((x-7.5)^2 + (y-7.5)^2) / (2 sigma2))` on the 16x16 grid.
pub fn render_gaussian_quadrant(sigma2: f64) -> Result<Tensor> {
    if !(sigma2 > 0.0) || !sigma2.is_finite() {
        return Err(Error::NonPositiveVariance(sigma2));
    }
    let c = (QUADRANT as f64 - 1.0) / 2.0;
    let mut data = Vec::with_capacity(QUADRANT * QUADRANT);
    for y in 0..QUADRANT {
        for x in 0..QUADRANT {
            let d2 = (x as f64 - c).powi(2) + (y as f64 - c).powi(2);
            data.push((-d2 / (2.0 * sigma2)).exp());
        }
    }
    Tensor::new([QUADRANT, QUADRANT], data)
}

/// Best achievable accuracy from the group signal alone: the two uniform
/// densities overlap on [3,4), giving Bayes error 1/6.
pub fn bayes_ceiling() -> f64 {
    5.0 / 6.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    /// 32x32, row-major, values in [0, 1].
    pub image: Vec<f32>,
    pub label: u8,
    /// Variance of the Q3 blob.
    pub metadata_sigma2: f64,
    /// Variance of the Q2 and Q4 blobs.
    pub main_sigma2: f64,
}

/// Draws `(main_sigma2, metadata_sigma2)` for sample `index`. Every sample
/// has its own RNG stream keyed by `(seed, index)`.
pub fn draw_variances(seed: u64, index: u64, label: u8) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let (a, b) = if label == 0 { GROUP0_RANGE } else { GROUP1_RANGE };
    let main = rng.gen_range(a..b);
    let meta = rng.gen_range(a..b);
    (main, meta)
}

fn paste(image: &mut [f32], blob: &Tensor, row0: usize, col0: usize) {
    for y in 0..QUADRANT {
        for x in 0..QUADRANT {
            image[(row0 + y) * IMAGE_SIZE + col0 + x] = blob.at(y, x) as f32;
        }
    }
}

pub fn render_sample(label: u8, main_sigma2: f64, metadata_sigma2: f64) -> Result<SyntheticSample> {
    let main = render_gaussian_quadrant(main_sigma2)?;
    let meta = render_gaussian_quadrant(metadata_sigma2)?;
    let mut image = vec![0.0f32; IMAGE_SIZE * IMAGE_SIZE];
    paste(&mut image, &main, 0, 0);
    paste(&mut image, &meta, QUADRANT, 0);
    paste(&mut image, &main, QUADRANT, QUADRANT);
    Ok(SyntheticSample {
        image,
        label,
        metadata_sigma2,
        main_sigma2,
    })
}

/// A generated dataset: group 0 occupies indices `0..n_per_group`, group 1
/// the rest.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub seed: u64,
    pub samples: Vec<SyntheticSample>,
}

pub fn generate_dataset(seed: u64, n_per_group: usize) -> Result<Dataset> {
    if n_per_group == 0 {
        return Err(Error::Config("n_per_group must be at least 1".into()));
    }
    let samples = (0..2 * n_per_group)
        .map(|i| {
            let label = u8::from(i >= n_per_group);
            let (main, meta) = draw_variances(seed, i as u64, label);
            render_sample(label, main, meta)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { seed, samples })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// `b x 1 x 32 x 32` image batch.
    pub fn images(&self, idx: &[usize]) -> Result<Tensor<f32>> {
        let mut data = Vec::with_capacity(idx.len() * IMAGE_SIZE * IMAGE_SIZE);
        for &i in idx {
            let s = self.samples.get(i).ok_or_else(|| Error::Config(format!("sample index {i} out of range")))?;
            data.extend_from_slice(&s.image);
        }
        Tensor::new([idx.len(), 1, IMAGE_SIZE, IMAGE_SIZE], data)
    }

    pub fn labels(&self, idx: &[usize]) -> Vec<f64> {
        idx.iter().map(|&i| self.samples[i].label as f64).collect()
    }

    /// Raw (unstandardized) confounder values as an `n x 1` tensor.
    pub fn confounders(&self, idx: &[usize]) -> Result<Tensor> {
        Tensor::new([idx.len(), 1], idx.iter().map(|&i| self.samples[i].metadata_sigma2).collect())
    }
}

/// Stratified train/eval partition with its metadata matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub eval: Vec<usize>,
    pub eval_fraction: f64,
    pub seed: u64,
    /// `[intercept, z-scored metadata_sigma2, label]` over the training rows.
    pub train_meta: MetadataMatrix,
    /// `[intercept, metadata_sigma2]` z-scored with the training constants.
    pub eval_meta: MetadataMatrix,
}

pub fn split(dataset: &Dataset, eval_fraction: f64, seed: u64) -> Result<DatasetSplit> {
    split_with(dataset, eval_fraction, seed, true)
}

/// [`split`] with the intercept column optional.
pub fn split_with(dataset: &Dataset, eval_fraction: f64, seed: u64, intercept: bool) -> Result<DatasetSplit> {
    if !(eval_fraction > 0.0 && eval_fraction < 1.0) {
        return Err(Error::Config(format!("eval fraction must lie in (0, 1), got {eval_fraction}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut eval) = (Vec::new(), Vec::new());
    for class in [0u8, 1] {
        let mut members: Vec<usize> = (0..dataset.len()).filter(|&i| dataset.samples[i].label == class).collect();
        members.shuffle(&mut rng);
        let n_eval = (members.len() as f64 * eval_fraction).round() as usize;
        eval.extend_from_slice(&members[..n_eval]);
        train.extend_from_slice(&members[n_eval..]);
    }
    train.sort_unstable();
    eval.sort_unstable();
    DatasetSplit::from_indices(dataset, train, eval, eval_fraction, seed, intercept)
}

impl DatasetSplit {
    pub fn from_indices(
        dataset: &Dataset,
        train: Vec<usize>,
        eval: Vec<usize>,
        eval_fraction: f64,
        seed: u64,
        intercept: bool,
    ) -> Result<Self> {
        for (name, idx) in [("train", &train), ("eval", &eval)] {
            if idx.iter().any(|&i| i >= dataset.len()) {
                return Err(Error::DegenerateSplit(format!("{name} index out of range")));
            }
            let ones = idx.iter().filter(|&&i| dataset.samples[i].label == 1).count();
            if ones == 0 || ones == idx.len() {
                return Err(Error::DegenerateSplit(format!("{name} split has a single class")));
            }
        }
        let mut seen = vec![false; dataset.len()];
        for &i in train.iter().chain(&eval) {
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::DegenerateSplit(format!("index {i} appears twice")));
            }
        }
        let labels = dataset.labels(&train);
        let train_meta = MetadataMatrix::fit(&dataset.confounders(&train)?, Some(&labels), intercept)?;
        let eval_meta = train_meta.replay(&dataset.confounders(&eval)?, None)?;
        Ok(Self {
            train,
            eval,
            eval_fraction,
            seed,
            train_meta,
            eval_meta,
        })
    }

    pub fn has_intercept(&self) -> bool {
        self.train_meta.roles().contains(&crate::linalg::ColumnRole::Intercept)
    }

    /// The same partition rebuilt with or without the intercept column.
    pub fn with_intercept(&self, dataset: &Dataset, intercept: bool) -> Result<Self> {
        Self::from_indices(
            dataset,
            self.train.clone(),
            self.eval.clone(),
            self.eval_fraction,
            self.seed,
            intercept,
        )
    }
}

fn join(idx: &[usize]) -> String {
    idx.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

/// Writes `descriptor.txt`, `images.f32` and `samples.csv` into `dir`.
pub fn save_dataset(dir: impl AsRef<Path>, dataset: &Dataset, split: &DatasetSplit) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let n_per_group = dataset.samples.iter().filter(|s| s.label == 0).count();
    let descriptor = format!(
        "format: {FORMAT_TAG}\nn: {}\nn_per_group: {n_per_group}\nseed: {}\nimage_size: {IMAGE_SIZE}\n\
         eval_fraction: {}\nsplit_seed: {}\ntrain_indices: {}\neval_indices: {}\n",
        dataset.len(),
        dataset.seed,
        split.eval_fraction,
        split.seed,
        join(&split.train),
        join(&split.eval),
    );
    fs::write(dir.join(DESCRIPTOR), descriptor)?;

    let mut blob = Vec::with_capacity(dataset.len() * IMAGE_SIZE * IMAGE_SIZE * 4);
    for s in &dataset.samples {
        s.image.iter().for_each(|v| blob.extend_from_slice(&v.to_le_bytes()));
    }
    fs::write(dir.join(IMAGES), blob)?;

    let mut w = csv::Writer::from_path(dir.join(SAMPLES)).map_err(csv_error)?;
    w.write_record(["index", "label", "main_sigma2", "metadata_sigma2"]).map_err(csv_error)?;
    for (i, s) in dataset.samples.iter().enumerate() {
        w.write_record([
            i.to_string(),
            s.label.to_string(),
            s.main_sigma2.to_string(),
            s.metadata_sigma2.to_string(),
        ])
        .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Format {
            path: SAMPLES.into(),
            reason: format!("{other:?}"),
        },
    }
}

/// Parses `key: value` lines; blank lines and `#` comments are skipped.
pub fn parse_key_values(text: &str, path: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once(':').ok_or_else(|| Error::Format {
            path: path.into(),
            reason: format!("line {}: expected `key: value`", n + 1),
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn parse_indices(v: &str, path: &str) -> Result<Vec<usize>> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|s| {
            s.trim().parse().map_err(|_| Error::Format {
                path: path.into(),
                reason: format!("bad index `{s}`"),
            })
        })
        .collect()
}

/// Reads a directory written by [`save_dataset`].
pub fn load_dataset(dir: impl AsRef<Path>, intercept: bool) -> Result<(Dataset, DatasetSplit)> {
    let dir = dir.as_ref();
    let dpath = dir.join(DESCRIPTOR).display().to_string();
    let bad = |reason: String| Error::Format {
        path: dpath.clone(),
        reason,
    };
    let kv = parse_key_values(&fs::read_to_string(dir.join(DESCRIPTOR))?, &dpath)?;
    let get = |key: &str| {
        kv.iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| bad(format!("missing key `{key}`")))
    };
    if get("format")? != FORMAT_TAG {
        return Err(bad(format!("unsupported format `{}`", get("format")?)));
    }
    let num = |key: &str| -> Result<f64> { get(key)?.parse().map_err(|_| bad(format!("bad value for `{key}`"))) };
    let n = num("n")? as usize;
    let seed: u64 = get("seed")?.parse().map_err(|_| bad("bad seed".into()))?;
    let split_seed: u64 = get("split_seed")?.parse().map_err(|_| bad("bad split_seed".into()))?;
    if num("image_size")? as usize != IMAGE_SIZE {
        return Err(bad("unsupported image size".into()));
    }
    let eval_fraction = num("eval_fraction")?;
    let train = parse_indices(get("train_indices")?, &dpath)?;
    let eval = parse_indices(get("eval_indices")?, &dpath)?;

    let blob = fs::read(dir.join(IMAGES))?;
    let pixels = IMAGE_SIZE * IMAGE_SIZE;
    if blob.len() != n * pixels * 4 {
        return Err(Error::Format {
            path: dir.join(IMAGES).display().to_string(),
            reason: format!("expected {} bytes, found {}", n * pixels * 4, blob.len()),
        });
    }
    let mut r = csv::Reader::from_path(dir.join(SAMPLES)).map_err(csv_error)?;
    let mut samples = Vec::with_capacity(n);
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_error)?;
        let field = |j: usize| rec.get(j).unwrap_or("");
        let parse_err = || Error::Format {
            path: SAMPLES.into(),
            reason: format!("row {}", i + 1),
        };
        if field(0).parse::<usize>().map_err(|_| parse_err())? != i || i >= n {
            return Err(parse_err());
        }
        let image = blob[i * pixels * 4..(i + 1) * pixels * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        samples.push(SyntheticSample {
            image,
            label: field(1).parse().map_err(|_| parse_err())?,
            main_sigma2: field(2).parse().map_err(|_| parse_err())?,
            metadata_sigma2: field(3).parse().map_err(|_| parse_err())?,
        });
    }
    if samples.len() != n {
        return Err(bad(format!("descriptor says {n} samples, csv has {}", samples.len())));
    }
    let dataset = Dataset { seed, samples };
    let split = DatasetSplit::from_indices(&dataset, train, eval, eval_fraction, split_seed, intercept)?;
    Ok((dataset, split))
}

/// Accuracy of `value > threshold => group 1` over `(label, value)` pairs.
pub fn threshold_accuracy(pairs: impl IntoIterator<Item = (u8, f64)>, threshold: f64) -> f64 {
    let (mut hit, mut n) = (0usize, 0usize);
    for (label, v) in pairs {
        hit += usize::from(u8::from(v > threshold) == label);
        n += 1;
    }
    hit as f64 / n.max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadrant_closed_form_values() {
        let flat = render_gaussian_quadrant(1e6).unwrap();
        assert!(flat.data().iter().all(|&v| (v - 1.0).abs() < 1e-4));
        // the center lies between pixels; the pixel at squared distance d2
        // holds exp(-d2 / 2) for sigma2 = 1
        let g = render_gaussian_quadrant(1.0).unwrap();
        assert!((g.at(7, 7) - (-0.25f64).exp()).abs() < 1e-15);
        // one pixel further out along x adds 2 to d2: a factor e^-0.5 squared
        let ratio = g.at(7, 6) / g.at(7, 7);
        assert!((ratio - 0.6065306597126334f64.powi(2)).abs() < 1e-12);
        assert!(g.data().iter().all(|&v| v <= 1.0 && v > 0.0));
        assert!(matches!(render_gaussian_quadrant(0.0), Err(Error::NonPositiveVariance(_))));
        assert!(render_gaussian_quadrant(-1.0).is_err());
    }

    #[test]
    fn quadrant_is_symmetric_and_mass_grows() {
        let g = render_gaussian_quadrant(2.5).unwrap();
        for y in 0..QUADRANT {
            for x in 0..QUADRANT {
                let v = g.at(y, x);
                assert_eq!(v, g.at(QUADRANT - 1 - y, x));
                assert_eq!(v, g.at(y, QUADRANT - 1 - x));
                assert_eq!(v, g.at(x, y));
            }
        }
        let mass: Vec<f64> = (1..=6)
            .map(|s| render_gaussian_quadrant(s as f64).unwrap().data().iter().sum())
            .collect();
        assert!(mass.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn dataset_layout() {
        let d = generate_dataset(5, 40).unwrap();
        assert_eq!(d.len(), 80);
        assert_eq!(d.samples.iter().filter(|s| s.label == 1).count(), 40);
        for s in &d.samples {
            let (a, b) = if s.label == 0 { GROUP0_RANGE } else { GROUP1_RANGE };
            assert!(s.main_sigma2 >= a && s.main_sigma2 < b);
            assert!(s.metadata_sigma2 >= a && s.metadata_sigma2 < b);
            assert!(s.image.iter().all(|&v| (0.0..=1.0).contains(&v)));
            for y in 0..QUADRANT {
                for x in QUADRANT..IMAGE_SIZE {
                    assert_eq!(s.image[y * IMAGE_SIZE + x], 0.0);
                }
            }
            // Q2 and Q4 carry the same blob
            assert_eq!(s.image[5 * IMAGE_SIZE + 3], s.image[21 * IMAGE_SIZE + 19]);
        }
        assert_eq!(generate_dataset(5, 40).unwrap(), d);
        assert_ne!(generate_dataset(6, 40).unwrap(), d);
        assert!(generate_dataset(1, 0).is_err());
    }

    #[test]
    fn split_is_stratified_and_leak_free() {
        let d = generate_dataset(1, 1000).unwrap();
        let s = split(&d, 0.2, 3).unwrap();
        assert_eq!((s.train.len(), s.eval.len()), (1600, 400));
        assert_eq!(s.eval.iter().filter(|&&i| d.samples[i].label == 1).count(), 200);
        assert_eq!(split(&d, 0.2, 3).unwrap(), s);
        assert_ne!(split(&d, 0.2, 4).unwrap().eval, s.eval);

        let tm = s.train_meta.values();
        let col: Vec<f64> = (0..1600).map(|i| tm.at(i, 1)).collect();
        let mean = col.iter().sum::<f64>() / 1600.0;
        assert!(mean.abs() < 1e-9);
        assert_eq!(s.train_meta.n_cols(), 3);
        assert_eq!(s.eval_meta.n_cols(), 2);
        let em = s.eval_meta.values();
        let eval_mean = (0..400).map(|i| em.at(i, 1)).sum::<f64>() / 400.0;
        assert!(eval_mean != 0.0);
        assert!(split(&d, 0.0, 1).is_err());
        assert!(split(&d, 1.0, 1).is_err());
    }

    #[test]
    fn degenerate_split_rejected() {
        let d = generate_dataset(1, 3).unwrap();
        let r = DatasetSplit::from_indices(&d, vec![0, 1, 3, 4], vec![2], 0.2, 0, true);
        assert!(matches!(r, Err(Error::DegenerateSplit(_))));
    }

    #[test]
    fn persistence_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d = generate_dataset(9, 30).unwrap();
        let s = split(&d, 0.2, 9).unwrap();
        save_dataset(dir.path(), &d, &s).unwrap();
        let (d2, s2) = load_dataset(dir.path(), true).unwrap();
        assert_eq!(d2, d);
        assert_eq!(s2, s);
        let (_, s3) = load_dataset(dir.path(), false).unwrap();
        assert_eq!(s3.train_meta.n_cols(), 2);
    }
}
