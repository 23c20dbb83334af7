//! Samples, the IMG1 image container, CSV manifests, 8:1:1 splitting,
//! cropping and the procedural face-proxy generator.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::{AttributeLabels, AttributeSchema};
use crate::model::Batch;
use crate::tensor::Tensor;

pub const IMAGE_MAGIC: &[u8; 4] = b"IMG1";
pub const MANIFEST_HEADER: [&str; 4] = ["path", "age", "gender", "ethnicity"];

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// 3×H×W, values in [0, 1].
    pub image: Tensor,
    pub age: i32,
    pub gender: usize,
    pub ethnicity: usize,
}

impl Sample {
    pub fn attributes(&self, schema: &AttributeSchema) -> Result<AttributeLabels> {
        AttributeLabels::new(self.age, self.gender, self.ethnicity, schema)
    }
}

pub fn encode_image(image: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = match image.shape() {
        [3, h, w] => (*h, *w),
        s => return Err(Error::shape("encode_image", format!("expected 3×H×W, got {s:?}"))),
    };
    let mut out = Vec::with_capacity(12 + 4 * image.numel());
    out.extend_from_slice(IMAGE_MAGIC);
    for d in [h, w] {
        let d = u32::try_from(d).map_err(|_| Error::invalid("image dimension exceeds u32"))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in image.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_image(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let bad = |detail: String| Error::format(path, detail);
    if bytes.len() < 12 {
        return Err(bad(format!("{} bytes is shorter than the 12-byte header", bytes.len())));
    }
    if &bytes[..4] != IMAGE_MAGIC {
        return Err(bad(format!("bad magic {:?}", &bytes[..4])));
    }
    let h = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let w = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let expect = 12 + 4 * 3 * h * w;
    if bytes.len() != expect {
        return Err(bad(format!("{h}×{w} image needs {expect} bytes, file has {}", bytes.len())));
    }
    let data = bytes[12..]
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
        .collect();
    Tensor::new([3, h, w], data)
}

pub fn write_image(path: &Path, image: &Tensor) -> Result<()> {
    fs::write(path, encode_image(image)?).map_err(|e| Error::io(path, e))
}

pub fn read_image(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes, path)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Resolved against the manifest's directory.
    pub path: PathBuf,
    pub age: i32,
    pub gender: usize,
    pub ethnicity: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rejection {
    pub line: usize,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    pub rejected: Vec<Rejection>,
    pub warnings: Vec<String>,
}

fn label_problem(age: i32, gender: usize, ethnicity: usize, schema: &AttributeSchema) -> Option<String> {
    if age < schema.a_min || age > schema.a_max {
        return Some(format!("age {age} outside {}..={}", schema.a_min, schema.a_max));
    }
    AttributeLabels::new(age, gender, ethnicity, schema).err().map(|e| e.to_string())
}

/// Reads a `path,age,gender,ethnicity` manifest.
///
/// Rows whose labels fall outside `schema` or whose image is missing are
/// collected in `rejected` with their line number; unparsable rows and a
/// repeated header are errors.
pub fn load_manifest(path: &Path, schema: &AttributeSchema) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut out = Manifest::default();
    let mut records = reader.records();
    match records.next() {
        None => return Err(Error::format(path, "empty file: missing header path,age,gender,ethnicity")),
        Some(r) => {
            let r = r.map_err(|e| Error::format(path, format!("line 1: {e}")))?;
            if r.iter().ne(MANIFEST_HEADER) {
                return Err(Error::format(
                    path,
                    format!("line 1: header must be path,age,gender,ethnicity, got {:?}", r.iter().collect::<Vec<_>>()),
                ));
            }
        }
    }
    for rec in records {
        let rec = rec.map_err(|e| Error::format(path, e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.iter().eq(MANIFEST_HEADER) {
            return Err(Error::format(path, format!("line {line}: duplicate header")));
        }
        if rec.len() != 4 {
            return Err(Error::format(path, format!("line {line}: expected 4 fields, got {}", rec.len())));
        }
        let int = |i: usize| -> Result<i64> {
            rec[i].parse::<i64>().map_err(|_| {
                Error::format(path, format!("line {line}: {} `{}` is not an integer", MANIFEST_HEADER[i], &rec[i]))
            })
        };
        let (age, gender, ethnicity) = (int(1)?, int(2)?, int(3)?);
        let reject = |reason: String| Rejection { line, reason };
        let (Ok(age), Ok(gender), Ok(ethnicity)) =
            (i32::try_from(age), usize::try_from(gender), usize::try_from(ethnicity))
        else {
            out.rejected.push(reject(format!("labels ({age}, {gender}, {ethnicity}) out of range")));
            continue;
        };
        if let Some(reason) = label_problem(age, gender, ethnicity, schema) {
            out.rejected.push(reject(reason));
            continue;
        }
        let image = base.join(&rec[0]);
        if !image.is_file() {
            out.rejected.push(reject(format!("image {} not found", image.display())));
            continue;
        }
        out.entries.push(ManifestEntry {
            path: image,
            age,
            gender,
            ethnicity,
        });
    }
    if out.entries.is_empty() && out.rejected.is_empty() {
        out.warnings.push(format!("{}: manifest has no rows", path.display()));
    }
    Ok(out)
}

/// Writes a manifest whose paths are relative to its own directory.
pub fn write_manifest(path: &Path, rows: &[(String, i32, usize, usize)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::format(path, e.to_string());
    w.write_record(MANIFEST_HEADER).map_err(csv_err)?;
    for (p, age, gender, eth) in rows {
        w.write_record([p.clone(), age.to_string(), gender.to_string(), eth.to_string()])
            .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::format(path, e.to_string()))?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load_samples(entries: &[ManifestEntry]) -> Result<Vec<Sample>> {
    entries
        .iter()
        .map(|e| {
            let image = read_image(&e.path)?;
            if !image.is_finite() {
                return Err(Error::format(&e.path, "image contains non-finite values"));
            }
            Ok(Sample {
                image,
                age: e.age,
                gender: e.gender,
                ethnicity: e.ethnicity,
            })
        })
        .collect()
}

/// Seeded shuffle, then `floor(n/10)` each for validation and test and the
/// remainder for training.
pub fn split_811<T: Clone>(entries: &[T], seed: u64) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    if entries.len() < 10 {
        return Err(Error::invalid(format!("need at least 10 entries to split, got {}", entries.len())));
    }
    let mut order: Vec<usize> = (0..entries.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let tenth = entries.len() / 10;
    let pick = |idx: &[usize]| idx.iter().map(|&i| entries[i].clone()).collect::<Vec<_>>();
    let (val, rest) = order.split_at(tenth);
    let (test, train) = rest.split_at(tenth);
    Ok((pick(train), pick(val), pick(test)))
}

pub fn crop_at(image: &Tensor, size: usize, top: usize, left: usize) -> Result<Tensor> {
    let (c, h, w) = match image.shape() {
        [c, h, w] => (*c, *h, *w),
        s => return Err(Error::shape("crop", format!("expected C×H×W, got {s:?}"))),
    };
    if size == 0 || top + size > h || left + size > w {
        return Err(Error::invalid(format!(
            "crop {size}×{size} at ({top}, {left}) does not fit a {h}×{w} image"
        )));
    }
    if size == h && size == w {
        return Ok(image.clone());
    }
    let src = image.data();
    let mut out = Vec::with_capacity(c * size * size);
    for ch in 0..c {
        for y in top..top + size {
            let row = (ch * h + y) * w;
            out.extend_from_slice(&src[row + left..row + left + size]);
        }
    }
    Tensor::new([c, size, size], out)
}

/// Offset drawn uniformly from every position where the crop fits.
pub fn random_crop<R: Rng + ?Sized>(image: &Tensor, size: usize, rng: &mut R) -> Result<Tensor> {
    let (h, w) = match image.shape() {
        [_, h, w] => (*h, *w),
        s => return Err(Error::shape("random_crop", format!("expected C×H×W, got {s:?}"))),
    };
    if size > h || size > w {
        return Err(Error::invalid(format!("crop {size} exceeds image {h}×{w}")));
    }
    let top = rng.gen_range(0..=h - size);
    let left = rng.gen_range(0..=w - size);
    crop_at(image, size, top, left)
}

pub fn center_crop(image: &Tensor, size: usize) -> Result<Tensor> {
    let (h, w) = match image.shape() {
        [_, h, w] => (*h, *w),
        s => return Err(Error::shape("center_crop", format!("expected C×H×W, got {s:?}"))),
    };
    if size > h || size > w {
        return Err(Error::invalid(format!("crop {size} exceeds image {h}×{w}")));
    }
    crop_at(image, size, (h - size) / 2, (w - size) / 2)
}

/// Stacks samples into an N×3×S×S batch with labels under `schema`.
pub fn collate(samples: &[&Sample], schema: &AttributeSchema) -> Result<Batch> {
    let first = samples
        .first()
        .ok_or_else(|| Error::invalid("cannot build an empty batch"))?;
    let shape = first.image.shape().to_vec();
    let mut data = Vec::with_capacity(samples.len() * first.image.numel());
    for s in samples {
        if s.image.shape() != shape.as_slice() {
            return Err(Error::shape("collate", format!("{:?} vs {:?}", s.image.shape(), shape)));
        }
        data.extend_from_slice(s.image.data());
    }
    let mut batch_shape = vec![samples.len()];
    batch_shape.extend(shape);
    Ok(Batch {
        images: Tensor::new(batch_shape, data)?,
        ages: samples.iter().map(|s| s.age).collect(),
        attributes: samples.iter().map(|s| s.attributes(schema)).collect::<Result<_>>()?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub resolution: usize,
    pub a_min: i32,
    pub a_max: i32,
    pub noise_sigma: f64,
    pub seed: u64,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SyntheticSpec {
    pub fn count(&self) -> usize {
        self.train + self.val + self.test
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution < 4 {
            return Err(Error::invalid(format!("synthetic resolution {} is below 4", self.resolution)));
        }
        if self.a_min >= self.a_max {
            return Err(Error::invalid("synthetic a_min must be below a_max"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::invalid(format!("noise_sigma {} must be finite and ≥ 0", self.noise_sigma)));
        }
        Ok(())
    }

    /// Sample indices of the train, validation and test partitions.
    pub fn ranges(&self) -> [std::ops::Range<usize>; 3] {
        let a = self.train;
        let b = a + self.val;
        [0..a, a..b, b..b + self.test]
    }
}

/// Per-channel gains of the radial pattern, indexed by ethnicity.
const CHANNEL_ORDERS: [[usize; 3]; 4] = [[0, 1, 2], [1, 2, 0], [2, 0, 1], [0, 2, 1]];
const GAINS: [f64; 3] = [1.0, 0.6, 0.2];

/// Radial cycles from the centre to the edge for `age`.
pub fn radial_frequency(age: i32, a_min: i32, a_max: i32) -> f64 {
    1.0 + 6.0 * f64::from(age - a_min) / f64::from(a_max - a_min)
}

/// Renders the face proxy for fixed labels. Values are rounded to f32 so
/// images survive the IMG1 round trip unchanged.
pub fn render<R: Rng + ?Sized>(
    spec: &SyntheticSpec,
    age: i32,
    gender: usize,
    ethnicity: usize,
    rng: &mut R,
) -> Result<Tensor> {
    let res = spec.resolution;
    let f = radial_frequency(age, spec.a_min, spec.a_max);
    let sign = if gender.is_multiple_of(2) { 1.0 } else { -1.0 };
    let order = CHANNEL_ORDERS[ethnicity % CHANNEL_ORDERS.len()];
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::invalid(e.to_string()))?;
    let half = res as f64 / 2.0;
    let mut data = Vec::with_capacity(3 * res * res);
    for &gain_idx in &order {
        let gain = GAINS[gain_idx];
        for y in 0..res {
            for x in 0..res {
                let dx = x as f64 + 0.5 - half;
                let dy = y as f64 + 0.5 - half;
                let r = (dx * dx + dy * dy).sqrt() / half;
                let ramp = sign * dx / half;
                let mut v = 0.5 + 0.25 * gain * (2.0 * std::f64::consts::PI * f * r).cos() + 0.2 * ramp;
                if spec.noise_sigma > 0.0 {
                    v += noise.sample(rng);
                }
                data.push(f64::from(v.clamp(0.0, 1.0) as f32));
            }
        }
    }
    Tensor::new([3, res, res], data)
}

/// Deterministic sample `index` of `spec`.
pub fn synth_generate(spec: &SyntheticSpec, index: usize) -> Result<Sample> {
    spec.validate()?;
    if index >= spec.count() {
        return Err(Error::invalid(format!("index {index} ≥ sample count {}", spec.count())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let age = rng.gen_range(spec.a_min..=spec.a_max);
    let gender = rng.gen_range(0..2);
    let ethnicity = rng.gen_range(0..4);
    let image = render(spec, age, gender, ethnicity, &mut rng)?;
    Ok(Sample {
        image,
        age,
        gender,
        ethnicity,
    })
}

pub fn synth_split(spec: &SyntheticSpec) -> Result<[Vec<Sample>; 3]> {
    let [a, b, c] = spec.ranges();
    let gen = |r: std::ops::Range<usize>| r.map(|i| synth_generate(spec, i)).collect::<Result<Vec<_>>>();
    Ok([gen(a)?, gen(b)?, gen(c)?])
}

/// Writes `count` samples of `spec` as IMG1 files plus `manifest.csv`.
pub fn write_synthetic(spec: &SyntheticSpec, dir: &Path) -> Result<PathBuf> {
    spec.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut rows = Vec::with_capacity(spec.count());
    for i in 0..spec.count() {
        let s = synth_generate(spec, i)?;
        let name = format!("{i:06}.img");
        write_image(&dir.join(&name), &s.image)?;
        rows.push((name, s.age, s.gender, s.ethnicity));
    }
    let manifest = dir.join("manifest.csv");
    write_manifest(&manifest, &rows)?;
    Ok(manifest)
}
