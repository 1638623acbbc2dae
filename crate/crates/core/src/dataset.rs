//! Synthetic two-class 3D textures: randomly rotated and placed segments and
//! planar crosses, mixed 30/70 or 70/30.
//!
//! On disk a dataset is a directory holding `manifest.json` plus one binary
//! blob per split: magic `LRI3DVOL`, little-endian `u32` version, sample
//! count and the three volume dimensions, then per sample a `u8` label and
//! the voxels as little-endian `f32` in `(x, y, z)` row-major order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harmonics::EulerTriple;
use crate::volume::Volume;

pub const VOLUME_SIDE: usize = 32;
pub const PATTERN_SIDE: usize = 7;
pub const MIN_DENSITY: f64 = 0.1;
pub const MAX_DENSITY: f64 = 0.5;

const MAGIC: &[u8; 8] = b"LRI3DVOL";
const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PatternKind {
    Segment,
    Cross,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatternSpec {
    pub kind: PatternKind,
    pub side: usize,
    /// Binary support of the pattern.
    pub mask: Volume,
    pub intensity: f64,
}

impl PatternSpec {
    pub fn volume(&self) -> Volume {
        self.mask.map(|m| m * self.intensity)
    }
}

/// The segment (7 voxels along z through the centre) and the cross (lines
/// along x and y in the central z plane, 13 voxels) scaled to equal L2 norm.
pub fn canonical_patterns() -> (PatternSpec, PatternSpec) {
    let h = PATTERN_SIDE / 2;
    let segment = Volume::from_fn([PATTERN_SIDE; 3], |x, y, _| (x == h && y == h) as u8 as f64);
    let cross = Volume::from_fn([PATTERN_SIDE; 3], |x, y, z| {
        (z == h && (x == h || y == h)) as u8 as f64
    });
    let ratio = (segment.data().iter().sum::<f64>() / cross.data().iter().sum::<f64>()).sqrt();
    (
        PatternSpec {
            kind: PatternKind::Segment,
            side: PATTERN_SIDE,
            mask: segment,
            intensity: 1.0,
        },
        PatternSpec {
            kind: PatternKind::Cross,
            side: PATTERN_SIDE,
            mask: cross,
            intensity: ratio,
        },
    )
}

/// `floor(d (s_v / s_p)^3)`.
pub fn pattern_count(density: f64) -> usize {
    (density * (VOLUME_SIDE as f64 / PATTERN_SIDE as f64).powi(3)).floor() as usize
}

/// Fraction of segments for a class label (1 or 2).
pub fn segment_fraction(label: u8) -> Result<f64> {
    match label {
        1 => Ok(0.3),
        2 => Ok(0.7),
        _ => Err(Error::InvalidConfig(format!("class label {label} (expected 1 or 2)"))),
    }
}

pub fn segment_count(label: u8, count: usize) -> Result<usize> {
    Ok((segment_fraction(label)? * count as f64).round() as usize)
}

/// Uniform rotation: `alpha, gamma ~ U[0, 2pi)`, `cos beta ~ U[-1, 1]`.
pub fn random_rotation(rng: &mut impl Rng) -> EulerTriple {
    let tau = std::f64::consts::TAU;
    EulerTriple::new(rng.gen_range(0.0..tau), rng.gen_range(-1.0f64..=1.0).acos(), rng.gen_range(0.0..tau))
}

/// The pattern turned by `rot` about its centre (trilinear, zero outside):
/// a segment along z ends up along `R e_z`.
pub fn stamp(pattern: &Volume, rot: &EulerTriple) -> Volume {
    pattern.rotate_trilinear(&rot.to_matrix().transpose())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub kind: PatternKind,
    /// Lowest corner of the 7^3 stamp inside the volume.
    pub corner: [usize; 3],
    pub rotation: EulerTriple,
}

impl Placement {
    pub fn center(&self) -> [usize; 3] {
        let h = PATTERN_SIDE / 2;
        [self.corner[0] + h, self.corner[1] + h, self.corner[2] + h]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub label: u8,
    pub density: f64,
    pub count: usize,
    pub segments: usize,
    pub placements: Vec<Placement>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub volume: Volume,
    pub label: u8,
    pub record: GenerationRecord,
}

/// Renders placements into an empty volume, combining overlaps by maximum.
pub fn render(placements: &[Placement]) -> Volume {
    let (segment, cross) = canonical_patterns();
    let (segment, cross) = (segment.volume(), cross.volume());
    let mut out = Volume::cube(VOLUME_SIDE);
    for p in placements {
        let source = match p.kind {
            PatternKind::Segment => &segment,
            PatternKind::Cross => &cross,
        };
        let s = stamp(source, &p.rotation);
        for x in 0..PATTERN_SIDE {
            for y in 0..PATTERN_SIDE {
                for z in 0..PATTERN_SIDE {
                    let v = s.get(x, y, z);
                    let (a, b, c) = (x + p.corner[0], y + p.corner[1], z + p.corner[2]);
                    if v > out.get(a, b, c) {
                        out.set(a, b, c, v);
                    }
                }
            }
        }
    }
    out
}

/// One sample of class `label` from its own random stream.
pub fn generate_sample(label: u8, rng: &mut impl Rng) -> Result<SyntheticSample> {
    let fraction = segment_fraction(label)?;
    let density = rng.gen_range(MIN_DENSITY..=MAX_DENSITY);
    let count = pattern_count(density);
    let segments = (fraction * count as f64).round() as usize;
    let max_corner = VOLUME_SIDE - PATTERN_SIDE;
    let placements: Vec<Placement> = (0..count)
        .map(|i| {
            let rotation = random_rotation(rng);
            let corner = [
                rng.gen_range(0..=max_corner),
                rng.gen_range(0..=max_corner),
                rng.gen_range(0..=max_corner),
            ];
            Placement {
                kind: if i < segments { PatternKind::Segment } else { PatternKind::Cross },
                corner,
                rotation,
            }
        })
        .collect();
    Ok(SyntheticSample {
        volume: render(&placements),
        label,
        record: GenerationRecord {
            label,
            density,
            count,
            segments,
            placements,
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn stream_tag(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Test => 2,
        }
    }

    pub fn file_name(self) -> &'static str {
        match self {
            Split::Train => "train.bin",
            Split::Test => "test.bin",
        }
    }
}

/// Independent stream per `(seed, split, index)`.
pub fn sample_rng(seed: u64, split: Split, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((split.stream_tag() << 40) | index as u64);
    rng
}

/// Balanced labels: even indices class 1, odd indices class 2.
pub fn label_for_index(index: usize) -> u8 {
    1 + (index % 2) as u8
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
}

impl DatasetConfig {
    /// 200 training and 100 test volumes.
    pub fn desk(seed: u64) -> Self {
        Self {
            seed,
            n_train: 200,
            n_test: 100,
        }
    }

    /// 800 training and 200 test volumes.
    pub fn paper(seed: u64) -> Self {
        Self {
            seed,
            n_train: 800,
            n_test: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub train: Vec<SyntheticSample>,
    pub test: Vec<SyntheticSample>,
}

pub fn generate_split(seed: u64, split: Split, count: usize) -> Result<Vec<SyntheticSample>> {
    (0..count)
        .into_par_iter()
        .map(|i| generate_sample(label_for_index(i), &mut sample_rng(seed, split, i)))
        .collect()
}

pub fn generate_dataset(config: DatasetConfig) -> Result<Dataset> {
    Ok(Dataset {
        config,
        train: generate_split(config.seed, Split::Train, config.n_train)?,
        test: generate_split(config.seed, Split::Test, config.n_test)?,
    })
}

/// Volumes and 0-based class indices of a split.
pub fn split_arrays(samples: &[SyntheticSample]) -> (Vec<Volume>, Vec<usize>) {
    samples
        .iter()
        .map(|s| (s.volume.clone(), s.label as usize - 1))
        .unzip()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub file: String,
    pub count: usize,
    pub records: Vec<GenerationRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub volume_side: usize,
    pub pattern_side: usize,
    pub segment_intensity: f64,
    pub cross_intensity: f64,
    pub overlap: String,
    pub normalization: String,
    pub train: SplitManifest,
    pub test: SplitManifest,
}

impl Manifest {
    pub fn config(&self) -> DatasetConfig {
        DatasetConfig {
            seed: self.seed,
            n_train: self.n_train,
            n_test: self.n_test,
        }
    }
}

pub fn manifest_for(dataset: &Dataset) -> Manifest {
    let (segment, cross) = canonical_patterns();
    let split = |s: Split, samples: &[SyntheticSample]| SplitManifest {
        file: s.file_name().into(),
        count: samples.len(),
        records: samples.iter().map(|x| x.record.clone()).collect(),
    };
    Manifest {
        format_version: FORMAT_VERSION,
        seed: dataset.config.seed,
        n_train: dataset.config.n_train,
        n_test: dataset.config.n_test,
        volume_side: VOLUME_SIDE,
        pattern_side: PATTERN_SIDE,
        segment_intensity: segment.intensity,
        cross_intensity: cross.intensity,
        overlap: "max".into(),
        normalization: "none (raw generated values)".into(),
        train: split(Split::Train, &dataset.train),
        test: split(Split::Test, &dataset.test),
    }
}

pub fn write_volumes(path: &Path, volumes: &[(&Volume, u8)]) -> Result<()> {
    let shape = volumes.first().map(|v| v.0.shape()).unwrap_or([VOLUME_SIDE; 3]);
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(volumes.len() as u32).to_le_bytes())?;
    for d in shape {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for (v, label) in volumes {
        if v.shape() != shape {
            return Err(Error::Shape("all volumes of a blob share one shape".into()));
        }
        w.write_all(&[*label])?;
        for x in v.data() {
            w.write_all(&(*x as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_volumes(path: &Path) -> Result<Vec<(Volume, u8)>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("{}: bad magic", path.display())));
    }
    let mut word = [0u8; 4];
    let mut next = |r: &mut BufReader<File>| -> Result<u32> {
        r.read_exact(&mut word)?;
        Ok(u32::from_le_bytes(word))
    };
    let version = next(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported volume format version {version}")));
    }
    let count = next(&mut r)? as usize;
    let shape = [next(&mut r)? as usize, next(&mut r)? as usize, next(&mut r)? as usize];
    let voxels = shape.iter().product::<usize>();
    let mut bytes = vec![0u8; voxels * 4];
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut label = [0u8; 1];
        r.read_exact(&mut label)?;
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        out.push((Volume::new(shape, data)?, label[0]));
    }
    if r.read(&mut [0u8; 1])? != 0 {
        return Err(Error::Format(format!("{}: trailing bytes", path.display())));
    }
    Ok(out)
}

/// Writes the manifest and both split blobs into `dir` (created if needed).
pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (split, samples) in [(Split::Train, &dataset.train), (Split::Test, &dataset.test)] {
        let items: Vec<(&Volume, u8)> = samples.iter().map(|s| (&s.volume, s.label)).collect();
        write_volumes(&dir.join(split.file_name()), &items)?;
    }
    let manifest = serde_json::to_string_pretty(&manifest_for(dataset))?;
    std::fs::write(dir.join(MANIFEST_FILE), manifest)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    Ok(serde_json::from_str(&std::fs::read_to_string(dir.join(MANIFEST_FILE))?)?)
}

/// Volumes and 0-based classes of one split of a dataset directory.
pub fn read_split(dir: &Path, split: Split) -> Result<(Vec<Volume>, Vec<usize>)> {
    let items = read_volumes(&dir.join(split.file_name()))?;
    let mut volumes = Vec::with_capacity(items.len());
    let mut classes = Vec::with_capacity(items.len());
    for (v, label) in items {
        segment_fraction(label)?;
        volumes.push(v);
        classes.push(label as usize - 1);
    }
    Ok((volumes, classes))
}
