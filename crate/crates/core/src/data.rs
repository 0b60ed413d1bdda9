//! Samples, pools, and the synthetic phantom benchmark.
//!
//! A [`Volume`] is a stack of 2-D intensity slices with per-pixel class
//! labels. Acquisition operates either on whole volumes or on individual
//! slices; [`SampleKey`] names one acquisition unit and [`PoolState`] tracks
//! the training/unlabeled/validation/test partition.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::rng::substream;

const INTENSITY_MAGIC: &[u8; 4] = b"BALI";
const LABEL_MAGIC: &[u8; 4] = b"BALL";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("phantom grid {0}x{1} is below the 16x16 minimum")]
    GridTooSmall(usize, usize),
    #[error("phantom needs at least one foreground class")]
    NoClasses,
    #[error("noise sigma must be nonnegative, got {0}")]
    NegativeSigma(f64),
    #[error("split counts sum to {given} but {actual} volumes were provided")]
    SplitCountMismatch { given: usize, actual: usize },
    #[error("initial training pool must hold at least one volume")]
    EmptyTrainSplit,
    #[error("sample {0} is not in the unlabeled pool")]
    NotInUnlabeled(SampleKey),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: checksum mismatch (manifest {expected}, file {actual})")]
    ChecksumMismatch {
        path: PathBuf,
        expected: String,
        actual: String,
    },
    #[error("{path}: {reason}")]
    BadFile { path: PathBuf, reason: String },
    #[error("manifest {path}: {reason}")]
    BadManifest { path: PathBuf, reason: String },
}

impl DataError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Cohort tag; the two cohorts carry different structure-size priors so
/// diversity-aware selection has heterogeneity to exploit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Cohort {
    Large,
    Small,
}

impl Cohort {
    pub fn as_str(self) -> &'static str {
        match self {
            Cohort::Large => "large",
            Cohort::Small => "small",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "large" => Some(Cohort::Large),
            "small" => Some(Cohort::Small),
            _ => None,
        }
    }
}

/// An intensity grid stack with per-voxel labels; the atomic unit of
/// acquisition under the volume-wise rule.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub id: String,
    pub cohort: Cohort,
    pub height: usize,
    pub width: usize,
    pub depth: usize,
    /// Row-major, slice-major intensities in [0,1].
    pub intensities: Vec<f32>,
    /// Same layout as `intensities`; 0 = background, foreground in 1..=C.
    pub labels: Vec<u8>,
}

impl Volume {
    pub fn slice_len(&self) -> usize {
        self.height * self.width
    }

    pub fn slice_intensities(&self, z: usize) -> &[f32] {
        let n = self.slice_len();
        &self.intensities[z * n..(z + 1) * n]
    }

    pub fn slice_labels(&self, z: usize) -> &[u8] {
        let n = self.slice_len();
        &self.labels[z * n..(z + 1) * n]
    }
}

/// One acquisition unit: a whole volume, or a single slice of one.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SampleKey {
    pub volume: String,
    pub slice: Option<usize>,
}

impl SampleKey {
    pub fn volume(id: &str) -> Self {
        SampleKey {
            volume: id.to_string(),
            slice: None,
        }
    }

    pub fn slice(id: &str, z: usize) -> Self {
        SampleKey {
            volume: id.to_string(),
            slice: Some(z),
        }
    }
}

impl fmt::Display for SampleKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.slice {
            Some(z) => write!(f, "{}/{}", self.volume, z),
            None => write!(f, "{}", self.volume),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AcquisitionRule {
    VolumeWise,
    SliceWise,
}

impl AcquisitionRule {
    pub fn as_str(self) -> &'static str {
        match self {
            AcquisitionRule::VolumeWise => "volume",
            AcquisitionRule::SliceWise => "slice",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "volume" => Some(AcquisitionRule::VolumeWise),
            "slice" => Some(AcquisitionRule::SliceWise),
            _ => None,
        }
    }
}

/// The training/unlabeled/validation/test partition at acquisition-unit
/// granularity. Mutations go through [`PoolState::move_to_training`]; the
/// experiment loop owns the only mutable reference.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolState {
    pub training: Vec<SampleKey>,
    pub unlabeled: Vec<SampleKey>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
    pub rule: AcquisitionRule,
}

impl PoolState {
    /// Move `selected` units from the unlabeled to the training pool. Fails
    /// without modifying anything if any key is not currently unlabeled.
    pub fn move_to_training(&mut self, selected: &[SampleKey]) -> Result<(), DataError> {
        let unlabeled: HashSet<&SampleKey> = self.unlabeled.iter().collect();
        let mut seen = HashSet::new();
        for key in selected {
            if !unlabeled.contains(key) || !seen.insert(key) {
                return Err(DataError::NotInUnlabeled(key.clone()));
            }
        }
        let chosen: HashSet<&SampleKey> = selected.iter().collect();
        self.unlabeled.retain(|k| !chosen.contains(k));
        self.training.extend(selected.iter().cloned());
        Ok(())
    }
}

/// In-memory dataset with id lookup.
#[derive(Debug, Clone)]
pub struct Dataset {
    volumes: Vec<Volume>,
    index: HashMap<String, usize>,
    classes: u8,
}

impl Dataset {
    pub fn new(volumes: Vec<Volume>, classes: u8) -> Self {
        let index = volumes
            .iter()
            .enumerate()
            .map(|(i, v)| (v.id.clone(), i))
            .collect();
        Dataset {
            volumes,
            index,
            classes,
        }
    }

    pub fn classes(&self) -> u8 {
        self.classes
    }

    pub fn volumes(&self) -> &[Volume] {
        &self.volumes
    }

    pub fn volume(&self, id: &str) -> Option<&Volume> {
        self.index.get(id).map(|&i| &self.volumes[i])
    }
}

/// Geometry and noise settings for the synthetic phantom benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomConfig {
    pub volumes: usize,
    pub height: usize,
    pub width: usize,
    pub depth: usize,
    /// Number of foreground classes C; labels live in 0..=C.
    pub classes: u8,
    /// Standard deviation of the additive clipped Gaussian intensity noise.
    pub noise_sigma: f64,
    /// Every n-th volume belongs to the small-structure cohort.
    pub small_every: usize,
    /// Structure radius multiplier for the small cohort.
    pub small_scale: f64,
    /// Additive intensity-level shift for the small cohort.
    pub small_intensity_shift: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            volumes: 30,
            height: 64,
            width: 64,
            depth: 16,
            classes: 4,
            noise_sigma: 0.04,
            small_every: 3,
            small_scale: 0.6,
            small_intensity_shift: 0.08,
        }
    }
}

/// Generate the deterministic phantom dataset: each volume holds C
/// elliptical structures whose cross-sections vary smoothly along depth,
/// with cohort-dependent scale and additive clipped Gaussian noise.
/// Identical `(seed, config)` yields bit-identical volumes.
pub fn generate_phantom(seed: u64, config: &PhantomConfig) -> Result<Vec<Volume>, DataError> {
    if config.height < 16 || config.width < 16 {
        return Err(DataError::GridTooSmall(config.height, config.width));
    }
    if config.classes < 1 {
        return Err(DataError::NoClasses);
    }
    if config.noise_sigma < 0.0 {
        return Err(DataError::NegativeSigma(config.noise_sigma));
    }
    let c = config.classes as usize;
    let (h, w, d) = (config.height, config.width, config.depth);
    let mut volumes = Vec::with_capacity(config.volumes);
    for v in 0..config.volumes {
        let mut rng = substream(seed, "phantom", v as u64);
        let cohort = if config.small_every >= 1 && v % config.small_every == 0 {
            Cohort::Small
        } else {
            Cohort::Large
        };
        let (scale, shift) = match cohort {
            Cohort::Large => (1.0, 0.0),
            Cohort::Small => (config.small_scale, config.small_intensity_shift),
        };

        // Per-volume intensity levels: constant per class so that the
        // zero-noise dataset is piecewise constant per structure.
        let background = 0.05 + rng.gen_range(-0.02..0.02);
        let mut levels = vec![background];
        for cls in 1..=c {
            levels.push(0.18 + 0.15 * (cls - 1) as f64 + shift + rng.gen_range(-0.02..0.02));
        }

        // One blob per class, centred near its own sector of the grid.
        struct Blob {
            cx: f64,
            cy: f64,
            rx: f64,
            ry: f64,
            phase: f64,
            drift_phase: f64,
        }
        let blobs: Vec<Blob> = (0..c)
            .map(|cls| {
                let angle = 2.0 * std::f64::consts::PI * (cls as f64 + 0.5) / c as f64;
                let cx = w as f64 * (0.5 + 0.24 * angle.cos()) + rng.gen_range(-0.05..0.05) * w as f64;
                let cy = h as f64 * (0.5 + 0.24 * angle.sin()) + rng.gen_range(-0.05..0.05) * h as f64;
                let rx = 0.16 * w as f64 * scale * (1.0 + rng.gen_range(-0.15..0.15));
                let ry = 0.16 * h as f64 * scale * (1.0 + rng.gen_range(-0.15..0.15));
                Blob {
                    cx,
                    cy,
                    rx,
                    ry,
                    phase: rng.gen_range(0.0..std::f64::consts::TAU),
                    drift_phase: rng.gen_range(0.0..std::f64::consts::TAU),
                }
            })
            .collect();

        let mut labels = vec![0u8; h * w * d];
        for z in 0..d {
            let t = z as f64 / d.max(1) as f64;
            for (cls, blob) in blobs.iter().enumerate() {
                let mod_r = 0.8 + 0.2 * (std::f64::consts::TAU * t + blob.phase).sin();
                let rx = blob.rx * mod_r;
                let ry = blob.ry * mod_r;
                let cx = blob.cx
                    + 0.04 * w as f64 * (std::f64::consts::TAU * t + blob.drift_phase).sin();
                let cy = blob.cy
                    + 0.04 * h as f64 * (std::f64::consts::TAU * t + blob.drift_phase).cos();
                for y in 0..h {
                    for x in 0..w {
                        let dx = (x as f64 - cx) / rx;
                        let dy = (y as f64 - cy) / ry;
                        if dx * dx + dy * dy <= 1.0 {
                            labels[(z * h + y) * w + x] = (cls + 1) as u8;
                        }
                    }
                }
            }
        }

        let noise = Normal::new(0.0, config.noise_sigma.max(f64::MIN_POSITIVE)).unwrap();
        let intensities: Vec<f32> = labels
            .iter()
            .map(|&l| {
                let n = if config.noise_sigma > 0.0 {
                    noise.sample(&mut rng)
                } else {
                    0.0
                };
                (levels[l as usize] + n).clamp(0.0, 1.0) as f32
            })
            .collect();

        volumes.push(Volume {
            id: format!("vol{v:03}"),
            cohort,
            height: h,
            width: w,
            depth: d,
            intensities,
            labels,
        });
    }
    Ok(volumes)
}

/// Randomly partition volumes into training/unlabeled/validation/test pools.
/// The training and unlabeled pools expand to slice keys under the
/// slice-wise rule.
pub fn split_pools(
    volumes: &[Volume],
    counts: (usize, usize, usize, usize),
    rule: AcquisitionRule,
    seed: u64,
) -> Result<PoolState, DataError> {
    let (n_train, n_unlabeled, n_val, n_test) = counts;
    let total = n_train + n_unlabeled + n_val + n_test;
    if total != volumes.len() {
        return Err(DataError::SplitCountMismatch {
            given: total,
            actual: volumes.len(),
        });
    }
    if n_train < 1 {
        return Err(DataError::EmptyTrainSplit);
    }
    let mut order: Vec<usize> = (0..volumes.len()).collect();
    order.shuffle(&mut substream(seed, "split", 0));

    let expand = |ids: &[usize]| -> Vec<SampleKey> {
        ids.iter()
            .flat_map(|&i| {
                let v = &volumes[i];
                match rule {
                    AcquisitionRule::VolumeWise => vec![SampleKey::volume(&v.id)],
                    AcquisitionRule::SliceWise => {
                        (0..v.depth).map(|z| SampleKey::slice(&v.id, z)).collect()
                    }
                }
            })
            .collect()
    };

    let train_ids = &order[..n_train];
    let unlabeled_ids = &order[n_train..n_train + n_unlabeled];
    let val_ids = &order[n_train + n_unlabeled..n_train + n_unlabeled + n_val];
    let test_ids = &order[n_train + n_unlabeled + n_val..];

    Ok(PoolState {
        training: expand(train_ids),
        unlabeled: expand(unlabeled_ids),
        validation: val_ids.iter().map(|&i| volumes[i].id.clone()).collect(),
        test: test_ids.iter().map(|&i| volumes[i].id.clone()).collect(),
        rule,
    })
}

/// One manifest record per on-disk file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub path: String,
    pub depth: usize,
    pub cohort: Cohort,
    pub checksum: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub classes: u8,
    pub entries: Vec<ManifestEntry>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn encode_header(magic: &[u8; 4], height: usize, width: usize, depth: usize) -> [u8; 16] {
    let mut buf = [0u8; 16];
    buf[..4].copy_from_slice(magic);
    buf[4..8].copy_from_slice(&(height as u32).to_le_bytes());
    buf[8..12].copy_from_slice(&(width as u32).to_le_bytes());
    buf[12..16].copy_from_slice(&(depth as u32).to_le_bytes());
    buf
}

fn decode_header(path: &Path, bytes: &[u8], magic: &[u8; 4]) -> Result<(usize, usize, usize), DataError> {
    if bytes.len() < 16 || &bytes[..4] != magic {
        return Err(DataError::BadFile {
            path: path.to_path_buf(),
            reason: "bad magic or truncated header".into(),
        });
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    Ok((dim(4), dim(8), dim(12)))
}

/// Write volumes to `dir` (one intensity file and one label file each, flat
/// little-endian payloads behind a 16-byte header) plus a `manifest.tsv`.
pub fn save_dataset(volumes: &[Volume], dir: &Path, classes: u8) -> Result<DatasetManifest, DataError> {
    std::fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
    let mut entries = Vec::new();
    for v in volumes {
        let mut intensity = encode_header(INTENSITY_MAGIC, v.height, v.width, v.depth).to_vec();
        for &value in &v.intensities {
            intensity.extend_from_slice(&value.to_le_bytes());
        }
        let mut label = encode_header(LABEL_MAGIC, v.height, v.width, v.depth).to_vec();
        label.extend_from_slice(&v.labels);

        for (name, bytes) in [(format!("{}.int", v.id), intensity), (format!("{}.lbl", v.id), label)] {
            let path = dir.join(&name);
            let mut file = std::fs::File::create(&path).map_err(|e| DataError::io(&path, e))?;
            file.write_all(&bytes).map_err(|e| DataError::io(&path, e))?;
            entries.push(ManifestEntry {
                id: v.id.clone(),
                path: name,
                depth: v.depth,
                cohort: v.cohort,
                checksum: sha256_hex(&bytes),
            });
        }
    }
    let manifest = DatasetManifest { classes, entries };
    let manifest_path = dir.join("manifest.tsv");
    let mut out = String::new();
    out.push_str(&format!("#bal-manifest\tv1\tclasses={}\n", manifest.classes));
    for e in &manifest.entries {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            e.id,
            e.path,
            e.depth,
            e.cohort.as_str(),
            e.checksum
        ));
    }
    std::fs::write(&manifest_path, out).map_err(|e| DataError::io(&manifest_path, e))?;
    Ok(manifest)
}

/// Load a dataset from its manifest; verifies every file checksum and the
/// manifest/file dimension agreement.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset, DataError> {
    let bad = |reason: &str| DataError::BadManifest {
        path: manifest_path.to_path_buf(),
        reason: reason.to_string(),
    };
    let text = std::fs::read_to_string(manifest_path).map_err(|e| DataError::io(manifest_path, e))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad("empty manifest"))?;
    let classes: u8 = header
        .strip_prefix("#bal-manifest\tv1\tclasses=")
        .and_then(|c| c.parse().ok())
        .ok_or_else(|| bad("unrecognized manifest header"))?;

    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    struct Pending {
        cohort: Cohort,
        depth: usize,
        intensity: Option<(usize, usize, usize, Vec<f32>)>,
        labels: Option<(usize, usize, usize, Vec<u8>)>,
        order: usize,
    }
    let mut pending: HashMap<String, Pending> = HashMap::new();
    let mut order = 0usize;
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [id, rel_path, depth, cohort, checksum] = fields[..] else {
            return Err(bad(&format!("malformed record: {line:?}")));
        };
        let depth: usize = depth.parse().map_err(|_| bad("bad depth field"))?;
        let cohort = Cohort::parse(cohort).ok_or_else(|| bad("bad cohort field"))?;
        let path = dir.join(rel_path);
        let mut bytes = Vec::new();
        std::fs::File::open(&path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| DataError::io(&path, e))?;
        let actual = sha256_hex(&bytes);
        if actual != checksum {
            return Err(DataError::ChecksumMismatch {
                path,
                expected: checksum.to_string(),
                actual,
            });
        }
        let entry = pending.entry(id.to_string()).or_insert_with(|| {
            order += 1;
            Pending {
                cohort,
                depth,
                intensity: None,
                labels: None,
                order: order - 1,
            }
        });
        if rel_path.ends_with(".int") {
            let (h, w, d) = decode_header(&path, &bytes, INTENSITY_MAGIC)?;
            let payload = &bytes[16..];
            if payload.len() != h * w * d * 4 {
                return Err(DataError::BadFile {
                    path,
                    reason: "intensity payload size mismatch".into(),
                });
            }
            let values = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            entry.intensity = Some((h, w, d, values));
        } else if rel_path.ends_with(".lbl") {
            let (h, w, d) = decode_header(&path, &bytes, LABEL_MAGIC)?;
            let payload = &bytes[16..];
            if payload.len() != h * w * d {
                return Err(DataError::BadFile {
                    path,
                    reason: "label payload size mismatch".into(),
                });
            }
            entry.labels = Some((h, w, d, payload.to_vec()));
        } else {
            return Err(bad(&format!("unknown file kind: {rel_path}")));
        }
        if depth != entry.depth {
            return Err(bad(&format!("inconsistent depth for volume {id}")));
        }
    }

    let mut items: Vec<(String, Pending)> = pending.into_iter().collect();
    items.sort_by_key(|(_, p)| p.order);
    let mut volumes = Vec::with_capacity(items.len());
    for (id, p) in items {
        let (ih, iw, idp, intensities) = p
            .intensity
            .ok_or_else(|| bad(&format!("volume {id} missing intensity file")))?;
        let (lh, lw, ld, labels) = p
            .labels
            .ok_or_else(|| bad(&format!("volume {id} missing label file")))?;
        if (ih, iw, idp) != (lh, lw, ld) {
            return Err(bad(&format!("volume {id}: intensity/label dimension mismatch")));
        }
        if idp != p.depth {
            return Err(bad(&format!("volume {id}: manifest depth {} != file depth {idp}", p.depth)));
        }
        if labels.iter().any(|&l| l > classes) {
            return Err(bad(&format!("volume {id}: label exceeds class count {classes}")));
        }
        volumes.push(Volume {
            id,
            cohort: p.cohort,
            height: ih,
            width: iw,
            depth: idp,
            intensities,
            labels,
        });
    }
    Ok(Dataset::new(volumes, classes))
}
