//! Synthetic two-contrast head phantoms, inter-scan motion, normalisation,
//! dataset splits and the on-disk record format.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fourier::ComplexImage;
use crate::geometry::{apply_rigid, RigidParams};
use crate::par;

pub const RECORD_MAGIC: [u8; 4] = *b"DDMR";
pub const RECORD_FORMAT_VERSION: u16 = 1;

/// Tissue classes painted into the phantom.
pub mod class {
    pub const BACKGROUND: u8 = 0;
    pub const SCALP: u8 = 1;
    pub const GREY: u8 = 2;
    pub const WHITE: u8 = 3;
    pub const FLUID: u8 = 4;
    pub const LESION: u8 = 5;
    pub const COUNT: usize = 6;
}

/// T1-weighted-like brightness per class.
pub const REFERENCE_TABLE: [f64; class::COUNT] = [0.0, 0.35, 0.6, 1.0, 0.12, 0.45];
/// T2-weighted-like brightness per class: fluid and lesions bright, white
/// matter dark.
pub const TARGET_TABLE: [f64; class::COUNT] = [0.0, 0.25, 0.55, 0.4, 1.0, 0.8];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub size: usize,
    pub n_structures: usize,
    pub reference_table: Vec<f64>,
    pub target_table: Vec<f64>,
    /// Gaussian blur applied inside the head, in pixels.
    pub blur_sigma: f64,
    pub seed: u64,
}

impl PhantomSpec {
    pub fn new(size: usize, n_structures: usize, seed: u64) -> Self {
        Self {
            size,
            n_structures,
            reference_table: REFERENCE_TABLE.to_vec(),
            target_table: TARGET_TABLE.to_vec(),
            blur_sigma: 0.6,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.size == 0 || self.size % 2 != 0 {
            return Err(Error::invalid(format!("phantom size {} must be even", self.size)));
        }
        if self.n_structures == 0 {
            return Err(Error::invalid("n_structures must be at least 1"));
        }
        if self.reference_table.len() != class::COUNT || self.target_table.len() != class::COUNT {
            return Err(Error::invalid(format!(
                "intensity tables must have {} entries",
                class::COUNT
            )));
        }
        if self.reference_table[0] != 0.0 || self.target_table[0] != 0.0 {
            return Err(Error::invalid("background must map to 0 in both tables"));
        }
        Ok(())
    }
}

/// One aligned target/reference pair plus a moved copy of the reference.
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastPairRecord {
    pub record_id: u32,
    pub size: usize,
    pub seed: u64,
    pub ref_aligned: ComplexImage<f32>,
    pub tgt: ComplexImage<f32>,
    pub ref_moved: ComplexImage<f32>,
    pub true_motion: RigidParams,
    pub brain_mask: Vec<bool>,
}

/// Per-record seed derived from the global seed, independent of generation
/// order.
pub fn record_seed(global: u64, id: u32) -> u64 {
    // splitmix64 finaliser
    let mut z = global ^ (id as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug)]
struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    angle: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }

    fn scaled(&self, f: f64) -> Ellipse {
        Ellipse {
            a: self.a * f,
            b: self.b * f,
            ..*self
        }
    }
}

/// Tissue label map for record `id`.
pub fn phantom_labels(spec: &PhantomSpec, id: u32) -> Result<Vec<u8>> {
    spec.validate()?;
    let n = spec.size as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(record_seed(spec.seed, id));
    let head = Ellipse {
        cx: n / 2.0 + rng.gen_range(-0.03..0.03) * n,
        cy: n / 2.0 + rng.gen_range(-0.03..0.03) * n,
        a: rng.gen_range(0.36..0.41) * n,
        b: rng.gen_range(0.41..0.45) * n,
        angle: rng.gen_range(-0.15..0.15),
    };
    let mut shapes: Vec<(Ellipse, u8)> = vec![
        (head, class::SCALP),
        (head.scaled(0.88), class::GREY),
        (
            Ellipse {
                cx: head.cx + rng.gen_range(-0.02..0.02) * n,
                cy: head.cy + rng.gen_range(-0.02..0.02) * n,
                ..head.scaled(rng.gen_range(0.62..0.72))
            },
            class::WHITE,
        ),
    ];
    // paired ventricles
    let (va, vb) = (rng.gen_range(0.035..0.06) * n, rng.gen_range(0.09..0.13) * n);
    let off = rng.gen_range(0.05..0.08) * n;
    let tilt = rng.gen_range(0.1..0.35);
    for side in [-1.0, 1.0] {
        shapes.push((
            Ellipse {
                cx: head.cx + side * off,
                cy: head.cy - 0.02 * n,
                a: va,
                b: vb,
                angle: head.angle + side * tilt,
            },
            class::FLUID,
        ));
    }
    let inner = head.scaled(0.88);
    let choices = [class::GREY, class::WHITE, class::FLUID, class::LESION];
    for _ in 0..spec.n_structures {
        let r = rng.gen_range(0.0..0.65f64).sqrt();
        let phi = rng.gen_range(0.0..std::f64::consts::TAU);
        shapes.push((
            Ellipse {
                cx: inner.cx + r * inner.a * phi.cos(),
                cy: inner.cy + r * inner.b * phi.sin(),
                a: rng.gen_range(0.025..0.09) * n,
                b: rng.gen_range(0.025..0.09) * n,
                angle: rng.gen_range(0.0..std::f64::consts::PI),
            },
            *choices.choose(&mut rng).expect("non-empty"),
        ));
    }
    let size = spec.size;
    let mut labels = vec![class::BACKGROUND; size * size];
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64, y as f64);
            if !head.contains(px, py) {
                continue;
            }
            let mut lab = class::BACKGROUND;
            for (e, c) in &shapes {
                // interior structures stay inside the brain
                let inside_brain = *c == class::SCALP || *c == class::GREY || inner.contains(px, py);
                if inside_brain && e.contains(px, py) {
                    lab = *c;
                }
            }
            labels[y * size + x] = lab;
        }
    }
    Ok(labels)
}

fn gaussian_blur(img: &[f64], size: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return img.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for y in 0..size {
            for x in 0..size {
                let mut acc = 0.0;
                for (j, k) in kernel.iter().enumerate() {
                    let o = j as isize - radius;
                    let (sx, sy) = if horizontal {
                        (x as isize + o, y as isize)
                    } else {
                        (x as isize, y as isize + o)
                    };
                    if sx >= 0 && sy >= 0 && (sx as usize) < size && (sy as usize) < size {
                        acc += k * src[sy as usize * size + sx as usize];
                    }
                }
                out[y * size + x] = acc;
            }
        }
        out
    };
    pass(&pass(img, true), false)
}

fn render(labels: &[u8], table: &[f64], size: usize, sigma: f64) -> ComplexImage<f32> {
    let raw: Vec<f64> = labels.iter().map(|&l| table[l as usize]).collect();
    let blurred = gaussian_blur(&raw, size, sigma);
    let masked: Vec<f32> = blurred
        .iter()
        .zip(labels)
        .map(|(&v, &l)| if l == class::BACKGROUND { 0.0 } else { v as f32 })
        .collect();
    normalize(&ComplexImage::from_real(size, size, masked).expect("square raster"))
}

/// Aligned reference/target pair for record `id`, with no motion applied.
pub fn gen_phantom_pair(spec: &PhantomSpec, id: u32) -> Result<ContrastPairRecord> {
    let labels = phantom_labels(spec, id)?;
    let size = spec.size;
    let ref_aligned = render(&labels, &spec.reference_table, size, spec.blur_sigma);
    let tgt = render(&labels, &spec.target_table, size, spec.blur_sigma);
    Ok(ContrastPairRecord {
        record_id: id,
        size,
        seed: record_seed(spec.seed, id),
        ref_moved: ref_aligned.clone(),
        ref_aligned,
        tgt,
        true_motion: RigidParams::IDENTITY,
        brain_mask: labels.iter().map(|&l| l != class::BACKGROUND).collect(),
    })
}

/// Motion ranges: rotation in degrees, translation in millimetres.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionRange {
    pub rot_deg: f64,
    pub trans_mm: f64,
    pub mm_per_px: f64,
}

impl MotionRange {
    pub const NONE: MotionRange = MotionRange {
        rot_deg: 0.0,
        trans_mm: 0.0,
        mm_per_px: 1.0,
    };

    /// ±10° and ±15 mm, with millimetres scaled so a 192-pixel field of
    /// view maps to 1 mm per pixel.
    pub fn standard(size: usize) -> Self {
        Self {
            rot_deg: 10.0,
            trans_mm: 15.0,
            mm_per_px: 192.0 / size as f64,
        }
    }

    pub fn trans_px(&self) -> f64 {
        self.trans_mm / self.mm_per_px
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Result<RigidParams> {
        if self.rot_deg < 0.0 || self.trans_mm < 0.0 || !(self.mm_per_px > 0.0) {
            return Err(Error::invalid(format!("invalid motion range {self:?}")));
        }
        let mut uniform = |r: f64| if r > 0.0 { rng.gen_range(-r..=r) } else { 0.0 };
        let theta = uniform(self.rot_deg).to_radians();
        let tx = uniform(self.trans_px());
        let ty = uniform(self.trans_px());
        RigidParams::motion(tx, ty, theta)
    }
}

/// Move the reference contrast by a random rigid transform. The target is
/// left untouched.
pub fn augment_motion(
    rec: &ContrastPairRecord,
    range: &MotionRange,
    seed: u64,
) -> Result<ContrastPairRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let motion = range.sample(&mut rng)?;
    let mut out = rec.clone();
    out.ref_moved = if motion == RigidParams::IDENTITY {
        rec.ref_aligned.clone()
    } else {
        apply_rigid(&rec.ref_aligned, &motion)?
    };
    out.true_motion = motion;
    Ok(out)
}

/// Per-slice min-max scaling of the magnitude to `[0, 1]`. A constant
/// image maps to zeros.
pub fn normalize(img: &ComplexImage<f32>) -> ComplexImage<f32> {
    let mag = img.magnitude();
    let lo = mag.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = mag.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let range = hi - lo;
    let real = if range > 0.0 && range.is_finite() {
        mag.iter().map(|&m| (m - lo) / range).collect()
    } else {
        log::warn!("normalize: degenerate dynamic range, returning zeros");
        vec![0.0; mag.len()]
    };
    ComplexImage::from_real(img.height, img.width, real).expect("same raster")
}

#[derive(Serialize, Deserialize)]
struct RecordHeader {
    record_id: u32,
    size: usize,
    seed: u64,
    true_motion: RigidParams,
    /// byte offsets of each field relative to the payload start
    offsets: Vec<(String, usize)>,
    payload_bytes: usize,
}

const PLANES: [&str; 6] = [
    "ref_aligned.re",
    "ref_aligned.im",
    "tgt.re",
    "tgt.im",
    "ref_moved.re",
    "ref_moved.im",
];

impl ContrastPairRecord {
    fn planes(&self) -> [&[f32]; 6] {
        [
            &self.ref_aligned.real,
            &self.ref_aligned.imag,
            &self.tgt.real,
            &self.tgt.imag,
            &self.ref_moved.real,
            &self.ref_moved.imag,
        ]
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let hw = self.size * self.size;
        let mut offsets: Vec<(String, usize)> = PLANES
            .iter()
            .enumerate()
            .map(|(i, n)| (n.to_string(), i * 4 * hw))
            .collect();
        offsets.push(("brain_mask".into(), PLANES.len() * 4 * hw));
        let header = RecordHeader {
            record_id: self.record_id,
            size: self.size,
            seed: self.seed,
            true_motion: self.true_motion,
            offsets,
            payload_bytes: PLANES.len() * 4 * hw + hw,
        };
        let mut out = Vec::with_capacity(64 + header.payload_bytes);
        out.extend_from_slice(&RECORD_MAGIC);
        out.extend_from_slice(&RECORD_FORMAT_VERSION.to_le_bytes());
        serde_json::to_writer(&mut out, &header)?;
        out.push(b'\n');
        for plane in self.planes() {
            if plane.len() != hw {
                return Err(Error::Shape {
                    axis: "record plane",
                    expected: hw,
                    actual: plane.len(),
                });
            }
            for v in plane {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend(self.brain_mask.iter().map(|&b| b as u8));
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 6 {
            return Err(Error::Truncated {
                expected: 6,
                actual: bytes.len(),
            });
        }
        if bytes[..4] != RECORD_MAGIC {
            return Err(Error::BadMagic {
                expected: RECORD_MAGIC,
                found: bytes[..4].to_vec(),
            });
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != RECORD_FORMAT_VERSION {
            return Err(Error::Version {
                expected: RECORD_FORMAT_VERSION,
                found: version,
            });
        }
        let nl = bytes[6..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format("record header is not newline-terminated".into()))?;
        let header: RecordHeader = serde_json::from_slice(&bytes[6..6 + nl])?;
        let payload = &bytes[6 + nl + 1..];
        let hw = header.size * header.size;
        let expected = PLANES.len() * 4 * hw + hw;
        if payload.len() < expected {
            return Err(Error::Truncated {
                expected,
                actual: payload.len(),
            });
        }
        let offset_of = |name: &str| -> Result<usize> {
            header
                .offsets
                .iter()
                .find(|(n, _)| n == name)
                .map(|&(_, o)| o)
                .filter(|&o| o <= expected)
                .ok_or_else(|| Error::Format(format!("missing or bad offset for `{name}`")))
        };
        let plane = |name: &str| -> Result<Vec<f32>> {
            let o = offset_of(name)?;
            let raw = payload
                .get(o..o + 4 * hw)
                .ok_or_else(|| Error::Truncated { expected: o + 4 * hw, actual: payload.len() })?;
            Ok(raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect())
        };
        let img = |re: &str, im: &str| -> Result<ComplexImage<f32>> {
            ComplexImage::from_parts(header.size, header.size, plane(re)?, plane(im)?)
        };
        let mo = offset_of("brain_mask")?;
        let mask = payload
            .get(mo..mo + hw)
            .ok_or_else(|| Error::Truncated { expected: mo + hw, actual: payload.len() })?;
        Ok(ContrastPairRecord {
            record_id: header.record_id,
            size: header.size,
            seed: header.seed,
            ref_aligned: img("ref_aligned.re", "ref_aligned.im")?,
            tgt: img("tgt.re", "tgt.im")?,
            ref_moved: img("ref_moved.re", "ref_moved.im")?,
            true_motion: header.true_motion,
            brain_mask: mask.iter().map(|&b| b != 0).collect(),
        })
    }
}

pub fn write_record(rec: &ContrastPairRecord, path: &Path) -> Result<()> {
    let bytes = rec.to_bytes()?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_record(path: &Path) -> Result<ContrastPairRecord> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    ContrastPairRecord::from_bytes(&bytes)
}

/// Generation settings for a whole dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub size: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub n_structures: usize,
    pub blur_sigma: f64,
    pub motion: MotionRange,
    pub seed: u64,
}

impl DatasetConfig {
    /// 64×64, 200/40/60 records.
    pub fn desk(seed: u64) -> Self {
        Self {
            size: 64,
            n_train: 200,
            n_val: 40,
            n_test: 60,
            n_structures: 6,
            blur_sigma: 0.6,
            motion: MotionRange::standard(64),
            seed,
        }
    }

    /// 192×192, 1407/201/402 records.
    pub fn full_scale(seed: u64) -> Self {
        Self {
            size: 192,
            n_train: 1407,
            n_val: 201,
            n_test: 402,
            motion: MotionRange::standard(192),
            ..Self::desk(seed)
        }
    }

    pub fn total(&self) -> usize {
        self.n_train + self.n_val + self.n_test
    }

    pub fn phantom_spec(&self) -> PhantomSpec {
        PhantomSpec {
            blur_sigma: self.blur_sigma,
            ..PhantomSpec::new(self.size, self.n_structures, self.seed)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub train: Vec<u32>,
    pub val: Vec<u32>,
    pub test: Vec<u32>,
    pub config: DatasetConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::invalid(format!("unknown split `{s}` (expected train, val or test)"))),
        }
    }
}

impl DatasetManifest {
    /// Shuffle record ids with the global seed and cut them into the three
    /// splits.
    pub fn split(config: &DatasetConfig) -> Self {
        let mut ids: Vec<u32> = (0..config.total() as u32).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5EED_5B11_u64);
        ids.shuffle(&mut rng);
        let test = ids.split_off(config.n_train + config.n_val);
        let val = ids.split_off(config.n_train);
        log::info!(
            "dataset split: {} train / {} val / {} test",
            ids.len(),
            val.len(),
            test.len()
        );
        Self {
            train: ids,
            val,
            test,
            config: config.clone(),
        }
    }

    pub fn ids(&self, split: Split) -> &[u32] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// In-memory dataset: manifest plus records indexed by id.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub records: Vec<ContrastPairRecord>,
}

impl Dataset {
    pub fn generate(config: &DatasetConfig) -> Result<Self> {
        let spec = config.phantom_spec();
        let manifest = DatasetManifest::split(config);
        let records = par::map_range(config.total(), |i| {
            let id = i as u32;
            let rec = gen_phantom_pair(&spec, id)?;
            augment_motion(&rec, &config.motion, record_seed(config.seed ^ 0x4D07_1011, id))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        Ok(Self { manifest, records })
    }

    pub fn record(&self, id: u32) -> &ContrastPairRecord {
        &self.records[id as usize]
    }

    pub fn split(&self, split: Split) -> Vec<&ContrastPairRecord> {
        self.manifest.ids(split).iter().map(|&id| self.record(id)).collect()
    }

    pub fn record_path(dir: &Path, id: u32) -> PathBuf {
        dir.join(format!("record_{id:05}.ddmr"))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for rec in &self.records {
            write_record(rec, &Self::record_path(dir, rec.record_id))?;
        }
        let path = dir.join("manifest.json");
        let json = serde_json::to_string_pretty(&self.manifest)?;
        std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        let records = (0..manifest.config.total() as u32)
            .map(|id| read_record(&Self::record_path(dir, id)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { manifest, records })
    }
}
