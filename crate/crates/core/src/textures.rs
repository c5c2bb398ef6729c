//! Procedural texture generation and the augmentation pipeline.
//!
//! Five classes: uniform (flat gray plus faint noise), horizontal and
//! vertical stripes, a checkered pattern, and dots on a jittered grid.
//! Every sample is a pure function of (class, seed, side length), and the
//! whole dataset is a pure function of its config, so a manifest alone can
//! regenerate every image bit for bit.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextureClass {
    Uniform = 0,
    Hlines = 1,
    Vlines = 2,
    Squares = 3,
    Dots = 4,
}

impl TextureClass {
    pub const ALL: [TextureClass; 5] = [
        TextureClass::Uniform,
        TextureClass::Hlines,
        TextureClass::Vlines,
        TextureClass::Squares,
        TextureClass::Dots,
    ];

    pub fn code(self) -> usize {
        self as usize
    }

    pub fn from_code(code: usize) -> Option<Self> {
        Self::ALL.get(code).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            TextureClass::Uniform => "uniform",
            TextureClass::Hlines => "hlines",
            TextureClass::Vlines => "vlines",
            TextureClass::Squares => "squares",
            TextureClass::Dots => "dots",
        }
    }

    /// Resolve a class name or documented alias.
    pub fn from_name(name: &str) -> Option<Self> {
        match name.trim().to_ascii_lowercase().as_str() {
            "uniform" | "no texture" => Some(TextureClass::Uniform),
            "hlines" | "horizontal lines" => Some(TextureClass::Hlines),
            "vlines" | "vertical lines" => Some(TextureClass::Vlines),
            "squares" | "checkered" => Some(TextureClass::Squares),
            "dots" => Some(TextureClass::Dots),
            _ => None,
        }
    }

    pub fn vocabulary() -> Vec<String> {
        let mut names: Vec<String> = Self::ALL.iter().map(|c| c.name().to_string()).collect();
        for alias in ["no texture", "horizontal lines", "vertical lines", "checkered"] {
            names.push(alias.to_string());
        }
        names
    }
}

/// One grayscale sample; pixels row-major in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct TextureSample {
    pub image: Vec<f64>,
    pub hw: usize,
    pub label: TextureClass,
    pub id: String,
    pub seed: u64,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn fnv1a(s: &str) -> u64 {
    let mut hash = 0xCBF2_9CE4_8422_2325u64;
    for b in s.as_bytes() {
        hash ^= *b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01B3);
    }
    hash
}

/// Stable per-sample seed derived from the master seed and a stream name.
pub fn derive_seed(master: u64, stream: &str) -> u64 {
    splitmix64(master ^ fnv1a(stream))
}

/// Generate a texture deterministically from (class, seed, hw).
pub fn generate(class: TextureClass, seed: u64, hw: usize) -> Result<TextureSample> {
    if hw < 16 {
        return Err(Error::contract(format!("texture side must be >= 16, got {hw}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut image = vec![0.0; hw * hw];
    match class {
        TextureClass::Uniform => {
            let gray = rng.gen_range(0.25..0.75);
            for px in &mut image {
                *px = gray + rng.gen_range(-0.02..0.02);
            }
        }
        TextureClass::Hlines => {
            let wave = StripeWave::draw(&mut rng);
            for y in 0..hw {
                let v = wave.eval(y as f64);
                for x in 0..hw {
                    image[y * hw + x] = v + rng.gen_range(-0.01..0.01);
                }
            }
        }
        TextureClass::Vlines => {
            let wave = StripeWave::draw(&mut rng);
            let column: Vec<f64> = (0..hw).map(|x| wave.eval(x as f64)).collect();
            for y in 0..hw {
                for x in 0..hw {
                    image[y * hw + x] = column[x] + rng.gen_range(-0.01..0.01);
                }
            }
        }
        TextureClass::Squares => {
            // Product of two perpendicular square-wave stripe fields.
            let wy = SquareWave::draw(&mut rng);
            let wx = SquareWave::draw(&mut rng);
            let mid = rng.gen_range(0.35..0.65);
            let amp = rng.gen_range(0.15..0.3);
            for y in 0..hw {
                let sy = wy.sign(y as f64);
                for x in 0..hw {
                    let sx = wx.sign(x as f64);
                    image[y * hw + x] = mid + amp * sy * sx + rng.gen_range(-0.01..0.01);
                }
            }
        }
        TextureClass::Dots => {
            let pitch = rng.gen_range(6.0..10.0);
            let radius = pitch * rng.gen_range(0.25..0.4);
            let bg = rng.gen_range(0.2..0.45);
            let fg = bg + rng.gen_range(0.3..0.5);
            let cells = (hw as f64 / pitch).ceil() as isize + 2;
            let mut dots = Vec::new();
            for gy in -1..cells {
                for gx in -1..cells {
                    let cx = (gx as f64 + 0.5) * pitch + rng.gen_range(-0.15..0.15) * pitch;
                    let cy = (gy as f64 + 0.5) * pitch + rng.gen_range(-0.15..0.15) * pitch;
                    dots.push((cx, cy));
                }
            }
            for y in 0..hw {
                for x in 0..hw {
                    let mut v = bg;
                    for &(cx, cy) in &dots {
                        let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                        if d2 < radius * radius {
                            v = fg;
                            break;
                        }
                    }
                    image[y * hw + x] = v + rng.gen_range(-0.01..0.01);
                }
            }
        }
    }
    for px in &mut image {
        *px = px.clamp(0.0, 1.0);
    }
    Ok(TextureSample {
        image,
        hw,
        label: class,
        id: format!("{}-{:06x}", class.name(), seed & 0xFF_FFFF),
        seed,
    })
}

/// Sinusoidal or hard-edged stripe profile with period 3-8 px, random
/// phase, and contrast at least 0.3.
struct StripeWave {
    period: f64,
    phase: f64,
    mid: f64,
    amp: f64,
    square: bool,
}

impl StripeWave {
    fn draw(rng: &mut ChaCha8Rng) -> Self {
        let period = rng.gen_range(3.0..8.0);
        let phase = rng.gen_range(0.0..period);
        let contrast = rng.gen_range(0.3..0.8);
        let amp = contrast / 2.0;
        let mid = rng.gen_range(amp + 0.05..0.95 - amp);
        let square = rng.gen_bool(0.5);
        StripeWave { period, phase, mid, amp, square }
    }

    fn eval(&self, t: f64) -> f64 {
        let angle = std::f64::consts::TAU * (t + self.phase) / self.period;
        if self.square {
            self.mid + self.amp * angle.sin().signum()
        } else {
            self.mid + self.amp * angle.sin()
        }
    }
}

struct SquareWave {
    period: f64,
    phase: f64,
}

impl SquareWave {
    fn draw(rng: &mut ChaCha8Rng) -> Self {
        SquareWave { period: rng.gen_range(6.0..12.0), phase: rng.gen_range(0.0..12.0) }
    }

    fn sign(&self, t: f64) -> f64 {
        if ((t + self.phase) / self.period).rem_euclid(1.0) < 0.5 {
            1.0
        } else {
            -1.0
        }
    }
}

/// Mirror top-to-bottom.
pub fn vertical_mirror(image: &[f64], hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; image.len()];
    for y in 0..hw {
        out[(hw - 1 - y) * hw..(hw - y) * hw].copy_from_slice(&image[y * hw..(y + 1) * hw]);
    }
    out
}

/// Mirror left-to-right.
pub fn horizontal_mirror(image: &[f64], hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; image.len()];
    for y in 0..hw {
        for x in 0..hw {
            out[y * hw + (hw - 1 - x)] = image[y * hw + x];
        }
    }
    out
}

fn reflect(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    i = i.rem_euclid(period);
    if i >= n {
        i = period - 1 - i;
    }
    i as usize
}

fn bilinear_reflect(image: &[f64], hw: usize, x: f64, y: f64) -> f64 {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let (x0, x1) = (reflect(x0 as isize, hw), reflect(x0 as isize + 1, hw));
    let (y0, y1) = (reflect(y0 as isize, hw), reflect(y0 as isize + 1, hw));
    let v00 = image[y0 * hw + x0];
    let v01 = image[y0 * hw + x1];
    let v10 = image[y1 * hw + x0];
    let v11 = image[y1 * hw + x1];
    v00 * (1.0 - fx) * (1.0 - fy) + v01 * fx * (1.0 - fy) + v10 * (1.0 - fx) * fy + v11 * fx * fy
}

/// The erase rectangle covers this fraction of the image, within the
/// tolerance integer rounding allows.
const ERASE_FRACTION: f64 = 0.30;

/// One augmentation draw: small random affine (rotation up to 15 degrees,
/// scale within 10%, shear within 5 degrees) with reflect padding, then
/// brightness/contrast jitter of up to 20%, then a random erase of 30% of
/// the area filled with `erase_fill`. The result is emitted together with
/// its vertical and horizontal mirror copies, labels unchanged.
pub fn augment(
    sample: &TextureSample,
    aug_index: usize,
    seed: u64,
    erase_fill: f64,
) -> Vec<TextureSample> {
    let hw = sample.hw;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let theta: f64 = rng.gen_range(-15f64..15f64).to_radians();
    let scale = rng.gen_range(0.9..1.1);
    let shear: f64 = rng.gen_range(-5f64..5f64).to_radians().tan();
    let (sin_t, cos_t) = theta.sin_cos();
    // A = R(theta) . Shear . Scale, applied about the image center; pixels
    // are pulled through the inverse map.
    let a = [
        scale * (cos_t - sin_t * 0.0) + 0.0,
        scale * (cos_t * shear - sin_t),
        scale * (sin_t + cos_t * 0.0),
        scale * (sin_t * shear + cos_t),
    ];
    let det = a[0] * a[3] - a[1] * a[2];
    let inv = [a[3] / det, -a[1] / det, -a[2] / det, a[0] / det];
    let center = (hw as f64 - 1.0) / 2.0;

    let mut warped = vec![0.0; hw * hw];
    for y in 0..hw {
        for x in 0..hw {
            let dx = x as f64 - center;
            let dy = y as f64 - center;
            let sx = inv[0] * dx + inv[1] * dy + center;
            let sy = inv[2] * dx + inv[3] * dy + center;
            warped[y * hw + x] = bilinear_reflect(&sample.image, hw, sx, sy);
        }
    }

    let contrast = rng.gen_range(0.8..1.2);
    let brightness = rng.gen_range(-0.2..0.2);
    for px in &mut warped {
        *px = ((*px - 0.5) * contrast + 0.5 + brightness).clamp(0.0, 1.0);
    }

    // Erase rectangle: pick a height in the feasible aspect band, derive
    // the width from the target fraction, and nudge it back into range if
    // integer rounding pushed the realized fraction out.
    let total = (hw * hw) as f64;
    let lo = ((ERASE_FRACTION / 2.0).sqrt() * hw as f64).ceil() as usize;
    let hi = ((ERASE_FRACTION * 2.0).sqrt() * hw as f64).floor() as usize;
    let eh = rng.gen_range(lo..=hi.min(hw));
    let mut ew = ((ERASE_FRACTION * total) / eh as f64).round() as usize;
    ew = ew.clamp(1, hw);
    while (eh * ew) as f64 / total > ERASE_FRACTION + 0.02 && ew > 1 {
        ew -= 1;
    }
    while ((eh * ew) as f64) / total < ERASE_FRACTION - 0.02 && ew < hw {
        ew += 1;
    }
    let ey = rng.gen_range(0..=hw - eh);
    let ex = rng.gen_range(0..=hw - ew);
    for y in ey..ey + eh {
        for x in ex..ex + ew {
            warped[y * hw + x] = erase_fill;
        }
    }

    let base_id = format!("{}-a{}", sample.id, aug_index);
    let make = |suffix: &str, image: Vec<f64>| TextureSample {
        image,
        hw,
        label: sample.label,
        id: format!("{base_id}{suffix}"),
        seed,
    };
    let v = vertical_mirror(&warped, hw);
    let h = horizontal_mirror(&warped, hw);
    vec![make("", warped), make("v", v), make("h", h)]
}

/// Pre-split samples before augmentation (unaugmented test set) or
/// post-split the augmented pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    Pre,
    Post,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub mode: SplitMode,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    /// Shuffle seed; derived from the master seed when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

fn default_train_fraction() -> f64 {
    0.8
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { mode: SplitMode::Pre, train_fraction: default_train_fraction(), seed: None }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::config(format!(
                "train_fraction must lie strictly between 0 and 1, got {}",
                self.train_fraction
            )));
        }
        Ok(())
    }
}

/// Dataset build parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    #[serde(default = "default_per_class")]
    pub per_class: usize,
    #[serde(default = "default_aug_per_image")]
    pub aug_per_image: usize,
    #[serde(default)]
    pub split: SplitSpec,
}

fn default_per_class() -> usize {
    500
}

fn default_aug_per_image() -> usize {
    2
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            per_class: default_per_class(),
            aug_per_image: default_aug_per_image(),
            split: SplitSpec::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Test,
}

/// One augmentation step in a sample's provenance chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum AugStep {
    Augment { index: usize, seed: u64 },
    VFlip,
    HFlip,
}

/// Manifest record: everything needed to regenerate one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub label: TextureClass,
    /// Seed of the base image this sample derives from.
    pub seed: u64,
    pub split: SplitTag,
    pub augmentation_chain: Vec<AugStep>,
}

/// Manifest header line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub format: String,
    pub version: u32,
    pub hw: usize,
    pub master_seed: u64,
    pub data: DataConfig,
    pub erase_fill: f64,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub header: ManifestHeader,
    pub train: Vec<TextureSample>,
    pub test: Vec<TextureSample>,
    pub records: Vec<ManifestRecord>,
}

impl Dataset {
    pub fn manifest_lines(&self) -> Result<String> {
        let mut out = serde_json::to_string(&self.header)?;
        out.push('\n');
        for record in &self.records {
            out.push_str(&serde_json::to_string(record)?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Build the dataset: generate base images per class, split, and augment.
/// In pre mode the test split stays unaugmented; in post mode the whole
/// augmented pool is split.
pub fn build_dataset(config: &DataConfig, hw: usize, master_seed: u64) -> Result<Dataset> {
    if config.per_class < 10 {
        return Err(Error::contract(format!(
            "per_class must be at least 10, got {}",
            config.per_class
        )));
    }
    config.split.validate()?;

    // Base images, grouped by class.
    let mut bases: Vec<Vec<TextureSample>> = Vec::with_capacity(5);
    for class in TextureClass::ALL {
        let mut group = Vec::with_capacity(config.per_class);
        for idx in 0..config.per_class {
            let seed = derive_seed(master_seed, &format!("base/{}/{idx}", class.name()));
            let mut sample = generate(class, seed, hw)?;
            sample.id = format!("{}-{idx:05}", class.name());
            group.push(sample);
        }
        bases.push(group);
    }

    let erase_fill = {
        let mut sum = 0.0;
        let mut count = 0usize;
        for group in &bases {
            for s in group {
                sum += s.image.iter().sum::<f64>();
                count += s.image.len();
            }
        }
        sum / count as f64
    };

    let split_seed = config.split.seed.unwrap_or_else(|| derive_seed(master_seed, "split"));
    let augment_all = |group: &[TextureSample]| -> Vec<TextureSample> {
        let mut out = Vec::with_capacity(group.len() * config.aug_per_image * 3);
        for base in group {
            for k in 0..config.aug_per_image {
                let aug_seed = derive_seed(master_seed, &format!("aug/{}/{k}", base.id));
                out.extend(augment(base, k, aug_seed, erase_fill));
            }
        }
        out
    };

    let mut train = Vec::new();
    let mut test = Vec::new();
    match config.split.mode {
        SplitMode::Pre => {
            for (class_idx, group) in bases.iter().enumerate() {
                let order = shuffled_indices(group.len(), split_seed, class_idx);
                let n_train =
                    ((group.len() as f64) * config.split.train_fraction).round() as usize;
                let n_train = n_train.clamp(1, group.len() - 1);
                let train_bases: Vec<TextureSample> =
                    order[..n_train].iter().map(|&i| group[i].clone()).collect();
                for &i in &order[n_train..] {
                    test.push(group[i].clone());
                }
                train.extend(augment_all(&train_bases));
                train.extend(train_bases);
            }
        }
        SplitMode::Post => {
            for (class_idx, group) in bases.iter().enumerate() {
                let mut pool: Vec<TextureSample> = group.clone();
                pool.extend(augment_all(group));
                let order = shuffled_indices(pool.len(), split_seed, class_idx);
                let n_train = ((pool.len() as f64) * config.split.train_fraction).round() as usize;
                let n_train = n_train.clamp(1, pool.len() - 1);
                for (rank, &i) in order.iter().enumerate() {
                    if rank < n_train {
                        train.push(pool[i].clone());
                    } else {
                        test.push(pool[i].clone());
                    }
                }
            }
        }
    }

    // Stable ordering by id keeps manifests identical run to run.
    train.sort_by(|a, b| a.id.cmp(&b.id));
    test.sort_by(|a, b| a.id.cmp(&b.id));

    let header = ManifestHeader {
        format: "lscfg-dataset".to_string(),
        version: 1,
        hw,
        master_seed,
        data: config.clone(),
        erase_fill,
    };
    let base_seeds: std::collections::HashMap<String, u64> = bases
        .iter()
        .flatten()
        .map(|s| (s.id.clone(), s.seed))
        .collect();
    let mut records = Vec::with_capacity(train.len() + test.len());
    for (tag, samples) in [(SplitTag::Train, &train), (SplitTag::Test, &test)] {
        for s in samples {
            let (base_id, chain) = match parse_augmented_id(&s.id) {
                Some((base, index, mirror)) => {
                    let mut chain = vec![AugStep::Augment { index, seed: s.seed }];
                    match mirror {
                        Some('v') => chain.push(AugStep::VFlip),
                        Some('h') => chain.push(AugStep::HFlip),
                        _ => {}
                    }
                    (base, chain)
                }
                None => (s.id.clone(), Vec::new()),
            };
            records.push(ManifestRecord {
                id: s.id.clone(),
                label: s.label,
                seed: base_seeds[&base_id],
                split: tag,
                augmentation_chain: chain,
            });
        }
    }
    Ok(Dataset { header, train, test, records })
}

fn shuffled_indices(len: usize, seed: u64, stream: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ (stream as u64) << 32));
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng);
    order
}

fn parse_augmented_id(id: &str) -> Option<(String, usize, Option<char>)> {
    let pos = id.rfind("-a")?;
    let (base, tail) = id.split_at(pos);
    let tail = &tail[2..];
    let (digits, mirror) = match tail.strip_suffix('v') {
        Some(d) => (d, Some('v')),
        None => match tail.strip_suffix('h') {
            Some(d) => (d, Some('h')),
            None => (tail, None),
        },
    };
    let index: usize = digits.parse().ok()?;
    Some((base.to_string(), index, mirror))
}

/// Regenerate every sample of a manifest; bit-identical to the original
/// build.
pub fn regenerate(header: &ManifestHeader, records: &[ManifestRecord]) -> Result<Dataset> {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for record in records {
        let sample = regenerate_sample(header, record)?;
        match record.split {
            SplitTag::Train => train.push(sample),
            SplitTag::Test => test.push(sample),
        }
    }
    Ok(Dataset { header: header.clone(), train, test, records: records.to_vec() })
}

/// Rebuild one sample from its manifest record: generate the base image
/// from the stored seed, then replay the augmentation chain.
pub fn regenerate_sample(header: &ManifestHeader, record: &ManifestRecord) -> Result<TextureSample> {
    let base_id = parse_augmented_id(&record.id).map(|(b, _, _)| b).unwrap_or_else(|| record.id.clone());
    let mut base = generate(record.label, record.seed, header.hw)?;
    base.id = base_id;
    let Some(AugStep::Augment { index, seed }) = record.augmentation_chain.first() else {
        return Ok(base);
    };
    let outputs = augment(&base, *index, *seed, header.erase_fill);
    let pick = match record.augmentation_chain.get(1) {
        Some(AugStep::VFlip) => 1,
        Some(AugStep::HFlip) => 2,
        _ => 0,
    };
    Ok(outputs.into_iter().nth(pick).expect("augment returns three samples"))
}

/// Parse a JSON-lines manifest (header line, then one record per line).
pub fn parse_manifest(text: &str) -> Result<(ManifestHeader, Vec<ManifestRecord>)> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header_line = lines.next().ok_or_else(|| Error::Format {
        path: "<manifest>".into(),
        detail: "empty manifest".into(),
    })?;
    let header: ManifestHeader = serde_json::from_str(header_line)?;
    if header.format != "lscfg-dataset" {
        return Err(Error::Format {
            path: "<manifest>".into(),
            detail: format!("unknown manifest format {:?}", header.format),
        });
    }
    let mut records = Vec::new();
    for line in lines {
        records.push(serde_json::from_str(line)?);
    }
    Ok((header, records))
}
