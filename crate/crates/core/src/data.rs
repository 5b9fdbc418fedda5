//! Seeded synthetic paired-modality identity images.
//!
//! An identity is a latent vector of Gaussian coefficients over a fixed atlas
//! of Gabor patterns. Source images are rendered from the latent with small
//! nuisance jitter; target images go through a [`ModalityTransform`] that
//! shifts their global statistics and removes detail. Every sample's
//! randomness comes from `hash64(dataset_seed, identity, index, modality)`.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Source,
    Target,
}

impl Modality {
    pub fn tag(self) -> u64 {
        match self {
            Modality::Source => 0,
            Modality::Target => 1,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            Modality::Source => "source",
            Modality::Target => "target",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    /// Source-only identities used to pretrain the backbone.
    Pretrain,
    Train,
    Eval,
}

impl Split {
    fn as_str(self) -> &'static str {
        match self {
            Split::Pretrain => "pretrain",
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Identity {
    pub id: u32,
    pub latent: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub identity: u32,
    pub modality: Modality,
    /// `[1 or 3, H, W]`, values in `[0, 1]` on the 8-bit grid.
    pub image: Tensor,
    pub nuisance_seed: u64,
}

/// Appearance change that manufactures the modality gap. `strength`
/// interpolates every effect between "none" (0) and full (1).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModalityTransform {
    pub gain: [f64; 3],
    pub offset: [f64; 3],
    pub invert: bool,
    pub blur_radius: usize,
    pub noise_sigma: f64,
    /// Emit a single channel (the channel mean).
    pub collapse: bool,
    pub strength: f64,
}

impl Default for ModalityTransform {
    fn default() -> Self {
        ModalityTransform {
            gain: [0.5; 3],
            offset: [0.2; 3],
            invert: true,
            blur_radius: 1,
            noise_sigma: 0.02,
            collapse: true,
            strength: 0.7,
        }
    }
}

impl ModalityTransform {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.strength) {
            return Err(Error::Config(format!("gap strength must be in [0, 1], got {}", self.strength)));
        }
        if self.noise_sigma < 0.0 || !self.noise_sigma.is_finite() {
            return Err(Error::Config(format!("noise sigma must be non-negative, got {}", self.noise_sigma)));
        }
        Ok(())
    }
}

/// SplitMix64 finalizer folded over the parts.
pub fn hash64(parts: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    parts.iter().fold(0x9e37_79b9_7f4a_7c15, |acc, &p| {
        mix(acc.wrapping_add(0x9e37_79b9_7f4a_7c15) ^ mix(p))
    })
}

pub fn sample_seed(dataset_seed: u64, identity: u32, index: usize, modality: Modality) -> u64 {
    hash64(&[dataset_seed, identity as u64, index as u64, modality.tag()])
}

pub fn generate_identities(n: usize, latent_dim: usize, seed: u64) -> Vec<Identity> {
    generate_identities_from(0, n, latent_dim, seed)
}

fn generate_identities_from(first_id: u32, n: usize, latent_dim: usize, seed: u64) -> Vec<Identity> {
    (0..n as u32)
        .map(|k| {
            let id = first_id + k;
            let mut rng = ChaCha8Rng::seed_from_u64(hash64(&[seed, 0x1d, id as u64]));
            let latent = (0..latent_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            Identity { id, latent }
        })
        .collect()
}

const AMPLITUDE: f64 = 0.07;
const ENVELOPE: f64 = 0.35;
const MAX_SHIFT: f64 = 2.0;
const MAX_GAIN_JITTER: f64 = 0.05;
const NUISANCE_NOISE: f64 = 0.01;

/// Gabor pattern `g` at continuous pixel coordinates.
fn basis(g: usize, x: f64, y: f64, h: usize, w: usize) -> f64 {
    let u = x / w as f64 - 0.5;
    let v = y / h as f64 - 0.5;
    let kx = 0.75 * (g % 4) as f64;
    let ky = 0.75 * ((g / 4) % 4) as f64 + 0.25 * (g / 16) as f64;
    let phase = g as f64 * 2.399_963;
    let env = (-(u * u + v * v) / (2.0 * ENVELOPE * ENVELOPE)).exp();
    env * (2.0 * PI * (kx * u + ky * v) + phase).cos()
}

fn tint(channel: usize, g: usize) -> f64 {
    1.0 + 0.3 * (2.0 * PI * ((channel + 1) * (g + 1)) as f64 / 7.0).sin()
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Renders a 3-channel source image of `identity`.
pub fn render_source(identity: &Identity, nuisance_seed: u64, h: usize, w: usize) -> SampleRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(nuisance_seed);
    let dx = rng.random_range(-MAX_SHIFT..=MAX_SHIFT);
    let dy = rng.random_range(-MAX_SHIFT..=MAX_SHIFT);
    let gain = 1.0 + rng.random_range(-MAX_GAIN_JITTER..=MAX_GAIN_JITTER);
    let noise = Normal::new(0.0, NUISANCE_NOISE).expect("valid sigma");
    let g_count = identity.latent.len();

    let mut field = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64 - dx, y as f64 - dy);
            for (g, z) in identity.latent.iter().enumerate() {
                let b = z * basis(g, px, py, h, w);
                for c in 0..3 {
                    field[(c * h + y) * w + x] += tint(c, g) * b;
                }
            }
        }
    }
    let scale = AMPLITUDE * gain * 4.0 / (g_count.max(1) as f64).sqrt();
    let data = field
        .into_iter()
        .map(|f| quantize(0.5 + scale * f + noise.sample(&mut rng)))
        .collect();
    SampleRecord {
        identity: identity.id,
        modality: Modality::Source,
        image: Tensor::new(vec![3, h, w], data).expect("3·h·w values"),
        nuisance_seed,
    }
}

fn box_blur(plane: &[f64], h: usize, w: usize, r: usize) -> Vec<f64> {
    let r = r as isize;
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut acc = 0.0;
            for oy in -r..=r {
                for ox in -r..=r {
                    let yy = (y + oy).clamp(0, h as isize - 1) as usize;
                    let xx = (x + ox).clamp(0, w as isize - 1) as usize;
                    acc += plane[yy * w + xx];
                }
            }
            out[y as usize * w + x as usize] = acc / ((2 * r + 1) * (2 * r + 1)) as f64;
        }
    }
    out
}

/// Gain/offset, optional inversion, blur, noise, optional channel collapse.
pub fn apply_modality(record: &SampleRecord, t: &ModalityTransform, seed: u64) -> Result<SampleRecord> {
    if record.modality != Modality::Source {
        return Err(Error::Data("apply_modality expects a source record".into()));
    }
    t.validate()?;
    let (c, h, w) = match record.image.shape() {
        &[c, h, w] => (c, h, w),
        s => return Err(Error::shape("apply_modality", format!("expected [C,H,W], got {s:?}"))),
    };
    let s = t.strength;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, s * t.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;

    let mut planes: Vec<Vec<f64>> = record.image.data().chunks_exact(h * w).map(<[f64]>::to_vec).collect();
    for (ci, plane) in planes.iter_mut().enumerate() {
        let gain = 1.0 + s * (t.gain[ci % 3] - 1.0);
        let offset = s * t.offset[ci % 3];
        for p in plane.iter_mut() {
            *p = gain * *p + offset;
            if t.invert {
                *p = ((1.0 - s) * *p + s * (1.0 - *p)).clamp(0.0, 1.0);
            }
        }
        if t.blur_radius > 0 && s > 0.0 {
            let blurred = box_blur(plane, h, w, t.blur_radius);
            for (p, b) in plane.iter_mut().zip(blurred) {
                *p = (1.0 - s) * *p + s * b;
            }
        }
        if s > 0.0 && t.noise_sigma > 0.0 {
            plane.iter_mut().for_each(|p| *p += noise.sample(&mut rng));
        }
    }
    let planes = if t.collapse {
        let mean = (0..h * w).map(|i| planes.iter().map(|p| p[i]).sum::<f64>() / c as f64).collect();
        vec![mean]
    } else {
        planes
    };
    let out_c = planes.len();
    let data = planes.concat().into_iter().map(quantize).collect();
    Ok(SampleRecord {
        identity: record.identity,
        modality: Modality::Target,
        image: Tensor::new(vec![out_c, h, w], data)?,
        nuisance_seed: record.nuisance_seed,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    /// Identities with both modalities, split into train/eval.
    pub identities: usize,
    pub samples_per_identity: usize,
    /// Extra source-only identities for backbone pretraining.
    pub pretrain_identities: usize,
    pub latent_dim: usize,
    pub height: usize,
    pub width: usize,
    pub train_fraction: f64,
    pub seed: u64,
    /// Seed of the identity split; `None` uses `seed`.
    pub fold_seed: Option<u64>,
    pub transform: ModalityTransform,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            identities: 40,
            samples_per_identity: 4,
            pretrain_identities: 100,
            latent_dim: 16,
            height: 32,
            width: 32,
            train_fraction: 0.5,
            seed: 0,
            fold_seed: None,
            transform: ModalityTransform::default(),
        }
    }
}

impl DatasetConfig {
    pub fn train_count(&self) -> usize {
        (self.identities as f64 * self.train_fraction).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.identities < 2 || self.samples_per_identity < 1 {
            return Err(Error::Config(format!(
                "need at least 2 identities and 1 sample each, got {} x {}",
                self.identities, self.samples_per_identity
            )));
        }
        let train = self.train_count();
        if train < 2 || self.identities - train < 2 {
            return Err(Error::Config(format!(
                "split of {} identities at fraction {} leaves {train} train / {} eval; need 2 each",
                self.identities,
                self.train_fraction,
                self.identities.saturating_sub(train)
            )));
        }
        if self.pretrain_identities == 1 {
            return Err(Error::Config("pretraining pool needs 0 or at least 2 identities".into()));
        }
        if self.latent_dim == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config("latent_dim, height and width must be positive".into()));
        }
        self.transform.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub split: Split,
    pub index: usize,
    pub record: SampleRecord,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    pub config: DatasetConfig,
    pub identities: Vec<Identity>,
    pub train_ids: Vec<u32>,
    pub eval_ids: Vec<u32>,
    pub pretrain_ids: Vec<u32>,
    pub samples: Vec<LabeledSample>,
}

impl DatasetBundle {
    pub fn select(&self, split: Split, modality: Modality) -> Vec<&SampleRecord> {
        self.samples
            .iter()
            .filter(|s| s.split == split && s.record.modality == modality)
            .map(|s| &s.record)
            .collect()
    }

    /// Source images used for backbone pretraining: the dedicated pool when
    /// present, otherwise the train split.
    pub fn pretrain_pool(&self) -> Vec<&SampleRecord> {
        if self.pretrain_ids.is_empty() {
            self.select(Split::Train, Modality::Source)
        } else {
            self.select(Split::Pretrain, Modality::Source)
        }
    }
}

pub fn make_dataset(cfg: &DatasetConfig) -> Result<DatasetBundle> {
    cfg.validate()?;
    let identities = generate_identities(cfg.identities, cfg.latent_dim, cfg.seed);
    let pretrain = generate_identities_from(cfg.identities as u32, cfg.pretrain_identities, cfg.latent_dim, cfg.seed);

    let mut order: Vec<u32> = identities.iter().map(|i| i.id).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(hash64(&[cfg.fold_seed.unwrap_or(cfg.seed), 0xf01d]));
    order.shuffle(&mut rng);
    let n_train = cfg.train_count();
    let mut train_ids = order[..n_train].to_vec();
    let mut eval_ids = order[n_train..].to_vec();
    train_ids.sort_unstable();
    eval_ids.sort_unstable();
    let train_set: BTreeSet<u32> = train_ids.iter().copied().collect();

    // (split, identity, index, modality) in canonical order
    let mut jobs = Vec::new();
    for ident in &identities {
        let split = if train_set.contains(&ident.id) { Split::Train } else { Split::Eval };
        for idx in 0..cfg.samples_per_identity {
            for m in [Modality::Source, Modality::Target] {
                jobs.push((split, ident, idx, m));
            }
        }
    }
    for ident in &pretrain {
        for idx in 0..cfg.samples_per_identity {
            jobs.push((Split::Pretrain, ident, idx, Modality::Source));
        }
    }
    let samples = par::map_slice(&jobs, |&(split, ident, idx, m)| -> Result<LabeledSample> {
        let seed = sample_seed(cfg.seed, ident.id, idx, m);
        let src = render_source(ident, seed, cfg.height, cfg.width);
        let record = match m {
            Modality::Source => src,
            Modality::Target => apply_modality(&src, &cfg.transform, hash64(&[seed, 0x7a1]))?,
        };
        Ok(LabeledSample { split, index: idx, record })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let pretrain_ids = pretrain.iter().map(|i| i.id).collect();
    let mut all_identities = identities;
    all_identities.extend(pretrain);
    Ok(DatasetBundle { config: cfg.clone(), identities: all_identities, train_ids, eval_ids, pretrain_ids, samples })
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: DatasetConfig,
    identities: Vec<Identity>,
    train_ids: Vec<u32>,
    eval_ids: Vec<u32>,
    pretrain_ids: Vec<u32>,
    samples: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    file: String,
    identity: u32,
    index: usize,
    modality: Modality,
    split: Split,
    channels: usize,
    nuisance_seed: u64,
}

fn file_name(s: &LabeledSample) -> String {
    let ext = if s.record.image.shape()[0] == 1 { "pgm" } else { "ppm" };
    format!(
        "{}/{}_{}_{}.{ext}",
        s.split.as_str(),
        s.record.identity,
        s.index,
        s.record.modality.as_str()
    )
}

fn encode_netpbm(image: &Tensor) -> Vec<u8> {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let magic = if c == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    for i in 0..h * w {
        for ch in 0..c {
            out.push((image.data()[ch * h * w + i] * 255.0).round() as u8);
        }
    }
    out
}

fn decode_netpbm(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let bad = |d: &str| Error::format(path, d.to_string());
    // header: magic, width, height, maxval separated by whitespace, then one byte
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ascii header"))?);
    }
    pos += 1;
    let c = match fields[0] {
        "P5" => 1,
        "P6" => 3,
        m => return Err(bad(&format!("unsupported magic {m}"))),
    };
    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, maxval) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
    if maxval != 255 {
        return Err(bad("maxval must be 255"));
    }
    let body = bytes.get(pos..).ok_or_else(|| bad("missing body"))?;
    if body.len() != c * h * w {
        return Err(bad(&format!("expected {} pixel bytes, got {}", c * h * w, body.len())));
    }
    let mut data = vec![0.0; c * h * w];
    for i in 0..h * w {
        for ch in 0..c {
            data[ch * h * w + i] = body[i * c + ch] as f64 / 255.0;
        }
    }
    Tensor::new(vec![c, h, w], data)
}

pub fn save_dataset(bundle: &DatasetBundle, dir: &Path) -> Result<()> {
    for split in [Split::Pretrain, Split::Train, Split::Eval] {
        let d = dir.join(split.as_str());
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut entries = Vec::with_capacity(bundle.samples.len());
    for s in &bundle.samples {
        let file = file_name(s);
        let path = dir.join(&file);
        fs::write(&path, encode_netpbm(&s.record.image)).map_err(|e| Error::io(&path, e))?;
        entries.push(ManifestEntry {
            file,
            identity: s.record.identity,
            index: s.index,
            modality: s.record.modality,
            split: s.split,
            channels: s.record.image.shape()[0],
            nuisance_seed: s.record.nuisance_seed,
        });
    }
    let manifest = Manifest {
        config: bundle.config.clone(),
        identities: bundle.identities.clone(),
        train_ids: bundle.train_ids.clone(),
        eval_ids: bundle.eval_ids.clone(),
        pretrain_ids: bundle.pretrain_ids.clone(),
        samples: entries,
    };
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

pub fn load_dataset(dir: &Path) -> Result<DatasetBundle> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;

    let mut on_disk = 0;
    for split in [Split::Pretrain, Split::Train, Split::Eval] {
        if let Ok(rd) = fs::read_dir(dir.join(split.as_str())) {
            on_disk += rd.filter_map(|e| e.ok()).filter(|e| e.path().is_file()).count();
        }
    }
    if on_disk != m.samples.len() {
        return Err(Error::format(
            &path,
            format!("manifest lists {} images, directory holds {on_disk}", m.samples.len()),
        ));
    }

    let samples = m
        .samples
        .iter()
        .map(|e| {
            let p = dir.join(&e.file);
            let bytes = fs::read(&p).map_err(|err| Error::io(&p, err))?;
            let image = decode_netpbm(&bytes, &p)?;
            if image.shape()[0] != e.channels {
                return Err(Error::format(&p, "channel count disagrees with manifest"));
            }
            Ok(LabeledSample {
                split: e.split,
                index: e.index,
                record: SampleRecord {
                    identity: e.identity,
                    modality: e.modality,
                    image,
                    nuisance_seed: e.nuisance_seed,
                },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DatasetBundle {
        config: m.config,
        identities: m.identities,
        train_ids: m.train_ids,
        eval_ids: m.eval_ids,
        pretrain_ids: m.pretrain_ids,
        samples,
    })
}
