//! Synthetic fundus-analog benchmark with controllable domain shift.
//!
//! Each image is a dark circular "fundus" holding a bright optic disc with an inner
//! cup. The class signal is the cup-to-disc radius ratio (CDR): label 1 iff
//! cdr ≥ 0.6, with a margin gap so the boundary is learnable under noise. A 6×6
//! corner marker provides a controllable spurious cue whose correlation with the
//! label differs between domains, and per-domain style parameters (brightness,
//! contrast, channel gains, noise) model device shift.

use crate::error::{GttaError, Result};
use crate::tensor::Checkpoint;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

pub const IMG_H: usize = 64;
pub const IMG_W: usize = 64;
pub const IMG_C: usize = 3;
pub const IMG_LEN: usize = IMG_C * IMG_H * IMG_W;

/// CDR threshold separating the classes; generated CDRs avoid (0.55, 0.65).
pub const CDR_THRESHOLD: f64 = 0.6;

const MAGIC: &[u8; 4] = b"GTTA";
const FORMAT_VERSION: u32 = 1;

/// Style and composition of one domain.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DomainSpec {
    pub name: String,
    pub brightness_shift: f64,
    pub contrast_gain: f64,
    pub channel_gains: [f64; 3],
    pub noise_sigma: f64,
    /// Correlation of the corner-marker state with the label, in [−1, 1].
    pub spurious_corr: f64,
    pub n_glaucoma: usize,
    pub n_normal: usize,
    pub seed: u64,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = (-0.3..=0.3).contains(&self.brightness_shift)
            && (0.5..=1.5).contains(&self.contrast_gain)
            && self.channel_gains.iter().all(|g| (0.6..=1.4).contains(g))
            && self.noise_sigma >= 0.0
            && (-1.0..=1.0).contains(&self.spurious_corr);
        if !ok {
            return Err(GttaError::ConfigParse(format!(
                "domain spec {} has out-of-range style parameters",
                self.name
            )));
        }
        Ok(())
    }
}

/// Generation-time geometry, kept in memory only; the domain file format does not
/// persist it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleMeta {
    pub disc_cx: f64,
    pub disc_cy: f64,
    pub disc_r: f64,
    pub marker_on: bool,
}

#[derive(Clone, Debug)]
pub struct Sample {
    /// `[3 × 64 × 64]` row-major (channel, row, col), values in [0, 1].
    pub image: Vec<f32>,
    /// 1 = glaucoma analog (cdr ≥ 0.6).
    pub label: u8,
    pub domain: String,
    pub cdr: f32,
    pub meta: Option<SampleMeta>,
}

impl Sample {
    pub fn image_f64(&self) -> Vec<f64> {
        self.image.iter().map(|&v| v as f64).collect()
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub spec: DomainSpec,
    pub samples: Vec<Sample>,
    pub class_counts: [usize; 2],
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn name(&self) -> &str {
        &self.spec.name
    }

    /// Recount labels and confirm the stored class counts.
    pub fn counts_consistent(&self) -> bool {
        let mut c = [0usize; 2];
        for s in &self.samples {
            c[s.label as usize] += 1;
        }
        c == self.class_counts
    }

    /// Content digest over the persisted byte encoding.
    pub fn digest(&self) -> u64 {
        crate::util::fnv1a(&encode_domain(self))
    }
}

struct Geometry {
    disc_cx: f64,
    disc_cy: f64,
    disc_r: f64,
    cup_r: f64,
    cdr: f64,
    marker_on: bool,
}

fn sample_geometry(rng: &mut ChaCha8Rng, spec: &DomainSpec, label: u8) -> Geometry {
    let disc_r = rng.random_range(8.0..12.0);
    let disc_cx = 32.0 + rng.random_range(-6.0..6.0);
    let disc_cy = 32.0 + rng.random_range(-6.0..6.0);
    let cdr = if label == 1 {
        rng.random_range(0.65..0.9)
    } else {
        rng.random_range(0.3..0.55)
    };
    let p_on = (1.0 + spec.spurious_corr * (2.0 * label as f64 - 1.0)) / 2.0;
    let marker_on = rng.random_range(0.0..1.0) < p_on;
    Geometry { disc_cx, disc_cy, disc_r, cup_r: cdr * disc_r, cdr, marker_on }
}

const FUNDUS_R: f64 = 29.0;
const BG: [f64; 3] = [0.10, 0.10, 0.10];
const FUNDUS_COLOR: [f64; 3] = [0.40, 0.20, 0.10];
const DISC_COLOR: [f64; 3] = [0.60, 0.45, 0.28];
const CUP_COLOR: [f64; 3] = [1.00, 0.97, 0.88];
fn marker_env(key: &str, default: f64) -> f64 {
    std::env::var(key).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}
fn marker_on_color() -> f64 {
    static V: std::sync::OnceLock<f64> = std::sync::OnceLock::new();
    *V.get_or_init(|| marker_env("GTTA_MARKER_ON", 0.70))
}
fn marker_off_color() -> f64 {
    static V: std::sync::OnceLock<f64> = std::sync::OnceLock::new();
    *V.get_or_init(|| marker_env("GTTA_MARKER_OFF", 0.30))
}

/// Contrast pivots near the image mean so it does not act as a brightness shift.
const CONTRAST_PIVOT: f64 = 0.3;
/// Marker block occupies rows and cols [2, 8) — outside the fundus circle.
const MARKER_LO: usize = 2;
const MARKER_HI: usize = 8;

/// Antialiased coverage of a circle at a pixel center: 1 inside, 0 outside, with a
/// one-pixel soft edge so sub-pixel radius changes stay visible.
fn coverage(dist: f64, radius: f64) -> f64 {
    (radius - dist + 0.5).clamp(0.0, 1.0)
}

fn rasterize(geom: &Geometry) -> Vec<f64> {
    let mut img = vec![0.0f64; IMG_LEN];
    for y in 0..IMG_H {
        for x in 0..IMG_W {
            let (fx, fy) = (x as f64, y as f64);
            let d_center = ((fx - 32.0).powi(2) + (fy - 32.0).powi(2)).sqrt();
            let d_disc = ((fx - geom.disc_cx).powi(2) + (fy - geom.disc_cy).powi(2)).sqrt();
            let c_fundus = coverage(d_center, FUNDUS_R);
            let c_disc = coverage(d_disc, geom.disc_r);
            let c_cup = coverage(d_disc, geom.cup_r);
            let marker = y >= MARKER_LO && y < MARKER_HI && x >= MARKER_LO && x < MARKER_HI;
            for ch in 0..IMG_C {
                let mut v = BG[ch];
                v = v + c_fundus * (FUNDUS_COLOR[ch] - v);
                v = v + c_disc * (DISC_COLOR[ch] - v);
                v = v + c_cup * (CUP_COLOR[ch] - v);
                if marker {
                    v = if geom.marker_on { marker_on_color() } else { marker_off_color() };
                }
                img[ch * IMG_H * IMG_W + y * IMG_W + x] = v;
            }
        }
    }
    img
}

fn apply_style(img: &mut [f64], spec: &DomainSpec, rng: &mut ChaCha8Rng) {
    // standard normals are always drawn and scaled by sigma, so the rng stream
    // advances identically under every style (styles never perturb geometry draws)
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let plane = IMG_H * IMG_W;
    for ch in 0..IMG_C {
        for i in 0..plane {
            let v = &mut img[ch * plane + i];
            let mut out = (*v - CONTRAST_PIVOT) * spec.contrast_gain + CONTRAST_PIVOT + spec.brightness_shift;
            out *= spec.channel_gains[ch];
            out += spec.noise_sigma * noise.sample(rng);
            *v = out.clamp(0.0, 1.0);
        }
    }
}

/// Render one sample of the given class under a domain's style.
pub fn render_sample(rng: &mut ChaCha8Rng, spec: &DomainSpec, label: u8) -> Sample {
    let geom = sample_geometry(rng, spec, label);
    let mut img = rasterize(&geom);
    apply_style(&mut img, spec, rng);
    Sample {
        image: img.iter().map(|&v| v as f32).collect(),
        label,
        domain: spec.name.clone(),
        cdr: geom.cdr as f32,
        meta: Some(SampleMeta {
            disc_cx: geom.disc_cx,
            disc_cy: geom.disc_cy,
            disc_r: geom.disc_r,
            marker_on: geom.marker_on,
        }),
    }
}

/// Generate a full domain with exactly the requested per-class counts.
/// Deterministic in the spec (including its seed).
pub fn generate_domain(spec: &DomainSpec) -> Result<Dataset> {
    spec.validate()?;
    if spec.n_glaucoma + spec.n_normal == 0 {
        return Err(GttaError::EmptyDomain);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut labels: Vec<u8> = std::iter::repeat_n(1u8, spec.n_glaucoma)
        .chain(std::iter::repeat_n(0u8, spec.n_normal))
        .collect();
    labels.shuffle(&mut rng);
    let samples: Vec<Sample> = labels.iter().map(|&l| render_sample(&mut rng, spec, l)).collect();
    Ok(Dataset {
        spec: spec.clone(),
        class_counts: [spec.n_normal, spec.n_glaucoma],
        samples,
    })
}

/// The fixed benchmark: one source domain with a strong spurious cue and seven
/// style-shifted targets. The style table is published in the README.
pub fn default_benchmark_specs() -> (DomainSpec, Vec<DomainSpec>) {
    benchmark_specs_with_counts(1000, 1000, 150, 150)
}

pub fn benchmark_specs_with_counts(
    src_glaucoma: usize,
    src_normal: usize,
    tgt_glaucoma: usize,
    tgt_normal: usize,
) -> (DomainSpec, Vec<DomainSpec>) {
    let source = DomainSpec {
        name: "source".into(),
        brightness_shift: 0.0,
        contrast_gain: 1.0,
        channel_gains: [1.0, 1.0, 1.0],
        noise_sigma: 0.02,
        spurious_corr: 0.9,
        n_glaucoma: src_glaucoma,
        n_normal: src_normal,
        seed: 11,
    };
    let mk = |name: &str,
              brightness_shift: f64,
              contrast_gain: f64,
              channel_gains: [f64; 3],
              noise_sigma: f64,
              spurious_corr: f64,
              seed: u64| DomainSpec {
        name: name.into(),
        brightness_shift,
        contrast_gain,
        channel_gains,
        noise_sigma,
        spurious_corr,
        n_glaucoma: tgt_glaucoma,
        n_normal: tgt_normal,
        seed,
    };
    let targets = vec![
        mk("dim", -0.02, 0.92, [0.97, 0.98, 1.00], 0.03, 0.0, 101),
        mk("bright", 0.025, 0.99, [1.02, 1.00, 0.98], 0.02, 0.0, 102),
        mk("warm", 0.015, 1.00, [1.09, 1.00, 0.93], 0.035, -0.5, 103),
        mk("cool", -0.015, 1.04, [0.93, 0.98, 1.07], 0.02, 0.0, 104),
        mk("noisy", 0.00, 0.98, [1.00, 1.00, 1.00], 0.045, -0.9, 105),
        mk("washed", 0.02, 0.95, [1.02, 1.01, 1.00], 0.03, 0.3, 106),
        mk("harsh", -0.01, 0.94, [0.98, 1.01, 1.04], 0.035, 0.0, 107),
    ];
    (source, targets)
}

pub fn default_benchmark() -> Result<(Dataset, Vec<Dataset>)> {
    let (src, tgts) = default_benchmark_specs();
    let source = generate_domain(&src)?;
    let targets = tgts.iter().map(generate_domain).collect::<Result<Vec<_>>>()?;
    Ok((source, targets))
}

// ── persistence ──────────────────────────────────────────────────────

fn encode_domain(ds: &Dataset) -> Vec<u8> {
    let mut buf = Vec::with_capacity(16 + ds.len() * (IMG_LEN * 4 + 5));
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(ds.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(IMG_H as u16).to_le_bytes());
    buf.extend_from_slice(&(IMG_W as u16).to_le_bytes());
    buf.extend_from_slice(&(IMG_C as u16).to_le_bytes());
    for s in &ds.samples {
        for &v in &s.image {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    for s in &ds.samples {
        buf.push(s.label);
    }
    for s in &ds.samples {
        buf.extend_from_slice(&s.cdr.to_le_bytes());
    }
    buf
}

/// Write a domain file plus its companion `<stem>.manifest.json`.
pub fn save_domain(ds: &Dataset, path: &Path) -> Result<()> {
    if ds.is_empty() {
        return Err(GttaError::EmptyDomain);
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_domain(ds))?;
    let manifest = serde_json::to_string_pretty(&ds.spec)?;
    std::fs::write(manifest_path(path), manifest)?;
    Ok(())
}

pub fn manifest_path(path: &Path) -> std::path::PathBuf {
    path.with_extension("manifest.json")
}

fn read_exact_or(file: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    file.read_exact(buf).map_err(|_| GttaError::BadMagic)
}

/// Read a domain file written by `save_domain`. Geometry metadata is not persisted,
/// so loaded samples carry `meta: None`.
pub fn load_domain(path: &Path) -> Result<Dataset> {
    let mut f = std::fs::File::open(path)?;
    let mut magic = [0u8; 4];
    read_exact_or(&mut f, &mut magic)?;
    if &magic != MAGIC {
        return Err(GttaError::BadMagic);
    }
    let mut u32buf = [0u8; 4];
    read_exact_or(&mut f, &mut u32buf)?;
    let version = u32::from_le_bytes(u32buf);
    if version != FORMAT_VERSION {
        return Err(GttaError::VersionMismatch(version));
    }
    read_exact_or(&mut f, &mut u32buf)?;
    let count = u32::from_le_bytes(u32buf) as usize;
    let mut u16buf = [0u8; 2];
    read_exact_or(&mut f, &mut u16buf)?;
    let h = u16::from_le_bytes(u16buf) as usize;
    read_exact_or(&mut f, &mut u16buf)?;
    let w = u16::from_le_bytes(u16buf) as usize;
    read_exact_or(&mut f, &mut u16buf)?;
    let c = u16::from_le_bytes(u16buf) as usize;
    if (h, w, c) != (IMG_H, IMG_W, IMG_C) {
        return Err(GttaError::VersionMismatch(version));
    }

    let spec: DomainSpec = {
        let mpath = manifest_path(path);
        let text = std::fs::read_to_string(&mpath)?;
        serde_json::from_str(&text)?
    };

    let mut images = Vec::with_capacity(count);
    let mut fbuf = vec![0u8; IMG_LEN * 4];
    for _ in 0..count {
        read_exact_or(&mut f, &mut fbuf)?;
        let img: Vec<f32> = fbuf
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        images.push(img);
    }
    let mut labels = vec![0u8; count];
    read_exact_or(&mut f, &mut labels)?;
    let mut cdrs = Vec::with_capacity(count);
    let mut cbuf = [0u8; 4];
    for _ in 0..count {
        read_exact_or(&mut f, &mut cbuf)?;
        cdrs.push(f32::from_le_bytes(cbuf));
    }

    let mut class_counts = [0usize; 2];
    let samples: Vec<Sample> = images
        .into_iter()
        .zip(labels)
        .zip(cdrs)
        .map(|((image, label), cdr)| {
            class_counts[label as usize] += 1;
            Sample { image, label, domain: spec.name.clone(), cdr, meta: None }
        })
        .collect();
    Ok(Dataset { spec, samples, class_counts })
}

/// Phi coefficient between marker state and label over generated samples.
pub fn marker_label_correlation(samples: &[Sample]) -> f64 {
    let mut n = [[0f64; 2]; 2];
    for s in samples {
        let m = s.meta.expect("marker correlation needs generation metadata");
        n[m.marker_on as usize][s.label as usize] += 1.0;
    }
    let (n00, n01, n10, n11) = (n[0][0], n[0][1], n[1][0], n[1][1]);
    let denom = ((n00 + n01) * (n10 + n11) * (n00 + n10) * (n01 + n11)).sqrt();
    if denom == 0.0 {
        0.0
    } else {
        (n11 * n00 - n10 * n01) / denom
    }
}

/// Patch-grid mask of the disc: true for every 8×8 patch whose square intersects
/// the disc circle. Needs generation metadata.
pub fn disc_patch_mask(meta: &SampleMeta, patch: usize) -> Vec<bool> {
    let grid = IMG_H / patch;
    let mut mask = vec![false; grid * grid];
    for pr in 0..grid {
        for pc in 0..grid {
            let (y0, y1) = ((pr * patch) as f64, (pr * patch + patch - 1) as f64);
            let (x0, x1) = ((pc * patch) as f64, (pc * patch + patch - 1) as f64);
            // distance from the circle center to the nearest point of the patch square
            let dx = (x0 - meta.disc_cx).max(meta.disc_cx - x1).max(0.0);
            let dy = (y0 - meta.disc_cy).max(meta.disc_cy - y1).max(0.0);
            if (dx * dx + dy * dy).sqrt() <= meta.disc_r {
                mask[pr * grid + pc] = true;
            }
        }
    }
    mask
}

/// Checkpoint-format digest helper re-exported for dataset-level determinism tests.
pub fn checkpoint_digest(ckpt: &Checkpoint) -> String {
    ckpt.digest()
}
