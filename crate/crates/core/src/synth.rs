//! Deterministic synthetic GUI scenes.
//!
//! A scene places `elements` axis-aligned boxes with integer corners,
//! pairwise IoU at most `max_iou`, and paints the distractors in a random
//! order so later ones occlude earlier ones. The target is painted last. Element `e` carries a unit identity vector
//! `u_e` (mutually orthogonal when `elements ≤ d_v`). Each patch feature is
//!
//! ```text
//! v_p = signal · Σ_e (visible pixels of e in p / pixels of p) · u_e + σ_noise · ξ
//! ```
//!
//! and the query is `L u_target + σ_noise · ξ` for a projection `L` fixed by
//! the seed. Scene `k` draws from ChaCha stream `k`; `L` from stream `u64::MAX`.
//!
//! # Sample record layout
//!
//! All integers and floats little-endian:
//!
//! | field | type |
//! |---|---|
//! | magic `GSMP` | 4 bytes |
//! | version (1) | u32 |
//! | image width, image height, patch size | 3 × u32 |
//! | patch count M, d_v, d_q | 3 × u32 |
//! | size class (0 small, 1 medium, 2 large), 3 zero bytes | 4 bytes |
//! | distractor count n | u32 |
//! | features, patch-major | M·d_v × f64 |
//! | query | d_q × f64 |
//! | target `[x1, y1, x2, y2]` | 4 × f64 |
//! | distractors | 4n × f64 |

use std::path::Path;

use ndarray::{Array1, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BoundingBox, PatchGrid};
use crate::head::{PatchFeatures, QueryEmbedding};
use crate::rng::Rng;

const PLACEMENT_ATTEMPTS: usize = 1000;
const RECORD_MAGIC: &[u8; 4] = b"GSMP";
const RECORD_VERSION: u32 = 1;
pub const MANIFEST_FORMAT: &str = "patchground-corpus-v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeClass {
    Small,
    Medium,
    Large,
}

impl SizeClass {
    pub const ALL: [SizeClass; 3] = [SizeClass::Small, SizeClass::Medium, SizeClass::Large];

    pub fn name(self) -> &'static str {
        match self {
            SizeClass::Small => "small",
            SizeClass::Medium => "medium",
            SizeClass::Large => "large",
        }
    }

    fn code(self) -> u8 {
        self as u8
    }

    fn from_code(c: u8) -> Result<Self> {
        Self::ALL
            .get(c as usize)
            .copied()
            .ok_or_else(|| Error::Format(format!("unknown size class code {c}")))
    }
}

impl std::fmt::Display for SizeClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Half-open side-length range `[min, max)` in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SideRange {
    pub min: u32,
    pub max: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub image_width: u32,
    pub image_height: u32,
    pub patch_size: u32,
    /// Elements per scene, target included.
    pub elements: usize,
    pub small: SideRange,
    pub medium: SideRange,
    pub large: SideRange,
    /// Relative weights for the target's size class.
    pub class_weights: [f64; 3],
    pub max_iou: f64,
    pub d_v: usize,
    pub d_q: usize,
    pub signal: f64,
    /// Entries of `L` are `query_scale · N(0, 1/d_v)`.
    pub query_scale: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_width: 256,
            image_height: 256,
            patch_size: 16,
            elements: 6,
            small: SideRange { min: 16, max: 28 },
            medium: SideRange { min: 28, max: 48 },
            large: SideRange { min: 48, max: 80 },
            class_weights: [1.0, 1.0, 1.0],
            max_iou: 0.3,
            d_v: 16,
            d_q: 16,
            signal: 2.0,
            query_scale: 3.0,
            noise: 0.1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.elements == 0 {
            return bad("elements per scene must be at least 1".into());
        }
        if self.elements > u16::MAX as usize - 1 {
            return bad(format!("too many elements: {}", self.elements));
        }
        if self.d_v == 0 || self.d_q == 0 {
            return bad("feature and query dimensions must be positive".into());
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("noise must be non-negative, got {}", self.noise));
        }
        if !(self.query_scale > 0.0 && self.query_scale.is_finite()) {
            return bad(format!("query scale must be positive, got {}", self.query_scale));
        }
        if !(self.signal > 0.0 && self.signal.is_finite()) {
            return bad(format!("signal must be positive, got {}", self.signal));
        }
        if !(0.0..=1.0).contains(&self.max_iou) {
            return bad(format!("max_iou must lie in [0, 1], got {}", self.max_iou));
        }
        if self.class_weights.iter().any(|w| w.is_nan() || *w < 0.0) || self.class_weights.iter().sum::<f64>() <= 0.0 {
            return bad(format!("invalid class weights {:?}", self.class_weights));
        }
        self.grid()?;
        let limit = self.image_width.min(self.image_height);
        for (name, r) in [("small", self.small), ("medium", self.medium), ("large", self.large)] {
            if r.min == 0 || r.min >= r.max || r.max - 1 > limit {
                return bad(format!(
                    "{name} side range [{}, {}) must be non-empty and fit a {}x{} image",
                    r.min, r.max, self.image_width, self.image_height
                ));
            }
        }
        if !(self.small.max <= self.medium.min && self.medium.max <= self.large.min) {
            return bad("size class ranges must be ordered and disjoint".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<PatchGrid> {
        PatchGrid::new(self.image_width, self.image_height, self.patch_size)
    }

    pub fn range(&self, class: SizeClass) -> SideRange {
        match class {
            SizeClass::Small => self.small,
            SizeClass::Medium => self.medium,
            SizeClass::Large => self.large,
        }
    }

    /// Classifies a box by side length against the configured ranges,
    /// using the geometric mean of width and height.
    pub fn classify(&self, b: &BoundingBox<f64>) -> SizeClass {
        let side = b.area().sqrt();
        if side < self.medium.min as f64 {
            SizeClass::Small
        } else if side < self.large.min as f64 {
            SizeClass::Medium
        } else {
            SizeClass::Large
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundingSample {
    pub grid: PatchGrid,
    pub feats: PatchFeatures<f64>,
    pub query: QueryEmbedding<f64>,
    pub target: BoundingBox<f64>,
    pub distractors: Vec<BoundingBox<f64>>,
    pub size_class: SizeClass,
}

/// Fixed `d_q × d_v` query projection for a seed.
pub fn query_projection(config: &SynthConfig) -> Array2<f64> {
    let mut rng = Rng::new(config.seed, u64::MAX);
    let scale = config.query_scale / (config.d_v as f64).sqrt();
    Array2::from_shape_simple_fn((config.d_q, config.d_v), || rng.normal() * scale)
}

fn pick_class(rng: &mut Rng, weights: &[f64; 3]) -> SizeClass {
    let total: f64 = weights.iter().sum();
    let mut u = rng.uniform() * total;
    for (c, w) in SizeClass::ALL.iter().zip(weights) {
        if u < *w {
            return *c;
        }
        u -= w;
    }
    SizeClass::Large
}

fn unit_vectors(rng: &mut Rng, n: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(n);
    while out.len() < n {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        if n <= dim {
            for u in &out {
                let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            out.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    out
}

fn place(
    rng: &mut Rng,
    config: &SynthConfig,
    class: SizeClass,
    placed: &[BoundingBox<f64>],
    element: usize,
) -> Result<BoundingBox<f64>> {
    let r = config.range(class);
    for _ in 0..PLACEMENT_ATTEMPTS {
        let w = r.min + rng.below((r.max - r.min) as usize) as u32;
        let h = r.min + rng.below((r.max - r.min) as usize) as u32;
        let x = rng.below((config.image_width - w + 1) as usize) as u32;
        let y = rng.below((config.image_height - h + 1) as usize) as u32;
        let b = BoundingBox::new(x as f64, y as f64, (x + w) as f64, (y + h) as f64)?;
        if placed.iter().all(|p| iou(p, &b) <= config.max_iou) {
            return Ok(b);
        }
    }
    Err(Error::Placement {
        element,
        attempts: PLACEMENT_ATTEMPTS,
    })
}

pub fn generate_scene(config: &SynthConfig, index: u64) -> Result<GroundingSample> {
    config.validate()?;
    generate_scene_with(config, &query_projection(config), index)
}

fn generate_scene_with(
    config: &SynthConfig,
    projection: &Array2<f64>,
    index: u64,
) -> Result<GroundingSample> {
    let grid = config.grid()?;
    let mut rng = Rng::new(config.seed, index);

    let target_class = pick_class(&mut rng, &config.class_weights);
    let mut boxes = Vec::with_capacity(config.elements);
    for e in 0..config.elements {
        let class = if e == 0 {
            target_class
        } else {
            SizeClass::ALL[rng.below(3)]
        };
        let b = place(&mut rng, config, class, &boxes, e)?;
        boxes.push(b);
    }

    // distractors in random order, target on top
    let mut order: Vec<usize> = (1..config.elements).collect();
    rng.shuffle(&mut order);
    order.push(0);
    let identities = unit_vectors(&mut rng, config.elements, config.d_v);

    // painter's algorithm: owner[y][x] = 1 + element, 0 for background
    let (iw, ih) = (config.image_width as usize, config.image_height as usize);
    let mut owner = vec![0u16; iw * ih];
    for &e in &order {
        let b = &boxes[e];
        let (x1, y1, x2, y2) = (b.x1() as usize, b.y1() as usize, b.x2() as usize, b.y2() as usize);
        for row in owner[y1 * iw..y2 * iw].chunks_mut(iw) {
            row[x1..x2].fill(e as u16 + 1);
        }
    }

    let s = config.patch_size as usize;
    let mut feats = Array2::<f64>::zeros((grid.len(), config.d_v));
    let mut counts = vec![0usize; config.elements + 1];
    for p in 0..grid.len() {
        let (r, c) = grid.row_col(p);
        counts.fill(0);
        let (x0, x1) = (c * s, ((c + 1) * s).min(iw));
        let (y0, y1) = (r * s, ((r + 1) * s).min(ih));
        for y in y0..y1 {
            for &o in &owner[y * iw + x0..y * iw + x1] {
                counts[o as usize] += 1;
            }
        }
        let pixels = ((x1 - x0) * (y1 - y0)) as f64;
        let mut row = feats.row_mut(p);
        for (e, &n) in counts.iter().enumerate().skip(1) {
            if n > 0 {
                let w = config.signal * n as f64 / pixels;
                row.iter_mut()
                    .zip(&identities[e - 1])
                    .for_each(|(v, u)| *v += w * u);
            }
        }
        if config.noise > 0.0 {
            row.iter_mut().for_each(|v| *v += config.noise * rng.normal());
        }
    }

    let mut query = projection.dot(&Array1::from(identities[0].clone()));
    if config.noise > 0.0 {
        query.iter_mut().for_each(|v| *v += config.noise * rng.normal());
    }

    Ok(GroundingSample {
        grid,
        feats: PatchFeatures(feats),
        query: QueryEmbedding(query),
        target: boxes[0],
        distractors: boxes[1..].to_vec(),
        size_class: target_class,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub format: String,
    pub config: SynthConfig,
    pub seed: u64,
    pub count: usize,
    /// Sample file names relative to the corpus directory, in index order.
    #[serde(default)]
    pub files: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub manifest: CorpusManifest,
    pub samples: Vec<GroundingSample>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

pub fn sample_file_name(index: usize) -> String {
    format!("samples/{index:06}.bin")
}

pub fn generate_corpus(config: &SynthConfig, count: usize) -> Result<Corpus> {
    if count == 0 {
        return Err(Error::InvalidArgument("corpus count must be at least 1".into()));
    }
    config.validate()?;
    let projection = query_projection(config);
    let samples = (0..count as u64)
        .into_par_iter()
        .map(|i| generate_scene_with(config, &projection, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus {
        manifest: CorpusManifest {
            format: MANIFEST_FORMAT.into(),
            config: config.clone(),
            seed: config.seed,
            count,
            files: (0..count).map(sample_file_name).collect(),
        },
        samples,
    })
}

/// Rebuilds the corpus a manifest describes.
pub fn regenerate(manifest: &CorpusManifest) -> Result<Corpus> {
    let mut config = manifest.config.clone();
    config.seed = manifest.seed;
    generate_corpus(&config, manifest.count)
}

pub fn encode_sample(s: &GroundingSample) -> Vec<u8> {
    let m = s.feats.num_patches();
    let mut out = Vec::with_capacity(48 + 8 * (m * s.feats.dim() + s.query.0.len() + 4 + 4 * s.distractors.len()));
    out.extend_from_slice(RECORD_MAGIC);
    for v in [
        RECORD_VERSION,
        s.grid.image_width(),
        s.grid.image_height(),
        s.grid.patch_size(),
        m as u32,
        s.feats.dim() as u32,
        s.query.0.len() as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&[s.size_class.code(), 0, 0, 0]);
    out.extend_from_slice(&(s.distractors.len() as u32).to_le_bytes());
    let floats = s
        .feats
        .0
        .iter()
        .chain(s.query.0.iter())
        .copied()
        .chain(s.target.to_array())
        .chain(s.distractors.iter().flat_map(|b| b.to_array()));
    for f in floats {
        out.extend_from_slice(&f.to_le_bytes());
    }
    out
}

pub fn decode_sample(bytes: &[u8]) -> Result<GroundingSample> {
    let fail = |m: &str| Error::Format(format!("sample record: {m}"));
    if bytes.len() < 40 || &bytes[0..4] != RECORD_MAGIC {
        return Err(fail("bad magic or truncated header"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    if u32_at(4) != RECORD_VERSION {
        return Err(fail("unsupported version"));
    }
    let grid = PatchGrid::new(u32_at(8), u32_at(12), u32_at(16))?;
    let (m, d_v, d_q) = (u32_at(20) as usize, u32_at(24) as usize, u32_at(28) as usize);
    if m != grid.len() {
        return Err(fail("patch count disagrees with grid"));
    }
    let size_class = SizeClass::from_code(bytes[32])?;
    let n = u32_at(36) as usize;
    let expected = 40 + 8 * (m * d_v + d_q + 4 + 4 * n);
    if bytes.len() != expected {
        return Err(fail(&format!("expected {expected} bytes, found {}", bytes.len())));
    }
    let mut floats = bytes[40..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let mut take = |k: usize| -> Vec<f64> { floats.by_ref().take(k).collect() };
    let feats = Array2::from_shape_vec((m, d_v), take(m * d_v)).map_err(|e| fail(&e.to_string()))?;
    let query = Array1::from(take(d_q));
    let to_box = |v: Vec<f64>| BoundingBox::new(v[0], v[1], v[2], v[3]);
    let target = to_box(take(4))?;
    let distractors = (0..n).map(|_| to_box(take(4))).collect::<Result<Vec<_>>>()?;
    Ok(GroundingSample {
        grid,
        feats: PatchFeatures(feats),
        query: QueryEmbedding(query),
        target,
        distractors,
        size_class,
    })
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes `manifest.json` and one record per sample under `samples/`.
pub fn write_corpus(dir: &Path, corpus: &Corpus) -> Result<()> {
    std::fs::create_dir_all(dir.join("samples"))?;
    for (i, s) in corpus.samples.iter().enumerate() {
        std::fs::write(dir.join(sample_file_name(i)), encode_sample(s))?;
    }
    std::fs::write(
        dir.join(MANIFEST_FILE),
        serde_json::to_vec_pretty(&corpus.manifest)?,
    )?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<CorpusManifest> {
    let m: CorpusManifest = serde_json::from_slice(&std::fs::read(dir.join(MANIFEST_FILE))?)?;
    if m.format != MANIFEST_FORMAT {
        return Err(Error::Format(format!("unknown corpus format {}", m.format)));
    }
    Ok(m)
}

pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    let manifest = read_manifest(dir)?;
    let files: Vec<String> = if manifest.files.is_empty() {
        (0..manifest.count).map(sample_file_name).collect()
    } else {
        manifest.files.clone()
    };
    if files.len() != manifest.count {
        return Err(Error::Format(format!(
            "manifest lists {} files for {} samples",
            files.len(),
            manifest.count
        )));
    }
    let samples = files
        .iter()
        .map(|f| decode_sample(&std::fs::read(dir.join(f))?))
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus { manifest, samples })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noiseless_single(seed: u64) -> SynthConfig {
        SynthConfig {
            elements: 1,
            noise: 0.0,
            seed,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn noiseless_single_element_features() {
        for seed in 0..20 {
            let cfg = noiseless_single(seed);
            let s = generate_scene(&cfg, 3).unwrap();
            let regions = s.grid.regions::<f64>();
            let mut identity: Option<Vec<f64>> = None;
            for (p, r) in regions.iter().enumerate() {
                let row = s.feats.0.row(p);
                let cover = r.overlap_area(&s.target) / r.area();
                if cover == 0.0 {
                    assert!(row.iter().all(|&v| v == 0.0), "background patch {p}");
                    continue;
                }
                let u: Vec<f64> = row.iter().map(|v| v / cover).collect();
                match &identity {
                    None => identity = Some(u),
                    Some(id) => {
                        for (a, b) in id.iter().zip(&u) {
                            assert!((a - b).abs() < 1e-12);
                        }
                    }
                }
                if cover == 1.0 {
                    let id = identity.as_ref().unwrap();
                    assert!(row.iter().zip(id).all(|(a, b)| (a - b).abs() < 1e-12));
                }
            }
        }
    }

    #[test]
    fn pixel_patches_give_identical_target_features() {
        // with one-pixel patches every patch is fully covered or empty
        let cfg = SynthConfig {
            image_width: 48,
            image_height: 48,
            patch_size: 1,
            small: SideRange { min: 4, max: 8 },
            medium: SideRange { min: 8, max: 12 },
            large: SideRange { min: 12, max: 16 },
            ..noiseless_single(5)
        };
        let s = generate_scene(&cfg, 0).unwrap();
        let target: Vec<_> = (0..s.grid.len())
            .filter(|&p| s.target.contains(s.grid.patch_center(p).unwrap()))
            .collect();
        assert_eq!(target.len() as f64, s.target.area());
        let first = s.feats.0.row(target[0]).to_owned();
        for p in 0..s.grid.len() {
            if target.contains(&p) {
                assert_eq!(s.feats.0.row(p), first);
            } else {
                assert!(s.feats.0.row(p).iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn scenes_are_deterministic() {
        let cfg = SynthConfig { seed: 11, ..SynthConfig::default() };
        let a = generate_scene(&cfg, 5).unwrap();
        let b = generate_scene(&cfg, 5).unwrap();
        assert_eq!(encode_sample(&a), encode_sample(&b));
        let c = generate_scene(&cfg, 6).unwrap();
        assert_ne!(a.feats, c.feats);
    }

    #[test]
    fn scene_invariants() {
        let cfg = SynthConfig { seed: 2, ..SynthConfig::default() };
        for i in 0..100 {
            let s = generate_scene(&cfg, i).unwrap();
            let all: Vec<_> = std::iter::once(s.target).chain(s.distractors.iter().copied()).collect();
            assert_eq!(all.len(), cfg.elements);
            for (k, a) in all.iter().enumerate() {
                assert!(a.within_image(256.0, 256.0));
                for b in &all[k + 1..] {
                    assert!(iou(a, b) <= 0.3);
                }
            }
            assert!(s.feats.0.iter().all(|v| v.is_finite()));
            assert_eq!(cfg.classify(&s.target), s.size_class);
        }
    }

    #[test]
    fn size_classes_are_balanced() {
        let cfg = SynthConfig { seed: 9, ..SynthConfig::default() };
        let corpus = generate_corpus(&cfg, 1000).unwrap();
        for c in SizeClass::ALL {
            let f = corpus.samples.iter().filter(|s| s.size_class == c).count() as f64 / 1000.0;
            assert!((0.30..=0.37).contains(&f), "{c}: {f}");
        }
    }

    #[test]
    fn impossible_placement_errors() {
        let cfg = SynthConfig {
            image_width: 64,
            image_height: 64,
            elements: 20,
            small: SideRange { min: 30, max: 32 },
            medium: SideRange { min: 32, max: 40 },
            large: SideRange { min: 40, max: 60 },
            max_iou: 0.0,
            ..SynthConfig::default()
        };
        assert!(matches!(generate_scene(&cfg, 0), Err(Error::Placement { .. })));
    }

    #[test]
    fn invalid_configs_rejected() {
        let base = SynthConfig::default();
        assert!(SynthConfig { elements: 0, ..base.clone() }.validate().is_err());
        assert!(SynthConfig { noise: -1.0, ..base.clone() }.validate().is_err());
        assert!(SynthConfig { large: SideRange { min: 48, max: 400 }, ..base.clone() }.validate().is_err());
        assert!(SynthConfig { medium: SideRange { min: 20, max: 48 }, ..base }.validate().is_err());
    }

    #[test]
    fn corpus_on_disk_matches_regeneration() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig { seed: 4, ..SynthConfig::default() };
        let corpus = generate_corpus(&cfg, 3).unwrap();
        write_corpus(dir.path(), &corpus).unwrap();
        let back = read_corpus(dir.path()).unwrap();
        assert_eq!(back.manifest, corpus.manifest);
        assert_eq!(back.samples, corpus.samples);
        let again = regenerate(&back.manifest).unwrap();
        assert_eq!(again.samples, corpus.samples);

        let one = generate_corpus(&cfg, 1).unwrap();
        assert_eq!((one.len(), one.manifest.count), (1, 1));
        assert!(generate_corpus(&cfg, 0).is_err());
    }

    #[test]
    fn truncated_record_rejected() {
        let s = generate_scene(&SynthConfig::default(), 0).unwrap();
        let bytes = encode_sample(&s);
        assert!(decode_sample(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_sample(&bad).is_err());
    }
}
