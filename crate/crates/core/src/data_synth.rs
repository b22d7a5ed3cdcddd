//! Procedural multi-domain identity datasets and PK mini-batch sampling.
//!
//! Every identity owns a prototype (a background plus colored rectangles and
//! ellipses whose layout is the identity signature). Each image perturbs the
//! layout slightly, then a domain re-renders it through its own color
//! transform, translation jitter and sensor noise. All randomness is derived from `(seed, domain, identity,
//! image)` so generation is schedule independent.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{s, Array3, Array4};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.tsv";
const MANIFEST_MAGIC: &str = "#DDAN-MANIFEST";
const MANIFEST_VERSION: &str = "v1";

/// Mixes a base seed with a sequence of integers (splitmix64 chain).
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    parts
        .iter()
        .fold(mix(base), |acc, &p| mix(acc ^ mix(p.wrapping_add(0x632B_E59B_D9B4_E019))))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }
}

impl Default for ImageShape {
    fn default() -> Self {
        Self::new(3, 32, 32)
    }
}

impl fmt::Display for ImageShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

impl FromStr for ImageShape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let dims: Vec<usize> = s
            .split(['x', 'X'])
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::InvalidArgument(format!("bad shape `{s}`, expected CxHxW")))?;
        match dims.as_slice() {
            &[c, h, w] if (c == 1 || c == 3) && h >= 4 && w >= 4 => Ok(Self::new(c, h, w)),
            _ => Err(Error::InvalidArgument(format!(
                "bad shape `{s}`: need C in {{1,3}} and H, W >= 4"
            ))),
        }
    }
}

/// One filled rectangle or ellipse, in fractional image coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Part {
    pub ellipse: bool,
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
    pub color: [f64; 3],
}

/// Identity-specific structure: a background tone and a pedestrian-like
/// layout (head, torso, legs, accessories). `base_pattern` is the nuisance-free
/// rendering, values in [0, 1].
#[derive(Debug, Clone)]
pub struct IdentityPrototype {
    pub identity_id: u32,
    pub background: [f64; 3],
    pub parts: Vec<Part>,
    pub base_pattern: Array3<f64>,
}

fn random_color<R: Rng>(rng: &mut R) -> [f64; 3] {
    [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)]
}

fn paint(background: [f64; 3], parts: &[Part], shape: ImageShape) -> Array3<f64> {
    let (c, h, w) = (shape.channels, shape.height, shape.width);
    let mut img = Array3::<f64>::zeros((c, h, w));
    for ch in 0..c {
        img.slice_mut(s![ch, .., ..]).fill(background[ch]);
    }
    for part in parts {
        for y in 0..h {
            let dy = ((y as f64 + 0.5) / h as f64 - part.cy) / part.ry;
            for x in 0..w {
                let dx = ((x as f64 + 0.5) / w as f64 - part.cx) / part.rx;
                let inside = if part.ellipse {
                    dx * dx + dy * dy <= 1.0
                } else {
                    dx.abs() <= 1.0 && dy.abs() <= 1.0
                };
                if inside {
                    for ch in 0..c {
                        img[[ch, y, x]] = part.color[ch].clamp(0.0, 1.0);
                    }
                }
            }
        }
    }
    img
}

impl IdentityPrototype {
    /// Renders the prototype of `identity_id` from the dataset seed.
    pub fn render(identity_id: u32, shape: ImageShape, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x5052_4f54, identity_id as u64]));
        let g = rng.random_range(0.25..0.55);
        let background = [g, g, g].map(|v: f64| (v + rng.random_range(-0.05..0.05)).clamp(0.0, 1.0));
        let width = rng.random_range(0.16..0.26);
        let split = rng.random_range(0.50..0.62);
        let mut parts = vec![
            // torso
            Part {
                ellipse: false,
                cx: 0.5,
                cy: (0.22 + split) / 2.0,
                rx: width,
                ry: (split - 0.22) / 2.0,
                color: random_color(&mut rng),
            },
            // legs
            Part {
                ellipse: false,
                cx: 0.5,
                cy: (split + 0.95) / 2.0,
                rx: width * rng.random_range(0.6..0.9),
                ry: (0.95 - split) / 2.0,
                color: random_color(&mut rng),
            },
            // head
            Part {
                ellipse: true,
                cx: 0.5,
                cy: 0.13,
                rx: 0.09,
                ry: 0.09,
                color: [0.85, 0.7, 0.55].map(|v: f64| v + rng.random_range(-0.2..0.1)),
            },
        ];
        for _ in 0..rng.random_range(1..=2) {
            parts.push(Part {
                ellipse: rng.random_bool(0.5),
                cx: rng.random_range(0.25..0.75),
                cy: rng.random_range(0.25..0.8),
                rx: rng.random_range(0.05..0.14),
                ry: rng.random_range(0.05..0.14),
                color: random_color(&mut rng),
            });
        }
        let base_pattern = paint(background, &parts, shape);
        Self {
            identity_id,
            background,
            parts,
            base_pattern,
        }
    }

    /// One appearance of the identity: parts shift and rescale slightly, colors
    /// and background drift, and a random occluder may cover part of the body.
    pub fn instance(&self, shape: ImageShape, image_seed: u64) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(image_seed, &[0x494e_5354]));
        let (sx, sy) = (rng.random_range(-0.04..0.04), rng.random_range(-0.03..0.03));
        let scale = rng.random_range(0.9..1.1);
        let mut parts: Vec<Part> = self
            .parts
            .iter()
            .map(|p| Part {
                cx: 0.5 + (p.cx - 0.5) * scale + sx + rng.random_range(-0.02..0.02),
                cy: p.cy + sy + rng.random_range(-0.02..0.02),
                rx: p.rx * scale * rng.random_range(0.9..1.1),
                ry: p.ry * scale * rng.random_range(0.9..1.1),
                color: p.color.map(|v| v + rng.random_range(-0.08..0.08)),
                ..*p
            })
            .collect();
        if rng.random_bool(0.35) {
            parts.push(Part {
                ellipse: false,
                cx: rng.random_range(0.0..1.0),
                cy: rng.random_range(0.2..1.0),
                rx: rng.random_range(0.1..0.25),
                ry: rng.random_range(0.08..0.2),
                color: random_color(&mut rng),
            });
        }
        let background = self.background.map(|v| (v + rng.random_range(-0.12..0.12)).clamp(0.0, 1.0));
        paint(background, &parts, shape)
    }
}

/// Appearance statistics of one camera domain.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DomainSpec {
    pub domain_id: u32,
    /// Hue rotation in turns, within [-0.5, 0.5].
    pub hue_shift: f64,
    pub brightness_gain: f64,
    pub contrast_gain: f64,
    /// Maximum translation as a fraction of the image side.
    pub geometric_jitter: f64,
    pub noise_sigma: f64,
    /// Peak amplitude of the domain's stripe overlay (sensor/lighting
    /// pattern); its phase varies per image.
    pub texture_amplitude: f64,
    /// Stripe frequency in cycles per image side.
    pub texture_frequency: f64,
    /// Stripe orientation in radians.
    pub texture_angle: f64,
    /// Per-channel overlay weights in [-1, 1].
    pub texture_tint: [f64; 3],
    pub rng_seed: u64,
}

impl DomainSpec {
    /// Draws the appearance parameters of `domain_id` from the dataset seed.
    pub fn sample(domain_id: u32, seed: u64) -> Self {
        let rng_seed = derive_seed(seed, &[0x444f_4d, domain_id as u64]);
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        Self {
            domain_id,
            hue_shift: rng.random_range(-0.5..=0.5),
            brightness_gain: rng.random_range(0.6..1.4),
            contrast_gain: rng.random_range(0.5..1.5),
            geometric_jitter: rng.random_range(0.03..0.10),
            noise_sigma: rng.random_range(0.01..0.06),
            texture_amplitude: rng.random_range(0.08..0.2),
            texture_frequency: rng.random_range(2.0..6.0),
            texture_angle: rng.random_range(0.0..std::f64::consts::PI),
            texture_tint: [0; 3].map(|_| rng.random_range(-1.0..=1.0)),
            rng_seed,
        }
    }

    /// Renders `pattern` as seen from this domain. Output is clamped to [0, 1]
    /// and is a pure function of `(pattern, self, image_seed)`.
    pub fn apply(&self, pattern: &Array3<f64>, image_seed: u64) -> Array3<f64> {
        let (c, h, w) = pattern.dim();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.rng_seed, &[image_seed]));

        let mut colored = pattern.clone();
        if c == 3 && self.hue_shift != 0.0 {
            // rotate chroma in YIQ space
            let angle = self.hue_shift * std::f64::consts::TAU;
            let (sin, cos) = angle.sin_cos();
            for y in 0..h {
                for x in 0..w {
                    let (r, g, b) = (pattern[[0, y, x]], pattern[[1, y, x]], pattern[[2, y, x]]);
                    let luma = 0.299 * r + 0.587 * g + 0.114 * b;
                    let i = 0.596 * r - 0.274 * g - 0.322 * b;
                    let q = 0.211 * r - 0.523 * g + 0.312 * b;
                    let (i2, q2) = (i * cos - q * sin, i * sin + q * cos);
                    colored[[0, y, x]] = luma + 0.956 * i2 + 0.621 * q2;
                    colored[[1, y, x]] = luma - 0.272 * i2 - 0.647 * q2;
                    colored[[2, y, x]] = luma - 1.106 * i2 + 1.703 * q2;
                }
            }
        }
        colored.mapv_inplace(|v| {
            (((v - 0.5) * self.contrast_gain + 0.5) * self.brightness_gain).clamp(0.0, 1.0)
        });

        let max_dx = (self.geometric_jitter * w as f64).round() as i64;
        let max_dy = (self.geometric_jitter * h as f64).round() as i64;
        let dx = rng.random_range(-max_dx..=max_dx);
        let dy = rng.random_range(-max_dy..=max_dy);
        let noise = Normal::new(0.0, self.noise_sigma.max(0.0)).expect("finite sigma");
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let (ts, tc) = self.texture_angle.sin_cos();
        let k = std::f64::consts::TAU * self.texture_frequency;

        let mut out = Array3::<f64>::zeros((c, h, w));
        for ch in 0..c {
            for y in 0..h {
                let sy = (y as i64 - dy).clamp(0, h as i64 - 1) as usize;
                for x in 0..w {
                    let sx = (x as i64 - dx).clamp(0, w as i64 - 1) as usize;
                    let n = if self.noise_sigma > 0.0 {
                        noise.sample(&mut rng)
                    } else {
                        0.0
                    };
                    let u = (x as f64 + 0.5) / w as f64 * tc + (y as f64 + 0.5) / h as f64 * ts;
                    let stripe = self.texture_amplitude * self.texture_tint[ch.min(2)] * (k * u + phase).sin();
                    out[[ch, y, x]] = (colored[[ch, sy, sx]] + stripe + n).clamp(0.0, 1.0);
                }
            }
        }
        out
    }
}

/// One training or evaluation image with its labels.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Array3<f64>,
    pub identity_id: u32,
    pub domain_id: u32,
    /// Binary domain label: true for the central domain.
    pub is_central: bool,
}

/// Optional per-row role used by the retrieval protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SplitTag {
    #[default]
    Any,
    /// Gallery-only identity without a probe.
    Distractor,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: String,
    pub identity_id: u32,
    pub domain_id: u32,
    pub split: SplitTag,
}

/// Index of a dataset on disk: `<root>/domain_<d>/id_<i>/img_<j>.png` plus
/// `manifest.tsv`.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub shape: ImageShape,
    pub central_domain: u32,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// N_s for every domain present.
    pub fn domain_counts(&self) -> BTreeMap<u32, usize> {
        let mut counts = BTreeMap::new();
        for e in &self.entries {
            *counts.entry(e.domain_id).or_insert(0) += 1;
        }
        counts
    }

    pub fn domains(&self) -> Vec<u32> {
        self.domain_counts().into_keys().collect()
    }

    pub fn num_identities(&self) -> usize {
        self.identity_domains().len()
    }

    /// Identity → owning domain.
    pub fn identity_domains(&self) -> BTreeMap<u32, u32> {
        self.entries
            .iter()
            .map(|e| (e.identity_id, e.domain_id))
            .collect()
    }

    /// Rows restricted to the given domains, keeping root and central id.
    pub fn filter_domains(&self, domains: &[u32]) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .filter(|e| domains.contains(&e.domain_id))
                .cloned()
                .collect(),
            ..self.clone()
        }
    }

    /// Checks identity disjointness across domains.
    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::Data("manifest has no rows".into()));
        }
        let mut owner: BTreeMap<u32, u32> = BTreeMap::new();
        for e in &self.entries {
            if let Some(&d) = owner.get(&e.identity_id) {
                if d != e.domain_id {
                    return Err(Error::Data(format!(
                        "identity {} appears in domains {d} and {}",
                        e.identity_id, e.domain_id
                    )));
                }
            } else {
                owner.insert(e.identity_id, e.domain_id);
            }
        }
        Ok(())
    }

    pub fn to_tsv(&self) -> String {
        let mut out = format!(
            "{MANIFEST_MAGIC}\t{MANIFEST_VERSION}\tcentral={}\tshape={}\n",
            self.central_domain, self.shape
        );
        for e in &self.entries {
            out.push_str(&format!("{}\t{}\t{}", e.path, e.identity_id, e.domain_id));
            if e.split == SplitTag::Distractor {
                out.push_str("\tdistractor");
            }
            out.push('\n');
        }
        out
    }

    pub fn write(&self) -> Result<()> {
        let path = self.root.join(MANIFEST_FILE);
        fs::write(&path, self.to_tsv()).map_err(|e| Error::io(&path, e))
    }

    /// Reads `<root>/manifest.tsv`.
    pub fn read(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref();
        let path = root.join(MANIFEST_FILE);
        let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut lines = BufReader::new(file).lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::format("manifest", "empty file"))?
            .map_err(|e| Error::io(&path, e))?;
        let fields: Vec<&str> = header.split('\t').collect();
        if fields.first() != Some(&MANIFEST_MAGIC) || fields.get(1) != Some(&MANIFEST_VERSION) {
            return Err(Error::format("manifest", format!("bad header `{header}`")));
        }
        let mut central = None;
        let mut shape = None;
        for f in &fields[2..] {
            if let Some(v) = f.strip_prefix("central=") {
                central = Some(
                    v.parse::<u32>()
                        .map_err(|_| Error::format("manifest", format!("bad central `{v}`")))?,
                );
            } else if let Some(v) = f.strip_prefix("shape=") {
                shape = Some(v.parse::<ImageShape>()?);
            }
        }
        let mut entries = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::io(&path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() < 3 || cols.len() > 4 {
                return Err(Error::format(
                    "manifest",
                    format!("line {}: expected 3 or 4 columns", lineno + 2),
                ));
            }
            let parse = |v: &str| {
                v.parse::<u32>()
                    .map_err(|_| Error::format("manifest", format!("line {}: bad integer `{v}`", lineno + 2)))
            };
            let split = match cols.get(3) {
                None => SplitTag::Any,
                Some(&"distractor") => SplitTag::Distractor,
                Some(other) => {
                    return Err(Error::format(
                        "manifest",
                        format!("line {}: unknown split tag `{other}`", lineno + 2),
                    ))
                }
            };
            entries.push(ManifestEntry {
                path: cols[0].to_string(),
                identity_id: parse(cols[1])?,
                domain_id: parse(cols[2])?,
                split,
            });
        }
        let manifest = Self {
            root: root.to_path_buf(),
            shape: shape.unwrap_or_default(),
            central_domain: central.unwrap_or(0),
            entries,
        };
        manifest.validate()?;
        Ok(manifest)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenerateConfig {
    pub num_domains: usize,
    pub ids_per_domain: usize,
    pub images_per_id: usize,
    pub shape: ImageShape,
    pub seed: u64,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            num_domains: 5,
            ids_per_domain: 20,
            images_per_id: 8,
            shape: ImageShape::default(),
            seed: 7,
        }
    }
}

/// Renders one image of `identity_id` in `domain` (deterministic).
pub fn render_image(config: &GenerateConfig, domain: &DomainSpec, prototype: &IdentityPrototype, index: usize) -> Array3<f64> {
    let seed = derive_seed(config.seed, &[domain.domain_id as u64, prototype.identity_id as u64, index as u64]);
    let shape = ImageShape::new(prototype.base_pattern.dim().0, prototype.base_pattern.dim().1, prototype.base_pattern.dim().2);
    domain.apply(&prototype.instance(shape, seed), seed)
}

/// Writes a full synthetic dataset plus manifest under `out_dir`.
pub fn generate_dataset(config: &GenerateConfig, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let out_dir = out_dir.as_ref();
    if config.num_domains == 0 || config.ids_per_domain == 0 || config.images_per_id == 0 {
        return Err(Error::InvalidArgument(
            "domains, ids per domain and images per id must all be >= 1".into(),
        ));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut jobs = Vec::new();
    for d in 0..config.num_domains {
        for i in 0..config.ids_per_domain {
            let id = (d * config.ids_per_domain + i) as u32;
            for j in 0..config.images_per_id {
                jobs.push((d as u32, id, j));
            }
        }
    }
    let domains: Vec<DomainSpec> = (0..config.num_domains as u32)
        .map(|d| DomainSpec::sample(d, config.seed))
        .collect();
    let prototypes: Vec<IdentityPrototype> = (0..(config.num_domains * config.ids_per_domain) as u32)
        .map(|id| IdentityPrototype::render(id, config.shape, config.seed))
        .collect();

    let entries = jobs
        .par_iter()
        .map(|&(d, id, j)| {
            let rel = format!("domain_{d}/id_{id}/img_{j}.png");
            let path = out_dir.join(&rel);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            let img = render_image(config, &domains[d as usize], &prototypes[id as usize], j);
            save_png(&img, &path)?;
            Ok(ManifestEntry {
                path: rel,
                identity_id: id,
                domain_id: d,
                split: SplitTag::Any,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let manifest = DatasetManifest {
        root: out_dir.to_path_buf(),
        shape: config.shape,
        central_domain: 0,
        entries,
    };
    manifest.write()?;
    Ok(manifest)
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn save_png(img: &Array3<f64>, path: &Path) -> Result<()> {
    let (c, h, w) = img.dim();
    let mut raw = Vec::with_capacity(c * h * w);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                raw.push(to_u8(img[[ch, y, x]]));
            }
        }
    }
    let color = if c == 1 {
        image::ExtendedColorType::L8
    } else {
        image::ExtendedColorType::Rgb8
    };
    image::save_buffer_with_format(path, &raw, w as u32, h as u32, color, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

pub fn load_png(path: &Path, shape: ImageShape) -> Result<Array3<f64>> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w != shape.width || h != shape.height {
        return Err(Error::Data(format!(
            "{} is {w}x{h}, manifest declares {}x{}",
            path.display(),
            shape.width,
            shape.height
        )));
    }
    let mut out = Array3::<f64>::zeros((shape.channels, h, w));
    if shape.channels == 1 {
        let luma = img.to_luma8();
        for (x, y, p) in luma.enumerate_pixels() {
            out[[0, y as usize, x as usize]] = p.0[0] as f64 / 255.0;
        }
    } else {
        let rgb = img.to_rgb8();
        for (x, y, p) in rgb.enumerate_pixels() {
            for ch in 0..3 {
                out[[ch, y as usize, x as usize]] = p.0[ch] as f64 / 255.0;
            }
        }
    }
    Ok(out)
}

/// A manifest with all images decoded into memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    /// N × C × H × W.
    pub images: Array4<f64>,
    pub identities: Vec<u32>,
    pub domains: Vec<u32>,
}

impl Dataset {
    pub fn load(manifest: &DatasetManifest) -> Result<Self> {
        manifest.validate()?;
        let shape = manifest.shape;
        let decoded = manifest
            .entries
            .par_iter()
            .map(|e| load_png(&manifest.root.join(&e.path), shape))
            .collect::<Result<Vec<_>>>()?;
        let mut images = Array4::<f64>::zeros((decoded.len(), shape.channels, shape.height, shape.width));
        for (n, img) in decoded.into_iter().enumerate() {
            images.slice_mut(s![n, .., .., ..]).assign(&img);
        }
        Ok(Self {
            identities: manifest.entries.iter().map(|e| e.identity_id).collect(),
            domains: manifest.entries.iter().map(|e| e.domain_id).collect(),
            manifest: manifest.clone(),
            images,
        })
    }

    pub fn len(&self) -> usize {
        self.identities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identities.is_empty()
    }

    pub fn central_domain(&self) -> u32 {
        self.manifest.central_domain
    }

    /// Stacks the given rows into an N × C × H × W batch.
    pub fn gather(&self, rows: &[usize]) -> Array4<f64> {
        let (_, c, h, w) = self.images.dim();
        let mut out = Array4::<f64>::zeros((rows.len(), c, h, w));
        for (n, &r) in rows.iter().enumerate() {
            out.slice_mut(s![n, .., .., ..]).assign(&self.images.slice(s![r, .., .., ..]));
        }
        out
    }

    pub fn sample(&self, row: usize) -> Sample {
        Sample {
            image: self.images.slice(s![row, .., .., ..]).to_owned(),
            identity_id: self.identities[row],
            domain_id: self.domains[row],
            is_central: self.domains[row] == self.manifest.central_domain,
        }
    }
}

/// Draws P identities × K images. Identities are chosen uniformly over the
/// union of all domains; an identity with fewer than K images is sampled with
/// replacement.
#[derive(Debug, Clone)]
pub struct PkSampler {
    rows_by_identity: Vec<(u32, Vec<usize>)>,
    total_rows: usize,
    p: usize,
    k: usize,
}

impl PkSampler {
    pub fn new(identities: &[u32], p: usize, k: usize) -> Result<Self> {
        if p == 0 || k == 0 {
            return Err(Error::InvalidArgument("P and K must be >= 1".into()));
        }
        let mut grouped: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (row, &id) in identities.iter().enumerate() {
            grouped.entry(id).or_default().push(row);
        }
        if grouped.len() < p {
            return Err(Error::InvalidArgument(format!(
                "P = {p} identities requested but only {} available",
                grouped.len()
            )));
        }
        if p * k > identities.len() {
            return Err(Error::InvalidArgument(format!(
                "P*K = {} exceeds the {} available images",
                p * k,
                identities.len()
            )));
        }
        Ok(Self {
            rows_by_identity: grouped.into_iter().collect(),
            total_rows: identities.len(),
            p,
            k,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.p * self.k
    }

    /// Batches per epoch: one pass worth of images, at least one.
    pub fn batches_per_epoch(&self) -> usize {
        (self.total_rows / self.batch_size()).max(1)
    }

    /// Row indices of one batch, grouped by identity.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<usize> {
        let mut rows = Vec::with_capacity(self.batch_size());
        for slot in index::sample(rng, self.rows_by_identity.len(), self.p) {
            let members = &self.rows_by_identity[slot].1;
            if members.len() >= self.k {
                rows.extend(index::sample(rng, members.len(), self.k).into_iter().map(|i| members[i]));
            } else {
                rows.extend((0..self.k).map(|_| members[rng.random_range(0..members.len())]));
            }
        }
        rows
    }
}

/// Convenience wrapper returning full samples.
pub fn pk_sample_batch<R: Rng + ?Sized>(dataset: &Dataset, p: usize, k: usize, rng: &mut R) -> Result<Vec<Sample>> {
    let sampler = PkSampler::new(&dataset.identities, p, k)?;
    Ok(sampler.sample(rng).into_iter().map(|r| dataset.sample(r)).collect())
}
