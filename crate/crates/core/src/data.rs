//! Datasets: synthetic renders with redundant private cues, image-folder
//! ingestion, balanced binary tasks and train/eval augmentation.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::seed::{id_hash, stream};
use crate::tensor::Tensor;

pub const PRIVATE: &str = "private";
pub const DESIRABLE: &str = "desirable";
pub const NEUTRAL: &str = "neutral";

/// Private-attribute cues, in the order they are enabled by the redundancy
/// count.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Cue {
    /// Small shape in the top-left corner: an X or a hollow square.
    Glyph,
    /// Global red/blue colour shift.
    Tint,
    /// Stripe orientation in a band along the bottom edge.
    Texture,
}

impl Cue {
    pub const ALL: [Cue; 3] = [Cue::Glyph, Cue::Tint, Cue::Texture];

    pub fn name(self) -> &'static str {
        match self {
            Cue::Glyph => "glyph",
            Cue::Tint => "tint",
            Cue::Texture => "texture",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTaskSpec {
    pub size: usize,
    pub channels: usize,
    /// Number of redundant private cues, 1 to 3.
    pub cues: usize,
    pub noise: f64,
    pub glyph_amplitude: f64,
    pub tint_amplitude: f64,
    pub texture_amplitude: f64,
    pub bar_amplitude: f64,
    pub gradient_amplitude: f64,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        Self {
            size: 32,
            channels: 3,
            cues: 3,
            noise: 0.1,
            glyph_amplitude: 0.8,
            tint_amplitude: 0.15,
            texture_amplitude: 0.3,
            bar_amplitude: 0.6,
            gradient_amplitude: 0.4,
            seed: 0,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.size < 16 {
            errs.push(format!("image size {} below the minimum of 16", self.size));
        }
        if self.channels != 3 {
            errs.push(format!("synthetic renders have 3 channels, got {}", self.channels));
        }
        if !(1..=3).contains(&self.cues) {
            errs.push(format!("cue redundancy must be 1 to 3, got {}", self.cues));
        }
        if !(self.noise >= 0.0) {
            errs.push(format!("noise must be non-negative, got {}", self.noise));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn active_cues(&self) -> &'static [Cue] {
        &Cue::ALL[..self.cues.clamp(1, 3)]
    }

    fn glyph_side(&self) -> usize {
        (self.size / 5).max(4)
    }

    const GLYPH_JITTER: usize = 2;

    /// Top-left square containing every possible glyph placement.
    fn glyph_extent(&self) -> usize {
        1 + Self::GLYPH_JITTER + self.glyph_side()
    }

    fn band_rows(&self) -> std::ops::Range<usize> {
        self.size - self.size / 5..self.size
    }
}

/// One split of a dataset. Every task maps to one label per image.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub images: Tensor,
    pub labels: BTreeMap<String, Vec<usize>>,
    pub ids: Vec<String>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn task(&self, name: &str) -> Result<&[usize]> {
        self.labels
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::usage(format!("no task `{name}` in dataset")))
    }

    pub fn positive_fraction(&self, name: &str) -> Result<f64> {
        let l = self.task(name)?;
        Ok(l.iter().filter(|&&v| v == 1).count() as f64 / l.len().max(1) as f64)
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Split> {
        Ok(Split {
            images: self.images.gather_rows(idx)?,
            labels: self.labels.iter().map(|(k, v)| (k.clone(), idx.iter().map(|&i| v[i]).collect())).collect(),
            ids: idx.iter().map(|&i| self.ids[i].clone()).collect(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskDataset {
    pub train: Split,
    pub val: Split,
    pub test: Split,
    pub warnings: Vec<String>,
    pub synthetic: Option<SyntheticTaskSpec>,
}

impl TaskDataset {
    pub fn task_names(&self) -> Vec<String> {
        self.train.labels.keys().cloned().collect()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.train.images.shape();
        [s[1], s[2], s[3]]
    }
}

fn split_sizes(n: usize) -> [usize; 3] {
    let train = n * 8 / 10;
    let val = n / 10;
    [train, val, n - train - val]
}

fn balanced_labels<R: Rng>(rng: &mut R, n: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).map(|i| usize::from(i < n / 2)).collect();
    v.shuffle(rng);
    v
}

/// Renders `n` samples split 80/10/10. Each attribute is an independent
/// exactly balanced permutation within every split; odd split sizes are
/// rounded up by one with a warning.
pub fn generate_synthetic(spec: &SyntheticTaskSpec, n: usize) -> Result<TaskDataset> {
    spec.validate()?;
    if n < 100 {
        return Err(Error::Size(format!("synthetic datasets need at least 100 samples, got {n}")));
    }
    let mut warnings = Vec::new();
    let mut splits = Vec::with_capacity(3);
    for (name, mut size) in ["train", "val", "test"].into_iter().zip(split_sizes(n)) {
        if size % 2 == 1 {
            warnings.push(format!("{name} split size {size} is odd; using {} for exact balance", size + 1));
            size += 1;
        }
        splits.push(render_split(spec, name, size));
    }
    let test = splits.pop().expect("three splits");
    let val = splits.pop().expect("three splits");
    let train = splits.pop().expect("three splits");
    Ok(TaskDataset { train, val, test, warnings, synthetic: Some(spec.clone()) })
}

fn render_split(spec: &SyntheticTaskSpec, split: &str, n: usize) -> Split {
    let mut rng = stream(spec.seed, &format!("synthetic/{split}"));
    let private = balanced_labels(&mut rng, n);
    let desirable = balanced_labels(&mut rng, n);
    let neutral = balanced_labels(&mut rng, n);
    let len = spec.channels * spec.size * spec.size;
    let mut data = Vec::with_capacity(n * len);
    for i in 0..n {
        data.extend(render(spec, private[i], desirable[i], neutral[i], &mut rng));
    }
    let labels = BTreeMap::from([
        (PRIVATE.to_string(), private),
        (DESIRABLE.to_string(), desirable),
        (NEUTRAL.to_string(), neutral),
    ]);
    Split {
        images: Tensor::new([n, spec.channels, spec.size, spec.size], data).expect("sized buffer"),
        labels,
        ids: (0..n).map(|i| format!("syn-{}-{split}-{i}", spec.seed)).collect(),
    }
}

/// Renders one image with the given attribute values.
pub fn render<R: Rng>(spec: &SyntheticTaskSpec, private: usize, desirable: usize, neutral: usize, rng: &mut R) -> Vec<f64> {
    let s = spec.size;
    let sf = s as f64;
    let plane = s * s;
    let mut img = vec![0.0; spec.channels * plane];
    let sign = |l: usize| if l == 1 { 1.0 } else { -1.0 };

    // smooth background: per-channel offset and vertical ramp
    for c in 0..spec.channels {
        let base = rng.gen_range(-0.1..0.1);
        let ramp = rng.gen_range(-0.2..0.2);
        for y in 0..s {
            for x in 0..s {
                img[c * plane + y * s + x] = base + ramp * (y as f64 / sf - 0.5);
            }
        }
    }

    // neutral: horizontal brightness ramp direction
    let g = spec.gradient_amplitude * sign(neutral);
    for c in 0..spec.channels {
        for y in 0..s {
            for x in 0..s {
                img[c * plane + y * s + x] += g * (2.0 * x as f64 / (sf - 1.0) - 1.0);
            }
        }
    }

    // desirable: central bar, horizontal (1) or vertical (0)
    let (long, thick) = (s / 2, (s / 8).max(2));
    let cy = s / 2 + rng.gen_range(0..=4) - 2;
    let cx = s / 2 + rng.gen_range(0..=4) - 2;
    let (h, w) = if desirable == 1 { (thick, long) } else { (long, thick) };
    for c in 0..spec.channels {
        for y in cy - h / 2..cy - h / 2 + h {
            for x in cx - w / 2..cx - w / 2 + w {
                img[c * plane + y * s + x] += spec.bar_amplitude;
            }
        }
    }

    for &cue in spec.active_cues() {
        match cue {
            Cue::Glyph => {
                let side = spec.glyph_side();
                let oy = 1 + rng.gen_range(0..=SyntheticTaskSpec::GLYPH_JITTER);
                let ox = 1 + rng.gen_range(0..=SyntheticTaskSpec::GLYPH_JITTER);
                for (y, x) in glyph_pixels(private, side) {
                    for c in 0..spec.channels {
                        img[c * plane + (oy + y) * s + ox + x] += spec.glyph_amplitude;
                    }
                }
            }
            Cue::Tint => {
                let t = spec.tint_amplitude * sign(private);
                for v in &mut img[..plane] {
                    *v += t;
                }
                for v in &mut img[2 * plane..3 * plane] {
                    *v -= t;
                }
            }
            Cue::Texture => {
                let phase = rng.gen_range(0.0..std::f64::consts::TAU);
                for y in spec.band_rows() {
                    for x in 0..s {
                        let along = if private == 1 { x } else { y };
                        let v = spec.texture_amplitude * (std::f64::consts::FRAC_PI_2 * along as f64 + phase).sin();
                        for c in 0..spec.channels {
                            img[c * plane + y * s + x] += v;
                        }
                    }
                }
            }
        }
    }

    if spec.noise > 0.0 {
        let normal = Normal::new(0.0, spec.noise).expect("finite noise");
        for v in &mut img {
            *v += normal.sample(rng);
        }
    }
    img
}

/// Pixel offsets of the glyph for a private label: an X for 1, a hollow
/// square for 0.
fn glyph_pixels(label: usize, side: usize) -> Vec<(usize, usize)> {
    let mut px = Vec::new();
    for y in 0..side {
        for x in 0..side {
            let on = if label == 1 {
                x == y || x + y == side - 1
            } else {
                y == 0 || x == 0 || y == side - 1 || x == side - 1
            };
            if on {
                px.push((y, x));
            }
        }
    }
    px
}

/// Reads the private label from a single cue with a hand-built detector. Used
/// to confirm that every enabled cue alone reveals the label.
pub fn decode_cue(spec: &SyntheticTaskSpec, image: &[f64], cue: Cue) -> usize {
    let s = spec.size;
    let plane = s * s;
    let lum = |y: usize, x: usize| (0..spec.channels).map(|c| image[c * plane + y * s + x]).sum::<f64>();
    match cue {
        Cue::Glyph => {
            let side = spec.glyph_side();
            let best = |label| {
                let px = glyph_pixels(label, side);
                let mut m = f64::NEG_INFINITY;
                for oy in 1..=1 + SyntheticTaskSpec::GLYPH_JITTER {
                    for ox in 1..=1 + SyntheticTaskSpec::GLYPH_JITTER {
                        let v = px.iter().map(|&(y, x)| lum(oy + y, ox + x)).sum::<f64>() / px.len() as f64;
                        m = m.max(v);
                    }
                }
                m
            };
            usize::from(best(1) > best(0))
        }
        Cue::Tint => {
            let diff: f64 = image[..plane].iter().zip(&image[2 * plane..3 * plane]).map(|(r, b)| r - b).sum();
            usize::from(diff > 0.0)
        }
        Cue::Texture => {
            let rows = spec.band_rows();
            let (mut along_x, mut along_y) = (0.0, 0.0);
            for y in rows.clone() {
                for x in 0..s {
                    if x + 2 < s {
                        along_x += (lum(y, x + 2) - lum(y, x)).powi(2);
                    }
                    if y + 2 < rows.end {
                        along_y += (lum(y + 2, x) - lum(y, x)).powi(2);
                    }
                }
            }
            // normalize by the number of difference pairs in each direction
            let (nx, ny) = ((s - 2) * rows.len(), s * (rows.len() - 2));
            usize::from(along_x / nx as f64 > along_y / ny as f64)
        }
    }
}

/// Removes one cue from a batch of renders in place: the glyph corner and the
/// stripe band are zeroed, and the tint is removed by centring each channel
/// of each image.
pub fn mask_cue(spec: &SyntheticTaskSpec, images: &mut Tensor, cue: Cue) {
    let s = spec.size;
    let plane = s * s;
    let len = images.sample_len();
    for img in images.data_mut().chunks_mut(len) {
        match cue {
            Cue::Glyph => {
                let e = spec.glyph_extent();
                for c in 0..spec.channels {
                    for y in 0..e {
                        img[c * plane + y * s..c * plane + y * s + e].fill(0.0);
                    }
                }
            }
            Cue::Tint => {
                for ch in img.chunks_mut(plane) {
                    let m = ch.iter().sum::<f64>() / plane as f64;
                    ch.iter_mut().for_each(|v| *v -= m);
                }
            }
            Cue::Texture => {
                for c in 0..spec.channels {
                    for y in spec.band_rows() {
                        img[c * plane + y * s..c * plane + (y + 1) * s].fill(0.0);
                    }
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentationConfig {
    pub scale_min: f64,
    pub scale_max: f64,
    pub crop: usize,
}

impl AugmentationConfig {
    /// No-op augmentation for `side`-pixel images.
    pub fn identity(side: usize) -> Self {
        Self { scale_min: 1.0, scale_max: 1.0, crop: side }
    }

    /// Mild random up-scaling followed by a crop back to the original size.
    pub fn desk(side: usize) -> Self {
        Self { scale_min: 1.0, scale_max: 1.15, crop: side }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale_min >= 1.0 && self.scale_max >= self.scale_min) || self.crop == 0 {
            return Err(Error::usage(format!("invalid augmentation {self:?}")));
        }
        Ok(())
    }
}

/// Train mode draws a scale and crop offset per image per call; eval mode
/// uses the minimum scale and a centre crop.
pub fn augment<R: Rng>(batch: &Tensor, cfg: &AugmentationConfig, mode: Mode, rng: &mut R) -> Result<Tensor> {
    cfg.validate()?;
    if batch.ndim() != 4 || batch.shape()[2] != batch.shape()[3] {
        return Err(Error::dim(format!("augment expects square (N, C, S, S), got {:?}", batch.shape())));
    }
    let (n, c, side) = (batch.shape()[0], batch.shape()[1], batch.shape()[2]);
    if side < cfg.crop {
        return Err(Error::Size(format!("{side}-pixel image smaller than {}-pixel crop", cfg.crop)));
    }
    let k = cfg.crop;
    let mut out = Vec::with_capacity(n * c * k * k);
    for i in 0..n {
        let (scale, fy, fx) = match mode {
            Mode::Train => (rng.gen_range(cfg.scale_min..=cfg.scale_max), rng.gen::<f64>(), rng.gen::<f64>()),
            Mode::Eval => (cfg.scale_min, 0.5, 0.5),
        };
        let scaled = ((side as f64 * scale).round() as usize).max(k);
        let oy = ((scaled - k) as f64 * fy).round() as usize;
        let ox = ((scaled - k) as f64 * fx).round() as usize;
        let img = batch.row(i);
        for ch in 0..c {
            let src = &img[ch * side * side..(ch + 1) * side * side];
            if scaled == side {
                for y in 0..k {
                    out.extend_from_slice(&src[(oy + y) * side + ox..(oy + y) * side + ox + k]);
                }
            } else {
                let r = side as f64 / scaled as f64;
                for y in 0..k {
                    for x in 0..k {
                        out.push(bilinear(src, side, ((oy + y) as f64 + 0.5) * r - 0.5, ((ox + x) as f64 + 0.5) * r - 0.5));
                    }
                }
            }
        }
    }
    Tensor::new([n, c, k, k], out)
}

fn bilinear(src: &[f64], side: usize, y: f64, x: f64) -> f64 {
    let clamp = |v: f64| v.clamp(0.0, (side - 1) as f64);
    let (y, x) = (clamp(y), clamp(x));
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(side - 1), (x0 + 1).min(side - 1));
    let (dy, dx) = (y - y0 as f64, x - x0 as f64);
    let at = |yy: usize, xx: usize| src[yy * side + xx];
    (1.0 - dy) * ((1.0 - dx) * at(y0, x0) + dx * at(y0, x1)) + dy * ((1.0 - dx) * at(y1, x0) + dx * at(y1, x1))
}

/// Labelled images read from a manifest, with a deterministic 80/10/10 split
/// by hashed path.
#[derive(Clone, Debug)]
pub struct ImageFolder {
    pub categories: Vec<String>,
    pub category_of: Vec<usize>,
    pub ids: Vec<String>,
    pub images: Tensor,
    pub splits: [Vec<usize>; 3],
}

impl ImageFolder {
    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn split_sizes(&self) -> [usize; 3] {
        [self.splits[0].len(), self.splits[1].len(), self.splits[2].len()]
    }
}

const BLOB_MAGIC: &[u8; 8] = b"VEILIMG1";

/// Loads every image listed in a `path,category` manifest, resized to
/// `side`×`side` RGB in [-1, 1]. Paths are relative to the manifest; the form
/// `blob#i` refers to image `i` of a raw tensor blob written by
/// [`export_split`]. All unreadable entries are reported together.
pub fn load_image_folder(manifest: &Path, side: usize) -> Result<ImageFolder> {
    let root = manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(manifest).map_err(|e| Error::Load {
        path: manifest.to_path_buf(),
        reason: e.to_string(),
    })?;
    let headers = reader.headers().map_err(|e| Error::Schema(e.to_string()))?.clone();
    if headers.len() != 2 || &headers[0] != "path" || &headers[1] != "category" {
        return Err(Error::Schema(format!(
            "manifest header must be `path,category`, got `{}`",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }

    let mut rows = Vec::new();
    let mut seen = HashSet::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Schema(format!("manifest row {}: {e}", line + 2)))?;
        if rec.len() != 2 {
            return Err(Error::Schema(format!("manifest row {} has {} fields", line + 2, rec.len())));
        }
        let (path, cat) = (rec[0].to_string(), rec[1].to_string());
        if !seen.insert(path.clone()) {
            return Err(Error::Duplicate(format!("path `{path}` listed more than once")));
        }
        rows.push((path, cat));
    }

    let mut categories: Vec<String> = rows.iter().map(|(_, c)| c.clone()).collect();
    categories.sort();
    categories.dedup();

    let mut blobs: BTreeMap<PathBuf, Tensor> = BTreeMap::new();
    let mut data = Vec::with_capacity(rows.len() * 3 * side * side);
    let mut failures = Vec::new();
    for (path, _) in &rows {
        match load_one(&root, path, side, &mut blobs) {
            Ok(px) => data.extend(px),
            Err(e) => failures.push(format!("{path}: {e}")),
        }
    }
    if !failures.is_empty() {
        return Err(Error::Load { path: manifest.to_path_buf(), reason: failures.join("; ") });
    }

    let ids: Vec<String> = rows.iter().map(|(p, _)| p.clone()).collect();
    let category_of = rows
        .iter()
        .map(|(_, c)| categories.binary_search(c).expect("category collected above"))
        .collect();
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by_key(|&i| (id_hash(&ids[i]), i));
    let [tr, va, _] = split_sizes(ids.len());
    let splits = [order[..tr].to_vec(), order[tr..tr + va].to_vec(), order[tr + va..].to_vec()];
    Ok(ImageFolder {
        categories,
        category_of,
        images: Tensor::new([ids.len(), 3, side, side], data)?,
        ids,
        splits,
    })
}

fn load_one(root: &Path, entry: &str, side: usize, blobs: &mut BTreeMap<PathBuf, Tensor>) -> Result<Vec<f64>> {
    if let Some((file, idx)) = entry.rsplit_once('#') {
        let idx: usize = idx.parse().map_err(|_| Error::usage(format!("bad blob index `{idx}`")))?;
        let path = root.join(file);
        if !blobs.contains_key(&path) {
            let t = read_blob(&path)?;
            blobs.insert(path.clone(), t);
        }
        let t = &blobs[&path];
        if t.shape()[1] != 3 || t.shape()[2] != side || t.shape()[3] != side {
            return Err(Error::Size(format!("blob images are {:?}, expected 3x{side}x{side}", &t.shape()[1..])));
        }
        if idx >= t.batch() {
            return Err(Error::Size(format!("blob index {idx} beyond {} images", t.batch())));
        }
        return Ok(t.row(idx).to_vec());
    }
    let img = image::open(root.join(entry)).map_err(|e| Error::usage(e.to_string()))?;
    let rgb = image::imageops::resize(&img.to_rgb8(), side as u32, side as u32, image::imageops::FilterType::Triangle);
    let mut out = vec![0.0; 3 * side * side];
    for (x, y, p) in rgb.enumerate_pixels() {
        for c in 0..3 {
            out[c * side * side + y as usize * side + x as usize] = p[c] as f64 / 127.5 - 1.0;
        }
    }
    Ok(out)
}

pub fn write_blob(path: &Path, images: &Tensor) -> Result<()> {
    if images.ndim() != 4 {
        return Err(Error::dim(format!("blob expects (N, C, H, W), got {:?}", images.shape())));
    }
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    f.write_all(BLOB_MAGIC)?;
    for &d in images.shape() {
        f.write_all(&(d as u64).to_le_bytes())?;
    }
    for &v in images.data() {
        f.write_all(&v.to_le_bytes())?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_blob(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let bad = |m: &str| Error::Load { path: path.to_path_buf(), reason: m.to_string() };
    if bytes.len() < 40 || &bytes[..8] != BLOB_MAGIC {
        return Err(bad("not an image blob"));
    }
    let dims: Vec<usize> =
        (0..4).map(|i| u64::from_le_bytes(bytes[8 + 8 * i..16 + 8 * i].try_into().unwrap()) as usize).collect();
    let n: usize = dims.iter().product();
    if bytes.len() != 40 + 8 * n {
        return Err(bad("blob length does not match its header"));
    }
    let data = bytes[40..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Tensor::new(dims, data)
}

/// Category string of an exported synthetic sample, e.g. `p1d0n1`.
pub fn synthetic_category(split: &Split, i: usize) -> String {
    let l = |t: &str| split.labels.get(t).map_or(0, |v| v[i]);
    format!("p{}d{}n{}", l(PRIVATE), l(DESIRABLE), l(NEUTRAL))
}

/// Writes `manifest.csv` and `images.bin` for a split into `dir`.
pub fn export_split(split: &Split, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    write_blob(&dir.join("images.bin"), &split.images)?;
    let manifest = dir.join("manifest.csv");
    let mut w = csv::Writer::from_path(&manifest).map_err(|e| Error::Io(e.into()))?;
    let io = |e: csv::Error| Error::Io(e.into());
    w.write_record(["path", "category"]).map_err(io)?;
    for i in 0..split.len() {
        w.write_record([format!("images.bin#{i}"), synthetic_category(split, i)]).map_err(io)?;
    }
    w.flush()?;
    Ok(manifest)
}

/// Binary task for `target`: all of its images as positives and an equal
/// number of negatives drawn uniformly from the other categories. Positives
/// and negatives are split 80/10/10 separately by hashed id, so every split
/// is exactly balanced.
pub fn make_balanced_task(folder: &ImageFolder, target: &str, seed: u64) -> Result<TaskDataset> {
    let t = folder
        .categories
        .binary_search_by(|c| c.as_str().cmp(target))
        .map_err(|_| Error::usage(format!("category `{target}` not in pool")))?;
    if folder.categories.len() < 2 {
        return Err(Error::usage("balanced task needs at least two categories"));
    }
    let pos: Vec<usize> = (0..folder.ids.len()).filter(|&i| folder.category_of[i] == t).collect();
    let mut others: Vec<usize> = (0..folder.ids.len()).filter(|&i| folder.category_of[i] != t).collect();
    if pos.is_empty() || others.len() < pos.len() {
        return Err(Error::Size(format!(
            "{} positives and {} candidate negatives for `{target}`",
            pos.len(),
            others.len()
        )));
    }
    others.shuffle(&mut stream(seed, &format!("balanced-task/{target}")));
    let neg = &others[..pos.len()];

    let by_hash = |v: &[usize]| {
        let mut v = v.to_vec();
        v.sort_by_key(|&i| (id_hash(&folder.ids[i]), i));
        let [tr, va, _] = split_sizes(v.len());
        [v[..tr].to_vec(), v[tr..tr + va].to_vec(), v[tr + va..].to_vec()]
    };
    let (ps, ns) = (by_hash(&pos), by_hash(neg));
    let mut parts = Vec::with_capacity(3);
    for (p, n) in ps.iter().zip(&ns) {
        let idx: Vec<usize> = p.iter().chain(n).copied().collect();
        let labels = std::iter::repeat(1).take(p.len()).chain(std::iter::repeat(0).take(n.len())).collect();
        parts.push(Split {
            images: folder.images.gather_rows(&idx)?,
            labels: BTreeMap::from([(target.to_string(), labels)]),
            ids: idx.iter().map(|&i| folder.ids[i].clone()).collect(),
        });
    }
    let test = parts.pop().expect("three splits");
    let val = parts.pop().expect("three splits");
    let train = parts.pop().expect("three splits");
    Ok(TaskDataset { train, val, test, warnings: Vec::new(), synthetic: None })
}
