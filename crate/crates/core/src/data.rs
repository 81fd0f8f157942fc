//! Procedural shapes dataset, PPM image files, and constraint-set sampling.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Cursor, Write};
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageDecoder};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::semantic::{Constraint, SemanticSpace};
use crate::tensor::Tensor;

pub const NUM_COLOR_BINS: usize = 8;
pub const BACKGROUND: f32 = -1.0;
const MAX_PAIR_RETRIES: usize = 1000;

/// Byte to pixel value: `u8 / 127.5 − 1`.
#[inline]
pub fn byte_to_unit(b: u8) -> f32 {
    b as f32 / 127.5 - 1.0
}

/// Pixel value to byte: `clamp(round((f + 1) · 127.5), 0, 255)`.
#[inline]
pub fn unit_to_byte(f: f32) -> u8 {
    ((f + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Interleaved RGB8 bytes of a `3 × H × W` image.
pub fn to_rgb8(image: &Tensor<f32>) -> Result<(usize, usize, Vec<u8>)> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(invalid(format!("expected a 3×H×W image, got {s:?}")));
    }
    if !image.all_finite() {
        return Err(Error::Codec("image contains non-finite values".into()));
    }
    let (h, w) = (s[1], s[2]);
    let d = image.data();
    let mut out = Vec::with_capacity(3 * h * w);
    for p in 0..h * w {
        for c in 0..3 {
            out.push(unit_to_byte(d[c * h * w + p]));
        }
    }
    Ok((w, h, out))
}

/// Inverse of [`to_rgb8`].
pub fn from_rgb8(width: usize, height: usize, rgb: &[u8]) -> Result<Tensor<f32>> {
    if width == 0 || height == 0 {
        return Err(Error::Codec("zero-sized image".into()));
    }
    if rgb.len() != 3 * width * height {
        return Err(Error::Codec(format!(
            "expected {} bytes for {width}×{height} RGB, got {}",
            3 * width * height,
            rgb.len()
        )));
    }
    let n = width * height;
    let mut data = vec![0f32; 3 * n];
    for (p, px) in rgb.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * n + p] = byte_to_unit(px[c]);
        }
    }
    Ok(Tensor::new(&[3, height, width], data)?)
}

/// Rounds every pixel to the nearest representable byte value.
pub fn quantize(image: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (w, h, rgb) = to_rgb8(image)?;
    from_rgb8(w, h, &rgb)
}

pub fn encode_ppm(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let (w, h, rgb) = to_rgb8(image)?;
    let mut buf = Vec::with_capacity(rgb.len() + 16);
    PnmEncoder::new(&mut buf)
        .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
        .encode(rgb.as_slice(), w as u32, h as u32, ExtendedColorType::Rgb8)
        .map_err(|e| Error::Codec(e.to_string()))?;
    Ok(buf)
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor<f32>> {
    if !bytes.starts_with(b"P6") {
        return Err(Error::Codec("not a binary PPM (missing P6 magic)".into()));
    }
    let dec = image::codecs::pnm::PnmDecoder::new(Cursor::new(bytes))
        .map_err(|e| Error::Codec(e.to_string()))?;
    if dec.color_type() != image::ColorType::Rgb8 {
        return Err(Error::Codec(format!("unsupported PPM color type {:?}", dec.color_type())));
    }
    let (w, h) = dec.dimensions();
    let mut rgb = vec![0u8; dec.total_bytes() as usize];
    dec.read_image(&mut rgb)
        .map_err(|e| Error::Codec(e.to_string()))?;
    from_rgb8(w as usize, h as usize, &rgb)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Square,
    Circle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeMeta {
    pub id: usize,
    pub shape_kind: ShapeKind,
    /// Fill color in `[−1, 1]`, always a multiple of `1/127.5` offset by −1.
    pub color: [f32; 3],
    /// Side (square) or diameter (circle) as a fraction of the image width.
    pub size: f32,
    /// `[x, y]` in pixel units, measured from the top-left image corner.
    pub center: [f32; 2],
    pub dominant_bin: usize,
}

/// Octant of the RGB sign pattern; non-negative channels count as positive.
pub fn color_bin(rgb: [f32; 3]) -> usize {
    (usize::from(rgb[0] >= 0.0) << 2) | (usize::from(rgb[1] >= 0.0) << 1) | usize::from(rgb[2] >= 0.0)
}

/// Argmax of the color-bin histogram over non-background pixels, lowest bin on ties.
/// `None` for an image made only of background.
pub fn dominant_bin(image: &Tensor<f32>) -> Option<usize> {
    let s = image.shape();
    let n = s[1] * s[2];
    let d = image.data();
    let mut hist = [0usize; NUM_COLOR_BINS];
    for p in 0..n {
        let px = [d[p], d[n + p], d[2 * n + p]];
        if px != [BACKGROUND; 3] {
            hist[color_bin(px)] += 1;
        }
    }
    let (best, &count) = hist
        .iter()
        .enumerate()
        .rev()
        .max_by_key(|(_, &c)| c)
        .expect("non-empty histogram");
    (count > 0).then_some(best)
}

/// Rasterizes one shape onto the background.
pub fn render(meta: &ShapeMeta, image_size: usize) -> Tensor<f32> {
    let n = image_size * image_size;
    let mut data = vec![BACKGROUND; 3 * n];
    let w = image_size as f32;
    for y in 0..image_size {
        for x in 0..image_size {
            let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
            let inside = match meta.shape_kind {
                ShapeKind::Square => {
                    let half = meta.size * w / 2.0;
                    (px - meta.center[0]).abs() < half && (py - meta.center[1]).abs() < half
                }
                ShapeKind::Circle => {
                    let r = meta.size * w / 2.0;
                    let (dx, dy) = (px - meta.center[0], py - meta.center[1]);
                    dx * dx + dy * dy <= r * r
                }
            };
            if inside {
                for c in 0..3 {
                    data[c * n + y * image_size + x] = meta.color[c];
                }
            }
        }
    }
    Tensor::new(&[3, image_size, image_size], data).expect("shape matches data")
}

fn sample_meta<R: Rng>(id: usize, image_size: usize, rng: &mut R) -> ShapeMeta {
    let shape_kind = if rng.random_bool(0.5) {
        ShapeKind::Square
    } else {
        ShapeKind::Circle
    };
    let bytes = loop {
        let b: [u8; 3] = [rng.random(), rng.random(), rng.random()];
        if b != [0; 3] {
            break b;
        }
    };
    let color = bytes.map(byte_to_unit);
    let frac: f32 = rng.random_range(0.25..=0.75);
    let w = image_size as f32;
    let (size, center) = match shape_kind {
        ShapeKind::Square => {
            let side = ((frac * w).round() as usize).clamp(1, image_size);
            let x0 = rng.random_range(0..=image_size - side);
            let y0 = rng.random_range(0..=image_size - side);
            let half = side as f32 / 2.0;
            (side as f32 / w, [x0 as f32 + half, y0 as f32 + half])
        }
        ShapeKind::Circle => {
            let r = frac * w / 2.0;
            let cx = rng.random_range(r..=w - r);
            let cy = rng.random_range(r..=w - r);
            (frac, [cx, cy])
        }
    };
    let mut meta = ShapeMeta {
        id,
        shape_kind,
        color,
        size,
        center,
        dominant_bin: 0,
    };
    meta.dominant_bin = color_bin(color);
    meta
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    /// Seeded shuffle, first 90% (rounded down, at least one) train and the rest test.
    pub fn ninety_ten(n: usize, seed: u64) -> Self {
        let mut ids: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        ids.shuffle(&mut rng);
        let n_train = ((n * 9) / 10).max(1).min(n);
        let test = ids.split_off(n_train);
        Self { train: ids, test }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub image_size: usize,
    pub count: usize,
    pub seed: u64,
    pub split: Split,
}

/// An in-memory shapes dataset; `images[i]` belongs to `meta[i]` and has id `i`.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub meta: Vec<ShapeMeta>,
    pub images: Vec<Tensor<f32>>,
}

const MANIFEST_FILE: &str = "dataset.json";
const META_FILE: &str = "meta.jsonl";
const IMAGE_DIR: &str = "images";

fn image_path(dir: &Path, id: usize) -> PathBuf {
    dir.join(IMAGE_DIR).join(format!("{id:06}.ppm"))
}

impl Dataset {
    /// Generates `n` images deterministically from `seed`.
    pub fn generate(n: usize, image_size: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(invalid("dataset needs at least one image"));
        }
        if image_size < 4 {
            return Err(invalid("image size must be at least 4"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let meta: Vec<ShapeMeta> = (0..n).map(|id| sample_meta(id, image_size, &mut rng)).collect();
        let images = meta.iter().map(|m| render(m, image_size)).collect();
        Ok(Self {
            manifest: DatasetManifest {
                image_size,
                count: n,
                seed,
                split: Split::ninety_ten(n, seed),
            },
            meta,
            images,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image(&self, id: usize) -> Result<&Tensor<f32>> {
        self.images
            .get(id)
            .ok_or_else(|| invalid(format!("image id {id} out of range (dataset has {})", self.len())))
    }

    pub fn bins(&self) -> Vec<usize> {
        self.meta.iter().map(|m| m.dominant_bin).collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join(IMAGE_DIR))?;
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&self.manifest)?)?;
        let mut meta = BufWriter::new(fs::File::create(dir.join(META_FILE))?);
        for (m, img) in self.meta.iter().zip(&self.images) {
            serde_json::to_writer(&mut meta, m)?;
            meta.write_all(b"\n")?;
            fs::write(image_path(dir, m.id), encode_ppm(img)?)?;
        }
        meta.flush()?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: DatasetManifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
        let meta_path = dir.join(META_FILE);
        let mut meta = Vec::with_capacity(manifest.count);
        for line in BufReader::new(fs::File::open(&meta_path)?).lines() {
            let line = line?;
            if !line.trim().is_empty() {
                meta.push(serde_json::from_str::<ShapeMeta>(&line)?);
            }
        }
        let corrupt = |detail: String| Error::Corrupt {
            path: meta_path.display().to_string(),
            detail,
        };
        if meta.len() != manifest.count {
            return Err(corrupt(format!("{} records, manifest says {}", meta.len(), manifest.count)));
        }
        let mut images = Vec::with_capacity(meta.len());
        for (i, m) in meta.iter().enumerate() {
            if m.id != i {
                return Err(corrupt(format!("record {i} has id {}", m.id)));
            }
            let p = image_path(dir, i);
            let img = decode_ppm(&fs::read(&p)?).map_err(|e| Error::Corrupt {
                path: p.display().to_string(),
                detail: e.to_string(),
            })?;
            if img.shape() != [3, manifest.image_size, manifest.image_size] {
                return Err(corrupt(format!("image {i} has shape {:?}", img.shape())));
            }
            images.push(img);
        }
        Ok(Self {
            manifest,
            meta,
            images,
        })
    }

    /// φ of every image, indexed by id.
    pub fn embed_all(&self, space: &SemanticSpace) -> Result<Vec<Vec<f64>>> {
        self.images.iter().map(|img| space.embed_value(img)).collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    #[default]
    Uniform,
    BinFocused,
}

/// A constraint set with the image it was ordered against.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampledSet {
    pub reference: usize,
    pub constraints: Vec<Constraint<usize>>,
    /// `Some(bin)` when the bin-focused branch produced this set.
    pub focused_bin: Option<usize>,
}

/// Draws constraint sets over a pool of image ids with precomputed φ values.
#[derive(Clone, Debug)]
pub struct ConstraintSampler<'a> {
    space: &'a SemanticSpace,
    embeddings: &'a [Vec<f64>],
    pool: Vec<usize>,
    bins: Vec<usize>,
    bin_members: Vec<Vec<usize>>,
    focusable: Vec<usize>,
}

impl<'a> ConstraintSampler<'a> {
    /// `embeddings` and `bins` are indexed by id; `pool` lists the ids to draw from.
    pub fn new(
        space: &'a SemanticSpace,
        embeddings: &'a [Vec<f64>],
        bins: &[usize],
        pool: &[usize],
    ) -> Result<Self> {
        if pool.len() < 3 {
            return Err(invalid(format!("sampling needs at least 3 images, pool has {}", pool.len())));
        }
        if embeddings.len() != bins.len() {
            return Err(invalid("embeddings and bins differ in length"));
        }
        if let Some(&bad) = pool.iter().find(|&&i| i >= embeddings.len()) {
            return Err(invalid(format!("pool id {bad} out of range")));
        }
        let mut bin_members = vec![Vec::new(); NUM_COLOR_BINS];
        for &id in pool {
            let b = bins[id];
            if b >= NUM_COLOR_BINS {
                return Err(invalid(format!("bin {b} out of range")));
            }
            bin_members[b].push(id);
        }
        let focusable = (0..NUM_COLOR_BINS)
            .filter(|&b| bin_members[b].len() >= 2 && bin_members[b].len() < pool.len())
            .collect();
        Ok(Self {
            space,
            embeddings,
            pool: pool.to_vec(),
            bins: bins.to_vec(),
            bin_members,
            focusable,
        })
    }

    pub fn pool(&self) -> &[usize] {
        &self.pool
    }

    fn dist(&self, a: usize, b: usize) -> Result<f64> {
        self.space.distance_value(&self.embeddings[a], &self.embeddings[b])
    }

    /// Orders `(u, v)` so the element closer to `reference` is positive; `None` on a tie.
    fn order(&self, reference: usize, u: usize, v: usize) -> Result<Option<Constraint<usize>>> {
        let (du, dv) = (self.dist(reference, u)?, self.dist(reference, v)?);
        Ok(if du < dv {
            Some(Constraint::new(u, v))
        } else if dv < du {
            Some(Constraint::new(v, u))
        } else {
            None
        })
    }

    fn pick<R: Rng>(from: &[usize], except: usize, rng: &mut R) -> usize {
        loop {
            let c = from[rng.random_range(0..from.len())];
            if c != except {
                return c;
            }
        }
    }

    fn uniform_pair<R: Rng>(&self, reference: usize, rng: &mut R) -> Result<Constraint<usize>> {
        for _ in 0..MAX_PAIR_RETRIES {
            let u = Self::pick(&self.pool, reference, rng);
            let v = Self::pick(&self.pool, reference, rng);
            if u == v {
                continue;
            }
            if let Some(c) = self.order(reference, u, v)? {
                return Ok(c);
            }
        }
        Err(Error::Sampling(format!(
            "no strictly ordered pair for reference {reference} after {MAX_PAIR_RETRIES} draws"
        )))
    }

    fn focused_pair<R: Rng>(&self, bin: usize, reference: usize, rng: &mut R) -> Result<Constraint<usize>> {
        let members = &self.bin_members[bin];
        for _ in 0..MAX_PAIR_RETRIES {
            let pos = Self::pick(members, reference, rng);
            let neg = self.pool[rng.random_range(0..self.pool.len())];
            if self.bins[neg] == bin {
                continue;
            }
            if self.dist(reference, pos)? < self.dist(reference, neg)? {
                return Ok(Constraint::new(pos, neg));
            }
        }
        Err(Error::Sampling(format!(
            "no in-bin positive closer than an out-of-bin negative for reference {reference}"
        )))
    }

    /// Uniform: reference and pairs uniform over the pool.
    /// Bin-focused: with probability 0.5 behaves as uniform; otherwise picks a
    /// bin, draws the reference and every positive from it and every negative
    /// from outside it, redrawing pairs the reference would order the other way.
    pub fn sample<R: Rng>(
        &self,
        size_range: RangeInclusive<usize>,
        mode: SampleMode,
        rng: &mut R,
    ) -> Result<SampledSet> {
        let (lo, hi) = (*size_range.start(), *size_range.end());
        if lo == 0 || hi < lo {
            return Err(invalid(format!("bad constraint-set size range {lo}..={hi}")));
        }
        let k = rng.random_range(lo..=hi);
        self.sample_k(k, mode, rng)
    }

    pub fn sample_k<R: Rng>(&self, k: usize, mode: SampleMode, rng: &mut R) -> Result<SampledSet> {
        if k == 0 {
            return Err(invalid("constraint sets must be non-empty"));
        }
        let focused = mode == SampleMode::BinFocused && !rng.random_bool(0.5);
        if focused {
            if self.focusable.is_empty() {
                return Err(Error::Sampling("no bin has two members and an outside image".into()));
            }
            let bin = self.focusable[rng.random_range(0..self.focusable.len())];
            let members = &self.bin_members[bin];
            let reference = members[rng.random_range(0..members.len())];
            let constraints = (0..k)
                .map(|_| self.focused_pair(bin, reference, rng))
                .collect::<Result<_>>()?;
            return Ok(SampledSet {
                reference,
                constraints,
                focused_bin: Some(bin),
            });
        }
        let reference = self.pool[rng.random_range(0..self.pool.len())];
        let constraints = (0..k)
            .map(|_| self.uniform_pair(reference, rng))
            .collect::<Result<_>>()?;
        Ok(SampledSet {
            reference,
            constraints,
            focused_bin: None,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdPair {
    pub pos_id: usize,
    pub neg_id: usize,
}

/// One line of a suite file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuiteEntry {
    pub reference_id: usize,
    pub constraints: Vec<IdPair>,
}

impl SuiteEntry {
    pub fn constraints(&self) -> Vec<Constraint<usize>> {
        self.constraints
            .iter()
            .map(|p| Constraint::new(p.pos_id, p.neg_id))
            .collect()
    }
}

/// Constraint sets of one fixed size.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Suite {
    pub k: usize,
    pub entries: Vec<SuiteEntry>,
}

impl Suite {
    pub fn file_name(k: usize) -> String {
        format!("suite_k{k:02}.jsonl")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = BufWriter::new(fs::File::create(path)?);
        for e in &self.entries {
            serde_json::to_writer(&mut f, e)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
        Ok(())
    }

    /// Reads a suite; every line must hold exactly `k` constraints.
    pub fn read(path: &Path, k: usize) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in BufReader::new(fs::File::open(path)?).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let e: SuiteEntry = serde_json::from_str(&line)?;
            if e.constraints.len() != k {
                return Err(Error::Corrupt {
                    path: path.display().to_string(),
                    detail: format!("line {} has {} constraints, expected {k}", i + 1, e.constraints.len()),
                });
            }
            entries.push(e);
        }
        Ok(Self { k, entries })
    }
}

/// `n_per_k` uniform constraint sets of each size in `k_values`, drawn from `pool`.
pub fn build_fixed_size_test_sets(
    space: &SemanticSpace,
    embeddings: &[Vec<f64>],
    bins: &[usize],
    pool: &[usize],
    k_values: &[usize],
    n_per_k: usize,
    seed: u64,
) -> Result<Vec<Suite>> {
    let sampler = ConstraintSampler::new(space, embeddings, bins, pool)
        .map_err(|e| Error::Sampling(format!("insufficient test images: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    k_values
        .iter()
        .map(|&k| {
            let entries = (0..n_per_k)
                .map(|_| {
                    let s = sampler.sample_k(k, SampleMode::Uniform, &mut rng)?;
                    Ok(SuiteEntry {
                        reference_id: s.reference,
                        constraints: s
                            .constraints
                            .iter()
                            .map(|c| IdPair {
                                pos_id: c.positive,
                                neg_id: c.negative,
                            })
                            .collect(),
                    })
                })
                .collect::<Result<_>>()?;
            Ok(Suite { k, entries })
        })
        .collect()
}

pub fn write_suites(dir: &Path, suites: &[Suite]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for s in suites {
        s.write(&dir.join(Suite::file_name(s.k)))?;
    }
    Ok(())
}

pub fn read_suites(dir: &Path, k_values: &[usize]) -> Result<Vec<Suite>> {
    k_values
        .iter()
        .map(|&k| Suite::read(&dir.join(Suite::file_name(k)), k))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_mapping_endpoints() {
        assert_eq!(unit_to_byte(-1.0), 0);
        assert_eq!(unit_to_byte(1.0), 255);
        assert_eq!(unit_to_byte(7.0), 255);
        assert_eq!(unit_to_byte(-3.0), 0);
        for b in 0..=255u8 {
            assert_eq!(unit_to_byte(byte_to_unit(b)), b);
        }
    }

    #[test]
    fn ppm_round_trip_and_errors() {
        let data: Vec<f32> = (0..3 * 5 * 4).map(|i| ((i * 37) % 200) as f32 / 100.0 - 1.0).collect();
        let img = Tensor::new(&[3, 5, 4], data).unwrap();
        let bytes = encode_ppm(&img).unwrap();
        assert!(bytes.starts_with(b"P6\n4 5 255\n"));
        assert_eq!(bytes.len(), 11 + 3 * 5 * 4);
        let back = decode_ppm(&bytes).unwrap();
        assert_eq!(back.shape(), &[3, 5, 4]);
        assert!(back.max_abs_diff(&img) <= 1.0 / 127.5);
        assert_eq!(decode_ppm(&encode_ppm(&back).unwrap()).unwrap(), back);

        assert!(matches!(decode_ppm(&bytes[..bytes.len() - 1]), Err(Error::Codec(_))));
        assert!(matches!(decode_ppm(b"P5\n1 1\n255\n\0"), Err(Error::Codec(_))));
        assert!(matches!(decode_ppm(b"P6\nxx 1\n255\n"), Err(Error::Codec(_))));
        let nan = Tensor::new(&[3, 1, 1], vec![f32::NAN, 0.0, 0.0]).unwrap();
        assert!(encode_ppm(&nan).is_err());
    }

    #[test]
    fn bins_are_sign_octants() {
        assert_eq!(color_bin([-0.5, -0.5, -0.5]), 0);
        assert_eq!(color_bin([0.0, -0.1, -0.1]), 4);
        assert_eq!(color_bin([1.0, 1.0, 1.0]), 7);
        assert_eq!(color_bin([-1.0, 0.2, 0.0]), 3);
    }

    #[test]
    fn rendered_meta_is_consistent() {
        let ds = Dataset::generate(300, 16, 3).unwrap();
        for (m, img) in ds.meta.iter().zip(&ds.images) {
            assert_eq!(dominant_bin(img), Some(m.dominant_bin), "{m:?}");
            assert!((0.25..=0.75).contains(&m.size));
            assert_eq!(img, &render(m, 16));
            assert!(img.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
        assert!(ds.meta.iter().any(|m| m.shape_kind == ShapeKind::Circle));
        assert!(ds.meta.iter().any(|m| m.shape_kind == ShapeKind::Square));
    }

    #[test]
    fn square_channel_mean_follows_area() {
        let space = SemanticSpace::channel_mean();
        let ds = Dataset::generate(200, 16, 9).unwrap();
        let mut checked = 0;
        for (m, img) in ds.meta.iter().zip(&ds.images) {
            if m.shape_kind != ShapeKind::Square {
                continue;
            }
            let f = (m.size as f64).powi(2);
            let e = space.embed_value(&img.cast::<f64>()).unwrap();
            for c in 0..3 {
                let want = f * m.color[c] as f64 + (1.0 - f) * -1.0;
                assert!((e[c] - want).abs() < 1e-6, "{m:?} {e:?}");
            }
            checked += 1;
        }
        assert!(checked > 50);
    }

    #[test]
    fn split_is_ninety_ten_partition() {
        let s = Split::ninety_ten(1000, 5);
        assert_eq!((s.train.len(), s.test.len()), (900, 100));
        let mut all: Vec<_> = s.train.iter().chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..1000).collect::<Vec<_>>());
        assert_eq!(s, Split::ninety_ten(1000, 5));
        assert_ne!(s, Split::ninety_ten(1000, 6));
    }

    #[test]
    fn sampler_orders_by_reference() {
        let space = SemanticSpace::channel_mean();
        let ds = Dataset::generate(120, 8, 1).unwrap();
        let emb = ds.embed_all(&space).unwrap();
        let bins = ds.bins();
        let pool: Vec<usize> = (0..120).collect();
        let s = ConstraintSampler::new(&space, &emb, &bins, &pool).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for mode in [SampleMode::Uniform, SampleMode::BinFocused] {
            for _ in 0..300 {
                let set = s.sample(1..=10, mode, &mut rng).unwrap();
                assert!((1..=10).contains(&set.constraints.len()));
                for c in &set.constraints {
                    let r = &emb[set.reference];
                    assert!(space.satisfies(r, &emb[c.positive], &emb[c.negative]).unwrap());
                    assert_ne!(c.positive, set.reference);
                }
                if let Some(b) = set.focused_bin {
                    assert_eq!(mode, SampleMode::BinFocused);
                    assert_eq!(bins[set.reference], b);
                    assert!(set.constraints.iter().all(|c| bins[c.positive] == b && bins[c.negative] != b));
                }
            }
        }
        assert!(ConstraintSampler::new(&space, &emb, &bins, &pool[..2]).is_err());
        assert!(s.sample(0..=3, SampleMode::Uniform, &mut rng).is_err());
    }

    #[test]
    fn identical_pool_ties_fail_loudly() {
        let space = SemanticSpace::channel_mean();
        let emb = vec![vec![0.0; 3]; 4];
        let bins = vec![0; 4];
        let s = ConstraintSampler::new(&space, &emb, &bins, &[0, 1, 2, 3]).unwrap();
        let err = s.sample_k(1, SampleMode::Uniform, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(err, Err(Error::Sampling(_))));
    }
}
