//! Synthetic stage-one stand-in.
//!
//! A frozen 64-entry palette codebook of uniform 2×2 RGB patches, ten
//! procedural image classes built from disjoint sub-palettes, nearest-entry
//! patch quantization and raster flattening.
//!
//! Entry `i` has colour `(32 + 64·r, 32 + 64·g, 32 + 64·b)` where `(r, g, b)`
//! are the base-4 digits of `i`, so any per-channel noise below 32 leaves
//! quantization exact. Entries are grouped into eight bands of eight levels:
//! entry `8·band + level`.

use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::TokenSequence;
use crate::tensor::{Rng, Stream};

pub const PATCH: usize = 2;
const LEVELS: usize = 8;
const BACKGROUND_BAND: usize = 7;

/// Fixed palette of `V` uniform patches, each `PATCH × PATCH × 3` bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Codebook {
    entries: Vec<[u8; 3]>,
}

impl Default for Codebook {
    fn default() -> Self {
        Self::palette()
    }
}

impl Codebook {
    /// The 4×4×4 colour lattice.
    pub fn palette() -> Self {
        let level = |d: usize| (32 + 64 * d) as u8;
        let entries = (0..64).map(|i| [level(i / 16), level((i / 4) % 4), level(i % 4)]).collect();
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn color(&self, index: usize) -> [u8; 3] {
        self.entries[index]
    }

    /// Entry `index` as a flat `PATCH·PATCH·3` vector.
    pub fn patch(&self, index: usize) -> Vec<u8> {
        self.entries[index].repeat(PATCH * PATCH)
    }

    /// Nearest entry by squared L2 distance; ties go to the lowest index.
    pub fn nearest(&self, patch: &[u8]) -> usize {
        let mut best = (u64::MAX, 0);
        for (i, c) in self.entries.iter().enumerate() {
            let dist: u64 = patch
                .chunks_exact(3)
                .map(|px| px.iter().zip(c).map(|(&a, &b)| (a as i64 - b as i64).pow(2) as u64).sum::<u64>())
                .sum();
            if dist < best.0 {
                best = (dist, i);
            }
        }
        best.1
    }
}

/// Row-major RGB image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height * 3 {
            return Err(Error::shape("image", format!("{} bytes for {width}×{height} RGB", pixels.len())));
        }
        Ok(Self { width, height, pixels })
    }

    /// Binary PPM (`P6`).
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn write_ppm(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_ppm())?;
        Ok(())
    }
}

/// `H × W` codebook indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenGrid {
    pub height: usize,
    pub width: usize,
    pub tokens: Vec<usize>,
}

impl TokenGrid {
    pub fn new(height: usize, width: usize, tokens: Vec<usize>) -> Result<Self> {
        if tokens.len() != height * width {
            return Err(Error::shape("token_grid", format!("{} tokens for {height}×{width}", tokens.len())));
        }
        Ok(Self { height, width, tokens })
    }

    pub fn at(&self, row: usize, col: usize) -> usize {
        self.tokens[row * self.width + col]
    }

    /// Every row reversed left to right.
    pub fn mirrored(&self) -> Self {
        let tokens = self.tokens.chunks_exact(self.width).flat_map(|r| r.iter().rev().copied()).collect();
        Self { tokens, ..*self }
    }
}

/// Raster-scan order.
pub fn flatten(grid: &TokenGrid) -> Vec<usize> {
    grid.tokens.clone()
}

pub fn unflatten(tokens: &[usize], height: usize, width: usize) -> Result<TokenGrid> {
    TokenGrid::new(height, width, tokens.to_vec())
}

/// Image families, one per class.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pattern {
    /// Level grows with the column; each row starts at a random column,
    /// background before it.
    RampLeftToRight,
    /// Level falls with the column; random start as above.
    RampRightToLeft,
    /// Level grows with the row.
    RampTopToBottom,
    Solid,
    HorizontalStripes,
    VerticalStripes,
    Checkerboard,
    Diagonal,
    AntiDiagonal,
    Quadrants,
}

pub const PATTERNS: [Pattern; 10] = [
    Pattern::RampLeftToRight,
    Pattern::RampRightToLeft,
    Pattern::RampTopToBottom,
    Pattern::Solid,
    Pattern::HorizontalStripes,
    Pattern::VerticalStripes,
    Pattern::Checkerboard,
    Pattern::Diagonal,
    Pattern::AntiDiagonal,
    Pattern::Quadrants,
];

impl Pattern {
    pub fn is_column_ramp(self) -> bool {
        matches!(self, Pattern::RampLeftToRight | Pattern::RampRightToLeft)
    }

    /// The four colours of a sub-palette family: half `h` of band `b`.
    fn sub_palette(self) -> [usize; 4] {
        let slot = match self {
            Pattern::Solid => 0,
            Pattern::HorizontalStripes => 1,
            Pattern::VerticalStripes => 2,
            Pattern::Checkerboard => 3,
            Pattern::Diagonal => 4,
            Pattern::AntiDiagonal => 5,
            Pattern::Quadrants => 6,
            _ => unreachable!("ramps use whole bands"),
        };
        let base = (3 + slot / 2) * LEVELS + (slot % 2) * 4;
        [base, base + 1, base + 2, base + 3]
    }
}

/// Procedural dataset definition.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub grid_height: usize,
    pub grid_width: usize,
    /// Maximum per-channel pixel noise; must stay below 32.
    pub noise: u8,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self { n_classes: 10, grid_height: 8, grid_width: 8, noise: 12 }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 || self.n_classes > PATTERNS.len() {
            return Err(Error::invalid(format!("classes must be in 1..={}, got {}", PATTERNS.len(), self.n_classes)));
        }
        if self.grid_height < 2 || self.grid_width < 2 {
            return Err(Error::invalid("grid must be at least 2×2"));
        }
        if self.noise >= 32 {
            return Err(Error::invalid(format!("noise {} breaks quantization margins (max 31)", self.noise)));
        }
        Ok(())
    }

    pub fn seq_len(&self) -> usize {
        self.grid_height * self.grid_width
    }

    pub fn vocab_size(&self) -> usize {
        64
    }

    pub fn pattern(&self, class: usize) -> Result<Pattern> {
        if class >= self.n_classes {
            return Err(Error::invalid(format!("class {class} out of range for {} classes", self.n_classes)));
        }
        Ok(PATTERNS[class])
    }

    /// Ramp level of column `col` (or row, for the vertical ramp).
    fn level(&self, idx: usize, extent: usize) -> usize {
        idx * LEVELS / extent
    }

    /// Token a column ramp places at column `col`.
    pub fn ramp_token(&self, pattern: Pattern, col: usize) -> Option<usize> {
        let l = self.level(col, self.grid_width);
        match pattern {
            Pattern::RampLeftToRight => Some(l),
            Pattern::RampRightToLeft => Some(LEVELS + (LEVELS - 1 - l)),
            _ => None,
        }
    }

    /// Filler before a column ramp's start.
    pub fn background_token(&self, pattern: Pattern) -> Option<usize> {
        match pattern {
            Pattern::RampLeftToRight => Some(BACKGROUND_BAND * LEVELS),
            Pattern::RampRightToLeft => Some(BACKGROUND_BAND * LEVELS + 1),
            _ => None,
        }
    }
}

/// Ground-truth tokens of one sample.
pub fn generate_grid(spec: &SyntheticSpec, class: usize, rng: &mut Rng) -> Result<TokenGrid> {
    spec.validate()?;
    let pattern = spec.pattern(class)?;
    let (h, w) = (spec.grid_height, spec.grid_width);
    let mut tokens = Vec::with_capacity(h * w);
    match pattern {
        Pattern::RampLeftToRight | Pattern::RampRightToLeft => {
            let bg = spec.background_token(pattern).expect("ramp");
            for _ in 0..h {
                let start = rng.below(w);
                for c in 0..w {
                    tokens.push(if c < start { bg } else { spec.ramp_token(pattern, c).expect("ramp") });
                }
            }
        }
        Pattern::RampTopToBottom => {
            for r in 0..h {
                tokens.extend(std::iter::repeat_n(2 * LEVELS + spec.level(r, h), w));
            }
        }
        _ => {
            let pal = pattern.sub_palette();
            let perm = rng.permutation(4);
            let color = |k: usize| pal[perm[k % 4]];
            let phase = rng.below(4);
            for r in 0..h {
                for c in 0..w {
                    let k = match pattern {
                        Pattern::Solid => 0,
                        Pattern::HorizontalStripes => (r + phase) % 2,
                        Pattern::VerticalStripes => (c + phase) % 2,
                        Pattern::Checkerboard => (r + c + phase) % 2,
                        Pattern::Diagonal => (c + 4 * w - r + phase) % 4,
                        Pattern::AntiDiagonal => (r + c + phase) % 4,
                        Pattern::Quadrants => (2 * r / h) * 2 + 2 * c / w,
                        _ => unreachable!(),
                    };
                    tokens.push(color(k));
                }
            }
        }
    }
    TokenGrid::new(h, w, tokens)
}

/// A noisy image of class `class`.
pub fn generate_sample(spec: &SyntheticSpec, class: usize, rng: &mut Rng) -> Result<Image> {
    let grid = generate_grid(spec, class, rng)?;
    let mut img = decode(&grid, &Codebook::palette())?;
    let n = spec.noise as i32;
    if n > 0 {
        for p in &mut img.pixels {
            let e = rng.below(2 * n as usize + 1) as i32 - n;
            *p = (*p as i32 + e).clamp(0, 255) as u8;
        }
    }
    Ok(img)
}

/// Nearest-entry quantization of every `PATCH × PATCH` tile.
pub fn encode(image: &Image, codebook: &Codebook) -> Result<TokenGrid> {
    if !image.width.is_multiple_of(PATCH) || !image.height.is_multiple_of(PATCH) || image.width == 0 || image.height == 0 {
        return Err(Error::shape("encode", format!("{}×{} is not a multiple of {PATCH}", image.width, image.height)));
    }
    let (gh, gw) = (image.height / PATCH, image.width / PATCH);
    let mut tokens = Vec::with_capacity(gh * gw);
    let mut patch = Vec::with_capacity(PATCH * PATCH * 3);
    for gr in 0..gh {
        for gc in 0..gw {
            patch.clear();
            for dy in 0..PATCH {
                let start = ((gr * PATCH + dy) * image.width + gc * PATCH) * 3;
                patch.extend_from_slice(&image.pixels[start..start + PATCH * 3]);
            }
            tokens.push(codebook.nearest(&patch));
        }
    }
    TokenGrid::new(gh, gw, tokens)
}

/// Pastes codebook patches.
pub fn decode(grid: &TokenGrid, codebook: &Codebook) -> Result<Image> {
    if let Some(&bad) = grid.tokens.iter().find(|&&t| t >= codebook.len()) {
        return Err(Error::invalid(format!("token {bad} out of range for codebook of {}", codebook.len())));
    }
    let (w, h) = (grid.width * PATCH, grid.height * PATCH);
    let mut pixels = vec![0u8; w * h * 3];
    for y in 0..h {
        for x in 0..w {
            let c = codebook.color(grid.at(y / PATCH, x / PATCH));
            pixels[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&c);
        }
    }
    Image::new(w, h, pixels)
}

/// Column-ramp fidelity of generated grids.
///
/// Over every position not holding the class's background token, the
/// fraction whose token equals the ramp entry for that column.
pub fn column_accuracy(grids: &[TokenGrid], spec: &SyntheticSpec, class: usize) -> Result<f64> {
    let pattern = spec.pattern(class)?;
    if !pattern.is_column_ramp() {
        return Err(Error::invalid(format!("class {class} ({pattern:?}) is not a column ramp")));
    }
    let bg = spec.background_token(pattern).expect("ramp");
    let (mut hit, mut total) = (0usize, 0usize);
    for g in grids {
        if g.width != spec.grid_width || g.height != spec.grid_height {
            return Err(Error::shape("column_accuracy", format!("grid {}×{}", g.height, g.width)));
        }
        for (i, &t) in g.tokens.iter().enumerate() {
            if t == bg {
                continue;
            }
            total += 1;
            hit += usize::from(Some(t) == spec.ramp_token(pattern, i % g.width));
        }
    }
    Ok(if total == 0 { 0.0 } else { hit as f64 / total as f64 })
}

/// A generated corpus with a held-out tail.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: SyntheticSpec,
    pub seed: u64,
    pub eval_fraction: f64,
    pub samples: Vec<TokenSequence>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
    All,
}

impl Split {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "eval" => Ok(Split::Eval),
            "all" => Ok(Split::All),
            other => Err(Error::invalid(format!("unknown split {other:?} (train, eval, all)"))),
        }
    }
}

const DATASET_MAGIC: &[u8; 4] = b"AIMD";
const DATASET_VERSION: u32 = 1;

impl Dataset {
    /// Sample `i` has class `i mod K` and its own stream; generation runs in
    /// parallel and is independent of worker count.
    pub fn generate(spec: &SyntheticSpec, n_samples: usize, seed: u64, eval_fraction: f64) -> Result<Self> {
        spec.validate()?;
        if n_samples == 0 {
            return Err(Error::invalid("dataset needs at least one sample"));
        }
        if !(0.0..1.0).contains(&eval_fraction) {
            return Err(Error::invalid(format!("eval fraction {eval_fraction} outside [0, 1)")));
        }
        let codebook = Codebook::palette();
        let samples = (0..n_samples)
            .into_par_iter()
            .map(|i| {
                let class = i % spec.n_classes;
                let mut rng = Rng::derive(seed, Stream::Dataset, &[i as u64]);
                let img = generate_sample(spec, class, &mut rng)?;
                let grid = encode(&img, &codebook)?;
                Ok(TokenSequence { class_id: Some(class), tokens: flatten(&grid) })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { spec: spec.clone(), seed, eval_fraction, samples })
    }

    pub fn n_eval(&self) -> usize {
        let n = (self.samples.len() as f64 * self.eval_fraction).round() as usize;
        n.min(self.samples.len().saturating_sub(1))
    }

    pub fn split(&self, split: Split) -> &[TokenSequence] {
        let cut = self.samples.len() - self.n_eval();
        match split {
            Split::Train => &self.samples[..cut],
            Split::Eval => &self.samples[cut..],
            Split::All => &self.samples,
        }
    }

    fn header(&self) -> String {
        let s = &self.spec;
        format!(
            "n_samples={}\nseq_len={}\ngrid_height={}\ngrid_width={}\nn_classes={}\nvocab_size={}\nnoise={}\nseed={}\neval_fraction={}\n",
            self.samples.len(),
            s.seq_len(),
            s.grid_height,
            s.grid_width,
            s.n_classes,
            s.vocab_size(),
            s.noise,
            self.seed,
            self.eval_fraction
        )
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = self.header();
        let mut out = Vec::with_capacity(12 + header.len() + self.samples.len() * (2 + 2 * self.spec.seq_len()));
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        for s in &self.samples {
            out.extend_from_slice(&(s.class_id.expect("dataset samples are labelled") as u16).to_le_bytes());
            for &t in &s.tokens {
                out.extend_from_slice(&(t as u16).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic, "dataset magic")?;
        if &magic != DATASET_MAGIC {
            return Err(Error::format("not a dataset file (bad magic)"));
        }
        let version = read_u32(&mut r, "dataset version")?;
        if version != DATASET_VERSION {
            return Err(Error::format(format!("unsupported dataset version {version}")));
        }
        let hlen = read_u32(&mut r, "dataset header length")? as usize;
        let mut hbytes = vec![0u8; hlen];
        read_exact(&mut r, &mut hbytes, "dataset header")?;
        let header = String::from_utf8(hbytes).map_err(|_| Error::format("dataset header is not UTF-8"))?;
        let kv = crate::config::parse_kv(&header)?;
        let get = |k: &str| kv.get(k).ok_or_else(|| Error::format(format!("dataset header lacks {k}")));
        let num = |k: &str| -> Result<u64> { get(k)?.parse().map_err(|_| Error::format(format!("bad {k} in header"))) };
        let spec = SyntheticSpec {
            n_classes: num("n_classes")? as usize,
            grid_height: num("grid_height")? as usize,
            grid_width: num("grid_width")? as usize,
            noise: num("noise")? as u8,
        };
        spec.validate()?;
        let n = num("n_samples")? as usize;
        let l = num("seq_len")? as usize;
        if l != spec.seq_len() {
            return Err(Error::format(format!("seq_len {l} disagrees with grid {}×{}", spec.grid_height, spec.grid_width)));
        }
        let eval_fraction: f64 =
            get("eval_fraction")?.parse().map_err(|_| Error::format("bad eval_fraction in header"))?;
        if r.len() != n * (2 + 2 * l) {
            return Err(Error::format(format!("dataset body is {} bytes, expected {}", r.len(), n * (2 + 2 * l))));
        }
        let mut samples = Vec::with_capacity(n);
        for rec in r.chunks_exact(2 + 2 * l) {
            let class = u16::from_le_bytes([rec[0], rec[1]]) as usize;
            let tokens: Vec<usize> =
                rec[2..].chunks_exact(2).map(|b| u16::from_le_bytes([b[0], b[1]]) as usize).collect();
            if class >= spec.n_classes || tokens.iter().any(|&t| t >= spec.vocab_size()) {
                return Err(Error::format("dataset record out of range"));
            }
            samples.push(TokenSequence { class_id: Some(class), tokens });
        }
        Ok(Self { spec, seed: num("seed")?, eval_fraction, samples })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

pub(crate) fn read_exact(r: &mut &[u8], buf: &mut [u8], what: &str) -> Result<()> {
    if r.len() < buf.len() {
        return Err(Error::format(format!("truncated file while reading {what}")));
    }
    let (head, tail) = r.split_at(buf.len());
    buf.copy_from_slice(head);
    *r = tail;
    Ok(())
}

pub(crate) fn read_u32(r: &mut &[u8], what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

/// Nearest-centroid classifier over normalized token histograms.
#[derive(Clone, Debug)]
pub struct HistogramClassifier {
    centroids: Vec<Vec<f64>>,
}

fn histogram(tokens: &[usize], vocab: usize) -> Vec<f64> {
    let mut h = vec![0.0; vocab];
    for &t in tokens {
        h[t] += 1.0;
    }
    let n = tokens.len().max(1) as f64;
    h.iter_mut().for_each(|v| *v /= n);
    h
}

impl HistogramClassifier {
    pub fn fit(samples: &[TokenSequence], n_classes: usize, vocab: usize) -> Result<Self> {
        let mut centroids = vec![vec![0.0; vocab]; n_classes];
        let mut counts = vec![0usize; n_classes];
        for s in samples {
            let c = s.class_id.ok_or_else(|| Error::invalid("classifier needs labelled samples"))?;
            for (a, b) in centroids[c].iter_mut().zip(histogram(&s.tokens, vocab)) {
                *a += b;
            }
            counts[c] += 1;
        }
        if let Some(c) = counts.iter().position(|&n| n == 0) {
            return Err(Error::invalid(format!("no samples of class {c}")));
        }
        for (cent, &n) in centroids.iter_mut().zip(&counts) {
            cent.iter_mut().for_each(|v| *v /= n as f64);
        }
        Ok(Self { centroids })
    }

    pub fn predict(&self, tokens: &[usize]) -> usize {
        let h = histogram(tokens, self.centroids[0].len());
        let dist = |c: &Vec<f64>| c.iter().zip(&h).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        let mut best = (f64::INFINITY, 0);
        for (i, c) in self.centroids.iter().enumerate() {
            let d = dist(c);
            if d < best.0 {
                best = (d, i);
            }
        }
        best.1
    }

    /// Fraction of sequences predicted as `class`.
    pub fn agreement(&self, seqs: &[Vec<usize>], class: usize) -> f64 {
        if seqs.is_empty() {
            return 0.0;
        }
        seqs.iter().filter(|s| self.predict(s) == class).count() as f64 / seqs.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng() -> Rng {
        Rng::derive(0, Stream::Test, &[])
    }

    #[test]
    fn palette_is_distinct() {
        let cb = Codebook::palette();
        let mut seen = std::collections::HashSet::new();
        assert!((0..64).all(|i| seen.insert(cb.color(i))));
    }

    #[test]
    fn tie_goes_to_lower_index() {
        let cb = Codebook::palette();
        // Entries 3 and 7 differ in one channel; half the pixels of each.
        let (a, b) = (cb.color(3), cb.color(7));
        let patch: Vec<u8> = [a, b, a, b].concat();
        assert_eq!(cb.nearest(&patch), 3);
        let patch: Vec<u8> = [b, a, b, a].concat();
        assert_eq!(cb.nearest(&patch), 3);
    }

    #[test]
    fn codebook_images_encode_exactly() {
        let cb = Codebook::palette();
        let grid = TokenGrid::new(2, 3, vec![0, 9, 63, 17, 17, 2]).unwrap();
        assert_eq!(encode(&decode(&grid, &cb).unwrap(), &cb).unwrap(), grid);
    }

    #[test]
    fn simple_patterns() {
        let spec = SyntheticSpec::default();
        let solid = generate_grid(&spec, 3, &mut rng()).unwrap();
        assert!(solid.tokens.iter().all(|&t| t == solid.tokens[0]));
        let stripes = generate_grid(&spec, 4, &mut rng()).unwrap();
        for r in 0..8 {
            let row = &stripes.tokens[r * 8..(r + 1) * 8];
            assert!(row.iter().all(|&t| t == row[0]));
            if r > 0 {
                assert_ne!(row[0], stripes.at(r - 1, 0));
            }
        }
    }

    #[test]
    fn ramp_rows_follow_palette_order() {
        let spec = SyntheticSpec::default();
        let mut r = rng();
        for class in [0, 1] {
            let pattern = spec.pattern(class).unwrap();
            let bg = spec.background_token(pattern).unwrap();
            for _ in 0..20 {
                let g = generate_grid(&spec, class, &mut r).unwrap();
                for row in g.tokens.chunks_exact(8) {
                    let start = row.iter().position(|&t| t != bg).unwrap();
                    assert!(row[..start].iter().all(|&t| t == bg));
                    for (c, &t) in row.iter().enumerate().skip(start) {
                        assert_eq!(Some(t), spec.ramp_token(pattern, c));
                    }
                    let levels: Vec<usize> = row[start..].iter().map(|t| t % 8).collect();
                    let monotone = if class == 0 {
                        levels.windows(2).all(|w| w[1] == w[0] + 1)
                    } else {
                        levels.windows(2).all(|w| w[1] + 1 == w[0])
                    };
                    assert!(monotone, "{levels:?}");
                }
            }
        }
    }

    #[test]
    fn flatten_is_raster_order() {
        let g = TokenGrid::new(2, 2, vec![1, 2, 3, 4]).unwrap();
        assert_eq!(flatten(&g), vec![1, 2, 3, 4]);
        assert_eq!(unflatten(&flatten(&g), 2, 2).unwrap(), g);
        assert!(unflatten(&[1, 2, 3], 2, 2).is_err());
        let line = unflatten(&[5, 6, 7], 1, 3).unwrap();
        assert_eq!(flatten(&line), vec![5, 6, 7]);
    }

    #[test]
    fn column_accuracy_reference_values() {
        let spec = SyntheticSpec::default();
        let mut r = rng();
        for class in [0, 1] {
            let grids: Vec<TokenGrid> = (0..50).map(|_| generate_grid(&spec, class, &mut r).unwrap()).collect();
            assert_eq!(column_accuracy(&grids, &spec, class).unwrap(), 1.0);
            let mirrored: Vec<TokenGrid> = grids.iter().map(|g| g.mirrored()).collect();
            assert!(column_accuracy(&mirrored, &spec, class).unwrap() <= 1.0 / 8.0);
        }
        assert!(column_accuracy(&[], &spec, 3).is_err());
    }

    #[test]
    fn ppm_header() {
        let img = Image::new(1, 1, vec![1, 2, 3]).unwrap();
        assert_eq!(img.to_ppm(), b"P6\n1 1\n255\n\x01\x02\x03".to_vec());
    }
}
