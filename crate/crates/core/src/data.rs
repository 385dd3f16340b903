//! Datasets: the synthetic occlusion benchmark, PGM/PPM directories and
//! training-time augmentation.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{ApvitError, Result};
use crate::tensor::Tensor;

/// Axis-aligned pixel rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    /// Whether the rectangle shares at least one pixel with the square cell
    /// of side `cell` at grid coordinates `(col, row)`.
    pub fn overlaps_cell(&self, col: usize, row: usize, cell: usize) -> bool {
        let (cx0, cy0) = (col * cell, row * cell);
        let (cx1, cy1) = (cx0 + cell, cy0 + cell);
        self.x < cx1 && cx0 < self.x + self.w && self.y < cy1 && cy0 < self.y + self.h
    }

    pub fn area(&self) -> usize {
        self.w * self.h
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[C, S, S]` with integral values in `[0, 255]`.
    pub image: Tensor<f64>,
    pub label: usize,
    /// Occluders pasted by the synthetic generator; empty for loaded files.
    pub occluders: Vec<Rect>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }
}

// ---------------------------------------------------------------------------
// synthetic occlusion benchmark

pub const GLYPH_NAMES: [&str; 6] = ["cross", "ring", "hbars", "checker", "diagonal", "vbars"];

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub side: usize,
    pub channels: usize,
    pub train_count: usize,
    pub test_count: usize,
    pub occluder_count: usize,
    pub occluder_min: usize,
    pub occluder_max: usize,
    /// Occluder grey level range. The default sits at the midpoint of the
    /// byte range, which normalizes to zero signal.
    pub occluder_level: (u8, u8),
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 4,
            side: 32,
            channels: 1,
            train_count: 2400,
            test_count: 800,
            occluder_count: 2,
            occluder_min: 4,
            occluder_max: 10,
            occluder_level: (112, 144),
            noise_std: 8.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > GLYPH_NAMES.len() {
            return Err(ApvitError::Config(format!(
                "synthetic data supports 2..={} classes, got {}",
                GLYPH_NAMES.len(),
                self.num_classes
            )));
        }
        if self.side < 8 {
            return Err(ApvitError::Config("synthetic side must be at least 8".into()));
        }
        if self.occluder_min == 0
            || self.occluder_min > self.occluder_max
            || self.occluder_max >= self.side
        {
            return Err(ApvitError::Config(format!(
                "occluder side range {}..={} invalid for side {}",
                self.occluder_min, self.occluder_max, self.side
            )));
        }
        if self.occluder_level.0 > self.occluder_level.1 {
            return Err(ApvitError::Config("occluder level range is reversed".into()));
        }
        if !(self.noise_std >= 0.0) {
            return Err(ApvitError::Config("noise_std must be non-negative".into()));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(ApvitError::Config("channels must be 1 or 3".into()));
        }
        Ok(())
    }
}

/// Whether local offset `(dx, dy)` from the glyph centre is inked for
/// `class`, with glyph half-size `r`.
fn glyph_hit(class: usize, dx: f64, dy: f64, r: f64) -> bool {
    let (ax, ay) = (dx.abs(), dy.abs());
    if ax > r || ay > r {
        return false;
    }
    let t = r / 4.0;
    match class {
        0 => ax <= t || ay <= t,
        1 => {
            let d = (dx * dx + dy * dy).sqrt();
            d <= r && d >= 0.6 * r
        }
        2 => ay >= r - 2.0 * t || ay <= t,
        3 => {
            let q = r / 2.0;
            let cx = ((dx + r) / q).floor() as i64;
            let cy = ((dy + r) / q).floor() as i64;
            (cx + cy) % 2 == 0
        }
        4 => (ax - ay).abs() <= t,
        5 => ax >= r - 2.0 * t || ax <= t,
        _ => unreachable!("validated class count"),
    }
}

fn render_sample(spec: &SyntheticSpec, label: usize, rng: &mut ChaCha8Rng) -> Sample {
    let side = spec.side;
    let s = side as f64;
    let jitter = (side / 16).max(1) as i64;
    let cx = s / 2.0 - 0.5 + rng.random_range(-jitter..=jitter) as f64;
    let cy = s / 2.0 - 0.5 + rng.random_range(-jitter..=jitter) as f64;
    let r = s * 0.3;
    let fg: f64 = rng.random_range(170.0..=255.0);
    let bg: f64 = rng.random_range(10.0..=40.0);

    let mut plane = vec![0.0; side * side];
    for y in 0..side {
        for x in 0..side {
            let hit = glyph_hit(label, x as f64 - cx, y as f64 - cy, r);
            plane[y * side + x] = if hit { fg } else { bg };
        }
    }

    let mut occluders = Vec::with_capacity(spec.occluder_count);
    for _ in 0..spec.occluder_count {
        let w = rng.random_range(spec.occluder_min..=spec.occluder_max);
        let h = rng.random_range(spec.occluder_min..=spec.occluder_max);
        let x = rng.random_range(0..=side - w);
        let y = rng.random_range(0..=side - h);
        let level = rng.random_range(spec.occluder_level.0..=spec.occluder_level.1) as f64;
        for yy in y..y + h {
            plane[yy * side + x..yy * side + x + w].fill(level);
        }
        occluders.push(Rect { x, y, w, h });
    }

    if spec.noise_std > 0.0 {
        let normal = Normal::new(0.0, spec.noise_std).expect("valid std");
        for v in plane.iter_mut() {
            *v += normal.sample(rng);
        }
    }
    for v in plane.iter_mut() {
        *v = v.round().clamp(0.0, 255.0);
    }

    let data = plane.repeat(spec.channels);
    Sample {
        image: Tensor::new(vec![spec.channels, side, side], data).expect("shape"),
        label,
        occluders,
    }
}

fn class_names(n: usize) -> Vec<String> {
    GLYPH_NAMES[..n].iter().map(|s| s.to_string()).collect()
}

/// Builds the train and test splits. Each split draws from its own ChaCha
/// stream of `spec.seed`, so the two never share random draws.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let split = |count: usize, stream: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(stream);
        Dataset {
            samples: (0..count)
                .map(|i| render_sample(spec, i % spec.num_classes, &mut rng))
                .collect(),
            class_names: class_names(spec.num_classes),
        }
    };
    Ok((split(spec.train_count, 0), split(spec.test_count, 1)))
}

// ---------------------------------------------------------------------------
// PGM / PPM

fn to_bytes(image: &Tensor<f64>) -> Vec<u8> {
    image
        .data()
        .iter()
        .map(|v| v.round().clamp(0.0, 255.0) as u8)
        .collect()
}

/// Encodes a `[1,H,W]` image as P5 or a `[3,H,W]` image as P6.
pub fn encode_pnm(image: &Tensor<f64>) -> Result<Vec<u8>> {
    if image.rank() != 3 {
        return Err(ApvitError::Dimension(format!(
            "PNM images are [C,H,W], got {:?}",
            image.shape()
        )));
    }
    let (c, h, w) = (image.dim(0), image.dim(1), image.dim(2));
    let bytes = to_bytes(image);
    let (magic, payload) = match c {
        1 => ("P5", bytes),
        3 => {
            let plane = h * w;
            let mut inter = Vec::with_capacity(3 * plane);
            for p in 0..plane {
                inter.extend([bytes[p], bytes[plane + p], bytes[2 * plane + p]]);
            }
            ("P6", inter)
        }
        _ => {
            return Err(ApvitError::Dimension(format!(
                "PNM supports 1 or 3 channels, got {c}"
            )))
        }
    };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn write_pnm(path: &Path, image: &Tensor<f64>) -> Result<()> {
    fs::write(path, encode_pnm(image)?).map_err(|e| ApvitError::io(path, e))
}

/// Parses binary P5/P6 with maxval 255 into `[C,H,W]` byte values.
pub fn decode_pnm(bytes: &[u8], path: &Path) -> Result<Tensor<f64>> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(ApvitError::load(path, "truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let channels = match fields[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(ApvitError::load(path, format!("unsupported magic {other:?}"))),
    };
    let parse = |s: &str, what: &str| {
        s.parse::<usize>()
            .map_err(|_| ApvitError::load(path, format!("malformed {what} {s:?}")))
    };
    let w = parse(&fields[1], "width")?;
    let h = parse(&fields[2], "height")?;
    let maxval = parse(&fields[3], "maxval")?;
    if maxval != 255 {
        return Err(ApvitError::load(path, format!("maxval {maxval} is not 255")));
    }
    if w == 0 || h == 0 {
        return Err(ApvitError::load(path, "zero-sized image"));
    }
    let n = w * h * channels;
    let raster = bytes
        .get(pos..pos + n)
        .ok_or_else(|| ApvitError::load(path, "raster shorter than header declares"))?;
    let plane = w * h;
    let mut data = vec![0.0; n];
    for p in 0..plane {
        for c in 0..channels {
            data[c * plane + p] = raster[p * channels + c] as f64;
        }
    }
    Tensor::new(vec![channels, h, w], data)
}

pub fn read_pnm(path: &Path) -> Result<Tensor<f64>> {
    let bytes = fs::read(path).map_err(|e| ApvitError::load(path, e.to_string()))?;
    decode_pnm(&bytes, path)
}

/// Loads `labels.csv` (`filename,label_index` per line) and the images it
/// names from `dir`.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let csv_path = dir.join("labels.csv");
    let text = fs::read_to_string(&csv_path)
        .map_err(|e| ApvitError::load(&csv_path, e.to_string()))?;
    let mut samples = Vec::new();
    let mut first_shape: Option<(Vec<usize>, String)> = None;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (file, label) = line.split_once(',').ok_or_else(|| {
            ApvitError::load(&csv_path, format!("line {}: expected filename,label", lineno + 1))
        })?;
        let label: usize = label.trim().parse().map_err(|_| {
            ApvitError::load(&csv_path, format!("line {}: bad label {label:?}", lineno + 1))
        })?;
        let img_path = dir.join(file.trim());
        let image = read_pnm(&img_path)?;
        match &first_shape {
            None => first_shape = Some((image.shape().to_vec(), file.to_string())),
            Some((shape, first)) if shape.as_slice() != image.shape() => {
                return Err(ApvitError::load(
                    &img_path,
                    format!("size {:?} differs from {first} {shape:?}", image.shape()),
                ))
            }
            Some(_) => {}
        }
        samples.push(Sample {
            image,
            label,
            occluders: Vec::new(),
        });
    }
    if samples.is_empty() {
        return Err(ApvitError::load(&csv_path, "no samples"));
    }
    let classes = samples.iter().map(|s| s.label).max().unwrap_or(0) + 1;
    Ok(Dataset {
        samples,
        class_names: (0..classes).map(|i| format!("class{i}")).collect(),
    })
}

/// Writes every sample as `sample_NNNNN.pgm` (or `.ppm`) plus `labels.csv`.
pub fn save_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| ApvitError::io(dir, e))?;
    let mut csv = String::new();
    for (i, s) in dataset.samples.iter().enumerate() {
        let ext = if s.image.dim(0) == 3 { "ppm" } else { "pgm" };
        let name = format!("sample_{i:05}.{ext}");
        write_pnm(&dir.join(&name), &s.image)?;
        csv.push_str(&format!("{name},{}\n", s.label));
    }
    let csv_path = dir.join("labels.csv");
    fs::write(&csv_path, csv).map_err(|e| ApvitError::io(&csv_path, e))
}

// ---------------------------------------------------------------------------
// augmentation

pub const AUGMENT_PAD: usize = 4;

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * n - 2 - i;
    }
    i.clamp(0, n - 1) as usize
}

/// Deterministic augmentation: optional horizontal flip, then a shift by
/// `(shift_x, shift_y)` pixels within reflect padding of [`AUGMENT_PAD`].
pub fn augment_with(sample: &Sample, flip: bool, shift_x: isize, shift_y: isize) -> Sample {
    let (c, h, w) = (sample.image.dim(0), sample.image.dim(1), sample.image.dim(2));
    let src = sample.image.data();
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            let sy = reflect(y as isize + shift_y, h);
            for x in 0..w {
                let sx = reflect(x as isize + shift_x, w);
                let sx = if flip { w - 1 - sx } else { sx };
                out[(ch * h + y) * w + x] = src[(ch * h + sy) * w + sx];
            }
        }
    }
    Sample {
        image: Tensor::new(vec![c, h, w], out).expect("shape"),
        label: sample.label,
        occluders: Vec::new(),
    }
}

/// Flip with probability 0.5 and a random crop of the reflect-padded image.
pub fn augment<R: Rng + ?Sized>(sample: &Sample, rng: &mut R) -> Sample {
    let flip = rng.random_bool(0.5);
    let p = AUGMENT_PAD as i64;
    let sx = rng.random_range(-p..=p) as isize;
    let sy = rng.random_range(-p..=p) as isize;
    augment_with(sample, flip, sx, sy)
}
