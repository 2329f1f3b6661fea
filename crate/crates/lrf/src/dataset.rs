//! Image buffers, manifest loading, train/val/test splitting and design
//! matrix assembly.
//!
//! Images are stored channel-planar with f64 samples in [0, 1]. A manifest
//! is a two-column CSV (`input_path,target_path`, no header); relative
//! paths resolve against the manifest's directory. Design matrices stack
//! vectorized images row-wise under one of four color strategies.

use std::fmt;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{LrfError, Result};
use crate::util::atomic_write;

/// Rec. 601 luma weights, used for the replicate-gray strategy.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

/// An image with 1 or 3 channels, stored channel-planar and row-major
/// within each plane. All samples lie in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageBuffer {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(LrfError::Data(format!(
                "unsupported channel count {channels}, expected 1 or 3"
            )));
        }
        if data.len() != height * width * channels {
            return Err(LrfError::DimensionMismatch(format!(
                "image data length {} does not match {}x{}x{}",
                data.len(),
                height,
                width,
                channels
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(LrfError::Data(format!(
                "image sample {bad} outside [0, 1]"
            )));
        }
        Ok(ImageBuffer {
            height,
            width,
            channels,
            data,
        })
    }

    /// Builds a buffer from raw values, clamping each sample into [0, 1].
    pub fn from_clamped(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        let clamped = data
            .into_iter()
            .map(|v| if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 })
            .collect();
        ImageBuffer::new(height, width, channels, clamped)
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        ImageBuffer {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn plane(&self, channel: usize) -> &[f64] {
        let n = self.pixels();
        &self.data[channel * n..(channel + 1) * n]
    }

    pub fn get(&self, channel: usize, y: usize, x: usize) -> f64 {
        self.data[channel * self.pixels() + y * self.width + x]
    }

    /// Single-channel luma conversion with Rec. 601 weights. Identity for
    /// grayscale input.
    pub fn to_luma(&self) -> ImageBuffer {
        if self.channels == 1 {
            return self.clone();
        }
        let n = self.pixels();
        let (r, g, b) = (self.plane(0), self.plane(1), self.plane(2));
        let data = (0..n)
            .map(|i| {
                (LUMA_WEIGHTS[0] * r[i] + LUMA_WEIGHTS[1] * g[i] + LUMA_WEIGHTS[2] * b[i])
                    .clamp(0.0, 1.0)
            })
            .collect();
        ImageBuffer {
            height: self.height,
            width: self.width,
            channels: 1,
            data,
        }
    }

    /// Loads an 8-bit grayscale or RGB image (PNG or PGM/PPM) and scales
    /// samples to [0, 1].
    pub fn load(path: &Path) -> Result<ImageBuffer> {
        let dynamic = image::open(path)
            .map_err(|e| LrfError::Data(format!("{}: {e}", path.display())))?;
        match dynamic {
            image::DynamicImage::ImageLuma8(img) => {
                let (w, h) = (img.width() as usize, img.height() as usize);
                let data = img.into_raw().iter().map(|&v| v as f64 / 255.0).collect();
                ImageBuffer::new(h, w, 1, data)
            }
            image::DynamicImage::ImageRgb8(img) => {
                let (w, h) = (img.width() as usize, img.height() as usize);
                let raw = img.into_raw();
                let n = w * h;
                let mut data = vec![0.0; 3 * n];
                for i in 0..n {
                    for c in 0..3 {
                        data[c * n + i] = raw[3 * i + c] as f64 / 255.0;
                    }
                }
                ImageBuffer::new(h, w, 3, data)
            }
            other => Err(LrfError::Data(format!(
                "{}: unsupported pixel format {:?}, expected 8-bit grayscale or RGB",
                path.display(),
                other.color()
            ))),
        }
    }

    /// Writes the buffer as an 8-bit image. The format is chosen from the
    /// extension (PNG, or PGM/PPM via `.pgm`/`.ppm`/`.pnm`); samples are
    /// quantized with round-to-nearest. The write is atomic.
    pub fn save(&self, path: &Path) -> Result<()> {
        let format = image::ImageFormat::from_path(path)
            .map_err(|e| LrfError::Data(format!("{}: {e}", path.display())))?;
        let quantize = |v: f64| (v * 255.0).round().clamp(0.0, 255.0) as u8;
        let mut encoded = Cursor::new(Vec::new());
        let n = self.pixels();
        let write_result = if self.channels == 1 {
            let raw: Vec<u8> = self.data.iter().map(|&v| quantize(v)).collect();
            let img = image::GrayImage::from_raw(self.width as u32, self.height as u32, raw)
                .expect("raw buffer sized from own dimensions");
            image::DynamicImage::ImageLuma8(img).write_to(&mut encoded, format)
        } else {
            let mut raw = vec![0u8; 3 * n];
            for i in 0..n {
                for c in 0..3 {
                    raw[3 * i + c] = quantize(self.data[c * n + i]);
                }
            }
            let img = image::RgbImage::from_raw(self.width as u32, self.height as u32, raw)
                .expect("raw buffer sized from own dimensions");
            image::DynamicImage::ImageRgb8(img).write_to(&mut encoded, format)
        };
        write_result.map_err(|e| LrfError::Data(format!("{}: {e}", path.display())))?;
        atomic_write(path, &encoded.into_inner())
    }
}

/// One aligned input/target example.
#[derive(Debug, Clone)]
pub struct ImagePair {
    pub input: ImageBuffer,
    pub target: ImageBuffer,
}

impl ImagePair {
    pub fn new(input: ImageBuffer, target: ImageBuffer) -> Result<Self> {
        if input.height != target.height
            || input.width != target.width
            || input.channels != target.channels
        {
            return Err(LrfError::DimensionMismatch(format!(
                "pair dimensions differ: input {}x{}x{}, target {}x{}x{}",
                input.height, input.width, input.channels,
                target.height, target.width, target.channels
            )));
        }
        Ok(ImagePair { input, target })
    }
}

/// One row of a pairing manifest: where a pair's images live on disk.
/// Paths are stored as resolved when read from a manifest file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub input: PathBuf,
    pub target: PathBuf,
}

impl ManifestEntry {
    /// Loads both images and checks that they form a valid pair.
    pub fn load(&self) -> Result<ImagePair> {
        let input = ImageBuffer::load(&self.input)?;
        let target = ImageBuffer::load(&self.target)?;
        ImagePair::new(input, target).map_err(|e| {
            LrfError::DimensionMismatch(format!(
                "{} vs {}: {e}",
                self.input.display(),
                self.target.display()
            ))
        })
    }
}

/// Parses a two-column CSV manifest (`input_path,target_path`, UTF-8,
/// no header) without touching the referenced images. Relative paths
/// resolve against the manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let base = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| LrfError::Io(std::io::Error::other(format!("{}: {e}", path.display()))))?;
    let resolve = |raw: &str| -> PathBuf {
        let p = Path::new(raw);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    };
    let mut entries = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record =
            record.map_err(|e| LrfError::Data(format!("{} row {}: {e}", path.display(), line + 1)))?;
        if record.len() != 2 {
            return Err(LrfError::Data(format!(
                "{} row {}: expected 2 columns, found {}",
                path.display(),
                line + 1,
                record.len()
            )));
        }
        entries.push(ManifestEntry {
            input: resolve(&record[0]),
            target: resolve(&record[1]),
        });
    }
    Ok(entries)
}

/// Writes a manifest CSV atomically. Paths are emitted as stored
/// (resolved entries stay resolved, so the file is location-independent).
pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut writer = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(Vec::new());
    for entry in entries {
        writer
            .write_record([
                entry.input.to_string_lossy().as_ref(),
                entry.target.to_string_lossy().as_ref(),
            ])
            .map_err(|e| LrfError::Data(format!("{}: {e}", path.display())))?;
    }
    let bytes = writer
        .into_inner()
        .map_err(|e| LrfError::Data(format!("{}: {e}", path.display())))?;
    atomic_write(path, &bytes)
}

/// Loads aligned pairs listed in a two-column CSV manifest
/// (`input_path,target_path`, UTF-8, no header). Relative paths resolve
/// against the manifest's directory. Every pair must match in dimensions
/// and channel count.
pub fn load_manifest(path: &Path) -> Result<Vec<ImagePair>> {
    read_manifest(path)?.iter().map(ManifestEntry::load).collect()
}

/// Seeded train/val/test split fractions.
#[derive(Debug, Clone, Copy)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(train: f64, val: f64, test: f64, seed: u64) -> Result<Self> {
        let spec = SplitSpec {
            train_fraction: train,
            val_fraction: val,
            test_fraction: test,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let fracs = [self.train_fraction, self.val_fraction, self.test_fraction];
        if fracs.iter().any(|f| !f.is_finite() || *f < 0.0) {
            return Err(LrfError::Data("split fractions must be nonnegative".into()));
        }
        let sum: f64 = fracs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(LrfError::Data(format!(
                "split fractions must sum to 1, got {sum}"
            )));
        }
        Ok(())
    }
}

/// Seeded shuffle followed by floor-allocated partitioning of `0..n`.
/// Validation and test sizes are `floor(n * fraction)`; the remainder
/// goes to train. The three index lists partition `0..n` exactly.
pub fn split_indices(n: usize, spec: &SplitSpec) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    spec.validate()?;
    let n_val = (n as f64 * spec.val_fraction).floor() as usize;
    let n_test = (n as f64 * spec.test_fraction).floor() as usize;
    let n_train = n - n_val - n_test;
    if n_train == 0 {
        return Err(LrfError::Data(format!(
            "split of {n} pairs leaves an empty training set"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    order.shuffle(&mut rng);
    let test = order.split_off(n_train + n_val);
    let val = order.split_off(n_train);
    Ok((order, val, test))
}

/// Seeded shuffle followed by floor-allocated partitioning (see
/// [`split_indices`] for the allocation rule).
pub fn split(
    pairs: Vec<ImagePair>,
    spec: &SplitSpec,
) -> Result<(Vec<ImagePair>, Vec<ImagePair>, Vec<ImagePair>)> {
    let (i_train, i_val, i_test) = split_indices(pairs.len(), spec)?;
    let mut slots: Vec<Option<ImagePair>> = pairs.into_iter().map(Some).collect();
    let mut take = |indices: &[usize]| -> Vec<ImagePair> {
        indices
            .iter()
            .map(|&i| slots[i].take().expect("each index taken once"))
            .collect()
    };
    let train = take(&i_train);
    let val = take(&i_val);
    let test = take(&i_test);
    Ok((train, val, test))
}

/// How color channels map onto learned row mappings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelStrategy {
    /// Single-channel data, one mapping.
    Grayscale,
    /// One independent mapping per RGB channel.
    PerChannel,
    /// One mapping trained on luma, replicated over each channel at
    /// synthesis time.
    ReplicateGray,
    /// One mapping trained on channel-stacked rows and shared by all
    /// channels.
    JointColor,
}

impl ChannelStrategy {
    pub fn as_str(&self) -> &'static str {
        match self {
            ChannelStrategy::Grayscale => "gray",
            ChannelStrategy::PerChannel => "per-channel",
            ChannelStrategy::ReplicateGray => "replicate-gray",
            ChannelStrategy::JointColor => "joint-color",
        }
    }

    pub fn code(&self) -> u8 {
        match self {
            ChannelStrategy::Grayscale => 0,
            ChannelStrategy::PerChannel => 1,
            ChannelStrategy::ReplicateGray => 2,
            ChannelStrategy::JointColor => 3,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(ChannelStrategy::Grayscale),
            1 => Ok(ChannelStrategy::PerChannel),
            2 => Ok(ChannelStrategy::ReplicateGray),
            3 => Ok(ChannelStrategy::JointColor),
            other => Err(LrfError::Format(format!(
                "unknown channel strategy code {other}"
            ))),
        }
    }

    /// Number of stored row mappings a model trained under this strategy
    /// carries.
    pub fn mapping_count(&self) -> usize {
        match self {
            ChannelStrategy::PerChannel => 3,
            _ => 1,
        }
    }
}

impl FromStr for ChannelStrategy {
    type Err = LrfError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gray" | "grayscale" => Ok(ChannelStrategy::Grayscale),
            "per-channel" => Ok(ChannelStrategy::PerChannel),
            "replicate-gray" => Ok(ChannelStrategy::ReplicateGray),
            "joint-color" => Ok(ChannelStrategy::JointColor),
            other => Err(LrfError::Data(format!(
                "unknown strategy '{other}', expected gray|per-channel|replicate-gray|joint-color"
            ))),
        }
    }
}

impl fmt::Display for ChannelStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Row-wise design/response matrices: one vectorized example per row of
/// `x` (inputs) and `t` (targets).
#[derive(Debug, Clone, PartialEq)]
pub struct DesignSet {
    x: DMatrix<f64>,
    t: DMatrix<f64>,
    in_shape: (usize, usize),
    out_shape: (usize, usize),
    strategy: ChannelStrategy,
    channels: usize,
}

impl DesignSet {
    pub fn from_matrices(
        x: DMatrix<f64>,
        t: DMatrix<f64>,
        in_shape: (usize, usize),
        out_shape: (usize, usize),
        strategy: ChannelStrategy,
        channels: usize,
    ) -> Result<Self> {
        if x.nrows() != t.nrows() {
            return Err(LrfError::DimensionMismatch(format!(
                "design rows {} != response rows {}",
                x.nrows(),
                t.nrows()
            )));
        }
        if x.ncols() != in_shape.0 * in_shape.1 {
            return Err(LrfError::DimensionMismatch(format!(
                "design width {} != input pixels {}",
                x.ncols(),
                in_shape.0 * in_shape.1
            )));
        }
        if t.ncols() != out_shape.0 * out_shape.1 {
            return Err(LrfError::DimensionMismatch(format!(
                "response width {} != output pixels {}",
                t.ncols(),
                out_shape.0 * out_shape.1
            )));
        }
        Ok(DesignSet {
            x,
            t,
            in_shape,
            out_shape,
            strategy,
            channels,
        })
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn t(&self) -> &DMatrix<f64> {
        &self.t
    }

    pub fn n_rows(&self) -> usize {
        self.x.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.t.ncols()
    }

    pub fn in_shape(&self) -> (usize, usize) {
        self.in_shape
    }

    pub fn out_shape(&self) -> (usize, usize) {
        self.out_shape
    }

    pub fn strategy(&self) -> ChannelStrategy {
        self.strategy
    }

    pub fn channels(&self) -> usize {
        self.channels
    }
}

/// Assembles design sets from aligned pairs. Returns one set per learned
/// mapping: three for per-channel, one for every other strategy.
///
/// Joint-color stacks rows channel-by-channel (all channel-0 rows, then
/// channel 1, then channel 2), so a single weight matrix is fit to every
/// channel.
pub fn build_design_set(pairs: &[ImagePair], strategy: ChannelStrategy) -> Result<Vec<DesignSet>> {
    if pairs.is_empty() {
        return Err(LrfError::Data("no image pairs to assemble".into()));
    }
    let first = &pairs[0];
    let (h, w, c) = (first.input.height, first.input.width, first.input.channels);
    let (oh, ow) = (first.target.height, first.target.width);
    for (i, pair) in pairs.iter().enumerate() {
        if pair.input.height != h
            || pair.input.width != w
            || pair.input.channels != c
            || pair.target.height != oh
            || pair.target.width != ow
        {
            return Err(LrfError::DimensionMismatch(format!(
                "pair {i} dimensions differ from pair 0"
            )));
        }
    }
    match strategy {
        ChannelStrategy::Grayscale if c != 1 => {
            return Err(LrfError::Data(format!(
                "grayscale strategy requires 1 channel, got {c}"
            )));
        }
        ChannelStrategy::PerChannel | ChannelStrategy::ReplicateGray if c != 3 => {
            return Err(LrfError::Data(format!(
                "{strategy} strategy requires 3 channels, got {c}"
            )));
        }
        _ => {}
    }

    let pack = |rows: Vec<(&[f64], &[f64])>| -> DesignSet {
        let n = rows.len();
        let d = h * w;
        let k = oh * ow;
        let mut x = DMatrix::zeros(n, d);
        let mut t = DMatrix::zeros(n, k);
        for (r, (xin, tout)) in rows.into_iter().enumerate() {
            for (j, &v) in xin.iter().enumerate() {
                x[(r, j)] = v;
            }
            for (j, &v) in tout.iter().enumerate() {
                t[(r, j)] = v;
            }
        }
        DesignSet {
            x,
            t,
            in_shape: (h, w),
            out_shape: (oh, ow),
            strategy,
            channels: c,
        }
    };

    match strategy {
        ChannelStrategy::Grayscale => {
            let rows = pairs
                .iter()
                .map(|p| (p.input.plane(0), p.target.plane(0)))
                .collect();
            Ok(vec![pack(rows)])
        }
        ChannelStrategy::PerChannel => Ok((0..3)
            .map(|ch| {
                let rows = pairs
                    .iter()
                    .map(|p| (p.input.plane(ch), p.target.plane(ch)))
                    .collect();
                pack(rows)
            })
            .collect()),
        ChannelStrategy::ReplicateGray => {
            let lumas: Vec<(ImageBuffer, ImageBuffer)> = pairs
                .iter()
                .map(|p| (p.input.to_luma(), p.target.to_luma()))
                .collect();
            let rows = lumas.iter().map(|(i, t)| (i.plane(0), t.plane(0))).collect();
            Ok(vec![pack(rows)])
        }
        ChannelStrategy::JointColor => {
            let mut rows = Vec::with_capacity(c * pairs.len());
            for ch in 0..c {
                for p in pairs {
                    rows.push((p.input.plane(ch), p.target.plane(ch)));
                }
            }
            Ok(vec![pack(rows)])
        }
    }
}
