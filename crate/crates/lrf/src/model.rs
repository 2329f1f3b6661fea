//! Learned sparse-row linear models: representation, synthesis,
//! persistence (`.lrm` files) and introspection.

use std::path::Path;
use std::time::SystemTime;

use nalgebra::DMatrix;

use crate::dataset::{ChannelStrategy, ImageBuffer};
use crate::error::{LrfError, Result};
use crate::topology::RfGeometry;
use crate::util::atomic_write;

/// File identifier at the head of every `.lrm` model file.
pub const MODEL_MAGIC: &[u8; 4] = b"LRFM";
/// Current `.lrm` format version.
pub const MODEL_VERSION: u16 = 1;

/// One output pixel's mapping: weights over a sparse set of input pixels
/// plus an additive bias.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseRow {
    /// Sorted, strictly increasing input pixel indices.
    pub indices: Vec<u32>,
    /// One weight per index.
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl SparseRow {
    fn validate(&self, input_dim: usize) -> Result<()> {
        if self.indices.len() != self.weights.len() {
            return Err(LrfError::DimensionMismatch(format!(
                "row has {} indices but {} weights",
                self.indices.len(),
                self.weights.len()
            )));
        }
        if !self.indices.windows(2).all(|w| w[0] < w[1]) {
            return Err(LrfError::Data("row indices not strictly increasing".into()));
        }
        if let Some(&bad) = self.indices.iter().find(|&&i| i as usize >= input_dim) {
            return Err(LrfError::Data(format!(
                "row index {bad} out of range for {input_dim} input pixels"
            )));
        }
        if self.weights.iter().any(|w| !w.is_finite()) || !self.bias.is_finite() {
            return Err(LrfError::Numeric("row contains non-finite parameters".into()));
        }
        Ok(())
    }
}

/// Training provenance kept in memory alongside a model. Deliberately not
/// persisted: model files depend only on the learned parameters, so equal
/// training runs produce byte-identical files.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelMetadata {
    pub solver: Option<String>,
    pub lambda: Option<f64>,
    pub trained_at: Option<SystemTime>,
}

impl ModelMetadata {
    pub fn for_training(solver: &str, lambda: f64) -> Self {
        ModelMetadata {
            solver: Some(solver.to_string()),
            lambda: Some(lambda),
            trained_at: Some(SystemTime::now()),
        }
    }
}

/// Output of [`SparseRowModel::relative_importance`]: how much of the
/// synthesized signal comes from weights versus biases.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelativeImportance {
    /// Mean of |W·x| over output pixels, channels and images.
    pub weight_mean: f64,
    /// Mean of |b| over stored rows.
    pub bias_mean: f64,
    /// `weight_mean / bias_mean`; +∞ when the bias mean is zero.
    pub ratio: f64,
}

/// A trained image-to-image mapping stored as one sparse row per output
/// pixel. Models are immutable once constructed; synthesis is pure.
///
/// `channel_maps` holds one row set per learned mapping: three for the
/// per-channel strategy, one for every other strategy.
#[derive(Debug, Clone)]
pub struct SparseRowModel {
    geometry: RfGeometry,
    strategy: ChannelStrategy,
    channel_maps: Vec<Vec<SparseRow>>,
    pub metadata: ModelMetadata,
}

impl SparseRowModel {
    pub fn new(
        geometry: RfGeometry,
        strategy: ChannelStrategy,
        channel_maps: Vec<Vec<SparseRow>>,
        metadata: ModelMetadata,
    ) -> Result<Self> {
        let model = SparseRowModel {
            geometry,
            strategy,
            channel_maps,
            metadata,
        };
        model.validate()?;
        Ok(model)
    }

    /// Builds a model from a dense K×(D+1) weight matrix whose last column
    /// is the bias. Every row stores all D input indices.
    pub fn from_dense(
        geometry: RfGeometry,
        strategy: ChannelStrategy,
        dense: &DMatrix<f64>,
        metadata: ModelMetadata,
    ) -> Result<Self> {
        let d = geometry.input_dim();
        if dense.nrows() != geometry.output_dim() || dense.ncols() != d + 1 {
            return Err(LrfError::DimensionMismatch(format!(
                "dense matrix {}x{} does not match geometry ({}x{})",
                dense.nrows(),
                dense.ncols(),
                geometry.output_dim(),
                d + 1
            )));
        }
        SparseRowModel::new(geometry, strategy, vec![dense_rows(dense)], metadata)
    }

    fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        if self.channel_maps.len() != self.strategy.mapping_count() {
            return Err(LrfError::DimensionMismatch(format!(
                "strategy {} expects {} mappings, model holds {}",
                self.strategy,
                self.strategy.mapping_count(),
                self.channel_maps.len()
            )));
        }
        let k = self.geometry.output_dim();
        let d = self.geometry.input_dim();
        for map in &self.channel_maps {
            if map.len() != k {
                return Err(LrfError::DimensionMismatch(format!(
                    "mapping holds {} rows, geometry has {} output pixels",
                    map.len(),
                    k
                )));
            }
            for row in map {
                row.validate(d)?;
            }
        }
        Ok(())
    }

    pub fn geometry(&self) -> &RfGeometry {
        &self.geometry
    }

    pub fn strategy(&self) -> ChannelStrategy {
        self.strategy
    }

    pub fn channel_maps(&self) -> &[Vec<SparseRow>] {
        &self.channel_maps
    }

    pub fn map(&self, index: usize) -> &[SparseRow] {
        &self.channel_maps[index]
    }

    /// Total stored parameters: every weight plus one bias per row, summed
    /// over mappings.
    pub fn parameter_count(&self) -> usize {
        self.channel_maps
            .iter()
            .flatten()
            .map(|row| row.weights.len() + 1)
            .sum()
    }

    /// Stored weights and biases whose magnitude exceeds `tolerance`.
    pub fn count_nonzeros(&self, tolerance: f64) -> Result<usize> {
        if !(tolerance >= 0.0) {
            return Err(LrfError::Data(format!(
                "nonzero tolerance must be >= 0, got {tolerance}"
            )));
        }
        Ok(self
            .channel_maps
            .iter()
            .flatten()
            .map(|row| {
                row.weights.iter().filter(|w| w.abs() > tolerance).count()
                    + usize::from(row.bias.abs() > tolerance)
            })
            .sum())
    }

    /// Materializes one mapping as a dense K×(D+1) matrix (bias last).
    /// Intended for small models and verification.
    pub fn to_dense(&self, map_index: usize) -> DMatrix<f64> {
        let d = self.geometry.input_dim();
        let map = &self.channel_maps[map_index];
        let mut dense = DMatrix::zeros(map.len(), d + 1);
        for (k, row) in map.iter().enumerate() {
            for (i, &j) in row.indices.iter().enumerate() {
                dense[(k, j as usize)] = row.weights[i];
            }
            dense[(k, d)] = row.bias;
        }
        dense
    }

    fn apply_map(rows: &[SparseRow], plane: &[f64], with_bias: bool) -> Vec<f64> {
        rows.iter()
            .map(|row| {
                let mut acc = 0.0;
                for (w, &j) in row.weights.iter().zip(&row.indices) {
                    acc += w * plane[j as usize];
                }
                if with_bias {
                    acc += row.bias;
                }
                acc
            })
            .collect()
    }

    fn check_input(&self, image: &ImageBuffer) -> Result<()> {
        if image.height() != self.geometry.in_height || image.width() != self.geometry.in_width {
            return Err(LrfError::DimensionMismatch(format!(
                "image {}x{} does not match model input {}x{}",
                image.height(),
                image.width(),
                self.geometry.in_height,
                self.geometry.in_width
            )));
        }
        let c = image.channels();
        let compatible = match self.strategy {
            ChannelStrategy::Grayscale => c == 1,
            ChannelStrategy::PerChannel | ChannelStrategy::ReplicateGray => c == 3,
            ChannelStrategy::JointColor => c == 1 || c == 3,
        };
        if !compatible {
            return Err(LrfError::DimensionMismatch(format!(
                "{} channels incompatible with {} model",
                c, self.strategy
            )));
        }
        Ok(())
    }

    /// Raw (unclamped) output planes, one per output channel. This is the
    /// value evaluation metrics are computed on.
    pub fn synthesize_raw(&self, image: &ImageBuffer) -> Result<Vec<Vec<f64>>> {
        self.raw_planes(image, true)
    }

    fn raw_planes(&self, image: &ImageBuffer, with_bias: bool) -> Result<Vec<Vec<f64>>> {
        self.check_input(image)?;
        let planes = (0..image.channels())
            .map(|c| {
                let map = match self.strategy {
                    ChannelStrategy::PerChannel => &self.channel_maps[c],
                    _ => &self.channel_maps[0],
                };
                Self::apply_map(map, image.plane(c), with_bias)
            })
            .collect();
        Ok(planes)
    }

    /// Applies the mapping and clamps to [0, 1] for image emission.
    pub fn synthesize(&self, image: &ImageBuffer) -> Result<ImageBuffer> {
        self.emit(self.synthesize_raw(image)?)
    }

    /// Synthesis with every bias forced to zero, isolating the weights'
    /// contribution.
    pub fn weight_only_synthesize(&self, image: &ImageBuffer) -> Result<ImageBuffer> {
        self.emit(self.raw_planes(image, false)?)
    }

    fn emit(&self, planes: Vec<Vec<f64>>) -> Result<ImageBuffer> {
        let channels = planes.len();
        let data: Vec<f64> = planes.into_iter().flatten().collect();
        ImageBuffer::from_clamped(
            self.geometry.out_height,
            self.geometry.out_width,
            channels,
            data,
        )
    }

    /// Mean absolute weight contribution |W·x| over the given images
    /// against the mean absolute bias, and their ratio.
    pub fn relative_importance(&self, images: &[ImageBuffer]) -> Result<RelativeImportance> {
        if images.is_empty() {
            return Err(LrfError::Data(
                "relative importance needs at least one image".into(),
            ));
        }
        let mut sum = 0.0;
        let mut count = 0usize;
        for image in images {
            for plane in self.raw_planes(image, false)? {
                sum += plane.iter().map(|v| v.abs()).sum::<f64>();
                count += plane.len();
            }
        }
        let weight_mean = sum / count as f64;
        let rows: Vec<&SparseRow> = self.channel_maps.iter().flatten().collect();
        let bias_mean = rows.iter().map(|r| r.bias.abs()).sum::<f64>() / rows.len() as f64;
        let ratio = if bias_mean == 0.0 {
            f64::INFINITY
        } else {
            weight_mean / bias_mean
        };
        Ok(RelativeImportance {
            weight_mean,
            bias_mean,
            ratio,
        })
    }

    /// Serializes to the `.lrm` byte format (see module docs of the save
    /// operation): little-endian, magic `LRFM`, version, strategy code,
    /// geometry, rows, trailing CRC32.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let g = &self.geometry;
        let dims = [
            g.in_height,
            g.in_width,
            g.out_height,
            g.out_width,
            g.taps_per_side,
            g.dilation,
        ];
        if dims.iter().any(|&v| v > u16::MAX as usize) {
            return Err(LrfError::Data(format!(
                "geometry {dims:?} exceeds the format bound of {}",
                u16::MAX
            )));
        }
        let mut buf = Vec::new();
        buf.extend_from_slice(MODEL_MAGIC);
        buf.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        buf.push(self.strategy.code());
        for v in dims {
            buf.extend_from_slice(&(v as u16).to_le_bytes());
        }
        for row in self.channel_maps.iter().flatten() {
            buf.extend_from_slice(&(row.indices.len() as u32).to_le_bytes());
            for &i in &row.indices {
                buf.extend_from_slice(&i.to_le_bytes());
            }
            for &w in &row.weights {
                buf.extend_from_slice(&w.to_le_bytes());
            }
            buf.extend_from_slice(&row.bias.to_le_bytes());
        }
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        Ok(buf)
    }

    /// Parses a model from `.lrm` bytes, validating structure, indices and
    /// the trailing checksum. Metadata is not stored in the format and
    /// comes back empty.
    pub fn from_bytes(bytes: &[u8]) -> Result<SparseRowModel> {
        let mut cur = Cursor { buf: bytes, pos: 0 };
        let magic = cur.take(4, "header")?;
        if magic != MODEL_MAGIC {
            return Err(LrfError::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(magic),
                String::from_utf8_lossy(MODEL_MAGIC)
            )));
        }
        let version = cur.u16("header")?;
        if version != MODEL_VERSION {
            return Err(LrfError::Format(format!(
                "unsupported model version {version}, expected {MODEL_VERSION}"
            )));
        }
        let strategy = ChannelStrategy::from_code(cur.u8("header")?)?;
        let mut dims = [0usize; 6];
        for v in &mut dims {
            *v = cur.u16("header")? as usize;
        }
        let geometry = RfGeometry {
            in_height: dims[0],
            in_width: dims[1],
            out_height: dims[2],
            out_width: dims[3],
            taps_per_side: dims[4],
            dilation: dims[5],
        };
        geometry
            .validate()
            .map_err(|e| LrfError::Format(format!("invalid stored geometry: {e}")))?;
        let d = geometry.input_dim();
        let k = geometry.output_dim();
        let mut maps = Vec::with_capacity(strategy.mapping_count());
        let mut flat_row = 0usize;
        for _ in 0..strategy.mapping_count() {
            let mut rows = Vec::with_capacity(k);
            for _ in 0..k {
                let ctx = format!("row {flat_row}");
                let count = cur.u32(&ctx)? as usize;
                if count > d {
                    return Err(LrfError::Format(format!(
                        "row {flat_row} declares {count} weights but the input has only {d} pixels"
                    )));
                }
                let mut indices = Vec::with_capacity(count);
                for _ in 0..count {
                    let idx = cur.u32(&ctx)?;
                    if idx as usize >= d {
                        return Err(LrfError::Format(format!(
                            "row {flat_row}: index {idx} out of range for {d} input pixels"
                        )));
                    }
                    if let Some(&prev) = indices.last() {
                        if idx <= prev {
                            return Err(LrfError::Format(format!(
                                "row {flat_row}: indices not strictly increasing"
                            )));
                        }
                    }
                    indices.push(idx);
                }
                let mut weights = Vec::with_capacity(count);
                for _ in 0..count {
                    weights.push(cur.f64(&ctx)?);
                }
                let bias = cur.f64(&ctx)?;
                rows.push(SparseRow {
                    indices,
                    weights,
                    bias,
                });
                flat_row += 1;
            }
            maps.push(rows);
        }
        let body_end = cur.pos;
        let stored_crc = u32::from_le_bytes(
            cur.take(4, "checksum")?
                .try_into()
                .expect("take returned 4 bytes"),
        );
        let computed = crc32fast::hash(&bytes[..body_end]);
        if stored_crc != computed {
            return Err(LrfError::Format(format!(
                "checksum mismatch: stored {stored_crc:08x}, computed {computed:08x}"
            )));
        }
        if cur.pos != bytes.len() {
            return Err(LrfError::Format(format!(
                "{} trailing bytes after checksum",
                bytes.len() - cur.pos
            )));
        }
        SparseRowModel::new(geometry, strategy, maps, ModelMetadata::default())
    }

    /// Writes the model atomically to `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<SparseRowModel> {
        let bytes = std::fs::read(path).map_err(|e| {
            LrfError::Io(std::io::Error::new(
                e.kind(),
                format!("{}: {e}", path.display()),
            ))
        })?;
        SparseRowModel::from_bytes(&bytes).map_err(|e| match e {
            LrfError::Format(msg) => LrfError::Format(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

/// Converts a dense K×(D+1) weight matrix (bias in the last column) into
/// sparse rows that keep every input index.
pub fn dense_rows(dense: &DMatrix<f64>) -> Vec<SparseRow> {
    let d = dense.ncols() - 1;
    (0..dense.nrows())
        .map(|k| SparseRow {
            indices: (0..d as u32).collect(),
            weights: (0..d).map(|j| dense[(k, j)]).collect(),
            bias: dense[(k, d)],
        })
        .collect()
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, ctx: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(LrfError::Format(format!("model file truncated in {ctx}")));
        }
        let slice = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u8(&mut self, ctx: &str) -> Result<u8> {
        Ok(self.take(1, ctx)?[0])
    }

    fn u16(&mut self, ctx: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, ctx)?.try_into().unwrap()))
    }

    fn u32(&mut self, ctx: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, ctx)?.try_into().unwrap()))
    }

    fn f64(&mut self, ctx: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, ctx)?.try_into().unwrap()))
    }
}
