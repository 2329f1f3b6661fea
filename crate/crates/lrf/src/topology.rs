//! Local-receptive-field topology: which input pixels each output pixel
//! may observe.
//!
//! An output pixel at (i, j) observes an r×r grid of taps centered at the
//! same location in the input, with `dilation` pixels between taps. Taps
//! falling outside the input are dropped, so border rows are shorter than
//! interior ones. A bias slot is carried implicitly alongside every row.

use crate::error::{LrfError, Result};

/// Geometry of a receptive-field layout.
///
/// `taps_per_side` is the r of an r×r field and must be odd. `dilation` is
/// the spacing between taps; 1 gives a contiguous window, 2 observes every
/// other pixel of a (2r-1)-wide region, and so on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RfGeometry {
    pub in_height: usize,
    pub in_width: usize,
    pub out_height: usize,
    pub out_width: usize,
    pub taps_per_side: usize,
    pub dilation: usize,
}

impl RfGeometry {
    /// Square geometry with equal input and output dimensions.
    pub fn square(side: usize, taps_per_side: usize, dilation: usize) -> Self {
        RfGeometry {
            in_height: side,
            in_width: side,
            out_height: side,
            out_width: side,
            taps_per_side,
            dilation,
        }
    }

    /// Geometry whose receptive field spans the whole input from any output
    /// pixel. Used to represent globally-connected (ridge/lasso/omp) models.
    pub fn full_coverage(height: usize, width: usize) -> Self {
        RfGeometry {
            in_height: height,
            in_width: width,
            out_height: height,
            out_width: width,
            taps_per_side: 2 * height.max(width).max(1) - 1,
            dilation: 1,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.in_height * self.in_width
    }

    pub fn output_dim(&self) -> usize {
        self.out_height * self.out_width
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_height == 0 || self.in_width == 0 || self.out_height == 0 || self.out_width == 0
        {
            return Err(LrfError::InvalidGeometry(format!(
                "image dimensions must be positive, got in {}x{}, out {}x{}",
                self.in_height, self.in_width, self.out_height, self.out_width
            )));
        }
        if self.taps_per_side == 0 || self.taps_per_side % 2 == 0 {
            return Err(LrfError::InvalidGeometry(format!(
                "taps_per_side must be odd and >= 1, got {}",
                self.taps_per_side
            )));
        }
        if self.dilation == 0 {
            return Err(LrfError::InvalidGeometry("dilation must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-output-pixel receptive-field index sets, row-major on both sides.
///
/// Immutable after construction; shared freely across worker threads.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    geometry: RfGeometry,
    rows: Vec<Vec<u32>>,
    has_bias: bool,
}

impl Topology {
    /// Enumerates the truncated r×r window of every output pixel.
    ///
    /// Output pixel (i, j) observes input pixels (i + a·d, j + b·d) for
    /// a, b in -h..=h with h = (r-1)/2; taps outside the input are dropped.
    pub fn build(geometry: RfGeometry) -> Result<Topology> {
        geometry.validate()?;
        let half = (geometry.taps_per_side - 1) / 2;
        let reach = (half * geometry.dilation) as isize;
        let step = geometry.dilation as isize;
        let mut rows = Vec::with_capacity(geometry.output_dim());
        for i in 0..geometry.out_height as isize {
            for j in 0..geometry.out_width as isize {
                let mut indices = Vec::new();
                let mut y = i - reach;
                while y <= i + reach {
                    if y >= 0 && y < geometry.in_height as isize {
                        let mut x = j - reach;
                        while x <= j + reach {
                            if x >= 0 && x < geometry.in_width as isize {
                                indices.push((y as usize * geometry.in_width + x as usize) as u32);
                            }
                            x += step;
                        }
                    }
                    y += step;
                }
                rows.push(indices);
            }
        }
        Ok(Topology {
            geometry,
            rows,
            has_bias: true,
        })
    }

    pub fn geometry(&self) -> &RfGeometry {
        &self.geometry
    }

    pub fn has_bias(&self) -> bool {
        self.has_bias
    }

    /// Input-pixel indices observed by output pixel `k`, sorted ascending.
    pub fn row(&self, k: usize) -> &[u32] {
        &self.rows[k]
    }

    pub fn rows(&self) -> &[Vec<u32>] {
        &self.rows
    }

    pub fn output_pixels(&self) -> usize {
        self.rows.len()
    }

    /// Total learnable parameters: all weight slots plus one bias per
    /// output pixel.
    pub fn total_parameters(&self) -> usize {
        let weights: usize = self.rows.iter().map(Vec::len).sum();
        weights + if self.has_bias { self.rows.len() } else { 0 }
    }

    /// Materializes the mask as a dense row-major 0/1 matrix of shape
    /// K x D (bias column not included).
    pub fn dense_mask(&self) -> Vec<Vec<u8>> {
        let d = self.geometry.input_dim();
        self.rows
            .iter()
            .map(|row| {
                let mut mask = vec![0u8; d];
                for &idx in row {
                    mask[idx as usize] = 1;
                }
                mask
            })
            .collect()
    }

    /// Renders the mask as text: one line per output pixel, a `1` in each
    /// observed input column, blanks elsewhere. Indices are 1-based.
    ///
    /// Intended for small geometries; refuses anything above 32x32 cells.
    pub fn render_mask_text(&self) -> Result<String> {
        let d = self.geometry.input_dim();
        let k = self.output_pixels();
        if d > 1024 || k > 1024 {
            return Err(LrfError::Data(format!(
                "mask dump supports at most 1024x1024 cells, got {}x{}",
                k, d
            )));
        }
        let width = d.to_string().len().max(1);
        let mut out = String::new();
        out.push_str(&" ".repeat(width + 2));
        for j in 1..=d {
            out.push_str(&format!(" {:>width$}", j, width = width));
        }
        out.push('\n');
        for (i, mask_row) in self.dense_mask().iter().enumerate() {
            out.push_str(&format!("{:>width$} |", i + 1, width = width));
            for &cell in mask_row {
                if cell == 1 {
                    out.push_str(&format!(" {:>width$}", 1, width = width));
                } else {
                    out.push_str(&" ".repeat(width + 1));
                }
            }
            out.push('\n');
        }
        Ok(out)
    }
}
