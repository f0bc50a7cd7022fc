//! Edge-aware upsampling through a bilateral grid.
//!
//! Low-resolution samples are scatter-averaged into `(x, y, intensity)` cells
//! keyed by a full-resolution guide, empty cells borrow the value of their
//! nearest populated cell, and the grid is sliced with trilinear
//! interpolation at every full-resolution pixel. For a fixed guide the whole
//! operator is linear in the low-resolution input, so [`BilateralSlicer`]
//! exposes both the map and its transpose.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub cells_x: usize,
    pub cells_y: usize,
    pub cells_range: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            cells_x: 16,
            cells_y: 16,
            cells_range: 8,
        }
    }
}

impl GridSpec {
    /// Range cells are `ceil(1 / sigma_r)` wide bins over `[0, 1]`.
    pub fn with_sigma_r(cells_x: usize, cells_y: usize, sigma_r: f32) -> Self {
        let cells_range = if sigma_r > 0.0 {
            (1.0 / sigma_r).ceil().max(1.0) as usize
        } else {
            1
        };
        Self {
            cells_x,
            cells_y,
            cells_range,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Tap {
    lo: u32,
    hi: u32,
    frac: f32,
}

impl Tap {
    fn new(coord: f32, cells: usize) -> Self {
        let c = coord.clamp(0.0, (cells - 1) as f32);
        let lo = c.floor() as usize;
        let hi = (lo + 1).min(cells - 1);
        Self {
            lo: lo as u32,
            hi: hi as u32,
            frac: c - lo as f32,
        }
    }
}

/// The linear slicing operator induced by one guide image.
#[derive(Clone, Debug)]
pub struct BilateralSlicer {
    low_h: usize,
    low_w: usize,
    out_h: usize,
    out_w: usize,
    gx: usize,
    gy: usize,
    gr: usize,
    low_cell: Vec<u32>,
    count: Vec<u32>,
    source: Vec<u32>,
    x_taps: Vec<Tap>,
    y_taps: Vec<Tap>,
    r_taps: Vec<Tap>,
}

impl BilateralSlicer {
    pub fn new<T: Scalar>(
        low_h: usize,
        low_w: usize,
        guide: &Image<T>,
        spec: GridSpec,
    ) -> Result<Self> {
        if guide.channels() != 1 {
            return Err(Error::invalid("bilateral guide must be single-channel"));
        }
        let (out_h, out_w) = (guide.height(), guide.width());
        if low_h == 0 || low_w == 0 || low_h > out_h || low_w > out_w {
            return Err(Error::invalid(format!(
                "bilateral grid: low-res {low_h}x{low_w} must be non-empty and no larger than guide {out_h}x{out_w}"
            )));
        }
        if spec.cells_x == 0 || spec.cells_y == 0 || spec.cells_range == 0 {
            return Err(Error::invalid("bilateral grid needs at least one cell per axis"));
        }
        let gx = spec.cells_x.min(low_w);
        let gy = spec.cells_y.min(low_h);
        let gr = spec.cells_range;
        let n_cells = gx * gy * gr;
        let cell_of = |cy: usize, cx: usize, cr: usize| (cy * gx + cx) * gr + cr;
        let range_bin = |g: f32| ((g * gr as f32).floor().max(0.0) as usize).min(gr - 1);

        // scatter: each low-res pixel lands in the cell of its position and
        // the mean guide intensity of its footprint
        let mut low_cell = Vec::with_capacity(low_h * low_w);
        let mut count = vec![0u32; n_cells];
        for i in 0..low_h {
            let ys = i * out_h / low_h..((i + 1) * out_h / low_h).max(i * out_h / low_h + 1);
            let cy = ((i as f32 + 0.5) / low_h as f32 * gy as f32) as usize;
            for j in 0..low_w {
                let xs = j * out_w / low_w..((j + 1) * out_w / low_w).max(j * out_w / low_w + 1);
                let cx = ((j as f32 + 0.5) / low_w as f32 * gx as f32) as usize;
                let mut s = 0.0f64;
                for y in ys.clone() {
                    for x in xs.clone() {
                        s += guide.get(y, x, 0).as_f64();
                    }
                }
                let g = (s / (ys.len() * xs.len()) as f64) as f32;
                let c = cell_of(cy.min(gy - 1), cx.min(gx - 1), range_bin(g));
                low_cell.push(c as u32);
                count[c] += 1;
            }
        }

        // nearest populated cell (squared index distance, lowest index wins)
        let populated: Vec<usize> = (0..n_cells).filter(|&c| count[c] > 0).collect();
        let coords = |c: usize| {
            let cr = c % gr;
            let cxy = c / gr;
            ((cxy / gx) as i64, (cxy % gx) as i64, cr as i64)
        };
        let source = (0..n_cells)
            .map(|c| {
                if count[c] > 0 {
                    return c as u32;
                }
                let (y, x, r) = coords(c);
                let mut best = (i64::MAX, 0usize);
                for &p in &populated {
                    let (py, px, pr) = coords(p);
                    let d = (py - y).pow(2) + (px - x).pow(2) + (pr - r).pow(2);
                    if d < best.0 {
                        best = (d, p);
                    }
                }
                best.1 as u32
            })
            .collect();

        let x_taps = (0..out_w)
            .map(|x| Tap::new((x as f32 + 0.5) / out_w as f32 * gx as f32 - 0.5, gx))
            .collect();
        let y_taps = (0..out_h)
            .map(|y| Tap::new((y as f32 + 0.5) / out_h as f32 * gy as f32 - 0.5, gy))
            .collect();
        let r_taps = guide
            .data()
            .iter()
            .map(|g| Tap::new(g.as_f64() as f32 * gr as f32 - 0.5, gr))
            .collect();

        Ok(Self {
            low_h,
            low_w,
            out_h,
            out_w,
            gx,
            gy,
            gr,
            low_cell,
            count,
            source,
            x_taps,
            y_taps,
            r_taps,
        })
    }

    pub fn output_shape(&self) -> (usize, usize) {
        (self.out_h, self.out_w)
    }

    pub fn input_shape(&self) -> (usize, usize) {
        (self.low_h, self.low_w)
    }

    /// Effective `(cells_y, cells_x, cells_range)` after clamping to the input.
    pub fn grid_dims(&self) -> (usize, usize, usize) {
        (self.gy, self.gx, self.gr)
    }

    #[inline]
    fn cell(&self, cy: u32, cx: u32, cr: u32) -> usize {
        (cy as usize * self.gx + cx as usize) * self.gr + cr as usize
    }

    #[inline]
    fn corners(&self, y: usize, x: usize) -> [(usize, f32); 8] {
        let (ty, tx) = (self.y_taps[y], self.x_taps[x]);
        let tr = self.r_taps[y * self.out_w + x];
        let mut out = [(0usize, 0.0f32); 8];
        let mut k = 0;
        for (cy, wy) in [(ty.lo, 1.0 - ty.frac), (ty.hi, ty.frac)] {
            for (cx, wx) in [(tx.lo, 1.0 - tx.frac), (tx.hi, tx.frac)] {
                for (cr, wr) in [(tr.lo, 1.0 - tr.frac), (tr.hi, tr.frac)] {
                    out[k] = (self.cell(cy, cx, cr), wy * wx * wr);
                    k += 1;
                }
            }
        }
        out
    }

    /// Cell values after averaging and empty-cell filling.
    pub fn grid_values<T: Scalar>(&self, low: &Image<T>) -> Vec<T> {
        let mut sums = vec![T::zero(); self.count.len()];
        for (&c, &v) in self.low_cell.iter().zip(low.data()) {
            sums[c as usize] = sums[c as usize] + v;
        }
        let avg: Vec<T> = sums
            .iter()
            .zip(&self.count)
            .map(|(&s, &n)| {
                if n > 0 {
                    s / T::of_f64(n as f64)
                } else {
                    T::zero()
                }
            })
            .collect();
        self.source.iter().map(|&s| avg[s as usize]).collect()
    }

    pub fn apply<T: Scalar>(&self, low: &Image<T>) -> Result<Image<T>> {
        if low.shape() != (self.low_h, self.low_w, 1) {
            return Err(Error::invalid(format!(
                "bilateral slice expects a {}x{}x1 input, got {:?}",
                self.low_h,
                self.low_w,
                low.shape()
            )));
        }
        let grid = self.grid_values(low);
        let mut out = Vec::with_capacity(self.out_h * self.out_w);
        for y in 0..self.out_h {
            for x in 0..self.out_w {
                let mut acc = T::zero();
                for (c, w) in self.corners(y, x) {
                    acc = acc + T::of_f64(w as f64) * grid[c];
                }
                out.push(acc);
            }
        }
        Image::from_vec(self.out_h, self.out_w, 1, out)
    }

    /// Adjoint of [`BilateralSlicer::apply`]: maps an output gradient to the
    /// low-resolution input.
    pub fn apply_transpose<T: Scalar>(&self, grad: &Image<T>) -> Result<Image<T>> {
        if grad.shape() != (self.out_h, self.out_w, 1) {
            return Err(Error::invalid("bilateral transpose: gradient shape mismatch"));
        }
        let mut g_cell = vec![T::zero(); self.count.len()];
        for y in 0..self.out_h {
            for x in 0..self.out_w {
                let g = grad.get(y, x, 0);
                for (c, w) in self.corners(y, x) {
                    g_cell[c] = g_cell[c] + T::of_f64(w as f64) * g;
                }
            }
        }
        let mut g_avg = vec![T::zero(); self.count.len()];
        for (c, &s) in self.source.iter().enumerate() {
            g_avg[s as usize] = g_avg[s as usize] + g_cell[c];
        }
        let data = self
            .low_cell
            .iter()
            .map(|&c| g_avg[c as usize] / T::of_f64(self.count[c as usize] as f64))
            .collect();
        Image::from_vec(self.low_h, self.low_w, 1, data)
    }
}

/// Upsamples a single-channel low-resolution map to the guide's size.
pub fn bilateral_upsample<T: Scalar>(
    lowres: &Image<T>,
    guide: &Image<T>,
    spec: GridSpec,
) -> Result<Image<T>> {
    if lowres.channels() != 1 {
        return Err(Error::invalid("bilateral_upsample expects a single-channel map"));
    }
    BilateralSlicer::new(lowres.height(), lowres.width(), guide, spec)?.apply(lowres)
}
