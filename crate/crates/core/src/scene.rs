//! Sub-pixel scene model and the forward imaging operator `y = Φ·H(x) + n`.
//!
//! A patch of `rows x cols` observed pixels is subdivided into a
//! `ratio x ratio` sub-pixel grid. Point targets are snapped onto that grid,
//! blurred by a sampled Gaussian PSF (`H`), and block-averaged back to the
//! observed resolution (`Φ`).

use std::f64::consts::PI;

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::grid::{Grid, HighResGrid, Measurement};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    /// Observed patch rows (`M1`).
    pub rows: usize,
    /// Observed patch columns (`M2`).
    pub cols: usize,
    /// Sub-pixel subdivision factor `c`; must be odd.
    pub ratio: usize,
    /// PSF standard deviation in observed pixels.
    pub sigma_psf: f64,
    /// Observed pixel pitch `D`.
    pub pixel_pitch: f64,
    pub noise_sigma: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            rows: 11,
            cols: 11,
            ratio: 3,
            sigma_psf: 0.75,
            pixel_pitch: 1.0,
            noise_sigma: 2.0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::InvalidParameter(format!(
                "patch must be at least 1x1, got {}x{}",
                self.rows, self.cols
            )));
        }
        if self.ratio == 0 || self.ratio.is_multiple_of(2) {
            return Err(Error::InvalidParameter(format!(
                "sub-pixel ratio must be odd and >= 1, got {}",
                self.ratio
            )));
        }
        if !(self.sigma_psf > 0.0) || !self.sigma_psf.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "sigma_psf must be positive, got {}",
                self.sigma_psf
            )));
        }
        if !(self.pixel_pitch > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "pixel pitch must be positive, got {}",
                self.pixel_pitch
            )));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "noise_sigma must be >= 0, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }

    /// `(N1, N2)` of the sub-pixel grid.
    pub fn high_res_dims(&self) -> (usize, usize) {
        (self.rows * self.ratio, self.cols * self.ratio)
    }

    /// Offset of the cell that represents a pixel's own center, `(c-1)/2`.
    pub fn center_offset(&self) -> usize {
        (self.ratio - 1) / 2
    }

    /// Default PSF truncation radius in sub-pixel cells, `ceil(4·c·σ)`.
    pub fn default_psf_radius(&self) -> usize {
        (4.0 * self.ratio as f64 * self.sigma_psf).ceil().max(1.0) as usize
    }

    /// Worst-case distance between a target and the center of its cell:
    /// `√2/(2c)·D`.
    pub fn localization_bound(&self) -> f64 {
        std::f64::consts::SQRT_2 / (2.0 * self.ratio as f64) * self.pixel_pitch
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Target {
    /// Column coordinate in observed pixels.
    pub x: f64,
    /// Row coordinate in observed pixels.
    pub y: f64,
    /// Radiant intensity.
    pub s: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseScene {
    pub targets: Vec<Target>,
}

impl SparseScene {
    pub fn new(targets: Vec<Target>) -> Self {
        SparseScene { targets }
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

/// Gaussian PSF evaluated at squared distance `dist_sq` from the source.
pub fn gaussian_psf(dist_sq: f64, sigma_psf: f64) -> f64 {
    let var = sigma_psf * sigma_psf;
    (-dist_sq / (2.0 * var)).exp() / (2.0 * PI * var)
}

/// Square PSF stencil on the sub-pixel grid, normalized to unit sum.
#[derive(Debug, Clone, PartialEq)]
pub struct PsfKernel {
    radius: usize,
    sigma_psf: f64,
    taps: Vec<f64>,
}

impl PsfKernel {
    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn side(&self) -> usize {
        2 * self.radius + 1
    }

    pub fn sigma_psf(&self) -> f64 {
        self.sigma_psf
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    /// Tap at signed offset `(dr, dc)` from the center.
    pub fn tap(&self, dr: i64, dc: i64) -> f64 {
        let r = self.radius as i64;
        if dr.abs() > r || dc.abs() > r {
            return 0.0;
        }
        self.taps[((dr + r) as usize) * self.side() + (dc + r) as usize]
    }
}

/// Samples the PSF at integer sub-pixel offsets (spacing `1/ratio` observed
/// pixels) out to `radius` cells and renormalizes the taps to sum to one.
pub fn make_psf_kernel(sigma_psf: f64, radius: usize, ratio: usize) -> Result<PsfKernel> {
    if !(sigma_psf > 0.0) || !sigma_psf.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "sigma_psf must be positive, got {sigma_psf}"
        )));
    }
    if radius == 0 {
        return Err(Error::InvalidParameter("PSF radius must be >= 1".into()));
    }
    if ratio == 0 {
        return Err(Error::InvalidParameter("ratio must be >= 1".into()));
    }
    let side = 2 * radius + 1;
    let step = 1.0 / ratio as f64;
    let r = radius as i64;
    let mut taps = Vec::with_capacity(side * side);
    for dr in -r..=r {
        for dc in -r..=r {
            let (qy, qx) = (dr as f64 * step, dc as f64 * step);
            taps.push(gaussian_psf(qx * qx + qy * qy, sigma_psf));
        }
    }
    let total: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= total);
    Ok(PsfKernel {
        radius,
        sigma_psf,
        taps,
    })
}

/// Sub-pixel cell index along one axis; ties round half up.
fn cell_index(coord: f64, ratio: usize) -> i64 {
    let c = ratio as f64;
    (c * coord + (c - 1.0) / 2.0 + 0.5).floor() as i64
}

/// `(row, col)` of the sub-pixel cell that a target at `(x, y)` occupies.
pub fn target_cell(x: f64, y: f64, ratio: usize) -> (i64, i64) {
    (cell_index(y, ratio), cell_index(x, ratio))
}

/// Continuous observed-frame coordinates `(x, y)` of a cell's center.
pub fn cell_center(row: usize, col: usize, ratio: usize) -> (f64, f64) {
    let c = ratio as f64;
    let off = (c - 1.0) / 2.0;
    ((col as f64 - off) / c, (row as f64 - off) / c)
}

/// Places every target's intensity at its sub-pixel cell; all other cells
/// stay zero.
pub fn embed_scene(scene: &SparseScene, cfg: &SceneConfig) -> Result<HighResGrid> {
    let (n1, n2) = cfg.high_res_dims();
    let mut grid = Grid::zeros(n1, n2);
    let mut owner = vec![usize::MAX; n1 * n2];
    for (i, t) in scene.targets.iter().enumerate() {
        let (row, col) = target_cell(t.x, t.y, cfg.ratio);
        if row < 0 || col < 0 || row >= n1 as i64 || col >= n2 as i64 {
            return Err(Error::OutOfBounds {
                index: i,
                row,
                col,
                rows: n1,
                cols: n2,
            });
        }
        let (row, col) = (row as usize, col as usize);
        let slot = row * n2 + col;
        if owner[slot] != usize::MAX {
            return Err(Error::Collision {
                first: owner[slot],
                second: i,
                row,
                col,
            });
        }
        owner[slot] = i;
        grid.set(row, col, t.s);
    }
    Ok(grid)
}

/// Same-size 2-d convolution of `grid` with `kernel`, zero padded.
pub fn apply_psf(grid: &HighResGrid, kernel: &PsfKernel) -> HighResGrid {
    let (n1, n2) = grid.dims();
    let r = kernel.radius() as i64;
    let side = kernel.side();
    let taps = kernel.taps();
    let mut out = Grid::zeros(n1, n2);
    let data = out.as_mut_slice();
    // Scatter each source; most grids are sparse.
    for (i, &v) in grid.as_slice().iter().enumerate() {
        if v == 0.0 {
            continue;
        }
        let (sr, sc) = ((i / n2) as i64, (i % n2) as i64);
        let c_lo = (sc - r).max(0);
        let c_hi = (sc + r).min(n2 as i64 - 1);
        for dr in -r..=r {
            let row = sr + dr;
            if row < 0 || row >= n1 as i64 {
                continue;
            }
            let trow = &taps[(dr + r) as usize * side..][..side];
            let orow = &mut data[row as usize * n2..][..n2];
            for col in c_lo..=c_hi {
                orow[col as usize] += v * trow[(col - sc + r) as usize];
            }
        }
    }
    out
}

/// Block-averaging measurement `Φ`: each observed pixel is the mean of its
/// `ratio x ratio` block.
pub fn measure(blurred: &HighResGrid, ratio: usize) -> Result<Measurement> {
    let (n1, n2) = blurred.dims();
    if ratio == 0 || n1 % ratio != 0 || n2 % ratio != 0 {
        return Err(Error::DimensionMismatch(format!(
            "{n1}x{n2} grid is not a multiple of ratio {ratio}"
        )));
    }
    let (m1, m2) = (n1 / ratio, n2 / ratio);
    let mut out = Grid::zeros(m1, m2);
    let src = blurred.as_slice();
    let dst = out.as_mut_slice();
    for r in 0..n1 {
        let row = &src[r * n2..][..n2];
        let drow = &mut dst[(r / ratio) * m2..][..m2];
        for (j, block) in row.chunks_exact(ratio).enumerate() {
            drow[j] += block.iter().sum::<f64>();
        }
    }
    let inv = 1.0 / (ratio * ratio) as f64;
    dst.iter_mut().for_each(|v| *v *= inv);
    Ok(out)
}

/// Adds i.i.d. zero-mean Gaussian noise, deterministic in `seed`.
pub fn add_noise(m: &Measurement, noise_sigma: f64, seed: u64) -> Measurement {
    if noise_sigma == 0.0 {
        return m.clone();
    }
    let mut rng = rng::stream(seed, 0);
    let mut out = m.clone();
    for v in out.as_mut_slice() {
        let n: f64 = StandardNormal.sample(&mut rng);
        *v += noise_sigma * n;
    }
    out
}

/// Maps a sub-pixel cell back to the observed pixel containing it,
/// `floor((i - floor((c-1)/2)) / c)` per axis, clamped into the patch.
pub fn reproject(row: usize, col: usize, cfg: &SceneConfig) -> (usize, usize) {
    let c = cfg.ratio as i64;
    let off = cfg.center_offset() as i64;
    let axis = |i: usize, m: usize| -> usize {
        let v = (i as i64 - off).div_euclid(c);
        v.clamp(0, m as i64 - 1) as usize
    };
    (axis(row, cfg.rows), axis(col, cfg.cols))
}

/// The composed noiseless operator `Φ∘H` for one configuration.
#[derive(Debug, Clone)]
pub struct ForwardModel {
    cfg: SceneConfig,
    kernel: PsfKernel,
}

impl ForwardModel {
    pub fn new(cfg: SceneConfig) -> Result<Self> {
        cfg.validate()?;
        let kernel = make_psf_kernel(cfg.sigma_psf, cfg.default_psf_radius(), cfg.ratio)?;
        Ok(ForwardModel { cfg, kernel })
    }

    pub fn with_kernel(cfg: SceneConfig, kernel: PsfKernel) -> Result<Self> {
        cfg.validate()?;
        Ok(ForwardModel { cfg, kernel })
    }

    pub fn config(&self) -> &SceneConfig {
        &self.cfg
    }

    pub fn kernel(&self) -> &PsfKernel {
        &self.kernel
    }

    /// `Φ·H(x)` for a grid of the configured sub-pixel size.
    pub fn apply(&self, grid: &HighResGrid) -> Result<Measurement> {
        let (n1, n2) = self.cfg.high_res_dims();
        if grid.dims() != (n1, n2) {
            return Err(Error::DimensionMismatch(format!(
                "expected {n1}x{n2} grid, got {:?}",
                grid.dims()
            )));
        }
        measure(&apply_psf(grid, &self.kernel), self.cfg.ratio)
    }

    /// Noiseless observation of a scene.
    pub fn observe(&self, scene: &SparseScene) -> Result<Measurement> {
        self.apply(&embed_scene(scene, &self.cfg)?)
    }
}
