use super::{VideoClip, CHANNELS, CUBE_DIM, CUBE_H, CUBE_T, CUBE_W};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Token grid extents `(T′, H′, W′)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GridDims {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl GridDims {
    pub fn new(t: usize, h: usize, w: usize) -> Self {
        GridDims { t, h, w }
    }

    /// Grid of a `frames×height×width` clip.
    pub fn for_clip(frames: usize, height: usize, width: usize) -> Result<Self> {
        if frames == 0
            || height == 0
            || width == 0
            || frames % CUBE_T != 0
            || height % CUBE_H != 0
            || width % CUBE_W != 0
        {
            return Err(Error::dim(format!(
                "clip {frames}×{height}×{width} does not split into \
                 {CUBE_T}×{CUBE_H}×{CUBE_W} cubes"
            )));
        }
        Ok(GridDims::new(frames / CUBE_T, height / CUBE_H, width / CUBE_W))
    }

    /// Spatial sites per temporal slice, `S = H′·W′`.
    pub fn spatial(&self) -> usize {
        self.h * self.w
    }

    pub fn tokens(&self) -> usize {
        self.t * self.spatial()
    }

    /// Row-major flat index of `(t′, h′, w′)`.
    pub fn flat(&self, t: usize, h: usize, w: usize) -> usize {
        (t * self.h + h) * self.w + w
    }

    pub fn coords(&self, flat: usize) -> (usize, usize, usize) {
        let s = self.spatial();
        (flat / s, (flat % s) / self.w, flat % self.w)
    }

    pub fn frames(&self) -> usize {
        self.t * CUBE_T
    }

    pub fn height(&self) -> usize {
        self.h * CUBE_H
    }

    pub fn width(&self) -> usize {
        self.w * CUBE_W
    }
}

impl std::fmt::Display for GridDims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.t, self.h, self.w)
    }
}

/// Tokenized clip: one row of `CUBE_DIM` raw pixels per cube.
#[derive(Clone, Debug, PartialEq)]
pub struct CubeGrid {
    pub tokens: Tensor<f32>,
    pub dims: GridDims,
}

impl CubeGrid {
    pub fn new(tokens: Tensor<f32>, dims: GridDims) -> Result<Self> {
        let (n, d) = tokens.rows_cols();
        if tokens.shape().len() != 2 || n != dims.tokens() || d != CUBE_DIM {
            return Err(Error::dim(format!(
                "token matrix {:?} does not match grid {dims} of width {CUBE_DIM}",
                tokens.shape()
            )));
        }
        Ok(CubeGrid { tokens, dims })
    }

    pub fn len(&self) -> usize {
        self.dims.tokens()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn for_each_cube_pixel(
    dims: GridDims,
    mut f: impl FnMut(usize, usize, usize),
) {
    // (token row, offset within token, flat pixel index in C×T×H×W)
    let (frames, height, width) = (dims.frames(), dims.height(), dims.width());
    for tt in 0..dims.t {
        for hh in 0..dims.h {
            for ww in 0..dims.w {
                let token = dims.flat(tt, hh, ww);
                let mut k = 0;
                for c in 0..CHANNELS {
                    for dt in 0..CUBE_T {
                        let t = tt * CUBE_T + dt;
                        for dy in 0..CUBE_H {
                            let y = hh * CUBE_H + dy;
                            let base = ((c * frames + t) * height + y) * width + ww * CUBE_W;
                            for dx in 0..CUBE_W {
                                f(token, k, base + dx);
                                k += 1;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Splits a clip into non-overlapping 2×16×16 cubes. Tokens are ordered
/// `(t′, h′, w′)` row-major; each token is flattened `(channel, time, row, col)`.
pub fn cubify(clip: &VideoClip) -> Result<CubeGrid> {
    if clip.channels() != CHANNELS {
        return Err(Error::dim(format!(
            "expected {CHANNELS} channels, got {}",
            clip.channels()
        )));
    }
    let dims = GridDims::for_clip(clip.frames(), clip.height(), clip.width())?;
    let src = clip.pixels.data();
    let mut out = vec![0f32; dims.tokens() * CUBE_DIM];
    for_each_cube_pixel(dims, |token, k, p| out[token * CUBE_DIM + k] = src[p]);
    CubeGrid::new(Tensor::new(&[dims.tokens(), CUBE_DIM], out)?, dims)
}

/// Exact inverse of [`cubify`].
pub fn decubify(grid: &CubeGrid) -> Result<VideoClip> {
    let dims = grid.dims;
    if grid.tokens.shape() != [dims.tokens(), CUBE_DIM] {
        return Err(Error::dim(format!(
            "{:?} tokens for grid {dims}",
            grid.tokens.shape()
        )));
    }
    let src = grid.tokens.data();
    let mut out = vec![0f32; src.len()];
    for_each_cube_pixel(dims, |token, k, p| out[p] = src[token * CUBE_DIM + k]);
    VideoClip::new(Tensor::new(
        &[CHANNELS, dims.frames(), dims.height(), dims.width()],
        out,
    )?)
}

/// Per-cube standardized reconstruction targets.
#[derive(Clone, Debug)]
pub struct TargetCubes {
    pub values: Tensor<f32>,
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
    pub eps: f32,
}

impl TargetCubes {
    /// Maps normalized rows back to pixel space using each cube's statistics.
    pub fn denormalize(&self, normalized: &Tensor<f32>) -> Tensor<f32> {
        let mut out = normalized.clone();
        let d = out.rows_cols().1;
        for (i, row) in out.data_mut().chunks_mut(d).enumerate() {
            let scale = self.std[i] + self.eps;
            for v in row {
                *v = *v * scale + self.mean[i];
            }
        }
        out
    }
}

/// Subtracts each cube's mean and divides by its standard deviation plus `eps`.
pub fn normalize_cube_targets(grid: &CubeGrid, eps: f32) -> TargetCubes {
    let (n, d) = grid.tokens.rows_cols();
    let mut values = grid.tokens.clone();
    let mut mean = Vec::with_capacity(n);
    let mut std = Vec::with_capacity(n);
    for row in values.data_mut().chunks_mut(d) {
        let m = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
        let var = row.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / d as f64;
        let s = var.sqrt();
        let denom = s + eps as f64;
        for v in row.iter_mut() {
            *v = ((*v as f64 - m) / denom) as f32;
        }
        mean.push(m as f32);
        std.push(s as f32);
    }
    TargetCubes {
        values,
        mean,
        std,
        eps,
    }
}
