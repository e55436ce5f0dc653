//! Reconstruction and mask pictures.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::masking::MaskMap;
use crate::model::MaeModel;
use crate::tensor::{ParamStore, Tape, Tensor};
use crate::training::TARGET_EPS;
use crate::video::{
    cubify, decubify, normalize_cube_targets, write_ppm, CubeGrid, GridDims, VideoClip, CHANNELS,
};

/// Grey used for hidden cubes in the masked view.
const MASK_GREY: f32 = 0.5;

pub struct Reconstruction {
    pub original: VideoClip,
    /// The original with masked cubes greyed out.
    pub masked_view: VideoClip,
    /// Visible cubes copied from the input, masked cubes predicted and mapped
    /// back to pixels with each cube's own mean and std.
    pub reconstruction: VideoClip,
    /// Mean absolute pixel error over the masked cubes, predictions clamped
    /// to `[0, 1]`.
    pub masked_mae: f64,
}

pub fn reconstruct(
    model: &MaeModel,
    store: &ParamStore<f32>,
    clip: &VideoClip,
    mask: &MaskMap,
) -> Result<Reconstruction> {
    let grid = cubify(clip)?;
    let target = normalize_cube_targets(&grid, TARGET_EPS);
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, store, &grid, mask)?;
    let pixels = target.denormalize(tape.value(out.pred));

    let d = grid.tokens.rows_cols().1;
    let mut recon = grid.tokens.clone();
    let mut view = grid.tokens.clone();
    let mut abs_err = 0.0;
    for &i in &out.masked {
        let row = &mut recon.data_mut()[i * d..(i + 1) * d];
        for (k, v) in row.iter_mut().enumerate() {
            *v = pixels.data()[i * d + k].clamp(0.0, 1.0);
            abs_err += (*v as f64 - grid.tokens.data()[i * d + k] as f64).abs();
        }
        view.data_mut()[i * d..(i + 1) * d].fill(MASK_GREY);
    }
    let masked_mae = if out.masked.is_empty() {
        0.0
    } else {
        abs_err / (out.masked.len() * d) as f64
    };
    Ok(Reconstruction {
        original: clip.clone(),
        masked_view: decubify(&CubeGrid::new(view, grid.dims)?)?,
        reconstruction: decubify(&CubeGrid::new(recon, grid.dims)?)?,
        masked_mae,
    })
}

/// Planar `3×H×W` pixels of frame `t`.
fn frame_planes(clip: &VideoClip, t: usize) -> Vec<f32> {
    let (f, h, w) = (clip.frames(), clip.height(), clip.width());
    let data = clip.pixels.data();
    let mut out = Vec::with_capacity(CHANNELS * h * w);
    for c in 0..CHANNELS {
        let base = (c * f + t) * h * w;
        out.extend_from_slice(&data[base..base + h * w]);
    }
    out
}

/// Writes `frame_TTT_{original,masked,recon}.ppm` for every frame and
/// returns the paths in that order.
pub fn write_reconstruction(dir: &Path, r: &Reconstruction) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (h, w) = (r.original.height(), r.original.width());
    let mut paths = Vec::new();
    for t in 0..r.original.frames() {
        for (tag, clip) in [
            ("original", &r.original),
            ("masked", &r.masked_view),
            ("recon", &r.reconstruction),
        ] {
            let path = dir.join(format!("frame_{t:03}_{tag}.ppm"));
            write_ppm(&path, h, w, &frame_planes(clip, t))?;
            paths.push(path);
        }
    }
    Ok(paths)
}

/// Picture of a mask: time slices left to right, one `cell`-pixel square per
/// spatial site, masked sites dark and visible sites white, with a one-pixel
/// grey gap between slices.
pub fn mask_image(mask: &MaskMap, dims: GridDims, cell: usize) -> Result<(usize, usize, Vec<f32>)> {
    if !mask.matches(dims) {
        return Err(Error::dim(format!(
            "{}x{} mask for grid {dims}",
            mask.frames, mask.sites
        )));
    }
    let h = dims.h * cell;
    let w = dims.t * (dims.w * cell + 1) - 1;
    let mut plane = Tensor::<f32>::full(&[h, w], MASK_GREY);
    for t in 0..dims.t {
        for y in 0..h {
            for x in 0..dims.w * cell {
                let site = (y / cell) * dims.w + x / cell;
                let v = if mask.is_masked(t, site) { 0.1 } else { 1.0 };
                plane.data_mut()[y * w + t * (dims.w * cell + 1) + x] = v;
            }
        }
    }
    let planes = plane.data().repeat(CHANNELS);
    Ok((h, w, planes))
}

/// Writes `mask.txt` (one `#`/`.` line per time slice) and `mask.ppm`.
pub fn write_mask(dir: &Path, mask: &MaskMap, dims: GridDims) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let text = dir.join("mask.txt");
    std::fs::write(&text, mask.render_text()).map_err(|e| Error::io(&text, e))?;
    let (h, w, planes) = mask_image(mask, dims, 8)?;
    let img = dir.join("mask.ppm");
    write_ppm(&img, h, w, &planes)?;
    Ok((text, img))
}
