//! Clip sampling, cube tokenization, reconstruction targets and the
//! synthetic datasets.

mod cube;
mod io;
mod sprites;

pub use cube::{cubify, decubify, normalize_cube_targets, CubeGrid, GridDims, TargetCubes};
pub use io::{read_raw_video, write_ppm, write_raw_video};
pub use sprites::{
    synth_moving_sprites, synth_static_textures, Direction, SpriteConfig, SpriteDataset,
};

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHANNELS: usize = 3;
pub const CUBE_T: usize = 2;
pub const CUBE_H: usize = 16;
pub const CUBE_W: usize = 16;
/// Flattened width of one 3×2×16×16 cube.
pub const CUBE_DIM: usize = CHANNELS * CUBE_T * CUBE_H * CUBE_W;

/// Decoded video before temporal sampling, laid out `(C, T, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RawVideo {
    pub channels: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl RawVideo {
    pub fn new(channels: usize, frames: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels * frames * height * width == 0 {
            return Err(Error::dim(format!(
                "empty video {channels}x{frames}x{height}x{width}"
            )));
        }
        if data.len() != channels * frames * height * width {
            return Err(Error::dim(format!(
                "video {channels}x{frames}x{height}x{width} with {} values",
                data.len()
            )));
        }
        Ok(RawVideo {
            channels,
            frames,
            height,
            width,
            data,
        })
    }

    fn frame_len(&self) -> usize {
        self.height * self.width
    }

    /// Copies the listed frames (in order) into a `C×T×H×W` tensor.
    fn select(&self, indices: &[usize]) -> Tensor<f32> {
        let fl = self.frame_len();
        let mut out = Vec::with_capacity(self.channels * indices.len() * fl);
        for c in 0..self.channels {
            for &t in indices {
                let off = (c * self.frames + t) * fl;
                out.extend_from_slice(&self.data[off..off + fl]);
            }
        }
        Tensor::new(&[self.channels, indices.len(), self.height, self.width], out).unwrap()
    }
}

/// Sampled clip: `pixels` is `C×T×H×W` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub pixels: Tensor<f32>,
    /// Temporal stride between sampled raw frames.
    pub stride: usize,
    /// Raw index of the first sampled frame.
    pub start: usize,
}

impl VideoClip {
    pub fn new(pixels: Tensor<f32>) -> Result<Self> {
        if pixels.shape().len() != 4 {
            return Err(Error::dim(format!(
                "clip must be C×T×H×W, got {:?}",
                pixels.shape()
            )));
        }
        Ok(VideoClip {
            pixels,
            stride: 1,
            start: 0,
        })
    }

    pub fn channels(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[3]
    }

    pub fn at(&self, c: usize, t: usize, y: usize, x: usize) -> f32 {
        let (tt, h, w) = (self.frames(), self.height(), self.width());
        self.pixels.data()[((c * tt + t) * h + y) * w + x]
    }

    /// Mirror every frame left to right.
    pub fn flip_horizontal(&self) -> VideoClip {
        let w = self.width();
        let mut out = self.pixels.clone();
        for row in out.data_mut().chunks_mut(w) {
            row.reverse();
        }
        VideoClip {
            pixels: out,
            stride: self.stride,
            start: self.start,
        }
    }
}

/// Temporal sampling scheme.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamplingMode {
    /// Every `stride`-th frame from a random start.
    Dense { stride: usize },
    /// One random frame from each of `T` equal segments.
    Uniform,
}

fn dense_span(frames: usize, stride: usize) -> usize {
    frames * stride
}

/// Draws a `frames`-long clip from `video`.
pub fn sample_clip(
    video: &RawVideo,
    mode: SamplingMode,
    frames: usize,
    rng: &mut impl Rng,
) -> Result<VideoClip> {
    match mode {
        SamplingMode::Dense { stride } => {
            let span = dense_span(frames, stride);
            if stride == 0 || frames == 0 || video.frames < span {
                return Err(Error::Sampling {
                    required: span.max(1),
                    available: video.frames,
                });
            }
            let start = rng.gen_range(0..=video.frames - span);
            sample_clip_at(video, stride, frames, start)
        }
        SamplingMode::Uniform => {
            if frames == 0 || video.frames < frames {
                return Err(Error::Sampling {
                    required: frames.max(1),
                    available: video.frames,
                });
            }
            let indices: Vec<usize> = (0..frames)
                .map(|i| {
                    let (lo, hi) = uniform_segment(video.frames, frames, i);
                    rng.gen_range(lo..=hi)
                })
                .collect();
            Ok(VideoClip {
                pixels: video.select(&indices),
                stride: video.frames / frames,
                start: indices[0],
            })
        }
    }
}

/// Inclusive raw-frame bounds of segment `i` when `len` frames split into `parts`.
pub fn uniform_segment(len: usize, parts: usize, i: usize) -> (usize, usize) {
    let lo = i * len / parts;
    let hi = (i + 1) * len / parts - 1;
    (lo, hi)
}

/// Dense sampling from a fixed start index.
pub fn sample_clip_at(
    video: &RawVideo,
    stride: usize,
    frames: usize,
    start: usize,
) -> Result<VideoClip> {
    let span = dense_span(frames, stride);
    if stride == 0 || frames == 0 || start + span > video.frames {
        return Err(Error::Sampling {
            required: start + span.max(1),
            available: video.frames,
        });
    }
    let indices: Vec<usize> = (0..frames).map(|i| start + i * stride).collect();
    Ok(VideoClip {
        pixels: video.select(&indices),
        stride,
        start,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// One channel, pixel value = raw frame index.
    fn indexed_video(frames: usize) -> RawVideo {
        let data = (0..frames).flat_map(|t| vec![t as f32; 4]).collect();
        RawVideo::new(1, frames, 2, 2, data).unwrap()
    }

    fn frame_ids(clip: &VideoClip) -> Vec<usize> {
        (0..clip.frames()).map(|t| clip.at(0, t, 0, 0) as usize).collect()
    }

    #[test]
    fn dense_stride_four() {
        let v = indexed_video(64);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let clip = sample_clip(&v, SamplingMode::Dense { stride: 4 }, 16, &mut rng).unwrap();
        assert_eq!(clip.start, 0);
        assert_eq!(frame_ids(&clip), (0..16).map(|i| 4 * i).collect::<Vec<_>>());
    }

    #[test]
    fn dense_unit_stride_is_prefix() {
        let v = indexed_video(20);
        let clip = sample_clip_at(&v, 1, 8, 0).unwrap();
        assert_eq!(frame_ids(&clip), (0..8).collect::<Vec<_>>());
        assert_eq!(&clip.pixels.data()[..32], &v.data[..32]);
    }

    #[test]
    fn uniform_hits_each_segment() {
        let v = indexed_video(8);
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let clip = sample_clip(&v, SamplingMode::Uniform, 4, &mut rng).unwrap();
            let ids = frame_ids(&clip);
            for (i, id) in ids.iter().enumerate() {
                assert!((2 * i..=2 * i + 1).contains(id), "{ids:?}");
            }
        }
    }

    #[test]
    fn too_short_reports_lengths() {
        let v = indexed_video(10);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = sample_clip(&v, SamplingMode::Dense { stride: 2 }, 8, &mut rng).unwrap_err();
        assert!(matches!(
            err,
            Error::Sampling {
                required: 16,
                available: 10
            }
        ));
        let err = sample_clip(&v, SamplingMode::Uniform, 11, &mut rng).unwrap_err();
        assert!(matches!(err, Error::Sampling { required: 11, .. }));
    }

    #[test]
    fn flip_twice_is_identity() {
        let data: Vec<f32> = (0..3 * 2 * 4 * 4).map(|i| i as f32).collect();
        let clip = VideoClip::new(Tensor::new(&[3, 2, 4, 4], data).unwrap()).unwrap();
        let f = clip.flip_horizontal();
        assert_eq!(f.at(1, 1, 2, 0), clip.at(1, 1, 2, 3));
        assert_eq!(f.flip_horizontal(), clip);
    }
}
