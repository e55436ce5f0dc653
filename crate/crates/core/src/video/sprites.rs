use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{VideoClip, CHANNELS};
use crate::error::{Error, Result};
use crate::seed::derived_rng;
use crate::tensor::Tensor;

/// Motion class of a sprite clip.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    Up,
    Down,
    Left,
    Right,
}

impl Direction {
    pub const ALL: [Direction; 4] = [
        Direction::Up,
        Direction::Down,
        Direction::Left,
        Direction::Right,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Direction> {
        Self::ALL.get(i).copied()
    }

    /// `(dy, dx)` of one pixel per frame; `y` grows downwards.
    pub fn unit(self) -> (i64, i64) {
        match self {
            Direction::Up => (-1, 0),
            Direction::Down => (1, 0),
            Direction::Left => (0, -1),
            Direction::Right => (0, 1),
        }
    }

    /// Class of an axis-aligned velocity in pixels per frame.
    pub fn from_velocity(dy: i64, dx: i64) -> Option<Direction> {
        match (dy.signum(), dx.signum()) {
            (-1, 0) => Some(Direction::Up),
            (1, 0) => Some(Direction::Down),
            (0, -1) => Some(Direction::Left),
            (0, 1) => Some(Direction::Right),
            _ => None,
        }
    }

    pub fn mirrored(self) -> Direction {
        match self {
            Direction::Left => Direction::Right,
            Direction::Right => Direction::Left,
            d => d,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Direction::Up => "up",
            Direction::Down => "down",
            Direction::Left => "left",
            Direction::Right => "right",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpriteConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Side of the square sprite in pixels.
    pub sprite_size: usize,
    /// Pixels per frame.
    pub speed: usize,
    /// Upper bound of the static background.
    pub background: f32,
    /// Amplitude of smooth plane waves on the background, relative to
    /// `background`; 0 gives a flat colour per channel.
    pub texture: f32,
    /// Amplitude of per-frame noise added on top of the background.
    pub frame_noise: f32,
}

impl Default for SpriteConfig {
    fn default() -> Self {
        SpriteConfig {
            frames: 16,
            height: 64,
            width: 64,
            sprite_size: 12,
            speed: 2,
            background: 0.3,
            texture: 0.0,
            frame_noise: 0.0,
        }
    }
}

/// Labeled clips plus the seed they were generated from.
#[derive(Clone, Debug, PartialEq)]
pub struct SpriteDataset {
    pub items: Vec<(VideoClip, usize)>,
    pub num_classes: usize,
    pub seed: u64,
}

impl SpriteDataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for (_, label) in &self.items {
            counts[*label] += 1;
        }
        counts
    }

    /// First `fraction` of the items, at least one.
    pub fn fraction(&self, fraction: f64) -> SpriteDataset {
        let n = ((self.items.len() as f64 * fraction).round() as usize).clamp(1, self.items.len());
        SpriteDataset {
            items: self.items[..n].to_vec(),
            num_classes: self.num_classes,
            seed: self.seed,
        }
    }

    /// Same clips with labels permuted by `seed`.
    pub fn shuffled_labels(&self, seed: u64) -> SpriteDataset {
        use rand::seq::SliceRandom;
        let mut labels: Vec<usize> = self.items.iter().map(|(_, l)| *l).collect();
        labels.shuffle(&mut derived_rng(seed, &[0x5eed]));
        SpriteDataset {
            items: self
                .items
                .iter()
                .zip(labels)
                .map(|((c, _), l)| (c.clone(), l))
                .collect(),
            num_classes: self.num_classes,
            seed: self.seed,
        }
    }
}

/// Static grey background: a constant level plus two plane waves of one to
/// three cycles across the frame, scaled into `[0, background]` and shared by
/// all channels, so flat regions carry no colour pattern. Per-frame noise is
/// drawn independently for every pixel and channel.
fn background(cfg: &SpriteConfig, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let (h, w) = (cfg.height, cfg.width);
    let plane = h * w;
    let level: f32 = rng.gen_range(0.2..0.8);
    let waves: [(f32, f32, f32, f32); 2] = std::array::from_fn(|_| {
        let angle = rng.gen::<f32>() * std::f32::consts::TAU;
        let cycles = rng.gen_range(1.0..3.0f32);
        let k = cycles * std::f32::consts::TAU / w.max(h) as f32;
        let amp = cfg.texture * rng.gen_range(0.5..1.0f32);
        (k * angle.cos(), k * angle.sin(), rng.gen::<f32>() * std::f32::consts::TAU, amp)
    });
    let mut texture = Vec::with_capacity(plane);
    for y in 0..h {
        for x in 0..w {
            let v = waves.iter().fold(level, |acc, &(ky, kx, phase, amp)| {
                acc + amp * (ky * y as f32 + kx * x as f32 + phase).sin()
            });
            texture.push(v.clamp(0.0, 1.0) * cfg.background);
        }
    }
    let mut px = Vec::with_capacity(CHANNELS * cfg.frames * plane);
    for _ in 0..CHANNELS {
        for _ in 0..cfg.frames {
            px.extend(texture.iter().map(|&v| {
                let n = if cfg.frame_noise > 0.0 {
                    (rng.gen::<f32>() * 2.0 - 1.0) * cfg.frame_noise
                } else {
                    0.0
                };
                (v + n).clamp(0.0, 1.0)
            }));
        }
    }
    px
}

fn render_sprite(
    cfg: &SpriteConfig,
    direction: Direction,
    rng: &mut ChaCha8Rng,
) -> Result<VideoClip> {
    let (uy, ux) = direction.unit();
    let travel = cfg.speed * cfg.frames.saturating_sub(1);
    let (need_y, need_x) = (
        cfg.sprite_size + if uy != 0 { travel } else { 0 },
        cfg.sprite_size + if ux != 0 { travel } else { 0 },
    );
    if cfg.frames == 0 || cfg.sprite_size == 0 || need_y > cfg.height || need_x > cfg.width {
        return Err(Error::Generation(format!(
            "a {}px sprite moving {} at {}px/frame for {} frames leaves the {}x{} frame",
            cfg.sprite_size,
            direction.name(),
            cfg.speed,
            cfg.frames,
            cfg.height,
            cfg.width
        )));
    }
    let y_lo = rng.gen_range(0..=cfg.height - need_y) as i64;
    let x_lo = rng.gen_range(0..=cfg.width - need_x) as i64;
    let travel = travel as i64;
    // start at the end of the free span the sprite moves away from
    let y0 = if uy < 0 { y_lo + travel } else { y_lo };
    let x0 = if ux < 0 { x_lo + travel } else { x_lo };
    let color: [f32; CHANNELS] = std::array::from_fn(|_| rng.gen_range(0.7..=1.0));

    let mut px = background(cfg, rng);
    let (h, w) = (cfg.height, cfg.width);
    let speed = cfg.speed as i64;
    for t in 0..cfg.frames {
        let y = (y0 + uy * speed * t as i64) as usize;
        let x = (x0 + ux * speed * t as i64) as usize;
        for (c, &col) in color.iter().enumerate() {
            let base = (c * cfg.frames + t) * h * w;
            for yy in y..y + cfg.sprite_size {
                px[base + yy * w + x..base + yy * w + x + cfg.sprite_size].fill(col);
            }
        }
    }
    VideoClip::new(Tensor::new(&[CHANNELS, cfg.frames, h, w], px)?)
}

/// Clips of one bright square translating at constant velocity over a dark
/// static texture. Labels are [`Direction`] indices, assigned round-robin so
/// every class has the same count (up to `count % 4`).
pub fn synth_moving_sprites(seed: u64, count: usize, cfg: &SpriteConfig) -> Result<SpriteDataset> {
    let items = (0..count)
        .map(|i| {
            let dir = Direction::ALL[i % Direction::ALL.len()];
            let mut rng = derived_rng(seed, &[i as u64]);
            render_sprite(cfg, dir, &mut rng).map(|clip| (clip, dir.index()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SpriteDataset {
        items,
        num_classes: Direction::ALL.len(),
        seed,
    })
}

/// Control set with no motion: static oriented stripes (horizontal, vertical,
/// and the two diagonals) under per-frame noise.
pub fn synth_static_textures(seed: u64, count: usize, cfg: &SpriteConfig) -> Result<SpriteDataset> {
    let items = (0..count)
        .map(|i| {
            let label = i % 4;
            let mut rng = derived_rng(seed, &[i as u64, 1]);
            let period = rng.gen_range(6..12) as f32;
            let phase = rng.gen::<f32>() * period;
            let mut px = background(cfg, &mut rng);
            let (h, w) = (cfg.height, cfg.width);
            for c in 0..CHANNELS {
                for t in 0..cfg.frames {
                    let base = (c * cfg.frames + t) * h * w;
                    for y in 0..h {
                        for x in 0..w {
                            let u = match label {
                                0 => y as f32,
                                1 => x as f32,
                                2 => (x + y) as f32,
                                _ => (x as f32 - y as f32) + w as f32,
                            };
                            if ((u + phase) / period).fract() < 0.5 {
                                px[base + y * w + x] = (px[base + y * w + x] + 0.6).min(1.0);
                            }
                        }
                    }
                }
            }
            VideoClip::new(Tensor::new(&[CHANNELS, cfg.frames, h, w], px)?).map(|c| (c, label))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SpriteDataset {
        items,
        num_classes: 4,
        seed,
    })
}
