//! Token masks over the `(T′, S)` grid and the temporal leakage probe.
//!
//! Counts are exact, never Bernoulli draws: a tube mask hides
//! `round(ρ·S)` spatial sites at every time slice, a random mask hides
//! `round(ρ·T′·S)` tokens, a frame mask hides `round(ρ·T′)` whole slices.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};
use crate::video::GridDims;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MaskStrategy {
    Tube,
    Random,
    Frame,
}

impl MaskStrategy {
    pub const ALL: [MaskStrategy; 3] = [MaskStrategy::Tube, MaskStrategy::Random, MaskStrategy::Frame];

    pub fn name(self) -> &'static str {
        match self {
            MaskStrategy::Tube => "tube",
            MaskStrategy::Random => "random",
            MaskStrategy::Frame => "frame",
        }
    }
}

impl fmt::Display for MaskStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MaskStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tube" => Ok(MaskStrategy::Tube),
            "random" => Ok(MaskStrategy::Random),
            "frame" => Ok(MaskStrategy::Frame),
            other => Err(Error::config(format!(
                "unknown mask strategy `{other}` (tube, random, frame)"
            ))),
        }
    }
}

/// Boolean field over `(T′, S)`, `true` = masked.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskMap {
    pub frames: usize,
    pub sites: usize,
    pub ratio: f64,
    pub strategy: MaskStrategy,
    mask: Vec<bool>,
}

impl MaskMap {
    pub fn from_bools(
        frames: usize,
        sites: usize,
        ratio: f64,
        strategy: MaskStrategy,
        mask: Vec<bool>,
    ) -> Result<Self> {
        if mask.len() != frames * sites {
            return Err(Error::dim(format!(
                "mask of {} entries for {frames}x{sites}",
                mask.len()
            )));
        }
        if mask.iter().all(|&m| m) {
            return Err(Error::config("mask leaves no visible token"));
        }
        Ok(MaskMap {
            frames,
            sites,
            ratio,
            strategy,
            mask,
        })
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn is_masked(&self, t: usize, s: usize) -> bool {
        self.mask[t * self.sites + s]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.mask
    }

    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn visible_count(&self) -> usize {
        self.len() - self.masked_count()
    }

    /// Ω, ascending flat indices.
    pub fn masked_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.mask[i]).collect()
    }

    pub fn visible_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.mask[i]).collect()
    }

    pub fn matches(&self, dims: GridDims) -> bool {
        self.frames == dims.t && self.sites == dims.spatial()
    }

    /// One line of `#` (masked) and `.` (visible) per time slice.
    pub fn render_text(&self) -> String {
        let mut out = String::with_capacity(self.frames * (self.sites + 1));
        for t in 0..self.frames {
            for s in 0..self.sites {
                out.push(if self.is_masked(t, s) { '#' } else { '.' });
            }
            out.push('\n');
        }
        out
    }
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::config(format!(
            "masking ratio must be in [0, 1), got {ratio}"
        )));
    }
    Ok(())
}

fn exact_count(ratio: f64, n: usize) -> usize {
    (ratio * n as f64).round() as usize
}

/// Masks `round(ρ·S)` spatial sites through the whole temporal axis.
pub fn tube_mask(frames: usize, sites: usize, ratio: f64, rng: &mut impl Rng) -> Result<MaskMap> {
    check_ratio(ratio)?;
    let m = exact_count(ratio, sites);
    let mut column = vec![false; sites];
    for s in sample(rng, sites, m) {
        column[s] = true;
    }
    let mask = (0..frames).flat_map(|_| column.iter().copied()).collect();
    MaskMap::from_bools(frames, sites, ratio, MaskStrategy::Tube, mask)
}

/// Masks `round(ρ·T′·S)` tokens anywhere on the grid.
pub fn random_mask(frames: usize, sites: usize, ratio: f64, rng: &mut impl Rng) -> Result<MaskMap> {
    check_ratio(ratio)?;
    let n = frames * sites;
    let m = exact_count(ratio, n);
    let mut mask = vec![false; n];
    for i in sample(rng, n, m) {
        mask[i] = true;
    }
    MaskMap::from_bools(frames, sites, ratio, MaskStrategy::Random, mask)
}

/// Masks `round(ρ·T′)` complete time slices.
pub fn frame_mask(frames: usize, sites: usize, ratio: f64, rng: &mut impl Rng) -> Result<MaskMap> {
    check_ratio(ratio)?;
    let m = exact_count(ratio, frames);
    let mut slices = vec![false; frames];
    for t in sample(rng, frames, m) {
        slices[t] = true;
    }
    let mask = slices
        .iter()
        .flat_map(|&hidden| std::iter::repeat(hidden).take(sites))
        .collect();
    MaskMap::from_bools(frames, sites, ratio, MaskStrategy::Frame, mask)
}

pub fn generate_mask(
    strategy: MaskStrategy,
    dims: GridDims,
    ratio: f64,
    rng: &mut impl Rng,
) -> Result<MaskMap> {
    let (t, s) = (dims.t, dims.spatial());
    match strategy {
        MaskStrategy::Tube => tube_mask(t, s, ratio, rng),
        MaskStrategy::Random => random_mask(t, s, ratio, rng),
        MaskStrategy::Frame => frame_mask(t, s, ratio, rng),
    }
}

/// Number of tokens a strategy leaves visible, without sampling.
pub fn visible_tokens(strategy: MaskStrategy, dims: GridDims, ratio: f64) -> usize {
    let (t, s) = (dims.t, dims.spatial());
    match strategy {
        MaskStrategy::Tube => (s - exact_count(ratio, s)) * t,
        MaskStrategy::Random => t * s - exact_count(ratio, t * s),
        MaskStrategy::Frame => (t - exact_count(ratio, t)) * s,
    }
}

/// Rows kept for the encoder, with their flat grid indices.
#[derive(Clone, Debug, PartialEq)]
pub struct VisibleSet<R> {
    pub rows: Tensor<R>,
    pub indices: Vec<usize>,
}

/// Gathers the unmasked rows of a `[T′·S × D]` token matrix in ascending order.
pub fn apply_mask<R: Real>(tokens: &Tensor<R>, mask: &MaskMap) -> Result<VisibleSet<R>> {
    let (n, d) = tokens.rows_cols();
    if n != mask.len() {
        return Err(Error::dim(format!(
            "{n} tokens against a {}x{} mask",
            mask.frames, mask.sites
        )));
    }
    let indices = mask.visible_indices();
    let mut data = Vec::with_capacity(indices.len() * d);
    for &i in &indices {
        data.extend_from_slice(tokens.row(i));
    }
    Ok(VisibleSet {
        rows: Tensor::new(&[indices.len(), d], data)?,
        indices,
    })
}

/// Writes visible rows back to their grid positions; other rows are `fill`.
pub fn scatter_visible<R: Real>(visible: &VisibleSet<R>, total: usize, fill: R) -> Tensor<R> {
    let d = visible.rows.rows_cols().1;
    let mut out = Tensor::full(&[total, d], fill);
    for (k, &i) in visible.indices.iter().enumerate() {
        out.data_mut()[i * d..(i + 1) * d].copy_from_slice(visible.rows.row(k));
    }
    out
}

/// Fraction of masked tokens whose spatial site is visible at some other time
/// slice; 0 when nothing is masked.
pub fn leakage_probe(mask: &MaskMap) -> f64 {
    let masked = mask.masked_count();
    if masked == 0 {
        return 0.0;
    }
    let site_has_visible: Vec<bool> = (0..mask.sites)
        .map(|s| (0..mask.frames).any(|t| !mask.is_masked(t, s)))
        .collect();
    let leaked = (0..mask.frames)
        .flat_map(|t| (0..mask.sites).map(move |s| (t, s)))
        .filter(|&(t, s)| mask.is_masked(t, s) && site_has_visible[s])
        .count();
    leaked as f64 / masked as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn tube_counts() {
        let m = tube_mask(8, 196, 0.9, &mut rng(0)).unwrap();
        assert_eq!(m.masked_count(), 176 * 8);
        assert_eq!(m.visible_count(), 160);
        let m = tube_mask(8, 196, 0.75, &mut rng(0)).unwrap();
        assert_eq!(m.visible_count(), 392);
        let m = tube_mask(8, 196, 0.0, &mut rng(0)).unwrap();
        assert_eq!(m.visible_count(), 1568);
    }

    #[test]
    fn random_counts() {
        let m = random_mask(8, 196, 0.9, &mut rng(1)).unwrap();
        assert_eq!((m.masked_count(), m.visible_count()), (1411, 157));
        assert_eq!(random_mask(8, 196, 0.0, &mut rng(1)).unwrap().masked_count(), 0);
    }

    #[test]
    fn random_determinism() {
        let a = random_mask(8, 196, 0.9, &mut rng(3)).unwrap();
        let b = random_mask(8, 196, 0.9, &mut rng(3)).unwrap();
        let c = random_mask(8, 196, 0.9, &mut rng(4)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn frame_counts() {
        let m = frame_mask(8, 196, 0.875, &mut rng(2)).unwrap();
        assert_eq!(m.visible_count(), 196);
        let m = frame_mask(8, 196, 0.5, &mut rng(2)).unwrap();
        assert_eq!(m.visible_count(), 784);
        assert_eq!(frame_mask(8, 196, 0.0, &mut rng(2)).unwrap().masked_count(), 0);
    }

    #[test]
    fn bad_ratio_rejected() {
        assert!(matches!(tube_mask(8, 196, 1.0, &mut rng(0)), Err(Error::Config(_))));
        assert!(matches!(random_mask(8, 196, -0.1, &mut rng(0)), Err(Error::Config(_))));
        // rounds up to every site: nothing left for the encoder
        assert!(matches!(tube_mask(2, 4, 0.9, &mut rng(0)), Err(Error::Config(_))));
    }

    #[test]
    fn apply_empty_mask_is_identity() {
        let tokens = Tensor::<f32>::new(&[4, 2], (0..8).map(|v| v as f32).collect()).unwrap();
        let m = MaskMap::from_bools(2, 2, 0.0, MaskStrategy::Random, vec![false; 4]).unwrap();
        let v = apply_mask(&tokens, &m).unwrap();
        assert_eq!(v.indices, vec![0, 1, 2, 3]);
        assert_eq!(v.rows, tokens);
    }

    #[test]
    fn apply_single_visible() {
        let tokens = Tensor::<f32>::new(&[4, 2], (0..8).map(|v| v as f32).collect()).unwrap();
        let m = MaskMap::from_bools(2, 2, 0.75, MaskStrategy::Random, vec![false, true, true, true])
            .unwrap();
        let v = apply_mask(&tokens, &m).unwrap();
        assert_eq!(v.indices, vec![0]);
        assert_eq!(v.rows.data(), &[0.0, 1.0]);
    }

    #[test]
    fn apply_dims_mismatch() {
        let tokens = Tensor::<f32>::zeros(&[5, 2]);
        let m = random_mask(2, 2, 0.5, &mut rng(0)).unwrap();
        assert!(matches!(apply_mask(&tokens, &m), Err(Error::Dimension(_))));
    }

    #[test]
    fn leakage_extremes() {
        for seed in 0..10 {
            assert_eq!(leakage_probe(&tube_mask(8, 196, 0.9, &mut rng(seed)).unwrap()), 0.0);
            assert_eq!(leakage_probe(&frame_mask(8, 196, 0.875, &mut rng(seed)).unwrap()), 1.0);
        }
        let none = random_mask(8, 196, 0.0, &mut rng(0)).unwrap();
        assert_eq!(leakage_probe(&none), 0.0);
    }

    #[test]
    fn text_render_counts() {
        let m = random_mask(8, 196, 0.9, &mut rng(5)).unwrap();
        let text = m.render_text();
        assert_eq!(text.matches('#').count(), 1411);
        assert_eq!(text.lines().count(), 8);
    }

    #[test]
    fn visible_token_formula() {
        let d = GridDims::new(8, 4, 4);
        assert_eq!(visible_tokens(MaskStrategy::Tube, d, 0.5), 64);
        assert_eq!(visible_tokens(MaskStrategy::Tube, d, 0.75), 32);
        assert_eq!(visible_tokens(MaskStrategy::Tube, d, 0.9), 16);
        assert_eq!(visible_tokens(MaskStrategy::Random, d, 0.9), 13);
        assert_eq!(visible_tokens(MaskStrategy::Frame, d, 0.875), 16);
    }

    proptest! {
        #[test]
        fn tube_columns_uniform(seed in any::<u64>(), ratio in 0.0f64..0.95, t in 1usize..9, s in 2usize..40) {
            if let Ok(m) = tube_mask(t, s, ratio, &mut rng(seed)) {
                for site in 0..s {
                    let first = m.is_masked(0, site);
                    prop_assert!((0..t).all(|tt| m.is_masked(tt, site) == first));
                }
                prop_assert_eq!(m.masked_count(), t * exact_count(ratio, s));
                prop_assert_eq!(leakage_probe(&m), 0.0);
            }
        }

        #[test]
        fn gather_scatter_round_trip(seed in any::<u64>(), ratio in 0.0f64..0.9) {
            let mut r = rng(seed);
            let m = random_mask(4, 9, ratio, &mut r).unwrap();
            let data: Vec<f64> = (0..36 * 3).map(|_| r.gen::<f64>()).collect();
            let tokens = Tensor::new(&[36, 3], data).unwrap();
            let v = apply_mask(&tokens, &m).unwrap();
            prop_assert_eq!(v.indices.len() + m.masked_count(), 36);
            prop_assert!(v.indices.windows(2).all(|w| w[0] < w[1]));
            let back = scatter_visible(&v, 36, 0.0);
            for &i in &v.indices {
                prop_assert_eq!(back.row(i), tokens.row(i));
            }
            prop_assert_eq!(apply_mask(&back, &m).unwrap(), v);
        }
    }
}
