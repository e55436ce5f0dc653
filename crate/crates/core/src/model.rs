//! Asymmetric masked autoencoder: a ViT encoder over visible cubes only and a
//! narrower decoder over the full grid with a shared mask token.

use rand::Rng;

use crate::error::{Error, Result};
use crate::masking::MaskMap;
use crate::tensor::{
    attention_block, BlockParams, LayerNormParams, LinearParams, ParamId, ParamStore, Real, Tape,
    Tensor, Var,
};
use crate::video::{CubeGrid, GridDims, CUBE_DIM};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d_enc: usize,
    pub depth_enc: usize,
    pub heads_enc: usize,
    pub d_dec: usize,
    pub depth_dec: usize,
    pub heads_dec: usize,
    pub mlp_ratio: usize,
    pub grid: GridDims,
    pub num_classes: usize,
}

impl ModelConfig {
    /// Small default that trains in seconds on a 3×16×64×64 clip.
    pub fn desk() -> Self {
        ModelConfig {
            d_enc: 64,
            depth_enc: 4,
            heads_enc: 4,
            d_dec: 32,
            depth_dec: 2,
            heads_dec: 2,
            mlp_ratio: 4,
            grid: GridDims::new(8, 4, 4),
            num_classes: 4,
        }
    }

    /// ViT-B encoder with a 4-block, 384-wide decoder on 16×224×224 clips.
    pub fn vit_base() -> Self {
        ModelConfig {
            d_enc: 768,
            depth_enc: 12,
            heads_enc: 12,
            d_dec: 384,
            depth_dec: 4,
            heads_dec: 6,
            mlp_ratio: 4,
            grid: GridDims::new(8, 14, 14),
            num_classes: 174,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (what, d, h) in [
            ("encoder", self.d_enc, self.heads_enc),
            ("decoder", self.d_dec, self.heads_dec),
        ] {
            if d == 0 || h == 0 || d % h != 0 {
                return Err(Error::config(format!(
                    "{what} width {d} must be a positive multiple of {h} heads"
                )));
            }
        }
        if self.mlp_ratio == 0 {
            return Err(Error::config("mlp_ratio must be positive"));
        }
        if self.grid.tokens() == 0 {
            return Err(Error::config(format!("empty token grid {}", self.grid)));
        }
        Ok(())
    }
}

fn floor_even(x: usize) -> usize {
    x - x % 2
}

/// Band widths `(t′, h′, w′)` of the separable 3D sin-cos table.
pub fn pos_bands(width: usize) -> (usize, usize, usize) {
    let t = floor_even(width / 4);
    let h = floor_even(3 * width / 8);
    (t, h, width - t - h)
}

fn sincos_1d(out: &mut [f64], pos: usize) {
    let band = floor_even(out.len());
    for k in 0..band / 2 {
        let freq = 1.0 / 10000f64.powf(2.0 * k as f64 / band as f64);
        let a = pos as f64 * freq;
        out[2 * k] = a.sin();
        out[2 * k + 1] = a.cos();
    }
}

/// Fixed positional table `[T′·H′·W′ × width]`, rows in grid order. Each
/// axis gets its own band of interleaved `sin, cos` pairs.
pub fn sincos_pos_table(dims: GridDims, width: usize) -> Tensor<f64> {
    let (bt, bh, _) = pos_bands(width);
    let mut data = vec![0.0; dims.tokens() * width];
    for (i, row) in data.chunks_mut(width).enumerate() {
        let (t, h, w) = dims.coords(i);
        sincos_1d(&mut row[..bt], t);
        sincos_1d(&mut row[bt..bt + bh], h);
        sincos_1d(&mut row[bt + bh..], w);
    }
    Tensor::new(&[dims.tokens(), width], data).unwrap()
}

fn rows_of<R: Real>(table: &Tensor<f64>, indices: &[usize]) -> Tensor<R> {
    let d = table.rows_cols().1;
    let mut out = Vec::with_capacity(indices.len() * d);
    for &i in indices {
        out.extend(table.row(i).iter().map(|&v| R::lit(v)));
    }
    Tensor::new(&[indices.len(), d], out).unwrap()
}

#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub embed: LinearParams,
    pub blocks: Vec<BlockParams>,
    pub norm: LayerNormParams,
}

#[derive(Clone, Debug)]
pub struct DecoderParams {
    pub proj: LinearParams,
    pub mask_token: ParamId,
    pub blocks: Vec<BlockParams>,
    pub out: LinearParams,
}

fn init_encoder<R: Real>(
    cfg: &ModelConfig,
    store: &mut ParamStore<R>,
    rng: &mut impl Rng,
) -> Result<EncoderParams> {
    let embed = LinearParams::new(store, "encoder.embed", CUBE_DIM, cfg.d_enc, rng);
    let blocks = (0..cfg.depth_enc)
        .map(|i| {
            BlockParams::new(
                store,
                &format!("encoder.blocks.{i}"),
                cfg.d_enc,
                cfg.heads_enc,
                cfg.mlp_ratio,
                rng,
            )
        })
        .collect::<Result<_>>()?;
    let norm = LayerNormParams::new(store, "encoder.norm", cfg.d_enc);
    Ok(EncoderParams {
        embed,
        blocks,
        norm,
    })
}

/// Parameter handles plus fixed positional tables. Values live in a
/// [`ParamStore`] so the same layout serves `f32` training and `f64` checks.
#[derive(Clone, Debug)]
pub struct MaeModel {
    pub config: ModelConfig,
    pub encoder: EncoderParams,
    pub decoder: DecoderParams,
    enc_pos: Tensor<f64>,
    dec_pos: Tensor<f64>,
}

/// Handles into one forward pass.
#[derive(Clone, Debug)]
pub struct MaeOutput {
    /// `[T′·S × CUBE_DIM]` predictions in grid order.
    pub pred: Var,
    /// Encoder output over the visible tokens.
    pub encoded: Var,
    /// Decoder input after scattering and the mask token fill, before
    /// positional embedding.
    pub decoder_input: Var,
    pub visible: Vec<usize>,
    /// Ω in ascending order.
    pub masked: Vec<usize>,
}

impl MaeModel {
    pub fn init<R: Real>(
        config: &ModelConfig,
        store: &mut ParamStore<R>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let encoder = init_encoder(config, store, rng)?;
        let proj = LinearParams::new(store, "decoder.proj", config.d_enc, config.d_dec, rng);
        let mask_token = store.add(
            "decoder.mask_token",
            crate::tensor::trunc_normal(&[config.d_dec], 0.02, rng),
            false,
        );
        let blocks = (0..config.depth_dec)
            .map(|i| {
                BlockParams::new(
                    store,
                    &format!("decoder.blocks.{i}"),
                    config.d_dec,
                    config.heads_dec,
                    config.mlp_ratio,
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        let out = LinearParams::new(store, "decoder.out", config.d_dec, CUBE_DIM, rng);
        Ok(MaeModel {
            config: config.clone(),
            encoder,
            decoder: DecoderParams {
                proj,
                mask_token,
                blocks,
                out,
            },
            enc_pos: sincos_pos_table(config.grid, config.d_enc),
            dec_pos: sincos_pos_table(config.grid, config.d_dec),
        })
    }

    pub fn encoder_pos_table(&self) -> &Tensor<f64> {
        &self.enc_pos
    }

    /// Linear projection of raw cube rows to the encoder width.
    pub fn cube_embed<R: Real>(
        &self,
        tape: &mut Tape<R>,
        store: &ParamStore<R>,
        cubes: Var,
    ) -> Result<Var> {
        let w = tape.shape(cubes).last().copied().unwrap_or(0);
        if w != CUBE_DIM {
            return Err(Error::dim(format!(
                "cube rows of width {w}, expected {CUBE_DIM}"
            )));
        }
        self.encoder.embed.forward(tape, store, cubes)
    }

    /// Adds encoder positional rows for the given grid positions.
    pub fn add_encoder_pos<R: Real>(
        &self,
        tape: &mut Tape<R>,
        tokens: Var,
        positions: &[usize],
    ) -> Result<Var> {
        let pos = tape.constant(rows_of(&self.enc_pos, positions));
        tape.add(tokens, pos)
    }

    /// Encoder blocks and final norm over already-embedded tokens.
    pub fn encode<R: Real>(
        &self,
        tape: &mut Tape<R>,
        store: &ParamStore<R>,
        tokens: Var,
    ) -> Result<Var> {
        encode_with(&self.encoder, tape, store, tokens)
    }

    /// Projects encoder output to the decoder width, scatters it over the
    /// grid with the mask token in Ω, and predicts every cube.
    pub fn decode<R: Real>(
        &self,
        tape: &mut Tape<R>,
        store: &ParamStore<R>,
        encoded: Var,
        mask: &MaskMap,
    ) -> Result<(Var, Var)> {
        let n = self.config.grid.tokens();
        if !mask.matches(self.config.grid) {
            return Err(Error::dim(format!(
                "{}x{} mask for grid {}",
                mask.frames, mask.sites, self.config.grid
            )));
        }
        let visible = tape.shape(encoded)[0];
        if visible != mask.visible_count() {
            return Err(Error::dim(format!(
                "{visible} encoded tokens for a mask with {} visible",
                mask.visible_count()
            )));
        }
        let d = &self.decoder;
        let projected = d.proj.forward(tape, store, encoded)?;
        let token = tape.param(store, d.mask_token);
        let token = tape.reshape(token, &[1, self.config.d_dec])?;
        let pool = tape.concat_rows(&[projected, token])?;
        let mut next_visible = 0;
        let index: Vec<usize> = mask
            .as_slice()
            .iter()
            .map(|&masked| {
                if masked {
                    visible
                } else {
                    next_visible += 1;
                    next_visible - 1
                }
            })
            .collect();
        let full = tape.gather_rows(pool, &index)?;
        let pos = tape.constant(rows_of(&self.dec_pos, &(0..n).collect::<Vec<_>>()));
        let mut x = tape.add(full, pos)?;
        for block in &d.blocks {
            x = attention_block(tape, store, x, block)?;
        }
        Ok((d.out.forward(tape, store, x)?, full))
    }

    pub fn forward<R: Real>(
        &self,
        tape: &mut Tape<R>,
        store: &ParamStore<R>,
        grid: &CubeGrid,
        mask: &MaskMap,
    ) -> Result<MaeOutput> {
        if grid.dims != self.config.grid {
            return Err(Error::dim(format!(
                "clip grid {} for a model built for {}",
                grid.dims, self.config.grid
            )));
        }
        if !mask.matches(grid.dims) {
            return Err(Error::dim(format!(
                "{}x{} mask for grid {}",
                mask.frames, mask.sites, grid.dims
            )));
        }
        let visible = mask.visible_indices();
        let masked = mask.masked_indices();
        let mut raw = Vec::with_capacity(visible.len() * CUBE_DIM);
        for &i in &visible {
            raw.extend(grid.tokens.row(i).iter().map(|&v| R::lit(v as f64)));
        }
        let cubes = tape.constant(Tensor::new(&[visible.len(), CUBE_DIM], raw)?);
        // embedding is per-token, so embedding the gathered rows equals
        // gathering the embedded grid
        let tokens = self.cube_embed(tape, store, cubes)?;
        let tokens = self.add_encoder_pos(tape, tokens, &visible)?;
        let encoded = self.encode(tape, store, tokens)?;
        let (pred, decoder_input) = self.decode(tape, store, encoded, mask)?;
        Ok(MaeOutput {
            pred,
            encoded,
            decoder_input,
            visible,
            masked,
        })
    }
}

fn encode_with<R: Real>(
    enc: &EncoderParams,
    tape: &mut Tape<R>,
    store: &ParamStore<R>,
    tokens: Var,
) -> Result<Var> {
    if tape.shape(tokens).first().copied().unwrap_or(0) == 0 {
        return Err(Error::Contract("encoder called with no visible tokens".into()));
    }
    let mut x = tokens;
    for block in &enc.blocks {
        x = attention_block(tape, store, x, block)?;
    }
    enc.norm.forward(tape, store, x)
}

/// Encoder plus mean-pool, layer-norm and linear classification head.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub config: ModelConfig,
    pub encoder: EncoderParams,
    pub head_norm: LayerNormParams,
    pub head: LinearParams,
    pos: Tensor<f64>,
}

impl Classifier {
    /// Fresh encoder and head.
    pub fn init<R: Real>(
        config: &ModelConfig,
        store: &mut ParamStore<R>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        if config.num_classes < 2 {
            return Err(Error::config(format!(
                "classifier needs at least 2 classes, got {}",
                config.num_classes
            )));
        }
        let encoder = init_encoder(config, store, rng)?;
        let head_norm = LayerNormParams::new(store, "head.norm", config.d_enc);
        let head = LinearParams::new(store, "head.linear", config.d_enc, config.num_classes, rng);
        Ok(Classifier {
            config: config.clone(),
            encoder,
            head_norm,
            head,
            pos: sincos_pos_table(config.grid, config.d_enc),
        })
    }

    /// Same as [`Classifier::init`], then copies every `encoder.*` tensor
    /// from `pretrained`. The decoder is discarded.
    pub fn from_pretrained<R: Real>(
        config: &ModelConfig,
        pretrained: &ParamStore<R>,
        store: &mut ParamStore<R>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let clf = Self::init(config, store, rng)?;
        for id in store.ids().collect::<Vec<_>>() {
            let name = store.get(id).name.clone();
            if !name.starts_with("encoder.") {
                continue;
            }
            let src = pretrained.find(&name).ok_or_else(|| {
                Error::config(format!("pretrained parameters lack `{name}`"))
            })?;
            let value = pretrained.value(src);
            if value.shape() != store.value(id).shape() {
                return Err(Error::config(format!(
                    "`{name}` is {:?} in the checkpoint but {:?} in the model",
                    value.shape(),
                    store.value(id).shape()
                )));
            }
            store.get_mut(id).value = value.clone();
        }
        Ok(clf)
    }

    /// Mean-pooled encoder features `[1×D]` of the full (unmasked) grid.
    pub fn features<R: Real>(
        &self,
        tape: &mut Tape<R>,
        store: &ParamStore<R>,
        grid: &CubeGrid,
    ) -> Result<Var> {
        if grid.dims != self.config.grid {
            return Err(Error::config(format!(
                "clip grid {} for a model built for {}",
                grid.dims, self.config.grid
            )));
        }
        let cubes = tape.constant(grid.tokens.cast());
        let x = self.encoder.embed.forward(tape, store, cubes)?;
        let pos = tape.constant(self.pos.cast());
        let x = tape.add(x, pos)?;
        self.pooled(tape, store, x)
    }

    /// Encoder and mean-pool over embedded tokens supplied by the caller.
    pub fn pooled<R: Real>(
        &self,
        tape: &mut Tape<R>,
        store: &ParamStore<R>,
        tokens: Var,
    ) -> Result<Var> {
        let x = encode_with(&self.encoder, tape, store, tokens)?;
        Ok(tape.mean_rows(x))
    }

    pub fn head<R: Real>(
        &self,
        tape: &mut Tape<R>,
        store: &ParamStore<R>,
        features: Var,
    ) -> Result<Var> {
        let h = self.head_norm.forward(tape, store, features)?;
        self.head.forward(tape, store, h)
    }

    /// Logits `[1×num_classes]`.
    pub fn classify<R: Real>(
        &self,
        tape: &mut Tape<R>,
        store: &ParamStore<R>,
        grid: &CubeGrid,
    ) -> Result<Var> {
        let f = self.features(tape, store, grid)?;
        self.head(tape, store, f)
    }

    /// Layer index for layer-wise lr decay: embedding 0, block `i` is `i+1`,
    /// final norm and head `depth+1`.
    pub fn layer_of(&self, name: &str) -> usize {
        let depth = self.config.depth_enc;
        if name.starts_with("encoder.embed") {
            0
        } else if let Some(rest) = name.strip_prefix("encoder.blocks.") {
            rest.split('.')
                .next()
                .and_then(|i| i.parse::<usize>().ok())
                .map_or(depth + 1, |i| i + 1)
        } else {
            depth + 1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::{tube_mask, MaskStrategy};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_config() -> ModelConfig {
        ModelConfig {
            d_enc: 8,
            depth_enc: 1,
            heads_enc: 2,
            d_dec: 4,
            depth_dec: 1,
            heads_dec: 1,
            mlp_ratio: 2,
            grid: GridDims::new(2, 1, 2),
            num_classes: 3,
        }
    }

    fn random_grid(dims: GridDims, seed: u64) -> CubeGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..dims.tokens() * CUBE_DIM).map(|_| rng.gen::<f32>()).collect();
        CubeGrid::new(Tensor::new(&[dims.tokens(), CUBE_DIM], data).unwrap(), dims).unwrap()
    }

    #[test]
    fn pos_table_row_zero_alternates() {
        let t = sincos_pos_table(GridDims::new(8, 14, 14), 768);
        assert_eq!(pos_bands(768), (192, 288, 288));
        for (j, &v) in t.row(0).iter().enumerate() {
            assert_eq!(v, if j % 2 == 0 { 0.0 } else { 1.0 });
        }
    }

    #[test]
    fn pos_table_injective() {
        let dims = GridDims::new(8, 4, 4);
        for width in [32, 64] {
            let t = sincos_pos_table(dims, width);
            for i in 0..dims.tokens() {
                for j in 0..i {
                    assert!(t.row(i) != t.row(j), "rows {i} and {j} collide at width {width}");
                }
            }
        }
    }

    #[test]
    fn pos_add_is_linear() {
        let mut store = ParamStore::<f64>::new();
        let m = MaeModel::init(&toy_config(), &mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[4, 8]));
        let once = m.add_encoder_pos(&mut tape, x, &[0, 1, 2, 3]).unwrap();
        let twice = m.add_encoder_pos(&mut tape, once, &[0, 1, 2, 3]).unwrap();
        let expect: Vec<f64> = tape.value(once).data().iter().map(|v| 2.0 * v).collect();
        assert_eq!(tape.value(twice).data(), &expect[..]);
    }

    #[test]
    fn embed_width_checked() {
        let mut store = ParamStore::<f32>::new();
        let m = MaeModel::init(&toy_config(), &mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 100]));
        assert!(matches!(m.cube_embed(&mut tape, &store, x), Err(Error::Dimension(_))));
    }

    #[test]
    fn zero_grid_zero_bias_embeds_to_zero() {
        let mut store = ParamStore::<f32>::new();
        let m = MaeModel::init(&toy_config(), &mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[4, CUBE_DIM]));
        let y = m.cube_embed(&mut tape, &store, x).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_shapes_and_scatter() {
        let cfg = ModelConfig {
            grid: GridDims::new(2, 2, 2),
            ..toy_config()
        };
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = MaeModel::init(&cfg, &mut store, &mut rng).unwrap();
        let grid = random_grid(cfg.grid, 2);
        let mask = tube_mask(2, 4, 0.5, &mut rng).unwrap();
        let mut tape = Tape::new();
        let out = m.forward(&mut tape, &store, &grid, &mask).unwrap();
        assert_eq!(tape.shape(out.pred), &[8, CUBE_DIM]);
        assert_eq!(tape.shape(out.encoded), &[4, 8]);
        let token = store.value(m.decoder.mask_token).data().to_vec();
        let dec_in = tape.value(out.decoder_input);
        for i in 0..8 {
            let row = dec_in.row(i);
            if out.masked.contains(&i) {
                assert_eq!(row, &token[..]);
            } else {
                assert_ne!(row, &token[..]);
            }
        }
    }

    #[test]
    fn zero_params_predict_output_bias() {
        let cfg = toy_config();
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = MaeModel::init(&cfg, &mut store, &mut rng).unwrap();
        let bias: Vec<f32> = (0..CUBE_DIM).map(|i| i as f32 * 0.001).collect();
        for p in store.iter_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        store.get_mut(m.decoder.out.bias).value.data_mut().copy_from_slice(&bias);
        let grid = random_grid(cfg.grid, 3);
        let mask = tube_mask(2, 2, 0.5, &mut rng).unwrap();
        let mut tape = Tape::new();
        let out = m.forward(&mut tape, &store, &grid, &mask).unwrap();
        for row in tape.value(out.pred).data().chunks(CUBE_DIM) {
            assert_eq!(row, &bias[..]);
        }
    }

    #[test]
    fn decode_rejects_inconsistent_mask() {
        let cfg = toy_config();
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = MaeModel::init(&cfg, &mut store, &mut rng).unwrap();
        let mask = MaskMap::from_bools(2, 2, 0.5, MaskStrategy::Random, vec![true, false, false, true])
            .unwrap();
        let mut tape = Tape::new();
        let enc = tape.constant(Tensor::zeros(&[3, 8]));
        assert!(matches!(m.decode(&mut tape, &store, enc, &mask), Err(Error::Dimension(_))));
    }

    #[test]
    fn classifier_needs_two_classes() {
        let cfg = ModelConfig {
            num_classes: 1,
            ..toy_config()
        };
        let mut store = ParamStore::<f32>::new();
        let r = Classifier::init(&cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn zero_head_logits_equal_bias() {
        let cfg = toy_config();
        let mut store = ParamStore::<f32>::new();
        let clf = Classifier::init(&cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        store.get_mut(clf.head.weight).value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        store.get_mut(clf.head.bias).value.data_mut().copy_from_slice(&[0.5, -1.0, 2.0]);
        let mut tape = Tape::new();
        let logits = clf.classify(&mut tape, &store, &random_grid(cfg.grid, 1)).unwrap();
        assert_eq!(tape.shape(logits), &[1, 3]);
        assert_eq!(tape.value(logits).data(), &[0.5, -1.0, 2.0]);
    }

    #[test]
    fn layer_indices() {
        let cfg = toy_config();
        let mut store = ParamStore::<f32>::new();
        let clf = Classifier::init(&cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(clf.layer_of("encoder.embed.weight"), 0);
        assert_eq!(clf.layer_of("encoder.blocks.0.qkv.weight"), 1);
        assert_eq!(clf.layer_of("encoder.norm.gamma"), 2);
        assert_eq!(clf.layer_of("head.linear.bias"), 2);
    }
}
