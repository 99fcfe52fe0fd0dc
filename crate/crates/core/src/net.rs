//! Watermarking network: encoder, embedder, invariance layer, extractor and
//! decoder, all built from the inception-residual [`ConvBlock`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Float, ParamId, ParamSet, ParamStore, Tape, Tensor, Var};

/// Filters per convolution path inside a block.
pub const PATH_FILTERS: usize = 32;
/// Channels of the concatenated path features (B₁).
pub const CONCAT_CHANNELS: usize = 3 * PATH_FILTERS;
/// Channel counts of the encoder stages (and, reversed, the decoder).
pub const ENCODER_CHANNELS: [usize; 2] = [24, 48];
/// Depth-to-space factor between the 32×32×48 code and the 128×128×3 image.
pub const SPACE_FACTOR: usize = 4;
pub const DEFAULT_REDUNDANCY: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Width N of the over-complete invariance space.
    pub redundancy: usize,
    /// Side of the square binary watermark.
    pub watermark_size: usize,
    /// Whether the invariance layer is present. Without it the extractor
    /// reads the marked image directly.
    pub invariance: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            redundancy: DEFAULT_REDUNDANCY,
            watermark_size: 32,
            invariance: true,
        }
    }
}

impl ModelConfig {
    /// Configuration of the ablation model with the invariance layer removed.
    pub fn without_invariance() -> Self {
        ModelConfig {
            redundancy: 3,
            invariance: false,
            ..Self::default()
        }
    }

    pub fn cover_size(&self) -> usize {
        self.watermark_size * SPACE_FACTOR
    }

    pub fn cover_shape(&self) -> [usize; 3] {
        [self.cover_size(), self.cover_size(), 3]
    }

    pub fn watermark_shape(&self) -> [usize; 3] {
        [self.watermark_size, self.watermark_size, 1]
    }

    pub fn code_shape(&self) -> [usize; 3] {
        let c = 3 * SPACE_FACTOR * SPACE_FACTOR;
        [self.watermark_size, self.watermark_size, c]
    }

    pub fn validate(&self) -> Result<()> {
        if self.redundancy < 3 {
            return Err(Error::invalid(format!(
                "redundancy N must be at least 3, got {}",
                self.redundancy
            )));
        }
        if !self.invariance && self.redundancy != 3 {
            return Err(Error::invalid("a model without invariance layer must use N = 3"));
        }
        if self.watermark_size == 0 {
            return Err(Error::invalid("watermark size must be positive"));
        }
        Ok(())
    }
}

/// The five trainable parameter groups θ₁…θ₅.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Component {
    Encoder,
    Embedder,
    Extractor,
    Decoder,
    Invariance,
}

impl Component {
    pub const ALL: [Component; 5] = [
        Component::Encoder,
        Component::Embedder,
        Component::Extractor,
        Component::Decoder,
        Component::Invariance,
    ];

    pub fn prefix(self) -> &'static str {
        match self {
            Component::Encoder => "encoder",
            Component::Embedder => "embedder",
            Component::Extractor => "extractor",
            Component::Decoder => "decoder",
            Component::Invariance => "invariance",
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// Inception-residual block: 1×1, 3×3 and two stacked 3×3 paths of 32
/// filters each, concatenated to 96 channels, fused back by a 1×1
/// convolution and added to the input.
#[derive(Clone, Copy, Debug)]
pub struct ConvBlock {
    pub channels: usize,
    pub path1: ConvLayer,
    pub path3: ConvLayer,
    pub path5a: ConvLayer,
    pub path5b: ConvLayer,
    pub fuse: ConvLayer,
}

/// Block output plus the intermediates used by the correlation loss.
#[derive(Clone, Copy, Debug)]
pub struct BlockOutput {
    pub y: Var,
    /// F_w×F_d×96 concatenation of the three paths.
    pub b1: Var,
    /// F_w×F_d×F_c block output.
    pub b2: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct InvarianceLayer {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Debug)]
struct Layout {
    enc_lift1: ConvLayer,
    enc_block1: ConvBlock,
    enc_lift2: ConvLayer,
    enc_block2: ConvBlock,
    emb_block_b: ConvBlock,
    emb_block_mix: ConvBlock,
    emb_out: ConvLayer,
    invariance: Option<InvarianceLayer>,
    ext_proj: ConvLayer,
    ext_block1: ConvBlock,
    ext_block2: ConvBlock,
    dec_block1: ConvBlock,
    dec_lower: ConvLayer,
    dec_block2: ConvBlock,
    dec_out: ConvLayer,
}

struct Builder<'a, T: Float> {
    store: &'a mut ParamStore<T>,
    owners: &'a mut Vec<Component>,
    rng: &'a mut ChaCha8Rng,
}

impl<T: Float> Builder<'_, T> {
    fn uniform(&mut self, shape: &[usize], fan_in: usize) -> Tensor<T> {
        let bound = (6.0 / fan_in as f64).sqrt();
        Tensor::from_fn(shape, |_| T::from_f64_lossy(self.rng.random_range(-bound..bound)))
    }

    fn add(&mut self, owner: Component, name: String, value: Tensor<T>) -> ParamId {
        self.owners.push(owner);
        self.store.add(name, value)
    }

    fn conv(&mut self, owner: Component, name: &str, k: usize, cin: usize, cout: usize) -> ConvLayer {
        let w = self.uniform(&[k, k, cin, cout], k * k * cin);
        let weight = self.add(owner, format!("{name}.weight"), w);
        let bias = self.add(owner, format!("{name}.bias"), Tensor::zeros(&[cout]));
        ConvLayer { weight, bias }
    }

    /// 1×1 layer starting at zero, so a fresh block is the identity map.
    fn zero_conv(&mut self, owner: Component, name: &str, cin: usize, cout: usize) -> ConvLayer {
        let weight = self.add(owner, format!("{name}.weight"), Tensor::zeros(&[1, 1, cin, cout]));
        let bias = self.add(owner, format!("{name}.bias"), Tensor::zeros(&[cout]));
        ConvLayer { weight, bias }
    }

    fn block(&mut self, owner: Component, name: &str, channels: usize) -> ConvBlock {
        ConvBlock {
            channels,
            path1: self.conv(owner, &format!("{name}.path1"), 1, channels, PATH_FILTERS),
            path3: self.conv(owner, &format!("{name}.path3"), 3, channels, PATH_FILTERS),
            path5a: self.conv(owner, &format!("{name}.path5a"), 3, channels, PATH_FILTERS),
            path5b: self.conv(owner, &format!("{name}.path5b"), 3, PATH_FILTERS, PATH_FILTERS),
            fuse: self.zero_conv(owner, &format!("{name}.fuse"), CONCAT_CHANNELS, channels),
        }
    }
}

/// Parameters θ₁…θ₅ and the architecture that binds them.
#[derive(Clone, Debug)]
pub struct WatermarkingModel<T = f32> {
    config: ModelConfig,
    store: ParamStore<T>,
    owners: Vec<Component>,
    layout: Layout,
}

/// Every intermediate of a full forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub watermark: Var,
    pub cover: Var,
    /// 128×128×3 watermark code w_f.
    pub code: Var,
    pub marked: Var,
    /// Invariance activations t = h (absent in the ablation model).
    pub transformed: Option<Var>,
    /// 32×32×48 recovered code w_f*.
    pub code_star: Var,
    pub extracted: Var,
    pub block_b_code: BlockOutput,
    pub block_b_marked: BlockOutput,
}

impl<T: Float> WatermarkingModel<T> {
    /// Fresh model with seeded He-uniform weights and zero biases.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut owners = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            store: &mut store,
            owners: &mut owners,
            rng: &mut rng,
        };
        let [c1, c2] = ENCODER_CHANNELS;
        let code_c = config.code_shape()[2];
        let n = config.redundancy;
        use Component::*;
        let layout = Layout {
            enc_lift1: b.conv(Encoder, "encoder.lift1", 3, 1, c1),
            enc_block1: b.block(Encoder, "encoder.block1", c1),
            enc_lift2: b.conv(Encoder, "encoder.lift2", 3, c1, c2),
            enc_block2: b.block(Encoder, "encoder.block2", c2),
            emb_block_b: b.block(Embedder, "embedder.block_b", 3),
            emb_block_mix: b.block(Embedder, "embedder.block_mix", 6),
            emb_out: b.conv(Embedder, "embedder.out", 1, 6, 3),
            invariance: config.invariance.then(|| {
                let w = b.uniform(&[3, n], 3);
                InvarianceLayer {
                    weight: b.add(Invariance, "invariance.weight".into(), w),
                    bias: b.add(Invariance, "invariance.bias".into(), Tensor::zeros(&[n])),
                }
            }),
            ext_proj: b.conv(Extractor, "extractor.proj", 1, n, 3),
            ext_block1: b.block(Extractor, "extractor.block1", 3),
            ext_block2: b.block(Extractor, "extractor.block2", 3),
            dec_block1: b.block(Decoder, "decoder.block1", code_c),
            dec_lower: b.conv(Decoder, "decoder.lower", 3, code_c, c1),
            dec_block2: b.block(Decoder, "decoder.block2", c1),
            dec_out: b.conv(Decoder, "decoder.out", 3, c1, 1),
        };
        debug_assert_eq!(code_c, c2);
        Ok(WatermarkingModel {
            config,
            store,
            owners,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn owner(&self, id: ParamId) -> Component {
        self.owners[id.index()]
    }

    /// All parameters belonging to any of `components`.
    pub fn param_set(&self, components: &[Component]) -> ParamSet {
        ParamSet::from_ids(
            self.store.len(),
            self.store.ids().filter(|&id| components.contains(&self.owner(id))),
        )
    }

    pub fn invariance(&self) -> Option<InvarianceLayer> {
        self.layout.invariance
    }

    pub fn block_b(&self) -> ConvBlock {
        self.layout.emb_block_b
    }

    pub fn cast<U: Float>(&self) -> WatermarkingModel<U> {
        WatermarkingModel {
            config: self.config,
            store: self.store.cast(),
            owners: self.owners.clone(),
            layout: self.layout.clone(),
        }
    }

    /// Sets every parameter to zero.
    pub fn zero_all(&mut self) {
        for id in self.store.ids().collect::<Vec<_>>() {
            for v in self.store.value_mut(id).data_mut() {
                *v = T::zero();
            }
        }
    }

    fn layer(&self, tape: &mut Tape<T>, x: Var, layer: ConvLayer) -> Result<Var> {
        let w = tape.param(&self.store, layer.weight);
        let b = tape.param(&self.store, layer.bias);
        tape.conv2d(x, w, b)
    }

    fn relu_layer(&self, tape: &mut Tape<T>, x: Var, layer: ConvLayer) -> Result<Var> {
        let y = self.layer(tape, x, layer)?;
        Ok(tape.relu(y))
    }

    pub fn conv_block_forward(&self, tape: &mut Tape<T>, x: Var, block: &ConvBlock) -> Result<BlockOutput> {
        let (_, _, c) = tape.value(x).hwc()?;
        if c != block.channels {
            return Err(Error::shape(
                "conv_block_forward",
                tape.shape(x),
                &[block.channels],
            ));
        }
        let p1 = self.relu_layer(tape, x, block.path1)?;
        let p3 = self.relu_layer(tape, x, block.path3)?;
        let p5 = self.relu_layer(tape, x, block.path5a)?;
        let p5 = self.relu_layer(tape, p5, block.path5b)?;
        let b1 = tape.concat_channels(p1, p3)?;
        let b1 = tape.concat_channels(b1, p5)?;
        let fused = self.layer(tape, b1, block.fuse)?;
        let y = tape.add(x, fused)?;
        Ok(BlockOutput { y, b1, b2: y })
    }

    fn expect_shape(&self, tape: &Tape<T>, v: Var, shape: &[usize], op: &'static str) -> Result<()> {
        if tape.shape(v) != shape {
            return Err(Error::shape(op, tape.shape(v), shape));
        }
        Ok(())
    }

    /// μ: 32×32×1 watermark → 128×128×3 code.
    pub fn encode(&self, tape: &mut Tape<T>, w: Var) -> Result<Var> {
        self.expect_shape(tape, w, &self.config.watermark_shape(), "encode")?;
        let l = &self.layout;
        let x = self.relu_layer(tape, w, l.enc_lift1)?;
        let x = self.conv_block_forward(tape, x, &l.enc_block1)?.y;
        let x = self.relu_layer(tape, x, l.enc_lift2)?;
        let x = self.conv_block_forward(tape, x, &l.enc_block2)?.y;
        tape.depth_to_space(x, SPACE_FACTOR)
    }

    /// σ: (code, cover) → marked image, plus the block-B intermediates on the code.
    pub fn embed(&self, tape: &mut Tape<T>, code: Var, cover: Var) -> Result<(Var, BlockOutput)> {
        let shape = self.config.cover_shape();
        self.expect_shape(tape, code, &shape, "embed")?;
        self.expect_shape(tape, cover, &shape, "embed")?;
        let l = &self.layout;
        let on_code = self.conv_block_forward(tape, code, &l.emb_block_b)?;
        let mixed = tape.concat_channels(on_code.y, cover)?;
        let mixed = self.conv_block_forward(tape, mixed, &l.emb_block_mix)?.y;
        let logits = self.layer(tape, mixed, l.emb_out)?;
        Ok((tape.sigmoid(logits), on_code))
    }

    /// τ: marked image → tanh(per-pixel dense map) with N channels.
    pub fn invariance_forward(&self, tape: &mut Tape<T>, marked: Var) -> Result<Var> {
        let inv = self
            .layout
            .invariance
            .ok_or_else(|| Error::invalid("model has no invariance layer"))?;
        self.expect_shape(tape, marked, &self.config.cover_shape(), "invariance_forward")?;
        let w = tape.param(&self.store, inv.weight);
        let b = tape.param(&self.store, inv.bias);
        let pre = tape.dense_channels(marked, w, b)?;
        Ok(tape.tanh(pre))
    }

    /// φ: N-channel transformed image → 32×32×48 code.
    pub fn extract(&self, tape: &mut Tape<T>, t: Var) -> Result<Var> {
        let s = self.config.cover_size();
        self.expect_shape(tape, t, &[s, s, self.config.redundancy], "extract")?;
        let l = &self.layout;
        let x = self.relu_layer(tape, t, l.ext_proj)?;
        let x = self.conv_block_forward(tape, x, &l.ext_block1)?.y;
        let x = self.conv_block_forward(tape, x, &l.ext_block2)?.y;
        tape.space_to_depth(x, SPACE_FACTOR)
    }

    /// γ: 32×32×48 code → 32×32×1 watermark estimate in (0, 1).
    pub fn decode(&self, tape: &mut Tape<T>, code: Var) -> Result<Var> {
        self.expect_shape(tape, code, &self.config.code_shape(), "decode")?;
        let l = &self.layout;
        let x = self.conv_block_forward(tape, code, &l.dec_block1)?.y;
        let x = self.relu_layer(tape, x, l.dec_lower)?;
        let x = self.conv_block_forward(tape, x, &l.dec_block2)?.y;
        let x = self.layer(tape, x, l.dec_out)?;
        Ok(tape.sigmoid(x))
    }

    /// Extraction path only: marked (possibly attacked) image → watermark estimate.
    pub fn extract_path(&self, tape: &mut Tape<T>, marked: Var) -> Result<(Option<Var>, Var, Var)> {
        let t = if self.config.invariance {
            Some(self.invariance_forward(tape, marked)?)
        } else {
            None
        };
        let code_star = self.extract(tape, t.unwrap_or(marked))?;
        let extracted = self.decode(tape, code_star)?;
        Ok((t, code_star, extracted))
    }

    pub fn forward_full(&self, tape: &mut Tape<T>, watermark: &Tensor<T>, cover: &Tensor<T>) -> Result<Forward> {
        let w = tape.input(watermark.clone());
        let c = tape.input(cover.clone());
        let code = self.encode(tape, w)?;
        let (marked, block_b_code) = self.embed(tape, code, c)?;
        let block_b_marked = self.conv_block_forward(tape, marked, &self.layout.emb_block_b)?;
        let (transformed, code_star, extracted) = self.extract_path(tape, marked)?;
        Ok(Forward {
            watermark: w,
            cover: c,
            code,
            marked,
            transformed,
            code_star,
            extracted,
            block_b_code,
            block_b_marked,
        })
    }

    /// Marked image for a (watermark, cover) pair.
    pub fn embed_image(&self, watermark: &Tensor<T>, cover: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let w = tape.input(watermark.clone());
        let c = tape.input(cover.clone());
        let code = self.encode(&mut tape, w)?;
        let (marked, _) = self.embed(&mut tape, code, c)?;
        Ok(tape.value(marked).clone())
    }

    /// Watermark estimate in (0, 1) recovered from a marked image alone.
    pub fn extract_image(&self, marked: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let m = tape.input(marked.clone());
        let (_, _, w) = self.extract_path(&mut tape, m)?;
        Ok(tape.value(w).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(invariance: bool) -> ModelConfig {
        ModelConfig {
            watermark_size: 8,
            ..if invariance { ModelConfig::default() } else { ModelConfig::without_invariance() }
        }
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        assert!(ModelConfig::without_invariance().validate().is_ok());
        let bad = [
            ModelConfig { redundancy: 2, ..ModelConfig::default() },
            ModelConfig { redundancy: 12, ..ModelConfig::without_invariance() },
            ModelConfig { watermark_size: 0, ..ModelConfig::default() },
        ];
        for cfg in bad {
            assert!(WatermarkingModel::<f32>::new(cfg, 0).is_err(), "{cfg:?}");
        }
        assert_eq!(ModelConfig::default().code_shape(), [32, 32, 48]);
        assert_eq!(ModelConfig::default().cover_shape(), [128, 128, 3]);
    }

    #[test]
    fn forward_shapes() {
        let cfg = small(true);
        let model = WatermarkingModel::<f32>::new(cfg, 1).unwrap();
        let mut tape = Tape::new();
        let w = Tensor::full(&cfg.watermark_shape(), 1.0);
        let c = Tensor::full(&cfg.cover_shape(), 0.5);
        let fwd = model.forward_full(&mut tape, &w, &c).unwrap();
        assert_eq!(tape.shape(fwd.code), &[32, 32, 3]);
        assert_eq!(tape.shape(fwd.marked), &[32, 32, 3]);
        assert_eq!(tape.shape(fwd.transformed.unwrap()), &[32, 32, 12]);
        assert_eq!(tape.shape(fwd.code_star), &[8, 8, 48]);
        assert_eq!(tape.shape(fwd.extracted), &[8, 8, 1]);
        assert_eq!(tape.shape(fwd.block_b_code.b1), &[32, 32, CONCAT_CHANNELS]);
        let m = tape.value(fwd.marked);
        assert!(m.data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(tape.value(fwd.transformed.unwrap()).data().iter().all(|&v| v.abs() < 1.0));
        assert_eq!(model.embed_image(&w, &c).unwrap(), *m);
        assert_eq!(model.extract_image(m).unwrap(), *tape.value(fwd.extracted));
    }

    #[test]
    fn ablation_extracts_from_the_image() {
        let cfg = small(false);
        let model = WatermarkingModel::<f32>::new(cfg, 1).unwrap();
        assert!(model.invariance().is_none());
        assert!(model.params().ids().all(|id| model.owner(id) != Component::Invariance));
        let mut tape = Tape::new();
        let m = tape.input(Tensor::full(&cfg.cover_shape(), 0.5));
        let (t, code, w) = model.extract_path(&mut tape, m).unwrap();
        assert!(t.is_none());
        assert_eq!(tape.shape(code), &[8, 8, 48]);
        assert_eq!(tape.shape(w), &[8, 8, 1]);
        assert!(model.invariance_forward(&mut tape, m).is_err());
    }

    #[test]
    fn blocks_start_as_identity() {
        let model = WatermarkingModel::<f32>::new(small(true), 5).unwrap();
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_fn(&[4, 4, 3], |i| (i as f32 * 0.37).sin()));
        let out = model.conv_block_forward(&mut tape, x, &model.block_b()).unwrap();
        assert_eq!(tape.value(out.y), tape.value(x));
        let wrong = tape.input(Tensor::zeros(&[4, 4, 5]));
        assert!(model.conv_block_forward(&mut tape, wrong, &model.block_b()).is_err());
    }

    #[test]
    fn initialization_is_seeded() {
        let a = WatermarkingModel::<f32>::new(ModelConfig::default(), 9).unwrap();
        let b = WatermarkingModel::<f32>::new(ModelConfig::default(), 9).unwrap();
        let c = WatermarkingModel::<f32>::new(ModelConfig::default(), 10).unwrap();
        let id = a.params().find("encoder.lift1.weight").unwrap();
        assert_eq!(a.params().value(id), b.params().value(id));
        assert_ne!(a.params().value(id), c.params().value(id));
        let inv = a.invariance().unwrap();
        assert_eq!(a.params().value(inv.weight).shape(), &[3, 12]);
        assert!(a.params().value(inv.bias).data().iter().all(|&v| v == 0.0));
        for comp in Component::ALL {
            assert!(a.params().ids().any(|id| a.owner(id) == comp), "{comp:?}");
            assert!(a.params().ids().filter(|&id| a.owner(id) == comp).all(|id| a.params().name(id).starts_with(comp.prefix())));
        }
    }

    #[test]
    fn wrong_input_shapes_are_rejected() {
        let model = WatermarkingModel::<f32>::new(small(true), 1).unwrap();
        let mut tape = Tape::new();
        let w = Tensor::zeros(&[9, 9, 1]);
        let c = Tensor::zeros(&[32, 32, 3]);
        assert!(model.forward_full(&mut tape, &w, &c).is_err());
        assert!(model.extract_image(&Tensor::zeros(&[31, 32, 3])).is_err());
    }
}
