//! The three networks: generator G, conditional discriminator D, and the
//! frozen cascade feature extractor Φ.
//!
//! G is a residual encoder–decoder: a stride-1 7×7 stem plus two stride-2
//! 4×4 convolutions (so two deconvolutions can restore the resolution),
//! a stack of residual blocks at quarter resolution, two 4×4 stride-2
//! deconvolutions with U-Net-style channel-concatenation skips from the
//! matching encoder stages, and a 7×7 RGB head squashed by Tanh. Encoder
//! activations are LeakyReLU(0.2); decoder activations are ReLU.
//!
//! D is a patch classifier over `concat(condition, image)`: `layers` 4×4
//! stride-2 convolutions (BatchNorm on all but the first, LeakyReLU 0.2),
//! then a stride-1 4×4 "same" convolution to one channel and a sigmoid.
//! A stride-1 even kernel cannot be padded symmetrically, so the final
//! layer pads (top 1, bottom 2, left 1, right 2) — total k−1 = 3 — keeping
//! the patch grid at the last feature resolution (4×4 from a 64×64 input
//! with 4 layers). The scalar score is the mean over every grid cell.
//!
//! Φ mirrors the first five 3×3 convolution layers of a VGG-style stack
//! (pool after levels 2 and 4) and is never trained: leasing it installs
//! constant leaves, so gradients flow *through* it to the image but no
//! weight gradient exists. Weights come from a seeded He-scaled init by
//! default or from a checkpoint-format file.

use std::cell::Cell;
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::nn::{
    self, BatchNorm2d, BatchNormVars, BnMode, Conv2d, Conv2dVars, ConvTranspose2d,
    ConvTranspose2dVars, ResBlock, ResBlockVars,
};
use crate::ops;
use crate::rng::{derive_seed, Rng};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f32 = 0.2;

// ---------------------------------------------------------------------------
// Configs
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    /// One-hot class channels plus instance channels.
    pub input_channels: usize,
    pub base_width: usize,
    pub num_res_blocks: usize,
    pub output_channels: usize,
    pub image_size: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            input_channels: 5,
            base_width: 64,
            num_res_blocks: 9,
            output_channels: 3,
            image_size: 256,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size % 4 != 0 || self.image_size == 0 {
            return Err(Error::config(format!(
                "image_size must be a positive multiple of 4 (two halvings), got {}",
                self.image_size
            )));
        }
        if self.num_res_blocks < 1 {
            return Err(Error::config("num_res_blocks must be >= 1"));
        }
        if self.input_channels == 0 || self.base_width == 0 || self.output_channels == 0 {
            return Err(Error::config("generator channel counts must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorConfig {
    /// Channel count of the condition tensor (== generator input channels).
    pub condition_channels: usize,
    pub image_channels: usize,
    pub layers: usize,
    pub base_width: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            condition_channels: 5,
            image_channels: 3,
            layers: 4,
            base_width: 64,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers < 1 {
            return Err(Error::config("discriminator needs at least 1 layer"));
        }
        if self.condition_channels == 0 || self.image_channels == 0 || self.base_width == 0 {
            return Err(Error::config("discriminator channel counts must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CascadeNetConfig {
    pub widths: Vec<usize>,
    pub seed: u64,
}

impl Default for CascadeNetConfig {
    fn default() -> Self {
        CascadeNetConfig {
            widths: vec![64, 64, 128, 128, 256],
            seed: 0,
        }
    }
}

impl CascadeNetConfig {
    pub fn num_levels(&self) -> usize {
        self.widths.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.iter().any(|&w| w == 0) {
            return Err(Error::config("cascade widths must be non-empty and positive"));
        }
        Ok(())
    }
}

/// Sum of element counts over learnable tensors.
pub fn count_parameters<'a>(tensors: impl IntoIterator<Item = &'a Tensor>) -> usize {
    tensors.into_iter().map(|t| t.numel()).sum()
}

// ---------------------------------------------------------------------------
// Generator
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct Generator {
    pub cfg: GeneratorConfig,
    stem: Conv2d,
    stem_bn: BatchNorm2d,
    down1: Conv2d,
    down1_bn: BatchNorm2d,
    down2: Conv2d,
    down2_bn: BatchNorm2d,
    res: Vec<ResBlock>,
    up1: ConvTranspose2d,
    up1_bn: BatchNorm2d,
    up2: ConvTranspose2d,
    up2_bn: BatchNorm2d,
    head: Conv2d,
}

impl Generator {
    pub fn new(cfg: GeneratorConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.base_width;
        Ok(Generator {
            stem: Conv2d::new(cfg.input_channels, w, 7, 1, 3, rng),
            stem_bn: BatchNorm2d::new(w, rng),
            down1: Conv2d::new(w, 2 * w, 4, 2, 1, rng),
            down1_bn: BatchNorm2d::new(2 * w, rng),
            down2: Conv2d::new(2 * w, 4 * w, 4, 2, 1, rng),
            down2_bn: BatchNorm2d::new(4 * w, rng),
            res: (0..cfg.num_res_blocks).map(|_| ResBlock::new(4 * w, rng)).collect(),
            up1: ConvTranspose2d::new(4 * w, 2 * w, 4, 2, 1, rng),
            up1_bn: BatchNorm2d::new(2 * w, rng),
            // Decoder inputs carry the skip concat: 2w (up1) + 2w (down1).
            up2: ConvTranspose2d::new(4 * w, w, 4, 2, 1, rng),
            up2_bn: BatchNorm2d::new(w, rng),
            // Head sees w (up2) + w (stem).
            head: Conv2d::new(2 * w, cfg.output_channels, 7, 1, 3, rng),
            cfg,
        })
    }

    pub fn lease<'a>(&'a self, tape: &mut Tape, trainable: bool) -> GeneratorVars<'a> {
        GeneratorVars {
            stem: self.stem.lease(tape, trainable),
            stem_bn: self.stem_bn.lease(tape, trainable),
            down1: self.down1.lease(tape, trainable),
            down1_bn: self.down1_bn.lease(tape, trainable),
            down2: self.down2.lease(tape, trainable),
            down2_bn: self.down2_bn.lease(tape, trainable),
            res: self.res.iter().map(|r| r.lease(tape, trainable)).collect(),
            up1: self.up1.lease(tape, trainable),
            up1_bn: self.up1_bn.lease(tape, trainable),
            up2: self.up2.lease(tape, trainable),
            up2_bn: self.up2_bn.lease(tape, trainable),
            head: self.head.lease(tape, trainable),
            input_channels: self.cfg.input_channels,
        }
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.stem.collect(&format!("{prefix}.stem"), out);
        self.stem_bn.collect(&format!("{prefix}.stem_bn"), out);
        self.down1.collect(&format!("{prefix}.down1"), out);
        self.down1_bn.collect(&format!("{prefix}.down1_bn"), out);
        self.down2.collect(&format!("{prefix}.down2"), out);
        self.down2_bn.collect(&format!("{prefix}.down2_bn"), out);
        for (i, r) in self.res.iter().enumerate() {
            r.collect(&format!("{prefix}.res{i}"), out);
        }
        self.up1.collect(&format!("{prefix}.up1"), out);
        self.up1_bn.collect(&format!("{prefix}.up1_bn"), out);
        self.up2.collect(&format!("{prefix}.up2"), out);
        self.up2_bn.collect(&format!("{prefix}.up2_bn"), out);
        self.head.collect(&format!("{prefix}.head"), out);
    }

    pub fn load(&mut self, prefix: &str, map: &mut HashMap<String, Tensor>) -> Result<()> {
        self.stem.load(&format!("{prefix}.stem"), map)?;
        self.stem_bn.load(&format!("{prefix}.stem_bn"), map)?;
        self.down1.load(&format!("{prefix}.down1"), map)?;
        self.down1_bn.load(&format!("{prefix}.down1_bn"), map)?;
        self.down2.load(&format!("{prefix}.down2"), map)?;
        self.down2_bn.load(&format!("{prefix}.down2_bn"), map)?;
        for (i, r) in self.res.iter_mut().enumerate() {
            r.load(&format!("{prefix}.res{i}"), map)?;
        }
        self.up1.load(&format!("{prefix}.up1"), map)?;
        self.up1_bn.load(&format!("{prefix}.up1_bn"), map)?;
        self.up2.load(&format!("{prefix}.up2"), map)?;
        self.up2_bn.load(&format!("{prefix}.up2_bn"), map)?;
        self.head.load(&format!("{prefix}.head"), map)
    }

    pub fn learnable_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        self.stem.learnable_mut(&mut out);
        self.stem_bn.learnable_mut(&mut out);
        self.down1.learnable_mut(&mut out);
        self.down1_bn.learnable_mut(&mut out);
        self.down2.learnable_mut(&mut out);
        self.down2_bn.learnable_mut(&mut out);
        for r in &mut self.res {
            r.learnable_mut(&mut out);
        }
        self.up1.learnable_mut(&mut out);
        self.up1_bn.learnable_mut(&mut out);
        self.up2.learnable_mut(&mut out);
        self.up2_bn.learnable_mut(&mut out);
        self.head.learnable_mut(&mut out);
        out
    }

    pub fn param_count(&self) -> usize {
        self.learnable_count()
    }

    fn learnable_count(&self) -> usize {
        self.stem.param_count()
            + self.stem_bn.param_count()
            + self.down1.param_count()
            + self.down1_bn.param_count()
            + self.down2.param_count()
            + self.down2_bn.param_count()
            + self.res.iter().map(|r| r.param_count()).sum::<usize>()
            + self.up1.param_count()
            + self.up1_bn.param_count()
            + self.up2.param_count()
            + self.up2_bn.param_count()
            + self.head.param_count()
    }

    /// Residual-branch weights and BN gammas zeroed, making every res block
    /// an exact identity. Test hook for the zero-f contract.
    pub fn zero_res_blocks(&mut self) {
        for r in &mut self.res {
            r.conv1.weight.data_mut().fill(0.0);
            r.conv1.bias.data_mut().fill(0.0);
            r.conv2.weight.data_mut().fill(0.0);
            r.conv2.bias.data_mut().fill(0.0);
            r.bn1.gamma.data_mut().fill(0.0);
            r.bn1.beta.data_mut().fill(0.0);
            r.bn2.gamma.data_mut().fill(0.0);
            r.bn2.beta.data_mut().fill(0.0);
        }
    }
}

pub struct GeneratorVars<'a> {
    stem: Conv2dVars,
    stem_bn: BatchNormVars<'a>,
    down1: Conv2dVars,
    down1_bn: BatchNormVars<'a>,
    down2: Conv2dVars,
    down2_bn: BatchNormVars<'a>,
    res: Vec<ResBlockVars<'a>>,
    up1: ConvTranspose2dVars,
    up1_bn: BatchNormVars<'a>,
    up2: ConvTranspose2dVars,
    up2_bn: BatchNormVars<'a>,
    head: Conv2dVars,
    input_channels: usize,
}

impl GeneratorVars<'_> {
    /// Encoder → res stack → decoder with skip concats → Tanh. Accepts any
    /// square input with side divisible by 4 (the layers are fully
    /// convolutional); `image_size` in the config is the training default.
    pub fn forward(&self, tape: &mut Tape, x: Var, mode: BnMode) -> Result<Var> {
        let (_, c, h, w) = tape.value(x).dims4()?;
        if c != self.input_channels {
            return Err(Error::ShapeMismatch {
                op: "generator_forward",
                lhs: tape.value(x).shape().to_vec(),
                rhs: vec![0, self.input_channels, 0, 0],
            });
        }
        if h != w || h % 4 != 0 || h == 0 {
            return Err(Error::contract(format!(
                "generator input must be square with side divisible by 4, got {h}x{w}"
            )));
        }
        let e0 = self.stem.forward(tape, x)?;
        let e0 = self.stem_bn.forward(tape, e0, mode)?;
        let e0 = nn::leaky_relu(tape, e0, LEAKY_SLOPE);
        let e1 = self.down1.forward(tape, e0)?;
        let e1 = self.down1_bn.forward(tape, e1, mode)?;
        let e1 = nn::leaky_relu(tape, e1, LEAKY_SLOPE);
        let e2 = self.down2.forward(tape, e1)?;
        let e2 = self.down2_bn.forward(tape, e2, mode)?;
        let mut h = nn::leaky_relu(tape, e2, LEAKY_SLOPE);
        for block in &self.res {
            h = block.forward(tape, h, mode)?;
        }
        let u1 = self.up1.forward(tape, h)?;
        let u1 = self.up1_bn.forward(tape, u1, mode)?;
        let u1 = nn::relu(tape, u1);
        let c1 = ops::concat_channels(tape, &[u1, e1])?;
        let u2 = self.up2.forward(tape, c1)?;
        let u2 = self.up2_bn.forward(tape, u2, mode)?;
        let u2 = nn::relu(tape, u2);
        let c2 = ops::concat_channels(tape, &[u2, e0])?;
        let y = self.head.forward(tape, c2)?;
        Ok(nn::tanh(tape, y))
    }

    /// Leased parameter handles in canonical order (matches
    /// [`Generator::learnable_mut`] element for element).
    pub fn params(&self) -> Vec<Var> {
        let mut out = Vec::new();
        self.stem.params(&mut out);
        self.stem_bn.params(&mut out);
        self.down1.params(&mut out);
        self.down1_bn.params(&mut out);
        self.down2.params(&mut out);
        self.down2_bn.params(&mut out);
        for r in &self.res {
            r.params(&mut out);
        }
        self.up1.params(&mut out);
        self.up1_bn.params(&mut out);
        self.up2.params(&mut out);
        self.up2_bn.params(&mut out);
        self.head.params(&mut out);
        out
    }
}

// ---------------------------------------------------------------------------
// Discriminator
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct Discriminator {
    pub cfg: DiscriminatorConfig,
    convs: Vec<Conv2d>,
    /// One BN per layer after the first; `bns[i]` normalizes `convs[i+1]`.
    bns: Vec<BatchNorm2d>,
    final_conv: Conv2d,
}

impl Discriminator {
    pub fn new(cfg: DiscriminatorConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let mut convs = Vec::new();
        let mut bns = Vec::new();
        let mut in_ch = cfg.condition_channels + cfg.image_channels;
        for i in 0..cfg.layers {
            // Patch-classifier width ladder, capped at 8x base.
            let out_ch = cfg.base_width * (1 << i.min(3));
            convs.push(Conv2d::new(in_ch, out_ch, 4, 2, 1, rng));
            if i > 0 {
                bns.push(BatchNorm2d::new(out_ch, rng));
            }
            in_ch = out_ch;
        }
        let final_conv = Conv2d::new(in_ch, 1, 4, 1, 0, rng);
        Ok(Discriminator { cfg, convs, bns, final_conv })
    }

    pub fn lease<'a>(&'a self, tape: &mut Tape, trainable: bool) -> DiscriminatorVars<'a> {
        DiscriminatorVars {
            convs: self.convs.iter().map(|c| c.lease(tape, trainable)).collect(),
            bns: self.bns.iter().map(|b| b.lease(tape, trainable)).collect(),
            final_conv: self.final_conv.lease(tape, trainable),
        }
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        for (i, c) in self.convs.iter().enumerate() {
            c.collect(&format!("{prefix}.layer{i}"), out);
        }
        for (i, b) in self.bns.iter().enumerate() {
            b.collect(&format!("{prefix}.layer{}_bn", i + 1), out);
        }
        self.final_conv.collect(&format!("{prefix}.final"), out);
    }

    pub fn load(&mut self, prefix: &str, map: &mut HashMap<String, Tensor>) -> Result<()> {
        for (i, c) in self.convs.iter_mut().enumerate() {
            c.load(&format!("{prefix}.layer{i}"), map)?;
        }
        for (i, b) in self.bns.iter_mut().enumerate() {
            b.load(&format!("{prefix}.layer{}_bn", i + 1), map)?;
        }
        self.final_conv.load(&format!("{prefix}.final"), map)
    }

    pub fn learnable_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for c in &mut self.convs {
            c.learnable_mut(&mut out);
        }
        for b in &mut self.bns {
            b.learnable_mut(&mut out);
        }
        self.final_conv.learnable_mut(&mut out);
        out
    }

    pub fn param_count(&self) -> usize {
        self.convs.iter().map(|c| c.param_count()).sum::<usize>()
            + self.bns.iter().map(|b| b.param_count()).sum::<usize>()
            + self.final_conv.param_count()
    }
}

pub struct DiscriminatorVars<'a> {
    convs: Vec<Conv2dVars>,
    bns: Vec<BatchNormVars<'a>>,
    final_conv: Conv2dVars,
}

impl DiscriminatorVars<'_> {
    /// Patch grid of probabilities, shape `[B, 1, h, w]`, every cell in
    /// (0,1) up to f32 sigmoid saturation.
    pub fn forward(&self, tape: &mut Tape, condition: Var, image: Var, mode: BnMode) -> Result<Var> {
        {
            let c = tape.value(condition);
            let i = tape.value(image);
            let (_, _, ch, cw) = c.dims4()?;
            let (_, _, ih, iw) = i.dims4()?;
            if (ch, cw) != (ih, iw) {
                return Err(Error::ShapeMismatch {
                    op: "discriminator_forward",
                    lhs: c.shape().to_vec(),
                    rhs: i.shape().to_vec(),
                });
            }
        }
        let mut h = ops::concat_channels(tape, &[condition, image])?;
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(tape, h)?;
            if i > 0 {
                h = self.bns[i - 1].forward(tape, h, mode)?;
            }
            h = nn::leaky_relu(tape, h, LEAKY_SLOPE);
        }
        // Stride-1 4x4 "same" layer: total pad k-1 = 3, split (1,2)/(1,2).
        let h = ops::zero_pad2d(tape, h, (1, 2, 1, 2))?;
        let h = self.final_conv.forward(tape, h)?;
        Ok(nn::sigmoid(tape, h))
    }

    pub fn params(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for c in &self.convs {
            c.params(&mut out);
        }
        for b in &self.bns {
            b.params(&mut out);
        }
        self.final_conv.params(&mut out);
        out
    }
}

/// Mean over every patch cell and batch element: the scalar score the
/// adversarial losses consume.
pub fn patch_score(tape: &mut Tape, grid: Var) -> Var {
    ops::mean(tape, grid)
}

// ---------------------------------------------------------------------------
// Cascade feature extractor
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct CascadeNet {
    pub cfg: CascadeNetConfig,
    convs: Vec<Conv2d>,
    /// Number of completed forward passes; test probe for the gating
    /// contract (no cascade loss => no Φ evaluation).
    pub forward_count: Cell<usize>,
}

impl CascadeNet {
    pub fn new(cfg: CascadeNetConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::new(derive_seed(cfg.seed, 0x70687669)); // "phi" tag
        let mut convs = Vec::new();
        let mut in_ch = 3;
        for &w in &cfg.widths {
            // He-scaled init keeps activation magnitudes stable through the
            // ReLU stack, so random frozen features stay informative.
            let std = (2.0 / (in_ch as f32 * 9.0)).sqrt();
            let mut conv = Conv2d::new(in_ch, w, 3, 1, 1, &mut rng);
            conv.weight = Tensor::randn(&[w, in_ch, 3, 3], std, &mut rng);
            convs.push(conv);
            in_ch = w;
        }
        Ok(CascadeNet { cfg, convs, forward_count: Cell::new(0) })
    }

    /// Φ is frozen: leaves never require gradients, so the trainer cannot
    /// update them even by accident.
    pub fn lease<'a>(&'a self, tape: &mut Tape) -> CascadeNetVars<'a> {
        CascadeNetVars {
            convs: self.convs.iter().map(|c| c.lease(tape, false)).collect(),
            owner: self,
        }
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        for (i, c) in self.convs.iter().enumerate() {
            c.collect(&format!("{prefix}.conv{i}"), out);
        }
    }

    pub fn load(&mut self, prefix: &str, map: &mut HashMap<String, Tensor>) -> Result<()> {
        for (i, c) in self.convs.iter_mut().enumerate() {
            c.load(&format!("{prefix}.conv{i}"), map)?;
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.convs.iter().map(|c| c.param_count()).sum()
    }
}

pub struct CascadeNetVars<'a> {
    convs: Vec<Conv2dVars>,
    owner: &'a CascadeNet,
}

impl CascadeNetVars<'_> {
    /// The N per-level activations Φ_1..Φ_N (taken before pooling); 2×2 max
    /// pooling follows levels 2 and 4.
    pub fn forward(&self, tape: &mut Tape, image: Var) -> Result<Vec<Var>> {
        let n = self.convs.len();
        let mut feats = Vec::with_capacity(n);
        let mut h = image;
        for (i, conv) in self.convs.iter().enumerate() {
            let c = conv.forward(tape, h)?;
            let a = nn::relu(tape, c);
            feats.push(a);
            h = a;
            if (i == 1 || i == 3) && i + 1 < n {
                h = nn::maxpool2x2(tape, h)?;
            }
        }
        self.owner.forward_count.set(self.owner.forward_count.get() + 1);
        Ok(feats)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;

    fn tiny_gen_cfg(size: usize) -> GeneratorConfig {
        GeneratorConfig {
            input_channels: 2,
            base_width: 2,
            num_res_blocks: 1,
            output_channels: 3,
            image_size: size,
        }
    }

    #[test]
    fn generator_shape_and_codomain() {
        let mut rng = Rng::new(42);
        for size in [16usize, 64] {
            let g = Generator::new(tiny_gen_cfg(size), &mut rng).unwrap();
            let mut t = Tape::new();
            let vars = g.lease(&mut t, false);
            let x = t.leaf(Tensor::randn(&[1, 2, size, size], 1.0, &mut rng), false);
            let y = vars.forward(&mut t, x, BnMode::Train).unwrap();
            assert_eq!(t.value(y).shape(), &[1, 3, size, size]);
            assert!(t.value(y).data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn generator_accepts_256() {
        let mut rng = Rng::new(43);
        let mut cfg = tiny_gen_cfg(256);
        cfg.base_width = 1;
        let g = Generator::new(cfg, &mut rng).unwrap();
        let mut t = Tape::new();
        let vars = g.lease(&mut t, false);
        let x = t.leaf(Tensor::randn(&[1, 2, 256, 256], 1.0, &mut rng), false);
        let y = vars.forward(&mut t, x, BnMode::Train).unwrap();
        assert_eq!(t.value(y).shape(), &[1, 3, 256, 256]);
    }

    #[test]
    fn generator_rejects_bad_shapes() {
        let mut rng = Rng::new(44);
        let g = Generator::new(tiny_gen_cfg(16), &mut rng).unwrap();
        let mut t = Tape::new();
        let vars = g.lease(&mut t, false);
        let wrong_ch = t.leaf(Tensor::zeros(&[1, 3, 16, 16]), false);
        assert!(vars.forward(&mut t, wrong_ch, BnMode::Train).is_err());
        let odd = t.leaf(Tensor::zeros(&[1, 2, 18, 18]), false);
        assert!(vars.forward(&mut t, odd, BnMode::Train).is_err());
    }

    #[test]
    fn zeroed_res_blocks_match_network_without_them() {
        // With f == 0 the bottleneck is an identity, so a 3-block generator
        // equals a 1-block generator equals any-block: compare against a
        // freshly built twin whose block count differs but whose non-res
        // layers carry identical weights.
        let mut rng = Rng::new(7);
        let mut g3 = Generator::new(
            GeneratorConfig { num_res_blocks: 3, ..tiny_gen_cfg(16) },
            &mut rng,
        )
        .unwrap();
        g3.zero_res_blocks();
        let mut g1 = Generator::new(
            GeneratorConfig { num_res_blocks: 1, ..tiny_gen_cfg(16) },
            &mut Rng::new(99),
        )
        .unwrap();
        g1.zero_res_blocks();
        // Copy the non-res weights from g3 to g1 via the checkpoint path.
        let mut named = Vec::new();
        g3.collect("g", &mut named);
        let mut map: HashMap<String, Tensor> =
            named.into_iter().filter(|(k, _)| !k.contains(".res")).collect();
        let mut keep: Vec<(String, Tensor)> = Vec::new();
        g1.collect("g", &mut keep);
        for (k, v) in keep {
            map.entry(k).or_insert(v);
        }
        g1.load("g", &mut map).unwrap();

        let mut rng_x = Rng::new(1);
        let x = Tensor::randn(&[1, 2, 16, 16], 1.0, &mut rng_x);
        let mut t3 = Tape::new();
        let v3 = g3.lease(&mut t3, false);
        let x3 = t3.leaf(x.clone(), false);
        let y3 = v3.forward(&mut t3, x3, BnMode::Eval).unwrap();
        let mut t1 = Tape::new();
        let v1 = g1.lease(&mut t1, false);
        let x1 = t1.leaf(x, false);
        let y1 = v1.forward(&mut t1, x1, BnMode::Eval).unwrap();
        assert_eq!(t3.value(y3).data(), t1.value(y1).data());
    }

    #[test]
    fn different_noise_changes_generator_output() {
        let mut rng = Rng::new(5);
        let g = Generator::new(tiny_gen_cfg(16), &mut rng).unwrap();
        let base = Tensor::randn(&[1, 2, 16, 16], 1.0, &mut rng);
        let with_noise = |seed: u64| {
            let mut nrng = Rng::new(seed);
            let noisy = Tensor::from_vec(
                base.shape(),
                base.data().iter().map(|v| v + 0.1 * nrng.normal_f32()).collect(),
            )
            .unwrap();
            let mut t = Tape::new();
            let vars = g.lease(&mut t, false);
            let x = t.leaf(noisy, false);
            let y = vars.forward(&mut t, x, BnMode::Eval).unwrap();
            t.value(y).clone()
        };
        let a = with_noise(100);
        let b = with_noise(200);
        let l1: f32 = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .sum::<f32>()
            / a.numel() as f32;
        assert!(l1 > 0.0, "distinct noise draws must change the output");
    }

    #[test]
    fn skip_connections_are_live() {
        // Zero the skip half of the head input channels: outputs must
        // change, proving the concatenated skip path feeds the head.
        let mut rng = Rng::new(12);
        let g = Generator::new(tiny_gen_cfg(16), &mut rng).unwrap();
        let x = Tensor::randn(&[1, 2, 16, 16], 1.0, &mut rng);
        let run = |g: &Generator, x: &Tensor| {
            let mut t = Tape::new();
            let vars = g.lease(&mut t, false);
            let xv = t.leaf(x.clone(), false);
            let y = vars.forward(&mut t, xv, BnMode::Eval).unwrap();
            t.value(y).clone()
        };
        let y_full = run(&g, &x);
        let mut g_cut = Generator::new(tiny_gen_cfg(16), &mut Rng::new(12)).unwrap();
        // Head weight layout (out, in, kh, kw): channels [w..2w) of `in`
        // come from the stem skip; zero them.
        {
            let w = g_cut.cfg.base_width;
            let shape = g_cut.head.weight.shape().to_vec();
            let (kh, kw) = (shape[2], shape[3]);
            let data = g_cut.head.weight.data_mut();
            for o in 0..shape[0] {
                for i in w..2 * w {
                    for k in 0..kh * kw {
                        data[(o * shape[1] + i) * kh * kw + k] = 0.0;
                    }
                }
            }
        }
        let y_cut = run(&g_cut, &x);
        assert!(
            y_full.max_abs_diff(&y_cut).unwrap() > 0.0,
            "skip path must influence the output"
        );
    }

    #[test]
    fn discriminator_grid_shape_and_range() {
        let mut rng = Rng::new(8);
        let d = Discriminator::new(
            DiscriminatorConfig { condition_channels: 2, base_width: 2, ..Default::default() },
            &mut rng,
        )
        .unwrap();
        let mut t = Tape::new();
        let vars = d.lease(&mut t, false);
        let cond = t.leaf(Tensor::randn(&[1, 2, 64, 64], 1.0, &mut rng), false);
        let img = t.leaf(Tensor::randn(&[1, 3, 64, 64], 1.0, &mut rng), false);
        let grid = vars.forward(&mut t, cond, img, BnMode::Train).unwrap();
        assert_eq!(t.value(grid).shape(), &[1, 1, 4, 4]);
        assert!(t.value(grid).data().iter().all(|v| *v > 0.0 && *v < 1.0));
        let score = patch_score(&mut t, grid);
        let s = t.value(score).item().unwrap();
        assert!(s > 0.0 && s < 1.0);
    }

    #[test]
    fn discriminator_zero_weights_give_half() {
        let mut rng = Rng::new(9);
        let mut d = Discriminator::new(
            DiscriminatorConfig { condition_channels: 1, base_width: 2, layers: 2, ..Default::default() },
            &mut rng,
        )
        .unwrap();
        for p in d.learnable_mut() {
            p.data_mut().fill(0.0);
        }
        // Zero gammas make BN output zero regardless of stats; zero final
        // conv gives sigmoid(0) = 0.5 in every cell.
        let mut t = Tape::new();
        let vars = d.lease(&mut t, false);
        let cond = t.leaf(Tensor::randn(&[1, 1, 16, 16], 1.0, &mut rng), false);
        let img = t.leaf(Tensor::randn(&[1, 3, 16, 16], 1.0, &mut rng), false);
        let grid = vars.forward(&mut t, cond, img, BnMode::Train).unwrap();
        assert!(t.value(grid).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn discriminator_rejects_mismatched_spatial() {
        let mut rng = Rng::new(10);
        let d = Discriminator::new(
            DiscriminatorConfig { condition_channels: 1, base_width: 2, ..Default::default() },
            &mut rng,
        )
        .unwrap();
        let mut t = Tape::new();
        let vars = d.lease(&mut t, false);
        let cond = t.leaf(Tensor::zeros(&[1, 1, 32, 32]), false);
        let img = t.leaf(Tensor::zeros(&[1, 3, 16, 16]), false);
        assert!(vars.forward(&mut t, cond, img, BnMode::Train).is_err());
    }

    #[test]
    fn cascade_shapes_and_purity() {
        let cfg = CascadeNetConfig { widths: vec![64, 64, 128, 128, 256], seed: 0 };
        let phi = CascadeNet::new(cfg).unwrap();
        let mut rng = Rng::new(3);
        let img = Tensor::randn(&[1, 3, 64, 64], 0.5, &mut rng);
        let mut t = Tape::new();
        let vars = phi.lease(&mut t);
        let x = t.leaf(img.clone(), false);
        let feats = vars.forward(&mut t, x).unwrap();
        let shapes: Vec<Vec<usize>> = feats.iter().map(|f| t.value(*f).shape().to_vec()).collect();
        assert_eq!(
            shapes,
            vec![
                vec![1, 64, 64, 64],
                vec![1, 64, 64, 64],
                vec![1, 128, 32, 32],
                vec![1, 128, 32, 32],
                vec![1, 256, 16, 16],
            ]
        );
        // Frozen + deterministic: a second pass is bit-identical.
        let mut t2 = Tape::new();
        let vars2 = phi.lease(&mut t2);
        let x2 = t2.leaf(img, false);
        let feats2 = vars2.forward(&mut t2, x2).unwrap();
        for (a, b) in feats.iter().zip(&feats2) {
            assert_eq!(t.value(*a).data(), t2.value(*b).data());
        }
        assert_eq!(phi.forward_count.get(), 2);
    }

    #[test]
    fn cascade_gradient_reaches_image_but_not_weights() {
        let cfg = CascadeNetConfig { widths: vec![4, 4, 8, 8, 8], seed: 1 };
        let phi = CascadeNet::new(cfg).unwrap();
        let mut rng = Rng::new(4);
        let mut t = Tape::new();
        let vars = phi.lease(&mut t);
        let x = t.leaf(Tensor::randn(&[1, 3, 16, 16], 0.5, &mut rng), true);
        let feats = vars.forward(&mut t, x).unwrap();
        let mut loss = ops::mean(&mut t, feats[4]);
        for f in &feats[..4] {
            let m = ops::mean(&mut t, *f);
            loss = ops::add(&mut t, loss, m).unwrap();
        }
        t.backward(loss).unwrap();
        assert!(t.grad(x).is_some(), "gradient must flow to the image");
        for p in vars.convs.iter() {
            assert!(t.grad(p.weight).is_none(), "frozen weights must have no grad");
            assert!(t.grad(p.bias).is_none());
        }
    }

    #[test]
    fn lease_order_matches_learnable_order() {
        let mut rng = Rng::new(15);
        let mut g = Generator::new(tiny_gen_cfg(16), &mut rng).unwrap();
        let var_shapes: Vec<Vec<usize>> = {
            let mut t = Tape::new();
            let vars = g.lease(&mut t, true);
            vars.params().iter().map(|v| t.value(*v).shape().to_vec()).collect()
        };
        let param_shapes: Vec<Vec<usize>> =
            g.learnable_mut().iter().map(|p| p.shape().to_vec()).collect();
        assert_eq!(var_shapes, param_shapes);

        let mut d = Discriminator::new(
            DiscriminatorConfig { condition_channels: 2, base_width: 2, ..Default::default() },
            &mut rng,
        )
        .unwrap();
        let var_shapes: Vec<Vec<usize>> = {
            let mut t = Tape::new();
            let vars = d.lease(&mut t, true);
            vars.params().iter().map(|v| t.value(*v).shape().to_vec()).collect()
        };
        let param_shapes: Vec<Vec<usize>> =
            d.learnable_mut().iter().map(|p| p.shape().to_vec()).collect();
        assert_eq!(var_shapes, param_shapes);
    }

    #[test]
    fn count_parameters_handles_empty_and_known_models() {
        assert_eq!(count_parameters(std::iter::empty()), 0);
        let mut rng = Rng::new(16);
        let conv = Conv2d::new(1, 1, 1, 1, 0, &mut rng);
        assert_eq!(count_parameters([&conv.weight, &conv.bias]), 2);
        let g = Generator::new(tiny_gen_cfg(16), &mut rng).unwrap();
        let collected: usize = {
            let mut named = Vec::new();
            g.collect("g", &mut named);
            named
                .iter()
                .filter(|(k, _)| !k.ends_with("running_mean") && !k.ends_with("running_var"))
                .map(|(_, t)| t.numel())
                .sum()
        };
        assert_eq!(g.param_count(), collected);
    }

    #[test]
    fn generator_checkpoint_roundtrip() {
        let mut rng = Rng::new(20);
        let g = Generator::new(tiny_gen_cfg(16), &mut rng).unwrap();
        let mut named = Vec::new();
        g.collect("g", &mut named);
        let mut map: HashMap<String, Tensor> = named.into_iter().collect();
        let mut g2 = Generator::new(tiny_gen_cfg(16), &mut Rng::new(21)).unwrap();
        g2.load("g", &mut map).unwrap();
        assert!(map.is_empty(), "all tensors consumed");
        let mut rng_x = Rng::new(22);
        let x = Tensor::randn(&[1, 2, 16, 16], 1.0, &mut rng_x);
        let run = |g: &Generator| {
            let mut t = Tape::new();
            let vars = g.lease(&mut t, false);
            let xv = t.leaf(x.clone(), false);
            let y = vars.forward(&mut t, xv, BnMode::Eval).unwrap();
            t.value(y).clone()
        };
        assert_eq!(run(&g).data(), run(&g2).data());
    }

    #[test]
    fn small_generator_gradcheck() {
        // Full generator at 8x8 with minimal widths: by far the strongest
        // single check of the conv/BN/activation/concat backward plumbing.
        let mut rng = Rng::new(30);
        let cfg = GeneratorConfig {
            input_channels: 1,
            base_width: 1,
            num_res_blocks: 1,
            output_channels: 1,
            image_size: 8,
        };
        let g = Generator::new(cfg, &mut rng).unwrap();
        let x = Tensor::randn(&[1, 1, 8, 8], 1.0, &mut rng);
        let target = Tensor::randn(&[1, 1, 8, 8], 0.5, &mut rng);
        let report = gradcheck::grad_check(
            "generator/mean-sq-err",
            &[x],
            gradcheck::DEFAULT_EPS,
            &mut |t, vars| {
                let gv = g.lease(t, true);
                let y = gv.forward(t, vars[0], BnMode::Train)?;
                let tgt = t.constant(target.clone());
                let d = ops::sub(t, y, tgt)?;
                let sq = ops::mul(t, d, d)?;
                Ok(ops::mean(t, sq))
            },
        )
        .unwrap();
        assert!(report.passed(gradcheck::DEFAULT_TOL), "{report}");
    }
}
