//! The configurable encoder, the chain of stacked prediction heads and the
//! ablation architectures.
//!
//! A finer head `t` reads the encoder output `f0`, the raw score map of head
//! `t − 1` and (with skip connections) the pre-pool output of a shallower
//! encoder block. All three are bilinearly upsampled to the largest of their
//! spatial sizes and concatenated in that order before the head's convs run.

mod checkpoint;
mod config;

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{
    load_checkpoint, peek_header, read_header, save_checkpoint, CheckpointHeader, CHECKPOINT_MAGIC,
};
pub use config::{ArchMode, BlockSpec, EncoderConfig, HeadSpec, NetConfig, StackedHeadConfig};

use crate::error::{Error, Result};
use crate::hierarchy::{LabelHierarchy, LabelMap, LabelMapSet};
use crate::tensor::{dims4, Element, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub tensor: Tensor<T>,
}

/// Parameter handles recorded on one tape, aligned with [`ParserNet::params`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Encoder outputs for one pass.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub f0: Var,
    /// Pre-pool block outputs requested by the heads, keyed by block index.
    pub taps: BTreeMap<usize, Var>,
}

#[derive(Debug, Clone)]
pub struct ParserNet<T> {
    mode: ArchMode,
    config: NetConfig,
    hierarchy: LabelHierarchy,
    levels: Vec<usize>,
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf29ce484222325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x100000001b3)
    })
}

struct LayerShape {
    name: String,
    shape: Vec<usize>,
}

fn conv_layer(out: &mut Vec<LayerShape>, name: String, cout: usize, cin: usize, k: usize) {
    out.push(LayerShape {
        name: format!("{name}.weight"),
        shape: vec![cout, cin, k, k],
    });
    out.push(LayerShape {
        name: format!("{name}.bias"),
        shape: vec![cout],
    });
}

fn encoder_layout(out: &mut Vec<LayerShape>, prefix: &str, enc: &EncoderConfig, in_ch: usize) {
    let mut cin = in_ch;
    for (b, block) in enc.blocks.iter().enumerate() {
        for i in 0..block.convs {
            conv_layer(
                out,
                format!("{prefix}encoder.block{b}.conv{i}"),
                block.channels,
                cin,
                3,
            );
            cin = block.channels;
        }
    }
}

fn head_layout(out: &mut Vec<LayerShape>, prefix: &str, level: usize, spec: &HeadSpec, cin: usize) {
    let mut cin = cin;
    for i in 0..spec.head_conv_layers - 1 {
        conv_layer(
            out,
            format!("{prefix}head{level}.conv{i}"),
            spec.head_channels,
            cin,
            3,
        );
        cin = spec.head_channels;
    }
    conv_layer(
        out,
        format!("{prefix}head{level}.classifier"),
        spec.num_classes,
        cin,
        1,
    );
}

impl<T: Element> ParserNet<T> {
    /// A multi-level network (`stack_full`, `stack_fc`, `stack_fc_skip`).
    pub fn new(
        mode: ArchMode,
        config: NetConfig,
        hierarchy: LabelHierarchy,
        seed: u64,
    ) -> Result<Self> {
        if mode == ArchMode::Standalone {
            return Err(Error::invalid(
                "parser net",
                "standalone networks are built with ParserNet::standalone",
            ));
        }
        let levels = (0..hierarchy.num_levels()).collect();
        Self::build(mode, config, hierarchy, levels, seed)
    }

    /// A single-head network trained on one hierarchy level.
    pub fn standalone(
        config: NetConfig,
        hierarchy: LabelHierarchy,
        level: usize,
        seed: u64,
    ) -> Result<Self> {
        if level >= hierarchy.num_levels() {
            return Err(Error::invalid(
                "parser net",
                format!("level {level} of {}", hierarchy.num_levels()),
            ));
        }
        Self::build(ArchMode::Standalone, config, hierarchy, vec![level], seed)
    }

    fn build(
        mode: ArchMode,
        config: NetConfig,
        hierarchy: LabelHierarchy,
        levels: Vec<usize>,
        seed: u64,
    ) -> Result<Self> {
        config.validate(&hierarchy)?;
        let layout = Self::layout(mode, &config, &levels);
        let params = layout
            .into_iter()
            .map(|l| {
                let tensor = if l.shape.len() == 4 {
                    let fan_in = l.shape[1] * l.shape[2] * l.shape[3];
                    let bound = (6.0 / fan_in as f64).sqrt();
                    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(&l.name));
                    let n: usize = l.shape.iter().product();
                    let data = (0..n)
                        .map(|_| T::from_f64_lossy(rng.gen_range(-bound..bound)))
                        .collect();
                    Tensor::new(l.shape, data)?
                } else {
                    Tensor::zeros(l.shape)
                };
                Ok(Param {
                    name: l.name,
                    tensor: tensor.with_grad(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::assemble(mode, config, hierarchy, levels, params))
    }

    fn assemble(
        mode: ArchMode,
        config: NetConfig,
        hierarchy: LabelHierarchy,
        levels: Vec<usize>,
        params: Vec<Param<T>>,
    ) -> Self {
        let index = params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), i))
            .collect();
        ParserNet {
            mode,
            config,
            hierarchy,
            levels,
            params,
            index,
        }
    }

    /// Rebuilds a network from stored parameters, checking every shape.
    pub fn from_params(
        mode: ArchMode,
        config: NetConfig,
        hierarchy: LabelHierarchy,
        levels: Vec<usize>,
        params: Vec<Param<T>>,
    ) -> Result<Self> {
        config.validate(&hierarchy)?;
        if mode == ArchMode::Standalone && levels.len() != 1 {
            return Err(Error::invalid("parser net", "standalone nets have one level"));
        }
        let layout = Self::layout(mode, &config, &levels);
        if layout.len() != params.len() {
            return Err(Error::Format(format!(
                "expected {} parameters, found {}",
                layout.len(),
                params.len()
            )));
        }
        for (l, p) in layout.iter().zip(&params) {
            if l.name != p.name || l.shape != p.tensor.shape() {
                return Err(Error::Format(format!(
                    "parameter '{}' {:?} does not match expected '{}' {:?}",
                    p.name,
                    p.tensor.shape(),
                    l.name,
                    l.shape
                )));
            }
        }
        Ok(Self::assemble(mode, config, hierarchy, levels, params))
    }

    fn layout(mode: ArchMode, config: &NetConfig, levels: &[usize]) -> Vec<LayerShape> {
        let enc = &config.encoder;
        let heads = &config.heads.levels;
        let mut out = Vec::new();
        match mode {
            ArchMode::Standalone => {
                encoder_layout(&mut out, "", enc, enc.in_channels);
                head_layout(&mut out, "", levels[0], &heads[levels[0]], enc.out_channels());
            }
            ArchMode::StackFull => {
                for (t, head) in heads.iter().enumerate() {
                    let prefix = format!("net{t}.");
                    let extra = if t > 0 { heads[t - 1].num_classes } else { 0 };
                    encoder_layout(&mut out, &prefix, enc, enc.in_channels + extra);
                    head_layout(&mut out, &prefix, t, head, enc.out_channels());
                }
            }
            ArchMode::StackFc | ArchMode::StackFcSkip => {
                encoder_layout(&mut out, "", enc, enc.in_channels);
                for (t, head) in heads.iter().enumerate() {
                    let mut cin = enc.out_channels();
                    if t > 0 {
                        cin += heads[t - 1].num_classes;
                    }
                    if mode == ArchMode::StackFcSkip {
                        if let Some(b) = head.tap_block {
                            cin += enc.blocks[b].channels;
                        }
                    }
                    head_layout(&mut out, "", t, head, cin);
                }
            }
        }
        out
    }

    pub fn mode(&self) -> ArchMode {
        self.mode
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn hierarchy(&self) -> &LabelHierarchy {
        &self.hierarchy
    }

    /// Hierarchy level predicted by each forward output.
    pub fn levels(&self) -> &[usize] {
        &self.levels
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.params[i].tensor)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.params[i].tensor)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Records every parameter on `tape` as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        Bound {
            vars: self.params.iter().map(|p| tape.leaf(&p.tensor)).collect(),
        }
    }

    /// Records parameters as constants, for inference.
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|p| tape.constant(p.tensor.clone()))
                .collect(),
        }
    }

    /// Copies gradients from `tape` into each parameter's `grad`.
    pub fn collect_grads(&mut self, tape: &Tape<T>, bound: &Bound) {
        for (p, &v) in self.params.iter_mut().zip(&bound.vars) {
            tape.write_grad(v, &mut p.tensor);
        }
    }

    pub fn var(&self, bound: &Bound, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| bound.vars[i])
            .ok_or_else(|| Error::invalid("parser net", format!("no parameter named '{name}'")))
    }

    fn conv(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        layer: &str,
        input: Var,
        padding: usize,
    ) -> Result<Var> {
        let w = self.var(bound, &format!("{layer}.weight"))?;
        let b = self.var(bound, &format!("{layer}.bias"))?;
        tape.conv2d(input, w, b, 1, padding)
    }

    fn check_mode(&self, allowed: &[ArchMode]) -> Result<()> {
        if allowed.contains(&self.mode) {
            Ok(())
        } else {
            Err(Error::ModeMismatch {
                expected: allowed
                    .iter()
                    .map(|m| m.name())
                    .collect::<Vec<_>>()
                    .join(" or "),
                found: self.mode.name().to_string(),
            })
        }
    }

    fn requested_taps(&self) -> Vec<usize> {
        if self.mode != ArchMode::StackFcSkip {
            return Vec::new();
        }
        self.config
            .heads
            .levels
            .iter()
            .filter_map(|h| h.tap_block)
            .collect()
    }

    fn encode_with(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        prefix: &str,
        image: Var,
        expected_channels: usize,
    ) -> Result<Encoded> {
        let [_, c, h, w] = dims4("encode", tape.shape(image))?;
        if c != expected_channels {
            return Err(Error::invalid(
                "encode",
                format!("expected {expected_channels} input channels, got {c}"),
            ));
        }
        let factor = self.config.encoder.downsample_factor();
        if h % factor != 0 || w % factor != 0 {
            return Err(Error::invalid(
                "encode",
                format!("spatial size {h}x{w} must be a multiple of {factor}"),
            ));
        }
        let wanted = self.requested_taps();
        let mut taps = BTreeMap::new();
        let mut x = image;
        for (b, block) in self.config.encoder.blocks.iter().enumerate() {
            for i in 0..block.convs {
                let y = self.conv(tape, bound, &format!("{prefix}encoder.block{b}.conv{i}"), x, 1)?;
                x = tape.relu(y);
            }
            if wanted.contains(&b) {
                taps.insert(b, x);
            }
            if block.downsample {
                x = tape.maxpool2d(x, 2, 2)?;
            }
        }
        Ok(Encoded { f0: x, taps })
    }

    /// One pass of the shared encoder.
    pub fn encode(&self, tape: &mut Tape<T>, bound: &Bound, image: Var) -> Result<Encoded> {
        self.check_mode(&[
            ArchMode::Standalone,
            ArchMode::StackFc,
            ArchMode::StackFcSkip,
        ])?;
        self.encode_with(tape, bound, "", image, self.config.encoder.in_channels)
    }

    fn head_with(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        prefix: &str,
        level: usize,
        inputs: &[Var],
    ) -> Result<Var> {
        let mut th = 0;
        let mut tw = 0;
        for &v in inputs {
            let [_, _, h, w] = dims4("head input", tape.shape(v))?;
            th = th.max(h);
            tw = tw.max(w);
        }
        let mut resized = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = tape.shape(v);
            resized.push(if (s[2], s[3]) == (th, tw) {
                v
            } else {
                tape.upsample_bilinear(v, th, tw)?
            });
        }
        let mut x = if resized.len() == 1 {
            resized[0]
        } else {
            tape.concat_channels(&resized)?
        };
        let spec = &self.config.heads.levels[level];
        for i in 0..spec.head_conv_layers - 1 {
            let y = self.conv(tape, bound, &format!("{prefix}head{level}.conv{i}"), x, 1)?;
            x = tape.relu(y);
        }
        self.conv(tape, bound, &format!("{prefix}head{level}.classifier"), x, 0)
    }

    /// Runs head `level` on `inputs`: upsample all to the largest spatial
    /// size, concatenate in the given order, apply the head's convs.
    pub fn head_forward(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        level: usize,
        inputs: &[Var],
    ) -> Result<Var> {
        self.head_with(tape, bound, "", level, inputs)
    }

    /// Score maps of every level, coarse → fine, through the shared encoder.
    pub fn forward_stacked(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        image: Var,
    ) -> Result<Vec<Var>> {
        self.check_mode(&[ArchMode::StackFc, ArchMode::StackFcSkip])?;
        let enc = self.encode(tape, bound, image)?;
        let mut scores = Vec::with_capacity(self.levels.len());
        scores.push(self.head_forward(tape, bound, 0, &[enc.f0])?);
        for t in 1..self.levels.len() {
            let mut inputs = vec![enc.f0, scores[t - 1]];
            if let Some(tap) = self.config.heads.levels[t]
                .tap_block
                .and_then(|b| enc.taps.get(&b))
            {
                inputs.push(*tap);
            }
            let p = self.head_forward(tape, bound, t, &inputs)?;
            scores.push(p);
        }
        Ok(scores)
    }

    /// Score map of a standalone network's single level.
    pub fn forward_standalone(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        image: Var,
        level: usize,
    ) -> Result<Var> {
        self.check_mode(&[ArchMode::Standalone])?;
        if level != self.levels[0] {
            return Err(Error::invalid(
                "forward_standalone",
                format!("network predicts level {}, not {level}", self.levels[0]),
            ));
        }
        let enc = self.encode(tape, bound, image)?;
        self.head_forward(tape, bound, level, &[enc.f0])
    }

    /// Chained full networks: network `t` reads the image concatenated with
    /// the softmax of network `t − 1`'s scores at image resolution.
    pub fn forward_stack_full(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        image: Var,
    ) -> Result<Vec<Var>> {
        self.check_mode(&[ArchMode::StackFull])?;
        let [_, _, h, w] = dims4("forward_stack_full", tape.shape(image))?;
        let in_ch = self.config.encoder.in_channels;
        let mut scores: Vec<Var> = Vec::with_capacity(self.levels.len());
        for t in 0..self.levels.len() {
            let prefix = format!("net{t}.");
            let (input, channels) = match scores.last() {
                None => (image, in_ch),
                Some(&prev) => {
                    let probs = tape.softmax_channels(prev)?;
                    let s = tape.shape(probs);
                    let up = if (s[2], s[3]) == (h, w) {
                        probs
                    } else {
                        tape.upsample_bilinear(probs, h, w)?
                    };
                    let c = tape.shape(up)[1];
                    (tape.concat_channels(&[image, up])?, in_ch + c)
                }
            };
            let enc = self.encode_with(tape, bound, &prefix, input, channels)?;
            scores.push(self.head_with(tape, bound, &prefix, t, &[enc.f0])?);
        }
        Ok(scores)
    }

    /// Score maps for whatever levels this network predicts.
    pub fn forward(&self, tape: &mut Tape<T>, bound: &Bound, image: Var) -> Result<Vec<Var>> {
        match self.mode {
            ArchMode::Standalone => Ok(vec![self.forward_standalone(
                tape,
                bound,
                image,
                self.levels[0],
            )?]),
            ArchMode::StackFull => self.forward_stack_full(tape, bound, image),
            ArchMode::StackFc | ArchMode::StackFcSkip => self.forward_stacked(tape, bound, image),
        }
    }

    /// Per-sample label maps: each score map is upsampled to the image size and
    /// reduced by argmax (lowest class index wins ties).
    pub fn predict(&self, images: &Tensor<T>) -> Result<Vec<LabelMapSet>> {
        let [n, _, h, w] = dims4("predict", images.shape())?;
        let mut tape = Tape::new();
        let bound = self.bind_frozen(&mut tape);
        let x = tape.constant(images.clone());
        let scores = self.forward(&mut tape, &bound, x)?;
        let mut out: Vec<LabelMapSet> = (0..n).map(|_| LabelMapSet { maps: vec![] }).collect();
        for s in scores {
            let sh = tape.shape(s).to_vec();
            let up = if (sh[2], sh[3]) == (h, w) {
                s
            } else {
                tape.upsample_bilinear(s, h, w)?
            };
            for (b, set) in out.iter_mut().enumerate() {
                set.maps.push(argmax_map(tape.value(up), b, sh[1], h, w));
            }
        }
        Ok(out)
    }
}

/// Channel argmax of sample `b` in an N×C×H×W buffer; ties go to the lowest index.
pub fn argmax_map<T: Element>(scores: &[T], b: usize, c: usize, h: usize, w: usize) -> LabelMap {
    let hw = h * w;
    let base = b * c * hw;
    let data = (0..hw)
        .map(|p| {
            let mut best = 0usize;
            let mut best_v = scores[base + p];
            for k in 1..c {
                let v = scores[base + k * hw + p];
                if v > best_v {
                    best = k;
                    best_v = v;
                }
            }
            best as u16
        })
        .collect();
    LabelMap {
        height: h,
        width: w,
        data,
    }
}
