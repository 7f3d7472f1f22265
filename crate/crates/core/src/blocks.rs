//! Dual-branch attention / frequency-domain block, its constituents, and the
//! ablation variants.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::ops::fft::rfft2;
use crate::params::{trunc_normal, ParamId, ParamStore, INIT_STD};
use crate::tensor::{Real, Tensor};

pub const SPECTRUM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Channel split: attention on the first part, frequency module on the rest.
    #[serde(rename = "dual_branch_a")]
    DualBranch,
    /// Attention, feed-forward and frequency module in series.
    #[serde(rename = "cascade_b")]
    Cascade,
    /// Both branches on the full input, concatenated and fused by a 1×1 conv.
    #[serde(rename = "channel_fusion_c")]
    ChannelFusion,
    /// Both branches on the full input, summed and fused by a 1×1 conv.
    #[serde(rename = "add_fusion_d")]
    AddFusion,
    #[serde(rename = "resblock")]
    ResBlock,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::DualBranch,
        Variant::Cascade,
        Variant::ChannelFusion,
        Variant::AddFusion,
        Variant::ResBlock,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::DualBranch => "dual_branch_a",
            Variant::Cascade => "cascade_b",
            Variant::ChannelFusion => "channel_fusion_c",
            Variant::AddFusion => "add_fusion_d",
            Variant::ResBlock => "resblock",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s || v.name().ends_with(&format!("_{s}")))
            .ok_or_else(|| Error::Config(format!("unknown block variant `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub channels: usize,
    pub heads: usize,
    pub alpha: f64,
    pub expansion: f64,
    pub variant: Variant,
    pub drop_path_rate: f64,
}

impl BlockConfig {
    pub fn new(channels: usize, heads: usize, variant: Variant) -> Self {
        BlockConfig {
            channels,
            heads,
            alpha: 0.5,
            expansion: 2.66,
            variant,
            drop_path_rate: 0.0,
        }
    }

    /// Width of the attention branch for the split variant: `⌊αC⌋`.
    pub fn split(&self) -> usize {
        (self.alpha * self.channels as f64 + 1e-9).floor() as usize
    }

    /// Channel count seen by the attention branch.
    pub fn attention_width(&self) -> usize {
        match self.variant {
            Variant::DualBranch => self.split(),
            _ => self.channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.channels == 0 {
            return bad("block needs at least one channel".into());
        }
        if !(self.drop_path_rate >= 0.0 && self.drop_path_rate < 1.0) {
            return bad(format!("drop path rate {} outside [0, 1)", self.drop_path_rate));
        }
        if self.variant == Variant::ResBlock {
            return Ok(());
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha {} outside (0, 1)", self.alpha));
        }
        if !(self.expansion > 0.0) {
            return bad(format!("expansion {} must be positive", self.expansion));
        }
        if self.heads == 0 {
            return bad("heads must be positive".into());
        }
        let width = self.attention_width();
        if self.variant == Variant::DualBranch {
            if width < self.heads {
                return bad(format!(
                    "split width ⌊αC⌋ = {} smaller than {} heads (C = {})",
                    width, self.heads, self.channels
                ));
            }
            if self.channels - width < 1 {
                return bad(format!("frequency branch is empty for C = {}", self.channels));
            }
        }
        if width % self.heads != 0 {
            return bad(format!("attention width {} not divisible by {} heads", width, self.heads));
        }
        Ok(())
    }
}

/// `⌈γ·C⌉`, robust to binary rounding of `γ·C`.
pub fn dffn_hidden(channels: usize, expansion: f64) -> usize {
    ((expansion * channels as f64) - 1e-9).ceil().max(1.0) as usize
}

/// Mutable state threaded through a forward pass.
pub struct ForwardCtx {
    pub training: bool,
    /// Replaces every block's own drop-path rate when set.
    pub drop_path: Option<f64>,
    rng: ChaCha8Rng,
    /// When set, every block appends its frequency-module input and output.
    pub probe: Option<Vec<Option<CfdmTrace>>>,
}

#[derive(Clone, Debug)]
pub struct CfdmTrace {
    pub input: Tensor,
    pub output: Tensor,
}

impl ForwardCtx {
    pub fn inference() -> Self {
        ForwardCtx {
            training: false,
            drop_path: None,
            rng: ChaCha8Rng::seed_from_u64(0),
            probe: None,
        }
    }

    pub fn training(seed: u64) -> Self {
        ForwardCtx {
            training: true,
            drop_path: None,
            rng: ChaCha8Rng::seed_from_u64(seed),
            probe: None,
        }
    }

    pub fn with_probe(mut self) -> Self {
        self.probe = Some(Vec::new());
        self
    }

    /// Stochastic depth on a residual branch: zero with probability `rate`,
    /// otherwise rescaled by `1/(1 − rate)`.
    fn drop_path<T: Real>(&mut self, g: &mut Graph<T>, branch: Var, rate: f64) -> Var {
        let rate = self.drop_path.unwrap_or(rate);
        if !self.training || rate <= 0.0 {
            return branch;
        }
        let keep = self.rng.random::<f64>() >= rate;
        let factor = if keep { 1.0 / (1.0 - rate) } else { 0.0 };
        g.scale(branch, T::lit(factor))
    }
}

fn kernel<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    trunc_normal(shape, INIT_STD, rng)
}

/// Bias-free channel attention over `d × d` head blocks.
#[derive(Clone, Debug)]
pub struct SimMha {
    pub heads: usize,
    pub ln_gain: ParamId,
    pub ln_shift: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wdq: ParamId,
    pub wdk: ParamId,
    pub tau: ParamId,
}

impl SimMha {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || channels % heads != 0 {
            return Err(Error::Config(format!("C = {channels} not divisible by {heads} heads")));
        }
        let d = channels / heads;
        let c = channels;
        Ok(SimMha {
            heads,
            ln_gain: store.add(format!("{prefix}.ln.gain"), Tensor::full(&[c], 1.0), false)?,
            ln_shift: store.add(format!("{prefix}.ln.shift"), Tensor::zeros(&[c]), false)?,
            wq: store.add(format!("{prefix}.wq"), kernel(&[1, 1, c, c], rng), true)?,
            wk: store.add(format!("{prefix}.wk"), kernel(&[1, 1, c, c], rng), true)?,
            wdq: store.add(format!("{prefix}.wdq"), kernel(&[3, 3, 1, c], rng), true)?,
            wdk: store.add(format!("{prefix}.wdk"), kernel(&[3, 3, 1, c], rng), true)?,
            tau: store.add(
                format!("{prefix}.tau"),
                Tensor::full(&[heads], (d as f32).sqrt()),
                false,
            )?,
        })
    }

    /// Attention weights `[heads, d, d]`; row `j` holds the weights of output
    /// channel `j` over the key channels and sums to one.
    pub fn attention<T: Real>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Result<Var> {
        let c = g.value(x).hwc()?.2;
        let n = g.layer_norm(x, p[self.ln_gain.index()], p[self.ln_shift.index()])?;
        let q = g.conv2d(n, p[self.wq.index()], None, 1)?;
        let q = g.conv2d(q, p[self.wdq.index()], None, c)?;
        let k = g.conv2d(n, p[self.wk.index()], None, 1)?;
        let k = g.conv2d(k, p[self.wdk.index()], None, c)?;
        let logits = g.head_gram(q, k, self.heads)?;
        let logits = g.head_scale(logits, p[self.tau.index()])?;
        g.softmax(logits)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Result<Var> {
        let a = self.attention(g, p, x)?;
        g.head_mix(x, a, self.heads)
    }
}

/// Layer norm, 1×1 expansion, depth-wise 3×3, GELU, 1×1 reduction.
#[derive(Clone, Debug)]
pub struct Dffn {
    pub hidden: usize,
    pub ln_gain: ParamId,
    pub ln_shift: ParamId,
    pub expand_w: ParamId,
    pub expand_b: ParamId,
    pub dconv: ParamId,
    pub reduce_w: ParamId,
    pub reduce_b: ParamId,
}

impl Dffn {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        expansion: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let c = channels;
        let hd = dffn_hidden(c, expansion);
        Ok(Dffn {
            hidden: hd,
            ln_gain: store.add(format!("{prefix}.ln.gain"), Tensor::full(&[c], 1.0), false)?,
            ln_shift: store.add(format!("{prefix}.ln.shift"), Tensor::zeros(&[c]), false)?,
            expand_w: store.add(format!("{prefix}.expand.w"), kernel(&[1, 1, c, hd], rng), true)?,
            expand_b: store.add(format!("{prefix}.expand.b"), Tensor::zeros(&[hd]), true)?,
            dconv: store.add(format!("{prefix}.dconv"), kernel(&[3, 3, 1, hd], rng), true)?,
            reduce_w: store.add(format!("{prefix}.reduce.w"), kernel(&[1, 1, hd, c], rng), true)?,
            reduce_b: store.add(format!("{prefix}.reduce.b"), Tensor::zeros(&[c]), true)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Result<Var> {
        let n = g.layer_norm(x, p[self.ln_gain.index()], p[self.ln_shift.index()])?;
        let e = g.conv2d(n, p[self.expand_w.index()], Some(p[self.expand_b.index()]), 1)?;
        let e = g.conv2d(e, p[self.dconv.index()], None, self.hidden)?;
        let e = g.gelu(e);
        g.conv2d(e, p[self.reduce_w.index()], Some(p[self.reduce_b.index()]), 1)
    }
}

/// Frequency-domain module: `irfft2(cconv2(crelu(cconv1(F))) + β·F)`.
#[derive(Clone, Debug)]
pub struct Cfdm {
    pub u1: ParamId,
    pub v1: ParamId,
    pub u2: ParamId,
    pub v2: ParamId,
    pub beta: ParamId,
}

impl Cfdm {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, channels: usize, rng: &mut R) -> Result<Self> {
        let s = [3, 3, channels, channels];
        Ok(Cfdm {
            u1: store.add(format!("{prefix}.cconv1.re"), kernel(&s, rng), true)?,
            v1: store.add(format!("{prefix}.cconv1.im"), kernel(&s, rng), true)?,
            u2: store.add(format!("{prefix}.cconv2.re"), kernel(&s, rng), true)?,
            v2: store.add(format!("{prefix}.cconv2.im"), kernel(&s, rng), true)?,
            beta: store.add(format!("{prefix}.beta"), Tensor::scalar(1.0), false)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Result<Var> {
        let width = g.value(x).hwc()?.1;
        let f = g.rfft2(x)?;
        let y = g.complex_conv2d(f, p[self.u1.index()], p[self.v1.index()])?;
        let y = g.crelu(y)?;
        let y = g.complex_conv2d(y, p[self.u2.index()], p[self.v2.index()])?;
        let skip = g.complex_scale(f, p[self.beta.index()])?;
        let y = g.complex_add(y, skip)?;
        g.irfft2(y, width)
    }

    fn traced<T: Real>(&self, g: &mut Graph<T>, p: &[Var], x: Var, ctx: &mut ForwardCtx) -> Result<Var> {
        let out = self.forward(g, p, x)?;
        if let Some(probe) = ctx.probe.as_mut() {
            probe.push(Some(CfdmTrace {
                input: g.value(x).cast(),
                output: g.value(out).cast(),
            }));
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub enum BlockKind {
    DualBranch { attn: SimMha, ffn: Dffn, cfdm: Cfdm, split: usize },
    Cascade { attn: SimMha, ffn: Dffn, cfdm: Cfdm },
    ChannelFusion { attn: SimMha, ffn: Dffn, cfdm: Cfdm, fuse: ParamId },
    AddFusion { attn: SimMha, ffn: Dffn, cfdm: Cfdm, fuse: ParamId },
    ResBlock { conv1: ParamId, conv2: ParamId },
}

#[derive(Clone, Debug)]
pub struct Block {
    pub config: BlockConfig,
    pub kind: BlockKind,
}

impl Block {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, cfg: &BlockConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let attn_w = cfg.attention_width();
        let transformer = |store: &mut ParamStore, rng: &mut R| -> Result<(SimMha, Dffn)> {
            Ok((
                SimMha::new(store, &format!("{prefix}.attn"), attn_w, cfg.heads, rng)?,
                Dffn::new(store, &format!("{prefix}.ffn"), attn_w, cfg.expansion, rng)?,
            ))
        };
        let kind = match cfg.variant {
            Variant::DualBranch => {
                let (attn, ffn) = transformer(store, rng)?;
                let cfdm = Cfdm::new(store, &format!("{prefix}.cfdm"), c - attn_w, rng)?;
                BlockKind::DualBranch { attn, ffn, cfdm, split: attn_w }
            }
            Variant::Cascade => {
                let (attn, ffn) = transformer(store, rng)?;
                let cfdm = Cfdm::new(store, &format!("{prefix}.cfdm"), c, rng)?;
                BlockKind::Cascade { attn, ffn, cfdm }
            }
            Variant::ChannelFusion => {
                let (attn, ffn) = transformer(store, rng)?;
                let cfdm = Cfdm::new(store, &format!("{prefix}.cfdm"), c, rng)?;
                let fuse = store.add(format!("{prefix}.fuse"), kernel(&[1, 1, 2 * c, c], rng), true)?;
                BlockKind::ChannelFusion { attn, ffn, cfdm, fuse }
            }
            Variant::AddFusion => {
                let (attn, ffn) = transformer(store, rng)?;
                let cfdm = Cfdm::new(store, &format!("{prefix}.cfdm"), c, rng)?;
                let fuse = store.add(format!("{prefix}.fuse"), kernel(&[1, 1, c, c], rng), true)?;
                BlockKind::AddFusion { attn, ffn, cfdm, fuse }
            }
            Variant::ResBlock => BlockKind::ResBlock {
                conv1: store.add(format!("{prefix}.conv1"), kernel(&[3, 3, c, c], rng), true)?,
                conv2: store.add(format!("{prefix}.conv2"), kernel(&[3, 3, c, c], rng), true)?,
            },
        };
        Ok(Block { config: cfg.clone(), kind })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &[Var], x: Var, ctx: &mut ForwardCtx) -> Result<Var> {
        let c = g.value(x).hwc()?.2;
        if c != self.config.channels {
            return Err(Error::Dimension(format!(
                "block expects {} channels, got {}",
                self.config.channels, c
            )));
        }
        let branch = match &self.kind {
            BlockKind::DualBranch { attn, ffn, cfdm, split } => {
                let x1 = g.slice_channels(x, 0, *split)?;
                let x2 = g.slice_channels(x, *split, c)?;
                let t = attn.forward(g, p, x1)?;
                let t = ffn.forward(g, p, t)?;
                let f = cfdm.traced(g, p, x2, ctx)?;
                g.concat_channels(t, f)?
            }
            BlockKind::Cascade { attn, ffn, cfdm } => {
                let t = attn.forward(g, p, x)?;
                let t = ffn.forward(g, p, t)?;
                cfdm.traced(g, p, t, ctx)?
            }
            BlockKind::ChannelFusion { attn, ffn, cfdm, fuse } => {
                let t = attn.forward(g, p, x)?;
                let t = ffn.forward(g, p, t)?;
                let f = cfdm.traced(g, p, x, ctx)?;
                let cat = g.concat_channels(t, f)?;
                g.conv2d(cat, p[fuse.index()], None, 1)?
            }
            BlockKind::AddFusion { attn, ffn, cfdm, fuse } => {
                let t = attn.forward(g, p, x)?;
                let t = ffn.forward(g, p, t)?;
                let f = cfdm.traced(g, p, x, ctx)?;
                let s = g.add(t, f)?;
                g.conv2d(s, p[fuse.index()], None, 1)?
            }
            BlockKind::ResBlock { conv1, conv2 } => {
                if let Some(probe) = ctx.probe.as_mut() {
                    probe.push(None);
                }
                let h = g.conv2d(x, p[conv1.index()], None, 1)?;
                let h = g.relu(h)?;
                g.conv2d(h, p[conv2.index()], None, 1)?
            }
        };
        let branch = ctx.drop_path(g, branch, self.config.drop_path_rate);
        g.add(x, branch)
    }
}

/// `log(|rfft2(after)| + ε) − log(|rfft2(before)| + ε)` for one channel, `[H, W/2 + 1]`.
pub fn spectrum_diff_map(before: &Tensor, after: &Tensor, channel: usize) -> Result<Tensor> {
    if before.shape() != after.shape() {
        return Err(Error::Dimension(format!(
            "spectrum inputs differ: {:?} vs {:?}",
            before.shape(),
            after.shape()
        )));
    }
    let (h, w, c) = before.hwc()?;
    if channel >= c {
        return Err(Error::Dimension(format!("channel {channel} out of range for C = {c}")));
    }
    let fb = rfft2(&before.cast::<f64>())?;
    let fa = rfft2(&after.cast::<f64>())?;
    let wf = w / 2 + 1;
    let mut out = Tensor::zeros(&[h, wf]);
    for i in 0..h * wf {
        let k = i * c + channel;
        let ma = fa.re()[k].hypot(fa.im()[k]);
        let mb = fb.re()[k].hypot(fb.im()[k]);
        out.data_mut()[i] = ((ma + SPECTRUM_EPS).ln() - (mb + SPECTRUM_EPS).ln()) as f32;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn run(store: &ParamStore, block: &Block, x: &Tensor) -> Tensor {
        let mut g = Graph::<f32>::new();
        let p = store.bind(&mut g);
        let xv = g.leaf(x.clone());
        let out = block.forward(&mut g, &p, xv, &mut ForwardCtx::inference()).unwrap();
        g.value(out).clone()
    }

    #[test]
    fn branch_widths_for_default_split() {
        let cfg = BlockConfig::new(48, 1, Variant::DualBranch);
        assert_eq!(cfg.split(), 24);
        let mut s = ParamStore::new();
        let b = Block::new(&mut s, "b", &cfg, &mut rng(0)).unwrap();
        match b.kind {
            BlockKind::DualBranch { split, ffn, .. } => {
                assert_eq!(split, 24);
                assert_eq!(ffn.hidden, 64);
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn dffn_hidden_width() {
        assert_eq!(dffn_hidden(48, 2.66), 128);
        assert_eq!(dffn_hidden(50, 2.66), 133);
        assert_eq!(dffn_hidden(8, 2.66), 22);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = BlockConfig::new(4, 4, Variant::DualBranch);
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.heads = 1;
        cfg.alpha = 1.0;
        assert!(cfg.validate().is_err());
        let cfg = BlockConfig::new(6, 4, Variant::Cascade);
        assert!(cfg.validate().is_err());
        assert!(BlockConfig::new(1, 1, Variant::DualBranch).validate().is_err());
    }

    #[test]
    fn every_variant_preserves_shape() {
        let x = Tensor::random(&[8, 8, 8], &mut rng(3));
        for v in Variant::ALL {
            let mut s = ParamStore::new();
            let b = Block::new(&mut s, "b", &BlockConfig::new(8, 2, v), &mut rng(1)).unwrap();
            let y = run(&s, &b, &x);
            assert_eq!(y.shape(), x.shape(), "{v:?}");
            assert!(y.is_finite());
        }
    }

    #[test]
    fn zero_weights_give_identity() {
        let x = Tensor::random(&[8, 8, 8], &mut rng(3));
        for v in Variant::ALL {
            let mut s = ParamStore::new();
            let b = Block::new(&mut s, "b", &BlockConfig::new(8, 2, v), &mut rng(1)).unwrap();
            s.zero_all();
            for p in s.iter_mut().filter(|p| p.name.ends_with("tau")) {
                p.tensor.data_mut().fill(1.0);
            }
            let y = run(&s, &b, &x);
            assert!(y.max_abs_diff(&x) < 1e-6, "{v:?}: {}", y.max_abs_diff(&x));
        }
    }

    #[test]
    fn split_variant_keeps_frequency_skip_with_zero_kernels() {
        let x = Tensor::random(&[8, 8, 8], &mut rng(3));
        let mut s = ParamStore::new();
        let b = Block::new(&mut s, "b", &BlockConfig::new(8, 2, Variant::DualBranch), &mut rng(1)).unwrap();
        s.zero_all();
        for p in s.iter_mut() {
            if p.name.ends_with("tau") || p.name.ends_with("beta") {
                p.tensor.data_mut().fill(1.0);
            }
        }
        let y = run(&s, &b, &x);
        for (px, py) in x.data().chunks(8).zip(y.data().chunks(8)) {
            for ch in 0..4 {
                assert!((px[ch] - py[ch]).abs() < 1e-6);
            }
            for ch in 4..8 {
                assert!((2.0 * px[ch] - py[ch]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one_and_are_d_by_d() {
        let mut s = ParamStore::new();
        let m = SimMha::new(&mut s, "a", 8, 2, &mut rng(5)).unwrap();
        let mut g = Graph::<f32>::new();
        let p = s.bind(&mut g);
        let x = g.leaf(Tensor::random(&[16, 16, 8], &mut rng(6)));
        let a = m.attention(&mut g, &p, x).unwrap();
        assert_eq!(g.value(a).shape(), &[2, 4, 4]);
        assert_eq!(g.value(a).len(), 2 * 4 * 4);
        for row in g.value(a).data().chunks(4) {
            let sum: f32 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
        let y = m.forward(&mut g, &p, x).unwrap();
        assert_eq!(g.value(y).shape(), &[16, 16, 8]);
    }

    #[test]
    fn large_temperature_averages_head_channels() {
        let mut s = ParamStore::new();
        let m = SimMha::new(&mut s, "a", 8, 2, &mut rng(5)).unwrap();
        s.get_mut(m.tau).tensor.data_mut().fill(1e6);
        let xt = Tensor::random(&[6, 6, 8], &mut rng(7));
        let mut g = Graph::<f32>::new();
        let p = s.bind(&mut g);
        let x = g.leaf(xt.clone());
        let y = m.forward(&mut g, &p, x).unwrap();
        for (px, py) in xt.data().chunks(8).zip(g.value(y).data().chunks(8)) {
            for h in 0..2 {
                let mean: f32 = px[h * 4..h * 4 + 4].iter().sum::<f32>() / 4.0;
                for j in 0..4 {
                    assert!((py[h * 4 + j] - mean).abs() < 1e-4);
                }
            }
        }
    }

    #[test]
    fn dffn_zero_input_and_width() {
        let mut s = ParamStore::new();
        let f = Dffn::new(&mut s, "f", 48, 2.66, &mut rng(2)).unwrap();
        assert_eq!(f.hidden, 128);
        let mut g = Graph::<f32>::new();
        let p = s.bind(&mut g);
        let z = g.leaf(Tensor::zeros(&[8, 8, 48]));
        let y = f.forward(&mut g, &p, z).unwrap();
        assert_eq!(g.value(y).shape(), &[8, 8, 48]);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cfdm_skip_only_paths() {
        let xt = Tensor::random(&[8, 6, 3], &mut rng(9));
        for (beta, scale) in [(1.0f32, 1.0f32), (0.0, 0.0)] {
            let mut s = ParamStore::new();
            let m = Cfdm::new(&mut s, "c", 3, &mut rng(1)).unwrap();
            s.zero_all();
            s.get_mut(m.beta).tensor.data_mut()[0] = beta;
            let mut g = Graph::<f32>::new();
            let p = s.bind(&mut g);
            let x = g.leaf(xt.clone());
            let y = m.forward(&mut g, &p, x).unwrap();
            let expect = xt.map(|v| v * scale);
            assert!(g.value(y).max_abs_diff(&expect) < 1e-6);
        }
    }

    #[test]
    fn split_and_cascade_differ() {
        let x = Tensor::random(&[8, 8, 8], &mut rng(3));
        let mut sa = ParamStore::new();
        let a = Block::new(&mut sa, "b", &BlockConfig::new(8, 1, Variant::DualBranch), &mut rng(1)).unwrap();
        let mut sb = ParamStore::new();
        let b = Block::new(&mut sb, "b", &BlockConfig::new(8, 1, Variant::Cascade), &mut rng(1)).unwrap();
        assert!(run(&sa, &a, &x).max_abs_diff(&run(&sb, &b, &x)) > 1e-4);
    }

    #[test]
    fn drop_path_only_in_training() {
        let x = Tensor::random(&[8, 8, 8], &mut rng(3));
        let mut cfg = BlockConfig::new(8, 2, Variant::DualBranch);
        cfg.drop_path_rate = 0.5;
        let mut s = ParamStore::new();
        let b = Block::new(&mut s, "b", &cfg, &mut rng(1)).unwrap();
        let infer = run(&s, &b, &x);
        let mut dropped = 0;
        let mut kept = 0;
        let mut ctx = ForwardCtx::training(11);
        for _ in 0..40 {
            let mut g = Graph::<f32>::new();
            let p = s.bind(&mut g);
            let xv = g.leaf(x.clone());
            let y = b.forward(&mut g, &p, xv, &mut ctx).unwrap();
            let y = g.value(y);
            if y.max_abs_diff(&x) == 0.0 {
                dropped += 1;
            } else {
                // kept branch is scaled by 1/(1-p) = 2
                let mut expect = infer.clone();
                for ((e, &xi), &yi) in expect.data_mut().iter_mut().zip(x.data()).zip(infer.data()) {
                    *e = xi + 2.0 * (yi - xi);
                }
                assert!(y.max_abs_diff(&expect) < 1e-5);
                kept += 1;
            }
        }
        assert!(dropped > 5 && kept > 5, "{dropped} dropped / {kept} kept");
    }

    #[test]
    fn probe_records_frequency_module() {
        let x = Tensor::random(&[8, 8, 8], &mut rng(3));
        let mut s = ParamStore::new();
        let b = Block::new(&mut s, "b", &BlockConfig::new(8, 2, Variant::DualBranch), &mut rng(1)).unwrap();
        let mut g = Graph::<f32>::new();
        let p = s.bind(&mut g);
        let xv = g.leaf(x.clone());
        let mut ctx = ForwardCtx::inference().with_probe();
        b.forward(&mut g, &p, xv, &mut ctx).unwrap();
        let probe = ctx.probe.unwrap();
        assert_eq!(probe.len(), 1);
        let t = probe[0].as_ref().unwrap();
        assert_eq!(t.input.shape(), &[8, 8, 4]);
        assert_eq!(t.output.shape(), &[8, 8, 4]);
    }

    #[test]
    fn spectrum_identity_and_scaling() {
        let x = Tensor::random(&[8, 8, 2], &mut rng(4));
        let z = spectrum_diff_map(&x, &x, 1).unwrap();
        assert_eq!(z.shape(), &[8, 5]);
        assert!(z.data().iter().all(|&v| v == 0.0));
        let m = spectrum_diff_map(&x, &x.map(|v| 2.0 * v), 0).unwrap();
        assert!(m.data().iter().all(|&v| (v - 2f32.ln()).abs() < 1e-4));
        assert!(spectrum_diff_map(&x, &x, 2).is_err());
    }

    #[test]
    fn spectrum_checkerboard_peaks_at_nyquist() {
        let mut r = rng(4);
        let mut before = Tensor::zeros(&[16, 16, 1]);
        for v in before.data_mut() {
            *v = 10.0 + r.random::<f32>();
        }
        let mut after = before.clone();
        for i in 0..16 {
            for j in 0..16 {
                after.data_mut()[i * 16 + j] += if (i + j) % 2 == 0 { 5.0 } else { -5.0 };
            }
        }
        let m = spectrum_diff_map(&before, &after, 0).unwrap();
        let (arg, _) = m
            .data()
            .iter()
            .enumerate()
            .fold((0, f32::MIN), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
        assert_eq!((arg / 9, arg % 9), (8, 8));
    }
}
