//! Four-stage symmetric encoder-decoder built from [`Block`]s, with plane- and
//! volume-level enhancement.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::blocks::{Block, BlockConfig, CfdmTrace, ForwardCtx, Variant};
use crate::error::{Error, Result};
use crate::ops::Direction;
use crate::params::{trunc_normal, ParamId, ParamStore, INIT_STD};
use crate::tensor::{Real, Tensor};
use crate::volume::Volume;

/// Resolution level of each of the seven stages.
const STAGE_LEVEL: [usize; 7] = [0, 1, 2, 3, 2, 1, 0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Full,
    Tiny,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Preset::Full),
            "tiny" => Ok(Preset::Tiny),
            _ => Err(Error::Config(format!("unknown preset `{s}` (expected full or tiny)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub preset: Preset,
    pub base_channels: usize,
    /// Encoder levels 0–2, bottleneck, decoder levels 2–0.
    pub stage_blocks: [usize; 7],
    pub refinement_blocks: usize,
    pub stage_heads: [usize; 7],
    pub refinement_heads: usize,
    pub alpha: f64,
    pub expansion: f64,
    pub drop_path: f64,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl ModelConfig {
    pub fn full() -> Self {
        ModelConfig {
            preset: Preset::Full,
            base_channels: 48,
            stage_blocks: [2, 4, 4, 6, 4, 4, 2],
            refinement_blocks: 4,
            stage_heads: [1, 2, 4, 8, 4, 2, 1],
            refinement_heads: 1,
            alpha: 0.5,
            expansion: 2.66,
            drop_path: 0.1,
            variant: Variant::DualBranch,
        }
    }

    pub fn tiny() -> Self {
        ModelConfig {
            preset: Preset::Tiny,
            base_channels: 8,
            stage_blocks: [1, 1, 1, 2, 1, 1, 1],
            refinement_blocks: 1,
            stage_heads: [1, 1, 2, 2, 2, 1, 1],
            refinement_heads: 1,
            ..Self::full()
        }
    }

    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Full => Self::full(),
            Preset::Tiny => Self::tiny(),
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    /// Channel width at resolution level `level`: `C₀·2^level`.
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    fn block_config(&self, level: usize, heads: usize) -> BlockConfig {
        BlockConfig {
            channels: self.channels(level),
            heads,
            alpha: self.alpha,
            expansion: self.expansion,
            variant: self.variant,
            drop_path_rate: self.drop_path,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels < 2 || self.base_channels % 2 != 0 {
            return Err(Error::Config(format!(
                "base_channels must be even and ≥ 2, got {}",
                self.base_channels
            )));
        }
        for (s, &heads) in self.stage_heads.iter().enumerate() {
            self.block_config(STAGE_LEVEL[s], heads)
                .validate()
                .map_err(|e| Error::Config(format!("stage {s}: {e}")))?;
        }
        self.block_config(0, self.refinement_heads)
            .validate()
            .map_err(|e| Error::Config(format!("refinement: {e}")))?;
        Ok(())
    }

    pub fn total_blocks(&self) -> usize {
        self.stage_blocks.iter().sum::<usize>() + self.refinement_blocks
    }
}

#[derive(Clone, Debug)]
struct EncoderLevel {
    blocks: Vec<Block>,
    down: ParamId,
}

#[derive(Clone, Debug)]
struct DecoderLevel {
    up: ParamId,
    reduce: ParamId,
    blocks: Vec<Block>,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    seed: u64,
    store: ParamStore,
    stem: ParamId,
    encoder: Vec<EncoderLevel>,
    bottleneck: Vec<Block>,
    decoder: Vec<DecoderLevel>,
    refinement: Vec<Block>,
    tail: ParamId,
}

/// Builds a model with deterministic initialisation from `seed`.
pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<Model> {
    Model::new(cfg, seed)
}

impl Model {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c0 = cfg.base_channels;
        let stem = store.add("stem", trunc_normal(&[3, 3, 1, c0], INIT_STD, &mut rng), true)?;

        let blocks = |store: &mut ParamStore, prefix: &str, stage: usize, rng: &mut ChaCha8Rng| {
            let bc = cfg.block_config(STAGE_LEVEL[stage], cfg.stage_heads[stage]);
            (0..cfg.stage_blocks[stage])
                .map(|i| Block::new(store, &format!("{prefix}.block{i}"), &bc, rng))
                .collect::<Result<Vec<_>>>()
        };

        let mut encoder = Vec::new();
        for level in 0..3 {
            let c = cfg.channels(level);
            let b = blocks(&mut store, &format!("enc{level}"), level, &mut rng)?;
            let down = store.add(
                format!("enc{level}.down"),
                trunc_normal(&[1, 1, c, c / 2], INIT_STD, &mut rng),
                true,
            )?;
            encoder.push(EncoderLevel { blocks: b, down });
        }
        let bottleneck = blocks(&mut store, "mid", 3, &mut rng)?;
        let mut decoder = Vec::new();
        for level in (0..3).rev() {
            let c = cfg.channels(level);
            let up = store.add(
                format!("dec{level}.up"),
                trunc_normal(&[1, 1, 2 * c, 4 * c], INIT_STD, &mut rng),
                true,
            )?;
            let reduce = store.add(
                format!("dec{level}.reduce"),
                trunc_normal(&[1, 1, 2 * c, c], INIT_STD, &mut rng),
                true,
            )?;
            let b = blocks(&mut store, &format!("dec{level}"), 6 - level, &mut rng)?;
            decoder.push(DecoderLevel { up, reduce, blocks: b });
        }
        let rc = cfg.block_config(0, cfg.refinement_heads);
        let refinement = (0..cfg.refinement_blocks)
            .map(|i| Block::new(&mut store, &format!("refine.block{i}"), &rc, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let tail = store.add("tail", Tensor::zeros(&[3, 3, c0, 1]), true)?;
        Ok(Model {
            config: cfg.clone(),
            seed,
            store,
            stem,
            encoder,
            bottleneck,
            decoder,
            refinement,
            tail,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn num_blocks(&self) -> usize {
        self.config.total_blocks()
    }

    pub fn check_input(h: usize, w: usize) -> Result<()> {
        if h == 0 || w == 0 || h % 8 != 0 || w % 8 != 0 {
            return Err(Error::Dimension(format!(
                "input {h}x{w}: height and width must be positive multiples of 8"
            )));
        }
        Ok(())
    }

    /// `I + I_r` for an `[H, W, 1]` node, unclamped.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &[Var], input: Var, ctx: &mut ForwardCtx) -> Result<Var> {
        let (h, w, c) = g.value(input).hwc()?;
        if c != 1 {
            return Err(Error::Dimension(format!("model input must have 1 channel, got {c}")));
        }
        Self::check_input(h, w)?;
        let mut x = g.conv2d(input, p[self.stem.index()], None, 1)?;
        let mut skips = Vec::with_capacity(3);
        for lvl in &self.encoder {
            for b in &lvl.blocks {
                x = b.forward(g, p, x, ctx)?;
            }
            skips.push(x);
            x = g.conv2d(x, p[lvl.down.index()], None, 1)?;
            x = g.reshuffle(x, 2, Direction::Down)?;
        }
        for b in &self.bottleneck {
            x = b.forward(g, p, x, ctx)?;
        }
        for lvl in &self.decoder {
            x = g.conv2d(x, p[lvl.up.index()], None, 1)?;
            x = g.reshuffle(x, 2, Direction::Up)?;
            let skip = skips.pop().expect("one skip per level");
            x = g.concat_channels(x, skip)?;
            x = g.conv2d(x, p[lvl.reduce.index()], None, 1)?;
            for b in &lvl.blocks {
                x = b.forward(g, p, x, ctx)?;
            }
        }
        for b in &self.refinement {
            x = b.forward(g, p, x, ctx)?;
        }
        let residual = g.conv2d(x, p[self.tail.index()], None, 1)?;
        g.add(input, residual)
    }

    /// Feature shapes after each encoder level and the bottleneck, for an `h × w` input.
    pub fn level_shapes(&self, h: usize, w: usize) -> Vec<[usize; 3]> {
        (0..4)
            .map(|l| [h >> l, w >> l, self.config.channels(l)])
            .collect()
    }

    /// Enhances an `[H, W, 1]` image with values in `[0, 1]`; the result is clamped to `[0, 1]`.
    pub fn enhance_plane(&self, img: &Tensor) -> Result<Tensor> {
        let mut g = Graph::<f32>::new();
        let p = self.store.bind(&mut g);
        let x = g.leaf(img.clone());
        let y = self.forward(&mut g, &p, x, &mut ForwardCtx::inference())?;
        Ok(g.value(y).map(|v| v.clamp(0.0, 1.0)))
    }

    /// Frequency-module inputs/outputs of every block for one plane (`None` for blocks without one).
    pub fn probe_plane(&self, img: &Tensor) -> Result<Vec<Option<CfdmTrace>>> {
        let mut g = Graph::<f32>::new();
        let p = self.store.bind(&mut g);
        let x = g.leaf(img.clone());
        let mut ctx = ForwardCtx::inference().with_probe();
        self.forward(&mut g, &p, x, &mut ctx)?;
        Ok(ctx.probe.unwrap_or_default())
    }

    /// Enhances every depth plane of a `[0, 255]` volume; output is independent of `workers`.
    pub fn enhance_volume(&self, vol: &Volume, workers: usize) -> Result<Volume> {
        let [d, h, w] = vol.dims();
        Self::check_input(h, w)?;
        let workers = workers.clamp(1, d);
        let plane = |i: usize| -> Result<Vec<f32>> {
            let img = vol.plane_tensor(i).map(|v| v / 255.0);
            Ok(self.enhance_plane(&img)?.data().iter().map(|&v| v * 255.0).collect())
        };
        let per = d.div_ceil(workers);
        let chunks: Vec<Result<Vec<Vec<f32>>>> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..workers)
                .map(|k| {
                    let plane = &plane;
                    s.spawn(move || (k * per..((k + 1) * per).min(d)).map(plane).collect())
                })
                .collect();
            handles
                .into_iter()
                .map(|hd| hd.join().expect("enhancement worker panicked"))
                .collect()
        });
        let mut data = Vec::with_capacity(vol.len());
        for chunk in chunks {
            for p in chunk? {
                data.extend(p);
            }
        }
        Volume::new(vol.dims(), vol.voxel_size_mm(), data)
    }
}

/// Log-magnitude spectrum change across a frequency module for one channel:
/// `ln(1 + |F(output)|) − ln(1 + |F(input)|)` on the `[H, W/2 + 1]` half
/// spectrum, with rows shifted so that zero frequency sits at row `H/2`.
pub fn log_spectrum_difference(trace: &CfdmTrace, channel: usize) -> Result<Tensor> {
    let (h, w, c) = trace.input.hwc()?;
    if trace.output.shape() != trace.input.shape() {
        return Err(Error::Dimension(format!(
            "probe input {:?} and output {:?} differ",
            trace.input.shape(),
            trace.output.shape()
        )));
    }
    if channel >= c {
        return Err(Error::Config(format!("channel {channel} out of range for {c} channels")));
    }
    let pick = |t: &Tensor| -> Result<Tensor> {
        let data = t.data().iter().skip(channel).step_by(c).copied().collect();
        Tensor::from_vec(&[h, w, 1], data)
    };
    let log_mag = |t: &Tensor| -> Result<Vec<f64>> {
        let f = crate::ops::rfft2(&t.cast::<f64>())?;
        Ok(f.re().iter().zip(f.im()).map(|(a, b)| a.hypot(*b).ln_1p()).collect())
    };
    let a = log_mag(&pick(&trace.input)?)?;
    let b = log_mag(&pick(&trace.output)?)?;
    let wh = w / 2 + 1;
    let mut out = vec![0.0f32; h * wh];
    for y in 0..h {
        let dst = (y + h / 2) % h;
        for x in 0..wh {
            out[dst * wh + x] = (b[y * wh + x] - a[y * wh + x]) as f32;
        }
    }
    Tensor::from_vec(&[h, wh], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_preset_runs_and_starts_as_identity() {
        let m = build_model(&ModelConfig::tiny(), 1).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let img = Tensor::random(&[64, 64, 1], &mut r).map(|v| 0.5 + 0.5 * v);
        let out = m.enhance_plane(&img).unwrap();
        assert_eq!(out.shape(), img.shape());
        assert_eq!(out.data(), img.data());
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = build_model(&ModelConfig::tiny(), 9).unwrap();
        let b = build_model(&ModelConfig::tiny(), 9).unwrap();
        let c = build_model(&ModelConfig::tiny(), 10).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn full_level_shapes() {
        let m = build_model(&ModelConfig::full(), 0).unwrap();
        assert_eq!(
            m.level_shapes(64, 64),
            vec![[64, 64, 48], [32, 32, 96], [16, 16, 192], [8, 8, 384]]
        );
        assert_eq!(m.num_blocks(), 30);
    }

    #[test]
    fn rejects_indivisible_inputs() {
        let m = build_model(&ModelConfig::tiny(), 1).unwrap();
        let err = m.enhance_plane(&Tensor::zeros(&[60, 64, 1])).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn invalid_config_named() {
        let mut cfg = ModelConfig::tiny();
        cfg.stage_heads[3] = 3;
        let err = build_model(&cfg, 0).unwrap_err().to_string();
        assert!(err.contains("stage 3"), "{err}");
    }

    #[test]
    fn spectrum_difference_of_scaled_channel() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let input = Tensor::random(&[8, 6, 2], &mut r);
        let output = input.map(|v| 2.0 * v);
        let map = log_spectrum_difference(&CfdmTrace { input: input.clone(), output }, 1).unwrap();
        assert_eq!(map.shape(), &[8, 4]);
        // Brute-force DFT of channel 1 at every retained bin.
        for ky in 0..8 {
            for kx in 0..4 {
                let (mut re, mut im) = (0.0f64, 0.0f64);
                for y in 0..8 {
                    for x in 0..6 {
                        let v = input.data()[(y * 6 + x) * 2 + 1] as f64;
                        let ph = -std::f64::consts::TAU * (ky as f64 * y as f64 / 8.0 + kx as f64 * x as f64 / 6.0);
                        re += v * ph.cos();
                        im += v * ph.sin();
                    }
                }
                let m = re.hypot(im);
                let want = (2.0 * m).ln_1p() - m.ln_1p();
                let got = map.data()[((ky + 4) % 8) * 4 + kx] as f64;
                assert!((got - want).abs() < 1e-5, "({ky},{kx}): {got} vs {want}");
            }
        }
        let trace = CfdmTrace { input: input.clone(), output: input };
        assert!(log_spectrum_difference(&trace, 2).is_err());
    }

    #[test]
    fn worker_count_does_not_change_output() {
        let mut m = build_model(&ModelConfig::tiny(), 1).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let tail = m.params().id("tail").unwrap();
        m.params_mut().get_mut(tail).tensor = trunc_normal(&[3, 3, 8, 1], 0.1, &mut r);
        let data: Vec<f32> = (0..5 * 16 * 16).map(|i| ((i * 37) % 256) as f32).collect();
        let vol = Volume::new([5, 16, 16], [1.0; 3], data).unwrap();
        let a = m.enhance_volume(&vol, 1).unwrap();
        let b = m.enhance_volume(&vol, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.data(), vol.data());
    }
}
