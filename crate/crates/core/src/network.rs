//! Dual-encoder, triple-decoder U-shaped feature extractor.
//!
//! Two Siamese encoder-decoder streams with fully shared parameters turn
//! each input image into an independent feature map `F_I^k`; a third
//! decoder consumes the channel-concatenated encoder features of both
//! streams and its output is fused into the common feature maps `F_C^k`.
//! Every level halves/doubles the spatial extent, skip connections
//! concatenate the matching encoder feature, and a `Convs` block is two
//! rounds of conv3x3 / BatchNorm / ReLU.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{RunningStats, Tape, Tensor, Var};

/// Channel count of the projected feature maps. Three channels cover two
/// foreground identities plus the background, the minimum that can encode
/// a foreground-to-foreground transform.
pub const FEATURE_CHANNELS: usize = 3;

/// The feature channel trained to highlight on background pixels. Any
/// fixed index works; it must match between training and trend decoding.
pub const BACKGROUND_CHANNEL: usize = 2;

fn default_depth() -> usize {
    3
}
fn default_base_channels() -> usize {
    16
}
fn default_feature_channels() -> usize {
    FEATURE_CHANNELS
}
fn default_use_batchnorm() -> bool {
    true
}
fn default_tau() -> f32 {
    0.1
}

/// Architecture hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    /// Number of encoder levels. 3 is the desk-scale default; 5 matches
    /// the full-scale layout.
    #[serde(default = "default_depth")]
    pub depth: usize,
    /// Channel width of the first level; level i has `base << (i-1)`.
    #[serde(default = "default_base_channels")]
    pub base_channels: usize,
    /// Projected feature channels; fixed at 3.
    #[serde(default = "default_feature_channels")]
    pub feature_channels: usize,
    /// BatchNorm can be disabled for very small batches.
    #[serde(default = "default_use_batchnorm")]
    pub use_batchnorm: bool,
    /// Softmax temperature shared by the distance heads and trend decoding.
    #[serde(default = "default_tau")]
    pub tau: f32,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            depth: default_depth(),
            base_channels: default_base_channels(),
            feature_channels: default_feature_channels(),
            use_batchnorm: default_use_batchnorm(),
            tau: default_tau(),
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::Config(format!(
                "net.depth must be at least 2, got {}",
                self.depth
            )));
        }
        if self.depth > 8 {
            return Err(Error::Config(format!(
                "net.depth {} is unreasonably large",
                self.depth
            )));
        }
        if self.feature_channels != FEATURE_CHANNELS {
            return Err(Error::Config(format!(
                "net.feature_channels is fixed at {FEATURE_CHANNELS}, got {}",
                self.feature_channels
            )));
        }
        if self.base_channels < self.feature_channels {
            return Err(Error::Config(format!(
                "net.base_channels must be at least {}, got {}",
                self.feature_channels, self.base_channels
            )));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!(
                "net.tau must be positive, got {}",
                self.tau
            )));
        }
        Ok(())
    }

    /// Channel width at encoder level `i` (1-indexed).
    pub fn level_width(&self, i: usize) -> usize {
        self.base_channels << (i - 1)
    }

    /// Input spatial extents must be divisible by this.
    pub fn input_divisor(&self) -> usize {
        1 << (self.depth - 1)
    }

    /// Check that an image extent is compatible with the pooling depth.
    pub fn check_spatial(&self, h: usize, w: usize) -> Result<()> {
        let d = self.input_divisor();
        if h == 0 || w == 0 || h % d != 0 || w % d != 0 {
            return Err(Error::Config(format!(
                "spatial size {h}x{w} must be a positive multiple of {d} for depth {}",
                self.depth
            )));
        }
        Ok(())
    }
}

// ── parameter layout ────────────────────────────────────────────────

#[derive(Clone, Copy, Debug)]
struct ConvIds {
    w: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug)]
struct NormIds {
    gamma: usize,
    beta: usize,
    stats: usize,
}

#[derive(Clone, Copy, Debug)]
struct BlockIds {
    conv1: ConvIds,
    norm1: Option<NormIds>,
    conv2: ConvIds,
    norm2: Option<NormIds>,
}

#[derive(Clone, Copy, Debug)]
struct UpIds {
    conv: ConvIds,
    norm: Option<NormIds>,
}

#[derive(Clone, Copy, Debug)]
struct LevelIds {
    up: UpIds,
    block: BlockIds,
}

#[derive(Clone, Debug)]
struct Layout {
    encoder: Vec<BlockIds>,
    siamese_decoder: Vec<LevelIds>,
    common_decoder: Vec<LevelIds>,
    head_fi: ConvIds,
    head_fc1: ConvIds,
    head_fc2: ConvIds,
}

/// Shape and initialization class of one parameter tensor.
#[derive(Clone, Debug)]
struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    kind: ParamKind,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum ParamKind {
    ConvWeight { fan_in: usize },
    Bias,
    Gamma,
    Beta,
}

struct LayoutBuilder {
    use_norm: bool,
    params: Vec<ParamSpec>,
    stat_names: Vec<String>,
    stat_channels: Vec<usize>,
}

impl LayoutBuilder {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) -> ConvIds {
        let w = self.params.len();
        self.params.push(ParamSpec {
            name: format!("{name}.w"),
            shape: vec![cout, cin, k, k],
            kind: ParamKind::ConvWeight { fan_in: cin * k * k },
        });
        self.params.push(ParamSpec {
            name: format!("{name}.b"),
            shape: vec![cout],
            kind: ParamKind::Bias,
        });
        ConvIds { w, b: w + 1 }
    }

    fn norm(&mut self, name: &str, channels: usize) -> Option<NormIds> {
        if !self.use_norm {
            return None;
        }
        let gamma = self.params.len();
        self.params.push(ParamSpec {
            name: format!("{name}.gamma"),
            shape: vec![channels],
            kind: ParamKind::Gamma,
        });
        self.params.push(ParamSpec {
            name: format!("{name}.beta"),
            shape: vec![channels],
            kind: ParamKind::Beta,
        });
        let stats = self.stat_names.len();
        self.stat_names.push(name.to_string());
        self.stat_channels.push(channels);
        Some(NormIds {
            gamma,
            beta: gamma + 1,
            stats,
        })
    }

    fn block(&mut self, name: &str, cin: usize, cout: usize) -> BlockIds {
        let conv1 = self.conv(&format!("{name}.conv1"), cin, cout, 3);
        let norm1 = self.norm(&format!("{name}.norm1"), cout);
        let conv2 = self.conv(&format!("{name}.conv2"), cout, cout, 3);
        let norm2 = self.norm(&format!("{name}.norm2"), cout);
        BlockIds {
            conv1,
            norm1,
            conv2,
            norm2,
        }
    }

    fn up(&mut self, name: &str, cin: usize, cout: usize) -> UpIds {
        let conv = self.conv(&format!("{name}.conv"), cin, cout, 3);
        let norm = self.norm(&format!("{name}.norm"), cout);
        UpIds { conv, norm }
    }
}

fn build_layout(config: &NetConfig) -> (Layout, Vec<ParamSpec>, Vec<String>, Vec<usize>) {
    let mut b = LayoutBuilder {
        use_norm: config.use_batchnorm,
        params: Vec::new(),
        stat_names: Vec::new(),
        stat_channels: Vec::new(),
    };
    let depth = config.depth;
    let width = |i: usize| config.level_width(i);

    let encoder: Vec<BlockIds> = (1..=depth)
        .map(|i| {
            let cin = if i == 1 { 3 } else { width(i - 1) };
            b.block(&format!("enc{i}"), cin, width(i))
        })
        .collect();

    // Decoder levels deepest-first: step j fuses into width(depth - 1 - j).
    let siamese_decoder: Vec<LevelIds> = (0..depth - 1)
        .map(|j| {
            let wout = width(depth - 1 - j);
            let win = width(depth - j);
            let up = b.up(&format!("dec{}.up", depth - j), win, wout);
            let block = b.block(&format!("dec{}", depth - j), 2 * wout, wout);
            LevelIds { up, block }
        })
        .collect();

    // The common decoder sees doubled encoder channels; its first Up absorbs
    // them and each Convs block takes the doubled skip as well.
    let common_decoder: Vec<LevelIds> = (0..depth - 1)
        .map(|j| {
            let wout = width(depth - 1 - j);
            let win = if j == 0 { 2 * width(depth) } else { width(depth - j) };
            let up = b.up(&format!("cdec{}.up", depth - j), win, wout);
            let block = b.block(&format!("cdec{}", depth - j), 3 * wout, wout);
            LevelIds { up, block }
        })
        .collect();

    let c = config.feature_channels;
    let head_fi = b.conv("head.fi", width(1), c, 1);
    let head_fc1 = b.conv("head.fc1", 2 * width(1), c, 1);
    let head_fc2 = b.conv("head.fc2", 2 * width(1), c, 1);

    (
        Layout {
            encoder,
            siamese_decoder,
            common_decoder,
            head_fi,
            head_fc1,
            head_fc2,
        },
        b.params,
        b.stat_names,
        b.stat_channels,
    )
}

// ── model state ─────────────────────────────────────────────────────

/// All learnable parameters plus normalization running statistics.
///
/// The two Siamese streams reference the same storage: there is exactly one
/// encoder and one Siamese decoder here, applied to both inputs.
#[derive(Clone, Debug)]
pub struct ModelState {
    config: NetConfig,
    params: Vec<Tensor>,
    names: Vec<String>,
    stats: Vec<RunningStats>,
    stat_names: Vec<String>,
    layout: Layout,
}

impl ModelState {
    /// Random initialization: Kaiming fan-in scaled uniform conv weights,
    /// zero biases, gamma 1, beta 0. Reproducible from the seed.
    pub fn init(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layout, specs, stat_names, stat_channels) = build_layout(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(specs.len());
        let mut names = Vec::with_capacity(specs.len());
        for spec in &specs {
            let numel: usize = spec.shape.iter().product();
            let data = match spec.kind {
                ParamKind::ConvWeight { fan_in } => {
                    let bound = (6.0 / fan_in as f32).sqrt();
                    (0..numel)
                        .map(|_| (2.0 * rng.random::<f32>() - 1.0) * bound)
                        .collect()
                }
                ParamKind::Bias | ParamKind::Beta => vec![0.0; numel],
                ParamKind::Gamma => vec![1.0; numel],
            };
            params.push(Tensor::new(spec.shape.clone(), data)?);
            names.push(spec.name.clone());
        }
        let stats = stat_channels.iter().map(|c| RunningStats::new(*c)).collect();
        Ok(ModelState {
            config,
            params,
            names,
            stats,
            stat_names,
            layout,
        })
    }

    /// Rebuild a state from named tensors (checkpoint loading). Names and
    /// shapes must match the layout derived from `config` exactly.
    pub fn from_parts(
        config: NetConfig,
        mut param_table: Vec<(String, Tensor)>,
        mut stat_table: Vec<(String, RunningStats)>,
    ) -> Result<Self> {
        config.validate()?;
        let (layout, specs, stat_names, stat_channels) = build_layout(&config);
        if param_table.len() != specs.len() {
            return Err(Error::Data(format!(
                "checkpoint has {} parameter tensors, layout expects {}",
                param_table.len(),
                specs.len()
            )));
        }
        let mut params = Vec::with_capacity(specs.len());
        let mut names = Vec::with_capacity(specs.len());
        for (spec, (name, tensor)) in specs.iter().zip(param_table.drain(..)) {
            if name != spec.name {
                return Err(Error::Data(format!(
                    "checkpoint tensor '{name}' where '{}' was expected",
                    spec.name
                )));
            }
            if tensor.shape() != spec.shape.as_slice() {
                return Err(Error::Data(format!(
                    "checkpoint tensor '{name}' has shape {:?}, expected {:?}",
                    tensor.shape(),
                    spec.shape
                )));
            }
            params.push(tensor);
            names.push(name);
        }
        if stat_table.len() != stat_names.len() {
            return Err(Error::Data(format!(
                "checkpoint has {} running-stat entries, layout expects {}",
                stat_table.len(),
                stat_names.len()
            )));
        }
        let mut stats = Vec::with_capacity(stat_names.len());
        for ((expected, channels), (name, rs)) in stat_names
            .iter()
            .zip(&stat_channels)
            .zip(stat_table.drain(..))
        {
            if &name != expected {
                return Err(Error::Data(format!(
                    "checkpoint stats '{name}' where '{expected}' was expected"
                )));
            }
            if rs.mean.len() != *channels || rs.var.len() != *channels {
                return Err(Error::Data(format!(
                    "checkpoint stats '{name}' has {} channels, expected {channels}",
                    rs.mean.len()
                )));
            }
            stats.push(rs);
        }
        Ok(ModelState {
            config,
            params,
            names,
            stats,
            stat_names,
            layout,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    /// Total number of learnable scalars.
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn param_sizes(&self) -> Vec<usize> {
        self.params.iter().map(|p| p.numel()).collect()
    }

    pub fn stats(&self) -> &[RunningStats] {
        &self.stats
    }

    pub fn stat_names(&self) -> &[String] {
        &self.stat_names
    }
}

/// Handles into a recorded forward pass.
pub struct Forward {
    /// One tape var per parameter tensor, in `ModelState` order.
    pub param_vars: Vec<Var>,
    /// Independent features of the two streams, `[N,3,H,W]` each.
    pub fi1: Var,
    pub fi2: Var,
    /// Common features of the two streams, `[N,3,H,W]` each.
    pub fc1: Var,
    pub fc2: Var,
}

/// Run the full extractor on a bi-temporal batch.
///
/// `training` selects batch statistics (and updates the running averages)
/// versus frozen running statistics in the normalization layers.
pub fn forward(
    tape: &mut Tape,
    state: &mut ModelState,
    t1: &Tensor,
    t2: &Tensor,
    training: bool,
) -> Result<Forward> {
    let (n1, c1, h1, w1) = t1.dims4()?;
    let (n2, c2, h2, w2) = t2.dims4()?;
    if (n1, c1, h1, w1) != (n2, c2, h2, w2) {
        return Err(Error::invalid(
            "forward",
            format!("input shapes differ: {:?} vs {:?}", t1.shape(), t2.shape()),
        ));
    }
    if c1 != 3 {
        return Err(Error::dim("forward", "input channels", 3, c1));
    }
    state.config.check_spatial(h1, w1).map_err(|_| {
        Error::invalid(
            "forward",
            format!(
                "spatial size {h1}x{w1} not divisible by {}",
                state.config.input_divisor()
            ),
        )
    })?;

    let param_vars: Vec<Var> = state.params.iter().map(|p| tape.param(p)).collect();
    let layout = state.layout.clone();
    let mut ctx = Ctx {
        tape,
        vars: &param_vars,
        stats: &mut state.stats,
        training,
    };

    let x1 = ctx.tape.leaf(t1.clone());
    let x2 = ctx.tape.leaf(t2.clone());

    let enc1 = ctx.run_encoder(&layout.encoder, x1)?;
    let enc2 = ctx.run_encoder(&layout.encoder, x2)?;
    let enc_c: Vec<Var> = enc1
        .iter()
        .zip(&enc2)
        .map(|(a, b)| ctx.tape.concat_channels(*a, *b))
        .collect::<Result<_>>()?;

    let d1 = ctx.run_decoder(&layout.siamese_decoder, &enc1)?;
    let d2 = ctx.run_decoder(&layout.siamese_decoder, &enc2)?;
    let dc = ctx.run_decoder(&layout.common_decoder, &enc_c)?;

    let fi1 = ctx.conv1x1(layout.head_fi, d1)?;
    let fi2 = ctx.conv1x1(layout.head_fi, d2)?;
    let cat1 = ctx.tape.concat_channels(d1, dc)?;
    let cat2 = ctx.tape.concat_channels(d2, dc)?;
    let fc1 = ctx.conv1x1(layout.head_fc1, cat1)?;
    let fc2 = ctx.conv1x1(layout.head_fc2, cat2)?;

    Ok(Forward {
        param_vars,
        fi1,
        fi2,
        fc1,
        fc2,
    })
}

struct Ctx<'a> {
    tape: &'a mut Tape,
    vars: &'a [Var],
    stats: &'a mut [RunningStats],
    training: bool,
}

impl Ctx<'_> {
    fn conv_norm_relu(&mut self, conv: ConvIds, norm: Option<NormIds>, x: Var, pad: usize) -> Result<Var> {
        let mut x = self
            .tape
            .conv2d(x, self.vars[conv.w], self.vars[conv.b], 1, pad)?;
        if let Some(n) = norm {
            x = self.tape.batchnorm(
                x,
                self.vars[n.gamma],
                self.vars[n.beta],
                &mut self.stats[n.stats],
                self.training,
            )?;
        }
        Ok(self.tape.relu(x))
    }

    fn run_block(&mut self, block: &BlockIds, x: Var) -> Result<Var> {
        let x = self.conv_norm_relu(block.conv1, block.norm1, x, 1)?;
        self.conv_norm_relu(block.conv2, block.norm2, x, 1)
    }

    fn run_encoder(&mut self, blocks: &[BlockIds], input: Var) -> Result<Vec<Var>> {
        let mut features = Vec::with_capacity(blocks.len());
        let mut x = input;
        for (i, block) in blocks.iter().enumerate() {
            if i > 0 {
                x = self.tape.maxpool2(x)?;
            }
            x = self.run_block(block, x)?;
            features.push(x);
        }
        Ok(features)
    }

    /// Fuse deepest-first: `d = Convs(Up(d) (+) skip)` down to full size.
    fn run_decoder(&mut self, levels: &[LevelIds], enc: &[Var]) -> Result<Var> {
        let depth = enc.len();
        let mut d = enc[depth - 1];
        for (j, level) in levels.iter().enumerate() {
            let up = self.tape.upsample2(d)?;
            let up = self.conv_norm_relu(level.up.conv, level.up.norm, up, 1)?;
            let skip = enc[depth - 2 - j];
            let cat = self.tape.concat_channels(up, skip)?;
            d = self.run_block(&level.block, cat)?;
        }
        Ok(d)
    }

    fn conv1x1(&mut self, conv: ConvIds, x: Var) -> Result<Var> {
        self.tape
            .conv2d(x, self.vars[conv.w], self.vars[conv.b], 1, 0)
    }
}
