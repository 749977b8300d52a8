use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Conv2dGeometry, NormMode, Pool2dGeometry, Scalar, Tensor, Var};

use super::params::{Binder, BnIds, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    /// Two `k×k` convolutions.
    Basic,
    /// `1×1` reduce, `k×k`, `1×1` expand by four.
    Bottleneck,
}

impl BlockKind {
    pub fn expansion(self) -> usize {
        match self {
            BlockKind::Basic => 1,
            BlockKind::Bottleneck => 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Normal with std `sqrt(2 / fan_in)`.
    Kaiming,
    /// Normal with std `sqrt(2 / (fan_in + fan_out))`.
    Xavier,
}

impl std::str::FromStr for Init {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kaiming" => Ok(Init::Kaiming),
            "xavier" => Ok(Init::Xavier),
            other => Err(Error::Config(format!("unknown init `{other}` (kaiming|xavier)"))),
        }
    }
}

impl std::fmt::Display for Init {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Init::Kaiming => "kaiming",
            Init::Xavier => "xavier",
        })
    }
}

pub(crate) fn init_tensor<R: Rng>(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    init: Init,
    rng: &mut R,
) -> Tensor<f32> {
    let std = match init {
        Init::Kaiming => (2.0 / fan_in as f64).sqrt(),
        Init::Xavier => (2.0 / (fan_in + fan_out) as f64).sqrt(),
    };
    let normal = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape.to_vec(), |_| normal.sample(rng) as f32)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StemSpec {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub width: usize,
    /// `3×3` stride-2 max-pool after the stem convolution.
    pub max_pool: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageSpec {
    pub blocks: usize,
    pub width: usize,
    /// Stride of the first block, `(height, width)`.
    pub stride: (usize, usize),
}

/// Layout of one residual convolutional path.
#[derive(Clone, Debug, PartialEq)]
pub struct PathConfig {
    pub in_channels: usize,
    pub stem: StemSpec,
    /// Kernel of the residual stages.
    pub kernel: (usize, usize),
    pub block: BlockKind,
    pub stages: Vec<StageSpec>,
    pub batch_norm: bool,
    pub init: Init,
}

fn same_padding(kernel: (usize, usize)) -> (usize, usize) {
    (kernel.0 / 2, kernel.1 / 2)
}

impl PathConfig {
    /// ResNet-50 layout over RGB input: 384×128 maps to 12×4×2048.
    pub fn vision_full() -> Self {
        Self {
            in_channels: 3,
            stem: StemSpec {
                kernel: (7, 7),
                stride: (2, 2),
                width: 64,
                max_pool: true,
            },
            kernel: (3, 3),
            block: BlockKind::Bottleneck,
            stages: vec![
                StageSpec { blocks: 3, width: 64, stride: (1, 1) },
                StageSpec { blocks: 4, width: 128, stride: (2, 2) },
                StageSpec { blocks: 6, width: 256, stride: (2, 2) },
                StageSpec { blocks: 3, width: 512, stride: (2, 2) },
            ],
            batch_norm: true,
            init: Init::Kaiming,
        }
    }

    /// Bottleneck text path over `1×L×dim` embeddings: `L/4` positions, 2048 channels.
    pub fn text_full(dim: usize) -> Self {
        Self {
            in_channels: dim,
            stem: StemSpec {
                kernel: (1, 1),
                stride: (1, 1),
                width: 64,
                max_pool: false,
            },
            kernel: (1, 3),
            block: BlockKind::Bottleneck,
            stages: vec![
                StageSpec { blocks: 3, width: 64, stride: (1, 1) },
                StageSpec { blocks: 4, width: 128, stride: (1, 2) },
                StageSpec { blocks: 6, width: 256, stride: (1, 2) },
                StageSpec { blocks: 3, width: 512, stride: (1, 1) },
            ],
            batch_norm: true,
            init: Init::Xavier,
        }
    }

    /// Small basic-block vision path with 64 output channels.
    pub fn vision_desk() -> Self {
        Self {
            in_channels: 3,
            stem: StemSpec {
                kernel: (3, 3),
                stride: (2, 2),
                width: 8,
                max_pool: true,
            },
            kernel: (3, 3),
            block: BlockKind::Basic,
            stages: Self::desk_stages([8, 16, 32, 64], [(1, 1), (2, 2), (2, 2), (2, 2)]),
            batch_norm: true,
            init: Init::Kaiming,
        }
    }

    pub fn text_desk(dim: usize) -> Self {
        Self {
            in_channels: dim,
            // Wider than the vision path early on: a narrow 1×1 stem
            // squeezes the word embeddings too hard to learn from.
            stem: StemSpec {
                kernel: (1, 1),
                stride: (1, 1),
                width: 32,
                max_pool: false,
            },
            kernel: (1, 3),
            block: BlockKind::Basic,
            stages: Self::desk_stages([32, 32, 64, 64], [(1, 1), (1, 2), (1, 2), (1, 1)]),
            batch_norm: true,
            init: Init::Xavier,
        }
    }

    fn desk_stages(widths: [usize; 4], strides: [(usize, usize); 4]) -> Vec<StageSpec> {
        widths
            .into_iter()
            .zip(strides)
            .map(|(width, stride)| StageSpec {
                blocks: 1,
                width,
                stride,
            })
            .collect()
    }

    pub fn out_channels(&self) -> usize {
        self.stages.last().map_or(self.stem.width, |s| s.width * self.block.expansion())
    }

    /// Total downsampling factor `(height, width)` of the path.
    pub fn downsampling(&self) -> (usize, usize) {
        let mut f = self.stem.stride;
        if self.stem.max_pool {
            f = (f.0 * 2, f.1 * 2);
        }
        for s in &self.stages {
            f = (f.0 * s.stride.0, f.1 * s.stride.1);
        }
        f
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.stem.width == 0 {
            return Err(Error::Config("path channels must be positive".into()));
        }
        if self.stages.is_empty() {
            return Err(Error::Config("path needs at least one stage".into()));
        }
        let odd = |k: (usize, usize)| k.0 % 2 == 1 && k.1 % 2 == 1;
        if !odd(self.kernel) || !odd(self.stem.kernel) {
            return Err(Error::Config("kernel extents must be odd".into()));
        }
        for s in &self.stages {
            if s.blocks == 0 || s.width == 0 || s.stride.0 == 0 || s.stride.1 == 0 {
                return Err(Error::Config(format!("invalid stage {s:?}")));
            }
        }
        Ok(())
    }

    /// Output map extents for an `h×w` input, computed with the same
    /// convolution geometry the forward pass uses. No weights are needed.
    pub fn output_shape(&self, h: usize, w: usize) -> Result<(usize, usize, usize)> {
        self.validate()?;
        let (dh, dw) = self.downsampling();
        if !h.is_multiple_of(dh) || !w.is_multiple_of(dw) {
            return Err(Error::Config(format!(
                "input {h}×{w} is not divisible by the path's downsampling {dh}×{dw}"
            )));
        }
        let conv = |shape: [usize; 4], k: (usize, usize), cout: usize, stride| -> Result<[usize; 4]> {
            Ok(Conv2dGeometry::new(&shape, &[k.0, k.1, shape[3], cout], stride, same_padding(k))?.out_shape())
        };
        let mut shape = conv([1, h, w, self.in_channels], self.stem.kernel, self.stem.width, self.stem.stride)?;
        if self.stem.max_pool {
            shape = Pool2dGeometry::new(&shape, (3, 3), (2, 2), (1, 1))?.out_shape();
        }
        let e = self.block.expansion();
        for s in &self.stages {
            for b in 0..s.blocks {
                let stride = if b == 0 { s.stride } else { (1, 1) };
                shape = conv(shape, self.kernel, s.width * e, stride)?;
            }
        }
        Ok((shape[1], shape[2], shape[3]))
    }
}

#[derive(Clone, Debug)]
pub(crate) struct ConvLayer {
    pub weight: ParamId,
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub bn: Option<BnIds>,
}

struct Builder<'s, R> {
    store: &'s mut ParamStore<f32>,
    rng: &'s mut R,
    init: Init,
    batch_norm: bool,
}

impl<R: Rng> Builder<'_, R> {
    fn conv(
        &mut self,
        name: &str,
        k: (usize, usize),
        cin: usize,
        cout: usize,
        stride: (usize, usize),
    ) -> Result<ConvLayer> {
        let fan_in = k.0 * k.1 * cin;
        let fan_out = k.0 * k.1 * cout;
        let w = init_tensor(&[k.0, k.1, cin, cout], fan_in, fan_out, self.init, self.rng);
        let weight = self.store.add_param(&format!("{name}.weight"), w)?;
        let bn = if self.batch_norm {
            Some(BnIds {
                gamma: self.store.add_param(&format!("{name}.bn.gamma"), Tensor::full([cout], 1.0))?,
                beta: self.store.add_param(&format!("{name}.bn.beta"), Tensor::zeros([cout]))?,
                running_mean: self.store.add_buffer(&format!("{name}.bn.running_mean"), Tensor::zeros([cout]))?,
                running_var: self.store.add_buffer(&format!("{name}.bn.running_var"), Tensor::full([cout], 1.0))?,
            })
        } else {
            None
        };
        Ok(ConvLayer {
            weight,
            stride,
            padding: same_padding(k),
            bn,
        })
    }
}

/// Which normalization layers normalize with batch statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
    /// Stages from this index on train (the stem is stage 0); earlier
    /// layers use running statistics.
    TrainFrom(usize),
}

impl BnMode {
    pub fn trains(self, stage: usize) -> bool {
        match self {
            BnMode::Train => true,
            BnMode::Eval => false,
            BnMode::TrainFrom(first) => stage >= first,
        }
    }
}

#[derive(Clone, Debug)]
struct Block {
    stage: usize,
    convs: Vec<ConvLayer>,
    shortcut: Option<ConvLayer>,
}

/// One residual path with parameters registered in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct ResidualPath {
    config: PathConfig,
    prefix: String,
    stem: ConvLayer,
    blocks: Vec<Block>,
}

pub(crate) const BN_EPS: f64 = 1e-5;

impl ResidualPath {
    pub fn build<R: Rng>(config: PathConfig, prefix: &str, store: &mut ParamStore<f32>, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut b = Builder {
            store,
            rng,
            init: config.init,
            batch_norm: config.batch_norm,
        };
        let stem = b.conv(&format!("{prefix}.stem"), config.stem.kernel, config.in_channels, config.stem.width, config.stem.stride)?;
        let e = config.block.expansion();
        let mut cin = config.stem.width;
        let mut blocks = Vec::new();
        for (si, s) in config.stages.iter().enumerate() {
            for bi in 0..s.blocks {
                let name = format!("{prefix}.stage{}.block{bi}", si + 1);
                let stride = if bi == 0 { s.stride } else { (1, 1) };
                let cout = s.width * e;
                let convs = match config.block {
                    BlockKind::Basic => vec![
                        b.conv(&format!("{name}.conv1"), config.kernel, cin, s.width, stride)?,
                        b.conv(&format!("{name}.conv2"), config.kernel, s.width, s.width, (1, 1))?,
                    ],
                    BlockKind::Bottleneck => vec![
                        b.conv(&format!("{name}.conv1"), (1, 1), cin, s.width, (1, 1))?,
                        b.conv(&format!("{name}.conv2"), config.kernel, s.width, s.width, stride)?,
                        b.conv(&format!("{name}.conv3"), (1, 1), s.width, cout, (1, 1))?,
                    ],
                };
                let shortcut = if stride != (1, 1) || cin != cout {
                    Some(b.conv(&format!("{name}.shortcut"), (1, 1), cin, cout, stride)?)
                } else {
                    None
                };
                blocks.push(Block {
                    stage: si + 1,
                    convs,
                    shortcut,
                });
                cin = cout;
            }
        }
        Ok(Self {
            config,
            prefix: prefix.to_owned(),
            stem,
            blocks,
        })
    }

    pub fn config(&self) -> &PathConfig {
        &self.config
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    fn conv<T: Scalar>(&self, b: &mut Binder<'_, T>, layer: &ConvLayer, x: Var, train: bool, relu: bool) -> Result<Var> {
        let w = b.var(layer.weight);
        let mut y = b.tape.conv2d(x, w, layer.stride, layer.padding)?;
        if let Some(ids) = layer.bn {
            let (gamma, beta) = (b.var(ids.gamma), b.var(ids.beta));
            let eps = T::from_f64(BN_EPS).unwrap();
            let mode = if train {
                NormMode::Train { eps }
            } else {
                NormMode::Eval {
                    mean: b.store().get(ids.running_mean).data().to_vec(),
                    var: b.store().get(ids.running_var).data().to_vec(),
                    eps,
                }
            };
            let (out, stats) = b.tape.batch_norm(y, gamma, beta, mode)?;
            if let Some(stats) = stats {
                b.record_stats(ids, stats);
            }
            y = out;
        }
        if relu {
            y = b.tape.relu(y)?;
        }
        Ok(y)
    }

    /// `N×H×W×Cin → N×(H/dh)×(W/dw)×C_f`.
    pub fn forward<T: Scalar>(&self, b: &mut Binder<'_, T>, input: Var, mode: BnMode) -> Result<Var> {
        let shape = b.tape.shape(input).to_vec();
        let [_, h, w, c] = shape[..] else {
            return Err(Error::Dimension(format!("path input must be N×H×W×C, got {shape:?}")));
        };
        if c != self.config.in_channels {
            return Err(Error::Dimension(format!(
                "path expects {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        self.config.output_shape(h, w)?;
        let mut x = self.conv(b, &self.stem, input, mode.trains(0), true)?;
        if self.config.stem.max_pool {
            x = b.tape.max_pool2d(x, (3, 3), (2, 2), (1, 1))?;
        }
        for block in &self.blocks {
            let train = mode.trains(block.stage);
            let mut y = x;
            let last = block.convs.len() - 1;
            for (i, layer) in block.convs.iter().enumerate() {
                y = self.conv(b, layer, y, train, i != last)?;
            }
            let skip = match &block.shortcut {
                Some(layer) => self.conv(b, layer, x, train, false)?,
                None => x,
            };
            let sum = b.tape.add(y, skip)?;
            x = b.tape.relu(sum)?;
        }
        Ok(x)
    }
}
