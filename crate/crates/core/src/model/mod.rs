//! The dual-path network: residual CNNs for images and text, global
//! pooling, gated blocks, descriptor heads and the shared classifier.

mod params;
mod path;

pub use params::{update_running_stats, Binder, BnIds, ParamId, ParamStore};
pub use path::{BlockKind, BnMode, Init, PathConfig, ResidualPath, StageSpec, StemSpec};

use crate::error::{Error, Result};
use crate::rng::substream;
use crate::tensor::{Scalar, Tape, Tensor, Var};
use path::init_tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PoolMode {
    Gap,
    Gmp,
    /// Average- and max-pooled vectors concatenated.
    Both,
}

impl std::str::FromStr for PoolMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gap" => Ok(PoolMode::Gap),
            "gmp" => Ok(PoolMode::Gmp),
            "both" => Ok(PoolMode::Both),
            other => Err(Error::Config(format!("unknown pooling mode `{other}` (gap|gmp|both)"))),
        }
    }
}

impl std::fmt::Display for PoolMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PoolMode::Gap => "gap",
            PoolMode::Gmp => "gmp",
            PoolMode::Both => "both",
        })
    }
}

impl PoolMode {
    pub fn pooled_dim(self, channels: usize) -> usize {
        match self {
            PoolMode::Both => 2 * channels,
            _ => channels,
        }
    }
}

/// Full architecture description.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub vision: PathConfig,
    pub text: PathConfig,
    pub pool: PoolMode,
    pub gated: bool,
    /// Gated-block reduction ratio.
    pub reduction: usize,
    /// Identities seen by the shared classifier.
    pub num_classes: usize,
}

impl ModelConfig {
    /// Small network for CPU training on the synthetic data.
    pub fn desk(embed_dim: usize, num_classes: usize) -> Self {
        Self {
            vision: PathConfig::vision_desk(),
            text: PathConfig::text_desk(embed_dim),
            pool: PoolMode::Gmp,
            gated: true,
            reduction: 16,
            num_classes,
        }
    }

    pub fn full(embed_dim: usize, num_classes: usize) -> Self {
        Self {
            vision: PathConfig::vision_full(),
            text: PathConfig::text_full(embed_dim),
            pool: PoolMode::Gmp,
            gated: true,
            reduction: 16,
            num_classes,
        }
    }

    /// Descriptor length `C_f`.
    pub fn descriptor_dim(&self) -> usize {
        self.vision.out_channels()
    }

    pub fn validate(&self) -> Result<()> {
        self.vision.validate()?;
        self.text.validate()?;
        let c = self.vision.out_channels();
        if self.text.out_channels() != c {
            return Err(Error::Config(format!(
                "vision and text paths end in {c} and {} channels; they must agree",
                self.text.out_channels()
            )));
        }
        if self.text.stem.max_pool {
            return Err(Error::Config("the text path has no stem max-pool".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("classifier needs at least one identity".into()));
        }
        if self.gated {
            let dim = self.pool.pooled_dim(c);
            if self.reduction == 0 || !dim.is_multiple_of(self.reduction) {
                return Err(Error::Config(format!(
                    "reduction ratio {} must divide the pooled width {dim}",
                    self.reduction
                )));
            }
        }
        Ok(())
    }
}

/// Two-layer sigmoid gate without biases.
#[derive(Clone, Copy, Debug)]
pub struct GatedBlock {
    /// `(dim/r)×dim`.
    pub w1: ParamId,
    /// `dim×(dim/r)`.
    pub w2: ParamId,
}

/// Fully connected layer, `x·W + b` with `W` of shape `in×out`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// `f ⊗ σ(W2·ReLU(W1·f))` applied row-wise to `f: N×dim`.
pub fn gate_apply<T: Scalar>(tape: &mut Tape<T>, f: Var, w1: Var, w2: Var) -> Result<Var> {
    let (fs, s1, s2) = (tape.shape(f), tape.shape(w1), tape.shape(w2));
    let ok = fs.len() == 2
        && s1.len() == 2
        && s2.len() == 2
        && s1[1] == fs[1]
        && s2[0] == fs[1]
        && s2[1] == s1[0];
    if !ok {
        return Err(Error::Dimension(format!(
            "gate expects f N×d, W1 h×d, W2 d×h; got {fs:?}, {s1:?}, {s2:?}"
        )));
    }
    let h = tape.matmul_t(f, w1, false, true)?;
    let h = tape.relu(h)?;
    let g = tape.matmul_t(h, w2, false, true)?;
    let g = tape.sigmoid(g)?;
    tape.mul(f, g)
}

/// Pools an `N×H×W×C` map to `N×C` (or `N×2C`).
pub fn pool<T: Scalar>(tape: &mut Tape<T>, map: Var, mode: PoolMode) -> Result<Var> {
    match mode {
        PoolMode::Gap => tape.global_avg_pool(map),
        PoolMode::Gmp => tape.global_max_pool(map),
        PoolMode::Both => {
            let a = tape.global_avg_pool(map)?;
            let m = tape.global_max_pool(map)?;
            tape.concat(&[a, m])
        }
    }
}

pub fn linear<T: Scalar>(tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_bias(y, b)
}

/// Pool, optional gate, then the fully connected head.
pub fn pool_and_head<T: Scalar>(
    b: &mut Binder<'_, T>,
    map: Var,
    mode: PoolMode,
    gate: Option<&GatedBlock>,
    head: &Linear,
) -> Result<Var> {
    let mut f = pool(b.tape, map, mode)?;
    if let Some(gb) = gate {
        let (w1, w2) = (b.var(gb.w1), b.var(gb.w2));
        f = gate_apply(b.tape, f, w1, w2)?;
    }
    let (w, bias) = (b.var(head.weight), b.var(head.bias));
    linear(b.tape, f, w, bias)
}

/// Channel-summed absolute activations, scaled to unit l2 norm over the
/// spatial grid. Accepts `H×W×C` or `1×H×W×C`; an all-zero map stays zero.
pub fn activation_map(map: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (h, w, c) = match *map.shape() {
        [h, w, c] | [1, h, w, c] => (h, w, c),
        ref s => return Err(Error::Dimension(format!("activation map needs H×W×C, got {s:?}"))),
    };
    let mut a: Vec<f64> = map
        .data()
        .chunks(c)
        .map(|px| px.iter().map(|v| v.abs() as f64).sum())
        .collect();
    let norm = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        a.iter_mut().for_each(|v| *v /= norm);
    }
    Tensor::new(vec![h, w], a.into_iter().map(|v| v as f32).collect())
}

/// Parameter groups the trainer can freeze independently.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Group {
    VisionBackbone,
    TextBackbone,
    Heads,
    Classifier,
}

/// The complete network. Holds only the parameter handles; the values live
/// in a separate [`ParamStore`] so one layout can run at 32 or 64 bits.
#[derive(Clone, Debug)]
pub struct DualPath {
    config: ModelConfig,
    vision: ResidualPath,
    text: ResidualPath,
    vision_gate: Option<GatedBlock>,
    text_gate: Option<GatedBlock>,
    vision_head: Linear,
    text_head: Linear,
    classifier: ParamId,
}

pub const VISION_PREFIX: &str = "vision";
pub const TEXT_PREFIX: &str = "text";

impl DualPath {
    /// Registers every tensor in a fresh store, drawing weights from the
    /// `init` substream of `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<(Self, ParamStore<f32>)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = substream(seed, "init", &[]);
        let vision = ResidualPath::build(config.vision.clone(), VISION_PREFIX, &mut store, &mut rng)?;
        let text = ResidualPath::build(config.text.clone(), TEXT_PREFIX, &mut store, &mut rng)?;
        let c = config.descriptor_dim();
        let dim = config.pool.pooled_dim(c);
        let gate = |name: &str, init: Init, store: &mut ParamStore<f32>, rng: &mut _| -> Result<Option<GatedBlock>> {
            if !config.gated {
                return Ok(None);
            }
            let h = dim / config.reduction;
            Ok(Some(GatedBlock {
                w1: store.add_param(&format!("{name}.w1"), init_tensor(&[h, dim], dim, h, init, rng))?,
                w2: store.add_param(&format!("{name}.w2"), init_tensor(&[dim, h], h, dim, init, rng))?,
            }))
        };
        let vision_gate = gate("vision_gate", config.vision.init, &mut store, &mut rng)?;
        let text_gate = gate("text_gate", config.text.init, &mut store, &mut rng)?;
        let head = |name: &str, init: Init, store: &mut ParamStore<f32>, rng: &mut rand_chacha::ChaCha8Rng| -> Result<Linear> {
            Ok(Linear {
                weight: store.add_param(&format!("{name}.weight"), init_tensor(&[dim, c], dim, c, init, rng))?,
                bias: store.add_param(&format!("{name}.bias"), Tensor::zeros([c]))?,
            })
        };
        let vision_head = head("vision_head", config.vision.init, &mut store, &mut rng)?;
        let text_head = head("text_head", config.text.init, &mut store, &mut rng)?;
        let classifier = store.add_param(
            "classifier",
            init_tensor(&[c, config.num_classes], c, config.num_classes, Init::Xavier, &mut rng),
        )?;
        let model = Self {
            config,
            vision,
            text,
            vision_gate,
            text_gate,
            vision_head,
            text_head,
            classifier,
        };
        Ok((model, store))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vision_head(&self) -> &Linear {
        &self.vision_head
    }

    pub fn text_head(&self) -> &Linear {
        &self.text_head
    }

    pub fn vision_gate(&self) -> Option<&GatedBlock> {
        self.vision_gate.as_ref()
    }

    pub fn text_gate(&self) -> Option<&GatedBlock> {
        self.text_gate.as_ref()
    }

    pub fn classifier(&self) -> ParamId {
        self.classifier
    }

    /// Which group a stored tensor belongs to, from its name.
    pub fn group_of(name: &str) -> Group {
        if name.starts_with("vision.") {
            Group::VisionBackbone
        } else if name.starts_with("text.") {
            Group::TextBackbone
        } else if name == "classifier" {
            Group::Classifier
        } else {
            Group::Heads
        }
    }

    /// Vision backbone stage (1-based) of a tensor name; 0 for the stem.
    pub fn vision_stage_of(name: &str) -> Option<usize> {
        let rest = name.strip_prefix("vision.")?;
        if rest.starts_with("stem.") {
            return Some(0);
        }
        let digits: String = rest.strip_prefix("stage")?.chars().take_while(char::is_ascii_digit).collect();
        digits.parse().ok()
    }

    pub fn vision_map<T: Scalar>(&self, b: &mut Binder<'_, T>, images: Var, mode: BnMode) -> Result<Var> {
        self.vision.forward(b, images, mode)
    }

    pub fn text_map<T: Scalar>(&self, b: &mut Binder<'_, T>, embeds: Var, mode: BnMode) -> Result<Var> {
        self.text.forward(b, embeds, mode)
    }

    /// `N×H×W×3` images to `N×C_f` descriptors.
    pub fn encode_images<T: Scalar>(&self, b: &mut Binder<'_, T>, images: Var, mode: BnMode) -> Result<Var> {
        let map = self.vision_map(b, images, mode)?;
        pool_and_head(b, map, self.config.pool, self.vision_gate.as_ref(), &self.vision_head)
    }

    /// `N×1×L×D` embeddings to `N×C_f` descriptors.
    pub fn encode_text<T: Scalar>(&self, b: &mut Binder<'_, T>, embeds: Var, mode: BnMode) -> Result<Var> {
        let map = self.text_map(b, embeds, mode)?;
        pool_and_head(b, map, self.config.pool, self.text_gate.as_ref(), &self.text_head)
    }

    /// Inference descriptors for a batch of images, in chunks of `chunk`.
    pub fn embed_images(&self, store: &ParamStore<f32>, images: &Tensor<f32>, chunk: usize) -> Result<Tensor<f32>> {
        self.embed_chunks(store, images, chunk, |m, b, x| m.encode_images(b, x, BnMode::Eval))
    }

    pub fn embed_text(&self, store: &ParamStore<f32>, embeds: &Tensor<f32>, chunk: usize) -> Result<Tensor<f32>> {
        self.embed_chunks(store, embeds, chunk, |m, b, x| m.encode_text(b, x, BnMode::Eval))
    }

    fn embed_chunks(
        &self,
        store: &ParamStore<f32>,
        input: &Tensor<f32>,
        chunk: usize,
        f: impl Fn(&Self, &mut Binder<'_, f32>, Var) -> Result<Var>,
    ) -> Result<Tensor<f32>> {
        let n = input.shape()[0];
        let per = input.numel() / n;
        let c = self.config.descriptor_dim();
        let mut out = Vec::with_capacity(n * c);
        for start in (0..n).step_by(chunk.max(1)) {
            let end = (start + chunk.max(1)).min(n);
            let mut shape = input.shape().to_vec();
            shape[0] = end - start;
            let part = Tensor::new(shape, input.data()[start * per..end * per].to_vec())?;
            let mut tape = Tape::new();
            let mut b = Binder::frozen(&mut tape, store);
            let x = b.tape.constant(part);
            let d = f(self, &mut b, x)?;
            out.extend_from_slice(b.tape.value(d).data());
        }
        Tensor::new(vec![n, c], out)
    }
}
