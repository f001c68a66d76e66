//! Patch encoder, looped block with time-conditioned gates, and decoder heads.

mod layers;
pub mod params;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;
use crate::schedule::{partition, ScheduleError};
use crate::tensor::{Tape, Tensor, TensorError, Var};
use layers::{
    block, conv3x3, init_block, init_linear, init_norm, init_zero_linear, linear, mlp, norm, p, patchify,
    rope_on_tape, Rope, Scales,
};
pub use layers::pixel_shuffle;
pub use params::{Binder, ParamStore};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("missing parameter {0:?}")]
    MissingParam(String),
    #[error("non-finite activations at loop step {step}")]
    NonFinite { step: usize },
}

type Result<T> = std::result::Result<T, ModelError>;

/// How the recurrent stack shares weights and consumes time conditioning.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockVariant {
    /// A separate block per step, up to `k_max`; no gates.
    Decoupled,
    /// One block reused for every step; no gates.
    Shared,
    /// Shared block with gated attention and MLP branches.
    SharedResidualGates,
    /// Shared block with branch gates and an output (state) gate.
    SharedStateGate,
}

impl std::str::FromStr for BlockVariant {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "decoupled" => Ok(Self::Decoupled),
            "shared" => Ok(Self::Shared),
            "shared_residual_gates" => Ok(Self::SharedResidualGates),
            "shared_state_gate" => Ok(Self::SharedStateGate),
            other => Err(format!(
                "unknown block variant {other:?} (expected decoupled, shared, shared_residual_gates or shared_state_gate)"
            )),
        }
    }
}

impl BlockVariant {
    fn gate_outputs(self) -> usize {
        match self {
            BlockVariant::Decoupled | BlockVariant::Shared => 0,
            BlockVariant::SharedResidualGates => 4,
            BlockVariant::SharedStateGate => 6,
        }
    }
}

/// Which depth head decodes the depth branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthHead {
    /// Linear pixel-shuffle head without confidence.
    #[default]
    Linear,
    /// Convolutional upsampling head emitting depth and confidence.
    Conv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub patch: usize,
    pub width: usize,
    pub encoder_depth: usize,
    pub registers: usize,
    pub head_dim: usize,
    pub mlp_ratio: usize,
    pub decoder_width: usize,
    pub decoder_depth: usize,
    pub decoder_head_dim: usize,
    pub variant: BlockVariant,
    /// Number of distinct blocks for the decoupled variant.
    pub k_max: usize,
    pub layer_scale_init: f64,
    pub rope_base: f64,
    pub init_std: f64,
    /// Dimensions of the sinusoidal embedding per time value.
    pub time_embed_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_height: 64,
            image_width: 64,
            patch: 8,
            width: 192,
            encoder_depth: 2,
            registers: 4,
            head_dim: 64,
            mlp_ratio: 4,
            decoder_width: 96,
            decoder_depth: 2,
            decoder_head_dim: 32,
            variant: BlockVariant::SharedStateGate,
            k_max: 16,
            layer_scale_init: 1e-5,
            rope_base: 100.0,
            init_std: 0.02,
            time_embed_dim: 64,
        }
    }
}

impl ModelConfig {
    /// Small configuration for gradient checks and fast tests.
    pub fn micro() -> Self {
        Self {
            image_height: 32,
            image_width: 32,
            width: 64,
            encoder_depth: 1,
            registers: 2,
            decoder_width: 32,
            decoder_depth: 1,
            decoder_head_dim: 16,
            k_max: 4,
            ..Self::default()
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.image_height / self.patch, self.image_width / self.patch)
    }

    pub fn patches(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    /// Tokens per view: camera, registers, patches.
    pub fn tokens_per_view(&self) -> usize {
        1 + self.registers + self.patches()
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(ModelError::Config(m));
        if self.patch < 2 || self.patch % 2 != 0 {
            return err(format!("patch size must be even and >= 2, got {}", self.patch));
        }
        if self.image_height == 0
            || self.image_width == 0
            || self.image_height % self.patch != 0
            || self.image_width % self.patch != 0
        {
            return err(format!(
                "image size {}x{} not divisible by patch {}",
                self.image_height, self.image_width, self.patch
            ));
        }
        for (label, dim, head) in [
            ("width", self.width, self.head_dim),
            ("decoder_width", self.decoder_width, self.decoder_head_dim),
        ] {
            if head == 0 || head % 4 != 0 || dim == 0 || dim % head != 0 {
                return err(format!("{label} {dim} must be a positive multiple of head dim {head}, itself a multiple of 4"));
            }
        }
        if self.decoder_width % 4 != 0 {
            return err(format!("decoder_width {} must be divisible by 4", self.decoder_width));
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            return err(format!("time_embed_dim {} must be even and positive", self.time_embed_dim));
        }
        if self.k_max == 0 || self.mlp_ratio == 0 {
            return err("k_max and mlp_ratio must be positive".into());
        }
        Ok(())
    }
}

/// Sinusoidal embedding of `t` with geometric frequencies from 1 to 1e4:
/// `[sin(t·f_0..), cos(t·f_0..)]`.
pub fn time_embedding(t: f64, dim: usize) -> Vec<f64> {
    let n = dim / 2;
    let freq = |i: usize| {
        if n == 1 {
            1.0
        } else {
            1e4f64.powf(i as f64 / (n - 1) as f64)
        }
    };
    let mut out: Vec<f64> = (0..n).map(|i| (t * freq(i)).sin()).collect();
    out.extend((0..n).map(|i| (t * freq(i)).cos()));
    out
}

/// Model parameters and configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

/// Tape handles for one prediction.
#[derive(Clone, Copy, Debug)]
pub struct PredictionVars {
    /// `[V, H, W, 6]`: origin then direction.
    pub rays: Var,
    /// `[V, H, W]`.
    pub depth: Var,
    /// `[V, H, W]`, convolutional head only.
    pub confidence: Option<Var>,
    /// `[V, 9]`: translation, unit quaternion (w, x, y, z), fov (x, y).
    pub camera: Var,
    /// `[V, H, W, 3]`: `origin + depth·direction`.
    pub points: Var,
}

/// Materialized prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<T> {
    pub rays: Tensor<T>,
    pub depth: Tensor<T>,
    pub confidence: Option<Tensor<T>>,
    pub camera: Tensor<T>,
    pub points: Tensor<T>,
}

impl PredictionVars {
    pub fn values<T: Scalar>(&self, tape: &Tape<T>) -> Prediction<T> {
        Prediction {
            rays: tape.value(self.rays).clone(),
            depth: tape.value(self.depth).clone(),
            confidence: self.confidence.map(|c| tape.value(c).clone()),
            camera: tape.value(self.camera).clone(),
            points: tape.value(self.points).clone(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub prediction: PredictionVars,
    /// `z_0..z_K` when traced, otherwise only `z_K`.
    pub states: Vec<Var>,
    /// Global-attention probabilities `[1, heads, V·T, V·T]` per loop step.
    pub global_attention: Vec<Var>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    pub depth_head: DepthHead,
    pub trace: bool,
}

/// Per-call constants shared by every step.
struct Layout {
    views: usize,
    frame_rope: Rope,
    decoder_rope: Rope,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = params::Init::new(seed);
        let c = &config;
        let std = c.init_std;
        let (pp, d) = (c.patch * c.patch, c.decoder_width);

        init_linear(&mut store, &mut init, "encoder.patch", pp * 3, c.width, std);
        store.insert("encoder.pos", init.normal(&[c.patches(), c.width], std));
        for i in 0..c.encoder_depth {
            init_block(&mut store, &mut init, &format!("encoder.block{i}"), c.width, c.head_dim, c.mlp_ratio, std, None);
        }
        init_norm(&mut store, "encoder.norm", c.width);
        store.insert("tokens.camera_ref", init.normal(&[1, c.width], std));
        store.insert("tokens.camera_other", init.normal(&[1, c.width], std));
        store.insert("tokens.registers", init.normal(&[c.registers, c.width], std));

        let stack = if c.variant == BlockVariant::Decoupled { c.k_max } else { 1 };
        for i in 0..stack {
            for sub in ["frame", "global"] {
                init_block(
                    &mut store,
                    &mut init,
                    &format!("loop.{i}.{sub}"),
                    c.width,
                    c.head_dim,
                    c.mlp_ratio,
                    std,
                    Some(c.layer_scale_init),
                );
            }
        }
        let gates = c.variant.gate_outputs();
        if gates > 0 {
            let hidden = 4 * c.time_embed_dim;
            init_linear(&mut store, &mut init, "gate.fc1", 2 * c.time_embed_dim, hidden, std);
            init_zero_linear(&mut store, "gate.fc2", hidden, gates * c.width);
        }

        for branch in ["ray_dec", "depth_dec"] {
            init_norm(&mut store, &format!("{branch}.in_norm"), c.width);
            init_linear(&mut store, &mut init, &format!("{branch}.proj"), c.width, d, std);
            for i in 0..c.decoder_depth {
                init_block(&mut store, &mut init, &format!("{branch}.block{i}"), d, c.decoder_head_dim, c.mlp_ratio, std, None);
            }
            init_norm(&mut store, &format!("{branch}.out_norm"), d);
        }
        init_linear(&mut store, &mut init, "ray_head", d, pp * 6, std);
        let ray_bias: Vec<f64> = (0..pp * 6).map(|i| if i % 6 == 5 { 1.0 } else { 0.0 }).collect();
        store.insert("ray_head.b", Tensor::from_f64(&[pp * 6], &ray_bias).expect("sized"));
        init_linear(&mut store, &mut init, "cam_head.fc1", d, d, std);
        init_linear(&mut store, &mut init, "cam_head.fc2", d, 9, std);
        store.insert(
            "cam_head.fc2.b",
            Tensor::from_f64(&[9], &[0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0]).expect("sized"),
        );
        init_linear(&mut store, &mut init, "depth_head", d, pp, std);
        store.insert("depth_head.b", Tensor::full(&[pp], T::one()));

        let (c1, c2) = (d / 2, d / 4);
        let f1 = c.patch / 2;
        init_linear(&mut store, &mut init, "depth_conv.up1", d, f1 * f1 * c1, std);
        init_linear(&mut store, &mut init, "depth_conv.conv1", 9 * c1, c1, std);
        init_linear(&mut store, &mut init, "depth_conv.up2", c1, 4 * c2, std);
        init_linear(&mut store, &mut init, "depth_conv.conv2", 9 * c2, c2, std);
        init_linear(&mut store, &mut init, "depth_conv.out", c2, 2, std);
        // softplus(0.5413) ≈ 1
        store.insert("depth_conv.out.b", Tensor::full(&[2], T::lit(0.5413)));

        Ok(Self { config, params: store })
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    /// Unique parameters of the recurrent stack (gate MLP excluded).
    pub fn recurrent_param_count(&self) -> usize {
        self.params.count_prefix("loop.")
    }

    pub fn gate_param_count(&self) -> usize {
        self.params.count_prefix("gate.")
    }

    fn layout(&self, tape: &mut Tape<T>, views: usize) -> Layout {
        let c = &self.config;
        let (gh, gw) = c.grid();
        let specials = 1 + c.registers;
        Layout {
            views,
            frame_rope: rope_on_tape(tape, specials, gh, gw, c.head_dim, c.rope_base),
            decoder_rope: rope_on_tape(tape, specials, gh, gw, c.decoder_head_dim, c.rope_base),
        }
    }

    fn check_images(&self, images: &Tensor<T>) -> Result<usize> {
        let c = &self.config;
        let s = images.shape();
        if s.len() != 4 || s[3] != 3 || s[0] == 0 {
            return Err(ModelError::Input(format!("images must be [V, H, W, 3], got {s:?}")));
        }
        if s[1] % c.patch != 0 || s[2] % c.patch != 0 {
            return Err(ModelError::Input(format!(
                "image size {}x{} not divisible by patch size {}",
                s[1], s[2], c.patch
            )));
        }
        if s[1] != c.image_height || s[2] != c.image_width {
            return Err(ModelError::Input(format!(
                "image size {}x{} does not match configured {}x{}",
                s[1], s[2], c.image_height, c.image_width
            )));
        }
        Ok(s[0])
    }

    /// Initial state `z_0: [V, 1 + R + N, C]` from images `[V, H, W, 3]` in [0, 1].
    pub fn encode_views(&self, tape: &mut Tape<T>, b: &mut Binder<'_, T>, images: &Tensor<T>) -> Result<Var> {
        let views = self.check_images(images)?;
        let layout = self.layout(tape, views);
        self.encode(tape, b, images, &layout)
    }

    fn encode(&self, tape: &mut Tape<T>, b: &mut Binder<'_, T>, images: &Tensor<T>, layout: &Layout) -> Result<Var> {
        let c = &self.config;
        let v = layout.views;
        let (half, quarter) = (T::lit(0.5), T::lit(0.25));
        let normed = Tensor::new(
            images.shape().to_vec(),
            images.data().iter().map(|&x| (x - half) / quarter).collect(),
        )?;
        let img = tape.constant(normed);
        let patches = patchify(tape, img, c.patch)?;
        let mut x = linear(tape, b, patches, "encoder.patch")?;
        let pos = p(tape, b, "encoder.pos")?;
        x = tape.add(x, pos)?;
        // Encoder blocks see only patch tokens; rope rows for specials are skipped.
        let specials = 1 + c.registers;
        let rope = Rope {
            cos: tape.narrow(layout.frame_rope.cos, 0, specials, c.patches())?,
            sin: tape.narrow(layout.frame_rope.sin, 0, specials, c.patches())?,
            m: layout.frame_rope.m,
        };
        for i in 0..c.encoder_depth {
            x = block(tape, b, x, &format!("encoder.block{i}"), c.head_dim, Some(&rope), false, Scales::default())?.0;
        }
        x = norm(tape, b, x, "encoder.norm")?;

        let cam_ref = p(tape, b, "tokens.camera_ref")?;
        let cam_other = p(tape, b, "tokens.camera_other")?;
        let mut cams = vec![cam_ref];
        cams.extend(std::iter::repeat_n(cam_other, v - 1));
        let cams = tape.concat(&cams, 0)?;
        let cams = tape.reshape(cams, &[v, 1, c.width])?;
        let reg = p(tape, b, "tokens.registers")?;
        let reg = tape.reshape(reg, &[1, c.registers, c.width])?;
        let regs = tape.concat(&vec![reg; v], 0)?;
        Ok(tape.concat(&[cams, regs, x], 1)?)
    }

    /// Channel scales `(s_attn, s_mlp, s_out)` for the frame and global
    /// sub-blocks, each of length C; `None` entries mean no gate.
    pub fn gate_scales(&self, tape: &mut Tape<T>, b: &mut Binder<'_, T>, t0: f64, t1: f64) -> Result<[Option<Var>; 6]> {
        let c = &self.config;
        let n = self.config.variant.gate_outputs();
        if n == 0 {
            return Ok([None; 6]);
        }
        let mut emb = time_embedding(t0, c.time_embed_dim);
        emb.extend(time_embedding(t1, c.time_embed_dim));
        let emb = tape.constant(Tensor::from_f64(&[1, emb.len()], &emb)?);
        let h = mlp(tape, b, emb, "gate")?;
        let s = tape.add_scalar(h, T::one())?;
        let s = tape.reshape(s, &[n * c.width])?;
        let parts = tape.split(s, 0, &vec![c.width; n])?;
        Ok(if n == 6 {
            [Some(parts[0]), Some(parts[1]), Some(parts[2]), Some(parts[3]), Some(parts[4]), Some(parts[5])]
        } else {
            [Some(parts[0]), Some(parts[1]), None, Some(parts[2]), Some(parts[3]), None]
        })
    }

    /// `z_{k+1} = f(z_k, t_k, t_{k+1})`: frame sub-block then global sub-block.
    ///
    /// Returns the new state and the global attention probabilities.
    pub fn loop_step(
        &self,
        tape: &mut Tape<T>,
        b: &mut Binder<'_, T>,
        z: Var,
        step: usize,
        t0: f64,
        t1: f64,
    ) -> Result<(Var, Var)> {
        let views = tape.shape(z)[0];
        let layout = self.layout(tape, views);
        self.step(tape, b, z, step, t0, t1, &layout)
    }

    #[allow(clippy::too_many_arguments)]
    fn step(
        &self,
        tape: &mut Tape<T>,
        b: &mut Binder<'_, T>,
        z: Var,
        step: usize,
        t0: f64,
        t1: f64,
        layout: &Layout,
    ) -> Result<(Var, Var)> {
        let c = &self.config;
        let index = match c.variant {
            BlockVariant::Decoupled if step >= c.k_max => {
                return Err(ModelError::Input(format!(
                    "decoupled variant has {} blocks, step {step} requested",
                    c.k_max
                )))
            }
            BlockVariant::Decoupled => step,
            _ => 0,
        };
        let non_finite = |e: ModelError| match e {
            ModelError::Tensor(TensorError::NonFinite { .. }) => ModelError::NonFinite { step },
            other => other,
        };
        let g = self.gate_scales(tape, b, t0, t1).map_err(non_finite)?;
        let frame = Scales { attn: g[0], mlp: g[1], out: g[2] };
        let global = Scales { attn: g[3], mlp: g[4], out: g[5] };
        let (z1, _) = block(
            tape,
            b,
            z,
            &format!("loop.{index}.frame"),
            c.head_dim,
            Some(&layout.frame_rope),
            true,
            frame,
        )
        .map_err(non_finite)?;
        let shape = tape.shape(z1).to_vec();
        let flat = tape.reshape(z1, &[1, shape[0] * shape[1], shape[2]])?;
        let (z2, probs) = block(tape, b, flat, &format!("loop.{index}.global"), c.head_dim, None, true, global)
            .map_err(non_finite)?;
        let out = tape.reshape(z2, &shape)?;
        if !tape.value(out).all_finite() {
            return Err(ModelError::NonFinite { step });
        }
        Ok((out, probs))
    }

    fn decoder(&self, tape: &mut Tape<T>, b: &mut Binder<'_, T>, z: Var, branch: &str, layout: &Layout) -> Result<Var> {
        let c = &self.config;
        let mut x = norm(tape, b, z, &format!("{branch}.in_norm"))?;
        x = linear(tape, b, x, &format!("{branch}.proj"))?;
        for i in 0..c.decoder_depth {
            x = block(
                tape,
                b,
                x,
                &format!("{branch}.block{i}"),
                c.decoder_head_dim,
                Some(&layout.decoder_rope),
                false,
                Scales::default(),
            )?
            .0;
        }
        norm(tape, b, x, &format!("{branch}.out_norm"))
    }

    /// Decode a state `[V, T, C]` into rays, depth, camera and points.
    pub fn decode_heads(&self, tape: &mut Tape<T>, b: &mut Binder<'_, T>, z: Var, head: DepthHead) -> Result<PredictionVars> {
        let views = tape.shape(z)[0];
        let layout = self.layout(tape, views);
        self.decode(tape, b, z, head, &layout)
    }

    fn decode(&self, tape: &mut Tape<T>, b: &mut Binder<'_, T>, z: Var, head: DepthHead, layout: &Layout) -> Result<PredictionVars> {
        let c = &self.config;
        let v = layout.views;
        let (gh, gw) = c.grid();
        let (h, w) = (c.image_height, c.image_width);
        let specials = 1 + c.registers;

        let ray_tokens = self.decoder(tape, b, z, "ray_dec", layout)?;
        let patches = tape.narrow(ray_tokens, 1, specials, c.patches())?;
        let rays = linear(tape, b, patches, "ray_head")?;
        let rays = pixel_shuffle(tape, rays, gh, gw, c.patch, 6)?;

        let cam = tape.narrow(ray_tokens, 1, 0, 1)?;
        let cam = tape.reshape(cam, &[v, c.decoder_width])?;
        let cam = mlp(tape, b, cam, "cam_head")?;
        let parts = tape.split(cam, 1, &[3, 4, 2])?;
        let qn = tape.norm_last(parts[1])?;
        let qn = tape.expand_last(qn, 4)?;
        let q = tape.div(parts[1], qn)?;
        let camera = tape.concat(&[parts[0], q, parts[2]], 1)?;

        let depth_tokens = self.decoder(tape, b, z, "depth_dec", layout)?;
        let patches = tape.narrow(depth_tokens, 1, specials, c.patches())?;
        let (depth, confidence) = match head {
            DepthHead::Linear => {
                let d = linear(tape, b, patches, "depth_head")?;
                let d = pixel_shuffle(tape, d, gh, gw, c.patch, 1)?;
                (tape.reshape(d, &[v, h, w])?, None)
            }
            DepthHead::Conv => {
                let (c1, c2) = (c.decoder_width / 2, c.decoder_width / 4);
                let f1 = c.patch / 2;
                let x = linear(tape, b, patches, "depth_conv.up1")?;
                let x = pixel_shuffle(tape, x, gh, gw, f1, c1)?;
                let x = conv3x3(tape, b, x, "depth_conv.conv1")?;
                let x = tape.gelu(x)?;
                let x = tape.reshape(x, &[v, gh * f1 * gw * f1, c1])?;
                let x = linear(tape, b, x, "depth_conv.up2")?;
                let x = pixel_shuffle(tape, x, gh * f1, gw * f1, 2, c2)?;
                let x = conv3x3(tape, b, x, "depth_conv.conv2")?;
                let x = tape.gelu(x)?;
                let x = linear(tape, b, x, "depth_conv.out")?;
                let x = tape.softplus(x)?;
                let parts = tape.split(x, 3, &[1, 1])?;
                (tape.reshape(parts[0], &[v, h, w])?, Some(tape.reshape(parts[1], &[v, h, w])?))
            }
        };

        let ray_parts = tape.split(rays, 3, &[3, 3])?;
        let d3 = tape.expand_last(depth, 3)?;
        let scaled = tape.mul(d3, ray_parts[1])?;
        let points = tape.add(ray_parts[0], scaled)?;
        Ok(PredictionVars {
            rays,
            depth,
            confidence,
            camera,
            points,
        })
    }

    /// Encode, run `K` loop steps on the uniform partition, and decode.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        b: &mut Binder<'_, T>,
        images: &Tensor<T>,
        k: usize,
        opts: ForwardOptions,
    ) -> Result<ForwardOutput> {
        let times = partition(k)?;
        self.forward_with_times(tape, b, images, &times, opts)
    }

    /// Like [`Model::forward`] with an explicit increasing time sequence `t_0..t_K`.
    pub fn forward_with_times(
        &self,
        tape: &mut Tape<T>,
        b: &mut Binder<'_, T>,
        images: &Tensor<T>,
        times: &[f64],
        opts: ForwardOptions,
    ) -> Result<ForwardOutput> {
        if times.len() < 2 {
            return Err(ScheduleError::InvalidStepCount(times.len().saturating_sub(1)).into());
        }
        if times.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(ModelError::Input(format!("time sequence must be increasing: {times:?}")));
        }
        let views = self.check_images(images)?;
        let layout = self.layout(tape, views);
        let mut z = self.encode(tape, b, images, &layout)?;
        let mut states = vec![z];
        let mut global_attention = Vec::with_capacity(times.len() - 1);
        for (k, w) in times.windows(2).enumerate() {
            let (next, probs) = self.step(tape, b, z, k, w[0], w[1], &layout)?;
            z = next;
            states.push(z);
            global_attention.push(probs);
        }
        let prediction = self.decode(tape, b, z, opts.depth_head, &layout)?;
        if !opts.trace {
            states = vec![z];
        }
        Ok(ForwardOutput {
            prediction,
            states,
            global_attention,
        })
    }

    /// Forward on a fresh tape with every parameter frozen.
    pub fn predict(&self, images: &Tensor<T>, k: usize, head: DepthHead) -> Result<Prediction<T>> {
        let mut tape = Tape::new();
        let mut b = Binder::frozen(&self.params);
        let out = self.forward(&mut tape, &mut b, images, k, ForwardOptions { depth_head: head, trace: false })?;
        Ok(out.prediction.values(&tape))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn time_embedding_endpoints() {
        let e = time_embedding(0.0, 64);
        assert_eq!(e.len(), 64);
        assert!(e[..32].iter().all(|&s| s == 0.0));
        assert!(e[32..].iter().all(|&c| c == 1.0));
        let e = time_embedding(1.0, 64);
        assert!((e[0] - 1f64.sin()).abs() < 1e-15);
        assert!((e[31] - 1e4f64.sin()).abs() < 1e-9);
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        assert!(ModelConfig::micro().validate().is_ok());
        let bad = ModelConfig {
            image_height: 30,
            ..ModelConfig::micro()
        };
        assert!(matches!(bad.validate(), Err(ModelError::Config(_))));
        let bad = ModelConfig {
            width: 100,
            ..ModelConfig::micro()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn gate_output_layer_is_zero() {
        let m = Model::<f32>::new(ModelConfig::micro(), 1).unwrap();
        assert!(m.params.get("gate.fc2.w").unwrap().data().iter().all(|&x| x == 0.0));
        assert!(m.params.get("gate.fc2.b").unwrap().data().iter().all(|&x| x == 0.0));
    }
}
