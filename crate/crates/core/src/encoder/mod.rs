//! Spectrogram encoder, projection head and bilinear similarity.
//!
//! ```text
//! log-mel (T × 64)
//!   └─ per-excerpt standardization
//!   └─ stage × N: depthwise 3×3 → pointwise 1×1 → ReLU → 2×2 average pool
//!   └─ pointwise head to embed_dim → ReLU → global average pool   (embedding)
//!   └─ linear → layer norm → tanh                                   (projection)
//! s(y, ŷ) = yᵀ W ŷ
//! ```
//!
//! Every differentiable op has a hand-written backward pass; the model is
//! generic over [`Real`] so training runs in `f32` while gradient checks run
//! in `f64`.

mod checkpoint;
mod network;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{Array1, Array2, Array3, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use checkpoint::{Checkpoint, NamedTensor, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use network::{
    backward_encode, backward_project, bilinear_similarity, encode, encode_with_cache, project,
    project_with_cache, EncodeCache, ProjectCache, LAYER_NORM_EPS,
};

/// Floating point type the network can run in.
pub trait Real:
    Float
    + FromPrimitive
    + LinalgScalar
    + ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    const NAME: &'static str;

    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("representable")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("finite")
    }
}

impl Real for f32 {
    const NAME: &'static str = "f32";
}

impl Real for f64 {
    const NAME: &'static str = "f64";
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub stage_channels: Vec<usize>,
    pub embed_dim: usize,
    pub proj_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            stage_channels: vec![16, 32, 64],
            embed_dim: 128,
            proj_dim: 512,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.is_empty() || self.stage_channels.contains(&0) {
            return Err(Error::Config(
                "encoder needs at least one stage with positive channels".into(),
            ));
        }
        if self.embed_dim == 0 || self.proj_dim == 0 {
            return Err(Error::Config(
                "embed_dim and proj_dim must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Smallest input extent (frames or bands) the pooling stack accepts.
    pub fn min_frames(&self) -> usize {
        1 << self.stage_channels.len()
    }

    pub fn parameter_count(&self) -> usize {
        let mut cin = 1;
        let mut n = 0;
        for &c in &self.stage_channels {
            n += cin * 9 + cin + c * cin + c;
            cin = c;
        }
        n += self.embed_dim * cin + self.embed_dim;
        n += self.proj_dim * self.embed_dim + self.proj_dim;
        n += 2 * self.proj_dim;
        n + self.proj_dim * self.proj_dim
    }
}

/// One depthwise-separable stage.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage<T> {
    /// `(C_in, 3, 3)`
    pub dw_kernel: Array3<T>,
    pub dw_bias: Array1<T>,
    /// `(C_out, C_in)`
    pub pw_weight: Array2<T>,
    pub pw_bias: Array1<T>,
}

/// All trainable parameters. Also used as the gradient and optimizer-moment
/// container, since those share its shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<T> {
    pub config: EncoderConfig,
    pub stages: Vec<Stage<T>>,
    /// `(embed_dim, C_last)`
    pub head_weight: Array2<T>,
    pub head_bias: Array1<T>,
    /// `(proj_dim, embed_dim)`
    pub proj_weight: Array2<T>,
    pub proj_bias: Array1<T>,
    pub ln_gain: Array1<T>,
    pub ln_bias: Array1<T>,
    /// `(proj_dim, proj_dim)`
    pub bilinear: Array2<T>,
}

impl<T: Real> ModelState<T> {
    pub fn zeros(config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut stages = Vec::with_capacity(config.stage_channels.len());
        let mut cin = 1;
        for &c in &config.stage_channels {
            stages.push(Stage {
                dw_kernel: Array3::zeros((cin, 3, 3)),
                dw_bias: Array1::zeros(cin),
                pw_weight: Array2::zeros((c, cin)),
                pw_bias: Array1::zeros(c),
            });
            cin = c;
        }
        let (e, p) = (config.embed_dim, config.proj_dim);
        Ok(Self {
            config: config.clone(),
            stages,
            head_weight: Array2::zeros((e, cin)),
            head_bias: Array1::zeros(e),
            proj_weight: Array2::zeros((p, e)),
            proj_bias: Array1::zeros(p),
            ln_gain: Array1::zeros(p),
            ln_bias: Array1::zeros(p),
            bilinear: Array2::zeros((p, p)),
        })
    }

    /// Fan-in scaled uniform kernels (He for ReLU layers, LeCun for the
    /// projection), zero biases, unit layer-norm gain and `W = 0.1·I`.
    pub fn init<R: Rng>(config: &EncoderConfig, rng: &mut R) -> Result<Self> {
        let mut s = Self::zeros(config)?;
        let mut fill = |a: &mut [T], fan_in: usize, gain: f64| {
            let limit = (gain / fan_in as f64).sqrt();
            for x in a {
                *x = T::of(rng.random_range(-limit..limit));
            }
        };
        for st in &mut s.stages {
            fill(st.dw_kernel.as_slice_mut().unwrap(), 9, 6.0);
            let cin = st.pw_weight.ncols();
            fill(st.pw_weight.as_slice_mut().unwrap(), cin, 6.0);
        }
        let clast = s.head_weight.ncols();
        fill(s.head_weight.as_slice_mut().unwrap(), clast, 6.0);
        fill(s.proj_weight.as_slice_mut().unwrap(), config.embed_dim, 3.0);
        s.ln_gain.fill(T::one());
        for i in 0..config.proj_dim {
            s.bilinear[[i, i]] = T::of(0.1);
        }
        Ok(s)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.config).expect("config already validated")
    }

    /// Named flat views of every tensor, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &[T])> {
        let mut out = Vec::new();
        for (i, st) in self.stages.iter().enumerate() {
            out.push((
                format!("stage{i}.dw_kernel"),
                st.dw_kernel.as_slice().unwrap(),
            ));
            out.push((format!("stage{i}.dw_bias"), st.dw_bias.as_slice().unwrap()));
            out.push((
                format!("stage{i}.pw_weight"),
                st.pw_weight.as_slice().unwrap(),
            ));
            out.push((format!("stage{i}.pw_bias"), st.pw_bias.as_slice().unwrap()));
        }
        out.push(("head.weight".into(), self.head_weight.as_slice().unwrap()));
        out.push(("head.bias".into(), self.head_bias.as_slice().unwrap()));
        out.push(("proj.weight".into(), self.proj_weight.as_slice().unwrap()));
        out.push(("proj.bias".into(), self.proj_bias.as_slice().unwrap()));
        out.push(("ln.gain".into(), self.ln_gain.as_slice().unwrap()));
        out.push(("ln.bias".into(), self.ln_bias.as_slice().unwrap()));
        out.push(("bilinear".into(), self.bilinear.as_slice().unwrap()));
        out
    }

    /// Mutable counterpart of [`Self::tensors`], same order.
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [T])> {
        let mut out = Vec::new();
        for (i, st) in self.stages.iter_mut().enumerate() {
            out.push((
                format!("stage{i}.dw_kernel"),
                st.dw_kernel.as_slice_mut().unwrap(),
            ));
            out.push((
                format!("stage{i}.dw_bias"),
                st.dw_bias.as_slice_mut().unwrap(),
            ));
            out.push((
                format!("stage{i}.pw_weight"),
                st.pw_weight.as_slice_mut().unwrap(),
            ));
            out.push((
                format!("stage{i}.pw_bias"),
                st.pw_bias.as_slice_mut().unwrap(),
            ));
        }
        out.push((
            "head.weight".into(),
            self.head_weight.as_slice_mut().unwrap(),
        ));
        out.push(("head.bias".into(), self.head_bias.as_slice_mut().unwrap()));
        out.push((
            "proj.weight".into(),
            self.proj_weight.as_slice_mut().unwrap(),
        ));
        out.push(("proj.bias".into(), self.proj_bias.as_slice_mut().unwrap()));
        out.push(("ln.gain".into(), self.ln_gain.as_slice_mut().unwrap()));
        out.push(("ln.bias".into(), self.ln_bias.as_slice_mut().unwrap()));
        out.push(("bilinear".into(), self.bilinear.as_slice_mut().unwrap()));
        out
    }

    pub fn fill_zero(&mut self) {
        for (_, t) in self.tensors_mut() {
            t.fill(T::zero());
        }
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &Self, scale: T) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * *y;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|x| x.is_finite()))
    }

    /// Converts to another precision.
    pub fn cast<U: Real>(&self) -> ModelState<U> {
        let mut out = ModelState::<U>::zeros(&self.config).expect("validated");
        for ((_, dst), (_, src)) in out.tensors_mut().into_iter().zip(self.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d = U::of(s.f64());
            }
        }
        out
    }
}
