//! Plain convolutional feature extractor feeding the patch-pooling stage.
//!
//! Each stage is `conv3x3(pad 1) -> ReLU -> maxpool(2)`. It is computed as
//! `conv -> maxpool -> ReLU`, which gives identical values and gradients
//! because ReLU is monotone, and exposes the pre-activation pooled map of
//! the last stage as the criterion tap.

use crate::error::{ApvitError, Result};
use crate::scalar::Scalar;
use crate::tensor::{
    add_channel_bias, channel_bias_grad, conv2d, conv2d_backward, max_pool2d,
    max_pool2d_backward, relu, relu_backward, Tensor,
};

#[derive(Clone, Debug, PartialEq)]
pub struct StemConfig {
    pub stages: usize,
    pub channels: Vec<usize>,
    pub input_side: usize,
    pub input_channels: usize,
    /// Compute the pooling criterion on the last stage's pre-ReLU map.
    pub linear_tap: bool,
}

impl Default for StemConfig {
    fn default() -> Self {
        Self {
            stages: 2,
            channels: vec![16, 32],
            input_side: 32,
            input_channels: 1,
            linear_tap: true,
        }
    }
}

impl StemConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 {
            return Err(ApvitError::Config("stem needs at least one stage".into()));
        }
        if self.channels.len() != self.stages {
            return Err(ApvitError::Config(format!(
                "stem has {} stages but {} channel counts",
                self.stages,
                self.channels.len()
            )));
        }
        if self.channels.contains(&0) || self.input_channels == 0 {
            return Err(ApvitError::Config("stem channel counts must be positive".into()));
        }
        let factor = 1usize << self.stages;
        if self.input_side == 0 || !self.input_side.is_multiple_of(factor) {
            return Err(ApvitError::Config(format!(
                "input_side {} not divisible by 2^{}",
                self.input_side, self.stages
            )));
        }
        Ok(())
    }

    /// Side of the output feature map.
    pub fn grid_side(&self) -> usize {
        self.input_side >> self.stages
    }

    pub fn patch_count(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    /// Input pixels per feature-map cell along one axis.
    pub fn cell_side(&self) -> usize {
        1 << self.stages
    }

    pub fn out_channels(&self) -> usize {
        *self.channels.last().expect("validated stem")
    }
}

/// A `[C, H, W]` CNN feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T = f64> {
    pub data: Tensor<T>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn new(data: Tensor<T>) -> Result<Self> {
        if data.rank() != 3 {
            return Err(ApvitError::Dimension(format!(
                "feature map must be [C,H,W], got {:?}",
                data.shape()
            )));
        }
        Ok(Self { data })
    }

    pub fn channels(&self) -> usize {
        self.data.dim(0)
    }

    pub fn height(&self) -> usize {
        self.data.dim(1)
    }

    pub fn width(&self) -> usize {
        self.data.dim(2)
    }

    /// Flattens to `[H*W, C]`, one row per spatial position.
    pub fn to_tokens(&self) -> Tensor<T> {
        let (c, h, w) = (self.channels(), self.height(), self.width());
        self.data
            .clone()
            .reshape(&[c, h * w])
            .expect("same size")
            .transpose2d()
    }

    /// Inverse of [`Self::to_tokens`].
    pub fn from_tokens(tokens: &Tensor<T>, h: usize, w: usize) -> Self {
        let c = tokens.cols();
        Self {
            data: tokens.transpose2d().reshape(&[c, h, w]).expect("same size"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct StemParams<T = f64> {
    /// `[Cout, Cin, 3, 3]` per stage.
    pub kernels: Vec<Tensor<T>>,
    pub biases: Vec<Tensor<T>>,
}

impl<T: Scalar> StemParams<T> {
    pub fn zeros(config: &StemConfig) -> Self {
        let mut cin = config.input_channels;
        let mut kernels = Vec::new();
        let mut biases = Vec::new();
        for &cout in &config.channels {
            kernels.push(Tensor::zeros(&[cout, cin, 3, 3]));
            biases.push(Tensor::zeros(&[cout]));
            cin = cout;
        }
        Self { kernels, biases }
    }
}

/// Maps byte values in `[0, 255]` to `[-1, 1]`.
pub fn normalize_image<T: Scalar>(raw: &Tensor<T>) -> Tensor<T> {
    let half = T::lit(0.5);
    let scale = T::lit(255.0);
    raw.map(|v| (v / scale - half) / half)
}

#[derive(Clone, Debug)]
struct StageTrace<T> {
    input: Tensor<T>,
    argmax: Vec<usize>,
    conv_shape: Vec<usize>,
    pooled: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct StemOutput<T = f64> {
    /// Post-ReLU features that become tokens.
    pub features: FeatureMap<T>,
    stages: Vec<StageTrace<T>>,
    linear_tap: bool,
}

impl<T: Scalar> StemOutput<T> {
    /// Map the pooling criterion is computed on.
    pub fn tap(&self) -> &Tensor<T> {
        if self.linear_tap {
            &self.stages.last().expect("at least one stage").pooled
        } else {
            &self.features.data
        }
    }

    /// Max-pool winners and ReLU gates of every stage. Equal patterns mean
    /// two passes ran on the same linear piece of the stem.
    pub fn kink_pattern(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for st in &self.stages {
            out.extend_from_slice(&st.argmax);
            out.extend(st.pooled.data().iter().map(|&v| usize::from(v > T::zero())));
        }
        out
    }
}

/// Runs the stem on a normalized image.
pub fn stem_forward<T: Scalar>(
    image: &Tensor<T>,
    params: &StemParams<T>,
    config: &StemConfig,
) -> Result<StemOutput<T>> {
    let side = config.input_side;
    if image.shape() != [config.input_channels, side, side] {
        return Err(ApvitError::Dimension(format!(
            "stem expects image [{}, {side}, {side}], got {:?}",
            config.input_channels,
            image.shape()
        )));
    }
    let mut x = image.clone();
    let mut stages = Vec::with_capacity(config.stages);
    for (k, b) in params.kernels.iter().zip(&params.biases) {
        let mut z = conv2d(&x, k, 1, 1)?;
        add_channel_bias(&mut z, b);
        let pool = max_pool2d(&z, 2, 2)?;
        let a = relu(&pool.value);
        stages.push(StageTrace {
            input: std::mem::replace(&mut x, a),
            argmax: pool.argmax,
            conv_shape: z.shape().to_vec(),
            pooled: pool.value,
        });
    }
    Ok(StemOutput {
        features: FeatureMap::new(x)?,
        stages,
        linear_tap: config.linear_tap,
    })
}

/// Parameter gradients given the gradient on the features and, optionally,
/// on the criterion tap.
pub fn stem_backward<T: Scalar>(
    out: &StemOutput<T>,
    params: &StemParams<T>,
    d_features: &Tensor<T>,
    d_tap: Option<&Tensor<T>>,
) -> StemParams<T> {
    let n = out.stages.len();
    let mut d_act = d_features.clone();
    if let (Some(dt), false) = (d_tap, out.linear_tap) {
        d_act.add_assign(dt);
    }
    let mut grads = StemParams {
        kernels: Vec::with_capacity(n),
        biases: Vec::with_capacity(n),
    };
    for s in (0..n).rev() {
        let st = &out.stages[s];
        let mut d_pooled = relu_backward(&st.pooled, &d_act);
        if s == n - 1 && out.linear_tap {
            if let Some(dt) = d_tap {
                d_pooled.add_assign(dt);
            }
        }
        let dz = max_pool2d_backward(&st.argmax, &st.conv_shape, &d_pooled);
        let db = channel_bias_grad(&dz);
        let (dx, dk) = conv2d_backward(&st.input, &params.kernels[s], 1, 1, &dz);
        grads.kernels.push(dk);
        grads.biases.push(db);
        d_act = dx;
    }
    grads.kernels.reverse();
    grads.biases.reverse();
    grads
}
