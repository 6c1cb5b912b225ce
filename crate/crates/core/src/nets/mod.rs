//! Network definitions as forward computations over explicit parameter sets.
//!
//! Every network is written once against a [`Graph`](crate::graph::Graph)
//! and a set of bound parameters, so the same code serves training (variables)
//! and inference or teacher passes (constants). Parameter names are fixed:
//!
//! | prefix          | network                           |
//! |-----------------|-----------------------------------|
//! | `local.`        | per-channel convolutional encoder |
//! | `ctx.`          | contextual transformer encoder    |
//! | `pred.`         | predictor (transformer decoder)   |
//! | `spatial_table` | trainable per-channel embeddings  |
//! | `agg.`, `head.` | downstream aggregation and head   |

mod head;
mod local;
mod transformer;

pub use head::{classify_head, init_head, spatial_aggregate, HeadConfig, Placement};
pub use local::{encode_all_channels, local_encode, local_forward, ConvLayer, LocalEncoderConfig};
pub use transformer::{
    contextual_forward, encoder_forward, init_encoder, init_predictor, marker_rows, predict_masked,
    predictor_forward, TransformerConfig,
};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::montage::{init_spatial_table, Montage, PositionEncoding};
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const SPATIAL_TABLE: &str = "spatial_table";

/// `C x t x d` token embeddings stored as `(C * t) x d`, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid<T> {
    values: Tensor<T>,
    n_channels: usize,
    n_windows: usize,
    window_starts: Vec<usize>,
}

impl<T: Scalar> TokenGrid<T> {
    pub fn new(values: Tensor<T>, n_channels: usize, n_windows: usize) -> Result<Self> {
        Self::with_stride(values, n_channels, n_windows, 0)
    }

    pub fn with_stride(values: Tensor<T>, n_channels: usize, n_windows: usize, stride: usize) -> Result<Self> {
        if values.rows() != n_channels * n_windows {
            return Err(Error::Shape(format!(
                "{} token rows for {n_channels} channels x {n_windows} windows",
                values.rows()
            )));
        }
        let window_starts = (0..n_windows).map(|w| w * stride).collect();
        Ok(Self { values, n_channels, n_windows, window_starts })
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }

    pub fn n_channels(&self) -> usize {
        self.n_channels
    }

    pub fn n_windows(&self) -> usize {
        self.n_windows
    }

    pub fn n_tokens(&self) -> usize {
        self.n_channels * self.n_windows
    }

    pub fn d(&self) -> usize {
        self.values.cols()
    }

    pub fn window_starts(&self) -> &[usize] {
        &self.window_starts
    }

    pub fn token(&self, channel: usize, window: usize) -> &[T] {
        self.values.row(channel * self.n_windows + window)
    }
}

/// Architecture of the pre-trainable model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub local: LocalEncoderConfig,
    pub encoder: TransformerConfig,
    pub predictor: TransformerConfig,
    pub temporal_dims: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            local: LocalEncoderConfig::default(),
            encoder: TransformerConfig { depth: 8, ..TransformerConfig::default() },
            predictor: TransformerConfig { depth: 4, ..TransformerConfig::default() },
            temporal_dims: 34,
        }
    }
}

impl ModelConfig {
    pub fn d(&self) -> usize {
        self.local.d()
    }

    pub fn validate(&self) -> Result<()> {
        self.local.validate()?;
        self.encoder.validate()?;
        self.predictor.validate()?;
        let d = self.d();
        if self.encoder.d_model != d || self.predictor.d_model != d {
            return Err(Error::Config(format!(
                "token width {d} must match encoder ({}) and predictor ({}) widths",
                self.encoder.d_model, self.predictor.d_model
            )));
        }
        PositionEncoding::new(self.temporal_dims, d)?;
        Ok(())
    }

    pub fn position_encoding(&self) -> PositionEncoding {
        PositionEncoding { temporal_dims: self.temporal_dims, d: self.d() }
    }
}

/// Fresh parameters for the local encoder, contextual encoder, predictor and
/// spatial table.
pub fn init_model<T: Scalar>(config: &ModelConfig, montage: &Montage, rng: &mut impl Rng) -> Result<ParamSet<T>> {
    config.validate()?;
    let mut params = config.local.init(rng);
    params.extend(init_encoder("ctx", &config.encoder, rng));
    params.extend(init_predictor("pred", &config.predictor, rng));
    let enc = config.position_encoding();
    params.insert(SPATIAL_TABLE, init_spatial_table(montage, enc.spatial_dims())?);
    Ok(params)
}
