use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{fan_in_uniform, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Where the spatial aggregation sits in a downstream model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Placement {
    Contextual,
    PostLocal,
    PreLocal,
}

impl Placement {
    pub const ALL: [Placement; 3] = [Placement::Contextual, Placement::PostLocal, Placement::PreLocal];

    pub fn name(self) -> &'static str {
        match self {
            Placement::Contextual => "contextual",
            Placement::PostLocal => "post-local",
            Placement::PreLocal => "pre-local",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown architecture `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub virtual_channels: usize,
    pub n_classes: usize,
    pub placement: Placement,
}

impl HeadConfig {
    pub fn validate(&self, n_channels: usize) -> Result<()> {
        if self.virtual_channels == 0 || self.virtual_channels >= n_channels {
            return Err(Error::Config(format!(
                "virtual channel count {} must be in [1, {n_channels})",
                self.virtual_channels
            )));
        }
        if self.n_classes < 2 {
            return Err(Error::Config(format!("{} classes; at least 2 are required", self.n_classes)));
        }
        Ok(())
    }
}

/// `agg.weight` (`V x C`) plus `head.weight` (`features x classes`) and `head.bias`.
pub fn init_head<T: Scalar>(
    config: &HeadConfig,
    n_channels: usize,
    feature_len: usize,
    rng: &mut impl Rng,
) -> ParamSet<T> {
    let mut p = ParamSet::new();
    p.insert("agg.weight", fan_in_uniform(config.virtual_channels, n_channels, n_channels, rng));
    p.insert("head.weight", fan_in_uniform(feature_len, config.n_classes, feature_len, rng));
    p.insert("head.bias", fan_in_uniform(1, config.n_classes, feature_len, rng));
    p
}

/// `out[v] = sum_c weights[v, c] * input[c]` along the leading axis.
pub fn spatial_aggregate<T: Scalar>(input: &Tensor<T>, weights: &Tensor<T>) -> Result<Tensor<T>> {
    if weights.cols() != input.rows() {
        return Err(Error::Shape(format!(
            "aggregation weights expect {} channels, input has {}",
            weights.cols(),
            input.rows()
        )));
    }
    weights.matmul(input)
}

/// Affine map of a flattened feature vector to class logits.
pub fn classify_head<T: Scalar>(features: &[T], weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Vec<T>> {
    if features.len() != weight.rows() || bias.cols() != weight.cols() {
        return Err(Error::Shape(format!(
            "head expects {} features, got {}",
            weight.rows(),
            features.len()
        )));
    }
    let x = Tensor::from_vec(1, features.len(), features.to_vec())?;
    let mut out = x.matmul(weight)?;
    for (o, b) in out.data_mut().iter_mut().zip(bias.data()) {
        *o += *b;
    }
    Ok(out.into_data())
}
