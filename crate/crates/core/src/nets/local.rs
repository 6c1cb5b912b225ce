use rand::Rng;
use serde::{Deserialize, Serialize};

use super::TokenGrid;
use crate::data::Example;
use crate::error::{Error, Result};
use crate::graph::{Bound, Graph, NodeId};
use crate::params::{fan_in_uniform, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub kernel: usize,
    pub stride: usize,
    pub width: usize,
}

/// Strided 1D convolutions over a single channel, each followed by GELU.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalEncoderConfig {
    pub layers: Vec<ConvLayer>,
}

impl Default for LocalEncoderConfig {
    fn default() -> Self {
        let mut layers = vec![ConvLayer { kernel: 32, stride: 8, width: 64 }];
        layers.extend((0..4).map(|_| ConvLayer { kernel: 2, stride: 2, width: 64 }));
        Self { layers }
    }
}

impl LocalEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("local encoder needs at least one layer".into()));
        }
        if self.layers.iter().any(|l| l.kernel == 0 || l.stride == 0 || l.width == 0) {
            return Err(Error::Config("local encoder kernel, stride and width must be positive".into()));
        }
        Ok(())
    }

    /// Token width (channels of the last layer).
    pub fn d(&self) -> usize {
        self.layers.last().map_or(0, |l| l.width)
    }

    /// Input samples covered by one token.
    pub fn window_samples(&self) -> usize {
        let mut jump = 1;
        let mut field = 1;
        for l in &self.layers {
            field += (l.kernel - 1) * jump;
            jump *= l.stride;
        }
        field
    }

    /// Input samples between consecutive tokens.
    pub fn stride_samples(&self) -> usize {
        self.layers.iter().map(|l| l.stride).product()
    }

    pub fn n_tokens(&self, n_samples: usize) -> usize {
        let w = self.window_samples();
        if n_samples < w {
            0
        } else {
            (n_samples - w) / self.stride_samples() + 1
        }
    }

    pub fn init<T: Scalar>(&self, rng: &mut impl Rng) -> ParamSet<T> {
        let mut params = ParamSet::new();
        let mut cin = 1;
        for (i, l) in self.layers.iter().enumerate() {
            let fan_in = l.kernel * cin;
            // He-scaled so activations keep their size through the GELU stack.
            let bound = (6.0 / fan_in as f64).sqrt();
            let w = Tensor::from_fn(fan_in, l.width, |_, _| T::lit(rng.random_range(-bound..bound)));
            params.insert(format!("local.conv{i}.weight"), w);
            params.insert(format!("local.conv{i}.bias"), fan_in_uniform(1, l.width, fan_in, rng));
            cin = l.width;
        }
        params
    }
}

/// Run the local encoder over `n_seq` stacked single-channel signals.
///
/// `signals` is `(n_seq * samples) x 1`; the result is `(n_seq * t) x d`,
/// sequence-major.
pub fn local_forward<T: Scalar>(
    g: &mut Graph<T>,
    bound: &Bound,
    config: &LocalEncoderConfig,
    signals: NodeId,
    n_seq: usize,
) -> Result<NodeId> {
    let n_samples = g.value(signals).rows() / n_seq.max(1);
    let min = config.window_samples();
    if n_samples < min {
        return Err(Error::Shape(format!("signal of {n_samples} samples is shorter than the {min}-sample window")));
    }
    let mut x = signals;
    for (i, l) in config.layers.iter().enumerate() {
        let u = g.unfold(x, n_seq, l.kernel, l.stride);
        let y = g.linear(u, bound.id(&format!("local.conv{i}.weight")), bound.id(&format!("local.conv{i}.bias")));
        x = g.gelu(y);
    }
    Ok(x)
}

/// Tokens of one channel: `t x d`.
pub fn local_encode<T: Scalar>(signal: &[T], params: &ParamSet<T>, config: &LocalEncoderConfig) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let bound = g.bind(&params.subset("local."), |_| false);
    let x = g.constant(Tensor::from_vec(signal.len(), 1, signal.to_vec())?);
    let out = local_forward(&mut g, &bound, config, x, 1)?;
    Ok(g.value(out).clone())
}

/// The local encoder applied with shared weights to every channel.
pub fn encode_all_channels<T: Scalar>(
    example: &Example,
    params: &ParamSet<T>,
    config: &LocalEncoderConfig,
) -> Result<TokenGrid<T>> {
    let mut g = Graph::new();
    let bound = g.bind(&params.subset("local."), |_| false);
    let x = g.constant(example.signal_column()?);
    let out = local_forward(&mut g, &bound, config, x, example.n_channels())?;
    let t = config.n_tokens(example.n_samples());
    TokenGrid::with_stride(g.value(out).clone(), example.n_channels(), t, config.stride_samples())
}
