use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Activation, Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub activation: Option<Activation>,
    pub input: usize,
    pub output: usize,
}

/// Stack of affine layers, each followed by an optional activation.
#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<Dense>,
}

impl Mlp {
    /// `dims` lists the input width followed by each layer's output width.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dims: &[usize],
        activations: &[Option<Activation>],
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if dims.len() < 2 || activations.len() != dims.len() - 1 || dims.contains(&0) {
            return Err(Error::Config(format!(
                "mlp {name}: {} dims and {} activations do not chain",
                dims.len(),
                activations.len()
            )));
        }
        let layers = dims
            .windows(2)
            .zip(activations)
            .enumerate()
            .map(|(i, (w, &activation))| {
                let (input, output) = (w[0], w[1]);
                let limit = match activation {
                    Some(Activation::Relu) => (6.0 / input as f64).sqrt(),
                    _ => (6.0 / (input + output) as f64).sqrt(),
                };
                let data = (0..input * output).map(|_| rng.random_range(-limit..=limit)).collect();
                let weight = store.add(format!("{name}.{i}.weight"), Tensor::new(&[input, output], data)?, false);
                let bias = store.add(format!("{name}.{i}.bias"), Tensor::zeros(&[output]), false);
                Ok(Dense {
                    weight,
                    bias,
                    activation,
                    input,
                    output,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Mlp { layers })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().output
    }

    /// Accepts `[in]` or `[B, in]`; returns `[out]` or `[B, out]` accordingly.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let single = match *g.shape(x) {
            [n] if n == self.input_dim() => true,
            [_, n] if n == self.input_dim() => false,
            _ => {
                return Err(Error::shape(format!(
                    "mlp expects input width {}, got {:?}",
                    self.input_dim(),
                    g.shape(x)
                )))
            }
        };
        let mut h = if single { g.reshape(x, &[1, self.input_dim()])? } else { x };
        for layer in &self.layers {
            let w = g.param(layer.weight)?;
            let b = g.param(layer.bias)?;
            h = g.matmul(h, w)?;
            h = g.add_bias(h, b)?;
            if let Some(act) = layer.activation {
                h = g.activation(h, act)?;
            }
        }
        if single {
            h = g.reshape(h, &[self.output_dim()])?;
        }
        Ok(h)
    }
}
