use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Mode, Tape, Var};
use super::params::{ParamId, ParamKind, ParamStore};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// One entry of the layer catalog.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        filters: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Dense {
        units: usize,
    },
    Relu,
    Maxpool2,
    GlobalAvgPool,
    Dropout {
        ratio: f64,
    },
    Softmax,
}

impl LayerSpec {
    /// Same-padded 3x3 convolution with stride 1.
    pub fn conv3(filters: usize) -> Self {
        LayerSpec::Conv2d {
            filters,
            kernel: 3,
            stride: 1,
            padding: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            LayerSpec::Conv2d {
                filters,
                kernel,
                stride,
                ..
            } => {
                if kernel == 0 || kernel % 2 == 0 {
                    return Err(Error::Config(format!("conv kernel {kernel} must be odd and >= 1")));
                }
                if stride == 0 || filters == 0 {
                    return Err(Error::Config("conv stride and filters must be >= 1".into()));
                }
            }
            LayerSpec::Dense { units } if units == 0 => {
                return Err(Error::Config("dense layer needs at least one unit".into()));
            }
            LayerSpec::Dropout { ratio } if !(0.0..1.0).contains(&ratio) => {
                return Err(Error::Config(format!("dropout ratio {ratio} outside [0, 1)")));
            }
            _ => {}
        }
        Ok(())
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        self.validate()?;
        let spatial = |what: &str| -> Result<(usize, usize, usize)> {
            match *input {
                [h, w, c] => Ok((h, w, c)),
                _ => Err(Error::Dimension(format!(
                    "{what} expects H x W x C input, got {input:?}"
                ))),
            }
        };
        Ok(match *self {
            LayerSpec::Conv2d {
                filters,
                kernel,
                stride,
                padding,
            } => {
                let (h, w, _) = spatial("conv2d")?;
                if h + 2 * padding < kernel || w + 2 * padding < kernel {
                    return Err(Error::Dimension(format!(
                        "conv kernel {kernel} does not fit {h}x{w} input"
                    )));
                }
                vec![
                    (h + 2 * padding - kernel) / stride + 1,
                    (w + 2 * padding - kernel) / stride + 1,
                    filters,
                ]
            }
            LayerSpec::Dense { units } => vec![units],
            LayerSpec::Relu | LayerSpec::Dropout { .. } | LayerSpec::Softmax => input.to_vec(),
            LayerSpec::Maxpool2 => {
                let (h, w, c) = spatial("maxpool2")?;
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(Error::Dimension(format!(
                        "maxpool2 needs even dimensions, got {h}x{w}"
                    )));
                }
                vec![h / 2, w / 2, c]
            }
            LayerSpec::GlobalAvgPool => {
                let (_, _, c) = spatial("global_avg_pool")?;
                vec![c]
            }
        })
    }
}

#[derive(Debug, Clone)]
struct BuiltLayer {
    spec: LayerSpec,
    params: Option<(ParamId, ParamId)>,
}

/// A sequence of layers whose parameters live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Stack {
    layers: Vec<BuiltLayer>,
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
}

impl Stack {
    /// Infers shapes through `specs` and registers He-uniform initialized
    /// parameters named `{prefix}.{index}.{kernel|weight|bias}`.
    pub fn build<F: Real, R: Rng + ?Sized>(
        prefix: &str,
        specs: &[LayerSpec],
        input_shape: &[usize],
        store: &mut ParamStore<F>,
        rng: &mut R,
    ) -> Result<Self> {
        let mut shape = input_shape.to_vec();
        let mut layers = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            let next = spec.output_shape(&shape)?;
            let params = match *spec {
                LayerSpec::Conv2d { filters, kernel, .. } => {
                    let c = shape[2];
                    let fan_in = kernel * kernel * c;
                    let k = he_uniform(&[kernel, kernel, c, filters], fan_in, rng);
                    let kid = store.add(format!("{prefix}.{i}.kernel"), ParamKind::Weight, k);
                    let bid = store.add(format!("{prefix}.{i}.bias"), ParamKind::Bias, Tensor::zeros(&[filters]));
                    Some((kid, bid))
                }
                LayerSpec::Dense { units } => {
                    let n: usize = shape.iter().product();
                    let w = he_uniform(&[units, n], n, rng);
                    let wid = store.add(format!("{prefix}.{i}.weight"), ParamKind::Weight, w);
                    let bid = store.add(format!("{prefix}.{i}.bias"), ParamKind::Bias, Tensor::zeros(&[units]));
                    Some((wid, bid))
                }
                _ => None,
            };
            layers.push(BuiltLayer { spec: *spec, params });
            shape = next;
        }
        Ok(Self {
            layers,
            input_shape: input_shape.to_vec(),
            output_shape: shape,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    /// Kernels and dense weight matrices, in layer order.
    pub fn weight_ids(&self) -> Vec<ParamId> {
        self.layers.iter().filter_map(|l| l.params.map(|(w, _)| w)).collect()
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers
            .iter()
            .filter_map(|l| l.params)
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    pub fn forward<'s, F: Real, R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<'s, F>,
        store: &'s ParamStore<F>,
        mut x: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        if tape.value(x).shape() != self.input_shape.as_slice() {
            return Err(Error::Dimension(format!(
                "stack expects input {:?}, got {:?}",
                self.input_shape,
                tape.value(x).shape()
            )));
        }
        for layer in &self.layers {
            x = match (layer.spec, layer.params) {
                (LayerSpec::Conv2d { stride, padding, .. }, Some((k, b))) => {
                    let (k, b) = (tape.param(store, k), tape.param(store, b));
                    tape.conv2d(x, k, b, stride, padding)?
                }
                (LayerSpec::Dense { .. }, Some((w, b))) => {
                    let (w, b) = (tape.param(store, w), tape.param(store, b));
                    tape.dense(x, w, b)?
                }
                (LayerSpec::Relu, _) => tape.relu(x),
                (LayerSpec::Maxpool2, _) => tape.maxpool2(x)?,
                (LayerSpec::GlobalAvgPool, _) => tape.global_avg_pool(x)?,
                (LayerSpec::Dropout { ratio }, _) => tape.dropout(x, ratio, mode, rng)?,
                (LayerSpec::Softmax, _) => tape.softmax(x)?,
                (spec, None) => {
                    return Err(Error::State(format!("layer {spec:?} has no parameters")))
                }
            };
        }
        Ok(x)
    }
}

fn he_uniform<F: Real, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<F> {
    let limit = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| F::lit(rng.gen_range(-limit..limit))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches generated data")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn layer_validation() {
        assert!(LayerSpec::Dropout { ratio: 1.0 }.validate().is_err());
        assert!(LayerSpec::Dropout { ratio: 0.4 }.validate().is_ok());
        let even = LayerSpec::Conv2d {
            filters: 4,
            kernel: 2,
            stride: 1,
            padding: 0,
        };
        assert!(even.validate().is_err());
        let strideless = LayerSpec::Conv2d {
            filters: 4,
            kernel: 3,
            stride: 0,
            padding: 0,
        };
        assert!(strideless.validate().is_err());
    }

    #[test]
    fn stack_infers_shapes_and_runs() {
        let specs = [
            LayerSpec::conv3(4),
            LayerSpec::Relu,
            LayerSpec::Maxpool2,
            LayerSpec::GlobalAvgPool,
            LayerSpec::Dense { units: 3 },
            LayerSpec::Softmax,
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let stack = Stack::build("net", &specs, &[8, 8, 1], &mut store, &mut rng).unwrap();
        assert_eq!(stack.output_shape(), &[3]);
        assert_eq!(store.len(), 4);
        assert_eq!(store.name(stack.weight_ids()[1]), "net.4.weight");

        let mut tape = Tape::new();
        let x = tape.input(Tensor::full(&[8, 8, 1], 0.5));
        let y = stack.forward(&mut tape, &store, x, Mode::Eval, &mut rng).unwrap();
        let sum: f64 = tape.value(y).data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn odd_pool_input_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f32>::new();
        let err = Stack::build("n", &[LayerSpec::Maxpool2], &[5, 4, 1], &mut store, &mut rng);
        assert!(matches!(err, Err(Error::Dimension(_))));
    }
}
