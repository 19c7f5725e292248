//! Sequential CNN with named batch-norm layers.

use std::collections::{BTreeMap, BTreeSet};

use crate::bn::{
    bn_backward_train, bn_forward_adapt, bn_forward_eval_in_place, bn_forward_train_cached,
    BatchNormState, BnTrainCache, StatsTiming,
};
use crate::error::{dim_err, param_err, Error, Result};
use crate::layers::{
    conv2d_backward, conv2d_forward, conv_out_dim, flatten, linear_backward, linear_forward,
    maxpool2x2_backward, maxpool2x2_forward, relu_backward, relu_forward, relu_in_place, LayerGrad,
};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    /// `c_out × c_in × kh × kw`
    pub weight: Tensor,
    pub bias: Vec<f64>,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub name: String,
    pub state: BatchNormState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `d_out × d_in`, row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub d_in: usize,
    pub d_out: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv2d(Conv2d),
    BatchNorm(BatchNorm),
    Relu,
    MaxPool2x2,
    Flatten,
    Linear(Linear),
}

impl Layer {
    /// Output item shape `[c, h, w]` for an input item shape.
    pub fn output_shape(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let [c, h, w] = input;
        match self {
            Layer::Conv2d(conv) => {
                let [cout, cin, kh, kw] = conv.weight.shape();
                if cin != c {
                    return dim_err(format!("conv expects {} input channels, got {}", cin, c));
                }
                if conv.bias.len() != cout {
                    return dim_err("conv bias length differs from c_out");
                }
                match (
                    conv_out_dim(h, kh, conv.stride, conv.pad),
                    conv_out_dim(w, kw, conv.stride, conv.pad),
                ) {
                    (Some(oh), Some(ow)) => Ok([cout, oh, ow]),
                    _ => dim_err(format!("conv kernel {}x{} larger than input {}x{}", kh, kw, h, w)),
                }
            }
            Layer::BatchNorm(bn) => {
                bn.state.validate()?;
                if bn.state.channels() != c {
                    return dim_err(format!(
                        "batch norm '{}' has {} channels, input has {}",
                        bn.name,
                        bn.state.channels(),
                        c
                    ));
                }
                Ok(input)
            }
            Layer::Relu => Ok(input),
            Layer::MaxPool2x2 => {
                if h % 2 != 0 || w % 2 != 0 {
                    return dim_err(format!("maxpool input {}x{} is not even", h, w));
                }
                Ok([c, h / 2, w / 2])
            }
            Layer::Flatten => Ok([c * h * w, 1, 1]),
            Layer::Linear(lin) => {
                if c * h * w != lin.d_in {
                    return dim_err(format!(
                        "linear expects {} inputs, got {}",
                        lin.d_in,
                        c * h * w
                    ));
                }
                if lin.weight.len() != lin.d_in * lin.d_out || lin.bias.len() != lin.d_out {
                    return dim_err("linear parameter lengths inconsistent with d_in/d_out");
                }
                Ok([lin.d_out, 1, 1])
            }
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv2d(_) => "conv2d",
            Layer::BatchNorm(_) => "batchnorm",
            Layer::Relu => "relu",
            Layer::MaxPool2x2 => "maxpool2x2",
            Layer::Flatten => "flatten",
            Layer::Linear(_) => "linear",
        }
    }
}

/// Set of batch-norm layer names whose statistics adapt.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LayerMask(BTreeSet<String>);

impl LayerMask {
    pub fn none() -> Self {
        LayerMask(BTreeSet::new())
    }

    pub fn all(model: &Model) -> Self {
        LayerMask(model.bn_names().into_iter().collect())
    }

    pub fn from_names<I, S>(names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        LayerMask(names.into_iter().map(Into::into).collect())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.0.contains(name)
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(String::as_str)
    }

    /// Every name must be a batch-norm layer of `model`.
    pub fn check(&self, model: &Model) -> Result<()> {
        let known: BTreeSet<String> = model.bn_names().into_iter().collect();
        match self.0.iter().find(|n| !known.contains(*n)) {
            Some(n) => param_err(format!(
                "layer mask names '{}', which is not a batch norm layer (have {:?})",
                n, known
            )),
            None => Ok(()),
        }
    }
}

/// Per-pass adaptation parameters: one weight shared by all masked layers.
#[derive(Debug, Clone)]
pub struct AdaptPass {
    pub weight: f64,
    pub mask: LayerMask,
    pub timing: StatsTiming,
}

#[derive(Debug, Clone, Copy)]
pub enum Mode<'a> {
    /// Batch statistics; running statistics move by each layer's momentum.
    Train,
    /// Frozen running statistics.
    Eval,
    /// Masked layers adapt with the pass weight, others behave as eval.
    Adapt(&'a AdaptPass),
}

enum Cache {
    Conv(Tensor),
    Bn(BnTrainCache),
    Relu(Tensor),
    Pool([usize; 4], Vec<usize>),
    Flatten([usize; 4]),
    Linear(Tensor),
}

/// Intermediate values from a training forward pass.
pub struct TrainTrace {
    caches: Vec<Cache>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    input_shape: [usize; 3],
    layers: Vec<Layer>,
}

impl Model {
    pub fn new(input_shape: [usize; 3], layers: Vec<Layer>) -> Result<Self> {
        let model = Model {
            input_shape,
            layers,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        let mut shape = self.input_shape;
        for (i, layer) in self.layers.iter().enumerate() {
            shape = layer.output_shape(shape).map_err(|e| match e {
                Error::Dimension(m) => Error::Dimension(format!("layer {} ({}): {}", i, layer.kind(), m)),
                other => other,
            })?;
        }
        let names = self.bn_names();
        let unique: BTreeSet<&String> = names.iter().collect();
        if unique.len() != names.len() {
            return param_err(format!("batch norm names are not unique: {:?}", names));
        }
        Ok(())
    }

    /// Conv(1→16)–BN–ReLU–Pool–Conv(16→32)–BN–ReLU–Pool–Flatten–
    /// Linear(1568→64)–BN–ReLU–Linear(64→10), He-initialized.
    pub fn desk_cnn(rng: &mut Rng) -> Self {
        let conv = |rng: &mut Rng, cout: usize, cin: usize| {
            let fan_in = (cin * 9) as f64;
            let sd = (2.0 / fan_in).sqrt();
            Layer::Conv2d(Conv2d {
                weight: Tensor::from_fn([cout, cin, 3, 3], |_| sd * rng.normal()),
                bias: vec![0.0; cout],
                stride: 1,
                pad: 1,
            })
        };
        let linear = |rng: &mut Rng, d_out: usize, d_in: usize| {
            let sd = (2.0 / d_in as f64).sqrt();
            Layer::Linear(Linear {
                weight: (0..d_in * d_out).map(|_| sd * rng.normal()).collect(),
                bias: vec![0.0; d_out],
                d_in,
                d_out,
            })
        };
        let bn = |name: &str, c: usize| {
            Layer::BatchNorm(BatchNorm {
                name: name.to_string(),
                state: BatchNormState::new(c),
            })
        };
        let layers = vec![
            conv(rng, 16, 1),
            bn("bn1", 16),
            Layer::Relu,
            Layer::MaxPool2x2,
            conv(rng, 32, 16),
            bn("bn2", 32),
            Layer::Relu,
            Layer::MaxPool2x2,
            Layer::Flatten,
            linear(rng, 64, 32 * 7 * 7),
            bn("bn3", 64),
            Layer::Relu,
            linear(rng, 10, 64),
        ];
        Model::new([1, 28, 28], layers).expect("desk architecture is consistent")
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn bn_names(&self) -> Vec<String> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::BatchNorm(bn) => Some(bn.name.clone()),
                _ => None,
            })
            .collect()
    }

    pub fn bn(&self, name: &str) -> Option<&BatchNormState> {
        self.layers.iter().find_map(|l| match l {
            Layer::BatchNorm(bn) if bn.name == name => Some(&bn.state),
            _ => None,
        })
    }

    pub fn bn_mut(&mut self, name: &str) -> Option<&mut BatchNormState> {
        self.layers.iter_mut().find_map(|l| match l {
            Layer::BatchNorm(bn) if bn.name == name => Some(&mut bn.state),
            _ => None,
        })
    }

    /// Position of the named batch-norm layer in the layer list.
    pub fn bn_index(&self, name: &str) -> Option<usize> {
        self.layers
            .iter()
            .position(|l| matches!(l, Layer::BatchNorm(bn) if bn.name == name))
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let [_, c, h, w] = x.shape();
        if [c, h, w] != self.input_shape {
            return dim_err(format!(
                "model expects items of shape {:?}, got {:?}",
                self.input_shape,
                [c, h, w]
            ));
        }
        Ok(())
    }

    #[cfg(test)]
    fn apply_fixed(layer: &Layer, x: &Tensor) -> Result<Tensor> {
        Self::apply_fixed_owned(layer, x.clone())
    }

    /// Eval-mode layer application, reusing the input buffer where the
    /// layer is elementwise.
    fn apply_fixed_owned(layer: &Layer, mut x: Tensor) -> Result<Tensor> {
        match layer {
            Layer::Conv2d(c) => conv2d_forward(&x, &c.weight, &c.bias, c.stride, c.pad),
            Layer::BatchNorm(bn) => {
                bn_forward_eval_in_place(&mut x, &bn.state)?;
                Ok(x)
            }
            Layer::Relu => {
                relu_in_place(&mut x);
                Ok(x)
            }
            Layer::MaxPool2x2 => maxpool2x2_forward(&x).map(|(y, _)| y),
            Layer::Flatten => {
                let shape = [x.n(), x.item_len(), 1, 1];
                x.reshape(shape)
            }
            Layer::Linear(l) => linear_forward(&x, &l.weight, &l.bias),
        }
    }

    /// Eval-mode forward. Never mutates the model.
    pub fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_eval_range(x, 0, self.layers.len())
    }

    /// Eval-mode forward through layers `[start, end)`. No input-shape
    /// check, since intermediate activations are allowed.
    pub fn forward_eval_range(&self, x: &Tensor, start: usize, end: usize) -> Result<Tensor> {
        if start == 0 {
            self.check_input(x)?;
        }
        let mut cur = x.clone();
        for layer in &self.layers[start..end] {
            cur = Self::apply_fixed_owned(layer, cur)?;
        }
        Ok(cur)
    }

    /// Forward in the given mode. Non-BN layers behave identically in all modes.
    pub fn forward(&mut self, x: &Tensor, mode: Mode<'_>) -> Result<Tensor> {
        self.check_input(x)?;
        let mut cur = x.clone();
        for layer in &mut self.layers {
            cur = match (layer, mode) {
                (Layer::BatchNorm(bn), Mode::Train) => {
                    let rho = bn.state.train_momentum;
                    bn_forward_train_cached(&cur, &mut bn.state, rho)?.0
                }
                (Layer::BatchNorm(bn), Mode::Adapt(pass)) if pass.mask.contains(&bn.name) => {
                    bn_forward_adapt(&cur, &mut bn.state, pass.weight, pass.timing)?
                }
                (layer, _) => Self::apply_fixed_owned(layer, cur)?,
            };
        }
        Ok(cur)
    }

    /// Eval-mode logits in chunks of `chunk` items.
    pub fn logits(&self, x: &Tensor, chunk: usize) -> Result<Tensor> {
        let chunk = chunk.max(1);
        let mut parts = Vec::new();
        let mut start = 0;
        while start < x.n() {
            let end = (start + chunk).min(x.n());
            parts.push(self.forward_eval(&x.slice_batch(start, end))?);
            start = end;
        }
        if parts.is_empty() {
            return Ok(Tensor::zeros([0, self.num_outputs(), 1, 1]));
        }
        Tensor::concat(&parts)
    }

    /// Eval-mode arg-max class per item.
    pub fn predict(&self, x: &Tensor, chunk: usize) -> Result<Vec<usize>> {
        let logits = self.logits(x, chunk)?;
        Ok((0..logits.n()).map(|i| argmax(logits.item(i))).collect())
    }

    pub fn num_outputs(&self) -> usize {
        let mut shape = self.input_shape;
        for l in &self.layers {
            shape = l.output_shape(shape).expect("validated");
        }
        shape.iter().product()
    }

    /// Training-mode forward that records what the backward pass needs.
    pub fn forward_train(&mut self, x: &Tensor) -> Result<(Tensor, TrainTrace)> {
        self.check_input(x)?;
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &mut self.layers {
            let (next, cache) = match layer {
                Layer::Conv2d(c) => (
                    conv2d_forward(&cur, &c.weight, &c.bias, c.stride, c.pad)?,
                    Cache::Conv(cur),
                ),
                Layer::BatchNorm(bn) => {
                    let rho = bn.state.train_momentum;
                    let (y, cache) = bn_forward_train_cached(&cur, &mut bn.state, rho)?;
                    (y, Cache::Bn(cache))
                }
                Layer::Relu => (relu_forward(&cur), Cache::Relu(cur)),
                Layer::MaxPool2x2 => {
                    let (y, arg) = maxpool2x2_forward(&cur)?;
                    (y, Cache::Pool(cur.shape(), arg))
                }
                Layer::Flatten => (flatten(&cur), Cache::Flatten(cur.shape())),
                Layer::Linear(l) => (linear_forward(&cur, &l.weight, &l.bias)?, Cache::Linear(cur)),
            };
            caches.push(cache);
            cur = next;
        }
        Ok((cur, TrainTrace { caches }))
    }

    /// Backward through a recorded training pass; one [`LayerGrad`] per layer.
    pub fn backward(&self, trace: &TrainTrace, out_grad: &Tensor) -> Result<Vec<LayerGrad>> {
        if trace.caches.len() != self.layers.len() {
            return dim_err("trace does not belong to this model");
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut g = out_grad.clone();
        for (layer, cache) in self.layers.iter().zip(&trace.caches).rev() {
            let lg = match (layer, cache) {
                (Layer::Conv2d(c), Cache::Conv(x)) => conv2d_backward(x, &c.weight, &g, c.stride, c.pad)?,
                (Layer::BatchNorm(bn), Cache::Bn(cache)) => bn_backward_train(cache, &bn.state.gamma, &g)?,
                (Layer::Relu, Cache::Relu(x)) => LayerGrad::input_only(relu_backward(x, &g)?),
                (Layer::MaxPool2x2, Cache::Pool(shape, arg)) => {
                    LayerGrad::input_only(maxpool2x2_backward(*shape, arg, &g)?)
                }
                (Layer::Flatten, Cache::Flatten(shape)) => LayerGrad::input_only(g.clone().reshape(*shape)?),
                (Layer::Linear(l), Cache::Linear(x)) => linear_backward(x, &l.weight, &g)?,
                _ => return dim_err("trace does not belong to this model"),
            };
            g = lg.input_grad.clone();
            grads.push(lg);
        }
        grads.reverse();
        Ok(grads)
    }

    /// Learned parameters (not running statistics), by layer index and name.
    pub fn params_mut(&mut self) -> Vec<(usize, &'static str, &mut [f64])> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            match layer {
                Layer::Conv2d(c) => {
                    out.push((i, "weight", c.weight.data_mut()));
                    out.push((i, "bias", c.bias.as_mut_slice()));
                }
                Layer::BatchNorm(bn) => {
                    out.push((i, "gamma", bn.state.gamma.as_mut_slice()));
                    out.push((i, "beta", bn.state.beta.as_mut_slice()));
                }
                Layer::Linear(l) => {
                    out.push((i, "weight", l.weight.as_mut_slice()));
                    out.push((i, "bias", l.bias.as_mut_slice()));
                }
                _ => {}
            }
        }
        out
    }

    /// Running statistics of every batch-norm layer, keyed by name.
    pub fn running_stats(&self) -> BTreeMap<String, (Vec<f64>, Vec<f64>)> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::BatchNorm(bn) => Some((
                    bn.name.clone(),
                    (bn.state.running_mean.clone(), bn.state.running_var.clone()),
                )),
                _ => None,
            })
            .collect()
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// SGD with heavy-ball momentum: `v ← μ·v + g`, `p ← p − lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: BTreeMap<(usize, String), Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Result<Self> {
        if !(lr > 0.0) {
            return param_err(format!("learning rate must be > 0, got {lr}"));
        }
        if !(0.0..1.0).contains(&momentum) {
            return param_err(format!("momentum must lie in [0, 1), got {momentum}"));
        }
        Ok(Sgd {
            lr,
            momentum,
            velocity: BTreeMap::new(),
        })
    }

    pub fn step(&mut self, model: &mut Model, grads: &[LayerGrad]) -> Result<()> {
        sgd_step(model, grads, self.lr, self.momentum, &mut self.velocity)
    }
}

/// One SGD update of all learned parameters. Running statistics are left alone.
pub fn sgd_step(
    model: &mut Model,
    grads: &[LayerGrad],
    lr: f64,
    momentum: f64,
    velocity: &mut BTreeMap<(usize, String), Vec<f64>>,
) -> Result<()> {
    if grads.len() != model.layers().len() {
        return dim_err(format!(
            "{} layer gradients for {} layers",
            grads.len(),
            model.layers().len()
        ));
    }
    for (layer, name, param) in model.params_mut() {
        let g = grads[layer].param(name).ok_or_else(|| {
            Error::Dimension(format!("no gradient for parameter '{}' of layer {}", name, layer))
        })?;
        if g.len() != param.len() {
            return dim_err(format!(
                "gradient for '{}' of layer {} has {} entries, parameter has {}",
                name,
                layer,
                g.len(),
                param.len()
            ));
        }
        let v = velocity
            .entry((layer, name.to_string()))
            .or_insert_with(|| vec![0.0; param.len()]);
        for ((p, vi), gi) in param.iter_mut().zip(v.iter_mut()).zip(g) {
            *vi = momentum * *vi + gi;
            *p -= lr * *vi;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bn::batch_stats;

    fn scalar_linear(p: f64) -> Model {
        Model::new(
            [1, 1, 1],
            vec![Layer::Linear(Linear {
                weight: vec![p],
                bias: vec![0.0],
                d_in: 1,
                d_out: 1,
            })],
        )
        .unwrap()
    }

    fn grad_for(g: f64) -> Vec<LayerGrad> {
        let mut pg = BTreeMap::new();
        pg.insert("weight".to_string(), vec![g]);
        pg.insert("bias".to_string(), vec![0.0]);
        vec![LayerGrad {
            input_grad: Tensor::zeros([1, 1, 1, 1]),
            param_grads: pg,
        }]
    }

    fn weight_of(m: &Model) -> f64 {
        match &m.layers()[0] {
            Layer::Linear(l) => l.weight[0],
            _ => unreachable!(),
        }
    }

    #[test]
    fn sgd_examples() {
        let mut m = scalar_linear(0.0);
        let mut opt = Sgd::new(1.0, 0.0).unwrap();
        opt.step(&mut m, &grad_for(1.0)).unwrap();
        assert_eq!(weight_of(&m), -1.0);

        let mut m = scalar_linear(0.5);
        let mut opt = Sgd::new(0.3, 0.9).unwrap();
        opt.step(&mut m, &grad_for(0.0)).unwrap();
        assert_eq!(weight_of(&m), 0.5);

        let mut m = scalar_linear(0.0);
        let mut opt = Sgd::new(0.1, 0.9).unwrap();
        opt.step(&mut m, &grad_for(1.0)).unwrap();
        opt.step(&mut m, &grad_for(1.0)).unwrap();
        assert!((weight_of(&m) + 0.29).abs() < 1e-15);

        assert!(Sgd::new(0.0, 0.5).is_err());
        assert!(Sgd::new(0.1, 1.0).is_err());
    }

    #[test]
    fn sgd_leaves_running_stats() {
        let mut rng = Rng::from_seed(1);
        let mut m = Model::desk_cnn(&mut rng);
        m.bn_mut("bn2").unwrap().running_mean[0] = 0.25;
        let x = Tensor::from_fn([2, 1, 28, 28], |i| ((i % 13) as f64) / 13.0);
        let (out, trace) = m.forward_train(&x).unwrap();
        let stats = m.running_stats();
        let grads = m.backward(&trace, &Tensor::filled(out.shape(), 0.1)).unwrap();
        Sgd::new(0.1, 0.9).unwrap().step(&mut m, &grads).unwrap();
        assert_eq!(m.running_stats(), stats);
    }

    #[test]
    fn desk_cnn_shapes() {
        let m = Model::desk_cnn(&mut Rng::from_seed(0));
        assert_eq!(m.bn_names(), vec!["bn1", "bn2", "bn3"]);
        assert_eq!(m.num_outputs(), 10);
        let y = m.forward_eval(&Tensor::zeros([3, 1, 28, 28])).unwrap();
        assert_eq!(y.shape(), [3, 10, 1, 1]);
        assert!(m.forward_eval(&Tensor::zeros([1, 1, 27, 28])).is_err());
    }

    #[test]
    fn incompatible_layers_rejected() {
        let bad = Model::new(
            [1, 4, 4],
            vec![
                Layer::Flatten,
                Layer::Linear(Linear {
                    weight: vec![0.0; 15],
                    bias: vec![0.0],
                    d_in: 15,
                    d_out: 1,
                }),
            ],
        );
        assert!(matches!(bad, Err(Error::Dimension(_))));
        let dup = Model::new(
            [2, 1, 1],
            vec![
                Layer::BatchNorm(BatchNorm {
                    name: "a".into(),
                    state: BatchNormState::new(2),
                }),
                Layer::BatchNorm(BatchNorm {
                    name: "a".into(),
                    state: BatchNormState::new(2),
                }),
            ],
        );
        assert!(dup.is_err());
    }

    #[test]
    fn no_bn_model_is_mode_independent() {
        let mut rng = Rng::from_seed(2);
        let mut m = Model::new(
            [1, 4, 4],
            vec![
                Layer::Conv2d(Conv2d {
                    weight: Tensor::from_fn([2, 1, 3, 3], |_| rng.normal()),
                    bias: vec![0.1, -0.1],
                    stride: 1,
                    pad: 1,
                }),
                Layer::Relu,
                Layer::MaxPool2x2,
                Layer::Flatten,
                Layer::Linear(Linear {
                    weight: (0..24).map(|_| rng.normal()).collect(),
                    bias: vec![0.0; 3],
                    d_in: 8,
                    d_out: 3,
                }),
            ],
        )
        .unwrap();
        let x = Tensor::from_fn([2, 1, 4, 4], |i| (i as f64).cos());
        let eval = m.forward_eval(&x).unwrap();
        let pass = AdaptPass {
            weight: 0.3,
            mask: LayerMask::all(&m),
            timing: StatsTiming::Post,
        };
        assert_eq!(m.forward(&x, Mode::Train).unwrap(), eval);
        assert_eq!(m.forward(&x, Mode::Adapt(&pass)).unwrap(), eval);
        assert_eq!(m.forward(&x, Mode::Eval).unwrap(), eval);
    }

    #[test]
    fn eval_forward_is_pure_and_repeatable() {
        let m = Model::desk_cnn(&mut Rng::from_seed(4));
        let before = m.clone();
        let x = Tensor::from_fn([2, 1, 28, 28], |i| ((i * 7) % 11) as f64 / 11.0);
        let a = m.forward_eval(&x).unwrap();
        let b = m.forward_eval(&x).unwrap();
        assert_eq!(a.data(), b.data());
        assert_eq!(m, before);
    }

    #[test]
    fn train_forward_updates_each_bn_once() {
        let mut m = Model::desk_cnn(&mut Rng::from_seed(5));
        let x = Tensor::from_fn([4, 1, 28, 28], |i| ((i * 31) % 17) as f64 / 17.0);
        let before = m.clone();
        m.forward(&x, Mode::Train).unwrap();

        // Replay by hand: eval-style pass through the pre-update model, but
        // BN layers normalize with batch stats and fold them in with ρ.
        let mut cur = x.clone();
        for (layer, after) in before.layers().iter().zip(m.layers()) {
            cur = match layer {
                Layer::BatchNorm(bn) => {
                    let (mu, var) = batch_stats(&cur).unwrap();
                    let rho = bn.state.train_momentum;
                    let Layer::BatchNorm(after) = after else { unreachable!() };
                    for c in 0..mu.len() {
                        let em = (1.0 - rho) * bn.state.running_mean[c] + rho * mu[c];
                        let ev = (1.0 - rho) * bn.state.running_var[c] + rho * var[c];
                        assert!((after.state.running_mean[c] - em).abs() < 1e-12);
                        assert!((after.state.running_var[c] - ev).abs() < 1e-12);
                    }
                    crate::bn::bn_normalize(&cur, &mu, &var, &bn.state).unwrap()
                }
                other => Model::apply_fixed(other, &cur).unwrap(),
            };
        }
    }
}
