use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ops;
use crate::nn::tape::{Tape, Var};
use crate::nn::Tensor;

/// Fully connected layer computing `x · weight + bias`, weight stored `[in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Uniform init in `±1/√fan_in` for both weight and bias.
    pub fn init<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (input as f32).sqrt();
        let mut draw = |n: usize| -> Vec<f32> { (0..n).map(|_| rng.random_range(-bound..=bound)).collect() };
        let weight = Tensor::new(vec![input, output], draw(input * output)).expect("shape");
        let bias = Tensor::new(vec![output], draw(output)).expect("shape");
        Linear { weight, bias }
    }

    pub fn identity(width: usize) -> Self {
        let mut w = Tensor::zeros(vec![width, width]);
        for i in 0..width {
            w.values_mut()[i * width + i] = 1.0;
        }
        Linear {
            weight: w,
            bias: Tensor::zeros(vec![width]),
        }
    }

    pub fn input_width(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn output_width(&self) -> usize {
        self.weight.shape()[1]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Linear(Linear),
    Relu,
}

/// Layer recipe for an MLP whose representation stage ends in a ReLU of width
/// `repr_width`, followed by a single linear head.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub repr_width: usize,
    pub classes: usize,
}

/// Classifier decomposed as `head_stage ∘ repr_stage`.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitModel {
    repr_stage: Vec<Layer>,
    head_stage: Vec<Layer>,
    input_width: usize,
    repr_width: usize,
    classes: usize,
}

fn chain_width(context: &'static str, mut width: usize, layers: &[Layer]) -> Result<usize> {
    for layer in layers {
        if let Layer::Linear(l) = layer {
            if l.input_width() != width {
                return Err(Error::dim(context, width, l.input_width()));
            }
            if l.bias.numel() != l.output_width() {
                return Err(Error::dim(context, l.output_width(), l.bias.numel()));
            }
            width = l.output_width();
        }
    }
    Ok(width)
}

impl SplitModel {
    /// An empty `repr_stage` makes the representation the raw input.
    pub fn new(input_width: usize, repr_stage: Vec<Layer>, head_stage: Vec<Layer>) -> Result<Self> {
        let repr_width = chain_width("SplitModel repr stage", input_width, &repr_stage)?;
        let classes = chain_width("SplitModel head stage", repr_width, &head_stage)?;
        Ok(SplitModel {
            repr_stage,
            head_stage,
            input_width,
            repr_width,
            classes,
        })
    }

    pub fn mlp<R: Rng + ?Sized>(spec: &MlpSpec, rng: &mut R) -> Result<Self> {
        if spec.input == 0 || spec.repr_width == 0 || spec.classes == 0 || spec.hidden.contains(&0) {
            return Err(Error::Parameter {
                name: "architecture",
                reason: format!("all widths must be positive: {spec:?}"),
            });
        }
        let mut repr = Vec::new();
        let mut width = spec.input;
        for &h in spec.hidden.iter().chain(std::iter::once(&spec.repr_width)) {
            repr.push(Layer::Linear(Linear::init(width, h, rng)));
            repr.push(Layer::Relu);
            width = h;
        }
        let head = vec![Layer::Linear(Linear::init(width, spec.classes, rng))];
        SplitModel::new(spec.input, repr, head)
    }

    pub fn input_width(&self) -> usize {
        self.input_width
    }

    pub fn repr_width(&self) -> usize {
        self.repr_width
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    fn layers(&self) -> impl Iterator<Item = &Layer> {
        self.repr_stage.iter().chain(&self.head_stage)
    }

    /// Parameters in wire order: layer-major, weight before bias.
    pub fn params(&self) -> Vec<&Tensor> {
        self.layers()
            .filter_map(|l| match l {
                Layer::Linear(lin) => Some([&lin.weight, &lin.bias]),
                Layer::Relu => None,
            })
            .flatten()
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.repr_stage
            .iter_mut()
            .chain(self.head_stage.iter_mut())
            .filter_map(|l| match l {
                Layer::Linear(lin) => Some([&mut lin.weight, &mut lin.bias]),
                Layer::Relu => None,
            })
            .flatten()
            .collect()
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.params().iter().map(|t| t.shape().to_vec()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }

    /// Detached copies of every parameter tensor, in wire order.
    pub fn export_params(&self) -> Vec<Tensor> {
        self.params().into_iter().map(Tensor::detached).collect()
    }

    pub fn load_params(&mut self, params: &[Tensor]) -> Result<()> {
        let shapes = self.param_shapes();
        if params.len() != shapes.len() {
            return Err(Error::Protocol(format!(
                "architecture mismatch: expected {} parameter tensors, got {}",
                shapes.len(),
                params.len()
            )));
        }
        for (i, (p, s)) in params.iter().zip(&shapes).enumerate() {
            if p.shape() != s.as_slice() {
                return Err(Error::Protocol(format!(
                    "architecture mismatch at tensor {i}: expected shape {s:?}, got {:?}",
                    p.shape()
                )));
            }
        }
        for (dst, src) in self.params_mut().into_iter().zip(params) {
            *dst = src.detached();
        }
        Ok(())
    }

    fn as_batch(&self, batch: &Tensor) -> Result<Tensor> {
        let b = if batch.shape().len() == 1 {
            batch.detached().reshape(vec![1, batch.numel()])?
        } else {
            batch.detached()
        };
        if b.cols() != self.input_width {
            return Err(Error::dim("forward_split (input width)", self.input_width, b.cols()));
        }
        Ok(b)
    }

    /// Eager inference returning `(repr, logits)` with shapes `(B, d)` and `(B, n)`.
    pub fn forward_split(&self, batch: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut x = self.as_batch(batch)?;
        for layer in &self.repr_stage {
            x = apply(layer, x)?;
        }
        let repr = x.clone();
        for layer in &self.head_stage {
            x = apply(layer, x)?;
        }
        Ok((repr, x))
    }

    /// Eager representation only, skipping the head.
    pub fn represent(&self, batch: &Tensor) -> Result<Tensor> {
        let mut x = self.as_batch(batch)?;
        for layer in &self.repr_stage {
            x = apply(layer, x)?;
        }
        Ok(x)
    }

    /// Records every parameter on `tape` as a trainable leaf, in wire order.
    pub fn bind(&self, tape: &mut Tape) -> Result<Vec<Var>> {
        self.params().into_iter().map(|p| tape.param(p)).collect()
    }

    /// Records the forward pass on `tape`; numerically identical to [`forward_split`].
    ///
    /// [`forward_split`]: SplitModel::forward_split
    pub fn forward_tape(&self, tape: &mut Tape, bound: &[Var], batch: &Tensor) -> Result<(Var, Var)> {
        let input = tape.constant(self.as_batch(batch)?)?;
        let mut vars = bound.iter().copied();
        let mut x = input;
        for layer in &self.repr_stage {
            x = record(layer, tape, x, &mut vars)?;
        }
        let repr = x;
        for layer in &self.head_stage {
            x = record(layer, tape, x, &mut vars)?;
        }
        Ok((repr, x))
    }

    /// Copies leaf gradients from a differentiated tape into the parameters.
    /// Parameters the loss did not reach get an all-zero gradient.
    pub fn collect_grads(&mut self, tape: &Tape, bound: &[Var]) -> Result<()> {
        let params = self.params_mut();
        if bound.len() != params.len() {
            return Err(Error::dim("collect_grads", params.len(), bound.len()));
        }
        for (p, &v) in params.into_iter().zip(bound) {
            let g = match tape.grad(v) {
                Some(g) => g.to_vec(),
                None => vec![0.0; p.numel()],
            };
            p.set_grad(g)?;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.clear_grad();
        }
    }
}

fn apply(layer: &Layer, x: Tensor) -> Result<Tensor> {
    match layer {
        Layer::Linear(l) => {
            let (b, k, m) = (x.rows(), x.cols(), l.output_width());
            let mut out = ops::matmul(x.values(), l.weight.values(), b, k, m);
            for row in out.chunks_mut(m) {
                for (o, &bv) in row.iter_mut().zip(l.bias.values()) {
                    *o += bv;
                }
            }
            Tensor::new(vec![b, m], out)
        }
        Layer::Relu => {
            let mut x = x;
            for v in x.values_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
            Ok(x)
        }
    }
}

fn record(layer: &Layer, tape: &mut Tape, x: Var, vars: &mut impl Iterator<Item = Var>) -> Result<Var> {
    match layer {
        Layer::Linear(_) => {
            let missing = || Error::State("fewer bound parameters than layers".into());
            let w = vars.next().ok_or_else(missing)?;
            let b = vars.next().ok_or_else(missing)?;
            let h = tape.matmul(x, w)?;
            tape.add_bias(h, b)
        }
        Layer::Relu => tape.relu(x),
    }
}

/// Plain SGD: `p ← p − lr·grad(p)`, then clears gradients.
pub fn sgd_step(model: &mut SplitModel, lr: f32) -> Result<()> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::Parameter {
            name: "lr",
            reason: format!("learning rate must be non-negative and finite, got {lr}"),
        });
    }
    if model.params().iter().any(|p| p.grad().is_none()) {
        return Err(Error::State("sgd_step called before gradients were populated".into()));
    }
    for p in model.params_mut() {
        let g = p.take_grad().expect("checked above");
        for (v, gv) in p.values_mut().iter_mut().zip(g) {
            *v -= lr * gv;
        }
    }
    Ok(())
}
