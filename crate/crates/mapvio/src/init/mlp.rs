//! Fully connected pose-regression network and its trainer.
//!
//! The network maps a flattened grayscale image to a six-vector `z`; the
//! predicted pose is `exp(z)`. Training minimizes the mean squared geodesic
//! distance between prediction and ground truth under the crate's
//! left-invariant metric, with the exact loss gradient from the dual-number
//! head chained into an analytic backward pass through the layers. The
//! optimizer is plain minibatch SGD with an optional per-epoch decay;
//! everything random is driven by one explicit seed.

use nalgebra::{DMatrix, DVector, Vector6};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::se3::{se3_log, MetricParam, Pose};

use super::dual::geodesic_sq_and_grad;

/// Per-layer nonlinearity. The output layer is linear; hidden layers
/// rectify.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `out x in`.
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub activation: Activation,
}

/// Pose-regression model: affine layers with the metric the loss was (or
/// will be) trained under.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    pub layers: Vec<Layer>,
    pub metric: MetricParam,
}

/// Layer widths of the stock architecture: a 32x32 input, five rectified
/// hidden layers of 256, and the six-dimensional twist output.
pub fn default_architecture() -> Vec<usize> {
    vec![1024, 256, 256, 256, 256, 256, 6]
}

impl MlpModel {
    /// Builds a model with uniform He fan-in initialization and zero biases.
    /// `dims` lists layer widths input-first; the output must be six wide.
    pub fn new(dims: &[usize], metric: MetricParam, seed: u64) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::InvalidArgument(
                "architecture needs at least input and output widths".into(),
            ));
        }
        if *dims.last().unwrap() != 6 {
            return Err(Error::InvalidArgument(format!(
                "output width must be 6, got {}",
                dims.last().unwrap()
            )));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument("zero-width layer".into()));
        }
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for w in dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / fan_in as f64).sqrt();
            let weights = DMatrix::from_fn(fan_out, fan_in, |_, _| rng.gen_range(-limit..limit));
            let activation = if layers.len() + 2 == dims.len() {
                Activation::Linear
            } else {
                Activation::Relu
            };
            layers.push(Layer {
                weights,
                bias: DVector::zeros(fan_out),
                activation,
            });
        }
        Ok(MlpModel {
            layers,
            metric,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weights.ncols()
    }

    pub fn forward(&self, input: &DVector<f64>) -> Vector6<f64> {
        let mut a = input.clone();
        for layer in &self.layers {
            a = &layer.weights * a + &layer.bias;
            if layer.activation == Activation::Relu {
                a.apply(|v| *v = v.max(0.0));
            }
        }
        Vector6::from_column_slice(a.as_slice())
    }

    /// Forward pass keeping every post-activation, input first.
    fn forward_cached(&self, input: &DVector<f64>) -> Vec<DVector<f64>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(input.clone());
        for layer in &self.layers {
            let mut a = &layer.weights * acts.last().unwrap() + &layer.bias;
            if layer.activation == Activation::Relu {
                a.apply(|v| *v = v.max(0.0));
            }
            acts.push(a);
        }
        acts
    }

    /// Replaces the output bias with the mean logarithm of the targets, so
    /// an untrained (or zero) head starts at the center of the pose
    /// distribution instead of the identity.
    pub fn center_output_bias(&mut self, targets: &[Pose]) -> Result<()> {
        if targets.is_empty() {
            return Err(Error::InvalidArgument("no poses to center on".into()));
        }
        let mut mean = Vector6::<f64>::zeros();
        for p in targets {
            mean += se3_log(p).as_vector();
        }
        mean /= targets.len() as f64;
        let last = self.layers.last_mut().unwrap();
        last.bias = DVector::from_column_slice(mean.as_slice());
        Ok(())
    }
}

/// Parameter gradients, one `(weights, bias)` pair per layer.
pub struct Gradients {
    pub layers: Vec<(DMatrix<f64>, DVector<f64>)>,
}

impl Gradients {
    fn zeros_like(model: &MlpModel) -> Self {
        Gradients {
            layers: model
                .layers
                .iter()
                .map(|l| {
                    (
                        DMatrix::zeros(l.weights.nrows(), l.weights.ncols()),
                        DVector::zeros(l.bias.len()),
                    )
                })
                .collect(),
        }
    }
}

/// Mean geodesic-squared loss over a batch with exact parameter gradients.
pub fn loss_and_grad(
    model: &MlpModel,
    inputs: &[DVector<f64>],
    targets: &[Pose],
) -> Result<(f64, Gradients)> {
    if inputs.is_empty() || inputs.len() != targets.len() {
        return Err(Error::InvalidArgument(format!(
            "batch size mismatch: {} inputs, {} targets",
            inputs.len(),
            targets.len()
        )));
    }
    let n = inputs.len() as f64;
    let mut grads = Gradients::zeros_like(model);
    let mut loss = 0.0;
    for (x, gt) in inputs.iter().zip(targets) {
        if x.len() != model.input_dim() {
            return Err(Error::InvalidArgument(format!(
                "input width {} does not match model input {}",
                x.len(),
                model.input_dim()
            )));
        }
        let acts = model.forward_cached(x);
        let z = Vector6::from_column_slice(acts.last().unwrap().as_slice());
        let (d2, dz) = geodesic_sq_and_grad(&z, gt, &model.metric);
        loss += d2 / n;

        let mut delta = DVector::from_column_slice(dz.as_slice()) / n;
        for l in (0..model.layers.len()).rev() {
            // acts[l] is the input to layer l.
            grads.layers[l].0 += &delta * acts[l].transpose();
            grads.layers[l].1 += &delta;
            if l > 0 {
                delta = model.layers[l].weights.transpose() * delta;
                // Rectifier mask of the previous layer's output.
                for (d, a) in delta.iter_mut().zip(acts[l].iter()) {
                    if *a <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
        }
    }
    Ok((loss, grads))
}

#[derive(Debug, Clone, Copy)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Multiplies the learning rate after every epoch.
    pub lr_decay: f64,
    /// Heavy-ball coefficient on the update velocity; zero recovers plain
    /// SGD.
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 40,
            batch_size: 32,
            learning_rate: 1e-2,
            lr_decay: 0.98,
            momentum: 0.9,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    /// Mean batch loss per epoch, evaluated before each update.
    pub epoch_losses: Vec<f64>,
}

/// Minibatch SGD over the dataset. Shuffling and nothing else consumes the
/// seed, so equal seeds give bitwise-equal weights.
pub fn train(
    model: &mut MlpModel,
    inputs: &[DVector<f64>],
    targets: &[Pose],
    opts: &TrainOptions,
) -> Result<TrainReport> {
    if inputs.is_empty() || inputs.len() != targets.len() {
        return Err(Error::InvalidArgument(
            "training set empty or input/target lengths differ".into(),
        ));
    }
    if opts.batch_size == 0 || opts.epochs == 0 {
        return Err(Error::InvalidArgument(
            "batch size and epoch count must be positive".into(),
        ));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut lr = opts.learning_rate;
    let mut velocity = Gradients::zeros_like(model);
    let mut epoch_losses = Vec::with_capacity(opts.epochs);
    for _ in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0.0;
        for chunk in order.chunks(opts.batch_size) {
            let bx: Vec<DVector<f64>> = chunk.iter().map(|&i| inputs[i].clone()).collect();
            let bt: Vec<Pose> = chunk.iter().map(|&i| targets[i]).collect();
            let (loss, grads) = loss_and_grad(model, &bx, &bt)?;
            epoch_loss += loss;
            batches += 1.0;
            for ((layer, (vw, vb)), (gw, gb)) in model
                .layers
                .iter_mut()
                .zip(&mut velocity.layers)
                .zip(&grads.layers)
            {
                *vw = &*vw * opts.momentum - gw * lr;
                *vb = &*vb * opts.momentum - gb * lr;
                layer.weights += &*vw;
                layer.bias += &*vb;
            }
        }
        epoch_losses.push(epoch_loss / batches);
        lr *= opts.lr_decay;
    }
    Ok(TrainReport { epoch_losses })
}
