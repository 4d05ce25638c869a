//! Small multilayer perceptrons with an analytic loss-and-gradient oracle.
//!
//! Parameters live in a [`RaggedTensor`] with components `W1, b1, ..., Wk, bk`
//! where `Wi` has shape `[dims[i], dims[i-1]]` and `bi` has shape `[dims[i]]`.
//! Hidden layers apply the configured activation; the output layer is linear.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Component, RaggedTensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the activation output `a = f(z)`.
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// `1/(2·n·o) · Σ (y - t)²`: half the squared error, averaged over both the
    /// batch and the output dimension.
    Mse,
    /// Mean over the batch of `-Σ_k t_k · log softmax(y)_k`.
    CrossEntropy,
}

/// Inputs and targets, one sample per row.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    inputs: Array2<f64>,
    targets: Array2<f64>,
}

impl Batch {
    pub fn new(inputs: Array2<f64>, targets: Array2<f64>) -> Result<Self> {
        if inputs.nrows() == 0 {
            return Err(Error::shape("batch must contain at least one sample"));
        }
        if inputs.nrows() != targets.nrows() {
            return Err(Error::shape(format!(
                "batch has {} input rows but {} target rows",
                inputs.nrows(),
                targets.nrows()
            )));
        }
        Ok(Self { inputs, targets })
    }

    pub fn inputs(&self) -> ArrayView2<'_, f64> {
        self.inputs.view()
    }

    pub fn targets(&self) -> ArrayView2<'_, f64> {
        self.targets.view()
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.nrows() == 0
    }

    /// Rows selected by `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Batch> {
        Batch::new(
            self.inputs.select(Axis(0), indices),
            self.targets.select(Axis(0), indices),
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layer_dims: Vec<usize>,
    activation: Activation,
    params: RaggedTensor,
}

fn weight_name(layer: usize) -> String {
    format!("W{layer}")
}

fn bias_name(layer: usize) -> String {
    format!("b{layer}")
}

fn check_dims(layer_dims: &[usize]) -> Result<()> {
    if layer_dims.len() < 2 {
        return Err(Error::InvalidConfig(format!(
            "an MLP needs at least input and output dims, got {layer_dims:?}"
        )));
    }
    if layer_dims.contains(&0) {
        return Err(Error::InvalidConfig(format!(
            "layer dims must be positive, got {layer_dims:?}"
        )));
    }
    Ok(())
}

impl Mlp {
    /// Wraps existing parameters, checking they match `layer_dims`.
    pub fn new(layer_dims: Vec<usize>, activation: Activation, params: RaggedTensor) -> Result<Self> {
        let template = Self::zeros(layer_dims, activation)?;
        if !template.params.is_congruent(&params) {
            return Err(Error::shape(
                "parameters do not match the layer dims (expected W1, b1, ..., Wk, bk)",
            ));
        }
        Ok(Self {
            params,
            ..template
        })
    }

    pub fn zeros(layer_dims: Vec<usize>, activation: Activation) -> Result<Self> {
        check_dims(&layer_dims)?;
        let mut components = Vec::with_capacity(2 * (layer_dims.len() - 1));
        for i in 1..layer_dims.len() {
            components.push(Component::zeros(
                weight_name(i),
                vec![layer_dims[i], layer_dims[i - 1]],
            ));
            components.push(Component::zeros(bias_name(i), vec![layer_dims[i]]));
        }
        Ok(Self {
            layer_dims,
            activation,
            params: RaggedTensor::new(components)?,
        })
    }

    /// Fan-in uniform initialization: every weight and bias of layer `i`
    /// drawn from `U(-1/sqrt(dims[i-1]), 1/sqrt(dims[i-1]))`.
    pub fn init<R: Rng + ?Sized>(
        layer_dims: Vec<usize>,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let mut mlp = Self::zeros(layer_dims, activation)?;
        for (idx, c) in mlp.params.components_mut().iter_mut().enumerate() {
            let fan_in = mlp.layer_dims[idx / 2] as f64;
            let bound = 1.0 / fan_in.sqrt();
            for v in c.values_mut() {
                *v = rng.random_range(-bound..bound);
            }
        }
        Ok(mlp)
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn params(&self) -> &RaggedTensor {
        &self.params
    }

    pub fn set_params(&mut self, params: RaggedTensor) -> Result<()> {
        if !self.params.is_congruent(&params) {
            return Err(Error::shape("replacement parameters are not congruent"));
        }
        self.params = params;
        Ok(())
    }

    pub fn into_params(self) -> RaggedTensor {
        self.params
    }

    fn num_layers(&self) -> usize {
        self.layer_dims.len() - 1
    }

    fn layer<'a>(
        &self,
        params: &'a RaggedTensor,
        i: usize,
    ) -> (ArrayView2<'a, f64>, ArrayView1<'a, f64>) {
        let comps = params.components();
        let w = &comps[2 * (i - 1)];
        let b = &comps[2 * (i - 1) + 1];
        let shape = (self.layer_dims[i], self.layer_dims[i - 1]);
        let w = ArrayView2::from_shape(shape, w.values()).expect("congruent weight component");
        (w, ArrayView1::from(b.values()))
    }

    fn check_params(&self, params: &RaggedTensor) -> Result<()> {
        if self.params.is_congruent(params) {
            Ok(())
        } else {
            Err(Error::shape("parameters are not congruent with the model"))
        }
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        self.check_inputs(batch.inputs())?;
        let out = *self.layer_dims.last().expect("at least two dims");
        if batch.targets().ncols() != out {
            return Err(Error::shape(format!(
                "targets have {} columns, model outputs {out}",
                batch.targets().ncols()
            )));
        }
        Ok(())
    }

    fn check_inputs(&self, inputs: ArrayView2<f64>) -> Result<()> {
        if inputs.ncols() != self.layer_dims[0] {
            return Err(Error::shape(format!(
                "inputs have {} columns, model expects {}",
                inputs.ncols(),
                self.layer_dims[0]
            )));
        }
        Ok(())
    }

    /// Layer outputs `[h0 = inputs, h1, ..., hk = logits]`.
    fn activations(&self, params: &RaggedTensor, inputs: ArrayView2<f64>) -> Vec<Array2<f64>> {
        let k = self.num_layers();
        let mut hs = Vec::with_capacity(k + 1);
        hs.push(inputs.to_owned());
        for i in 1..=k {
            let (w, b) = self.layer(params, i);
            let mut z = hs[i - 1].dot(&w.t());
            z += &b;
            if i < k {
                let act = self.activation;
                z.mapv_inplace(|v| act.apply(v));
            }
            hs.push(z);
        }
        hs
    }

    pub fn forward(&self, inputs: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.forward_with(&self.params, inputs)
    }

    pub fn forward_with(&self, params: &RaggedTensor, inputs: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_params(params)?;
        self.check_inputs(inputs)?;
        Ok(self
            .activations(params, inputs)
            .pop()
            .expect("at least one layer"))
    }

    pub fn loss(&self, batch: &Batch, kind: LossKind) -> Result<f64> {
        self.loss_at(&self.params, batch, kind)
    }

    /// Loss of the model evaluated with `params` in place of its own.
    pub fn loss_at(&self, params: &RaggedTensor, batch: &Batch, kind: LossKind) -> Result<f64> {
        self.check_batch(batch)?;
        let out = self.forward_with(params, batch.inputs())?;
        Ok(loss_value(out.view(), batch.targets(), kind))
    }

    pub fn grad(&self, batch: &Batch, kind: LossKind) -> Result<(f64, RaggedTensor)> {
        self.grad_at(&self.params, batch, kind)
    }

    /// Loss and backpropagated gradient at `params`.
    pub fn grad_at(
        &self,
        params: &RaggedTensor,
        batch: &Batch,
        kind: LossKind,
    ) -> Result<(f64, RaggedTensor)> {
        self.check_params(params)?;
        self.check_batch(batch)?;
        let k = self.num_layers();
        let hs = self.activations(params, batch.inputs());
        let logits = hs[k].view();
        let loss = loss_value(logits, batch.targets(), kind);
        let mut delta = loss_delta(logits, batch.targets(), kind);

        let mut grad = params.zeros_like();
        for i in (1..=k).rev() {
            let dw = delta.t().dot(&hs[i - 1]);
            let db = delta.sum_axis(Axis(0));
            {
                let comps = grad.components_mut();
                comps[2 * (i - 1)]
                    .values_mut()
                    .copy_from_slice(dw.as_standard_layout().as_slice().expect("standard layout"));
                comps[2 * (i - 1) + 1]
                    .values_mut()
                    .copy_from_slice(db.as_slice().expect("contiguous"));
            }
            if i > 1 {
                let (w, _) = self.layer(params, i);
                let mut back = delta.dot(&w);
                let act = self.activation;
                back.zip_mut_with(&hs[i - 1], |d, &a| *d *= act.derivative_from_output(a));
                delta = back;
            }
        }
        Ok((loss, grad))
    }

    /// Central-difference gradient `(L(w + h e_j) - L(w - h e_j)) / 2h`.
    pub fn finite_diff_grad(&self, batch: &Batch, kind: LossKind, h: f64) -> Result<RaggedTensor> {
        if h.is_nan() || h <= 0.0 {
            return Err(Error::OutOfRange {
                what: "finite-difference step",
                value: h,
                limit: 0.0,
            });
        }
        self.check_batch(batch)?;
        let mut probe = self.params.clone();
        let mut grad = self.params.zeros_like();
        for c in 0..probe.components().len() {
            for j in 0..probe.components()[c].len() {
                let orig = probe.components()[c].values()[j];
                probe.components_mut()[c].values_mut()[j] = orig + h;
                let plus = self.loss_at(&probe, batch, kind)?;
                probe.components_mut()[c].values_mut()[j] = orig - h;
                let minus = self.loss_at(&probe, batch, kind)?;
                probe.components_mut()[c].values_mut()[j] = orig;
                grad.components_mut()[c].values_mut()[j] = (plus - minus) / (2.0 * h);
            }
        }
        Ok(grad)
    }

    /// Fraction of rows whose argmax output matches the argmax target.
    pub fn accuracy_at(&self, params: &RaggedTensor, batch: &Batch) -> Result<f64> {
        let out = self.forward_with(params, batch.inputs())?;
        let hits = out
            .rows()
            .into_iter()
            .zip(batch.targets().rows())
            .filter(|(o, t)| argmax(*o) == argmax(*t))
            .count();
        Ok(hits as f64 / batch.len() as f64)
    }
}

fn argmax(row: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn log_softmax_row(row: ArrayView1<f64>) -> Array1<f64> {
    let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.mapv(|v| v - lse)
}

fn loss_value(out: ArrayView2<f64>, targets: ArrayView2<f64>, kind: LossKind) -> f64 {
    let n = out.nrows() as f64;
    match kind {
        LossKind::Mse => {
            let count = (out.nrows() * out.ncols()) as f64;
            let sq: f64 = out
                .iter()
                .zip(targets.iter())
                .map(|(y, t)| (y - t) * (y - t))
                .sum();
            0.5 * sq / count
        }
        LossKind::CrossEntropy => {
            let mut total = 0.0;
            for (row, t) in out.rows().into_iter().zip(targets.rows()) {
                let ls = log_softmax_row(row);
                total -= ls.iter().zip(t.iter()).map(|(l, t)| l * t).sum::<f64>();
            }
            total / n
        }
    }
}

/// Derivative of the loss with respect to the logits.
fn loss_delta(out: ArrayView2<f64>, targets: ArrayView2<f64>, kind: LossKind) -> Array2<f64> {
    match kind {
        LossKind::Mse => {
            let count = (out.nrows() * out.ncols()) as f64;
            (&out - &targets) / count
        }
        LossKind::CrossEntropy => {
            let n = out.nrows() as f64;
            let mut delta = Array2::zeros(out.raw_dim());
            for ((row, t), mut d) in out
                .rows()
                .into_iter()
                .zip(targets.rows())
                .zip(delta.rows_mut())
            {
                let mass = t.sum();
                let ls = log_softmax_row(row);
                for ((dv, l), tv) in d.iter_mut().zip(ls.iter()).zip(t.iter()) {
                    *dv = (l.exp() * mass - tv) / n;
                }
            }
            delta
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn linear_1_1(w: f64, b: f64) -> Mlp {
        let params = RaggedTensor::from_parts([
            ("W1", vec![1, 1], vec![w]),
            ("b1", vec![1], vec![b]),
        ])
        .unwrap();
        Mlp::new(vec![1, 1], Activation::Tanh, params).unwrap()
    }

    #[test]
    fn zero_weight_net_outputs_zero() {
        let mlp = Mlp::zeros(vec![3, 3], Activation::Relu).unwrap();
        let out = mlp.forward(array![[1.0, -2.0, 3.0], [0.5, 0.5, 0.5]].view()).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
        assert_eq!(out.dim(), (2, 3));
    }

    #[test]
    fn affine_map() {
        let out = linear_1_1(2.0, 1.0).forward(array![[3.0]].view()).unwrap();
        assert_eq!(out[[0, 0]], 7.0);
    }

    #[test]
    fn forward_unchanged_after_perturb_and_restore() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut mlp = Mlp::init(vec![4, 5, 2], Activation::Tanh, &mut rng).unwrap();
        let x = array![[0.1, 0.2, -0.3, 0.4]];
        let before = mlp.forward(x.view()).unwrap();
        let saved = mlp.params().clone();
        let eps = saved.map(|v| 0.37 * v + 0.01);
        mlp.set_params(saved.add(&eps).unwrap()).unwrap();
        mlp.set_params(saved).unwrap();
        assert_eq!(mlp.forward(x.view()).unwrap(), before);
    }

    #[test]
    fn wrong_input_width_rejected() {
        let mlp = Mlp::zeros(vec![3, 2], Activation::Tanh).unwrap();
        assert!(matches!(
            mlp.forward(array![[1.0, 2.0]].view()),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn mse_cases() {
        let perfect = Batch::new(array![[3.0]], array![[7.0]]).unwrap();
        assert_eq!(linear_1_1(2.0, 1.0).loss(&perfect, LossKind::Mse).unwrap(), 0.0);

        // prediction 2, target 0: squared error 4, halved by the 1/2 convention
        let b = Batch::new(array![[1.0]], array![[0.0]]).unwrap();
        assert_eq!(linear_1_1(2.0, 0.0).loss(&b, LossKind::Mse).unwrap(), 2.0);
    }

    #[test]
    fn uniform_logits_cross_entropy_is_ln_c() {
        let mlp = Mlp::zeros(vec![2, 5], Activation::Tanh).unwrap();
        let b = Batch::new(
            array![[0.3, -1.0], [2.0, 0.0]],
            array![[0.0, 1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 0.0, 1.0]],
        )
        .unwrap();
        let l = mlp.loss(&b, LossKind::CrossEntropy).unwrap();
        assert!((l - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn quadratic_bowl_gradient_is_w() {
        // L(w) = w^2 / 2 with input 1, target 0, zero bias
        for w in [-3.0, 0.5, 2.0] {
            let b = Batch::new(array![[1.0]], array![[0.0]]).unwrap();
            let (loss, g) = linear_1_1(w, 0.0).grad(&b, LossKind::Mse).unwrap();
            assert_eq!(loss, w * w / 2.0);
            assert_eq!(g.components()[0].values()[0], w);
        }
    }

    #[test]
    fn zero_weight_net_symmetric_target_has_zero_bias_free_gradient() {
        let mlp = Mlp::zeros(vec![2, 3, 2], Activation::Tanh).unwrap();
        let b = Batch::new(array![[1.0, -1.0], [-1.0, 1.0]], array![[0.0, 0.0], [0.0, 0.0]])
            .unwrap();
        let (_, g) = mlp.grad(&b, LossKind::Mse).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_model_finite_difference_matches_exactly() {
        let b = Batch::new(array![[1.5], [-0.5]], array![[0.3], [1.0]]).unwrap();
        let mlp = linear_1_1(0.7, -0.2);
        let (_, g) = mlp.grad(&b, LossKind::Mse).unwrap();
        let fd = mlp.finite_diff_grad(&b, LossKind::Mse, 1e-5).unwrap();
        for (a, n) in g.iter().zip(fd.iter()) {
            assert!((a - n).abs() < 1e-8, "{a} vs {n}");
        }
    }

    #[test]
    fn constant_loss_finite_difference_is_zero() {
        let mlp = Mlp::zeros(vec![3, 4, 2], Activation::Relu).unwrap();
        let b = Batch::new(Array2::zeros((2, 3)), array![[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let fd = mlp.finite_diff_grad(&b, LossKind::Mse, 1e-5).unwrap();
        // only the output bias moves the loss
        for c in fd.components() {
            if c.name() != "b2" {
                assert!(c.values().iter().all(|&v| v == 0.0), "{}", c.name());
            }
        }
        assert!(mlp.finite_diff_grad(&b, LossKind::Mse, 0.0).is_err());
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mlp = Mlp::init(vec![16, 4, 3], Activation::Tanh, &mut rng).unwrap();
        for c in mlp.params().components() {
            let bound = match c.name() {
                "W1" | "b1" => 0.25,
                _ => 0.5,
            };
            assert!(c.values().iter().all(|v| v.abs() < bound));
        }
        assert_eq!(mlp.params().components()[0].shape(), &[4, 16]);
        assert_eq!(mlp.params().components()[3].shape(), &[3]);
    }

    #[test]
    fn accuracy_counts_argmax_matches() {
        let mlp = linear_1_1(1.0, 0.0);
        let params = RaggedTensor::from_parts([
            ("W1", vec![2, 1], vec![1.0, -1.0]),
            ("b1", vec![2], vec![0.0, 0.0]),
        ])
        .unwrap();
        let two = Mlp::new(vec![1, 2], Activation::Tanh, params).unwrap();
        let b = Batch::new(array![[1.0], [-1.0], [2.0]], array![[1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])
            .unwrap();
        assert!((two.accuracy_at(two.params(), &b).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!(mlp.accuracy_at(two.params(), &b).is_err());
    }
}
