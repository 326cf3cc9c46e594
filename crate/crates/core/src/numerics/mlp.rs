use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Matrix, ParamBlock, Parameterized};
use crate::scalar::Scalar;

pub const LAYER_NORM_EPS: f64 = 1e-5;
const SOFTPLUS_GUARD: f64 = 20.0;

/// Layer layout: `hidden_dims.len()` blocks of linear → layer-norm → Mish,
/// then one plain linear output layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    /// Initialise the output layer to zero (reward and value heads).
    pub zero_final: bool,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden_dims: &[usize], output_dim: usize) -> Self {
        MlpSpec {
            input_dim,
            hidden_dims: hidden_dims.to_vec(),
            output_dim,
            zero_final: false,
        }
    }

    pub fn zero_final(mut self) -> Self {
        self.zero_final = true;
        self
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut fan_in = self.input_dim;
        for &h in &self.hidden_dims {
            dims.push((fan_in, h));
            fan_in = h;
        }
        dims.push((fan_in, self.output_dim));
        dims
    }
}

#[inline]
pub fn softplus<T: Scalar>(x: T) -> T {
    let guard = T::lit(SOFTPLUS_GUARD);
    if x > guard {
        x
    } else if x < -guard {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `tanh(softplus(x))` from a single exponential:
/// with `n = e^x (e^x + 2)` it equals `n / (n + 2)`.
#[inline]
fn tanh_softplus<T: Scalar>(x: T) -> (T, T) {
    let e = x.exp();
    let n = e * (e + T::lit(2.0));
    (n / (n + T::lit(2.0)), e)
}

#[inline]
pub fn mish<T: Scalar>(x: T) -> T {
    if x > T::lit(SOFTPLUS_GUARD) {
        return x;
    }
    x * tanh_softplus(x).0
}

#[inline]
pub fn mish_grad<T: Scalar>(x: T) -> T {
    if x > T::lit(SOFTPLUS_GUARD) {
        return T::one();
    }
    let (t, e) = tanh_softplus(x);
    t + x * (T::one() - t * t) * (e / (T::one() + e))
}

#[derive(Clone, Debug)]
struct HiddenCache<T> {
    input: Matrix<T>,
    xhat: Matrix<T>,
    inv_std: Vec<T>,
    normed: Matrix<T>,
}

/// Activations retained by [`Mlp::forward_tape`] for the reverse pass.
#[derive(Clone, Debug)]
pub struct MlpTape<T> {
    version: u64,
    hidden: Vec<HiddenCache<T>>,
    final_input: Matrix<T>,
}

/// Feed-forward network with hand-written reverse mode.
#[derive(Clone, Debug)]
pub struct Mlp<T> {
    name: String,
    spec: MlpSpec,
    /// Per hidden layer: weight, bias, ln_gamma, ln_beta; then output weight, bias.
    blocks: Vec<ParamBlock<T>>,
    version: u64,
}

impl<T: Scalar> Mlp<T> {
    /// Hidden weights are uniform in ±sqrt(1/fan_in) with zero biases and
    /// unit/zero layer-norm affine parameters.
    pub fn new<R: Rng + ?Sized>(name: &str, spec: MlpSpec, rng: &mut R) -> Self {
        let dims = spec.layer_dims();
        let n_hidden = spec.hidden_dims.len();
        let mut blocks = Vec::with_capacity(4 * n_hidden + 2);
        for (l, &(fan_in, fan_out)) in dims.iter().enumerate() {
            let bound = (1.0 / fan_in.max(1) as f64).sqrt();
            let weight = if l == n_hidden && spec.zero_final {
                Matrix::zeros(fan_in, fan_out)
            } else {
                Matrix::uniform(fan_in, fan_out, bound, rng)
            };
            blocks.push(ParamBlock::new(format!("{name}.{l}.weight"), weight));
            blocks.push(ParamBlock::new(format!("{name}.{l}.bias"), Matrix::zeros(1, fan_out)));
            if l < n_hidden {
                blocks.push(ParamBlock::new(
                    format!("{name}.{l}.ln_gamma"),
                    Matrix::filled(1, fan_out, T::one()),
                ));
                blocks.push(ParamBlock::new(format!("{name}.{l}.ln_beta"), Matrix::zeros(1, fan_out)));
            }
        }
        Mlp {
            name: name.to_string(),
            spec,
            blocks,
            version: 0,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Renames the network and every block prefix.
    pub fn rename(&mut self, name: &str) {
        for b in &mut self.blocks {
            if let Some(rest) = b.name.strip_prefix(&self.name) {
                b.name = format!("{name}{rest}");
            }
        }
        self.name = name.to_string();
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    fn check_input(&self, input: &Matrix<T>) -> Result<()> {
        if input.cols() != self.spec.input_dim {
            return Err(Error::dim(
                format!("{} layer 0 input", self.name),
                self.spec.input_dim,
                input.cols(),
            ));
        }
        Ok(())
    }

    fn linear(&self, l: usize, x: &Matrix<T>, block0: usize) -> Result<Matrix<T>> {
        let w = &self.blocks[block0].value;
        let b = &self.blocks[block0 + 1].value;
        let mut z = Matrix::zeros(x.rows(), w.cols());
        for r in 0..z.rows() {
            z.row_mut(r).copy_from_slice(b.row(0));
        }
        Matrix::gemm_into(&mut z, T::one(), x, false, w, false, T::one()).map_err(|e| match e {
            Error::Dimension { expected, got, .. } => Error::Dimension {
                context: format!("{} layer {l}", self.name),
                expected,
                got,
            },
            other => other,
        })?;
        Ok(z)
    }

    fn layer_norm(&self, z: &Matrix<T>, gamma: &Matrix<T>, beta: &Matrix<T>) -> (Matrix<T>, Vec<T>, Matrix<T>) {
        let n = T::from_usize_lossy(z.cols());
        let eps = T::lit(LAYER_NORM_EPS);
        let mut xhat = Matrix::zeros(z.rows(), z.cols());
        let mut normed = Matrix::zeros(z.rows(), z.cols());
        let mut inv_std = Vec::with_capacity(z.rows());
        for r in 0..z.rows() {
            let row = z.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            let xr = xhat.row_mut(r);
            for (o, &v) in xr.iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            let nr = normed.row_mut(r);
            for (c, o) in nr.iter_mut().enumerate() {
                *o = gamma[(0, c)] * xhat[(r, c)] + beta[(0, c)];
            }
        }
        (xhat, inv_std, normed)
    }

    fn run(&self, input: &Matrix<T>, keep: bool) -> Result<(Matrix<T>, Option<MlpTape<T>>)> {
        self.check_input(input)?;
        let n_hidden = self.spec.hidden_dims.len();
        let mut hidden = Vec::with_capacity(if keep { n_hidden } else { 0 });
        let mut x = input.clone();
        for l in 0..n_hidden {
            let b0 = 4 * l;
            let z = self.linear(l, &x, b0)?;
            let (xhat, inv_std, normed) =
                self.layer_norm(&z, &self.blocks[b0 + 2].value, &self.blocks[b0 + 3].value);
            let act = normed.map(mish);
            if keep {
                hidden.push(HiddenCache {
                    input: x,
                    xhat,
                    inv_std,
                    normed,
                });
            }
            x = act;
        }
        let out = self.linear(n_hidden, &x, 4 * n_hidden)?;
        let tape = keep.then(|| MlpTape {
            version: self.version,
            hidden,
            final_input: x,
        });
        Ok((out, tape))
    }

    /// Inference-only forward pass.
    pub fn forward(&self, input: &Matrix<T>) -> Result<Matrix<T>> {
        Ok(self.run(input, false)?.0)
    }

    pub fn forward_tape(&self, input: &Matrix<T>) -> Result<(Matrix<T>, MlpTape<T>)> {
        let (out, tape) = self.run(input, true)?;
        Ok((out, tape.expect("tape requested")))
    }

    fn check_tape(&self, tape: &MlpTape<T>) -> Result<()> {
        if tape.version != self.version {
            return Err(Error::StaleTape {
                network: self.name.clone(),
                recorded: tape.version,
                current: self.version,
            });
        }
        Ok(())
    }

    /// Reverse pass: accumulates parameter gradients and returns the input
    /// gradient.
    pub fn backward(&mut self, tape: &MlpTape<T>, upstream: &Matrix<T>) -> Result<Matrix<T>> {
        let mut sink = GradSink { grads: Vec::new() };
        let dx = sink.reverse(self, tape, upstream, true)?;
        for (block, g) in self.blocks.iter_mut().zip(sink.grads) {
            block.grad.add_assign(&g);
        }
        Ok(dx)
    }

    /// Reverse pass that only propagates to the input; parameter gradients
    /// are left untouched.
    pub fn backward_input(&self, tape: &MlpTape<T>, upstream: &Matrix<T>) -> Result<Matrix<T>> {
        GradSink { grads: Vec::new() }.reverse(self, tape, upstream, false)
    }

    pub fn blocks_ref(&self) -> &[ParamBlock<T>] {
        &self.blocks
    }

    /// Grants mutable access to the parameters and invalidates live tapes.
    pub fn blocks_slice_mut(&mut self) -> &mut [ParamBlock<T>] {
        self.version += 1;
        &mut self.blocks
    }

    pub fn cast<U: Scalar>(&self) -> Mlp<U> {
        Mlp {
            name: self.name.clone(),
            spec: self.spec.clone(),
            blocks: self.blocks.iter().map(ParamBlock::cast).collect(),
            version: 0,
        }
    }
}

struct GradSink<T> {
    grads: Vec<Matrix<T>>,
}

impl<T: Scalar> GradSink<T> {
    fn reverse(
        &mut self,
        net: &Mlp<T>,
        tape: &MlpTape<T>,
        upstream: &Matrix<T>,
        accumulate: bool,
    ) -> Result<Matrix<T>> {
        net.check_tape(tape)?;
        let n_hidden = net.spec.hidden_dims.len();
        let rows = tape.final_input.rows();
        if upstream.shape() != (rows, net.spec.output_dim) {
            return Err(Error::dim(
                format!("{} upstream gradient", net.name),
                format!("{rows}x{}", net.spec.output_dim),
                format!("{}x{}", upstream.rows(), upstream.cols()),
            ));
        }
        if accumulate {
            self.grads = net.blocks.iter().map(|b| Matrix::zeros(b.value.rows(), b.value.cols())).collect();
        }

        let out_b0 = 4 * n_hidden;
        let mut grad = upstream.clone();
        if accumulate {
            Matrix::gemm_into(&mut self.grads[out_b0], T::one(), &tape.final_input, true, &grad, false, T::zero())?;
            self.grads[out_b0 + 1] = grad.col_sums();
        }
        let mut dx = grad.matmul_t(&net.blocks[out_b0].value)?;

        for l in (0..n_hidden).rev() {
            let b0 = 4 * l;
            let cache = &tape.hidden[l];
            let gamma = &net.blocks[b0 + 2].value;
            // through Mish
            let mut dnormed = dx;
            for (g, &u) in dnormed.as_mut_slice().iter_mut().zip(cache.normed.as_slice()) {
                *g *= mish_grad(u);
            }
            // through the layer-norm affine and normalisation
            let width = dnormed.cols();
            let n = T::from_usize_lossy(width);
            let mut dz = Matrix::zeros(dnormed.rows(), width);
            let mut dgamma = Matrix::zeros(1, width);
            let mut dbeta = Matrix::zeros(1, width);
            for r in 0..dnormed.rows() {
                let dn = dnormed.row(r);
                let xh = cache.xhat.row(r);
                let mut sum_dxh = T::zero();
                let mut sum_dxh_xh = T::zero();
                for c in 0..width {
                    let dxh = dn[c] * gamma[(0, c)];
                    sum_dxh += dxh;
                    sum_dxh_xh += dxh * xh[c];
                    if accumulate {
                        dgamma[(0, c)] += dn[c] * xh[c];
                        dbeta[(0, c)] += dn[c];
                    }
                }
                let scale = cache.inv_std[r] / n;
                let dzr = dz.row_mut(r);
                for c in 0..width {
                    let dxh = dn[c] * gamma[(0, c)];
                    dzr[c] = scale * (n * dxh - sum_dxh - xh[c] * sum_dxh_xh);
                }
            }
            grad = dz;
            if accumulate {
                self.grads[b0 + 2] = dgamma;
                self.grads[b0 + 3] = dbeta;
                Matrix::gemm_into(&mut self.grads[b0], T::one(), &cache.input, true, &grad, false, T::zero())?;
                self.grads[b0 + 1] = grad.col_sums();
            }
            dx = grad.matmul_t(&net.blocks[b0].value)?;
        }
        Ok(dx)
    }
}

impl<T: Scalar> Parameterized<T> for Mlp<T> {
    fn blocks(&self) -> Vec<&ParamBlock<T>> {
        self.blocks.iter().collect()
    }

    fn blocks_mut(&mut self) -> Vec<&mut ParamBlock<T>> {
        self.version += 1;
        self.blocks.iter_mut().collect()
    }

    fn zero_grad(&mut self) {
        // gradients are not read by forward passes; tapes stay valid
        for b in &mut self.blocks {
            b.zero_grad();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_grad;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn pure_linear_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = Mlp::<f64>::new("id", MlpSpec::new(2, &[], 2), &mut rng);
        {
            let blocks = net.blocks_slice_mut();
            blocks[0].value = Matrix::identity(2);
            blocks[1].value = Matrix::zeros(1, 2);
        }
        let y = net.forward(&Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap()).unwrap();
        assert_eq!(y.as_slice(), &[1.0, 2.0]);
    }

    #[test]
    fn mish_at_zero() {
        assert_eq!(mish(0.0f64), 0.0);
        // d/dx mish at 0 = tanh(ln 2) = 0.6
        let fd = (mish(1e-6f64) - mish(-1e-6f64)) / 2e-6;
        assert!((fd - 0.6).abs() < 1e-9, "{fd}");
        assert!((mish_grad(0.0f64) - 0.6).abs() < 1e-12);
        // guard regions stay finite and continuous
        assert!((mish(25.0f64) - 25.0).abs() < 1e-9);
        assert!(mish(-50.0f64).abs() < 1e-15);
    }

    #[test]
    fn mish_grad_matches_central_differences() {
        for &x in &[-25.0f64, -19.9, -3.0, -0.5, 0.0, 0.7, 4.0, 19.9, 21.0] {
            let h = 1e-6;
            let fd = (mish(x + h) - mish(x - h)) / (2.0 * h);
            assert!((fd - mish_grad(x)).abs() < 1e-7, "x={x} fd={fd} an={}", mish_grad(x));
        }
    }

    #[test]
    fn mish_matches_tanh_softplus_definition() {
        for k in -4000..=4000 {
            let x = k as f64 / 100.0;
            let reference = x * softplus(x).tanh();
            assert!((mish(x) - reference).abs() <= 1e-12 * reference.abs().max(1e-3), "{x}");
            let t = softplus(x).tanh();
            let grad = t + x * (1.0 - t * t) * sigmoid(x);
            assert!((mish_grad(x) - grad).abs() <= 1e-12, "{x}");
        }
    }

    #[test]
    fn layer_norm_of_constant_row_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Mlp::<f64>::new("ln", MlpSpec::new(3, &[3], 1), &mut rng);
        let z = Matrix::from_rows(&[vec![1.0, 1.0, 1.0]]).unwrap();
        let (xhat, inv_std, normed) =
            net.layer_norm(&z, &Matrix::filled(1, 3, 1.0), &Matrix::zeros(1, 3));
        assert_eq!(xhat.as_slice(), &[0.0, 0.0, 0.0]);
        assert_eq!(normed.as_slice(), &[0.0, 0.0, 0.0]);
        assert!((inv_std[0] - 1.0 / LAYER_NORM_EPS.sqrt()).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_rows_are_standardised() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = Mlp::<f64>::new("ln", MlpSpec::new(5, &[7], 1), &mut rng);
        let z = Matrix::<f64>::uniform(20, 7, 3.0, &mut rng);
        let (xhat, _, _) = net.layer_norm(&z, &Matrix::filled(1, 7, 1.0), &Matrix::zeros(1, 7));
        for row in xhat.iter_rows() {
            let mean: f64 = row.iter().sum::<f64>() / 7.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 7.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn linear_layer_gradients_are_outer_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut net = Mlp::<f64>::new("lin", MlpSpec::new(3, &[], 2), &mut rng);
        let x = Matrix::from_rows(&[vec![1.0, -2.0, 0.5]]).unwrap();
        let g = Matrix::from_rows(&[vec![0.3, -1.0]]).unwrap();
        let (_, tape) = net.forward_tape(&x).unwrap();
        let dx = net.backward(&tape, &g).unwrap();
        let w = net.blocks_ref()[0].value.clone();
        assert_eq!(net.blocks_ref()[0].grad, x.transpose().matmul(&g).unwrap());
        assert_eq!(dx, g.matmul_t(&w).unwrap());
        assert_eq!(net.blocks_ref()[1].grad, g);
    }

    #[test]
    fn two_layer_gradients_match_finite_differences() {
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let mut net = Mlp::<f64>::new("mlp", MlpSpec::new(4, &[6, 5], 3), &mut rng);
            // perturb layer-norm affine away from the identity
            for b in net.blocks_slice_mut() {
                if b.name.contains("ln_") {
                    b.value = b.value.map(|v| v + 0.3);
                }
            }
            let x = Matrix::<f64>::uniform(3, 4, 1.5, &mut rng);
            let target = Matrix::<f64>::uniform(3, 3, 1.0, &mut rng);
            let loss = |n: &Mlp<f64>| {
                let y = n.forward(&x).unwrap();
                0.5 * y
                    .as_slice()
                    .iter()
                    .zip(target.as_slice())
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
            };
            let (y, tape) = net.forward_tape(&x).unwrap();
            let mut dy = y.clone();
            dy.axpy(-1.0, &target);
            net.zero_grad();
            net.backward(&tape, &dy).unwrap();
            let analytic: Vec<Matrix<f64>> = net.blocks_ref().iter().map(|b| b.grad.clone()).collect();
            let numeric = finite_diff_grad(&mut net, 1e-5, loss);
            for (a, n) in analytic.iter().zip(&numeric) {
                for (&av, &nv) in a.as_slice().iter().zip(n.as_slice()) {
                    assert!(rel_err(av, nv) < 1e-4, "seed {seed}: {av} vs {nv}");
                }
            }
        }
    }

    #[test]
    fn backward_accumulates_and_zero_upstream_is_inert() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut net = Mlp::<f64>::new("acc", MlpSpec::new(3, &[4], 2), &mut rng);
        let x = Matrix::<f64>::uniform(2, 3, 1.0, &mut rng);
        let (_, tape) = net.forward_tape(&x).unwrap();
        net.backward(&tape, &Matrix::zeros(2, 2)).unwrap();
        assert!(net.blocks_ref().iter().all(|b| b.grad.max_abs() == 0.0));

        let g = Matrix::<f64>::uniform(2, 2, 1.0, &mut rng);
        net.backward(&tape, &g).unwrap();
        let once: Vec<_> = net.blocks_ref().iter().map(|b| b.grad.clone()).collect();
        net.backward(&tape, &g).unwrap();
        for (b, o) in net.blocks_ref().iter().zip(&once) {
            for (&twice, &single) in b.grad.as_slice().iter().zip(o.as_slice()) {
                assert_eq!(twice, 2.0 * single);
            }
        }
    }

    #[test]
    fn stale_tape_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut net = Mlp::<f32>::new("stale", MlpSpec::new(2, &[3], 1), &mut rng);
        let x = Matrix::<f32>::zeros(1, 2);
        let (_, tape) = net.forward_tape(&x).unwrap();
        net.blocks_slice_mut()[0].value[(0, 0)] += 1.0;
        let err = net.backward(&tape, &Matrix::zeros(1, 1)).unwrap_err();
        assert!(matches!(err, Error::StaleTape { .. }));
    }

    #[test]
    fn input_width_mismatch_names_the_network() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let net = Mlp::<f32>::new("critic", MlpSpec::new(4, &[3], 1), &mut rng);
        let err = net.forward(&Matrix::zeros(1, 5)).unwrap_err();
        assert!(err.to_string().contains("critic layer 0"));
    }

    #[test]
    fn backward_input_leaves_parameter_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut net = Mlp::<f64>::new("q", MlpSpec::new(3, &[4], 1), &mut rng);
        let x = Matrix::<f64>::uniform(2, 3, 1.0, &mut rng);
        let (_, tape) = net.forward_tape(&x).unwrap();
        let g = Matrix::filled(2, 1, 1.0);
        let dx_only = net.backward_input(&tape, &g).unwrap();
        assert!(net.blocks_ref().iter().all(|b| b.grad.max_abs() == 0.0));
        let dx = net.backward(&tape, &g).unwrap();
        assert_eq!(dx, dx_only);
    }
}
