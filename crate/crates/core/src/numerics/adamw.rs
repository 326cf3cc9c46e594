use crate::error::{Error, Result};
use crate::numerics::ParamBlock;
use crate::scalar::Scalar;

/// Decoupled-weight-decay Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            lr: 3e-4,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamW {
    pub fn with_lr(lr: f64) -> Self {
        AdamW {
            lr,
            ..Self::default()
        }
    }

    /// Applies one update to every block, then zeroes the gradients.
    ///
    /// Every gradient is checked before any parameter moves, so a
    /// non-finite gradient leaves all blocks untouched.
    pub fn step<'a, T: Scalar>(&self, blocks: impl IntoIterator<Item = &'a mut ParamBlock<T>>) -> Result<()> {
        let mut blocks: Vec<&mut ParamBlock<T>> = blocks.into_iter().collect();
        if let Some(bad) = blocks.iter().find(|b| !b.grad.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of `{}`", bad.name)));
        }
        for b in blocks.iter_mut() {
            adamw_step(b, self.lr, self.betas, self.eps, self.weight_decay);
        }
        Ok(())
    }
}

/// One AdamW update of a single block (PyTorch ordering: decay, then the
/// bias-corrected Adam step), followed by zeroing its gradient.
pub fn adamw_step<T: Scalar>(block: &mut ParamBlock<T>, lr: f64, betas: (f64, f64), eps: f64, weight_decay: f64) {
    block.step_count += 1;
    let t = block.step_count as i32;
    let (b1, b2) = (T::lit(betas.0), T::lit(betas.1));
    let one = T::one();
    let bc1 = one - b1.powi(t);
    let bc2 = one - b2.powi(t);
    let lr_t = T::lit(lr);
    let eps_t = T::lit(eps);
    let decay = one - lr_t * T::lit(weight_decay);
    let ParamBlock {
        value,
        grad,
        adam_m,
        adam_v,
        ..
    } = block;
    let p = value.as_mut_slice();
    let g = grad.as_mut_slice();
    let m = adam_m.as_mut_slice();
    let v = adam_v.as_mut_slice();
    for i in 0..p.len() {
        let gi = g[i];
        m[i] = b1 * m[i] + (one - b1) * gi;
        v[i] = b2 * v[i] + (one - b2) * gi * gi;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        p[i] = p[i] * decay - lr_t * m_hat / (v_hat.sqrt() + eps_t);
        g[i] = T::zero();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Matrix;

    fn scalar_block(v: f64, g: f64) -> ParamBlock<f64> {
        let mut b = ParamBlock::new("p", Matrix::filled(1, 1, v));
        b.grad = Matrix::filled(1, 1, g);
        b
    }

    #[test]
    fn zero_grad_no_decay_is_a_no_op() {
        let mut b = scalar_block(0.7, 0.0);
        AdamW::with_lr(0.1).step([&mut b]).unwrap();
        assert_eq!(b.value[(0, 0)], 0.7);
        assert_eq!(b.step_count, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut b = scalar_block(0.0, 1.0);
        AdamW::with_lr(0.1).step([&mut b]).unwrap();
        // m_hat = 1, v_hat = 1 → Δ = -0.1 / (1 + 1e-8)
        assert!((b.value[(0, 0)] + 0.1).abs() < 1e-8);
        assert_eq!(b.grad[(0, 0)], 0.0);
    }

    #[test]
    fn decoupled_decay_shrinks_by_lr_times_decay() {
        let mut b = scalar_block(1.0, 0.0);
        let opt = AdamW {
            lr: 0.1,
            weight_decay: 0.01,
            ..AdamW::default()
        };
        opt.step([&mut b]).unwrap();
        assert!((b.value[(0, 0)] - (1.0 - 0.1 * 0.01)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_names_block() {
        let mut ok = scalar_block(1.0, 0.5);
        let mut bad = scalar_block(1.0, f64::NAN);
        bad.name = "critic.0.weight".into();
        let err = AdamW::default().step([&mut ok, &mut bad]).unwrap_err();
        assert!(err.to_string().contains("critic.0.weight"));
        assert_eq!(ok.value[(0, 0)], 1.0);
        assert_eq!(ok.step_count, 0);
    }
}
