use rand::Rng as _;

use super::model::{Mode, Model};
use super::scalar::Scalar;
use super::train::bce_loss;
use super::Tensor;
use crate::error::Result;
use crate::rng::stream;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Draws rejected because the stencil crossed a pooling or ReLU switch.
    pub skipped: usize,
    /// Parameter name and element index of the worst disagreement.
    pub worst: (String, usize),
}

/// Default check: 200 sampled parameters, seed 0.
pub fn grad_check<T: Scalar>(
    model: &Model<T>,
    input: &Tensor<f64>,
    targets: &[f64],
    epsilon: f64,
) -> Result<GradCheck> {
    grad_check_with(model, input, targets, epsilon, 200, 0)
}

/// Analytic gradients at precision `T` against central differences of the
/// same network evaluated in `f64`, with batch norm on running statistics
/// and dropout off.
///
/// One element per tensor is drawn first, then elements uniformly over all
/// parameters. A draw only counts when the activation pattern at `θ ± ε`
/// equals the one at `θ`: across a max-pool or ReLU switch the loss is not
/// differentiable and the central difference is no derivative estimate.
/// Such draws are replaced and reported in `skipped`.
pub fn grad_check_with<T: Scalar>(
    model: &Model<T>,
    input: &Tensor<f64>,
    targets: &[f64],
    epsilon: f64,
    samples: usize,
    seed: u64,
) -> Result<GradCheck> {
    let mut analytic = model.clone();
    let x_t: Tensor<T> = input.cast();
    let t_t: Vec<T> = targets.iter().map(|&v| T::of(v)).collect();
    analytic.forward(&x_t, Mode::Frozen)?;
    analytic.backward(&t_t, 1.0)?;
    let params = analytic.named_params();
    let sizes: Vec<usize> = params.iter().map(|(_, t)| t.numel()).collect();
    let total: usize = sizes.iter().sum();

    let mut numeric = model.cast::<f64>();
    numeric.forward(input, Mode::Frozen)?;
    let base = numeric.activation_pattern().expect("frozen pass caches");
    let mut probe = |pi: usize, ei: usize, delta: f64| -> Result<(f64, bool)> {
        let orig = numeric.params_mut()[pi].data[ei];
        numeric.params_mut()[pi].data[ei] = orig + delta;
        let p = numeric.forward(input, Mode::Frozen)?;
        let same = numeric.activation_pattern().as_ref() == Some(&base);
        numeric.params_mut()[pi].data[ei] = orig;
        Ok((bce_loss(&p, targets, 1.0), same))
    };

    let mut out = GradCheck {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
        worst: (String::new(), 0),
    };
    let mut rng = stream(seed, 0);
    let wanted = samples.max(sizes.len());
    let max_draws = 50 * wanted;
    let mut draws = 0;
    while out.checked < wanted && draws < max_draws {
        let (pi, ei) = if draws < sizes.len() {
            (draws, rng.random_range(0..sizes[draws]))
        } else {
            let mut flat = rng.random_range(0..total);
            let mut pi = 0;
            while flat >= sizes[pi] {
                flat -= sizes[pi];
                pi += 1;
            }
            (pi, flat)
        };
        draws += 1;
        let (lp, same_p) = probe(pi, ei, epsilon)?;
        let (lm, same_m) = probe(pi, ei, -epsilon)?;
        if !(same_p && same_m) {
            out.skipped += 1;
            continue;
        }
        let ga = params[pi].1.grad()[ei].f64();
        let gn = (lp - lm) / (2.0 * epsilon);
        let rel = (ga - gn).abs() / (ga.abs() + gn.abs()).max(1e-6);
        if rel > out.max_rel_error {
            out.max_rel_error = rel;
            out.worst = (params[pi].0.clone(), ei);
        }
        out.checked += 1;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tinynn::ModelConfig;
    use rand::SeedableRng;

    fn setup(seed: u64) -> (Model<f64>, Tensor<f64>, Vec<f64>) {
        let mut m = Model::<f64>::new(ModelConfig::reduced(), seed).unwrap();
        let mut rng = crate::rng::Rng::seed_from_u64(seed + 100);
        let n = 2 * 2 * 11 * 11 * 11;
        let x = Tensor::new(
            vec![2, 2, 11, 11, 11],
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        // realistic running statistics
        m.forward(&x, Mode::Train { dropout_seed: 5 }).unwrap();
        m.clear_cache();
        (m, x, vec![1.0, 0.0])
    }

    #[test]
    fn reduced_model_f64() {
        let (m, x, t) = setup(1);
        let r = grad_check(&m, &x, &t, 1e-3).unwrap();
        assert!(r.checked >= 200);
        assert!(r.skipped < r.checked, "{r:?}");
        assert!(r.max_rel_error <= 1e-4, "{r:?}");
    }

    #[test]
    fn reduced_model_f32_analytic() {
        let (m, x, t) = setup(2);
        let r = grad_check(&m.cast::<f32>(), &x, &t, 1e-3).unwrap();
        assert!(r.max_rel_error <= 1e-2, "{r:?}");
    }

    #[test]
    fn zero_input_zero_first_layer_bias_gradient() {
        let (mut m, x, t) = setup(3);
        m.param_mut("block1.conv.weight").unwrap().data.fill(0.0);
        let zeros = Tensor::new(x.shape.clone(), vec![0.0; x.numel()]).unwrap();
        let mut a = m.clone();
        a.forward(&zeros, Mode::Frozen).unwrap();
        a.backward(&t, 1.0).unwrap();
        let ga = a.param_mut("block1.conv.bias").unwrap().grad().to_vec();
        let eps = 1e-4;
        let mut num = m.clone();
        let mut loss = |d: f64| {
            let b = num.param_mut("block1.conv.bias").unwrap();
            b.data[0] += d;
            let p = num.forward(&zeros, Mode::Eval).unwrap();
            num.param_mut("block1.conv.bias").unwrap().data[0] -= d;
            bce_loss(&p, &t, 1.0)
        };
        let gn = (loss(eps) - loss(-eps)) / (2.0 * eps);
        assert!(
            (ga[0] - gn).abs() <= 1e-6 * (1.0 + gn.abs()),
            "{} vs {gn}",
            ga[0]
        );
    }

    #[test]
    fn error_shrinks_with_epsilon() {
        let (m, x, t) = setup(4);
        let coarse = grad_check_with(&m, &x, &t, 1e-3, 200, 9).unwrap();
        let fine = grad_check_with(&m, &x, &t, 5e-4, 200, 9).unwrap();
        assert!(
            fine.max_rel_error <= 4.0 * coarse.max_rel_error.max(1e-9),
            "{coarse:?} {fine:?}"
        );
    }
}
