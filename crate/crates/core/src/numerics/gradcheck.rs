//! Central-difference verification of [`Graph::backward`].

use rand::Rng;

use crate::error::Result;
use crate::numerics::{Graph, ParameterStore, Var};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub max_absolute_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
}

/// Gradients smaller than this are compared on an absolute scale.
const RELATIVE_FLOOR: f64 = 1e-6;

/// Compares analytic gradients of `loss_fn` against central differences with
/// step `h`, coordinate by coordinate over every parameter in `store`.
///
/// The relative error at a coordinate is `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn grad_check<F>(store: &ParameterStore<f64>, h: f64, loss_fn: F) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&mut Graph<'g, f64>) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::new(store);
        let loss = loss_fn(&mut g)?;
        g.backward(loss)?
    };
    let eval = |s: &ParameterStore<f64>| -> Result<f64> {
        let mut g = Graph::new(s);
        let loss = loss_fn(&mut g)?;
        g.scalar_value(loss)
    };

    let mut probe = store.clone();
    let mut report = GradCheckReport { max_relative_error: 0.0, max_absolute_error: 0.0, worst: None, coordinates: 0 };
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for name in names {
        let n = store.value(&name)?.numel();
        for i in 0..n {
            let orig = probe.value(&name)?.data()[i];
            probe.value_mut(&name)?.data_mut()[i] = orig + h;
            let plus = eval(&probe)?;
            probe.value_mut(&name)?.data_mut()[i] = orig - h;
            let minus = eval(&probe)?;
            probe.value_mut(&name)?.data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[&name].data()[i];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
            report.coordinates += 1;
            report.max_absolute_error = report.max_absolute_error.max(abs);
            if rel > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = rel.max(report.max_relative_error);
                report.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(report)
}

/// Adds uniform noise in `[-scale, scale]` to every parameter so that checks do
/// not land on kinks of `relu`/`max`.
pub fn jitter<R: Rng>(store: &mut ParameterStore<f64>, scale: f64, rng: &mut R) {
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for name in names {
        if let Ok(t) = store.value_mut(&name) {
            for v in t.data_mut() {
                *v += rng.random_range(-scale..=scale);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn quadratic_is_exact() {
        let mut s = ParameterStore::new();
        s.insert("w", Tensor::new(vec![3], vec![0.3, -1.2, 2.5]).unwrap()).unwrap();
        let report = grad_check(&s, 1e-4, |g| {
            let w = g.param("w")?;
            let sq = g.mul(w, w)?;
            Ok(g.sum_all(sq))
        })
        .unwrap();
        assert!(report.max_relative_error <= 1e-8, "{report:?}");
        assert_eq!(report.coordinates, 3);
    }

    #[test]
    fn jittered_relu_check_is_finite() {
        use rand::SeedableRng;
        let mut s = ParameterStore::new();
        s.insert("w", Tensor::new(vec![4], vec![0.0, 0.0, 1.0, -1.0]).unwrap()).unwrap();
        jitter(&mut s, 0.05, &mut rand_chacha::ChaCha8Rng::seed_from_u64(3));
        let report = grad_check(&s, 1e-6, |g| {
            let w = g.param("w")?;
            let r = g.relu(w);
            Ok(g.sum_all(r))
        })
        .unwrap();
        assert!(report.max_relative_error.is_finite());
        assert!(report.max_relative_error <= 1e-6, "{report:?}");
    }
}
