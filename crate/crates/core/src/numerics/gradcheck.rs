//! Central finite-difference check of analytic parameter gradients.

use super::{Graph, ParamId, ParamStore, Var};
use crate::error::Result;

/// Denominator floor for the relative error, so entries whose true gradient
/// is numerically zero are judged on absolute error.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub entries_checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares backward-pass gradients of the scalar built by `loss_fn` with
/// `(f(w + eps) - f(w - eps)) / 2 eps` for every entry of every parameter in
/// `which` (all parameters when `None`). Parameter values are restored.
pub fn grad_check<F>(
    store: &mut ParamStore,
    eps: f64,
    which: Option<&[ParamId]>,
    mut loss_fn: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore, &mut Graph) -> Result<Var>,
{
    store.zero_grad();
    let mut graph = Graph::new();
    let loss = loss_fn(store, &mut graph)?;
    graph.backward(loss, store)?;

    let ids: Vec<ParamId> = match which {
        Some(ids) => ids.to_vec(),
        None => store.iter().map(|(id, _)| id).collect(),
    };

    let mut eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let l = loss_fn(store, &mut g)?;
        Ok(g.value(l).data()[0])
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        entries_checked: 0,
    };
    for id in ids {
        let n = store.get(id).value.numel();
        for i in 0..n {
            let orig = store.get(id).value.data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + eps;
            let plus = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = orig - eps;
            let minus = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let analytic = store.get(id).grad.data()[i];
            let err = relative_error(analytic, numeric);
            report.entries_checked += 1;
            if err > report.max_rel_err || report.worst_param.is_empty() {
                report.max_rel_err = err;
                report.worst_param = store.get(id).name.clone();
                report.worst_index = i;
                report.analytic = analytic;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{AttentionLayout, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const PRIMITIVE_TOL: f64 = 1e-6;

    fn random_store(shapes: &[(&str, &[usize])], seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        for (name, shape) in shapes {
            s.normal(*name, shape, 0.8, &mut rng).unwrap();
        }
        s
    }

    // Every check reduces through a fixed random projection so gradients are
    // generic rather than all-ones.
    fn project(g: &mut Graph, x: Var, seed: u64) -> Var {
        let t = g.value(x).clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let id = s.normal("p", t.shape(), 1.0, &mut rng).unwrap();
        let p = g.constant(s.value(id).clone());
        let prod = g.mul(x, p).unwrap();
        g.sum_all(prod)
    }

    #[test]
    fn matmul_gradients() {
        let mut s = random_store(&[("a", &[3, 4]), ("b", &[4, 2])], 1);
        let r = grad_check(&mut s, 1e-5, None, |s, g| {
            let a = g.param(s, s.id("a").unwrap());
            let b = g.param(s, s.id("b").unwrap());
            let c = g.matmul(a, b)?;
            Ok(project(g, c, 11))
        })
        .unwrap();
        assert!(r.max_rel_err <= PRIMITIVE_TOL, "{r:?}");
    }

    #[test]
    fn layer_norm_gradients() {
        let mut s = random_store(&[("x", &[3, 5]), ("g", &[5]), ("b", &[5])], 2);
        let r = grad_check(&mut s, 1e-5, None, |s, g| {
            let x = g.param(s, s.id("x").unwrap());
            let gain = g.param(s, s.id("g").unwrap());
            let bias = g.param(s, s.id("b").unwrap());
            let y = g.layer_norm(x, gain, bias, 1e-12)?;
            Ok(project(g, y, 12))
        })
        .unwrap();
        assert!(r.max_rel_err <= PRIMITIVE_TOL, "{r:?}");
    }

    #[test]
    fn gelu_softmax_and_bias_gradients() {
        let mut s = random_store(&[("x", &[2, 4]), ("b", &[4])], 3);
        let r = grad_check(&mut s, 1e-5, None, |s, g| {
            let x = g.param(s, s.id("x").unwrap());
            let b = g.param(s, s.id("b").unwrap());
            let y = g.add_row_bias(x, b)?;
            let y = g.gelu(y);
            let y = g.softmax_rows(y);
            Ok(project(g, y, 13))
        })
        .unwrap();
        assert!(r.max_rel_err <= PRIMITIVE_TOL, "{r:?}");
    }

    #[test]
    fn cross_entropy_gradients() {
        let mut s = random_store(&[("z", &[4, 3])], 4);
        let r = grad_check(&mut s, 1e-5, None, |s, g| {
            let z = g.param(s, s.id("z").unwrap());
            g.cross_entropy(z, &[0, 2, 1, 2])
        })
        .unwrap();
        assert!(r.max_rel_err <= PRIMITIVE_TOL, "{r:?}");
    }

    #[test]
    fn gather_concat_pool_gradients() {
        let mut s = random_store(&[("table", &[5, 3]), ("other", &[2, 2])], 5);
        let r = grad_check(&mut s, 1e-5, None, |s, g| {
            let t = g.param(s, s.id("table").unwrap());
            let rows = g.gather_rows(t, &[4, 0, 4, 2])?;
            let pooled = g.mean_row_groups(rows, vec![vec![0, 1], vec![2, 3, 1]])?;
            let o = g.param(s, s.id("other").unwrap());
            let cat = g.concat_cols(&[pooled, o])?;
            let sq = g.sum_squares(cat);
            let lin = project(g, cat, 14);
            let sq = g.scale(sq, 0.3);
            g.add(sq, lin)
        })
        .unwrap();
        assert!(r.max_rel_err <= PRIMITIVE_TOL, "{r:?}");
    }

    #[test]
    fn attention_with_row_replacement_gradients() {
        let mut s = random_store(&[("q", &[8, 4]), ("k", &[8, 4]), ("v", &[8, 4]), ("f", &[6, 4])], 6);
        let r = grad_check(&mut s, 1e-5, None, |s, g| {
            let q = g.param(s, s.id("q").unwrap());
            let k = g.param(s, s.id("k").unwrap());
            let v = g.param(s, s.id("v").unwrap());
            let f = g.param(s, s.id("f").unwrap());
            let q = g.replace_rows(q, f, &[(1, 0), (5, 3)])?;
            let layout = AttentionLayout {
                batch: 2,
                seq: 4,
                heads: 2,
                key_mask: vec![true, true, true, false, true, true, false, false],
            };
            let out = g.attention(q, k, v, layout)?;
            Ok(project(g, out, 15))
        })
        .unwrap();
        assert!(r.max_rel_err <= PRIMITIVE_TOL, "{r:?}");
    }

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
        assert!((relative_error(1e-9, 0.0) - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn restores_parameter_values() {
        let mut s = ParamStore::new();
        s.add("x", Tensor::vector(vec![1.0, 2.0])).unwrap();
        let before = s.value(s.id("x").unwrap()).clone();
        grad_check(&mut s, 1e-5, None, |s, g| {
            let x = g.param(s, s.id("x").unwrap());
            Ok(g.sum_squares(x))
        })
        .unwrap();
        assert_eq!(s.value(s.id("x").unwrap()), &before);
    }
}
