//! Central finite differences, the independent oracle for analytic
//! gradients.

use indexmap::IndexMap;

use super::engine::{forward, EvalError, EvalOptions, Loss};
use super::Tensor;
use crate::graph::{Graph, WeightStore};

/// A normalization whose denominator is within this many steps `h` of zero
/// makes central differences unreliable.
const ILL_CONDITIONED_STEPS: f64 = 1e3;

#[derive(Debug, Clone, PartialEq)]
pub struct FdResult {
    pub params: IndexMap<String, Tensor>,
    /// Set when some normalization runs close to its `eps = 0` singularity
    /// at the evaluation point.
    pub ill_conditioned: bool,
}

/// `(L(w + h e_i) - L(w - h e_i)) / 2h` for every entry of every parameter
/// referenced by `g`.
pub fn finite_difference_grad(
    g: &Graph,
    w: &WeightStore,
    inputs: &[Tensor],
    loss: &Loss,
    h: f64,
    opts: EvalOptions,
) -> Result<FdResult, EvalError> {
    let (_, tape) = forward(g, w, inputs, opts)?;
    let ill_conditioned = tape
        .entries()
        .iter()
        .filter_map(|e| e.min_norm_scale())
        .any(|s| s < ILL_CONDITIONED_STEPS * h);

    let mut work = w.clone();
    let mut params = IndexMap::new();
    let eval = |ws: &WeightStore| -> Result<f64, EvalError> {
        let (out, _) = forward(g, ws, inputs, opts)?;
        Ok(loss.value(&out))
    };
    for node in g.nodes() {
        for name in &node.params {
            let Some(base) = w.get(name) else {
                continue;
            };
            let mut grad = Tensor::zeros(base.shape());
            for i in 0..base.len() {
                let orig = base.data()[i];
                work.get_mut(name).expect("cloned store").data_mut()[i] = orig + h;
                let up = eval(&work)?;
                work.get_mut(name).expect("cloned store").data_mut()[i] = orig - h;
                let down = eval(&work)?;
                work.get_mut(name).expect("cloned store").data_mut()[i] = orig;
                grad.data_mut()[i] = (up - down) / (2.0 * h);
            }
            params.insert(name.clone(), grad);
        }
    }
    Ok(FdResult {
        params,
        ill_conditioned,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::NodeKind;

    #[test]
    fn quadratic_matches_two_w() {
        let mut b = Graph::builder();
        let x = b.input("x", &[1]);
        let l = b.node("fc", NodeKind::linear(), &["w"], &[&x]);
        b.output("y", &l);
        let g = b.build().unwrap();
        let w0 = 0.75;
        let mut w = WeightStore::new();
        w.insert("w", Tensor::new(vec![1, 1], vec![w0]).unwrap());
        let ones = Tensor::from_vec(vec![1.0]);
        let fd = finite_difference_grad(&g, &w, &[ones], &Loss::SumOfSquares, 1e-6, EvalOptions::default())
            .unwrap();
        assert!((fd.params["w"].data()[0] - 2.0 * w0).abs() < 1e-6);
        assert!(!fd.ill_conditioned);
    }

    #[test]
    fn constant_loss_gives_zero_gradient() {
        let mut b = Graph::builder();
        let x = b.input("x", &[2]);
        let l = b.node("fc", NodeKind::linear(), &["w", "b"], &[&x]);
        b.output("y", &l);
        let g = b.build().unwrap();
        let mut w = WeightStore::new();
        w.insert("w", Tensor::zeros(&[3, 2]));
        w.insert("b", Tensor::zeros(&[3]));
        let x = Tensor::from_vec(vec![0.4, -1.1]);
        let loss = Loss::Weighted(vec![Tensor::zeros(&[3])]);
        let fd = finite_difference_grad(&g, &w, &[x], &loss, 1e-6, EvalOptions::default()).unwrap();
        assert_eq!(fd.params.len(), 2);
        assert!(fd.params.values().all(|t| t.max_abs() == 0.0));
    }

    #[test]
    fn near_singular_layer_norm_is_flagged() {
        let mut b = Graph::builder();
        let x = b.input("x", &[2]);
        let l = b.node("fc", NodeKind::linear(), &["w"], &[&x]);
        let n = b.node("ln", NodeKind::LayerNorm { eps: 0.0 }, &[], &[&l]);
        b.output("y", &n);
        let g = b.build().unwrap();
        let mut w = WeightStore::new();
        w.insert("w", Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let x = Tensor::from_vec(vec![1.0, 1.0 + 1e-9]);
        let fd = finite_difference_grad(&g, &w, &[x], &Loss::SumOfSquares, 1e-6, EvalOptions::default()).unwrap();
        assert!(fd.ill_conditioned);
    }
}
