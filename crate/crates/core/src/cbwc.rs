//! Column-centered constraint checks and the weight-centering transforms
//! for each family of general linear layer.
//!
//! Every transform is the orthogonal projection that subtracts a mean
//! along the axis the downstream normalization averages over, so each one
//! is linear, idempotent and symmetric (its own backward).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Node, NodeKind, WeightStore};
use crate::tensor::ops::center_along;
use crate::tensor::{compensated_sum, proxy_axis, DType, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CenteringFamily {
    /// Linear `W [m, n]`: every column sums to zero.
    LinearColumns,
    /// Conv kernel `[d_out, d_in, F_h, F_w]`: for every input channel and
    /// kernel position, the entries across output channels sum to zero.
    ConvOutChannels,
    /// Recurrent cell: columns of both the input and the hidden matrix.
    RecurrentBoth,
    /// Attention value projection `V [d, d_v]`: every row sums to zero.
    AttentionValueRows,
    /// Contiguous chunks of `len / groups` along the centered axis sum to
    /// zero, for a downstream GroupNorm.
    GroupedColumns(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CenteringSpec {
    /// Primary weight parameter of the layer.
    pub target: String,
    pub family: CenteringFamily,
    pub includes_bias: bool,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CbwcError {
    #[error("{family:?} cannot center a tensor of shape {shape:?}")]
    Shape {
        family: CenteringFamily,
        shape: Vec<usize>,
    },
    #[error("node {node}: {kind} is not a general linear layer")]
    NotLinear { node: String, kind: &'static str },
    #[error("parameter {0} not found")]
    MissingParam(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Default `check_ccc` tolerance for a centered axis of length `len`.
pub fn default_ccc_tol(dtype: DType, len: usize) -> f64 {
    let base = match dtype {
        DType::F64 => 1e-9,
        DType::F32 => 1e-5,
    };
    base * len.max(1) as f64
}

/// Axis and group count the family centers along, after checking the rank.
fn family_axis(w: &Tensor, family: CenteringFamily) -> Result<(usize, usize), CbwcError> {
    let bad = || CbwcError::Shape {
        family,
        shape: w.shape().to_vec(),
    };
    match family {
        CenteringFamily::LinearColumns | CenteringFamily::RecurrentBoth if w.rank() == 2 => Ok((0, 1)),
        CenteringFamily::ConvOutChannels if w.rank() == 4 => Ok((0, 1)),
        CenteringFamily::AttentionValueRows if w.rank() == 2 => Ok((1, 1)),
        CenteringFamily::GroupedColumns(g) if w.rank() == 2 || w.rank() == 4 => {
            if g == 0 || !w.shape()[0].is_multiple_of(g) {
                return Err(TensorError::GroupDivisibility {
                    op: "ccwt_grouped",
                    len: w.shape()[0],
                    groups: g,
                }
                .into());
            }
            Ok((0, g))
        }
        _ => Err(bad()),
    }
}

/// Whether every constrained slice of `w` sums to at most `tol` in absolute
/// value.
pub fn check_ccc(w: &Tensor, family: CenteringFamily, tol: f64) -> Result<bool, CbwcError> {
    let (axis, groups) = family_axis(w, family)?;
    Ok(slice_sums_within(w, axis, groups, tol))
}

fn slice_sums_within(w: &Tensor, axis: usize, groups: usize, tol: f64) -> bool {
    let len = w.shape()[axis];
    let outer: usize = w.shape()[..axis].iter().product();
    let inner: usize = w.shape()[axis + 1..].iter().product();
    let c = len / groups;
    let d = w.data();
    (0..outer).all(|o| {
        (0..inner).all(|k| {
            (0..groups).all(|grp| {
                let s = compensated_sum((0..c).map(|i| d[(o * len + grp * c + i) * inner + k]));
                s.abs() <= tol
            })
        })
    })
}

fn project(w: &Tensor, family: CenteringFamily) -> Result<Tensor, CbwcError> {
    let (axis, groups) = family_axis(w, family)?;
    Ok(center_along(w, axis, groups)?)
}

/// `V = (I - 11ᵀ/m) W` for `W [m, n]`.
pub fn ccwt_linear(w: &Tensor) -> Result<Tensor, CbwcError> {
    project(w, CenteringFamily::LinearColumns)
}

/// Gradient of the loss with respect to the proxy `W` given the gradient
/// with respect to `V = ccwt_linear(W)`. The projection is symmetric, so
/// this is the same map.
pub fn cbwc_backward(dv: &Tensor) -> Result<Tensor, CbwcError> {
    project(dv, CenteringFamily::LinearColumns)
}

pub fn ccwt_conv(k: &Tensor) -> Result<Tensor, CbwcError> {
    project(k, CenteringFamily::ConvOutChannels)
}

pub fn ccwt_recurrent(wv: &Tensor, wh: &Tensor) -> Result<(Tensor, Tensor), CbwcError> {
    Ok((
        project(wv, CenteringFamily::RecurrentBoth)?,
        project(wh, CenteringFamily::RecurrentBoth)?,
    ))
}

pub fn ccwt_attention_value(v: &Tensor) -> Result<Tensor, CbwcError> {
    project(v, CenteringFamily::AttentionValueRows)
}

/// Per-group column centering. With one row per group the projection is
/// the zero map and the layer is lost; a warning is logged.
pub fn ccwt_grouped(w: &Tensor, groups: usize) -> Result<Tensor, CbwcError> {
    let out = project(w, CenteringFamily::GroupedColumns(groups))?;
    if grouped_overconstrained(w.shape()[0], groups) {
        log::warn!(
            "grouped centering with {groups} groups over {} rows zeroes the layer",
            w.shape()[0]
        );
    }
    Ok(out)
}

/// One element per group: the constraint forces the weights to zero.
pub fn grouped_overconstrained(len: usize, groups: usize) -> bool {
    groups > 0 && len / groups == 1
}

/// `b - mean(b)`.
pub fn fold_bias(b: &Tensor) -> Tensor {
    fold_bias_grouped(b, 1).expect("one group always divides")
}

pub fn fold_bias_grouped(b: &Tensor, groups: usize) -> Result<Tensor, CbwcError> {
    let flat = b.reshaped(vec![b.len()])?;
    Ok(center_along(&flat, 0, groups)?.reshaped(b.shape().to_vec())?)
}

/// Family used to center `node` for a downstream normalization with
/// `groups` groups.
pub fn family_for(kind: &NodeKind, groups: usize) -> Option<CenteringFamily> {
    let base = match kind {
        NodeKind::Linear { .. } => CenteringFamily::LinearColumns,
        NodeKind::Conv2d { .. } => CenteringFamily::ConvOutChannels,
        NodeKind::RecurrentCell { .. } => CenteringFamily::RecurrentBoth,
        NodeKind::AttentionValueProjection { .. } => CenteringFamily::AttentionValueRows,
        _ => return None,
    };
    Some(if groups > 1 {
        CenteringFamily::GroupedColumns(groups)
    } else {
        base
    })
}

pub fn centering_spec(node: &Node, groups: usize) -> Option<CenteringSpec> {
    Some(CenteringSpec {
        target: node.params.first()?.clone(),
        family: family_for(&node.kind, groups)?,
        includes_bias: node.bias_param().is_some(),
    })
}

fn require_linear(node: &Node) -> Result<(), CbwcError> {
    if family_for(&node.kind, 1).is_none() {
        return Err(CbwcError::NotLinear {
            node: node.id.to_string(),
            kind: node.kind.name(),
        });
    }
    Ok(())
}

/// Centered replacement for every weight and bias of `node`, each keeping
/// its stored dtype.
pub fn center_node(node: &Node, w: &WeightStore, groups: usize) -> Result<Vec<(String, Tensor)>, CbwcError> {
    require_linear(node)?;
    node.params
        .iter()
        .map(|name| {
            let t = w.get(name).ok_or_else(|| CbwcError::MissingParam(name.clone()))?;
            let centered = center_along(t, proxy_axis(&node.kind, t), groups)?;
            Ok((name.clone(), centered.with_dtype(t.dtype())))
        })
        .collect()
}

/// Whether every weight and bias of `node` satisfies its constraint.
pub fn check_node_ccc(node: &Node, w: &WeightStore, groups: usize) -> Result<bool, CbwcError> {
    require_linear(node)?;
    for name in &node.params {
        let t = w.get(name).ok_or_else(|| CbwcError::MissingParam(name.clone()))?;
        let axis = proxy_axis(&node.kind, t);
        if groups == 0 || t.shape()[axis] % groups != 0 {
            return Err(TensorError::GroupDivisibility {
                op: "check_ccc",
                len: t.shape()[axis],
                groups,
            }
            .into());
        }
        let tol = default_ccc_tol(t.dtype(), t.shape()[axis] / groups);
        if !slice_sums_within(t, axis, groups, tol) {
            return Ok(false);
        }
    }
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows)
    }

    #[test]
    fn check_ccc_examples() {
        let lin = CenteringFamily::LinearColumns;
        assert!(check_ccc(&m(&[&[1.0, -1.0], &[-1.0, 1.0]]), lin, 1e-9).unwrap());
        assert!(!check_ccc(&m(&[&[1.0, 0.0], &[0.0, 1.0]]), lin, 1e-9).unwrap());
        assert!(check_ccc(&Tensor::zeros(&[3, 2]), lin, 1e-9).unwrap());
        assert!(check_ccc(&Tensor::zeros(&[3]), lin, 1e-9).is_err());
    }

    #[test]
    fn ccwt_linear_examples() {
        let v = ccwt_linear(&m(&[&[1.0, 2.0], &[3.0, 4.0]])).unwrap();
        assert_eq!(v.data(), &[-1.0, -1.0, 1.0, 1.0]);
        let centered = m(&[&[0.5, -2.0], &[-0.5, 2.0]]);
        assert_eq!(ccwt_linear(&centered).unwrap(), centered);
        assert_eq!(ccwt_linear(&Tensor::full(&[3, 2], 1.0)).unwrap(), Tensor::zeros(&[3, 2]));
    }

    #[test]
    fn cbwc_backward_examples() {
        let ones_col = Tensor::full(&[3, 1], 1.0);
        assert_eq!(cbwc_backward(&ones_col).unwrap(), Tensor::zeros(&[3, 1]));
        let centered = m(&[&[1.0, 2.0], &[-1.0, -2.0]]);
        assert_eq!(cbwc_backward(&centered).unwrap(), centered);
    }

    #[test]
    fn ccwt_conv_example() {
        let k = Tensor::new(vec![2, 1, 1, 1], vec![1.0, 3.0]).unwrap();
        assert_eq!(ccwt_conv(&k).unwrap().data(), &[-1.0, 1.0]);
        assert_eq!(ccwt_conv(&ccwt_conv(&k).unwrap()).unwrap(), ccwt_conv(&k).unwrap());
    }

    #[test]
    fn ccwt_recurrent_example() {
        let eye = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let (a, b) = ccwt_recurrent(&eye, &eye).unwrap();
        assert_eq!(a.data(), &[0.5, -0.5, -0.5, 0.5]);
        assert_eq!(a, b);
        let z = Tensor::zeros(&[2, 2]);
        assert_eq!(ccwt_recurrent(&z, &z).unwrap(), (z.clone(), z));
    }

    #[test]
    fn ccwt_attention_value_example() {
        assert_eq!(ccwt_attention_value(&m(&[&[1.0, 3.0]])).unwrap().data(), &[-1.0, 1.0]);
    }

    #[test]
    fn ccwt_grouped_examples() {
        let w = Tensor::new(vec![4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(ccwt_grouped(&w, 2).unwrap().data(), &[-0.5, 0.5, -0.5, 0.5]);
        let w2 = m(&[&[0.3, 1.0], &[2.0, -4.0], &[7.0, 0.5]]);
        assert_eq!(ccwt_grouped(&w2, 1).unwrap(), ccwt_linear(&w2).unwrap());
        assert_eq!(ccwt_grouped(&w2, 3).unwrap(), Tensor::zeros(&[3, 2]));
        assert!(grouped_overconstrained(3, 3));
        assert!(ccwt_grouped(&w2, 2).is_err());
    }

    #[test]
    fn fold_bias_examples() {
        assert_eq!(fold_bias(&Tensor::from_vec(vec![1.0, 3.0])).data(), &[-1.0, 1.0]);
        let zm = Tensor::from_vec(vec![-0.25, 0.25]);
        assert_eq!(fold_bias(&zm), zm);
        assert_eq!(fold_bias(&Tensor::full(&[3], 4.5)), Tensor::zeros(&[3]));
    }

    #[test]
    fn tolerance_scales_with_axis() {
        assert_eq!(default_ccc_tol(DType::F64, 10), 1e-8);
        assert_eq!(default_ccc_tol(DType::F32, 1), 1e-5);
    }
}
