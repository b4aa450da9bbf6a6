//! Numerical checks that a folded model matches its original, plus the
//! normalization FLOP model.

use std::collections::BTreeSet;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Graph, NodeId, NodeKind, WeightStore};
use crate::tensor::{
    backward, finite_difference_grad, forward, max_abs_row_mean, proxy_axis, DType, EvalError,
    EvalOptions, Gradients, Loss, Tensor, TensorError,
};
use crate::tensor::ops::center_along;

pub const INPUT_DISTRIBUTION: &str = "uniform[-2,2]";
pub const F64_TOL: f64 = 1e-9;
pub const F32_TOL: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("models do not have the same signature: {0}")]
    Signature(String),
    #[error("parameters do not pair up: {0}")]
    Pairing(String),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("both schemes must train with the same hyperparameters (lr {0} vs {1})")]
    UnequalHyperparameters(f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub trials: usize,
    pub seed: u64,
    pub inputs: String,
    pub max_abs_forward_diff: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_abs_grad_diff: Option<f64>,
    pub tol: f64,
    pub pass: bool,
}

/// Forward tolerance for a weight store: looser when anything is stored
/// in single precision.
pub fn default_tol(w: &WeightStore) -> f64 {
    if w.iter().any(|(_, t)| t.dtype() == DType::F32) {
        F32_TOL
    } else {
        F64_TOL
    }
}

/// Random-number stream for one trial. Streams differ per trial so the
/// draws do not depend on how trials are scheduled.
pub fn trial_rng(seed: u64, trial: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial);
    rng
}

/// One tensor per graph input: uniform[-2, 2] values, or uniform token ids
/// for inputs with a vocabulary.
pub fn random_inputs(g: &Graph, rng: &mut impl Rng) -> Vec<Tensor> {
    g.inputs()
        .iter()
        .map(|id| match &g.node(id.as_str()).expect("input node").kind {
            NodeKind::Input { shape, vocab } => {
                let n: usize = shape.iter().product();
                let data = (0..n)
                    .map(|_| match vocab {
                        Some(v) => rng.gen_range(0..*v) as f64,
                        None => rng.gen_range(-2.0..=2.0),
                    })
                    .collect();
                Tensor::new(shape.clone(), data).expect("shape matches length")
            }
            _ => unreachable!("graph inputs are Input nodes"),
        })
        .collect()
}

fn check_signature(ga: &Graph, gb: &Graph) -> Result<(), VerifyError> {
    let sig = |g: &Graph| -> Vec<NodeKind> {
        g.inputs()
            .iter()
            .map(|id| g.node(id.as_str()).expect("input node").kind.clone())
            .collect()
    };
    if sig(ga) != sig(gb) {
        return Err(VerifyError::Signature("inputs differ in count, shape or vocabulary".into()));
    }
    if ga.outputs().len() != gb.outputs().len() {
        return Err(VerifyError::Signature(format!(
            "{} outputs vs {}",
            ga.outputs().len(),
            gb.outputs().len()
        )));
    }
    Ok(())
}

fn output_diff(a: &[Tensor], b: &[Tensor]) -> Result<f64, VerifyError> {
    let mut m = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        if x.shape() != y.shape() {
            return Err(VerifyError::Signature(format!(
                "output shapes {:?} vs {:?}",
                x.shape(),
                y.shape()
            )));
        }
        m = m.max(x.max_abs_diff(y));
    }
    Ok(m)
}

fn max_over_trials(
    trials: usize,
    f: impl Fn(u64) -> Result<f64, VerifyError> + Sync + Send,
) -> Result<f64, VerifyError> {
    (0..trials as u64)
        .into_par_iter()
        .map(f)
        .try_reduce(|| 0.0, |a, b| Ok(a.max(b)))
}

/// Largest elementwise output difference between two models over seeded
/// random inputs.
pub fn verify_forward(
    ga: &Graph,
    wa: &WeightStore,
    gb: &Graph,
    wb: &WeightStore,
    trials: usize,
    seed: u64,
    tol: f64,
) -> Result<EquivalenceReport, VerifyError> {
    check_signature(ga, gb)?;
    let opts = EvalOptions::default();
    let diff = max_over_trials(trials, |t| {
        let x = random_inputs(ga, &mut trial_rng(seed, t));
        let (ya, _) = forward(ga, wa, &x, opts)?;
        let (yb, _) = forward(gb, wb, &x, opts)?;
        output_diff(&ya, &yb)
    })?;
    Ok(EquivalenceReport {
        trials,
        seed,
        inputs: INPUT_DISTRIBUTION.into(),
        max_abs_forward_diff: diff,
        max_abs_grad_diff: None,
        tol,
        pass: diff <= tol,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradLoss {
    /// Sum of every output element.
    #[default]
    SumOfOutputs,
    /// Random per-element weights drawn from the trial stream.
    RandomWeighted,
}

fn make_loss(kind: GradLoss, outputs: &[Tensor], rng: &mut impl Rng) -> Loss {
    match kind {
        GradLoss::SumOfOutputs => Loss::SumOfOutputs,
        GradLoss::RandomWeighted => {
            let mut ws = Vec::with_capacity(outputs.len());
            for o in outputs {
                let data = (0..o.len()).map(|_| rng.gen_range(-1.0..=1.0)).collect();
                ws.push(Tensor::new(o.shape().to_vec(), data).expect("shape matches length"));
            }
            Loss::Weighted(ws)
        }
    }
}

/// Parameter gradients of a model, expressed with respect to its proxy
/// weights: layers whose stored weights were centered at fold time get
/// their gradient projected the same way.
pub fn proxy_gradients(g: &Graph, w: &WeightStore, inputs: &[Tensor], loss: &Loss) -> Result<Gradients, VerifyError> {
    let (out, tape) = forward(g, w, inputs, EvalOptions::default())?;
    let mut grads = backward(&tape, &loss.output_grads(&out))?;
    if let Some(p) = g.provenance() {
        for rec in &p.centered {
            let node = g
                .node(rec.node.as_str())
                .ok_or_else(|| VerifyError::UnknownNode(rec.node.clone()))?;
            for name in &node.params {
                let param = w.get(name).expect("validated graph");
                let axis = proxy_axis(&node.kind, param);
                let gr = grads.params.get_mut(name).expect("every parameter has a gradient");
                *gr = center_along(gr, axis, rec.groups)?;
            }
        }
    }
    Ok(grads)
}

fn pair_names(wa: &WeightStore, wb: &WeightStore) -> Result<(), VerifyError> {
    let a: BTreeSet<&str> = wa.names().map(String::as_str).collect();
    let b: BTreeSet<&str> = wb.names().map(String::as_str).collect();
    if a != b {
        let only: Vec<&str> = a.symmetric_difference(&b).copied().collect();
        return Err(VerifyError::Pairing(format!("unpaired parameters: {}", only.join(", "))));
    }
    Ok(())
}

fn grad_diff(a: &IndexMap<String, Tensor>, b: &IndexMap<String, Tensor>) -> Result<f64, VerifyError> {
    let mut m = 0.0f64;
    for (name, ga) in a {
        let gb = b
            .get(name)
            .ok_or_else(|| VerifyError::Pairing(format!("no gradient for {name}")))?;
        if ga.shape() != gb.shape() {
            return Err(VerifyError::Pairing(format!("{name}: shapes {:?} vs {:?}", ga.shape(), gb.shape())));
        }
        m = m.max(ga.max_abs_diff(gb));
    }
    Ok(m)
}

/// Compare parameter gradients of two models with paired parameter names.
/// `pass` covers both the forward and the gradient difference.
#[allow(clippy::too_many_arguments)]
pub fn verify_gradients(
    ga: &Graph,
    wa: &WeightStore,
    gb: &Graph,
    wb: &WeightStore,
    trials: usize,
    seed: u64,
    tol: f64,
    loss: GradLoss,
) -> Result<EquivalenceReport, VerifyError> {
    check_signature(ga, gb)?;
    pair_names(wa, wb)?;
    let (fwd, grad) = (0..trials as u64)
        .into_par_iter()
        .map(|t| -> Result<(f64, f64), VerifyError> {
            let mut rng = trial_rng(seed, t);
            let x = random_inputs(ga, &mut rng);
            let (ya, _) = forward(ga, wa, &x, EvalOptions::default())?;
            let (yb, _) = forward(gb, wb, &x, EvalOptions::default())?;
            let l = make_loss(loss, &ya, &mut rng);
            let da = proxy_gradients(ga, wa, &x, &l)?;
            let db = proxy_gradients(gb, wb, &x, &l)?;
            Ok((output_diff(&ya, &yb)?, grad_diff(&da.params, &db.params)?))
        })
        .try_reduce(|| (0.0, 0.0), |a, b| Ok((a.0.max(b.0), a.1.max(b.1))))?;
    Ok(EquivalenceReport {
        trials,
        seed,
        inputs: INPUT_DISTRIBUTION.into(),
        max_abs_forward_diff: fwd,
        max_abs_grad_diff: Some(grad),
        tol,
        pass: fwd <= tol && grad <= tol,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdCheck {
    pub trials: usize,
    pub seed: u64,
    pub h: f64,
    /// Largest `|analytic - fd| / max(|analytic|, |fd|, floor)`.
    pub max_rel_err: f64,
    pub worst_param: Option<String>,
    pub ill_conditioned: bool,
    pub tol: f64,
    pub pass: bool,
}

/// Denominator floor for relative gradient errors, so that components that
/// vanish analytically are compared in absolute terms.
pub const FD_REL_FLOOR: f64 = 1e-3;

/// Check analytic parameter gradients against central differences, using a
/// random weighted loss per trial.
pub fn check_gradients_fd(
    g: &Graph,
    w: &WeightStore,
    trials: usize,
    seed: u64,
    h: f64,
    tol: f64,
) -> Result<FdCheck, VerifyError> {
    let opts = EvalOptions::default();
    let results: Vec<(f64, Option<String>, bool)> = (0..trials as u64)
        .into_par_iter()
        .map(|t| -> Result<_, VerifyError> {
            let mut rng = trial_rng(seed, t);
            let x = random_inputs(g, &mut rng);
            let (y, tape) = forward(g, w, &x, opts)?;
            let loss = make_loss(GradLoss::RandomWeighted, &y, &mut rng);
            let analytic = backward(&tape, &loss.output_grads(&y))?;
            let fd = finite_difference_grad(g, w, &x, &loss, h, opts)?;
            let mut worst = (0.0f64, None);
            for (name, f) in &fd.params {
                let a = &analytic.params[name];
                for (&av, &fv) in a.data().iter().zip(f.data()) {
                    let e = (av - fv).abs() / av.abs().max(fv.abs()).max(FD_REL_FLOOR);
                    if e > worst.0 {
                        worst = (e, Some(name.clone()));
                    }
                }
            }
            Ok((worst.0, worst.1, fd.ill_conditioned))
        })
        .collect::<Result<_, _>>()?;
    let ill = results.iter().any(|r| r.2);
    let (max_rel_err, worst_param) = results
        .into_iter()
        .fold((0.0, None), |acc, r| if r.0 > acc.0 { (r.0, r.1) } else { acc });
    Ok(FdCheck {
        trials,
        seed,
        h,
        max_rel_err,
        worst_param,
        ill_conditioned: ill,
        tol,
        pass: max_rel_err <= tol,
    })
}

/// Largest absolute mean of the output of `node` over the last axis, split
/// into `groups` contiguous chunks, across seeded random inputs.
pub fn check_zero_mean(
    g: &Graph,
    w: &WeightStore,
    node: &str,
    groups: usize,
    trials: usize,
    seed: u64,
) -> Result<f64, VerifyError> {
    if g.node(node).is_none() {
        return Err(VerifyError::UnknownNode(NodeId::new(node)));
    }
    max_over_trials(trials, |t| {
        let x = random_inputs(g, &mut trial_rng(seed, t));
        let (_, tape) = forward(g, w, &x, EvalOptions::default())?;
        let out = &tape.entry(node).expect("evaluated node").output;
        let n = out.last_dim();
        let chunk = (n / groups.max(1)).max(1);
        let grouped = out
            .reshaped(vec![out.len() / chunk, chunk])
            ?;
        Ok(max_abs_row_mean(&grouped))
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormLayer {
    #[serde(rename = "LN")]
    LayerNorm,
    #[serde(rename = "RMS")]
    RmsNorm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlopVariant {
    Naive,
    Welford,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopCount {
    pub layer: NormLayer,
    pub variant: FlopVariant,
    pub d: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g: Option<u64>,
    pub adds: u64,
    pub muls: u64,
    pub divs: u64,
}

impl FlopCount {
    /// Single cost figure with a division weighted as three operations.
    pub fn ticks(&self) -> u64 {
        self.adds + self.muls + 3 * self.divs
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FlopsError {
    #[error("d must be at least 1")]
    ZeroWidth,
    #[error("the Welford count needs g >= 1")]
    MissingGroups,
}

/// Per-vector operation counts for one normalization over `d` elements; `g`
/// is the Welford partition count. The reciprocal square root is not
/// counted.
pub fn flops_estimate(layer: NormLayer, variant: FlopVariant, d: u64, g: Option<u64>) -> Result<FlopCount, FlopsError> {
    if d == 0 {
        return Err(FlopsError::ZeroWidth);
    }
    let (adds, muls, divs) = match (layer, variant) {
        (NormLayer::LayerNorm, FlopVariant::Naive) => (5 * d, 2 * d, d),
        (NormLayer::RmsNorm, FlopVariant::Naive) => (d, 2 * d, d),
        (NormLayer::LayerNorm, FlopVariant::Welford) => {
            let g = g.filter(|g| *g >= 1).ok_or(FlopsError::MissingGroups)?;
            (7 * d, 3 * d + 7 * g, d)
        }
        (NormLayer::RmsNorm, FlopVariant::Welford) => (d, 3 * d, 0),
    };
    Ok(FlopCount {
        layer,
        variant,
        d,
        g: if variant == FlopVariant::Welford { g } else { None },
        adds,
        muls,
        divs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlopComparison {
    pub ln: FlopCount,
    pub rms: FlopCount,
    /// `1 - rms.ticks / ln.ticks`.
    pub saving: f64,
}

pub fn compare_flops(variant: FlopVariant, d: u64, g: Option<u64>) -> Result<FlopComparison, FlopsError> {
    let ln = flops_estimate(NormLayer::LayerNorm, variant, d, g)?;
    let rms = flops_estimate(NormLayer::RmsNorm, variant, d, g)?;
    Ok(FlopComparison {
        ln,
        rms,
        saving: 1.0 - rms.ticks() as f64 / ln.ticks() as f64,
    })
}

/// Expected end-to-end fractional saving when normalization takes
/// `ln_time_fraction` of inference time and folding saves
/// `layer_saving_fraction` of it.
pub fn model_speedup_estimate(ln_time_fraction: f64, layer_saving_fraction: f64) -> f64 {
    ln_time_fraction * layer_saving_fraction
}

/// One side of a lockstep training comparison.
#[derive(Debug, Clone, Copy)]
pub struct TrainSide<'a> {
    pub graph: &'a Graph,
    pub weights: &'a WeightStore,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub steps: usize,
    pub seed: u64,
    pub lr: f64,
    pub max_weight_diff: f64,
    pub final_loss_a: f64,
    pub final_loss_b: f64,
}

fn cross_entropy(logits: &Tensor, labels: &[usize]) -> (f64, Tensor) {
    let c = logits.last_dim();
    let rows = labels.len() as f64;
    let mut grad = Vec::with_capacity(logits.len());
    let mut loss = 0.0;
    for (row, &label) in logits.rows().zip(labels) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        loss += z.ln() + m - row[label];
        for (j, v) in row.iter().enumerate() {
            let p = (v - m).exp() / z;
            grad.push((p - if j == label { 1.0 } else { 0.0 }) / rows);
        }
    }
    debug_assert_eq!(grad.len(), labels.len() * c);
    (loss / rows, Tensor::new(logits.shape().to_vec(), grad).expect("same shape"))
}

fn train_step(
    g: &Graph,
    w: &mut WeightStore,
    x: &[Tensor],
    labels: &[usize],
    lr: f64,
) -> Result<f64, VerifyError> {
    let (y, tape) = forward(g, w, x, EvalOptions::default())?;
    let (loss, dy) = cross_entropy(&y[0], labels);
    let grads = backward(&tape, &[dy])?;
    for (name, gr) in grads.params {
        let p = w.get_mut(&name).expect("gradient of a stored parameter");
        for (v, d) in p.data_mut().iter_mut().zip(gr.data()) {
            *v -= lr * d;
        }
    }
    Ok(loss)
}

fn rows_of(t: &Tensor) -> usize {
    t.len() / t.last_dim().max(1)
}

fn signature_width(g: &Graph) -> usize {
    match g.inputs().first().and_then(|id| g.node(id.as_str())).map(|n| &n.kind) {
        Some(NodeKind::Input { shape, .. }) => shape.last().copied().unwrap_or(1),
        _ => 1,
    }
}

fn output_width(g: &Graph, w: &WeightStore) -> Result<usize, VerifyError> {
    let x = random_inputs(g, &mut trial_rng(0, 0));
    let (y, _) = forward(g, w, &x, EvalOptions::default())?;
    Ok(y[0].last_dim())
}

/// Labels from a fixed random linear teacher when input rows line up with
/// output rows, otherwise uniform labels.
fn teacher_labels(x: &Tensor, rows: usize, classes: usize, teacher: &[f64], rng: &mut impl Rng) -> Vec<usize> {
    let width = x.last_dim();
    if rows_of(x) != rows || teacher.len() != width * classes {
        return (0..rows).map(|_| rng.gen_range(0..classes)).collect();
    }
    x.rows()
        .map(|row| {
            (0..classes)
                .map(|c| (c, row.iter().zip(&teacher[c * width..]).map(|(a, b)| a * b).sum::<f64>()))
                .fold((0, f64::NEG_INFINITY), |best, (c, s)| if s > best.1 { (c, s) } else { best })
                .0
        })
        .collect()
}

/// Train both models with plain gradient descent on the same seeded
/// synthetic classification batches (softmax cross-entropy on the first
/// output, rows are samples, labels from a seeded linear teacher) and report
/// the largest difference between paired parameters at the end.
pub fn training_equivalence(
    a: TrainSide<'_>,
    b: TrainSide<'_>,
    steps: usize,
    seed: u64,
) -> Result<TrainingReport, VerifyError> {
    if a.lr != b.lr {
        return Err(VerifyError::UnequalHyperparameters(a.lr, b.lr));
    }
    check_signature(a.graph, b.graph)?;
    pair_names(a.weights, b.weights)?;
    let mut wa = a.weights.clone();
    let mut wb = b.weights.clone();
    let (mut la, mut lb) = (f64::NAN, f64::NAN);
    let mut rng = trial_rng(seed, 0);
    let teacher: Vec<f64> = {
        let mut t_rng = trial_rng(seed, u64::MAX);
        let (width, classes) = (signature_width(a.graph), output_width(a.graph, &wa)?);
        (0..width * classes).map(|_| t_rng.gen_range(-1.0..=1.0)).collect()
    };
    for step in 0..steps {
        let x = random_inputs(a.graph, &mut rng);
        let (probe, _) = forward(a.graph, &wa, &x, EvalOptions::default())?;
        let out = &probe[0];
        let classes = out.last_dim();
        let labels = teacher_labels(&x[0], rows_of(out), classes, &teacher, &mut rng);
        la = train_step(a.graph, &mut wa, &x, &labels, a.lr)?;
        lb = train_step(b.graph, &mut wb, &x, &labels, b.lr)?;
        let finite = |w: &WeightStore| w.iter().all(|(_, t)| t.is_finite());
        for l in [la, lb] {
            if !l.is_finite() || !finite(&wa) || !finite(&wb) {
                return Err(VerifyError::Diverged { step, loss: l });
            }
        }
    }
    let mut diff = 0.0f64;
    for (name, t) in wa.iter() {
        diff = diff.max(t.max_abs_diff(wb.get(name).expect("paired above")));
    }
    Ok(TrainingReport {
        steps,
        seed,
        lr: a.lr,
        max_weight_diff: diff,
        final_loss_a: la,
        final_loss_b: lb,
    })
}
