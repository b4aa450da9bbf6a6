//! Primitive forward and backward kernels.
//!
//! Activations follow a "features last" layout: linear-style layers act on
//! the last axis, and convolution feature maps are `[H, W, C]` so that the
//! channel axis is the last one. Every normalization normalizes the last
//! axis.

use super::{compensated_sum, mean, Tensor, TensorError};

fn mismatch(op: &'static str, detail: String) -> TensorError {
    TensorError::ShapeMismatch { op, detail }
}

/// Shape of `x` with its last axis replaced by `last`.
fn with_last(shape: &[usize], last: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    match s.last_mut() {
        Some(l) => *l = last,
        None => s.push(last),
    }
    s
}

// ---------------------------------------------------------------------------
// Normalization

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormConfig {
    pub groups: usize,
    pub eps: f64,
    /// Subtract the group mean before scaling (LayerNorm/GroupNorm) or not
    /// (RMSNorm).
    pub center: bool,
}

#[derive(Debug, Clone)]
pub struct NormCache {
    pub normalized: Tensor,
    /// `sqrt(second_moment + eps)` per (row, group); zero marks a slice that
    /// was zeroed in lenient mode.
    pub scale: Vec<f64>,
    pub config: NormConfig,
}

impl NormCache {
    /// Smallest `sqrt(second_moment + eps)` seen, used to flag ill-conditioning.
    pub fn min_scale(&self) -> f64 {
        self.scale.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

fn check_affine(
    op: &'static str,
    n: usize,
    gamma: Option<&Tensor>,
    beta: Option<&Tensor>,
) -> Result<(), TensorError> {
    for (name, p) in [("gamma", gamma), ("beta", beta)] {
        if let Some(p) = p {
            if p.len() != n {
                return Err(mismatch(
                    op,
                    format!("{name} has {} entries, normalized axis has {n}", p.len()),
                ));
            }
        }
    }
    Ok(())
}

/// Shared kernel behind layer, RMS and group normalization.
pub fn normalize(
    op: &'static str,
    x: &Tensor,
    config: NormConfig,
    gamma: Option<&Tensor>,
    beta: Option<&Tensor>,
    strict: bool,
) -> Result<(Tensor, NormCache), TensorError> {
    if config.eps < 0.0 || config.eps.is_nan() {
        return Err(TensorError::NegativeEps {
            op,
            eps: config.eps,
        });
    }
    let n = x.last_dim();
    if config.groups == 0 || !n.is_multiple_of(config.groups) {
        return Err(TensorError::GroupDivisibility {
            op,
            len: n,
            groups: config.groups,
        });
    }
    check_affine(op, n, gamma, beta)?;
    let c = n / config.groups;
    let mut normalized = Tensor::zeros(x.shape());
    let mut scale = Vec::with_capacity(x.len() / n.max(1) * config.groups);
    for (row_in, row_out) in x
        .rows()
        .zip(normalized.data_mut().chunks_exact_mut(n.max(1)))
    {
        for (z, out) in row_in.chunks_exact(c).zip(row_out.chunks_exact_mut(c)) {
            let mu = if config.center { mean(z) } else { 0.0 };
            for (o, &v) in out.iter_mut().zip(z) {
                *o = v - mu;
            }
            let second_moment = compensated_sum(out.iter().map(|v| v * v)) / c as f64;
            let denom_sq = second_moment + config.eps;
            if denom_sq == 0.0 {
                if strict {
                    return Err(TensorError::ZeroVariance { op });
                }
                out.iter_mut().for_each(|o| *o = 0.0);
                scale.push(0.0);
                continue;
            }
            let s = denom_sq.sqrt();
            for o in out.iter_mut() {
                *o /= s;
            }
            scale.push(s);
        }
    }
    let mut y = normalized.clone();
    if gamma.is_some() || beta.is_some() {
        for row in y.data_mut().chunks_exact_mut(n.max(1)) {
            for (j, v) in row.iter_mut().enumerate() {
                if let Some(g) = gamma {
                    *v *= g.data()[j];
                }
                if let Some(b) = beta {
                    *v += b.data()[j];
                }
            }
        }
    }
    Ok((
        y,
        NormCache {
            normalized,
            scale,
            config,
        },
    ))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn normalize_backward(
    cache: &NormCache,
    gamma: Option<&Tensor>,
    has_beta: bool,
    dy: &Tensor,
) -> (Tensor, Option<Tensor>, Option<Tensor>) {
    let n = cache.normalized.last_dim();
    let c = n / cache.config.groups;
    let mut dgamma = gamma.map(|_| Tensor::zeros(&[n]));
    let mut dbeta = has_beta.then(|| Tensor::zeros(&[n]));
    let mut dx = Tensor::zeros(dy.shape());
    let mut group_idx = 0;
    for ((yhat, g_out), dx_row) in cache
        .normalized
        .rows()
        .zip(dy.rows())
        .zip(dx.data_mut().chunks_exact_mut(n.max(1)))
    {
        let mut dyhat: Vec<f64> = g_out.to_vec();
        if let Some(gm) = gamma {
            for (j, d) in dyhat.iter_mut().enumerate() {
                *d *= gm.data()[j];
            }
        }
        if let Some(dg) = dgamma.as_mut() {
            for (j, v) in dg.data_mut().iter_mut().enumerate() {
                *v += g_out[j] * yhat[j];
            }
        }
        if let Some(db) = dbeta.as_mut() {
            for (j, v) in db.data_mut().iter_mut().enumerate() {
                *v += g_out[j];
            }
        }
        for ((yz, dz), out) in yhat
            .chunks_exact(c)
            .zip(dyhat.chunks_exact(c))
            .zip(dx_row.chunks_exact_mut(c))
        {
            let s = cache.scale[group_idx];
            group_idx += 1;
            if s == 0.0 {
                continue;
            }
            let m1 = if cache.config.center { mean(dz) } else { 0.0 };
            let m2 = compensated_sum(dz.iter().zip(yz).map(|(a, b)| a * b)) / c as f64;
            for ((o, &d), &yv) in out.iter_mut().zip(dz).zip(yz) {
                *o = (d - m1 - yv * m2) / s;
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// LayerNorm over the last axis: `(x - mean) / sqrt(var + eps)`, then
/// `gamma * y + beta` when affine parameters are given.
pub fn layer_norm(
    x: &Tensor,
    eps: f64,
    gamma: Option<&Tensor>,
    beta: Option<&Tensor>,
) -> Result<Tensor, TensorError> {
    let cfg = NormConfig {
        groups: 1,
        eps,
        center: true,
    };
    normalize("layer_norm", x, cfg, gamma, beta, true).map(|(y, _)| y)
}

/// RMSNorm over the last axis: `x / sqrt(mean(x^2) + eps)` with the same
/// optional affine (bias included) as [`layer_norm`].
pub fn rms_norm(
    x: &Tensor,
    eps: f64,
    gamma: Option<&Tensor>,
    beta: Option<&Tensor>,
) -> Result<Tensor, TensorError> {
    let cfg = NormConfig {
        groups: 1,
        eps,
        center: false,
    };
    normalize("rms_norm", x, cfg, gamma, beta, true).map(|(y, _)| y)
}

/// Per-group LayerNorm over contiguous chunks of the last axis.
pub fn group_norm(x: &Tensor, groups: usize, eps: f64) -> Result<Tensor, TensorError> {
    let cfg = NormConfig {
        groups,
        eps,
        center: true,
    };
    normalize("group_norm", x, cfg, None, None, true).map(|(y, _)| y)
}

// ---------------------------------------------------------------------------
// General linear layers

/// `y[.., i] = sum_k x[.., k] * w[i, k] + b[i]` with `w` of shape `[m, n]`.
pub fn linear_forward(w: &Tensor, b: Option<&Tensor>, x: &Tensor) -> Result<Tensor, TensorError> {
    if w.rank() != 2 {
        return Err(mismatch("linear", format!("weight must be 2-D, got {:?}", w.shape())));
    }
    let (m, n) = (w.shape()[0], w.shape()[1]);
    if x.last_dim() != n || x.rank() == 0 {
        return Err(mismatch(
            "linear",
            format!("input {:?} incompatible with weight {:?}", x.shape(), w.shape()),
        ));
    }
    if let Some(b) = b {
        if b.len() != m {
            return Err(mismatch("linear", format!("bias has {} entries, expected {m}", b.len())));
        }
    }
    let mut y = Tensor::zeros(&with_last(x.shape(), m));
    let wd = w.data();
    for (xr, yr) in x.rows().zip(y.data_mut().chunks_exact_mut(m)) {
        for (i, out) in yr.iter_mut().enumerate() {
            let wr = &wd[i * n..(i + 1) * n];
            let mut acc = 0.0;
            for (a, b) in wr.iter().zip(xr) {
                acc += a * b;
            }
            if let Some(b) = b {
                acc += b.data()[i];
            }
            *out = acc;
        }
    }
    Ok(y)
}

/// Returns `(dx, dw, db)`.
pub fn linear_backward(w: &Tensor, x: &Tensor, dy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (m, n) = (w.shape()[0], w.shape()[1]);
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(&[m]);
    let wd = w.data();
    for ((xr, gr), dxr) in x
        .rows()
        .zip(dy.rows())
        .zip(dx.data_mut().chunks_exact_mut(n))
    {
        for (i, &g) in gr.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            db.data_mut()[i] += g;
            let wr = &wd[i * n..(i + 1) * n];
            let dwr = &mut dw.data_mut()[i * n..(i + 1) * n];
            for k in 0..n {
                dxr[k] += g * wr[k];
                dwr[k] += g * xr[k];
            }
        }
    }
    (dx, dw, db)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub stride: usize,
    pub padding: usize,
}

fn conv_out_len(len: usize, k: usize, g: Conv2dGeometry) -> Option<usize> {
    let padded = len + 2 * g.padding;
    if g.stride == 0 || padded < k {
        return None;
    }
    Some((padded - k) / g.stride + 1)
}

/// Output shape of a 2-D convolution on an `[H, W, C_in]` map.
pub fn conv2d_output_shape(
    input: &[usize],
    kernel: &[usize],
    geom: Conv2dGeometry,
) -> Result<Vec<usize>, TensorError> {
    if input.len() != 3 || kernel.len() != 4 || input[2] != kernel[1] {
        return Err(mismatch(
            "conv2d",
            format!("input {input:?} incompatible with kernel {kernel:?}"),
        ));
    }
    let oh = conv_out_len(input[0], kernel[2], geom);
    let ow = conv_out_len(input[1], kernel[3], geom);
    match (oh, ow) {
        (Some(oh), Some(ow)) => Ok(vec![oh, ow, kernel[0]]),
        _ => Err(mismatch("conv2d", format!("kernel {kernel:?} larger than padded input {input:?}"))),
    }
}

/// Cross-correlation of an `[H, W, C_in]` map with a
/// `[C_out, C_in, F_h, F_w]` kernel, producing `[H', W', C_out]`.
pub fn conv2d_forward(
    k: &Tensor,
    b: Option<&Tensor>,
    x: &Tensor,
    geom: Conv2dGeometry,
) -> Result<Tensor, TensorError> {
    let out_shape = conv2d_output_shape(x.shape(), k.shape(), geom)?;
    let [h, w, cin] = [x.shape()[0], x.shape()[1], x.shape()[2]];
    let [cout, _, fh, fw] = [k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]];
    if let Some(b) = b {
        if b.len() != cout {
            return Err(mismatch("conv2d", format!("bias has {} entries, expected {cout}", b.len())));
        }
    }
    let (oh, ow) = (out_shape[0], out_shape[1]);
    let mut y = Tensor::zeros(&out_shape);
    let (xd, kd) = (x.data(), k.data());
    for i in 0..oh {
        for j in 0..ow {
            for o in 0..cout {
                let mut acc = b.map_or(0.0, |b| b.data()[o]);
                for a in 0..fh {
                    let r = (i * geom.stride + a) as isize - geom.padding as isize;
                    if r < 0 || r >= h as isize {
                        continue;
                    }
                    for bb in 0..fw {
                        let c = (j * geom.stride + bb) as isize - geom.padding as isize;
                        if c < 0 || c >= w as isize {
                            continue;
                        }
                        let base = (r as usize * w + c as usize) * cin;
                        for t in 0..cin {
                            acc += xd[base + t] * kd[((o * cin + t) * fh + a) * fw + bb];
                        }
                    }
                }
                y.data_mut()[(i * ow + j) * cout + o] = acc;
            }
        }
    }
    Ok(y)
}

/// Returns `(dx, dk, db)`.
pub fn conv2d_backward(
    k: &Tensor,
    x: &Tensor,
    dy: &Tensor,
    geom: Conv2dGeometry,
) -> (Tensor, Tensor, Tensor) {
    let [h, w, cin] = [x.shape()[0], x.shape()[1], x.shape()[2]];
    let [cout, _, fh, fw] = [k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]];
    let (oh, ow) = (dy.shape()[0], dy.shape()[1]);
    let mut dx = Tensor::zeros(x.shape());
    let mut dk = Tensor::zeros(k.shape());
    let mut db = Tensor::zeros(&[cout]);
    let (xd, kd, gd) = (x.data(), k.data(), dy.data());
    for i in 0..oh {
        for j in 0..ow {
            for o in 0..cout {
                let g = gd[(i * ow + j) * cout + o];
                db.data_mut()[o] += g;
                for a in 0..fh {
                    let r = (i * geom.stride + a) as isize - geom.padding as isize;
                    if r < 0 || r >= h as isize {
                        continue;
                    }
                    for bb in 0..fw {
                        let c = (j * geom.stride + bb) as isize - geom.padding as isize;
                        if c < 0 || c >= w as isize {
                            continue;
                        }
                        let base = (r as usize * w + c as usize) * cin;
                        for t in 0..cin {
                            let ki = ((o * cin + t) * fh + a) * fw + bb;
                            dx.data_mut()[base + t] += g * kd[ki];
                            dk.data_mut()[ki] += g * xd[base + t];
                        }
                    }
                }
            }
        }
    }
    (dx, dk, db)
}

/// Recurrent cell pre-activation `c = W_v x + W_h h_prev + b`.
pub fn rnn_cell_forward(
    wv: &Tensor,
    wh: &Tensor,
    b: Option<&Tensor>,
    x: &Tensor,
    h_prev: &Tensor,
) -> Result<Tensor, TensorError> {
    let from_input = linear_forward(wv, None, x)?;
    let mut c = linear_forward(wh, b, h_prev)?;
    if from_input.shape() != c.shape() {
        return Err(mismatch(
            "rnn_cell",
            format!("input path {:?} vs hidden path {:?}", from_input.shape(), c.shape()),
        ));
    }
    c.add_assign(&from_input);
    Ok(c)
}

/// Plain matrix product of `[r, k]` and `[k, c]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(mismatch(
            "matmul",
            format!("{:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let (r, k, c) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = Tensor::zeros(&[r, c]);
    let (ad, bd) = (a.data(), b.data());
    for i in 0..r {
        for t in 0..k {
            let av = ad[i * k + t];
            if av == 0.0 {
                continue;
            }
            for j in 0..c {
                out.data_mut()[i * c + j] += av * bd[t * c + j];
            }
        }
    }
    Ok(out)
}

fn transpose(a: &Tensor) -> Tensor {
    let (r, c) = (a.shape()[0], a.shape()[1]);
    let mut out = Tensor::zeros(&[c, r]);
    for i in 0..r {
        for j in 0..c {
            out.data_mut()[j * r + i] = a.data()[i * c + j];
        }
    }
    out
}

/// Value path of attention: `(P X) V + b`, with attention weights `P`
/// `[n, n']`, values input `X` `[n', d]` and projection `V` `[d, d_v]`.
/// The mixed input `B = P X` is returned alongside the output.
pub fn attention_value_forward(
    probs: &Tensor,
    x: &Tensor,
    v: &Tensor,
    b: Option<&Tensor>,
) -> Result<(Tensor, Tensor), TensorError> {
    let mixed = matmul(probs, x)?;
    let mut y = matmul(&mixed, v)?;
    if let Some(b) = b {
        let dv = v.shape()[1];
        if b.len() != dv {
            return Err(mismatch("attention_value", format!("bias has {} entries, expected {dv}", b.len())));
        }
        for row in y.data_mut().chunks_exact_mut(dv) {
            for (o, bv) in row.iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
    }
    Ok((y, mixed))
}

/// Returns `(dprobs, dx, dv, db)`.
pub fn attention_value_backward(
    probs: &Tensor,
    x: &Tensor,
    v: &Tensor,
    mixed: &Tensor,
    dy: &Tensor,
) -> (Tensor, Tensor, Tensor, Tensor) {
    let dmixed = matmul(dy, &transpose(v)).expect("shapes checked in forward");
    let dv = matmul(&transpose(mixed), dy).expect("shapes checked in forward");
    let dprobs = matmul(&dmixed, &transpose(x)).expect("shapes checked in forward");
    let dx = matmul(&transpose(probs), &dmixed).expect("shapes checked in forward");
    let mut db = Tensor::zeros(&[v.shape()[1]]);
    for row in dy.rows() {
        for (o, g) in db.data_mut().iter_mut().zip(row) {
            *o += g;
        }
    }
    (dprobs, dx, dv, db)
}

// ---------------------------------------------------------------------------
// Structural and elementwise ops

pub fn residual_add(inputs: &[&Tensor]) -> Result<Tensor, TensorError> {
    let first = inputs
        .first()
        .ok_or_else(|| mismatch("residual_add", "no inputs".into()))?;
    let mut out = (*first).clone();
    for t in &inputs[1..] {
        if t.shape() != out.shape() {
            return Err(mismatch(
                "residual_add",
                format!("{:?} vs {:?}", out.shape(), t.shape()),
            ));
        }
        out.add_assign(t);
    }
    Ok(out)
}

pub fn scalar_scale(x: &Tensor, scale: f64) -> Tensor {
    x.map(|v| v * scale)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub fn relu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    for (d, &v) in dx.data_mut().iter_mut().zip(x.data()) {
        if v <= 0.0 {
            *d = 0.0;
        }
    }
    dx
}

/// Max-subtracted softmax over the last axis.
pub fn softmax(x: &Tensor) -> Tensor {
    let n = x.last_dim().max(1);
    let mut y = x.clone();
    for row in y.data_mut().chunks_exact_mut(n) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    y
}

pub fn softmax_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let n = y.last_dim().max(1);
    let mut dx = Tensor::zeros(y.shape());
    for ((yr, gr), dr) in y
        .rows()
        .zip(dy.rows())
        .zip(dx.data_mut().chunks_exact_mut(n))
    {
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for ((d, &yv), &g) in dr.iter_mut().zip(yr).zip(gr) {
            *d = yv * (g - dot);
        }
    }
    dx
}

/// Concatenate along the last axis.
pub fn concat(inputs: &[&Tensor]) -> Result<Tensor, TensorError> {
    let first = inputs
        .first()
        .ok_or_else(|| mismatch("concat", "no inputs".into()))?;
    let lead = &first.shape()[..first.rank().saturating_sub(1)];
    for t in inputs {
        if t.rank() == 0 || &t.shape()[..t.rank() - 1] != lead {
            return Err(mismatch(
                "concat",
                format!("leading dims {:?} vs {:?}", lead, t.shape()),
            ));
        }
    }
    let total: usize = inputs.iter().map(|t| t.last_dim()).sum();
    let rows = first.len() / first.last_dim().max(1);
    let mut data = Vec::with_capacity(rows * total);
    let mut iters: Vec<_> = inputs.iter().map(|t| t.rows()).collect();
    for _ in 0..rows {
        for it in iters.iter_mut() {
            data.extend_from_slice(it.next().expect("row count checked"));
        }
    }
    Tensor::new(with_last(first.shape(), total), data)
}

pub fn concat_backward(widths: &[usize], dy: &Tensor) -> Vec<Tensor> {
    let lead = &dy.shape()[..dy.rank() - 1];
    let mut outs: Vec<Vec<f64>> = widths.iter().map(|_| Vec::new()).collect();
    for row in dy.rows() {
        let mut off = 0;
        for (out, &w) in outs.iter_mut().zip(widths) {
            out.extend_from_slice(&row[off..off + w]);
            off += w;
        }
    }
    outs.into_iter()
        .zip(widths)
        .map(|(d, &w)| {
            let mut shape = lead.to_vec();
            shape.push(w);
            Tensor::new(shape, d).expect("widths sum to last dim")
        })
        .collect()
}

/// Gather rows of `table` (`[vocab, d]`) by integer-valued `indices`.
pub fn embedding_lookup(indices: &Tensor, table: &Tensor) -> Result<Tensor, TensorError> {
    if table.rank() != 2 {
        return Err(mismatch("embedding", format!("table must be 2-D, got {:?}", table.shape())));
    }
    let (vocab, d) = (table.shape()[0], table.shape()[1]);
    let mut shape = indices.shape().to_vec();
    shape.push(d);
    let mut data = Vec::with_capacity(indices.len() * d);
    for &ix in indices.data() {
        let row = index_of(ix, vocab)?;
        data.extend_from_slice(&table.data()[row * d..(row + 1) * d]);
    }
    Tensor::new(shape, data)
}

fn index_of(ix: f64, vocab: usize) -> Result<usize, TensorError> {
    if ix.fract() != 0.0 || ix < 0.0 || ix >= vocab as f64 {
        return Err(TensorError::IndexOutOfRange { index: ix, vocab });
    }
    Ok(ix as usize)
}

pub fn embedding_backward(indices: &Tensor, table_shape: &[usize], dy: &Tensor) -> Tensor {
    let d = table_shape[1];
    let mut dt = Tensor::zeros(table_shape);
    for (&ix, row) in indices.data().iter().zip(dy.rows()) {
        let r = ix as usize;
        for (o, g) in dt.data_mut()[r * d..(r + 1) * d].iter_mut().zip(row) {
            *o += g;
        }
    }
    dt
}

/// Subtract the per-group mean over the last axis (`groups = 1`: plain
/// last-axis centering). The map is a symmetric projection, so it is also
/// its own backward.
pub fn auxiliary_centering(x: &Tensor, groups: usize) -> Result<Tensor, TensorError> {
    let n = x.last_dim();
    if groups == 0 || !n.is_multiple_of(groups) {
        return Err(TensorError::GroupDivisibility {
            op: "auxiliary_centering",
            len: n,
            groups,
        });
    }
    let c = n / groups;
    let mut y = x.clone();
    for chunk in y.data_mut().chunks_exact_mut(c.max(1)) {
        let mu = mean(chunk);
        chunk.iter_mut().for_each(|v| *v -= mu);
    }
    Ok(y)
}

/// Subtract the mean of every contiguous chunk of `len(axis) / groups`
/// entries along `axis`, independently for each position of the other axes.
/// This is the orthogonal projection onto tensors whose chunks along `axis`
/// sum to zero, so it is symmetric and idempotent.
pub fn center_along(t: &Tensor, axis: usize, groups: usize) -> Result<Tensor, TensorError> {
    if axis >= t.rank() {
        return Err(mismatch(
            "center_along",
            format!("axis {axis} out of range for shape {:?}", t.shape()),
        ));
    }
    let len = t.shape()[axis];
    if groups == 0 || !len.is_multiple_of(groups) {
        return Err(TensorError::GroupDivisibility {
            op: "center_along",
            len,
            groups,
        });
    }
    let outer: usize = t.shape()[..axis].iter().product();
    let inner: usize = t.shape()[axis + 1..].iter().product();
    let c = len / groups;
    let mut out = t.clone();
    let data = out.data_mut();
    let mut chunk = vec![0.0; c];
    for o in 0..outer {
        for k in 0..inner {
            for grp in 0..groups {
                let idx = |i: usize| (o * len + grp * c + i) * inner + k;
                for (i, v) in chunk.iter_mut().enumerate() {
                    *v = data[idx(i)];
                }
                let mu = mean(&chunk);
                for i in 0..c {
                    data[idx(i)] -= mu;
                }
            }
        }
    }
    Ok(out)
}
