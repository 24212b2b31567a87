use crate::autodiff::tape::{Op, Tape, Var};
use crate::error::{LensError, Result};
use crate::numerics::{matmul_at_into, matmul_bt_into, matmul_into, Tensor};

/// Reverse-mode derivatives of one scalar (or seeded) output.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to `v`; `None` when `v` does not influence the output.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient with respect to `v`, zero-filled when `v` had no influence.
    pub fn get_or_zero(&self, tape: &Tape, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.shape(v)))
    }
}

fn accumulate(slot: &mut Option<Tensor>, contribution: Tensor) {
    match slot {
        Some(existing) => existing.axpy(1.0, &contribution),
        None => *slot = Some(contribution),
    }
}

fn colsum(t: &Tensor) -> Vec<f64> {
    let (r, c) = (t.rows(), t.cols());
    let mut out = vec![0.0; c];
    for i in 0..r {
        for (o, v) in out.iter_mut().zip(t.row(i)) {
            *o += v;
        }
    }
    out
}

fn shaped_like(values: Vec<f64>, like: &Tensor) -> Tensor {
    Tensor::new(like.shape().to_vec(), values).expect("derivative shape")
}

/// Propagates `seed` from `output` back to every differentiable leaf.
pub fn backward(tape: &Tape, output: Var, seed: &Tensor) -> Result<Gradients> {
    let out_value = tape.value(output);
    if out_value.shape() != seed.shape() {
        return Err(LensError::shape(
            "backward",
            out_value.shape(),
            seed.shape(),
        ));
    }
    let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
    grads[output.0] = Some(seed.clone());

    for idx in (0..=output.0).rev() {
        let node = &tape.nodes[idx];
        if !node.needs_grad || matches!(node.op, Op::Leaf) {
            continue;
        }
        let Some(g) = grads[idx].take() else { continue };
        let y = &node.value;
        let need = |v: &Var| tape.nodes[v.0].needs_grad;
        let val = |v: &Var| &*tape.nodes[v.0].value;

        match &node.op {
            Op::Leaf => unreachable!(),
            Op::MatMul(a, b) => {
                let (av, bv) = (val(a), val(b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if need(a) {
                    let mut da = vec![0.0; m * k];
                    matmul_bt_into(g.data(), bv.data(), &mut da, m, n, k);
                    accumulate(&mut grads[a.0], shaped_like(da, av));
                }
                if need(b) {
                    let mut db = vec![0.0; k * n];
                    matmul_at_into(av.data(), g.data(), &mut db, m, k, n);
                    accumulate(&mut grads[b.0], shaped_like(db, bv));
                }
            }
            Op::Add(a, b) => {
                if need(a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if need(b) {
                    accumulate(&mut grads[b.0], g);
                }
            }
            Op::Sub(a, b) => {
                if need(a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if need(b) {
                    accumulate(&mut grads[b.0], g.scale(-1.0));
                }
            }
            Op::Mul(a, b) => {
                if need(a) {
                    accumulate(&mut grads[a.0], g.hadamard(val(b))?);
                }
                if need(b) {
                    accumulate(&mut grads[b.0], g.hadamard(val(a))?);
                }
            }
            Op::AddRow(a, b) => {
                if need(b) {
                    accumulate(&mut grads[b.0], shaped_like(colsum(&g), val(b)));
                }
                if need(a) {
                    accumulate(&mut grads[a.0], g);
                }
            }
            Op::MulRow(a, b) => {
                let (x, row) = (val(a), val(b));
                let c = x.cols();
                if need(b) {
                    let prod = g.hadamard(x)?;
                    accumulate(&mut grads[b.0], shaped_like(colsum(&prod), row));
                }
                if need(a) {
                    let mut da = g.into_data();
                    for (i, v) in da.iter_mut().enumerate() {
                        *v *= row.data()[i % c];
                    }
                    accumulate(&mut grads[a.0], shaped_like(da, x));
                }
            }
            Op::MulScalar(a, s) => {
                let (x, sv) = (val(a), val(s));
                if need(s) {
                    accumulate(&mut grads[s.0], shaped_like(vec![g.dot(x)?], sv));
                }
                if need(a) {
                    accumulate(&mut grads[a.0], g.scale(sv.data()[0]));
                }
            }
            Op::Scale(a, alpha) => accumulate(&mut grads[a.0], g.scale(*alpha)),
            Op::AddScalar(a, _) => accumulate(&mut grads[a.0], g),
            Op::Tanh(a) => {
                let d = zip_map(&g, y, |gi, yi| gi * (1.0 - yi * yi));
                accumulate(&mut grads[a.0], d);
            }
            Op::Sigmoid(a) => {
                let d = zip_map(&g, y, |gi, yi| gi * yi * (1.0 - yi));
                accumulate(&mut grads[a.0], d);
            }
            Op::Exp(a) => accumulate(&mut grads[a.0], zip_map(&g, y, |gi, yi| gi * yi)),
            Op::Sqrt(a) => accumulate(&mut grads[a.0], zip_map(&g, y, |gi, yi| gi / (2.0 * yi))),
            Op::Recip(a) => accumulate(&mut grads[a.0], zip_map(&g, y, |gi, yi| -gi * yi * yi)),
            Op::Square(a) => {
                accumulate(&mut grads[a.0], zip_map(&g, val(a), |gi, xi| 2.0 * gi * xi));
            }
            Op::SoftmaxRows(a) => accumulate(&mut grads[a.0], softmax_linear(y, &g)),
            Op::LayerNormRows(a, eps) => {
                accumulate(&mut grads[a.0], layer_norm_linear(val(a), y, *eps, &g));
            }
            Op::Sum(a) => {
                let x = val(a);
                accumulate(&mut grads[a.0], Tensor::filled(x.shape(), g.data()[0]));
            }
            Op::RowSum(a) => {
                let x = val(a);
                let c = x.cols();
                let d = (0..x.len()).map(|i| g.data()[i / c]).collect();
                accumulate(&mut grads[a.0], shaped_like(d, x));
            }
            Op::Transpose(a) => accumulate(&mut grads[a.0], g.transpose()?),
            Op::Reshape(a) => accumulate(&mut grads[a.0], g.reshape(val(a).shape())?),
            Op::Gather(a, idx) => {
                let x = val(a);
                let mut d = vec![0.0; x.len()];
                for (gi, &src) in g.data().iter().zip(idx.iter()) {
                    d[src] += gi;
                }
                accumulate(&mut grads[a.0], shaped_like(d, x));
            }
            Op::SliceCols(a, start) => {
                let x = val(a);
                let mut d = Tensor::zeros(x.shape());
                for i in 0..g.rows() {
                    for j in 0..g.cols() {
                        d.set(i, start + j, g.get(i, j));
                    }
                }
                accumulate(&mut grads[a.0], d);
            }
            Op::SliceRows(a, start) => {
                let x = val(a);
                let c = x.cols();
                let mut d = vec![0.0; x.len()];
                d[start * c..start * c + g.len()].copy_from_slice(g.data());
                accumulate(&mut grads[a.0], shaped_like(d, x));
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let pv = val(p);
                    let pc = pv.cols();
                    if need(p) {
                        let d = Tensor::from_fn(pv.rows(), pc, |i, j| g.get(i, offset + j));
                        accumulate(&mut grads[p.0], d);
                    }
                    offset += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let pv = val(p);
                    if need(p) {
                        let d = g.data()[offset..offset + pv.len()].to_vec();
                        accumulate(&mut grads[p.0], shaped_like(d, pv));
                    }
                    offset += pv.len();
                }
            }
        }
    }

    // keep gradients only for leaves
    for (i, slot) in grads.iter_mut().enumerate() {
        if !matches!(tape.nodes[i].op, Op::Leaf) || !tape.nodes[i].needs_grad {
            *slot = None;
        }
    }
    Ok(Gradients { grads })
}

/// Forward-mode directional derivative of `output` given tangents on leaves.
///
/// Leaves without a supplied tangent are held fixed. Returns J·direction in
/// the shape of `output`.
pub fn jacobian_vector_product(
    tape: &Tape,
    tangents: &[(Var, Tensor)],
    output: Var,
) -> Result<Tensor> {
    let mut dots: Vec<Option<Tensor>> = vec![None; output.0 + 1];
    for (v, t) in tangents {
        if !matches!(tape.op(*v), Op::Leaf) {
            return Err(LensError::invalid(
                "tangents may only be attached to leaves",
            ));
        }
        if tape.shape(*v) != t.shape() {
            return Err(LensError::shape(
                "jacobian_vector_product",
                tape.shape(*v),
                t.shape(),
            ));
        }
        if v.0 <= output.0 {
            dots[v.0] = Some(t.clone());
        }
    }

    for idx in 0..=output.0 {
        let node = &tape.nodes[idx];
        if matches!(node.op, Op::Leaf) {
            continue;
        }
        let inputs = node.op.inputs();
        if inputs.iter().all(|v| dots[v.0].is_none()) {
            continue;
        }
        let y = &*node.value;
        let val = |v: &Var| &*tape.nodes[v.0].value;
        let dot = |v: &Var| dots[v.0].as_ref();
        let zero_or = |v: &Var| {
            dots[v.0]
                .clone()
                .unwrap_or_else(|| Tensor::zeros(val(v).shape()))
        };

        let out = match &node.op {
            Op::Leaf => unreachable!(),
            Op::MatMul(a, b) => {
                let (av, bv) = (val(a), val(b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                let mut d = vec![0.0; m * n];
                if let Some(da) = dot(a) {
                    matmul_into(da.data(), bv.data(), &mut d, m, k, n);
                }
                if let Some(db) = dot(b) {
                    matmul_into(av.data(), db.data(), &mut d, m, k, n);
                }
                shaped_like(d, y)
            }
            Op::Add(a, b) => zero_or(a).add(&zero_or(b))?,
            Op::Sub(a, b) => zero_or(a).sub(&zero_or(b))?,
            Op::Mul(a, b) => {
                let mut d = Tensor::zeros(y.shape());
                if let Some(da) = dot(a) {
                    d.axpy(1.0, &da.hadamard(val(b))?);
                }
                if let Some(db) = dot(b) {
                    d.axpy(1.0, &val(a).hadamard(db)?);
                }
                d
            }
            Op::AddRow(a, b) => {
                let mut d = zero_or(a).into_data();
                if let Some(db) = dot(b) {
                    let c = val(a).cols();
                    for (i, v) in d.iter_mut().enumerate() {
                        *v += db.data()[i % c];
                    }
                }
                shaped_like(d, y)
            }
            Op::MulRow(a, b) => {
                let (x, row) = (val(a), val(b));
                let c = x.cols();
                let mut d = vec![0.0; x.len()];
                if let Some(da) = dot(a) {
                    for (i, v) in d.iter_mut().enumerate() {
                        *v += da.data()[i] * row.data()[i % c];
                    }
                }
                if let Some(db) = dot(b) {
                    for (i, v) in d.iter_mut().enumerate() {
                        *v += x.data()[i] * db.data()[i % c];
                    }
                }
                shaped_like(d, y)
            }
            Op::MulScalar(a, s) => {
                let (x, sv) = (val(a), val(s));
                let mut d = Tensor::zeros(y.shape());
                if let Some(da) = dot(a) {
                    d.axpy(sv.data()[0], da);
                }
                if let Some(ds) = dot(s) {
                    d.axpy(ds.data()[0], x);
                }
                d
            }
            Op::Scale(a, alpha) => zero_or(a).scale(*alpha),
            Op::AddScalar(a, _) => zero_or(a),
            Op::Tanh(a) => zip_map(&zero_or(a), y, |d, yi| d * (1.0 - yi * yi)),
            Op::Sigmoid(a) => zip_map(&zero_or(a), y, |d, yi| d * yi * (1.0 - yi)),
            Op::Exp(a) => zip_map(&zero_or(a), y, |d, yi| d * yi),
            Op::Sqrt(a) => zip_map(&zero_or(a), y, |d, yi| d / (2.0 * yi)),
            Op::Recip(a) => zip_map(&zero_or(a), y, |d, yi| -d * yi * yi),
            Op::Square(a) => zip_map(&zero_or(a), val(a), |d, xi| 2.0 * d * xi),
            Op::SoftmaxRows(a) => softmax_linear(y, &zero_or(a)),
            Op::LayerNormRows(a, eps) => layer_norm_linear(val(a), y, *eps, &zero_or(a)),
            Op::Sum(a) => Tensor::scalar(zero_or(a).sum()),
            Op::RowSum(a) => {
                let d = zero_or(a);
                let c = d.cols();
                Tensor::matrix(
                    d.rows(),
                    1,
                    (0..d.rows())
                        .map(|i| d.data()[i * c..(i + 1) * c].iter().sum())
                        .collect(),
                )?
            }
            Op::Transpose(a) => zero_or(a).transpose()?,
            Op::Reshape(a) => zero_or(a).reshape(y.shape())?,
            Op::Gather(a, idx) => {
                let d = zero_or(a);
                shaped_like(idx.iter().map(|&i| d.data()[i]).collect(), y)
            }
            Op::SliceCols(a, start) => {
                let d = zero_or(a);
                Tensor::from_fn(y.rows(), y.cols(), |i, j| d.get(i, start + j))
            }
            Op::SliceRows(a, start) => {
                let d = zero_or(a);
                let c = d.cols();
                shaped_like(d.data()[start * c..start * c + y.len()].to_vec(), y)
            }
            Op::ConcatCols(parts) => {
                let ds: Vec<Tensor> = parts.iter().map(zero_or).collect();
                let mut data = Vec::with_capacity(y.len());
                for i in 0..y.rows() {
                    for d in &ds {
                        data.extend_from_slice(d.row(i));
                    }
                }
                shaped_like(data, y)
            }
            Op::ConcatRows(parts) => {
                let mut data = Vec::with_capacity(y.len());
                for p in parts {
                    data.extend_from_slice(zero_or(p).data());
                }
                shaped_like(data, y)
            }
        };
        dots[idx] = Some(out);
    }
    Ok(dots[output.0]
        .take()
        .unwrap_or_else(|| Tensor::zeros(tape.shape(output))))
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    shaped_like(
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect(),
        a,
    )
}

/// The softmax Jacobian is symmetric: both modes apply y ⊙ (d − ⟨d, y⟩).
fn softmax_linear(y: &Tensor, d: &Tensor) -> Tensor {
    let c = y.cols();
    let mut out = vec![0.0; y.len()];
    for i in 0..y.rows() {
        let yr = y.row(i);
        let dr = d.row(i);
        let inner: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
        for j in 0..c {
            out[i * c + j] = yr[j] * (dr[j] - inner);
        }
    }
    shaped_like(out, y)
}

/// The layer-norm Jacobian is symmetric: (1/σ)(d − mean(d) − y·mean(d ⊙ y)).
fn layer_norm_linear(x: &Tensor, y: &Tensor, eps: f64, d: &Tensor) -> Tensor {
    let c = x.cols();
    let n = c as f64;
    let mut out = vec![0.0; x.len()];
    for i in 0..x.rows() {
        let xr = x.row(i);
        let mean = xr.iter().sum::<f64>() / n;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + eps).sqrt();
        let yr = y.row(i);
        let dr = d.row(i);
        let mean_d = dr.iter().sum::<f64>() / n;
        let mean_dy = dr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
        for j in 0..c {
            out[i * c + j] = inv * (dr[j] - mean_d - yr[j] * mean_dy);
        }
    }
    shaped_like(out, x)
}
