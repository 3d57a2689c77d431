use super::{Tape, Tensor, Var};
use crate::decoder::MaskMatrix;
use crate::error::{Error, Result};

/// Additive bias for inadmissible attention positions.
pub const MASK_BIAS: f64 = -1e9;

pub const LN_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// `a[m×k] · b[k×n]`.
pub(crate) fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a[m×k] · b[n×k]ᵀ`.
pub(crate) fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a[m×k]ᵀ · b[m×n]`, a `k×n` result.
pub(crate) fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

pub(crate) fn softmax_in_place(data: &mut [f64], shape: &[usize], axis: usize) {
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| o * n * inner + k * inner + i;
            let max = (0..n).map(|k| data[at(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for k in 0..n {
                let e = (data[at(k)] - max).exp();
                data[at(k)] = e;
                total += e;
            }
            for k in 0..n {
                data[at(k)] /= total;
            }
        }
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let out = tape.matmul(va, vb)?;
    Ok(tape.value(out).clone())
}

pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let out = tape.softmax(v, axis)?;
    Ok(tape.value(out).clone())
}

pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (vx, vg, vb) = (
        tape.constant(x.clone()),
        tape.constant(gain.clone()),
        tape.constant(bias.clone()),
    );
    let out = tape.layer_norm(vx, vg, vb)?;
    Ok(tape.value(out).clone())
}

/// Scaled dot-product attention over the rows of `q`, `k`, `v`.
pub fn self_attention(q: &Tensor, k: &Tensor, v: &Tensor, mask: &MaskMatrix) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (vq, vk, vv) = (
        tape.constant(q.clone()),
        tape.constant(k.clone()),
        tape.constant(v.clone()),
    );
    let (out, _) = attend(&mut tape, vq, vk, vv, Some(mask))?;
    Ok(tape.value(out).clone())
}

/// `softmax(q·kᵀ/√d + bias)·v` on the tape. Returns the output and the
/// attention probabilities.
pub(crate) fn attend(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&MaskMatrix>,
) -> Result<(Var, Var)> {
    let (lq, d) = tape.value(q).dims2()?;
    let (lk, dk) = tape.value(k).dims2()?;
    let (lv, _) = tape.value(v).dims2()?;
    if d != dk || lk != lv {
        return Err(Error::shape("attention", tape.shape(q), tape.shape(k)));
    }
    let scores = tape.matmul_nt(q, k)?;
    let mut scores = tape.scale(scores, 1.0 / (d as f64).sqrt());
    if let Some(mask) = mask {
        if mask.rows() != lq || mask.cols() != lk {
            return Err(Error::shape("attention mask", &[mask.rows(), mask.cols()], &[lq, lk]));
        }
        if let Some(row) = mask.first_empty_row() {
            return Err(Error::Invalid(format!(
                "attention row {row} has no admissible keys"
            )));
        }
        if !mask.is_full() {
            let bias = tape.constant(mask.bias());
            scores = tape.add(scores, bias)?;
        }
    }
    let probs = tape.softmax(scores, 1)?;
    let out = tape.matmul(probs, v)?;
    Ok((out, probs))
}
