//! Neural-network layers on top of the tensor ops: fully-connected, 3x3
//! convolution, GRU cell, and spectrally-normalized weights.

use rand::Rng;

use super::error::NumericsError;
use super::tensor::Tensor;

/// y = W x + b with W: [out, in], x: [in], b: [out].
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
    if w.shape().len() != 2 || x.shape().len() != 1 || b.shape().len() != 1 {
        return Err(NumericsError::ShapeMismatch(format!(
            "linear expects W [out,in], x [in], b [out]; got {:?}, {:?}, {:?}",
            w.shape(),
            x.shape(),
            b.shape()
        )));
    }
    if w.shape()[1] != x.len() || w.shape()[0] != b.len() {
        return Err(NumericsError::ShapeMismatch(format!(
            "linear: W {:?} incompatible with x {:?}, b {:?}",
            w.shape(),
            x.shape(),
            b.shape()
        )));
    }
    Ok(w.matvec(x).add(b))
}

/// 3x3 convolution, stride 1, zero padding 1 (shape-preserving).
pub fn conv2d(x: &Tensor, kernels: &Tensor, bias: &Tensor) -> Result<Tensor, NumericsError> {
    if x.shape().len() != 3 {
        return Err(NumericsError::ShapeMismatch(format!(
            "conv2d expects input [C,H,W], got {:?}",
            x.shape()
        )));
    }
    if kernels.shape() != [bias.len(), x.shape()[0], 3, 3] {
        return Err(NumericsError::ShapeMismatch(format!(
            "conv2d: kernels {:?} incompatible with input {:?} and bias {:?}",
            kernels.shape(),
            x.shape(),
            bias.shape()
        )));
    }
    Ok(x.conv2d(kernels, bias))
}

/// Gated recurrent unit cell parameters. Gate weights take the input, `u*`
/// matrices take the previous hidden state.
#[derive(Clone)]
pub struct GruParams {
    pub wz: Tensor,
    pub uz: Tensor,
    pub bz: Tensor,
    pub wr: Tensor,
    pub ur: Tensor,
    pub br: Tensor,
    pub wn: Tensor,
    pub un: Tensor,
    pub bn: Tensor,
}

/// One GRU step:
///   z = σ(Wz x + Uz h + bz)
///   r = σ(Wr x + Ur h + br)
///   n = tanh(Wn x + r ∘ (Un h) + bn)
///   h' = (1 − z) ∘ n + z ∘ h
pub fn gru_step(x: &Tensor, h: &Tensor, p: &GruParams) -> Result<Tensor, NumericsError> {
    let hid = h.len();
    for (name, w) in [("wz", &p.wz), ("wr", &p.wr), ("wn", &p.wn)] {
        if w.shape() != [hid, x.len()] {
            return Err(NumericsError::ShapeMismatch(format!(
                "gru_step: {name} {:?} incompatible with input {:?}",
                w.shape(),
                x.shape()
            )));
        }
    }
    for (name, u) in [("uz", &p.uz), ("ur", &p.ur), ("un", &p.un)] {
        if u.shape() != [hid, hid] {
            return Err(NumericsError::ShapeMismatch(format!(
                "gru_step: {name} {:?} incompatible with hidden {:?}",
                u.shape(),
                h.shape()
            )));
        }
    }
    let z = p.wz.matvec(x).add(&p.uz.matvec(h)).add(&p.bz).sigmoid();
    let r = p.wr.matvec(x).add(&p.ur.matvec(h)).add(&p.br).sigmoid();
    let n = p.wn.matvec(x).add(&r.mul(&p.un.matvec(h))).add(&p.bn).tanh();
    let one = Tensor::filled(&[hid], 1.0);
    Ok(one.sub(&z).mul(&n).add(&z.mul(h)))
}

/// Persistent left singular-vector estimate for one weight matrix.
#[derive(Clone, Debug)]
pub struct SpectralState {
    pub u: Vec<f64>,
}

impl SpectralState {
    pub fn new(out_dim: usize) -> SpectralState {
        let v = 1.0 / (out_dim as f64).sqrt();
        SpectralState { u: vec![v; out_dim] }
    }
}

fn normalize_in_place(v: &mut [f64]) -> f64 {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 1e-12 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    norm
}

/// W / σ̂(W) with σ̂ estimated by `iters` rounds of power iteration.
///
/// The singular-vector estimates are treated as constants; σ̂ = uᵀ W v stays
/// differentiable in W. Near-zero σ̂ (zero matrix) returns W unchanged.
/// `state.u` is updated in place.
pub fn spectral_normalize(
    w: &Tensor,
    state: &mut SpectralState,
    iters: usize,
) -> Result<Tensor, NumericsError> {
    if w.shape().len() != 2 {
        return Err(NumericsError::ShapeMismatch(format!(
            "spectral_normalize expects a matrix, got {:?}",
            w.shape()
        )));
    }
    let (out, inp) = (w.shape()[0], w.shape()[1]);
    if state.u.len() != out {
        return Err(NumericsError::ShapeMismatch(format!(
            "spectral state dimension {} does not match weight {:?}",
            state.u.len(),
            w.shape()
        )));
    }
    if iters == 0 {
        return Err(NumericsError::InvalidArg("spectral_normalize needs iters >= 1".into()));
    }

    let wd = w.data();
    let mut u = state.u.clone();
    let mut v = vec![0.0; inp];
    for round in 0..iters {
        // v = normalize(Wᵀ u)
        v.iter_mut().for_each(|x| *x = 0.0);
        for i in 0..out {
            let ui = u[i];
            for (vj, wij) in v.iter_mut().zip(&wd[i * inp..(i + 1) * inp]) {
                *vj += ui * wij;
            }
        }
        if normalize_in_place(&mut v) <= 1e-12 {
            if round == 0 {
                // u may sit in the null space; restart from a fresh direction.
                let fill = 1.0 / (out as f64).sqrt();
                u.iter_mut().for_each(|x| *x = fill);
                continue;
            }
            return Ok(w.clone());
        }
        // u = normalize(W v)
        for i in 0..out {
            u[i] = wd[i * inp..(i + 1) * inp].iter().zip(&v).map(|(w, v)| w * v).sum();
        }
        if normalize_in_place(&mut u) <= 1e-12 {
            return Ok(w.clone());
        }
    }

    // σ̂ = uᵀ W v as a weighted sum, so gradient flows into W.
    let mut weights = vec![0.0; out * inp];
    for i in 0..out {
        for j in 0..inp {
            weights[i * inp + j] = u[i] * v[j];
        }
    }
    let sigma = w.weighted_sum(&weights);
    if sigma.item().abs() <= 1e-12 {
        return Ok(w.clone());
    }
    // Persist only meaningful movement; a converged estimate stays frozen so
    // repeated forwards over the same weights are bit-identical.
    let step = u
        .iter()
        .zip(&state.u)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0_f64, f64::max);
    if step > 1e-10 {
        state.u = u;
    }
    Ok(w.mul_scalar(&sigma.recip()))
}

/// Run power iterations until the estimate stops moving (or `max_iters`).
/// Called once after weight initialization so the per-forward single
/// iteration only has to track slow weight updates.
pub fn warm_start_spectral(w: &Tensor, state: &mut SpectralState, max_iters: usize) {
    let (out, inp) = (w.shape()[0], w.shape()[1]);
    let wd = w.data();
    let mut v = vec![0.0; inp];
    for _ in 0..max_iters {
        v.iter_mut().for_each(|x| *x = 0.0);
        for i in 0..out {
            let ui = state.u[i];
            for (vj, wij) in v.iter_mut().zip(&wd[i * inp..(i + 1) * inp]) {
                *vj += ui * wij;
            }
        }
        if normalize_in_place(&mut v) <= 1e-12 {
            return;
        }
        let mut u = vec![0.0; out];
        for i in 0..out {
            u[i] = wd[i * inp..(i + 1) * inp].iter().zip(&v).map(|(w, v)| w * v).sum();
        }
        if normalize_in_place(&mut u) <= 1e-12 {
            return;
        }
        let step = u
            .iter()
            .zip(&state.u)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0_f64, f64::max);
        state.u = u;
        if step <= 1e-10 {
            return;
        }
    }
}

/// Uniform ±√(1/fan_in) weight initialization.
pub fn scaled_uniform<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (1.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::from_vec(shape.to_vec(), data)
}
