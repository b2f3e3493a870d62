//! Parameter storage and the layer kernels (3D convolution, transposed
//! convolution, dense maps, pointwise activations) with hand-written
//! backward passes. Everything runs in `f64`.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};

/// One named parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Ordered collection of named tensors; the flat parameter vector Θ of one
/// network.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParameterSet {
    pub tensors: Vec<Tensor>,
}

impl ParameterSet {
    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> usize {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.push(Tensor { name: name.into(), shape, data });
        self.tensors.len() - 1
    }

    pub fn get(&self, idx: usize) -> &[f64] {
        &self.tensors[idx].data
    }

    pub fn find(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn zeros_like(&self) -> Grads {
        Grads { tensors: self.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect() }
    }

    /// Flat view index → (tensor, offset); used by finite-difference checks.
    pub fn locate(&self, mut flat: usize) -> Option<(usize, usize)> {
        for (i, t) in self.tensors.iter().enumerate() {
            if flat < t.data.len() {
                return Some((i, flat));
            }
            flat -= t.data.len();
        }
        None
    }

    pub fn scalar_mut(&mut self, flat: usize) -> Option<&mut f64> {
        let (t, o) = self.locate(flat)?;
        Some(&mut self.tensors[t].data[o])
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }
}

/// Gradient buffers parallel to a [`ParameterSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub tensors: Vec<Vec<f64>>,
}

impl Grads {
    pub fn flat(&self) -> Vec<f64> {
        self.tensors.iter().flatten().copied().collect()
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.tensors.iter_mut().flatten().for_each(|v| *v *= s);
    }

    pub fn is_zero(&self) -> bool {
        self.tensors.iter().flatten().all(|&v| v == 0.0)
    }
}

/// Activation families used by the encoders, heads and decoder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu(f64),
    Sigmoid,
}

impl Activation {
    /// Xavier gain matching the activation.
    pub fn gain(self) -> f64 {
        match self {
            Activation::Identity | Activation::Sigmoid => 1.0,
            Activation::Relu => libm::sqrt(2.0),
            Activation::LeakyRelu(a) => libm::sqrt(2.0 / (1.0 + a * a)),
        }
    }

    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu(a) => {
                if x >= 0.0 {
                    x
                } else {
                    a * x
                }
            }
            Activation::Sigmoid => 1.0 / (1.0 + libm::exp(-x)),
        }
    }

    /// Derivative expressed through the pre-activation `x` and output `y`.
    #[inline]
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu(a) => {
                if x >= 0.0 {
                    1.0
                } else {
                    a
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
        }
    }

    pub fn apply_slice(self, xs: &[f64]) -> Vec<f64> {
        xs.iter().map(|&x| self.apply(x)).collect()
    }

    /// In-place `grad *= f'(pre)`.
    pub fn backprop(self, pre: &[f64], post: &[f64], grad: &mut [f64]) {
        for ((g, &x), &y) in grad.iter_mut().zip(pre).zip(post) {
            *g *= self.derivative(x, y);
        }
    }
}

/// Xavier-uniform sample buffer.
pub fn xavier_uniform(fan_in: usize, fan_out: usize, gain: f64, n: usize, rng: &mut crate::Rng) -> Vec<f64> {
    let bound = gain * libm::sqrt(6.0 / (fan_in + fan_out) as f64);
    (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
}

/// Geometry of a cubic-kernel 3D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeom {
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn weight_len(&self) -> usize {
        self.in_c * self.out_c * self.kernel * self.kernel * self.kernel
    }

    pub fn out_side(&self, n: usize) -> Option<usize> {
        let span = (n + 2 * self.pad).checked_sub(self.kernel)?;
        Some(span / self.stride + 1)
    }

    pub fn transposed_out_side(&self, n: usize) -> Option<usize> {
        ((n.checked_sub(1)?) * self.stride + self.kernel).checked_sub(2 * self.pad)
    }

    /// Valid output range along one axis for kernel tap `k`: outputs `o`
    /// with `0 <= o*stride + k - pad < n_in`.
    #[inline]
    fn tap_range(&self, k: usize, n_in: usize, n_out: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = k as isize - self.pad as isize;
        // o*s + off >= 0  =>  o >= ceil(-off / s)
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        // o*s + off <= n_in - 1  =>  o <= floor((n_in - 1 - off) / s)
        let hi_num = n_in as isize - 1 - off;
        let hi = if hi_num < 0 { -1 } else { hi_num / s };
        let hi = hi.min(n_out as isize - 1);
        if hi < lo {
            (0, 0)
        } else {
            (lo as usize, hi as usize + 1)
        }
    }
}

fn check_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(shape_err!("{what}: got {got} values, expected {want}"));
    }
    Ok(())
}

/// Strided cubic 3D convolution. `input` is `in_c × n³`; returns
/// `out_c × m³` with `m = geom.out_side(n)`.
pub fn conv3d_forward(geom: &ConvGeom, n: usize, input: &[f64], weight: &[f64], bias: &[f64]) -> Result<(Vec<f64>, usize)> {
    let m = geom.out_side(n).ok_or_else(|| shape_err!("side {n} too small for kernel {}", geom.kernel))?;
    check_len("conv input", input.len(), geom.in_c * n * n * n)?;
    check_len("conv weight", weight.len(), geom.weight_len())?;
    check_len("conv bias", bias.len(), geom.out_c)?;
    let k = geom.kernel;
    let (n3, m3) = (n * n * n, m * m * m);
    let mut out = vec![0.0; geom.out_c * m3];
    let ranges: Vec<(usize, usize)> = (0..k).map(|t| geom.tap_range(t, n, m)).collect();
    let s = geom.stride;
    for o in 0..geom.out_c {
        let out_o = &mut out[o * m3..(o + 1) * m3];
        out_o.iter_mut().for_each(|v| *v = bias[o]);
        for i in 0..geom.in_c {
            let in_i = &input[i * n3..(i + 1) * n3];
            let w_oi = &weight[(o * geom.in_c + i) * k * k * k..(o * geom.in_c + i + 1) * k * k * k];
            for kz in 0..k {
                let (z0, z1) = ranges[kz];
                for ky in 0..k {
                    let (y0, y1) = ranges[ky];
                    for kx in 0..k {
                        let (x0, x1) = ranges[kx];
                        let w = w_oi[(kz * k + ky) * k + kx];
                        if w == 0.0 || x0 == x1 {
                            continue;
                        }
                        for oz in z0..z1 {
                            let iz = oz * s + kz - geom.pad;
                            for oy in y0..y1 {
                                let iy = oy * s + ky - geom.pad;
                                let orow = &mut out_o[(oz * m + oy) * m..(oz * m + oy + 1) * m];
                                let irow = &in_i[(iz * n + iy) * n..(iz * n + iy + 1) * n];
                                for ox in x0..x1 {
                                    orow[ox] += w * irow[ox * s + kx - geom.pad];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((out, m))
}

/// Backward pass of [`conv3d_forward`]. Accumulates into `grad_w`/`grad_b`
/// and, when given, into `grad_in`.
#[allow(clippy::too_many_arguments)]
pub fn conv3d_backward(
    geom: &ConvGeom,
    n: usize,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    mut grad_in: Option<&mut [f64]>,
    grad_w: &mut [f64],
    grad_b: &mut [f64],
) -> Result<()> {
    let m = geom.out_side(n).ok_or_else(|| shape_err!("side {n} too small for kernel {}", geom.kernel))?;
    let k = geom.kernel;
    let (n3, m3) = (n * n * n, m * m * m);
    check_len("conv grad_out", grad_out.len(), geom.out_c * m3)?;
    let ranges: Vec<(usize, usize)> = (0..k).map(|t| geom.tap_range(t, n, m)).collect();
    let s = geom.stride;
    for o in 0..geom.out_c {
        let go = &grad_out[o * m3..(o + 1) * m3];
        grad_b[o] += go.iter().sum::<f64>();
        for i in 0..geom.in_c {
            let in_i = &input[i * n3..(i + 1) * n3];
            let wbase = (o * geom.in_c + i) * k * k * k;
            for kz in 0..k {
                let (z0, z1) = ranges[kz];
                for ky in 0..k {
                    let (y0, y1) = ranges[ky];
                    for kx in 0..k {
                        let (x0, x1) = ranges[kx];
                        if x0 == x1 {
                            continue;
                        }
                        let widx = wbase + (kz * k + ky) * k + kx;
                        let w = weight[widx];
                        let mut gw = 0.0;
                        for oz in z0..z1 {
                            let iz = oz * s + kz - geom.pad;
                            for oy in y0..y1 {
                                let iy = oy * s + ky - geom.pad;
                                let grow = &go[(oz * m + oy) * m..(oz * m + oy + 1) * m];
                                let ibase = (iz * n + iy) * n;
                                let irow = &in_i[ibase..ibase + n];
                                for ox in x0..x1 {
                                    gw += grow[ox] * irow[ox * s + kx - geom.pad];
                                }
                                if let Some(gi) = grad_in.as_deref_mut() {
                                    let girow = &mut gi[i * n3 + ibase..i * n3 + ibase + n];
                                    for ox in x0..x1 {
                                        girow[ox * s + kx - geom.pad] += w * grow[ox];
                                    }
                                }
                            }
                        }
                        grad_w[widx] += gw;
                    }
                }
            }
        }
    }
    Ok(())
}

/// Transposed 3D convolution (weight layout `in_c × out_c × k³`). `input` is
/// `in_c × n³`; output side is `(n−1)·stride + k − 2·pad`.
pub fn conv_transpose3d_forward(geom: &ConvGeom, n: usize, input: &[f64], weight: &[f64], bias: &[f64]) -> Result<(Vec<f64>, usize)> {
    let m = geom
        .transposed_out_side(n)
        .ok_or_else(|| shape_err!("invalid transposed geometry for side {n}"))?;
    check_len("deconv input", input.len(), geom.in_c * n * n * n)?;
    check_len("deconv weight", weight.len(), geom.weight_len())?;
    check_len("deconv bias", bias.len(), geom.out_c)?;
    let k = geom.kernel;
    let (n3, m3) = (n * n * n, m * m * m);
    // Output o-coordinate = input coordinate * stride + tap - pad, i.e. the
    // transposed convolution is the data-gradient of a conv from m to n.
    let ranges: Vec<(usize, usize)> = (0..k).map(|t| geom.tap_range(t, m, n)).collect();
    let s = geom.stride;
    let mut out = vec![0.0; geom.out_c * m3];
    for o in 0..geom.out_c {
        out[o * m3..(o + 1) * m3].iter_mut().for_each(|v| *v = bias[o]);
    }
    for i in 0..geom.in_c {
        let in_i = &input[i * n3..(i + 1) * n3];
        for o in 0..geom.out_c {
            let wbase = (i * geom.out_c + o) * k * k * k;
            let out_o = &mut out[o * m3..(o + 1) * m3];
            for kz in 0..k {
                let (z0, z1) = ranges[kz];
                for ky in 0..k {
                    let (y0, y1) = ranges[ky];
                    for kx in 0..k {
                        let (x0, x1) = ranges[kx];
                        let w = weight[wbase + (kz * k + ky) * k + kx];
                        if w == 0.0 || x0 == x1 {
                            continue;
                        }
                        for iz in z0..z1 {
                            let oz = iz * s + kz - geom.pad;
                            for iy in y0..y1 {
                                let oy = iy * s + ky - geom.pad;
                                let irow = &in_i[(iz * n + iy) * n..(iz * n + iy + 1) * n];
                                let orow = &mut out_o[(oz * m + oy) * m..(oz * m + oy + 1) * m];
                                for ix in x0..x1 {
                                    orow[ix * s + kx - geom.pad] += w * irow[ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((out, m))
}

/// Backward pass of [`conv_transpose3d_forward`].
#[allow(clippy::too_many_arguments)]
pub fn conv_transpose3d_backward(
    geom: &ConvGeom,
    n: usize,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    mut grad_in: Option<&mut [f64]>,
    grad_w: &mut [f64],
    grad_b: &mut [f64],
) -> Result<()> {
    let m = geom
        .transposed_out_side(n)
        .ok_or_else(|| shape_err!("invalid transposed geometry for side {n}"))?;
    let k = geom.kernel;
    let (n3, m3) = (n * n * n, m * m * m);
    check_len("deconv grad_out", grad_out.len(), geom.out_c * m3)?;
    let ranges: Vec<(usize, usize)> = (0..k).map(|t| geom.tap_range(t, m, n)).collect();
    let s = geom.stride;
    for o in 0..geom.out_c {
        grad_b[o] += grad_out[o * m3..(o + 1) * m3].iter().sum::<f64>();
    }
    for i in 0..geom.in_c {
        let ibase_c = i * n3;
        let in_i = &input[ibase_c..ibase_c + n3];
        for o in 0..geom.out_c {
            let wbase = (i * geom.out_c + o) * k * k * k;
            let go = &grad_out[o * m3..(o + 1) * m3];
            for kz in 0..k {
                let (z0, z1) = ranges[kz];
                for ky in 0..k {
                    let (y0, y1) = ranges[ky];
                    for kx in 0..k {
                        let (x0, x1) = ranges[kx];
                        if x0 == x1 {
                            continue;
                        }
                        let widx = wbase + (kz * k + ky) * k + kx;
                        let w = weight[widx];
                        let mut gw = 0.0;
                        for iz in z0..z1 {
                            let oz = iz * s + kz - geom.pad;
                            for iy in y0..y1 {
                                let oy = iy * s + ky - geom.pad;
                                let rbase = (iz * n + iy) * n;
                                let irow = &in_i[rbase..rbase + n];
                                let grow = &go[(oz * m + oy) * m..(oz * m + oy + 1) * m];
                                for ix in x0..x1 {
                                    gw += irow[ix] * grow[ix * s + kx - geom.pad];
                                }
                                if let Some(gi) = grad_in.as_deref_mut() {
                                    let girow = &mut gi[ibase_c + rbase..ibase_c + rbase + n];
                                    for ix in x0..x1 {
                                        girow[ix] += w * grow[ix * s + kx - geom.pad];
                                    }
                                }
                            }
                        }
                        grad_w[widx] += gw;
                    }
                }
            }
        }
    }
    Ok(())
}

/// Dense map `y = W x + b` with `W` stored `out × in`.
pub fn linear_forward(weight: &[f64], bias: &[f64], x: &[f64]) -> Vec<f64> {
    let n_in = x.len();
    bias.iter()
        .enumerate()
        .map(|(o, &b)| b + weight[o * n_in..(o + 1) * n_in].iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
        .collect()
}

/// Backward of [`linear_forward`]; returns the input gradient.
pub fn linear_backward(weight: &[f64], x: &[f64], grad_out: &[f64], grad_w: &mut [f64], grad_b: &mut [f64]) -> Vec<f64> {
    let n_in = x.len();
    let mut gx = vec![0.0; n_in];
    for (o, &g) in grad_out.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        grad_b[o] += g;
        let w = &weight[o * n_in..(o + 1) * n_in];
        let gw = &mut grad_w[o * n_in..(o + 1) * n_in];
        for j in 0..n_in {
            gw[j] += g * x[j];
            gx[j] += g * w[j];
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct-definition convolution used as an oracle.
    fn conv_naive(geom: &ConvGeom, n: usize, input: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
        let m = geom.out_side(n).unwrap();
        let k = geom.kernel;
        let mut out = vec![0.0; geom.out_c * m * m * m];
        for o in 0..geom.out_c {
            for oz in 0..m {
                for oy in 0..m {
                    for ox in 0..m {
                        let mut acc = b[o];
                        for i in 0..geom.in_c {
                            for kz in 0..k {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let iz = (oz * geom.stride + kz) as isize - geom.pad as isize;
                                        let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                                        let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                                        let nn = n as isize;
                                        if iz < 0 || iy < 0 || ix < 0 || iz >= nn || iy >= nn || ix >= nn {
                                            continue;
                                        }
                                        let (iz, iy, ix) = (iz as usize, iy as usize, ix as usize);
                                        acc += w[(((o * geom.in_c + i) * k + kz) * k + ky) * k + kx]
                                            * input[((i * n + iz) * n + iy) * n + ix];
                                    }
                                }
                            }
                        }
                        out[((o * m + oz) * m + oy) * m + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn rand_vec(n: usize, rng: &mut crate::Rng) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn conv_matches_naive() {
        let mut rng = crate::rng_from_seed(3);
        for &(k, s, p, n) in &[(4, 2, 1, 8), (3, 1, 1, 5), (1, 1, 0, 4), (4, 2, 1, 2)] {
            let geom = ConvGeom { in_c: 2, out_c: 3, kernel: k, stride: s, pad: p };
            let x = rand_vec(2 * n * n * n, &mut rng);
            let w = rand_vec(geom.weight_len(), &mut rng);
            let b = rand_vec(3, &mut rng);
            let (y, _) = conv3d_forward(&geom, n, &x, &w, &b).unwrap();
            let y0 = conv_naive(&geom, n, &x, &w, &b);
            for (a, c) in y.iter().zip(&y0) {
                assert!((a - c).abs() < 1e-12);
            }
        }
    }

    /// The transposed convolution is the adjoint of the convolution:
    /// <conv(x), y> = <x, convT(y)> for zero bias.
    #[test]
    fn transpose_is_adjoint() {
        let mut rng = crate::rng_from_seed(4);
        let n = 8;
        let geom = ConvGeom { in_c: 2, out_c: 3, kernel: 4, stride: 2, pad: 1 };
        let x = rand_vec(2 * n * n * n, &mut rng);
        let w = rand_vec(geom.weight_len(), &mut rng);
        let (cx, m) = conv3d_forward(&geom, n, &x, &w, &[0.0; 3]).unwrap();
        let y = rand_vec(cx.len(), &mut rng);
        // conv weight o,i,k is read as transposed weight with in=o, out=i.
        let tgeom = ConvGeom { in_c: 3, out_c: 2, kernel: 4, stride: 2, pad: 1 };
        let (ty, n2) = conv_transpose3d_forward(&tgeom, m, &y, &w, &[0.0; 2]).unwrap();
        assert_eq!(n2, n);
        let lhs: f64 = cx.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&ty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    fn check_grads_fd<F>(f: F, x: &[f64], analytic: &[f64])
    where
        F: Fn(&[f64]) -> f64,
    {
        let eps = 1e-6;
        let mut xp = x.to_vec();
        for j in 0..x.len() {
            let orig = xp[j];
            xp[j] = orig + eps;
            let fp = f(&xp);
            xp[j] = orig - eps;
            let fm = f(&xp);
            xp[j] = orig;
            let fd = (fp - fm) / (2.0 * eps);
            assert!((fd - analytic[j]).abs() < 1e-6 * (1.0 + fd.abs()), "coord {j}: fd {fd} vs {}", analytic[j]);
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = crate::rng_from_seed(8);
        let n = 4;
        let geom = ConvGeom { in_c: 2, out_c: 2, kernel: 4, stride: 2, pad: 1 };
        let x = rand_vec(2 * n * n * n, &mut rng);
        let w = rand_vec(geom.weight_len(), &mut rng);
        let b = rand_vec(2, &mut rng);
        let (y, _) = conv3d_forward(&geom, n, &x, &w, &b).unwrap();
        let r = rand_vec(y.len(), &mut rng);
        let loss = |x: &[f64], w: &[f64]| -> f64 {
            let (y, _) = conv3d_forward(&geom, n, x, w, &b).unwrap();
            y.iter().zip(&r).map(|(a, c)| a * c).sum()
        };
        let mut gx = vec![0.0; x.len()];
        let mut gw = vec![0.0; w.len()];
        let mut gb = vec![0.0; 2];
        conv3d_backward(&geom, n, &x, &w, &r, Some(&mut gx), &mut gw, &mut gb).unwrap();
        check_grads_fd(|xx| loss(xx, &w), &x, &gx);
        check_grads_fd(|ww| loss(&x, ww), &w, &gw);
    }

    #[test]
    fn deconv_backward_matches_finite_differences() {
        let mut rng = crate::rng_from_seed(9);
        let n = 2;
        let geom = ConvGeom { in_c: 2, out_c: 2, kernel: 4, stride: 2, pad: 1 };
        let x = rand_vec(2 * n * n * n, &mut rng);
        let w = rand_vec(geom.weight_len(), &mut rng);
        let b = rand_vec(2, &mut rng);
        let (y, _) = conv_transpose3d_forward(&geom, n, &x, &w, &b).unwrap();
        let r = rand_vec(y.len(), &mut rng);
        let loss = |x: &[f64], w: &[f64]| -> f64 {
            let (y, _) = conv_transpose3d_forward(&geom, n, x, w, &b).unwrap();
            y.iter().zip(&r).map(|(a, c)| a * c).sum()
        };
        let mut gx = vec![0.0; x.len()];
        let mut gw = vec![0.0; w.len()];
        let mut gb = vec![0.0; 2];
        conv_transpose3d_backward(&geom, n, &x, &w, &r, Some(&mut gx), &mut gw, &mut gb).unwrap();
        check_grads_fd(|xx| loss(xx, &w), &x, &gx);
        check_grads_fd(|ww| loss(&x, ww), &w, &gw);
        assert!((gb[0] - r[..r.len() / 2].iter().sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn linear_backward_matches_finite_differences() {
        let mut rng = crate::rng_from_seed(10);
        let x = rand_vec(5, &mut rng);
        let w = rand_vec(15, &mut rng);
        let b = rand_vec(3, &mut rng);
        let r = rand_vec(3, &mut rng);
        let mut gw = vec![0.0; 15];
        let mut gb = vec![0.0; 3];
        let gx = linear_backward(&w, &x, &r, &mut gw, &mut gb);
        let loss = |x: &[f64], w: &[f64]| linear_forward(w, &b, x).iter().zip(&r).map(|(a, c)| a * c).sum::<f64>();
        check_grads_fd(|xx| loss(xx, &w), &x, &gx);
        check_grads_fd(|ww| loss(&x, ww), &w, &gw);
    }
}
