//! Per-modality volumetric encoders with local/global projection heads, the
//! mirrored decoder used by autoencoding baselines and the linear classifier
//! used by the supervised baseline.
//!
//! The encoder is a DCGAN-style ladder of strided `4³` convolutions
//! (stride 2, padding 1, leaky rectifier), followed by a dense map to the
//! `repr_dim`-dimensional global representation `z`. The activation map of
//! stage `local_layer` is exported as the local representation.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Result};
use crate::linalg::Mat;
use crate::nn::{self, Activation, ConvGeom, Grads, ParameterSet};
use crate::volume::Volume;

const KERNEL: usize = 4;
const STRIDE: usize = 2;
const PAD: usize = 1;

/// Encoder architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub input_side: usize,
    /// Output channels of each strided stage; the stage count `L` is the
    /// length.
    pub channels: Vec<usize>,
    /// 1-based stage whose activations are exported as locals.
    pub local_layer: usize,
    pub repr_dim: usize,
    /// Negative slope of the leaky rectifier; `1.0` makes the encoder linear.
    pub leaky_slope: f64,
}

impl EncoderSpec {
    /// Five-stage ladder for 64³ inputs; stage 3 yields `128 × 8³` locals.
    pub fn paper_64() -> Self {
        Self { input_side: 64, channels: vec![32, 64, 128, 256, 512], local_layer: 3, repr_dim: 64, leaky_slope: 0.2 }
    }

    /// Desk-scale default for 16³ inputs.
    pub fn desk_16() -> Self {
        Self { input_side: 16, channels: vec![8, 16, 32, 64], local_layer: 2, repr_dim: 64, leaky_slope: 0.2 }
    }

    pub fn n_layers(&self) -> usize {
        self.channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.local_layer;
        let nl = self.n_layers();
        if !(1 < l && l < nl) {
            return Err(config_err!("local layer {l} must satisfy 1 < l < L = {nl}"));
        }
        if self.channels.contains(&0) || self.repr_dim == 0 {
            return Err(config_err!("channel counts and repr_dim must be positive"));
        }
        let scale = 1usize << nl;
        if self.input_side == 0 || !self.input_side.is_multiple_of(scale) {
            return Err(config_err!(
                "input side {} not divisible by 2^L = {scale}",
                self.input_side
            ));
        }
        if !(self.leaky_slope.is_finite() && self.leaky_slope >= 0.0) {
            return Err(config_err!("leaky slope must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn stage_side(&self, stage: usize) -> usize {
        self.input_side >> stage
    }

    pub fn local_side(&self) -> usize {
        self.stage_side(self.local_layer)
    }

    pub fn local_locations(&self) -> usize {
        self.local_side().pow(3)
    }

    pub fn local_channels(&self) -> usize {
        self.channels[self.local_layer - 1]
    }

    fn stage_geom(&self, stage: usize) -> ConvGeom {
        let in_c = if stage == 0 { 1 } else { self.channels[stage - 1] };
        ConvGeom { in_c, out_c: self.channels[stage], kernel: KERNEL, stride: STRIDE, pad: PAD }
    }

    fn flat_len(&self) -> usize {
        self.channels[self.n_layers() - 1] * self.stage_side(self.n_layers()).pow(3)
    }

    /// Receptive field (in input voxels, ignoring borders) of one location
    /// of stage `stage` (1-based).
    pub fn receptive_field(&self, stage: usize) -> usize {
        let (mut rf, mut jump) = (1usize, 1usize);
        for _ in 0..stage {
            rf += (KERNEL - 1) * jump;
            jump *= STRIDE;
        }
        rf
    }

    fn activation(&self) -> Activation {
        Activation::LeakyRelu(self.leaky_slope)
    }
}

/// Residual 1×1×1 local projection head: path A is two pointwise layers
/// (`C → hidden → out`, rectifier between), path B one pointwise layer
/// initialised to the identity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalHeadSpec {
    pub hidden: usize,
    pub out_dim: usize,
}

/// Global projection head configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GlobalHeadSpec {
    /// No head: the critic sees `z` directly.
    Absent,
    /// A single dense `d → d` layer.
    Linear,
    /// `n` hidden layers of the given width with rectifiers, then `→ d`.
    Hidden { layers: usize, width: usize },
}

impl GlobalHeadSpec {
    pub fn validate(&self) -> Result<()> {
        if let GlobalHeadSpec::Hidden { layers, width } = *self {
            if !(1..=3).contains(&layers) || width == 0 {
                return Err(config_err!("global head needs 1..=3 hidden layers of positive width"));
            }
        }
        Ok(())
    }
}

/// Full per-modality architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub encoder: EncoderSpec,
    pub local_head: Option<LocalHeadSpec>,
    pub global_head: GlobalHeadSpec,
    /// Attach the mirrored transposed-convolution decoder.
    pub decoder: bool,
    /// Attach a linear classifier on `z` with this many classes.
    pub classes: Option<usize>,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.global_head.validate()?;
        if let Some(h) = self.local_head {
            if h.hidden == 0 || h.out_dim == 0 {
                return Err(config_err!("local head widths must be positive"));
            }
            if h.out_dim != self.encoder.repr_dim {
                return Err(config_err!(
                    "local head output {} must equal critic dimension {}",
                    h.out_dim,
                    self.encoder.repr_dim
                ));
            }
        }
        if let Some(k) = self.classes {
            if k < 2 {
                return Err(config_err!("classifier needs at least 2 classes"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Dense {
    w: usize,
    b: usize,
    n_in: usize,
    n_out: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    convs: Vec<(usize, usize)>,
    fc: Dense,
    local: Option<[Dense; 3]>,
    global: Vec<Dense>,
    dec_fc: Option<Dense>,
    deconvs: Vec<(usize, usize)>,
    classifier: Option<Dense>,
}

/// One modality's network: architecture plus parameters Θ.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: ParameterSet,
    layout: Layout,
}

/// Global representation and local activation map of one input.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutputs {
    pub z: Vec<f64>,
    /// `S × C`: one row per location.
    pub locals: Mat,
}

/// Intermediate values of one encoder pass, retained for backprop.
#[derive(Debug, Clone)]
pub struct EncoderTrace {
    input: Vec<f64>,
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
    pub z: Vec<f64>,
}

impl EncoderTrace {
    /// Local activation map in `S × C` layout.
    pub fn locals(&self, spec: &EncoderSpec) -> Mat {
        channel_major_to_rows(&self.post[spec.local_layer - 1], spec.local_channels())
    }
}

fn channel_major_to_rows(x: &[f64], channels: usize) -> Mat {
    let s = x.len() / channels;
    let mut m = Mat::zeros(s, channels);
    for c in 0..channels {
        for loc in 0..s {
            m.data[loc * channels + c] = x[c * s + loc];
        }
    }
    m
}

fn rows_to_channel_major(m: &Mat) -> Vec<f64> {
    let mut x = vec![0.0; m.rows * m.cols];
    for loc in 0..m.rows {
        for c in 0..m.cols {
            x[c * m.rows + loc] = m.data[loc * m.cols + c];
        }
    }
    x
}

/// Retained activations of a local-head pass over `S` locations.
#[derive(Debug, Clone)]
pub struct LocalHeadTrace {
    input: Mat,
    hidden_pre: Mat,
    hidden: Mat,
}

/// Retained activations of a global-head pass.
#[derive(Debug, Clone)]
pub struct GlobalHeadTrace {
    inputs: Vec<Vec<f64>>,
    pres: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct DecoderTrace {
    z: Vec<f64>,
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
}

fn dense(params: &mut ParameterSet, name: &str, n_in: usize, n_out: usize, gain: f64, rng: &mut crate::Rng) -> Dense {
    let w = params.push(
        format!("{name}.weight"),
        vec![n_out, n_in],
        nn::xavier_uniform(n_in, n_out, gain, n_in * n_out, rng),
    );
    let b = params.push(format!("{name}.bias"), vec![n_out], vec![0.0; n_out]);
    Dense { w, b, n_in, n_out }
}

impl Model {
    /// Builds a model with Xavier-uniform weights (activation-matched gain),
    /// zero biases and an identity-initialised local path B.
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = crate::rng_from_seed(seed);
        let mut params = ParameterSet::default();
        let enc = &spec.encoder;
        let act = enc.activation();
        let k3 = KERNEL * KERNEL * KERNEL;
        let mut convs = Vec::new();
        for stage in 0..enc.n_layers() {
            let g = enc.stage_geom(stage);
            let w = params.push(
                format!("enc.conv{}.weight", stage + 1),
                vec![g.out_c, g.in_c, KERNEL, KERNEL, KERNEL],
                nn::xavier_uniform(g.in_c * k3, g.out_c * k3, act.gain(), g.weight_len(), &mut rng),
            );
            let b = params.push(format!("enc.conv{}.bias", stage + 1), vec![g.out_c], vec![0.0; g.out_c]);
            convs.push((w, b));
        }
        let fc = dense(&mut params, "enc.fc", enc.flat_len(), enc.repr_dim, 1.0, &mut rng);
        let d = enc.repr_dim;

        let local = spec.local_head.map(|h| {
            let c = enc.local_channels();
            let a1 = dense(&mut params, "local.a1", c, h.hidden, Activation::Relu.gain(), &mut rng);
            let a2 = dense(&mut params, "local.a2", h.hidden, h.out_dim, 1.0, &mut rng);
            let mut ident = vec![0.0; h.out_dim * c];
            for o in 0..h.out_dim.min(c) {
                ident[o * c + o] = 1.0;
            }
            let bw = params.push("local.b.weight", vec![h.out_dim, c], ident);
            let bb = params.push("local.b.bias", vec![h.out_dim], vec![0.0; h.out_dim]);
            [a1, a2, Dense { w: bw, b: bb, n_in: c, n_out: h.out_dim }]
        });

        let mut global = Vec::new();
        match spec.global_head {
            GlobalHeadSpec::Absent => {}
            GlobalHeadSpec::Linear => global.push(dense(&mut params, "global.out", d, d, 1.0, &mut rng)),
            GlobalHeadSpec::Hidden { layers, width } => {
                let mut n_in = d;
                for i in 0..layers {
                    global.push(dense(&mut params, &format!("global.hidden{}", i + 1), n_in, width, Activation::Relu.gain(), &mut rng));
                    n_in = width;
                }
                global.push(dense(&mut params, "global.out", n_in, d, 1.0, &mut rng));
            }
        }

        let (dec_fc, deconvs) = if spec.decoder {
            let fc = dense(&mut params, "dec.fc", d, enc.flat_len(), Activation::Relu.gain(), &mut rng);
            let mut deconvs = Vec::new();
            let nl = enc.n_layers();
            for j in 0..nl {
                let in_c = enc.channels[nl - 1 - j];
                let out_c = if j + 1 == nl { 1 } else { enc.channels[nl - 2 - j] };
                let gain = if j + 1 == nl { Activation::Sigmoid.gain() } else { Activation::Relu.gain() };
                let g = ConvGeom { in_c, out_c, kernel: KERNEL, stride: STRIDE, pad: PAD };
                // Transposed-conv fan computation follows the (in, out) weight layout.
                let w = params.push(
                    format!("dec.deconv{}.weight", j + 1),
                    vec![in_c, out_c, KERNEL, KERNEL, KERNEL],
                    nn::xavier_uniform(out_c * k3, in_c * k3, gain, g.weight_len(), &mut rng),
                );
                let b = params.push(format!("dec.deconv{}.bias", j + 1), vec![out_c], vec![0.0; out_c]);
                deconvs.push((w, b));
            }
            (Some(fc), deconvs)
        } else {
            (None, Vec::new())
        };

        let classifier = spec.classes.map(|k| dense(&mut params, "cls", d, k, 1.0, &mut rng));

        Ok(Self {
            spec: spec.clone(),
            params,
            layout: Layout { convs, fc, local, global, dec_fc, deconvs, classifier },
        })
    }

    /// Rebinds a parameter set (e.g. loaded from a checkpoint) to a spec,
    /// checking every tensor name and shape.
    pub fn from_parts(spec: &ModelSpec, params: ParameterSet) -> Result<Self> {
        let mut model = Self::build(spec, 0)?;
        if model.params.tensors.len() != params.tensors.len() {
            return Err(shape_err!(
                "parameter set has {} tensors, architecture needs {}",
                params.tensors.len(),
                model.params.tensors.len()
            ));
        }
        for (want, got) in model.params.tensors.iter().zip(&params.tensors) {
            if want.name != got.name || want.shape != got.shape {
                return Err(shape_err!(
                    "tensor {} {:?} does not match expected {} {:?}",
                    got.name,
                    got.shape,
                    want.name,
                    want.shape
                ));
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn has_global_head(&self) -> bool {
        !self.layout.global.is_empty()
    }

    pub fn has_local_head(&self) -> bool {
        self.layout.local.is_some()
    }

    pub fn has_decoder(&self) -> bool {
        self.layout.dec_fc.is_some()
    }

    pub fn has_classifier(&self) -> bool {
        self.layout.classifier.is_some()
    }

    fn check_input(&self, x: &Volume) -> Result<()> {
        let side = self.spec.encoder.input_side;
        if x.dims != [side; 3] {
            return Err(shape_err!("input dims {:?}, encoder expects {side}³", x.dims));
        }
        Ok(())
    }

    /// Encoder forward pass keeping every stage's activations.
    pub fn encode_trace(&self, x: &Volume) -> Result<EncoderTrace> {
        self.check_input(x)?;
        let enc = &self.spec.encoder;
        let act = enc.activation();
        let mut pre = Vec::with_capacity(enc.n_layers());
        let mut post: Vec<Vec<f64>> = Vec::with_capacity(enc.n_layers());
        let mut side = enc.input_side;
        for (stage, &(w, b)) in self.layout.convs.iter().enumerate() {
            let g = enc.stage_geom(stage);
            let input = if stage == 0 { &x.data } else { &post[stage - 1] };
            let (p, m) = nn::conv3d_forward(&g, side, input, self.params.get(w), self.params.get(b))?;
            side = m;
            post.push(act.apply_slice(&p));
            pre.push(p);
        }
        let fc = self.layout.fc;
        let z = nn::linear_forward(self.params.get(fc.w), self.params.get(fc.b), post.last().unwrap());
        Ok(EncoderTrace { input: x.data.clone(), pre, post, z })
    }

    /// Global representation and local map of one volume.
    pub fn forward(&self, x: &Volume) -> Result<ForwardOutputs> {
        let t = self.encode_trace(x)?;
        let locals = t.locals(&self.spec.encoder);
        Ok(ForwardOutputs { z: t.z, locals })
    }

    /// Global representation only.
    pub fn encode(&self, x: &Volume) -> Result<Vec<f64>> {
        Ok(self.encode_trace(x)?.z)
    }

    /// Backprop through the encoder. `d_locals` is the gradient w.r.t. the
    /// exported local map (`S × C`). Accumulates parameter gradients into
    /// `grads` (if given) and returns the input gradient when requested.
    pub fn encoder_backward(
        &self,
        trace: &EncoderTrace,
        d_z: &[f64],
        d_locals: Option<&Mat>,
        mut grads: Option<&mut Grads>,
        want_input: bool,
    ) -> Result<Option<Vec<f64>>> {
        let enc = &self.spec.encoder;
        let act = enc.activation();
        let nl = enc.n_layers();
        let fc = self.layout.fc;
        let mut scratch_w = Vec::new();
        let mut scratch_b = Vec::new();
        let mut g_post = {
            let (gw, gb) = dense_grad_bufs(&mut grads, fc, &mut scratch_w, &mut scratch_b);
            nn::linear_backward(self.params.get(fc.w), &trace.post[nl - 1], d_z, gw, gb)
        };
        for stage in (0..nl).rev() {
            if stage + 1 == enc.local_layer {
                if let Some(dl) = d_locals {
                    if dl.rows != enc.local_locations() || dl.cols != enc.local_channels() {
                        return Err(shape_err!("local gradient is {}x{}", dl.rows, dl.cols));
                    }
                    for (g, v) in g_post.iter_mut().zip(rows_to_channel_major(dl)) {
                        *g += v;
                    }
                }
            }
            act.backprop(&trace.pre[stage], &trace.post[stage], &mut g_post);
            let g = enc.stage_geom(stage);
            let side = enc.stage_side(stage);
            let input = if stage == 0 { &trace.input } else { &trace.post[stage - 1] };
            let need_in = stage > 0 || want_input;
            let mut g_in = if need_in { vec![0.0; input.len()] } else { Vec::new() };
            let (w, b) = self.layout.convs[stage];
            let (gw, gb): (&mut [f64], &mut [f64]) = match grads.as_deref_mut() {
                Some(gr) => {
                    let (lo, hi) = gr.tensors.split_at_mut(b);
                    (&mut lo[w], &mut hi[0])
                }
                None => {
                    scratch_w.clear();
                    scratch_w.resize(g.weight_len(), 0.0);
                    scratch_b.clear();
                    scratch_b.resize(g.out_c, 0.0);
                    (&mut scratch_w, &mut scratch_b)
                }
            };
            nn::conv3d_backward(
                &g,
                side,
                input,
                self.params.get(w),
                &g_post,
                if need_in { Some(&mut g_in) } else { None },
                gw,
                gb,
            )?;
            g_post = g_in;
        }
        Ok(if want_input { Some(g_post) } else { None })
    }

    /// Projects `S × C` locals to `S × out_dim`.
    pub fn project_local(&self, locals: &Mat) -> Result<(Mat, LocalHeadTrace)> {
        let [a1, a2, b] = self.layout.local.ok_or_else(|| config_err!("model has no local head"))?;
        if locals.cols != a1.n_in {
            return Err(config_err!("local head expects {} channels, got {}", a1.n_in, locals.cols));
        }
        let s = locals.rows;
        let mut hidden_pre = Mat::zeros(s, a1.n_out);
        let mut hidden = Mat::zeros(s, a1.n_out);
        let mut out = Mat::zeros(s, a2.n_out);
        for r in 0..s {
            let x = locals.row(r);
            let h = nn::linear_forward(self.params.get(a1.w), self.params.get(a1.b), x);
            let hr = Activation::Relu.apply_slice(&h);
            let ya = nn::linear_forward(self.params.get(a2.w), self.params.get(a2.b), &hr);
            let yb = nn::linear_forward(self.params.get(b.w), self.params.get(b.b), x);
            hidden_pre.row_mut(r).copy_from_slice(&h);
            hidden.row_mut(r).copy_from_slice(&hr);
            for (o, (u, v)) in out.row_mut(r).iter_mut().zip(ya.iter().zip(&yb)) {
                *o = u + v;
            }
        }
        Ok((out, LocalHeadTrace { input: locals.clone(), hidden_pre, hidden }))
    }

    /// Backward of [`Model::project_local`]; returns the gradient w.r.t.
    /// the raw locals.
    pub fn project_local_backward(&self, trace: &LocalHeadTrace, d_out: &Mat, grads: &mut Grads) -> Result<Mat> {
        let [a1, a2, b] = self.layout.local.ok_or_else(|| config_err!("model has no local head"))?;
        let s = trace.input.rows;
        let mut d_in = Mat::zeros(s, a1.n_in);
        for r in 0..s {
            let x = trace.input.row(r);
            let g = d_out.row(r);
            let (gw, gb) = two_mut(&mut grads.tensors, b.w, b.b);
            let gx_b = nn::linear_backward(self.params.get(b.w), x, g, gw, gb);
            let (gw, gb) = two_mut(&mut grads.tensors, a2.w, a2.b);
            let mut gh = nn::linear_backward(self.params.get(a2.w), trace.hidden.row(r), g, gw, gb);
            Activation::Relu.backprop(trace.hidden_pre.row(r), trace.hidden.row(r), &mut gh);
            let (gw, gb) = two_mut(&mut grads.tensors, a1.w, a1.b);
            let gx_a = nn::linear_backward(self.params.get(a1.w), x, &gh, gw, gb);
            for (o, (u, v)) in d_in.row_mut(r).iter_mut().zip(gx_a.iter().zip(&gx_b)) {
                *o = u + v;
            }
        }
        Ok(d_in)
    }

    /// Applies the global head (identity when absent).
    pub fn project_global(&self, z: &[f64]) -> Result<(Vec<f64>, GlobalHeadTrace)> {
        if z.len() != self.spec.encoder.repr_dim {
            return Err(config_err!("global head expects {} inputs, got {}", self.spec.encoder.repr_dim, z.len()));
        }
        let mut inputs = Vec::new();
        let mut pres = Vec::new();
        let mut x = z.to_vec();
        let n = self.layout.global.len();
        for (i, layer) in self.layout.global.iter().enumerate() {
            let y = nn::linear_forward(self.params.get(layer.w), self.params.get(layer.b), &x);
            inputs.push(x);
            x = if i + 1 < n { Activation::Relu.apply_slice(&y) } else { y.clone() };
            pres.push(y);
        }
        Ok((x, GlobalHeadTrace { inputs, pres }))
    }

    pub fn project_global_backward(&self, trace: &GlobalHeadTrace, d_out: &[f64], grads: &mut Grads) -> Vec<f64> {
        let mut g = d_out.to_vec();
        let n = self.layout.global.len();
        for i in (0..n).rev() {
            let layer = self.layout.global[i];
            if i + 1 < n {
                let post = Activation::Relu.apply_slice(&trace.pres[i]);
                Activation::Relu.backprop(&trace.pres[i], &post, &mut g);
            }
            let (gw, gb) = two_mut(&mut grads.tensors, layer.w, layer.b);
            g = nn::linear_backward(self.params.get(layer.w), &trace.inputs[i], &g, gw, gb);
        }
        g
    }

    /// Decoder pass from a representation to a volume in `(0, 1)`.
    pub fn decode_trace(&self, z: &[f64]) -> Result<(Volume, DecoderTrace)> {
        let fc = self.layout.dec_fc.ok_or_else(|| config_err!("model has no decoder"))?;
        if z.len() != fc.n_in {
            return Err(shape_err!("decoder expects {} inputs, got {}", fc.n_in, z.len()));
        }
        let enc = &self.spec.encoder;
        let nl = enc.n_layers();
        let h = nn::linear_forward(self.params.get(fc.w), self.params.get(fc.b), z);
        let mut post = vec![Activation::Relu.apply_slice(&h)];
        let mut pre = vec![h];
        let mut side = enc.stage_side(nl);
        for (j, &(w, b)) in self.layout.deconvs.iter().enumerate() {
            let g = self.deconv_geom(j);
            let (p, m) = nn::conv_transpose3d_forward(&g, side, post.last().unwrap(), self.params.get(w), self.params.get(b))?;
            side = m;
            let act = if j + 1 == nl { Activation::Sigmoid } else { Activation::Relu };
            post.push(act.apply_slice(&p));
            pre.push(p);
        }
        let vol = Volume::from_vec([side; 3], post.last().unwrap().clone())?;
        Ok((vol, DecoderTrace { z: z.to_vec(), pre, post }))
    }

    pub fn decode(&self, z: &[f64]) -> Result<Volume> {
        Ok(self.decode_trace(z)?.0)
    }

    fn deconv_geom(&self, j: usize) -> ConvGeom {
        let enc = &self.spec.encoder;
        let nl = enc.n_layers();
        let in_c = enc.channels[nl - 1 - j];
        let out_c = if j + 1 == nl { 1 } else { enc.channels[nl - 2 - j] };
        ConvGeom { in_c, out_c, kernel: KERNEL, stride: STRIDE, pad: PAD }
    }

    /// Backward of the decoder given the gradient w.r.t. the output volume;
    /// returns the gradient w.r.t. `z`.
    pub fn decode_backward(&self, trace: &DecoderTrace, d_out: &[f64], grads: &mut Grads) -> Result<Vec<f64>> {
        let fc = self.layout.dec_fc.ok_or_else(|| config_err!("model has no decoder"))?;
        let enc = &self.spec.encoder;
        let nl = enc.n_layers();
        let mut g = d_out.to_vec();
        for j in (0..nl).rev() {
            let act = if j + 1 == nl { Activation::Sigmoid } else { Activation::Relu };
            act.backprop(&trace.pre[j + 1], &trace.post[j + 1], &mut g);
            let geom = self.deconv_geom(j);
            let side = enc.stage_side(nl - j);
            let (w, b) = self.layout.deconvs[j];
            let mut g_in = vec![0.0; trace.post[j].len()];
            let (gw, gb) = two_mut(&mut grads.tensors, w, b);
            nn::conv_transpose3d_backward(&geom, side, &trace.post[j], self.params.get(w), &g, Some(&mut g_in), gw, gb)?;
            g = g_in;
        }
        Activation::Relu.backprop(&trace.pre[0], &trace.post[0], &mut g);
        let (gw, gb) = two_mut(&mut grads.tensors, fc.w, fc.b);
        Ok(nn::linear_backward(self.params.get(fc.w), &trace.z, &g, gw, gb))
    }

    /// Class logits from a representation.
    pub fn classify(&self, z: &[f64]) -> Result<Vec<f64>> {
        let c = self.layout.classifier.ok_or_else(|| config_err!("model has no classifier"))?;
        Ok(nn::linear_forward(self.params.get(c.w), self.params.get(c.b), z))
    }

    pub fn classify_backward(&self, z: &[f64], d_logits: &[f64], grads: &mut Grads) -> Result<Vec<f64>> {
        let c = self.layout.classifier.ok_or_else(|| config_err!("model has no classifier"))?;
        let (gw, gb) = two_mut(&mut grads.tensors, c.w, c.b);
        Ok(nn::linear_backward(self.params.get(c.w), z, d_logits, gw, gb))
    }
}

fn two_mut(t: &mut [Vec<f64>], a: usize, b: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert!(a < b);
    let (lo, hi) = t.split_at_mut(b);
    (&mut lo[a], &mut hi[0])
}

fn dense_grad_bufs<'a>(
    grads: &'a mut Option<&mut Grads>,
    layer: Dense,
    scratch_w: &'a mut Vec<f64>,
    scratch_b: &'a mut Vec<f64>,
) -> (&'a mut [f64], &'a mut [f64]) {
    match grads {
        Some(g) => two_mut(&mut g.tensors, layer.w, layer.b),
        None => {
            scratch_w.clear();
            scratch_w.resize(layer.n_in * layer.n_out, 0.0);
            scratch_b.clear();
            scratch_b.resize(layer.n_out, 0.0);
            (scratch_w.as_mut_slice(), scratch_b.as_mut_slice())
        }
    }
}

/// Human-readable one-line summary of a spec, used in logs.
pub fn describe(spec: &ModelSpec) -> String {
    format!(
        "side={} channels={:?} l={} d={} local_head={} global_head={:?} decoder={} classes={:?}",
        spec.encoder.input_side,
        spec.encoder.channels,
        spec.encoder.local_layer,
        spec.encoder.repr_dim,
        spec.local_head.is_some(),
        spec.global_head,
        spec.decoder,
        spec.classes
    )
}
