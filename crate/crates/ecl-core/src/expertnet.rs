//! Expert networks.
//!
//! Each expert is a tanh MLP encoder with three heads on the shared feature:
//! a classification head, a reference head of identical shape but independent
//! parameters, and a two-layer contrastive projection whose output is
//! L2-normalized. A momentum twin shadows the encoder and contrastive head to
//! produce keys, and a fixed-capacity FIFO queue stores historical keys as
//! negatives.
//!
//! Forward passes cache activations so gradients can be pushed back by hand;
//! there is no autodiff tape. Batches are row-major `N x dim` arrays.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::error::{EclError, Result};
use crate::rng::{rng_from, stream};

/// A dense layer `y = x W^T + b` with weights stored `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

/// Gradients (or any tensor set) shaped like a [`Linear`].
#[derive(Debug, Clone, PartialEq)]
pub struct LinearGrads {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    /// Glorot-uniform weights, zero biases.
    pub fn new_seeded(in_dim: usize, out_dim: usize, rng: &mut ChaCha12Rng) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let w = Array2::from_shape_fn((out_dim, in_dim), |_| {
            (2.0 * rng.random::<f64>() - 1.0) * limit
        });
        Self { w, b: Array1::zeros(out_dim) }
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self { w: Array2::zeros((out_dim, in_dim)), b: Array1::zeros(out_dim) }
    }

    pub fn in_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn forward(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.w.t()) + &self.b
    }

    /// Backward pass: returns parameter gradients and the gradient with
    /// respect to the layer input.
    pub fn backward(
        &self,
        x: &ArrayView2<f64>,
        g_out: &ArrayView2<f64>,
    ) -> (LinearGrads, Array2<f64>) {
        let gw = g_out.t().dot(x);
        let gb = g_out.sum_axis(Axis(0));
        let gx = g_out.dot(&self.w);
        (LinearGrads { w: gw, b: gb }, gx)
    }

    fn grads_zeros(&self) -> LinearGrads {
        LinearGrads { w: Array2::zeros(self.w.dim()), b: Array1::zeros(self.b.dim()) }
    }
}

/// Stack of dense layers with tanh after every layer; the output of the last
/// tanh is the feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub layers: Vec<Linear>,
}

/// Per-layer activations retained for the backward pass.
#[derive(Debug, Clone)]
pub struct EncoderCache {
    /// Input batch followed by each layer's post-tanh output.
    activations: Vec<Array2<f64>>,
}

impl Encoder {
    pub fn new_seeded(input_dim: usize, widths: &[usize], rng: &mut ChaCha12Rng) -> Self {
        let mut layers = Vec::with_capacity(widths.len());
        let mut in_dim = input_dim;
        for &w in widths {
            layers.push(Linear::new_seeded(in_dim, w, rng));
            in_dim = w;
        }
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("encoder has layers").out_dim()
    }

    pub fn forward(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        let mut h = x.to_owned();
        for layer in &self.layers {
            h = layer.forward(&h.view());
            h.mapv_inplace(f64::tanh);
        }
        h
    }

    pub fn forward_cached(&self, x: &ArrayView2<f64>) -> (Array2<f64>, EncoderCache) {
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(x.to_owned());
        for layer in &self.layers {
            let mut h = layer.forward(&activations.last().unwrap().view());
            h.mapv_inplace(f64::tanh);
            activations.push(h);
        }
        let out = activations.last().unwrap().clone();
        (out, EncoderCache { activations })
    }

    /// Backpropagates `g_out` (gradient on the feature) through every layer.
    pub fn backward(
        &self,
        cache: &EncoderCache,
        g_out: &ArrayView2<f64>,
    ) -> (Vec<LinearGrads>, Array2<f64>) {
        let mut grads: Vec<LinearGrads> = self.layers.iter().map(Linear::grads_zeros).collect();
        let mut g = g_out.to_owned();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let post = &cache.activations[l + 1];
            // d tanh(u)/du = 1 - tanh(u)^2
            g.zip_mut_with(post, |gv, &y| *gv *= 1.0 - y * y);
            let (lg, gx) = layer.backward(&cache.activations[l].view(), &g.view());
            grads[l] = lg;
            g = gx;
        }
        (grads, g)
    }
}

/// Normalizes a nonzero vector to unit L2 norm.
pub fn normalize_embed(v: &ArrayView1<f64>) -> Result<Array1<f64>> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(EclError::Numerical("non-finite embedding".into()));
    }
    let norm = v.dot(v).sqrt();
    if !norm.is_finite() {
        return Err(EclError::Numerical("embedding norm overflow".into()));
    }
    if !(norm > 0.0) {
        return Err(EclError::DegenerateEmbedding);
    }
    Ok(v.mapv(|x| x / norm))
}

/// Two-layer projection `v -> tanh(W1 v) -> W2 -> normalize`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConHead {
    pub lin1: Linear,
    pub lin2: Linear,
}

#[derive(Debug, Clone)]
pub struct ConCache {
    input: Array2<f64>,
    hidden: Array2<f64>,
    embed: Array2<f64>,
    norms: Vec<f64>,
}

impl ConHead {
    pub fn new_seeded(feature_dim: usize, embed_dim: usize, rng: &mut ChaCha12Rng) -> Self {
        Self {
            lin1: Linear::new_seeded(feature_dim, feature_dim, rng),
            lin2: Linear::new_seeded(feature_dim, embed_dim, rng),
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.lin2.out_dim()
    }

    pub fn forward(&self, v: &ArrayView2<f64>) -> Result<Array2<f64>> {
        self.forward_cached(v).map(|(e, _)| e)
    }

    pub fn forward_cached(&self, v: &ArrayView2<f64>) -> Result<(Array2<f64>, ConCache)> {
        let mut hidden = self.lin1.forward(v);
        hidden.mapv_inplace(f64::tanh);
        let raw = self.lin2.forward(&hidden.view());
        let mut embed = raw.clone();
        let mut norms = Vec::with_capacity(raw.nrows());
        for mut row in embed.rows_mut() {
            let unit = normalize_embed(&row.view())?;
            norms.push(row.dot(&row).sqrt());
            row.assign(&unit);
        }
        let cache = ConCache { input: v.to_owned(), hidden, embed: embed.clone(), norms };
        Ok((embed, cache))
    }

    /// Backward through normalize, lin2, tanh, lin1; returns the two layer
    /// gradients and the gradient on the feature input.
    pub fn backward(
        &self,
        cache: &ConCache,
        g_embed: &ArrayView2<f64>,
    ) -> (LinearGrads, LinearGrads, Array2<f64>) {
        // d(u/|u|) pulls the component along e out of the upstream gradient.
        let mut g_raw = g_embed.to_owned();
        for (i, mut row) in g_raw.rows_mut().into_iter().enumerate() {
            let e = cache.embed.row(i);
            let along = e.dot(&row);
            for (g, &ev) in row.iter_mut().zip(e) {
                *g = (*g - ev * along) / cache.norms[i];
            }
        }
        let (g2, g_hidden_post) = self.lin2.backward(&cache.hidden.view(), &g_raw.view());
        let mut g_hidden = g_hidden_post;
        g_hidden.zip_mut_with(&cache.hidden, |gv, &y| *gv *= 1.0 - y * y);
        let (g1, g_input) = self.lin1.backward(&cache.input.view(), &g_hidden.view());
        (g1, g2, g_input)
    }
}

/// Architecture of one expert.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertArch {
    pub input_dim: usize,
    pub encoder_widths: Vec<usize>,
    pub num_classes: usize,
    pub embed_dim: usize,
}

impl ExpertArch {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim < 1
            || self.num_classes < 2
            || self.embed_dim < 1
            || self.encoder_widths.is_empty()
            || self.encoder_widths.iter().any(|&w| w == 0)
        {
            return Err(EclError::InvalidInput("invalid expert architecture".into()));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        *self.encoder_widths.last().expect("non-empty widths")
    }
}

impl Default for ExpertArch {
    fn default() -> Self {
        Self { input_dim: 16, encoder_widths: vec![64, 64], num_classes: 10, embed_dim: 32 }
    }
}

/// One expert: encoder plus classification, reference, and contrastive heads.
#[derive(Debug, Clone, PartialEq)]
pub struct Expert {
    pub encoder: Encoder,
    pub cls_head: Linear,
    pub ref_head: Linear,
    pub con_head: ConHead,
    pub expert_id: usize,
}

/// Forward results for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertOutputs {
    pub v: Array2<f64>,
    pub z_cls: Array2<f64>,
    pub z_ref: Array2<f64>,
    pub e: Array2<f64>,
}

/// Activations retained by [`Expert::forward_cached`].
#[derive(Debug, Clone)]
pub struct ExpertCache {
    encoder: EncoderCache,
    feature: Array2<f64>,
    con: ConCache,
}

/// Upstream gradients feeding [`Expert::backward`]; absent entries contribute
/// nothing.
#[derive(Debug, Clone, Default)]
pub struct ExpertUpstream {
    pub d_v: Option<Array2<f64>>,
    pub d_z_cls: Option<Array2<f64>>,
    pub d_z_ref: Option<Array2<f64>>,
    pub d_embed: Option<Array2<f64>>,
}

/// Parameter gradients shaped exactly like an [`Expert`]; also used as the
/// optimizer's velocity buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertGrads {
    pub encoder: Vec<LinearGrads>,
    pub cls: LinearGrads,
    pub ref_head: LinearGrads,
    pub con1: LinearGrads,
    pub con2: LinearGrads,
}

impl ExpertGrads {
    pub fn zeros_like(expert: &Expert) -> Self {
        Self {
            encoder: expert.encoder.layers.iter().map(Linear::grads_zeros).collect(),
            cls: expert.cls_head.grads_zeros(),
            ref_head: expert.ref_head.grads_zeros(),
            con1: expert.con_head.lin1.grads_zeros(),
            con2: expert.con_head.lin2.grads_zeros(),
        }
    }

    /// Flat tensor slices in the fixed parameter order.
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for g in &self.encoder {
            out.push(g.w.as_slice().unwrap());
            out.push(g.b.as_slice().unwrap());
        }
        for g in [&self.cls, &self.ref_head, &self.con1, &self.con2] {
            out.push(g.w.as_slice().unwrap());
            out.push(g.b.as_slice().unwrap());
        }
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for g in &mut self.encoder {
            out.push(g.w.as_slice_mut().unwrap());
            out.push(g.b.as_slice_mut().unwrap());
        }
        for g in [&mut self.cls, &mut self.ref_head, &mut self.con1, &mut self.con2] {
            out.push(g.w.as_slice_mut().unwrap());
            out.push(g.b.as_slice_mut().unwrap());
        }
        out
    }
}

impl Expert {
    /// Deterministic initialization for expert `expert_id` under `root_seed`.
    pub fn new_seeded(arch: &ExpertArch, expert_id: usize, root_seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = rng_from(&[root_seed, stream::EXPERT_INIT, expert_id as u64]);
        let encoder = Encoder::new_seeded(arch.input_dim, &arch.encoder_widths, &mut rng);
        let d = arch.feature_dim();
        Ok(Self {
            cls_head: Linear::new_seeded(d, arch.num_classes, &mut rng),
            ref_head: Linear::new_seeded(d, arch.num_classes, &mut rng),
            con_head: ConHead::new_seeded(d, arch.embed_dim, &mut rng),
            encoder,
            expert_id,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.encoder.output_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.cls_head.out_dim()
    }

    pub fn embed_dim(&self) -> usize {
        self.con_head.embed_dim()
    }

    pub fn forward(&self, x: &ArrayView2<f64>) -> Result<ExpertOutputs> {
        self.forward_cached(x).map(|(out, _)| out)
    }

    pub fn forward_cached(&self, x: &ArrayView2<f64>) -> Result<(ExpertOutputs, ExpertCache)> {
        if x.ncols() != self.input_dim() {
            return Err(EclError::InvalidInput(format!(
                "expected input dim {}, got {}",
                self.input_dim(),
                x.ncols()
            )));
        }
        let (v, encoder_cache) = self.encoder.forward_cached(x);
        let z_cls = self.cls_head.forward(&v.view());
        let z_ref = self.ref_head.forward(&v.view());
        let (e, con_cache) = self.con_head.forward_cached(&v.view())?;
        let outputs = ExpertOutputs { v: v.clone(), z_cls, z_ref, e };
        for m in [&outputs.v, &outputs.z_cls, &outputs.z_ref] {
            if m.iter().any(|x| !x.is_finite()) {
                return Err(EclError::Numerical("non-finite expert outputs".into()));
            }
        }
        Ok((outputs, ExpertCache { encoder: encoder_cache, feature: v, con: con_cache }))
    }

    /// Accumulates parameter gradients from the given upstream gradients.
    pub fn backward(&self, cache: &ExpertCache, upstream: &ExpertUpstream) -> ExpertGrads {
        let n = cache.feature.nrows();
        let d = self.feature_dim();
        let mut grads = ExpertGrads::zeros_like(self);
        let mut g_v = Array2::<f64>::zeros((n, d));
        if let Some(g) = &upstream.d_z_cls {
            let (gl, gx) = self.cls_head.backward(&cache.feature.view(), &g.view());
            grads.cls = gl;
            g_v += &gx;
        }
        if let Some(g) = &upstream.d_z_ref {
            let (gl, gx) = self.ref_head.backward(&cache.feature.view(), &g.view());
            grads.ref_head = gl;
            g_v += &gx;
        }
        if let Some(g) = &upstream.d_embed {
            let (g1, g2, gx) = self.con_head.backward(&cache.con, &g.view());
            grads.con1 = g1;
            grads.con2 = g2;
            g_v += &gx;
        }
        if let Some(g) = &upstream.d_v {
            g_v += g;
        }
        let (enc_grads, _) = self.encoder.backward(&cache.encoder, &g_v.view());
        grads.encoder = enc_grads;
        grads
    }

    /// Flat tensor slices in the fixed parameter order (matching
    /// [`ExpertGrads::slices`]).
    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for lin in &self.encoder.layers {
            out.push(lin.w.as_slice().unwrap());
            out.push(lin.b.as_slice().unwrap());
        }
        for lin in [&self.cls_head, &self.ref_head, &self.con_head.lin1, &self.con_head.lin2] {
            out.push(lin.w.as_slice().unwrap());
            out.push(lin.b.as_slice().unwrap());
        }
        out
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for lin in &mut self.encoder.layers {
            out.push(lin.w.as_slice_mut().unwrap());
            out.push(lin.b.as_slice_mut().unwrap());
        }
        for lin in [
            &mut self.cls_head,
            &mut self.ref_head,
            &mut self.con_head.lin1,
            &mut self.con_head.lin2,
        ] {
            out.push(lin.w.as_slice_mut().unwrap());
            out.push(lin.b.as_slice_mut().unwrap());
        }
        out
    }

    /// Slices of the momentum-shadowed subset (encoder + contrastive head).
    pub fn momentum_source_slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for lin in &self.encoder.layers {
            out.push(lin.w.as_slice().unwrap());
            out.push(lin.b.as_slice().unwrap());
        }
        for lin in [&self.con_head.lin1, &self.con_head.lin2] {
            out.push(lin.w.as_slice().unwrap());
            out.push(lin.b.as_slice().unwrap());
        }
        out
    }
}

/// Gradient-free shadow of an expert's encoder and contrastive head, updated
/// as an exponential moving average of the online parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumTwin {
    pub encoder: Encoder,
    pub con_head: ConHead,
    pub momentum: f64,
}

impl MomentumTwin {
    /// Twin starting as an exact copy of the online parameters.
    pub fn from_expert(expert: &Expert, momentum: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(EclError::InvalidInput("momentum must lie in [0, 1)".into()));
        }
        Ok(Self {
            encoder: expert.encoder.clone(),
            con_head: expert.con_head.clone(),
            momentum,
        })
    }

    /// Key embeddings for a batch: the twin's normalized contrastive output.
    pub fn forward_keys(&self, x: &ArrayView2<f64>) -> Result<Array2<f64>> {
        let v = self.encoder.forward(x);
        self.con_head.forward(&v.view())
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for lin in &mut self.encoder.layers {
            out.push(lin.w.as_slice_mut().unwrap());
            out.push(lin.b.as_slice_mut().unwrap());
        }
        for lin in [&mut self.con_head.lin1, &mut self.con_head.lin2] {
            out.push(lin.w.as_slice_mut().unwrap());
            out.push(lin.b.as_slice_mut().unwrap());
        }
        out
    }
}

/// Moving-average update `shadow <- m * shadow + (1 - m) * online` over the
/// twin's parameters. The online expert is never modified.
pub fn momentum_update(twin: &mut MomentumTwin, online: &Expert, m: f64) -> Result<()> {
    if !(0.0..1.0).contains(&m) {
        return Err(EclError::InvalidInput("momentum must lie in [0, 1)".into()));
    }
    let source = online.momentum_source_slices();
    let mut target = twin.param_slices_mut();
    if source.len() != target.len()
        || source.iter().zip(&target).any(|(s, t)| s.len() != t.len())
    {
        return Err(EclError::InvalidInput(
            "twin and online parameter shapes differ".into(),
        ));
    }
    for (t, s) in target.iter_mut().zip(source) {
        for (tv, &sv) in t.iter_mut().zip(s) {
            *tv = m * *tv + (1.0 - m) * sv;
        }
    }
    Ok(())
}

/// Fixed-capacity FIFO ring buffer of unit-norm embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct QueueState {
    buffer: Array2<f64>,
    write_cursor: usize,
}

impl QueueState {
    /// Queue pre-filled with seeded random unit vectors so the contrastive
    /// loss is well-defined from the first step.
    pub fn new_seeded(capacity: usize, dim: usize, seed: u64) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(EclError::InvalidInput("queue capacity and dim must be positive".into()));
        }
        let mut rng = rng_from(&[seed, stream::QUEUE_INIT]);
        let mut buffer = Array2::<f64>::zeros((capacity, dim));
        for mut row in buffer.rows_mut() {
            loop {
                for x in row.iter_mut() {
                    *x = rng.sample(StandardNormal);
                }
                if let Ok(unit) = normalize_embed(&row.view()) {
                    row.assign(&unit);
                    break;
                }
            }
        }
        Ok(Self { buffer, write_cursor: 0 })
    }

    pub fn from_parts(buffer: Array2<f64>, write_cursor: usize) -> Result<Self> {
        let capacity = buffer.nrows();
        if capacity == 0 || write_cursor >= capacity {
            return Err(EclError::InvalidInput("invalid queue buffer or cursor".into()));
        }
        Ok(Self { buffer, write_cursor })
    }

    pub fn capacity(&self) -> usize {
        self.buffer.nrows()
    }

    pub fn dim(&self) -> usize {
        self.buffer.ncols()
    }

    pub fn cursor(&self) -> usize {
        self.write_cursor
    }

    pub fn rows(&self) -> ArrayView2<'_, f64> {
        self.buffer.view()
    }

    /// Writes a batch at the cursor with wraparound; the oldest rows are
    /// overwritten first.
    pub fn push(&mut self, embeddings: &ArrayView2<f64>) -> Result<()> {
        let n = embeddings.nrows();
        if n > self.capacity() {
            return Err(EclError::InvalidInput(format!(
                "batch of {n} exceeds queue capacity {}",
                self.capacity()
            )));
        }
        if embeddings.ncols() != self.dim() {
            return Err(EclError::InvalidInput("embedding dim mismatch".into()));
        }
        for row in embeddings.rows() {
            let norm = row.dot(&row).sqrt();
            if !norm.is_finite() || (norm - 1.0).abs() > 1e-6 {
                return Err(EclError::InvalidInput(format!(
                    "queue rows must be unit-norm, got |v| = {norm}"
                )));
            }
        }
        for row in embeddings.rows() {
            self.buffer.row_mut(self.write_cursor).assign(&row);
            self.write_cursor = (self.write_cursor + 1) % self.capacity();
        }
        Ok(())
    }
}
