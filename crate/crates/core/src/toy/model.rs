//! Encoder, CTC head and attention decoder with exact gradients.
//!
//! Encoder: `subsample` raw frames are stacked into one encoder frame and
//! `context` neighbours on each side are concatenated, then an affine map
//! plus sinusoidal position code goes through `tanh`, followed by one
//! residual single-head self-attention layer.
//!
//! Decoder: a GRU over the previous token embedding and the previous
//! attentional output, a cross-attention whose score is a scaled dot product
//! plus a learned convolution of the previous step's weights, and a `tanh`
//! combination of state and context feeding the output projection.

use std::collections::BTreeMap;
use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::linalg::{argmax, axpy, dot, matvec_add, matvec_t_add, outer_add, sigmoid, softmax_backward, softmax_in_place};
use super::task::SyntheticTask;
use super::{symbol_token, Result, ToyError};
use crate::codec::{deserialize, DecodeMode, StreamItem, TogglStream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelDims {
    pub hidden: usize,
    pub embed: usize,
    /// Raw frames stacked per encoder frame.
    pub subsample: usize,
    /// Stacked neighbours on each side fed to the per-frame transform.
    pub context: usize,
    /// Half width of the location term in the cross-attention score.
    pub location_width: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            hidden: 32,
            embed: 32,
            subsample: 3,
            context: 1,
            location_width: 3,
        }
    }
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.embed == 0 || self.subsample == 0 {
            return Err(ToyError::Config("hidden, embed and subsample must be positive".into()));
        }
        Ok(())
    }
}

/// Parameter tensors in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum P {
    EncInW,
    EncInB,
    AttQ,
    AttK,
    AttV,
    AttO,
    CtcW,
    CtcB,
    Emb,
    GruW,
    GruU,
    GruB,
    DecQ,
    LocW,
    CombW,
    CombB,
    OutW,
    OutB,
}

const ALL: [P; 18] = [
    P::EncInW,
    P::EncInB,
    P::AttQ,
    P::AttK,
    P::AttV,
    P::AttO,
    P::CtcW,
    P::CtcB,
    P::Emb,
    P::GruW,
    P::GruU,
    P::GruB,
    P::DecQ,
    P::LocW,
    P::CombW,
    P::CombB,
    P::OutW,
    P::OutB,
];

impl P {
    pub fn name(self) -> &'static str {
        match self {
            P::EncInW => "encoder.input.weight",
            P::EncInB => "encoder.input.bias",
            P::AttQ => "encoder.attention.query",
            P::AttK => "encoder.attention.key",
            P::AttV => "encoder.attention.value",
            P::AttO => "encoder.attention.output",
            P::CtcW => "ctc.weight",
            P::CtcB => "ctc.bias",
            P::Emb => "decoder.embedding",
            P::GruW => "decoder.gru.input",
            P::GruU => "decoder.gru.recurrent",
            P::GruB => "decoder.gru.bias",
            P::DecQ => "decoder.attention.query",
            P::LocW => "decoder.attention.location",
            P::CombW => "decoder.combine.weight",
            P::CombB => "decoder.combine.bias",
            P::OutW => "decoder.output.weight",
            P::OutB => "decoder.output.bias",
        }
    }
}

/// Shapes and storage ranges of every tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    shapes: Vec<[usize; 2]>,
    ranges: Vec<Range<usize>>,
}

impl Layout {
    fn new(dims: &ModelDims, vocab: usize, feature_dim: usize) -> Self {
        let h = dims.hidden;
        let e = dims.embed;
        let din = (2 * dims.context + 1) * dims.subsample * feature_dim;
        let shapes: Vec<[usize; 2]> = ALL
            .iter()
            .map(|p| match p {
                P::EncInW => [h, din],
                P::EncInB => [h, 1],
                P::AttQ | P::AttK | P::AttV | P::AttO | P::DecQ => [h, h],
                P::CtcW => [vocab + 1, h],
                P::CtcB => [vocab + 1, 1],
                P::Emb => [vocab + 4, e],
                P::GruW => [3 * h, e + h],
                P::GruU => [3 * h, h],
                P::GruB => [3 * h, 1],
                P::LocW => [2 * dims.location_width + 1, 1],
                P::CombW => [h, 2 * h],
                P::CombB => [h, 1],
                P::OutW => [vocab + 4, h],
                P::OutB => [vocab + 4, 1],
            })
            .collect();
        let mut ranges = Vec::with_capacity(shapes.len());
        let mut at = 0;
        for [r, c] in &shapes {
            ranges.push(at..at + r * c);
            at += r * c;
        }
        Self { shapes, ranges }
    }

    pub fn len(&self) -> usize {
        self.ranges.last().map_or(0, |r| r.end)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self, p: P) -> Range<usize> {
        self.ranges[p as usize].clone()
    }

    /// `(name, shape, range)` for every tensor in storage order.
    pub fn tensors(&self) -> impl Iterator<Item = (&'static str, [usize; 2], Range<usize>)> + '_ {
        ALL.iter().map(|&p| (p.name(), self.shapes[p as usize], self.range(p)))
    }
}

/// All weights as one flat vector plus the layout that names them.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModelParams {
    pub dims: ModelDims,
    pub vocab: usize,
    pub feature_dim: usize,
    layout: Layout,
    pub data: Vec<f64>,
}

/// Decoder class ids beyond the lexical symbols.
#[derive(Debug, Clone, Copy)]
pub struct Specials {
    pub next: usize,
    pub prev: usize,
    pub bos: usize,
    pub eos: usize,
}

impl ToyModelParams {
    /// Weights drawn from `N(0, 1/fan_in)`, biases zero.
    pub fn init(dims: &ModelDims, task: &SyntheticTask, seed: u64) -> Result<Self> {
        dims.validate()?;
        let layout = Layout::new(dims, task.vocab_size, task.feature_dim);
        let mut data = vec![0.0; layout.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for &p in &ALL {
            let [_, cols] = layout.shapes[p as usize];
            if cols == 1 || p == P::LocW {
                continue;
            }
            let normal = Normal::new(0.0, 1.0 / (cols as f64).sqrt()).expect("positive std");
            for x in &mut data[layout.range(p)] {
                *x = normal.sample(&mut rng);
            }
        }
        Ok(Self {
            dims: dims.clone(),
            vocab: task.vocab_size,
            feature_dim: task.feature_dim,
            layout,
            data,
        })
    }

    /// Rebuilds parameters from stored values, checking the length.
    pub fn from_data(dims: &ModelDims, vocab: usize, feature_dim: usize, data: Vec<f64>) -> Result<Self> {
        dims.validate()?;
        let layout = Layout::new(dims, vocab, feature_dim);
        if data.len() != layout.len() {
            return Err(ToyError::Shape(format!("expected {} values, got {}", layout.len(), data.len())));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(ToyError::Shape("non-finite parameter".into()));
        }
        Ok(Self {
            dims: dims.clone(),
            vocab,
            feature_dim,
            layout,
            data,
        })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn zeros_like(&self) -> Vec<f64> {
        vec![0.0; self.data.len()]
    }

    fn t(&self, p: P) -> &[f64] {
        &self.data[self.layout.range(p)]
    }

    pub fn specials(&self) -> Specials {
        Specials {
            next: self.vocab,
            prev: self.vocab + 1,
            bos: self.vocab + 2,
            eos: self.vocab + 3,
        }
    }

    /// Decoder output classes: symbols plus NEXT, PREV, BOS, EOS.
    pub fn decoder_classes(&self) -> usize {
        self.vocab + 4
    }

    /// CTC classes: blank plus symbols.
    pub fn ctc_classes(&self) -> usize {
        self.vocab + 1
    }

    fn hidden(&self) -> usize {
        self.dims.hidden
    }

    /// Number of encoder frames for `raw` input frames.
    pub fn encoder_frames(&self, raw: usize) -> usize {
        raw.div_ceil(self.dims.subsample)
    }
}

fn position_code(t: usize, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|i| {
            let rate = 10_000f64.powf((i - i % 2) as f64 / dim as f64);
            let angle = t as f64 / rate;
            if i % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

/// Encoder activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct EncoderCache {
    inputs: Vec<Vec<f64>>,
    h: Vec<Vec<f64>>,
    q: Vec<Vec<f64>>,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    attn: Vec<Vec<f64>>,
    ctx: Vec<Vec<f64>>,
    /// Encoder output, one row per encoder frame.
    pub out: Vec<Vec<f64>>,
}

impl EncoderCache {
    pub fn frames(&self) -> usize {
        self.out.len()
    }
}

/// One decoder step's activations.
#[derive(Debug, Clone)]
struct Step {
    prev_token: usize,
    x: Vec<f64>,
    s_prev: Vec<f64>,
    r: Vec<f64>,
    z: Vec<f64>,
    n: Vec<f64>,
    rs: Vec<f64>,
    s: Vec<f64>,
    q: Vec<f64>,
    alpha_prev: Vec<f64>,
    alpha: Vec<f64>,
    sc: Vec<f64>,
    o: Vec<f64>,
    probs: Vec<f64>,
}

/// Decoder activations for a teacher-forced target.
#[derive(Debug, Clone)]
pub struct DecoderCache {
    steps: Vec<Step>,
    targets: Vec<usize>,
    /// Mean token cross-entropy.
    pub loss: f64,
}

fn initial_alpha(frames: usize) -> Vec<f64> {
    let mut a = vec![0.0; frames];
    a[0] = 1.0;
    a
}

impl ToyModelParams {
    pub fn encode(&self, frames: &[Vec<f64>]) -> Result<EncoderCache> {
        if frames.is_empty() {
            return Err(ToyError::Shape("no input frames".into()));
        }
        if let Some(f) = frames.iter().find(|f| f.len() != self.feature_dim) {
            return Err(ToyError::Shape(format!("frame width {} != {}", f.len(), self.feature_dim)));
        }
        let s = self.dims.subsample;
        let c = self.dims.context as isize;
        let hd = self.hidden();
        let t_len = self.encoder_frames(frames.len());
        let stacked: Vec<Vec<f64>> = (0..t_len)
            .map(|t| {
                (0..s)
                    .flat_map(|i| match frames.get(t * s + i) {
                        Some(f) => f.clone(),
                        None => vec![0.0; self.feature_dim],
                    })
                    .collect()
            })
            .collect();
        let width = s * self.feature_dim;
        let inputs: Vec<Vec<f64>> = (0..t_len as isize)
            .map(|t| {
                (-c..=c)
                    .flat_map(|d| {
                        let u = t + d;
                        if u >= 0 && (u as usize) < t_len {
                            stacked[u as usize].clone()
                        } else {
                            vec![0.0; width]
                        }
                    })
                    .collect()
            })
            .collect();

        let h: Vec<Vec<f64>> = inputs
            .iter()
            .enumerate()
            .map(|(t, x)| {
                let mut pre = self.t(P::EncInB).to_vec();
                matvec_add(self.t(P::EncInW), x, &mut pre);
                pre.iter().zip(position_code(t, hd)).map(|(a, b)| (a + b).tanh()).collect()
            })
            .collect();
        let project = |p: P| -> Vec<Vec<f64>> {
            h.iter()
                .map(|x| {
                    let mut y = vec![0.0; hd];
                    matvec_add(self.t(p), x, &mut y);
                    y
                })
                .collect()
        };
        let q = project(P::AttQ);
        let k = project(P::AttK);
        let v = project(P::AttV);
        let scale = 1.0 / (hd as f64).sqrt();
        let attn: Vec<Vec<f64>> = q
            .iter()
            .map(|qt| {
                let mut row: Vec<f64> = k.iter().map(|ku| scale * dot(qt, ku)).collect();
                softmax_in_place(&mut row);
                row
            })
            .collect();
        let ctx: Vec<Vec<f64>> = attn
            .iter()
            .map(|row| {
                let mut c = vec![0.0; hd];
                for (a, vu) in row.iter().zip(&v) {
                    axpy(*a, vu, &mut c);
                }
                c
            })
            .collect();
        let out = h
            .iter()
            .zip(&ctx)
            .map(|(ht, ct)| {
                let mut e = ht.clone();
                matvec_add(self.t(P::AttO), ct, &mut e);
                e
            })
            .collect();
        Ok(EncoderCache {
            inputs,
            h,
            q,
            k,
            v,
            attn,
            ctx,
            out,
        })
    }

    /// Accumulates parameter gradients given `d_out`, the gradient with
    /// respect to the encoder output.
    pub fn encode_backward(&self, cache: &EncoderCache, d_out: &[Vec<f64>], grad: &mut [f64]) {
        let hd = self.hidden();
        let t_len = cache.frames();
        let scale = 1.0 / (hd as f64).sqrt();
        let mut dh: Vec<Vec<f64>> = d_out.to_vec();
        let mut dq = vec![vec![0.0; hd]; t_len];
        let mut dk = vec![vec![0.0; hd]; t_len];
        let mut dv = vec![vec![0.0; hd]; t_len];
        for t in 0..t_len {
            outer_add(&mut grad[self.layout.range(P::AttO)], &d_out[t], &cache.ctx[t]);
            let mut dctx = vec![0.0; hd];
            matvec_t_add(self.t(P::AttO), &d_out[t], &mut dctx);
            let da: Vec<f64> = cache.v.iter().map(|vu| dot(&dctx, vu)).collect();
            for (u, a) in cache.attn[t].iter().enumerate() {
                axpy(*a, &dctx, &mut dv[u]);
            }
            let ds = softmax_backward(&cache.attn[t], &da);
            for (u, g) in ds.iter().enumerate() {
                axpy(scale * g, &cache.k[u], &mut dq[t]);
                axpy(scale * g, &cache.q[t], &mut dk[u]);
            }
        }
        for (p, d) in [(P::AttQ, &dq), (P::AttK, &dk), (P::AttV, &dv)] {
            for ((dt, h), dh_t) in d.iter().zip(&cache.h).zip(dh.iter_mut()) {
                outer_add(&mut grad[self.layout.range(p)], dt, h);
                matvec_t_add(self.t(p), dt, dh_t);
            }
        }
        for ((dh_t, h), input) in dh.iter().zip(&cache.h).zip(&cache.inputs) {
            let dpre: Vec<f64> = dh_t.iter().zip(h).map(|(g, h)| g * (1.0 - h * h)).collect();
            outer_add(&mut grad[self.layout.range(P::EncInW)], &dpre, input);
            axpy(1.0, &dpre, &mut grad[self.layout.range(P::EncInB)]);
        }
    }

    /// CTC logits over blank and symbols, one row per encoder frame.
    pub fn ctc_logits(&self, enc: &EncoderCache) -> Vec<Vec<f64>> {
        enc.out
            .iter()
            .map(|e| {
                let mut y = self.t(P::CtcB).to_vec();
                matvec_add(self.t(P::CtcW), e, &mut y);
                y
            })
            .collect()
    }

    pub fn ctc_backward(&self, enc: &EncoderCache, d_logits: &[Vec<f64>], grad: &mut [f64], d_out: &mut [Vec<f64>]) {
        for ((e, dl), de) in enc.out.iter().zip(d_logits).zip(d_out.iter_mut()) {
            outer_add(&mut grad[self.layout.range(P::CtcW)], dl, e);
            axpy(1.0, dl, &mut grad[self.layout.range(P::CtcB)]);
            matvec_t_add(self.t(P::CtcW), dl, de);
        }
    }

    fn step(&self, enc: &EncoderCache, prev_token: usize, s_prev: &[f64], o_prev: &[f64], alpha_prev: &[f64]) -> Step {
        let hd = self.hidden();
        let ed = self.dims.embed;
        let emb = &self.t(P::Emb)[prev_token * ed..(prev_token + 1) * ed];
        let x: Vec<f64> = emb.iter().chain(o_prev).copied().collect();

        let mut pre = self.t(P::GruB).to_vec();
        matvec_add(self.t(P::GruW), &x, &mut pre);
        let u = self.t(P::GruU);
        let mut ur = vec![0.0; hd];
        matvec_add(&u[..hd * hd], s_prev, &mut ur);
        let mut uz = vec![0.0; hd];
        matvec_add(&u[hd * hd..2 * hd * hd], s_prev, &mut uz);
        let r: Vec<f64> = (0..hd).map(|i| sigmoid(pre[i] + ur[i])).collect();
        let z: Vec<f64> = (0..hd).map(|i| sigmoid(pre[hd + i] + uz[i])).collect();
        let rs: Vec<f64> = r.iter().zip(s_prev).map(|(a, b)| a * b).collect();
        let mut un = vec![0.0; hd];
        matvec_add(&u[2 * hd * hd..], &rs, &mut un);
        let n: Vec<f64> = (0..hd).map(|i| (pre[2 * hd + i] + un[i]).tanh()).collect();
        let s: Vec<f64> = (0..hd).map(|i| (1.0 - z[i]) * n[i] + z[i] * s_prev[i]).collect();

        let mut q = vec![0.0; hd];
        matvec_add(self.t(P::DecQ), &s, &mut q);
        let scale = 1.0 / (hd as f64).sqrt();
        let width = self.dims.location_width as isize;
        let loc = self.t(P::LocW);
        let t_len = enc.frames();
        let mut alpha: Vec<f64> = (0..t_len)
            .map(|t| {
                let mut score = scale * dot(&q, &enc.out[t]);
                for j in -width..=width {
                    let src = t as isize - j;
                    if src >= 0 && (src as usize) < t_len {
                        score += loc[(j + width) as usize] * alpha_prev[src as usize];
                    }
                }
                score
            })
            .collect();
        softmax_in_place(&mut alpha);
        let mut c = vec![0.0; hd];
        for (a, e) in alpha.iter().zip(&enc.out) {
            axpy(*a, e, &mut c);
        }
        let sc: Vec<f64> = s.iter().chain(&c).copied().collect();
        let mut o = self.t(P::CombB).to_vec();
        matvec_add(self.t(P::CombW), &sc, &mut o);
        o.iter_mut().for_each(|x| *x = x.tanh());
        let mut probs = self.t(P::OutB).to_vec();
        matvec_add(self.t(P::OutW), &o, &mut probs);
        softmax_in_place(&mut probs);
        Step {
            prev_token,
            x,
            s_prev: s_prev.to_vec(),
            r,
            z,
            n,
            rs,
            s,
            q,
            alpha_prev: alpha_prev.to_vec(),
            alpha,
            sc,
            o,
            probs,
        }
    }

    /// Teacher-forced pass over `targets` (which must end with EOS).
    pub fn decode_forward(&self, enc: &EncoderCache, targets: &[usize]) -> DecoderCache {
        let hd = self.hidden();
        let bos = self.specials().bos;
        let mut steps: Vec<Step> = Vec::with_capacity(targets.len());
        let mut loss = 0.0;
        for (k, &y) in targets.iter().enumerate() {
            let step = match steps.last() {
                None => self.step(enc, bos, &vec![0.0; hd], &vec![0.0; hd], &initial_alpha(enc.frames())),
                Some(last) => self.step(enc, targets[k - 1], &last.s, &last.o, &last.alpha),
            };
            loss -= step.probs[y].max(f64::MIN_POSITIVE).ln();
            steps.push(step);
        }
        let len = targets.len().max(1) as f64;
        DecoderCache {
            steps,
            targets: targets.to_vec(),
            loss: loss / len,
        }
    }

    /// Backward of `weight * cache.loss`, adding into `grad` and `d_out`.
    pub fn decode_backward(&self, enc: &EncoderCache, cache: &DecoderCache, weight: f64, grad: &mut [f64], d_out: &mut [Vec<f64>]) {
        let hd = self.hidden();
        let ed = self.dims.embed;
        let t_len = enc.frames();
        let scale = 1.0 / (hd as f64).sqrt();
        let width = self.dims.location_width as isize;
        let per_token = weight / cache.targets.len().max(1) as f64;
        let u = self.t(P::GruU);

        let mut ds_carry = vec![0.0; hd];
        let mut do_carry = vec![0.0; hd];
        let mut dalpha_carry = vec![0.0; t_len];
        for (k, st) in cache.steps.iter().enumerate().rev() {
            let mut dl: Vec<f64> = st.probs.iter().map(|p| per_token * p).collect();
            dl[cache.targets[k]] -= per_token;
            outer_add(&mut grad[self.layout.range(P::OutW)], &dl, &st.o);
            axpy(1.0, &dl, &mut grad[self.layout.range(P::OutB)]);
            let mut d_o = std::mem::take(&mut do_carry);
            matvec_t_add(self.t(P::OutW), &dl, &mut d_o);

            let ao: Vec<f64> = d_o.iter().zip(&st.o).map(|(g, o)| g * (1.0 - o * o)).collect();
            outer_add(&mut grad[self.layout.range(P::CombW)], &ao, &st.sc);
            axpy(1.0, &ao, &mut grad[self.layout.range(P::CombB)]);
            let mut dsc = vec![0.0; 2 * hd];
            matvec_t_add(self.t(P::CombW), &ao, &mut dsc);
            let dc = dsc.split_off(hd);
            let mut ds = dsc;
            axpy(1.0, &ds_carry, &mut ds);

            let mut dalpha = std::mem::replace(&mut dalpha_carry, vec![0.0; t_len]);
            for t in 0..t_len {
                dalpha[t] += dot(&dc, &enc.out[t]);
                axpy(st.alpha[t], &dc, &mut d_out[t]);
            }
            let dscore = softmax_backward(&st.alpha, &dalpha);
            let mut dq = vec![0.0; hd];
            for t in 0..t_len {
                axpy(scale * dscore[t], &enc.out[t], &mut dq);
                axpy(scale * dscore[t], &st.q, &mut d_out[t]);
            }
            let loc_range = self.layout.range(P::LocW);
            let loc = self.t(P::LocW);
            for j in -width..=width {
                let ji = (j + width) as usize;
                for (t, g) in dscore.iter().enumerate() {
                    let src = t as isize - j;
                    if src >= 0 && (src as usize) < t_len {
                        grad[loc_range.start + ji] += g * st.alpha_prev[src as usize];
                        dalpha_carry[src as usize] += g * loc[ji];
                    }
                }
            }
            outer_add(&mut grad[self.layout.range(P::DecQ)], &dq, &st.s);
            matvec_t_add(self.t(P::DecQ), &dq, &mut ds);

            // GRU
            let mut ds_prev: Vec<f64> = ds.iter().zip(&st.z).map(|(g, z)| g * z).collect();
            let an: Vec<f64> = (0..hd).map(|i| ds[i] * (1.0 - st.z[i]) * (1.0 - st.n[i] * st.n[i])).collect();
            let az: Vec<f64> = (0..hd)
                .map(|i| ds[i] * (st.s_prev[i] - st.n[i]) * st.z[i] * (1.0 - st.z[i]))
                .collect();
            let gu = self.layout.range(P::GruU);
            outer_add(&mut grad[gu.start + 2 * hd * hd..gu.end], &an, &st.rs);
            let mut d_rs = vec![0.0; hd];
            matvec_t_add(&u[2 * hd * hd..], &an, &mut d_rs);
            let ar: Vec<f64> = (0..hd)
                .map(|i| d_rs[i] * st.s_prev[i] * st.r[i] * (1.0 - st.r[i]))
                .collect();
            for i in 0..hd {
                ds_prev[i] += d_rs[i] * st.r[i];
            }
            outer_add(&mut grad[gu.start..gu.start + hd * hd], &ar, &st.s_prev);
            outer_add(&mut grad[gu.start + hd * hd..gu.start + 2 * hd * hd], &az, &st.s_prev);
            matvec_t_add(&u[..hd * hd], &ar, &mut ds_prev);
            matvec_t_add(&u[hd * hd..2 * hd * hd], &az, &mut ds_prev);

            let a_pre: Vec<f64> = ar.iter().chain(&az).chain(&an).copied().collect();
            outer_add(&mut grad[self.layout.range(P::GruW)], &a_pre, &st.x);
            axpy(1.0, &a_pre, &mut grad[self.layout.range(P::GruB)]);
            let mut dx = vec![0.0; ed + hd];
            matvec_t_add(self.t(P::GruW), &a_pre, &mut dx);
            let emb = self.layout.range(P::Emb);
            axpy(1.0, &dx[..ed], &mut grad[emb.start + st.prev_token * ed..emb.start + (st.prev_token + 1) * ed]);
            do_carry = dx[ed..].to_vec();
            ds_carry = ds_prev;
        }
    }

    /// Decoder class id of a stream item.
    pub fn item_id(&self, item: &StreamItem) -> Option<usize> {
        let sp = self.specials();
        match item {
            StreamItem::Next => Some(sp.next),
            StreamItem::Prev => Some(sp.prev),
            StreamItem::Token(t) => t
                .strip_prefix('w')
                .and_then(|n| n.parse::<usize>().ok())
                .filter(|&i| i < self.vocab && symbol_token(i) == *t),
        }
    }

    /// Decoder ids for `stream` followed by EOS.
    pub fn target_ids(&self, stream: &TogglStream) -> Result<Vec<usize>> {
        let mut ids = stream
            .items()
            .iter()
            .map(|it| {
                self.item_id(it).ok_or(ToyError::BadSymbol {
                    symbol: usize::MAX,
                    vocab: self.vocab,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        ids.push(self.specials().eos);
        Ok(ids)
    }
}

/// Greedy decoding limits.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOptions {
    pub max_len: usize,
    /// Longest run of consecutive control tokens allowed; `None` disables
    /// the guard.
    pub max_consecutive_controls: Option<usize>,
    /// When false NEXT and PREV are never emitted.
    pub allow_controls: bool,
}

impl DecodeOptions {
    pub fn for_speakers(max_speakers: usize, max_len: usize) -> Self {
        Self {
            max_len,
            max_consecutive_controls: Some(max_speakers.saturating_sub(1)),
            allow_controls: true,
        }
    }

    pub fn without_controls(max_len: usize) -> Self {
        Self {
            max_len,
            max_consecutive_controls: Some(0),
            allow_controls: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub stream: TogglStream,
    /// Stopped at `max_len` without emitting EOS.
    pub truncated: bool,
    /// Lenient per-speaker split of `stream`.
    pub speakers: BTreeMap<usize, Vec<String>>,
}

/// Greedy autoregressive decoding from BOS until EOS or `max_len` tokens.
pub fn decode_greedy(params: &ToyModelParams, frames: &[Vec<f64>], opts: &DecodeOptions) -> Result<Decoded> {
    if opts.max_len == 0 {
        return Err(ToyError::Config("max_len must be at least 1".into()));
    }
    let enc = params.encode(frames)?;
    let sp = params.specials();
    let hd = params.dims.hidden;
    let mut s = vec![0.0; hd];
    let mut o = vec![0.0; hd];
    let mut alpha = initial_alpha(enc.frames());
    let mut prev = sp.bos;
    let mut items = Vec::new();
    let mut run = 0;
    let mut truncated = true;
    for _ in 0..opts.max_len {
        let st = params.step(&enc, prev, &s, &o, &alpha);
        let mut scores = st.probs.clone();
        scores[sp.bos] = f64::NEG_INFINITY;
        let cap_hit = opts.max_consecutive_controls.is_some_and(|cap| run >= cap);
        if !opts.allow_controls || cap_hit {
            scores[sp.next] = f64::NEG_INFINITY;
            scores[sp.prev] = f64::NEG_INFINITY;
        }
        let y = argmax(&scores);
        if y == sp.eos {
            truncated = false;
            break;
        }
        if y == sp.next || y == sp.prev {
            run += 1;
            items.push(if y == sp.next { StreamItem::Next } else { StreamItem::Prev });
        } else {
            run = 0;
            items.push(StreamItem::Token(symbol_token(y)));
        }
        prev = y;
        s = st.s;
        o = st.o;
        alpha = st.alpha;
    }
    let stream = TogglStream::new(items);
    let speakers = deserialize(&stream, DecodeMode::Lenient)?;
    Ok(Decoded {
        stream,
        truncated,
        speakers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny() -> (ModelDims, SyntheticTask) {
        let dims = ModelDims {
            hidden: 6,
            embed: 5,
            subsample: 2,
            context: 1,
            location_width: 1,
        };
        let task = SyntheticTask {
            vocab_size: 4,
            feature_dim: 3,
            frames_per_symbol: 2,
            max_speakers: 2,
            min_symbols: 2,
            max_symbols: 3,
            ..Default::default()
        };
        (dims, task)
    }

    #[test]
    fn layout_is_contiguous_and_named() {
        let (dims, task) = tiny();
        let p = ToyModelParams::init(&dims, &task, 0).unwrap();
        let mut end = 0;
        for (name, [r, c], range) in p.layout().tensors() {
            assert!(!name.is_empty());
            assert_eq!(range.start, end);
            assert_eq!(range.len(), r * c);
            end = range.end;
        }
        assert_eq!(end, p.data.len());
        assert_eq!(p.decoder_classes(), 8);
        assert_eq!(p.ctc_classes(), 5);
    }

    #[test]
    fn encoder_frame_count() {
        let (dims, task) = tiny();
        let p = ToyModelParams::init(&dims, &task, 0).unwrap();
        let frames = vec![vec![0.1; 3]; 7];
        assert_eq!(p.encode(&frames).unwrap().frames(), 4);
        assert!(p.encode(&[]).is_err());
    }

    #[test]
    fn untrained_decoding_is_total() {
        let (dims, task) = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for seed in 0..20 {
            let p = ToyModelParams::init(&dims, &task, seed).unwrap();
            let item = task.sample_item(rng.random_range(1..=2), &mut rng).unwrap();
            let d = decode_greedy(&p, &item.frames, &DecodeOptions::for_speakers(2, 12)).unwrap();
            assert!(d.stream.len() <= 12);
            let mut run = 0;
            for it in d.stream.items() {
                run = if it.is_control() { run + 1 } else { 0 };
                assert!(run <= 1);
            }
        }
    }

    #[test]
    fn no_control_mode_never_switches() {
        let (dims, task) = tiny();
        let p = ToyModelParams::init(&dims, &task, 1).unwrap();
        let frames = vec![vec![0.3; 3]; 6];
        let d = decode_greedy(&p, &frames, &DecodeOptions::without_controls(10)).unwrap();
        assert_eq!(d.stream.control_count(), 0);
        assert!(d.speakers.len() <= 1);
    }

    #[test]
    fn target_ids_round_trip() {
        let (dims, task) = tiny();
        let p = ToyModelParams::init(&dims, &task, 0).unwrap();
        let s: TogglStream = "w1 [NEXT] w3 [PREV] w0".parse().unwrap();
        assert_eq!(p.target_ids(&s).unwrap(), vec![1, 4, 3, 5, 0, 7]);
        let bad: TogglStream = "w9".parse().unwrap();
        assert!(p.target_ids(&bad).is_err());
    }
}
