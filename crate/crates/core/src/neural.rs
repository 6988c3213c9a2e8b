//! Plain LSTM, windowed-attention and sparse pointer language models.
//!
//! All three share one single-layer LSTM of width `k`. Training runs TBPTT
//! over [`BatchStream`] segments; inference runs the same step function one
//! token at a time on a fresh tape with the carried state as constants.

use std::collections::{HashSet, VecDeque};
use std::fmt;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Batch, BatchStream, EncodedFile, Vocabulary};
use crate::eval;
use crate::par::{self, Execution};
use crate::pynorm::looks_anonymous;
use crate::tensor::{
    clip_by_global_norm, decay_lr, dropout_mask, sgd_step, softmax, Array, Gradients, LogUniform,
    ParamId, ParamStore, Scalar, Tape, Var,
};

pub const INIT_RANGE: f64 = 0.05;
pub const DEFAULT_HIDDEN: usize = 200;
pub const DEFAULT_MEMORY: usize = 20;
pub const DEFAULT_C: f64 = 1000.0;

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("loss diverged at epoch {epoch}, batch {batch}: loss {loss}, gradient norm {grad_norm}")]
    DivergedLoss { epoch: usize, batch: usize, loss: f64, grad_norm: f64 },
    #[error("bad parameters: {0}")]
    BadParams(String),
    #[error("bad configuration: {0}")]
    BadConfig(String),
    #[error("trace requires a sparse pointer model")]
    NotPointer,
    #[error("context is empty")]
    EmptyContext,
    #[error("attention memory is empty")]
    EmptyMemory,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Architecture {
    Lstm,
    Attention { window: usize },
    Pointer { memory: usize, c: f64 },
}

impl Architecture {
    pub fn name(&self) -> &'static str {
        match self {
            Architecture::Lstm => "lstm",
            Architecture::Attention { .. } => "attention",
            Architecture::Pointer { .. } => "pointer",
        }
    }

    /// Slots of the attention window or identifier memory.
    pub fn capacity(&self) -> usize {
        match *self {
            Architecture::Lstm => 0,
            Architecture::Attention { window } => window,
            Architecture::Pointer { memory, .. } => memory,
        }
    }

    pub fn default_batch_size(&self) -> usize {
        match self {
            Architecture::Pointer { .. } => 30,
            _ => 75,
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Architecture::Lstm => write!(f, "lstm"),
            Architecture::Attention { window } => write!(f, "attention-{window}"),
            Architecture::Pointer { memory, c } => write!(f, "pointer-{memory} (C={c})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Architecture,
    pub hidden: usize,
    pub vocab_size: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), NeuralError> {
        if self.hidden == 0 || self.vocab_size == 0 {
            return Err(NeuralError::BadConfig("hidden and vocabulary sizes must be positive".into()));
        }
        match self.arch {
            Architecture::Attention { window: 0 } | Architecture::Pointer { memory: 0, .. } => {
                Err(NeuralError::BadConfig("memory size must be positive".into()))
            }
            Architecture::Pointer { c, .. } if !(c > 0.0) => {
                Err(NeuralError::BadConfig("C must be positive".into()))
            }
            _ => Ok(()),
        }
    }

    /// Parameter names and shapes in store order.
    pub fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        let (k, v) = (self.hidden, self.vocab_size);
        let mut out = vec![
            ("embedding", vec![v, k]),
            ("lstm.w", vec![4 * k, 2 * k]),
            ("lstm.b", vec![4 * k]),
            ("output.w", vec![v, k]),
            ("output.b", vec![v]),
        ];
        if self.arch != Architecture::Lstm {
            out.push(("attn.wm", vec![k, k]));
            out.push(("attn.wh", vec![k, k]));
            out.push(("attn.w", vec![k]));
        }
        match self.arch {
            Architecture::Attention { .. } => out.push(("attn.wa", vec![k, 2 * k])),
            Architecture::Pointer { .. } => {
                out.push(("ctrl.w", vec![2, 3 * k]));
                out.push(("ctrl.b", vec![2]));
            }
            Architecture::Lstm => {}
        }
        out
    }
}

#[derive(Debug, Clone, Copy)]
struct ParamIds {
    emb: ParamId,
    lstm_w: ParamId,
    lstm_b: ParamId,
    out_w: ParamId,
    out_b: ParamId,
    wm: Option<ParamId>,
    wh: Option<ParamId>,
    w: Option<ParamId>,
    wa: Option<ParamId>,
    ctrl_w: Option<ParamId>,
    ctrl_b: Option<ParamId>,
}

#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    ids: ParamIds,
}

impl<T: Scalar> Model<T> {
    /// Uniform initialization in (−0.05, 0.05), forget-gate bias 1.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, NeuralError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, shape) in config.param_shapes() {
            params.add(name, Array::uniform(&shape, -INIT_RANGE, INIT_RANGE, &mut rng));
        }
        let k = config.hidden;
        let b = params.id("lstm.b").expect("lstm bias");
        for v in &mut params.get_mut(b).data_mut()[k..2 * k] {
            *v = T::one();
        }
        Self::from_params(config, params)
    }

    /// Wraps an existing store after checking names and shapes.
    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self, NeuralError> {
        config.validate()?;
        let expected = config.param_shapes();
        if expected.len() != params.len() {
            return Err(NeuralError::BadParams(format!(
                "expected {} arrays, found {}",
                expected.len(),
                params.len()
            )));
        }
        for ((name, shape), (pname, arr)) in expected.iter().zip(params.iter()) {
            if *name != pname || shape.as_slice() != arr.shape() {
                return Err(NeuralError::BadParams(format!(
                    "expected {name} {shape:?}, found {pname} {:?}",
                    arr.shape()
                )));
            }
        }
        let id = |n: &str| params.id(n);
        let ids = ParamIds {
            emb: id("embedding").expect("checked"),
            lstm_w: id("lstm.w").expect("checked"),
            lstm_b: id("lstm.b").expect("checked"),
            out_w: id("output.w").expect("checked"),
            out_b: id("output.b").expect("checked"),
            wm: id("attn.wm"),
            wh: id("attn.wh"),
            w: id("attn.w"),
            wa: id("attn.wa"),
            ctrl_w: id("ctrl.w"),
            ctrl_b: id("ctrl.b"),
        };
        Ok(Model { config, params, ids })
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model { config: self.config, params: self.params.cast(), ids: self.ids }
    }

    pub fn hidden(&self) -> usize {
        self.config.hidden
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    pub fn fresh_state(&self) -> DecodeState<T> {
        let k = self.hidden();
        DecodeState { h: vec![T::zero(); k], c: vec![T::zero(); k], slots: VecDeque::new() }
    }
}

/// One filled memory slot: the stored vector, its projection through
/// `attn.wm`, and (pointer model) the vocabulary id it stands for.
#[derive(Debug, Clone, PartialEq)]
pub struct MemorySlot<T> {
    pub h: Vec<T>,
    pub proj: Vec<T>,
    pub id: u32,
}

/// Recurrent state plus attention window or identifier memory.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeState<T> {
    pub h: Vec<T>,
    pub c: Vec<T>,
    pub slots: VecDeque<MemorySlot<T>>,
}

impl<T: Scalar> DecodeState<T> {
    pub fn reset(&mut self) {
        self.h.iter_mut().for_each(|v| *v = T::zero());
        self.c.iter_mut().for_each(|v| *v = T::zero());
        self.slots.clear();
    }

    pub fn memory_ids(&self) -> Vec<u32> {
        self.slots.iter().map(|s| s.id).collect()
    }
}

#[derive(Clone)]
struct SlotVar {
    h: Var,
    proj: Var,
    id: u32,
}

struct LaneVars {
    h: Var,
    c: Var,
    slots: VecDeque<SlotVar>,
}

struct PointerVars {
    y: Var,
    i: Var,
    lam: Var,
    ystar: Var,
}

struct StepVars {
    logits: Var,
    /// Input to the output projection.
    feature: Var,
    alpha: Option<Var>,
    /// Memory ids matching `alpha`.
    alpha_ids: Vec<u32>,
    pointer: Option<PointerVars>,
}

impl<T: Scalar> Model<T> {
    fn lane_from_state(&self, t: &mut Tape<'_, T>, st: &DecodeState<T>, reproject: bool) -> LaneVars {
        let h = t.constant(st.h.clone());
        let c = t.constant(st.c.clone());
        let slots = st
            .slots
            .iter()
            .map(|s| {
                let h = t.constant(s.h.clone());
                let proj = if reproject {
                    t.matvec(self.ids.wm.expect("memory model"), h)
                } else {
                    t.constant(s.proj.clone())
                };
                SlotVar { h, proj, id: s.id }
            })
            .collect();
        LaneVars { h, c, slots }
    }

    fn state_from_lane(t: &Tape<'_, T>, lane: &LaneVars) -> DecodeState<T> {
        DecodeState {
            h: t.value(lane.h).to_vec(),
            c: t.value(lane.c).to_vec(),
            slots: lane
                .slots
                .iter()
                .map(|s| MemorySlot { h: t.value(s.h).to_vec(), proj: t.value(s.proj).to_vec(), id: s.id })
                .collect(),
        }
    }

    fn fresh_lane(&self, t: &mut Tape<'_, T>) -> LaneVars {
        let k = self.hidden();
        LaneVars { h: t.constant(vec![T::zero(); k]), c: t.constant(vec![T::zero(); k]), slots: VecDeque::new() }
    }

    /// `G_j = tanh(W^M m_j + W^h h)`, `α = softmax(wᵀG)`, `c = Σ α_j m_j`.
    fn attend_vars(&self, t: &mut Tape<'_, T>, slots: &VecDeque<SlotVar>, h: Var) -> (Var, Var) {
        let wh_h = t.matvec(self.ids.wh.expect("memory model"), h);
        let g: Vec<Var> = slots
            .iter()
            .map(|s| {
                let a = t.add(s.proj, wh_h);
                t.tanh(a)
            })
            .collect();
        let w = t.param(self.ids.w.expect("memory model"));
        let scores = t.dots(w, &g);
        let alpha = t.softmax(scores);
        let items: Vec<Var> = slots.iter().map(|s| s.h).collect();
        let c = t.weighted_sum(alpha, &items);
        (alpha, c)
    }

    fn step_vars(
        &self,
        t: &mut Tape<'_, T>,
        lane: &mut LaneVars,
        input: u32,
        intro: bool,
        mask: Option<Vec<T>>,
    ) -> StepVars {
        let k = self.hidden();
        let ids = self.ids;
        let mut x = t.embed(ids.emb, input);
        if let Some(m) = mask {
            x = t.dropout(x, m);
        }
        let xh = t.concat(&[x, lane.h]);
        let z = t.affine(ids.lstm_w, ids.lstm_b, xh);
        let zi = t.slice(z, 0, k);
        let zf = t.slice(z, k, k);
        let zo = t.slice(z, 2 * k, k);
        let zg = t.slice(z, 3 * k, k);
        let ig = t.sigmoid(zi);
        let fg = t.sigmoid(zf);
        let og = t.sigmoid(zo);
        let gg = t.tanh(zg);
        let fc = t.mul(fg, lane.c);
        let ic = t.mul(ig, gg);
        let c = t.add(fc, ic);
        let tc = t.tanh(c);
        let h = t.mul(og, tc);
        lane.h = h;
        lane.c = c;

        let mut out = StepVars { logits: h, feature: h, alpha: None, alpha_ids: Vec::new(), pointer: None };
        match self.config.arch {
            Architecture::Lstm => {
                out.logits = t.affine(ids.out_w, ids.out_b, h);
            }
            Architecture::Attention { window } => {
                let ctx = if lane.slots.is_empty() {
                    t.constant(vec![T::zero(); k])
                } else {
                    let (alpha, ctx) = self.attend_vars(t, &lane.slots, h);
                    out.alpha = Some(alpha);
                    out.alpha_ids = lane.slots.iter().map(|s| s.id).collect();
                    ctx
                };
                let hc = t.concat(&[h, ctx]);
                let pre = t.matvec(ids.wa.expect("attention"), hc);
                let n = t.tanh(pre);
                out.feature = n;
                out.logits = t.affine(ids.out_w, ids.out_b, n);
                let proj = t.matvec(ids.wm.expect("attention"), h);
                lane.slots.push_back(SlotVar { h, proj, id: input });
                if lane.slots.len() > window {
                    lane.slots.pop_front();
                }
            }
            Architecture::Pointer { memory, c: big_c } => {
                out.logits = t.affine(ids.out_w, ids.out_b, h);
                if !lane.slots.is_empty() {
                    let (alpha, ctx) = self.attend_vars(t, &lane.slots, h);
                    let mem_ids: Vec<u32> = lane.slots.iter().map(|s| s.id).collect();
                    let s = t.scatter(alpha, &mem_ids, self.vocab_size(), T::of(big_c));
                    let i = t.softmax(s);
                    let y = t.softmax(out.logits);
                    let hx = t.concat(&[h, x, ctx]);
                    let lz = t.affine(ids.ctrl_w.expect("pointer"), ids.ctrl_b.expect("pointer"), hx);
                    let lam = t.softmax(lz);
                    let ystar = t.mix(lam, y, i);
                    out.alpha = Some(alpha);
                    out.alpha_ids = mem_ids;
                    out.pointer = Some(PointerVars { y, i, lam, ystar });
                }
                if intro {
                    let proj = t.matvec(ids.wm.expect("pointer"), h);
                    lane.slots.push_back(SlotVar { h, proj, id: input });
                    if lane.slots.len() > memory {
                        lane.slots.pop_front();
                    }
                }
            }
        }
        out
    }
}

/// Distribution and diagnostics for one inference step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput<T> {
    /// Next-token distribution (`y*` for the pointer model).
    pub probs: Vec<T>,
    /// Pointer model with non-empty memory only.
    pub pointer: Option<PointerDetail<T>>,
    /// Attention weights over filled slots, with the slot ids.
    pub alpha: Option<(Vec<T>, Vec<u32>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointerDetail<T> {
    pub y: Vec<T>,
    pub i: Vec<T>,
    pub lambda: [T; 2],
}

impl<T: Scalar> Model<T> {
    /// Consumes `input` and returns the distribution over the next token.
    /// With `intro` set on a pointer model, the input is then stored in
    /// memory.
    pub fn step(&self, state: &mut DecodeState<T>, input: u32, intro: bool) -> StepOutput<T> {
        let mut t = Tape::new(&self.params);
        let mut lane = self.lane_from_state(&mut t, state, false);
        let sv = self.step_vars(&mut t, &mut lane, input, intro, None);
        *state = Self::state_from_lane(&t, &lane);
        let alpha = sv.alpha.map(|a| (t.value(a).to_vec(), sv.alpha_ids.clone()));
        match sv.pointer {
            Some(p) => StepOutput {
                probs: t.value(p.ystar).to_vec(),
                pointer: Some(PointerDetail {
                    y: t.value(p.y).to_vec(),
                    i: t.value(p.i).to_vec(),
                    lambda: [t.value(p.lam)[0], t.value(p.lam)[1]],
                }),
                alpha,
            },
            None => StepOutput { probs: softmax(t.value(sv.logits)), pointer: None, alpha },
        }
    }

    /// `(α, c)` over explicit memory vectors.
    pub fn attend(&self, memory: &[Vec<T>], h: &[T]) -> Result<(Vec<T>, Vec<T>), NeuralError> {
        if memory.is_empty() {
            return Err(NeuralError::EmptyMemory);
        }
        let wm = self.ids.wm.ok_or(NeuralError::BadConfig("model has no attention".into()))?;
        let mut t = Tape::new(&self.params);
        let slots = memory
            .iter()
            .map(|m| {
                let h = t.constant(m.clone());
                let proj = t.matvec(wm, h);
                SlotVar { h, proj, id: 0 }
            })
            .collect();
        let hv = t.constant(h.to_vec());
        let (a, c) = self.attend_vars(&mut t, &slots, hv);
        Ok((t.value(a).to_vec(), t.value(c).to_vec()))
    }

    /// Controller weights `λ = softmax(W^λ[h; x; c] + b^λ)`.
    pub fn controller(&self, h: &[T], x: &[T], c: &[T]) -> Result<[T; 2], NeuralError> {
        let (w, b) = match (self.ids.ctrl_w, self.ids.ctrl_b) {
            (Some(w), Some(b)) => (w, b),
            _ => return Err(NeuralError::NotPointer),
        };
        let mut t = Tape::new(&self.params);
        let v: Vec<T> = h.iter().chain(x).chain(c).copied().collect();
        let v = t.constant(v);
        let z = t.affine(w, b, v);
        let l = t.softmax(z);
        Ok([t.value(l)[0], t.value(l)[1]])
    }
}

/// `softmax(s)` where `s[id] = Σ α_j` over slots holding `id`, else `−c`.
pub fn pointer_distribution(alpha: &[f64], ids: &[u32], vocab: usize, c: f64) -> Vec<f64> {
    let store = ParamStore::<f64>::new();
    let mut t = Tape::new(&store);
    let a = t.constant(alpha.to_vec());
    let s = t.scatter(a, ids, vocab, c);
    softmax(t.value(s))
}

/// `λ₁·y + λ₂·i`.
pub fn mix(y: &[f64], i: &[f64], lambda: [f64; 2]) -> Vec<f64> {
    y.iter().zip(i).map(|(&a, &b)| lambda[0] * a + lambda[1] * b).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub decay: f64,
    pub clip: f64,
    pub dropout: f64,
    pub batch_size: usize,
    pub unroll: usize,
    pub seed: u64,
    /// Sampled-softmax sample size; plain LSTM and attention only.
    pub sample_size: Option<usize>,
    pub exec: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            lr: 0.7,
            decay: 0.9,
            clip: 5.0,
            dropout: 0.1,
            batch_size: 30,
            unroll: crate::corpus::DEFAULT_UNROLL,
            seed: 1,
            sample_size: None,
            exec: Execution::Parallel,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<(), NeuralError> {
        let bad = |m: &str| Err(NeuralError::BadConfig(m.to_string()));
        if self.epochs == 0 || self.batch_size == 0 || self.unroll == 0 {
            return bad("epochs, batch size and unroll must be positive");
        }
        if !(self.lr > 0.0) || !(self.decay > 0.0) || !(self.clip > 0.0) {
            return bad("lr, decay and clip must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        if let Some(s) = self.sample_size {
            if matches!(model.arch, Architecture::Pointer { .. }) {
                return bad("sampled softmax applies to the lstm and attention models only");
            }
            if s < 2 || s > model.vocab_size {
                return bad("sample size must be in 2..=|V|");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub lr: f64,
    /// Mean training objective per predicted token, in nats.
    pub train_loss: f64,
    pub train_tokens: usize,
    pub dev_perplexity: Option<f64>,
}

fn mix_seed(parts: &[u64]) -> u64 {
    let mut x = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        x ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(x << 6).wrapping_add(x >> 2);
        x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
        x ^= x >> 31;
    }
    x
}

struct LaneResult<T> {
    grads: Gradients<T>,
    loss: f64,
    count: usize,
    carry: DecodeState<T>,
}

impl<T: Scalar> Model<T> {
    /// Forward and backward over one lane of a batch, starting from `carry`.
    /// Each valid position's loss is weighted by `weight`.
    fn lane_segment(
        &self,
        batch: &Batch,
        lane: usize,
        carry: &DecodeState<T>,
        dropout: f64,
        sampler: Option<(LogUniform, usize)>,
        rng: &mut ChaCha8Rng,
        weight: T,
    ) -> LaneResult<T> {
        let mut t = Tape::new(&self.params);
        let reproject = self.config.arch != Architecture::Lstm;
        let mut vars = self.lane_from_state(&mut t, carry, reproject);
        let mut losses = Vec::new();
        for step in 0..batch.len {
            let at = batch.at(lane, step);
            if batch.pad[at] {
                continue;
            }
            if batch.reset[at] {
                vars = self.fresh_lane(&mut t);
            }
            let mask = (dropout > 0.0).then(|| dropout_mask(self.hidden(), dropout, rng));
            let sv = self.step_vars(&mut t, &mut vars, batch.inputs[at], batch.intro[at], mask);
            if !batch.mask[at] {
                continue;
            }
            let target = batch.targets[at];
            let loss = match (&sv.pointer, sampler) {
                (Some(p), _) => t.neg_log_pick(p.ystar, target as usize),
                (None, Some((lu, size))) => {
                    let cands = lu.candidates(target, size, rng);
                    t.sampled_softmax_loss(self.ids.out_w, self.ids.out_b, sv.feature, &cands)
                }
                (None, None) => t.cross_entropy(sv.logits, target as usize),
            };
            losses.push(loss);
        }
        let mut grads = self.params.zero_grads();
        let seeds: Vec<(Var, T)> = losses.iter().map(|&l| (l, weight)).collect();
        t.backward(&seeds, &mut grads);
        let loss = losses.iter().map(|&l| t.scalar(l).as_f64()).sum();
        LaneResult { grads, loss, count: losses.len(), carry: Self::state_from_lane(&t, &vars) }
    }

    /// Mean loss over the predicted positions of one file processed as a
    /// single segment, and its gradients. Dropout masks come from `seed`.
    pub fn sequence_loss(&self, file: &EncodedFile, dropout: f64, seed: u64) -> (f64, Gradients<T>) {
        let stream = BatchStream::new(std::slice::from_ref(file), 1, file.len().max(1));
        let batch = stream.batch(0);
        let n = batch.mask.iter().filter(|&&m| m).count().max(1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = self.lane_segment(
            &batch,
            0,
            &self.fresh_state(),
            dropout,
            None,
            &mut rng,
            T::of(1.0 / n as f64),
        );
        (r.loss / n as f64, r.grads)
    }
}

/// Trains `model` in place and returns one report per epoch. `on_epoch` is
/// called after each epoch, for logging.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    train_files: &[EncodedFile],
    dev_files: &[EncodedFile],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochReport),
) -> Result<Vec<EpochReport>, NeuralError> {
    cfg.validate(&model.config)?;
    let stream = BatchStream::new(train_files, cfg.batch_size, cfg.unroll);
    let lanes = stream.lanes();
    let sampler = cfg.sample_size.map(|s| (LogUniform::new(model.vocab_size()), s));
    let mut lr = cfg.lr;
    let mut reports = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut carries: Vec<DecodeState<T>> = (0..lanes).map(|_| model.fresh_state()).collect();
        let (mut loss_sum, mut tokens) = (0.0f64, 0usize);
        for bi in 0..stream.num_batches() {
            let batch = stream.batch(bi);
            let n_valid = batch.mask.iter().filter(|&&m| m).count();
            let weight = T::of(1.0 / n_valid.max(1) as f64);
            let m: &Model<T> = model;
            let results = par::map_range(cfg.exec, lanes, |l| {
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, epoch as u64, bi as u64, l as u64]));
                m.lane_segment(&batch, l, &carries[l], cfg.dropout, sampler, &mut rng, weight)
            });
            let mut grads = model.params.zero_grads();
            let mut batch_loss = 0.0;
            for (l, r) in results.into_iter().enumerate() {
                grads.add_assign(&r.grads);
                batch_loss += r.loss;
                tokens += r.count;
                carries[l] = r.carry;
            }
            loss_sum += batch_loss;
            let grad_norm = clip_by_global_norm(&mut grads, cfg.clip);
            if !batch_loss.is_finite() || !grad_norm.is_finite() {
                return Err(NeuralError::DivergedLoss {
                    epoch: epoch + 1,
                    batch: bi,
                    loss: batch_loss / n_valid.max(1) as f64,
                    grad_norm,
                });
            }
            sgd_step(&mut model.params, &grads, lr);
            log::debug!("epoch {} batch {bi}: loss {:.4}", epoch + 1, batch_loss / n_valid.max(1) as f64);
        }
        let dev_perplexity =
            (!dev_files.is_empty()).then(|| eval::perplexity(&*model, dev_files, cfg.exec));
        let report = EpochReport {
            epoch: epoch + 1,
            lr,
            train_loss: loss_sum / tokens.max(1) as f64,
            train_tokens: tokens,
            dev_perplexity,
        };
        on_epoch(&report);
        reports.push(report);
        lr = decay_lr(lr, cfg.decay);
    }
    Ok(reports)
}

impl<T: Scalar> eval::LanguageModel for Model<T> {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn predict_file(&self, file: &EncodedFile, f: &mut dyn FnMut(usize, &[f64])) {
        let mut state = self.fresh_state();
        let mut buf = Vec::with_capacity(self.vocab_size());
        for i in 0..file.len().saturating_sub(1) {
            let out = self.step(&mut state, file.ids[i], file.intro[i]);
            buf.clear();
            buf.extend(out.probs.iter().map(|p| p.as_f64()));
            f(i + 1, &buf);
        }
    }
}

/// Sum of target log-probabilities and number of targets, walking the
/// stream segment by segment with state carried per lane.
pub fn score_stream<T: Scalar>(model: &Model<T>, stream: &BatchStream, exec: Execution) -> (f64, usize) {
    let lanes = stream.lanes();
    let per_lane = par::map_range(exec, lanes, |l| {
        let mut state = model.fresh_state();
        let (mut lp, mut n) = (0.0, 0usize);
        for b in stream.iter() {
            for step in 0..b.len {
                let at = b.at(l, step);
                if b.pad[at] {
                    continue;
                }
                if b.reset[at] {
                    state = model.fresh_state();
                }
                let out = model.step(&mut state, b.inputs[at], b.intro[at]);
                if b.mask[at] {
                    lp += out.probs[b.targets[at] as usize].as_f64().ln();
                    n += 1;
                }
            }
        }
        (lp, n)
    });
    per_lane.into_iter().fold((0.0, 0), |(a, n), (b, m)| (a + b, n + m))
}

/// Flags the first occurrence of an anonymous identifier since the last
/// reset, for contexts without a symbol sidecar.
#[derive(Debug, Clone)]
pub struct IntroTracker {
    anon: Arc<Vec<bool>>,
    seen: HashSet<u32>,
}

impl IntroTracker {
    pub fn new(vocab: &Vocabulary) -> Self {
        let anon = vocab.tokens().iter().map(|t| looks_anonymous(t)).collect();
        IntroTracker { anon: Arc::new(anon), seen: HashSet::new() }
    }

    /// All ids flagged as anonymous, for models without a vocabulary.
    pub fn from_flags(anon: Vec<bool>) -> Self {
        IntroTracker { anon: Arc::new(anon), seen: HashSet::new() }
    }

    pub fn observe(&mut self, id: u32) -> bool {
        self.anon.get(id as usize).copied().unwrap_or(false) && self.seen.insert(id)
    }

    pub fn reset(&mut self) {
        self.seen.clear();
    }
}

/// A model that can be advanced token by token for decoding.
pub trait Decoder {
    type State: Clone;

    /// Feeds `token` and returns the next-token distribution.
    fn advance(&self, state: &mut Self::State, token: u32) -> Vec<f64>;
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Suggestion {
    pub tokens: Vec<u32>,
    pub logprob: f64,
}

/// Beam search over `m` tokens from `state`, whose next-token distribution
/// is `dist`. Beam width 1 is the greedy chain. Ties prefer smaller ids.
/// The greedy chain is also scored, and returned if the beam missed it.
pub fn beam_search<D: Decoder>(dec: &D, state: &D::State, dist: &[f64], m: usize, beam: usize) -> Suggestion {
    assert!(beam >= 1, "beam width must be positive");
    let search = |width: usize| {
        let mut hyps: Vec<(D::State, Vec<f64>, Vec<u32>, f64)> =
            vec![(state.clone(), dist.to_vec(), Vec::new(), 0.0)];
        for step in 0..m {
            let mut cands: Vec<(usize, u32, f64)> = Vec::new();
            for (hi, (_, d, _, lp)) in hyps.iter().enumerate() {
                for (tok, p) in eval::top_k(d, width) {
                    cands.push((hi, tok, lp + p.ln()));
                }
            }
            cands.sort_by(|a, b| {
                b.2.total_cmp(&a.2).then_with(|| {
                    hyps[a.0].2.iter().chain([&a.1]).cmp(hyps[b.0].2.iter().chain([&b.1]))
                })
            });
            cands.truncate(width);
            let last = step + 1 == m;
            hyps = cands
                .into_iter()
                .map(|(hi, tok, lp)| {
                    let (st, _, toks, _) = &hyps[hi];
                    let mut st = st.clone();
                    let mut toks = toks.clone();
                    toks.push(tok);
                    let d = if last { Vec::new() } else { dec.advance(&mut st, tok) };
                    (st, d, toks, lp)
                })
                .collect();
        }
        let (_, _, tokens, logprob) = hyps.into_iter().next().expect("non-empty beam");
        Suggestion { tokens, logprob }
    };
    let best = search(beam);
    if beam > 1 {
        let greedy = search(1);
        if greedy.logprob > best.logprob {
            return greedy;
        }
    }
    best
}

struct NeuralDecoder<'m, T: Scalar> {
    model: &'m Model<T>,
}

impl<T: Scalar> Decoder for NeuralDecoder<'_, T> {
    type State = (DecodeState<T>, IntroTracker);

    fn advance(&self, state: &mut Self::State, token: u32) -> Vec<f64> {
        let intro = state.1.observe(token);
        let out = self.model.step(&mut state.0, token, intro);
        out.probs.iter().map(|p| p.as_f64()).collect()
    }
}

/// Incremental decoding over a context fed one token at a time.
pub struct Session<'m, T: Scalar> {
    model: &'m Model<T>,
    state: DecodeState<T>,
    tracker: IntroTracker,
    last: Option<StepOutput<T>>,
    fed: usize,
}

impl<'m, T: Scalar> Session<'m, T> {
    pub fn new(model: &'m Model<T>, tracker: IntroTracker) -> Self {
        Session { model, state: model.fresh_state(), tracker, last: None, fed: 0 }
    }

    /// Feeds a token, detecting introductions heuristically.
    pub fn feed(&mut self, id: u32) -> &StepOutput<T> {
        let intro = self.tracker.observe(id);
        self.feed_with_intro(id, intro)
    }

    pub fn feed_with_intro(&mut self, id: u32, intro: bool) -> &StepOutput<T> {
        if intro {
            self.tracker.seen.insert(id);
        }
        self.fed += 1;
        self.last.insert(self.model.step(&mut self.state, id, intro))
    }

    pub fn reset(&mut self) {
        self.state.reset();
        self.tracker.reset();
        self.last = None;
        self.fed = 0;
    }

    pub fn fed(&self) -> usize {
        self.fed
    }

    pub fn state(&self) -> &DecodeState<T> {
        &self.state
    }

    pub fn last(&self) -> Option<&StepOutput<T>> {
        self.last.as_ref()
    }

    pub fn distribution(&self) -> Option<Vec<f64>> {
        self.last.as_ref().map(|o| o.probs.iter().map(|p| p.as_f64()).collect())
    }

    pub fn top_k(&self, k: usize) -> Vec<(u32, f64)> {
        self.distribution().map(|d| eval::top_k(&d, k)).unwrap_or_default()
    }

    /// The next `m` tokens by beam search.
    pub fn suggest(&self, m: usize, beam: usize) -> Result<Suggestion, NeuralError> {
        let dist = self.distribution().ok_or(NeuralError::EmptyContext)?;
        let dec = NeuralDecoder { model: self.model };
        Ok(beam_search(&dec, &(self.state.clone(), self.tracker.clone()), &dist, m, beam))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MemoryWeight {
    pub token: String,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Ranked {
    pub token: String,
    pub prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRecord {
    pub step: usize,
    pub input: String,
    pub intro: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<[f64; 2]>,
    pub memory: Vec<MemoryWeight>,
    pub top5: Vec<Ranked>,
}

/// One record per context token: the pointer diagnostics of the
/// prediction made after consuming it.
pub fn trace<T: Scalar>(
    model: &Model<T>,
    vocab: &Vocabulary,
    ids: &[u32],
    intro: &[bool],
) -> Result<Vec<TraceRecord>, NeuralError> {
    if !matches!(model.config.arch, Architecture::Pointer { .. }) {
        return Err(NeuralError::NotPointer);
    }
    let mut state = model.fresh_state();
    let mut out = Vec::with_capacity(ids.len());
    for (step, (&id, &is_intro)) in ids.iter().zip(intro).enumerate() {
        let o = model.step(&mut state, id, is_intro);
        let probs: Vec<f64> = o.probs.iter().map(|p| p.as_f64()).collect();
        let memory = match &o.alpha {
            Some((a, mids)) => a
                .iter()
                .zip(mids)
                .map(|(&a, &m)| MemoryWeight { token: vocab.token(m).to_string(), alpha: a.as_f64() })
                .collect(),
            None => Vec::new(),
        };
        out.push(TraceRecord {
            step,
            input: vocab.token(id).to_string(),
            intro: is_intro,
            lambda: o.pointer.as_ref().map(|p| [p.lambda[0].as_f64(), p.lambda[1].as_f64()]),
            memory,
            top5: eval::top_k(&probs, 5)
                .into_iter()
                .map(|(t, p)| Ranked { token: vocab.token(t).to_string(), prob: p })
                .collect(),
        });
    }
    Ok(out)
}
