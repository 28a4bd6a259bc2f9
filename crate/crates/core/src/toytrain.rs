//! A deliberately small sequence-to-sequence model trained with teacher
//! forcing, used to produce real training-dynamics traces at desk scale.
//!
//! The source is encoded as the mean embedding of its whitespace tokens. Each
//! output step sees `[source ; embedding(previous token)]` through one tanh
//! layer and a softmax over the whole vocabulary. Training is plain SGD with
//! batch size one over a seeded shuffle; after every epoch a forward-only pass
//! over all instances records the gold-token probability and the strongest
//! competitor probability for every output position.
//!
//! Parameters are drawn uniformly from [-0.1, 0.1] in the order embedding,
//! hidden weights, hidden bias, output weights; the same ChaCha8 stream then
//! drives the per-epoch shuffles.

#![allow(clippy::needless_range_loop)]

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, Instance};
use crate::dynamics::{TraceRecord, TraceSet};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const UNK: &str = "<unk>";

const INIT_SCALE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Reserved tokens first, then whitespace tokens in first-occurrence order
    /// over instruction, input and output of each instance in file order.
    pub fn build(ds: &Dataset) -> Self {
        let mut vocab = Vocab {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for t in [BOS, EOS, UNK] {
            vocab.add(t);
        }
        for inst in ds.instances() {
            let fields = [
                inst.instruction.as_str(),
                inst.input.as_deref().unwrap_or(""),
                inst.output.as_str(),
            ];
            for tok in fields.iter().flat_map(|f| f.split_whitespace()) {
                vocab.add(tok);
            }
        }
        vocab
    }

    fn add(&mut self, tok: &str) {
        if !self.index.contains_key(tok) {
            self.index.insert(tok.to_owned(), self.tokens.len());
            self.tokens.push(tok.to_owned());
        }
    }

    pub fn id(&self, tok: &str) -> usize {
        self.index.get(tok).copied().unwrap_or(self.index[UNK])
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub dim: usize,
    pub hidden: usize,
    pub lr: f64,
    pub epochs: usize,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            dim: 16,
            hidden: 32,
            lr: 0.1,
            epochs: 10,
        }
    }
}

/// Token ids of one instance. `target` ends with EOS, so it is never empty.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoded {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
    pub target_tokens: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Tensor {
    Embedding,
    Hidden,
    Bias,
    Output,
}

impl Tensor {
    pub const ALL: [Tensor; 4] = [
        Tensor::Embedding,
        Tensor::Hidden,
        Tensor::Bias,
        Tensor::Output,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId {
    pub tensor: Tensor,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel<T = f64> {
    vocab: Vocab,
    hp: HyperParams,
    /// V x d
    emb: Vec<T>,
    /// h x 2d
    w: Vec<T>,
    /// h
    b: Vec<T>,
    /// V x h
    u: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub emb: Vec<T>,
    pub w: Vec<T>,
    pub b: Vec<T>,
    pub u: Vec<T>,
}

struct Step<T> {
    prev: usize,
    x: Vec<T>,
    hidden: Vec<T>,
    probs: Vec<T>,
}

fn softmax<T: Scalar>(logits: &mut [T]) {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in logits.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in logits.iter_mut() {
        *v = *v / sum;
    }
}

impl<T: Scalar> ToyModel<T> {
    pub fn init(vocab: Vocab, hp: HyperParams, rng: &mut ChaCha8Rng) -> Self {
        let (v, d, h) = (vocab.len(), hp.dim, hp.hidden);
        let mut draw = |n: usize| -> Vec<T> {
            (0..n)
                .map(|_| T::lit(rng.gen_range(-INIT_SCALE..=INIT_SCALE)))
                .collect()
        };
        let emb = draw(v * d);
        let w = draw(h * 2 * d);
        let b = draw(h);
        let u = draw(v * h);
        ToyModel {
            vocab,
            hp,
            emb,
            w,
            b,
            u,
        }
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn hyper_params(&self) -> &HyperParams {
        &self.hp
    }

    pub fn encode(&self, inst: &Instance) -> Encoded {
        let source = inst
            .source_text()
            .split_whitespace()
            .map(|t| self.vocab.id(t))
            .collect();
        let mut target_tokens: Vec<String> =
            inst.output.split_whitespace().map(str::to_owned).collect();
        target_tokens.push(EOS.to_owned());
        let target = target_tokens.iter().map(|t| self.vocab.id(t)).collect();
        Encoded {
            source,
            target,
            target_tokens,
        }
    }

    fn source_vector(&self, enc: &Encoded) -> Vec<T> {
        let d = self.hp.dim;
        let mut s = vec![T::zero(); d];
        if enc.source.is_empty() {
            return s;
        }
        for &t in &enc.source {
            for k in 0..d {
                s[k] = s[k] + self.emb[t * d + k];
            }
        }
        let n = T::from_count(enc.source.len());
        s.iter_mut().for_each(|v| *v = *v / n);
        s
    }

    fn forward(&self, enc: &Encoded) -> Vec<Step<T>> {
        let (d, h, v) = (self.hp.dim, self.hp.hidden, self.vocab.len());
        let s = self.source_vector(enc);
        let mut prev = self.vocab.id(BOS);
        let mut steps = Vec::with_capacity(enc.target.len());
        for &gold in &enc.target {
            let mut x = s.clone();
            x.extend_from_slice(&self.emb[prev * d..(prev + 1) * d]);
            let hidden: Vec<T> = (0..h)
                .map(|i| {
                    let row = &self.w[i * 2 * d..(i + 1) * 2 * d];
                    let mut a = self.b[i];
                    for (wij, xj) in row.iter().zip(&x) {
                        a = a + *wij * *xj;
                    }
                    a.tanh()
                })
                .collect();
            let mut probs: Vec<T> = (0..v)
                .map(|o| {
                    let row = &self.u[o * h..(o + 1) * h];
                    let mut z = T::zero();
                    for (uo, hi) in row.iter().zip(&hidden) {
                        z = z + *uo * *hi;
                    }
                    z
                })
                .collect();
            softmax(&mut probs);
            steps.push(Step {
                prev,
                x,
                hidden,
                probs,
            });
            prev = gold;
        }
        steps
    }

    /// Mean token cross-entropy of one instance.
    pub fn loss(&self, enc: &Encoded) -> T {
        let steps = self.forward(enc);
        let mut total = T::zero();
        for (step, &gold) in steps.iter().zip(&enc.target) {
            total = total - step.probs[gold].ln();
        }
        total / T::from_count(enc.target.len())
    }

    /// Gold-token and strongest-competitor probability per output position.
    pub fn token_probs(&self, enc: &Encoded) -> (Vec<T>, Vec<T>) {
        let steps = self.forward(enc);
        let mut p = Vec::with_capacity(steps.len());
        let mut q = Vec::with_capacity(steps.len());
        for (step, &gold) in steps.iter().zip(&enc.target) {
            p.push(step.probs[gold]);
            let other = step
                .probs
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != gold)
                .map(|(_, &v)| v)
                .fold(T::zero(), T::max);
            q.push(other);
        }
        (p, q)
    }

    /// Loss and analytic gradients of one instance.
    pub fn gradients(&self, enc: &Encoded) -> (T, Gradients<T>) {
        let (d, h, v) = (self.hp.dim, self.hp.hidden, self.vocab.len());
        let mut g = Gradients {
            emb: vec![T::zero(); self.emb.len()],
            w: vec![T::zero(); self.w.len()],
            b: vec![T::zero(); self.b.len()],
            u: vec![T::zero(); self.u.len()],
        };
        let steps = self.forward(enc);
        let len = T::from_count(enc.target.len());
        let mut loss = T::zero();
        let mut ds = vec![T::zero(); d];
        for (step, &gold) in steps.iter().zip(&enc.target) {
            loss = loss - step.probs[gold].ln();
            let mut dh = vec![T::zero(); h];
            for o in 0..v {
                let indicator = if o == gold { T::one() } else { T::zero() };
                let dz = (step.probs[o] - indicator) / len;
                for i in 0..h {
                    g.u[o * h + i] = g.u[o * h + i] + dz * step.hidden[i];
                    dh[i] = dh[i] + self.u[o * h + i] * dz;
                }
            }
            let mut dx = vec![T::zero(); 2 * d];
            for i in 0..h {
                let hi = step.hidden[i];
                let da = dh[i] * (T::one() - hi * hi);
                g.b[i] = g.b[i] + da;
                for j in 0..2 * d {
                    g.w[i * 2 * d + j] = g.w[i * 2 * d + j] + da * step.x[j];
                    dx[j] = dx[j] + self.w[i * 2 * d + j] * da;
                }
            }
            for k in 0..d {
                ds[k] = ds[k] + dx[k];
                let e = step.prev * d + k;
                g.emb[e] = g.emb[e] + dx[d + k];
            }
        }
        if !enc.source.is_empty() {
            let n = T::from_count(enc.source.len());
            for &t in &enc.source {
                for k in 0..d {
                    g.emb[t * d + k] = g.emb[t * d + k] + ds[k] / n;
                }
            }
        }
        (loss / len, g)
    }

    fn apply(&mut self, g: &Gradients<T>, lr: T) {
        for (p, gp) in [
            (&mut self.emb, &g.emb),
            (&mut self.w, &g.w),
            (&mut self.b, &g.b),
            (&mut self.u, &g.u),
        ] {
            for (pv, gv) in p.iter_mut().zip(gp) {
                *pv = *pv - lr * *gv;
            }
        }
    }

    fn tensor(&self, t: Tensor) -> &Vec<T> {
        match t {
            Tensor::Embedding => &self.emb,
            Tensor::Hidden => &self.w,
            Tensor::Bias => &self.b,
            Tensor::Output => &self.u,
        }
    }

    fn tensor_mut(&mut self, t: Tensor) -> &mut Vec<T> {
        match t {
            Tensor::Embedding => &mut self.emb,
            Tensor::Hidden => &mut self.w,
            Tensor::Bias => &mut self.b,
            Tensor::Output => &mut self.u,
        }
    }

    pub fn tensor_len(&self, t: Tensor) -> usize {
        self.tensor(t).len()
    }

    pub fn param(&self, id: ParamId) -> T {
        self.tensor(id.tensor)[id.index]
    }

    pub fn set_param(&mut self, id: ParamId, value: T) {
        self.tensor_mut(id.tensor)[id.index] = value;
    }

    pub fn fill(&mut self, t: Tensor, value: T) {
        self.tensor_mut(t).iter_mut().for_each(|v| *v = value);
    }

    pub fn is_finite(&self) -> bool {
        Tensor::ALL
            .iter()
            .all(|&t| self.tensor(t).iter().all(|v| v.is_finite()))
    }
}

impl<T> Gradients<T> {
    pub fn get(&self, id: ParamId) -> &T {
        match id.tensor {
            Tensor::Embedding => &self.emb[id.index],
            Tensor::Hidden => &self.w[id.index],
            Tensor::Bias => &self.b[id.index],
            Tensor::Output => &self.u[id.index],
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T = f64> {
    pub model: ToyModel<T>,
    pub traces: TraceSet<T>,
    /// Mean training loss of each epoch.
    pub epoch_losses: Vec<T>,
}

/// Trains a fresh model on `ds` and returns its traces.
pub fn train_toy<T: Scalar>(ds: &Dataset, hp: &HyperParams, seed: u64) -> Result<TraceSet<T>> {
    train_toy_full(ds, hp, seed).map(|o| o.traces)
}

pub fn train_toy_full<T: Scalar>(
    ds: &Dataset,
    hp: &HyperParams,
    seed: u64,
) -> Result<TrainOutcome<T>> {
    if ds.is_empty() {
        return Err(Error::EmptySet("cannot train on an empty dataset".into()));
    }
    if hp.epochs == 0 || hp.dim == 0 || hp.hidden == 0 {
        return Err(Error::Usage(
            "epochs, dim and hidden must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = ToyModel::<T>::init(Vocab::build(ds), *hp, &mut rng);
    let encoded: Vec<Encoded> = ds.instances().iter().map(|i| model.encode(i)).collect();
    let lr = T::lit(hp.lr);

    // per instance: (p rows, q rows)
    type Rows<T> = Vec<Vec<T>>;
    let mut records: Vec<(Rows<T>, Rows<T>)> = vec![(Vec::new(), Vec::new()); ds.len()];
    let mut epoch_losses = Vec::with_capacity(hp.epochs);
    let mut order: Vec<usize> = (0..ds.len()).collect();
    for epoch in 0..hp.epochs {
        order.shuffle(&mut rng);
        let mut total = T::zero();
        for &i in &order {
            let (loss, grads) = model.gradients(&encoded[i]);
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch: epoch + 1,
                    id: ds.instances()[i].id.clone(),
                });
            }
            total = total + loss;
            model.apply(&grads, lr);
        }
        if !model.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch: epoch + 1,
                id: ds.instances()[*order.last().expect("nonempty")].id.clone(),
            });
        }
        epoch_losses.push(total / T::from_count(ds.len()));
        for (slot, enc) in records.iter_mut().zip(&encoded) {
            let (p, q) = model.token_probs(enc);
            slot.0.push(p);
            slot.1.push(q);
        }
    }

    let mut traces = TraceSet::new();
    for ((inst, enc), (p, q)) in ds.instances().iter().zip(&encoded).zip(records) {
        traces.insert(TraceRecord::new(
            inst.id.clone(),
            enc.target_tokens.clone(),
            p,
            q,
        )?)?;
    }
    Ok(TrainOutcome {
        model,
        traces,
        epoch_losses,
    })
}

/// `per_tensor` uniformly drawn parameters from each tensor.
pub fn sample_params<T: Scalar>(model: &ToyModel<T>, per_tensor: usize, seed: u64) -> Vec<ParamId> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(per_tensor * Tensor::ALL.len());
    for tensor in Tensor::ALL {
        let n = model.tensor_len(tensor);
        for _ in 0..per_tensor {
            out.push(ParamId {
                tensor,
                index: rng.gen_range(0..n),
            });
        }
    }
    out
}

/// Relative disagreement used by the gradient check.
pub fn relative_error<T: Scalar>(analytic: T, numeric: T) -> T {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(T::lit(1e-8))
}

/// Central finite difference of the instance loss along one parameter.
pub fn numeric_gradient<T: Scalar>(model: &ToyModel<T>, enc: &Encoded, id: ParamId, step: T) -> T {
    let mut probe = model.clone();
    let base = model.param(id);
    probe.set_param(id, base + step);
    let plus = probe.loss(enc);
    probe.set_param(id, base - step);
    let minus = probe.loss(enc);
    (plus - minus) / (step + step)
}

/// Max relative error between analytic and numeric gradients over `params`.
pub fn gradient_check_params<T: Scalar>(
    model: &ToyModel<T>,
    instance: &Instance,
    step: T,
    params: &[ParamId],
) -> T {
    let enc = model.encode(instance);
    let (_, grads) = model.gradients(&enc);
    params
        .iter()
        .map(|&id| relative_error(*grads.get(id), numeric_gradient(model, &enc, id, step)))
        .fold(T::zero(), T::max)
}

/// Gradient check over 20 parameters, five per tensor, drawn with a fixed seed.
pub fn gradient_check<T: Scalar>(model: &ToyModel<T>, instance: &Instance, step: T) -> T {
    let params = sample_params(model, 5, 0);
    gradient_check_params(model, instance, step, &params)
}
