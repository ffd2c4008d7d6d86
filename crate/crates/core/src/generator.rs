//! The generator agent: a gated-recurrent decoder conditioned on the image
//! embedding, defining the policy p(y_t | y_{1:t-1}, x). Supports sampling
//! and greedy decoding, teacher-forced likelihood training, and REINFORCE
//! updates with a scalar baseline.
//!
//! All gradients are hand-derived backprop through the unrolled recurrence;
//! there is no autograd underneath.

use std::path::Path;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{expect_schema, CheckpointReader, CheckpointWriter};
use crate::corpus;
use crate::error::{Error, Result};
use crate::mathutil::{argmax, log_softmax, softmax};
use crate::num::Scalar;
use crate::params::{self, BlockMut, BlockRef};
use crate::rng::{rng_for, stream, uniform_matrix, uniform_vector};

/// Tolerance for detecting rollouts produced by a different model state.
pub const STALE_ROLLOUT_TOL: f64 = 1e-6;

/// GRU decoder parameters. Shapes: V vocabulary, E token embedding, H hidden,
/// K conditioning (image embedding) size.
#[derive(Debug, Clone, PartialEq)]
pub struct GruDecoder<F: Scalar> {
    pub input_w: Array2<F>, // H x K, image projection
    pub input_b: Array1<F>, // H
    pub embed: Array2<F>,   // V x E, token embeddings
    pub wz: Array2<F>,      // H x E, update gate
    pub uz: Array2<F>,      // H x H
    pub bz: Array1<F>,      // H
    pub wr: Array2<F>,      // H x E, reset gate
    pub ur: Array2<F>,      // H x H
    pub br: Array1<F>,      // H
    pub wc: Array2<F>,      // H x E, candidate
    pub uc: Array2<F>,      // H x H
    pub bc: Array1<F>,      // H
    pub out_w: Array2<F>,   // V x H
    pub out_b: Array1<F>,   // V
    pub t_max: usize,
    pub seed: u64,
}

impl<F: Scalar> GruDecoder<F> {
    /// Uniform [-0.08, 0.08] initialization, seed-controlled.
    pub fn new(v: usize, e: usize, h: usize, k: usize, t_max: usize, seed: u64) -> Self {
        let mut rng = rng_for(seed, stream::GENERATOR_INIT);
        let s = 0.08;
        GruDecoder {
            input_w: uniform_matrix(&mut rng, h, k, s),
            input_b: uniform_vector(&mut rng, h, s),
            embed: uniform_matrix(&mut rng, v, e, s),
            wz: uniform_matrix(&mut rng, h, e, s),
            uz: uniform_matrix(&mut rng, h, h, s),
            bz: uniform_vector(&mut rng, h, s),
            wr: uniform_matrix(&mut rng, h, e, s),
            ur: uniform_matrix(&mut rng, h, h, s),
            br: uniform_vector(&mut rng, h, s),
            wc: uniform_matrix(&mut rng, h, e, s),
            uc: uniform_matrix(&mut rng, h, h, s),
            bc: uniform_vector(&mut rng, h, s),
            out_w: uniform_matrix(&mut rng, v, h, s),
            out_b: uniform_vector(&mut rng, v, s),
            t_max,
            seed,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.embed.nrows()
    }

    pub fn embed_size(&self) -> usize {
        self.embed.ncols()
    }

    pub fn hidden_size(&self) -> usize {
        self.input_w.nrows()
    }

    pub fn cond_size(&self) -> usize {
        self.input_w.ncols()
    }

    /// h_0 = tanh(P x + p)
    pub fn init_state(&self, x: &Array1<F>) -> Result<Array1<F>> {
        if x.len() != self.cond_size() {
            return Err(Error::dim(self.cond_size(), x.len(), "image embedding"));
        }
        Ok((self.input_w.dot(x) + &self.input_b).mapv(F::tanh))
    }

    /// One recurrence step: update/reset gates, tanh candidate, convex
    /// combination (a saturated update gate carries the state through), then
    /// the output projection.
    pub fn step(&self, h: &Array1<F>, y_prev: u32, model_logits: bool) -> Result<StepOutput<F>> {
        if (y_prev as usize) >= self.vocab_size() {
            return Err(Error::BadTokenId {
                id: y_prev,
                size: self.vocab_size(),
            });
        }
        let e = self.embed.row(y_prev as usize).to_owned();
        let z = (self.wz.dot(&e) + self.uz.dot(h) + &self.bz).mapv(crate::mathutil::sigmoid);
        let r = (self.wr.dot(&e) + self.ur.dot(h) + &self.br).mapv(crate::mathutil::sigmoid);
        let rh = &r * h;
        let c = (self.wc.dot(&e) + self.uc.dot(&rh) + &self.bc).mapv(F::tanh);
        let one = F::one();
        let h_next = &z * h + &z.mapv(|zi| one - zi) * &c;
        let logits = if model_logits {
            Some(self.out_w.dot(&h_next) + &self.out_b)
        } else {
            None
        };
        Ok(StepOutput {
            z,
            r,
            c,
            h: h_next,
            logits,
        })
    }

    pub fn all_finite(&self) -> bool {
        self.flatten().iter().all(|v| v.is_finite())
    }

    /// Parameter blocks flattened in the declared checkpoint order.
    pub fn flatten(&self) -> Vec<f64> {
        params::flatten(&self.blocks())
    }

    pub fn param_count(&self) -> usize {
        params::count(&self.blocks())
    }

    /// Overwrites every parameter from a flat vector (checkpoint order).
    pub fn assign_from_flat(&mut self, flat: &[f64]) -> Result<()> {
        params::assign(self.blocks_mut(), flat)
    }

    fn blocks(&self) -> Vec<BlockRef<'_, F>> {
        vec![
            BlockRef::M(&self.input_w),
            BlockRef::V(&self.input_b),
            BlockRef::M(&self.embed),
            BlockRef::M(&self.wz),
            BlockRef::M(&self.uz),
            BlockRef::V(&self.bz),
            BlockRef::M(&self.wr),
            BlockRef::M(&self.ur),
            BlockRef::V(&self.br),
            BlockRef::M(&self.wc),
            BlockRef::M(&self.uc),
            BlockRef::V(&self.bc),
            BlockRef::M(&self.out_w),
            BlockRef::V(&self.out_b),
        ]
    }

    fn blocks_mut(&mut self) -> Vec<BlockMut<'_, F>> {
        vec![
            BlockMut::M(&mut self.input_w),
            BlockMut::V(&mut self.input_b),
            BlockMut::M(&mut self.embed),
            BlockMut::M(&mut self.wz),
            BlockMut::M(&mut self.uz),
            BlockMut::V(&mut self.bz),
            BlockMut::M(&mut self.wr),
            BlockMut::M(&mut self.ur),
            BlockMut::V(&mut self.br),
            BlockMut::M(&mut self.wc),
            BlockMut::M(&mut self.uc),
            BlockMut::V(&mut self.bc),
            BlockMut::M(&mut self.out_w),
            BlockMut::V(&mut self.out_b),
        ]
    }

    /// Gradient-ascent update: every parameter moves by `+lr * grad`.
    pub fn apply_ascent(&mut self, grads: &GruGrads<F>, lr: F) {
        self.input_w.scaled_add(lr, &grads.input_w);
        self.input_b.scaled_add(lr, &grads.input_b);
        self.embed.scaled_add(lr, &grads.embed);
        self.wz.scaled_add(lr, &grads.wz);
        self.uz.scaled_add(lr, &grads.uz);
        self.bz.scaled_add(lr, &grads.bz);
        self.wr.scaled_add(lr, &grads.wr);
        self.ur.scaled_add(lr, &grads.ur);
        self.br.scaled_add(lr, &grads.br);
        self.wc.scaled_add(lr, &grads.wc);
        self.uc.scaled_add(lr, &grads.uc);
        self.bc.scaled_add(lr, &grads.bc);
        self.out_w.scaled_add(lr, &grads.out_w);
        self.out_b.scaled_add(lr, &grads.out_b);
    }

    pub fn apply_descent(&mut self, grads: &GruGrads<F>, lr: F) {
        self.apply_ascent(grads, -lr);
    }

    const SCHEMA: &'static str = "gen-v1";

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let header = GenHeader {
            schema: Self::SCHEMA.into(),
            v: self.vocab_size(),
            e: self.embed_size(),
            h: self.hidden_size(),
            k: self.cond_size(),
            t_max: self.t_max,
            seed: self.seed,
        };
        let mut w = CheckpointWriter::create(path, &header)?;
        w.write_matrix(&self.input_w)?;
        w.write_vector(&self.input_b)?;
        w.write_matrix(&self.embed)?;
        w.write_matrix(&self.wz)?;
        w.write_matrix(&self.uz)?;
        w.write_vector(&self.bz)?;
        w.write_matrix(&self.wr)?;
        w.write_matrix(&self.ur)?;
        w.write_vector(&self.br)?;
        w.write_matrix(&self.wc)?;
        w.write_matrix(&self.uc)?;
        w.write_vector(&self.bc)?;
        w.write_matrix(&self.out_w)?;
        w.write_vector(&self.out_b)?;
        w.finish()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (hd, mut r) = CheckpointReader::open::<GenHeader>(path)?;
        expect_schema(&hd.schema, Self::SCHEMA)?;
        let model = GruDecoder {
            input_w: r.read_matrix(hd.h, hd.k)?,
            input_b: r.read_vector(hd.h)?,
            embed: r.read_matrix(hd.v, hd.e)?,
            wz: r.read_matrix(hd.h, hd.e)?,
            uz: r.read_matrix(hd.h, hd.h)?,
            bz: r.read_vector(hd.h)?,
            wr: r.read_matrix(hd.h, hd.e)?,
            ur: r.read_matrix(hd.h, hd.h)?,
            br: r.read_vector(hd.h)?,
            wc: r.read_matrix(hd.h, hd.e)?,
            uc: r.read_matrix(hd.h, hd.h)?,
            bc: r.read_vector(hd.h)?,
            out_w: r.read_matrix(hd.v, hd.h)?,
            out_b: r.read_vector(hd.v)?,
            t_max: hd.t_max,
            seed: hd.seed,
        };
        r.finish()?;
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct GenHeader {
    schema: String,
    #[serde(rename = "V")]
    v: usize,
    #[serde(rename = "E")]
    e: usize,
    #[serde(rename = "H")]
    h: usize,
    #[serde(rename = "K")]
    k: usize,
    #[serde(rename = "T_max")]
    t_max: usize,
    seed: u64,
}

/// Output of one recurrence step.
pub struct StepOutput<F: Scalar> {
    pub z: Array1<F>,
    pub r: Array1<F>,
    pub c: Array1<F>,
    pub h: Array1<F>,
    pub logits: Option<Array1<F>>,
}

/// Gradients for every parameter block of the decoder.
#[derive(Debug, Clone)]
pub struct GruGrads<F: Scalar> {
    pub input_w: Array2<F>,
    pub input_b: Array1<F>,
    pub embed: Array2<F>,
    pub wz: Array2<F>,
    pub uz: Array2<F>,
    pub bz: Array1<F>,
    pub wr: Array2<F>,
    pub ur: Array2<F>,
    pub br: Array1<F>,
    pub wc: Array2<F>,
    pub uc: Array2<F>,
    pub bc: Array1<F>,
    pub out_w: Array2<F>,
    pub out_b: Array1<F>,
}

impl<F: Scalar> GruGrads<F> {
    pub fn zeros_like(model: &GruDecoder<F>) -> Self {
        GruGrads {
            input_w: Array2::zeros(model.input_w.dim()),
            input_b: Array1::zeros(model.input_b.len()),
            embed: Array2::zeros(model.embed.dim()),
            wz: Array2::zeros(model.wz.dim()),
            uz: Array2::zeros(model.uz.dim()),
            bz: Array1::zeros(model.bz.len()),
            wr: Array2::zeros(model.wr.dim()),
            ur: Array2::zeros(model.ur.dim()),
            br: Array1::zeros(model.br.len()),
            wc: Array2::zeros(model.wc.dim()),
            uc: Array2::zeros(model.uc.dim()),
            bc: Array1::zeros(model.bc.len()),
            out_w: Array2::zeros(model.out_w.dim()),
            out_b: Array1::zeros(model.out_b.len()),
        }
    }

    pub fn scale(&mut self, factor: F) {
        self.input_w.mapv_inplace(|v| v * factor);
        self.input_b.mapv_inplace(|v| v * factor);
        self.embed.mapv_inplace(|v| v * factor);
        self.wz.mapv_inplace(|v| v * factor);
        self.uz.mapv_inplace(|v| v * factor);
        self.bz.mapv_inplace(|v| v * factor);
        self.wr.mapv_inplace(|v| v * factor);
        self.ur.mapv_inplace(|v| v * factor);
        self.br.mapv_inplace(|v| v * factor);
        self.wc.mapv_inplace(|v| v * factor);
        self.uc.mapv_inplace(|v| v * factor);
        self.bc.mapv_inplace(|v| v * factor);
        self.out_w.mapv_inplace(|v| v * factor);
        self.out_b.mapv_inplace(|v| v * factor);
    }

    pub fn add(&mut self, other: &GruGrads<F>) {
        self.input_w += &other.input_w;
        self.input_b += &other.input_b;
        self.embed += &other.embed;
        self.wz += &other.wz;
        self.uz += &other.uz;
        self.bz += &other.bz;
        self.wr += &other.wr;
        self.ur += &other.ur;
        self.br += &other.br;
        self.wc += &other.wc;
        self.uc += &other.uc;
        self.bc += &other.bc;
        self.out_w += &other.out_w;
        self.out_b += &other.out_b;
    }

    /// Flattened in the same order as `GruDecoder::flatten`.
    pub fn flatten(&self) -> Vec<f64> {
        params::flatten(&[
            BlockRef::M(&self.input_w),
            BlockRef::V(&self.input_b),
            BlockRef::M(&self.embed),
            BlockRef::M(&self.wz),
            BlockRef::M(&self.uz),
            BlockRef::V(&self.bz),
            BlockRef::M(&self.wr),
            BlockRef::M(&self.ur),
            BlockRef::V(&self.br),
            BlockRef::M(&self.wc),
            BlockRef::M(&self.uc),
            BlockRef::V(&self.bc),
            BlockRef::M(&self.out_w),
            BlockRef::V(&self.out_b),
        ])
    }
}

// ---------------------------------------------------------------------------
// Unrolled forward/backward
// ---------------------------------------------------------------------------

struct StepTrace<F: Scalar> {
    input: u32,
    h_prev: Array1<F>,
    z: Array1<F>,
    r: Array1<F>,
    c: Array1<F>,
    h: Array1<F>,
}

/// Cached forward pass over a fixed input token sequence.
pub struct ForwardTrace<F: Scalar> {
    x: Array1<F>,
    h0: Array1<F>,
    steps: Vec<StepTrace<F>>,
    /// softmax over the output logits at each step
    pub probs: Vec<Array1<F>>,
    pub log_probs: Vec<Array1<F>>,
}

/// Runs the decoder over `inputs` (the tokens fed in, starting with BOS) and
/// caches everything backprop needs.
pub fn unroll<F: Scalar>(
    model: &GruDecoder<F>,
    x: &Array1<F>,
    inputs: &[u32],
) -> Result<ForwardTrace<F>> {
    let h0 = model.init_state(x)?;
    let mut h = h0.clone();
    let mut steps = Vec::with_capacity(inputs.len());
    let mut probs = Vec::with_capacity(inputs.len());
    let mut log_probs = Vec::with_capacity(inputs.len());
    for &tok in inputs {
        let out = model.step(&h, tok, true)?;
        let logits = out.logits.expect("requested logits");
        probs.push(softmax(&logits));
        log_probs.push(log_softmax(&logits));
        steps.push(StepTrace {
            input: tok,
            h_prev: h.clone(),
            z: out.z,
            r: out.r,
            c: out.c,
            h: out.h.clone(),
        });
        h = out.h;
    }
    Ok(ForwardTrace {
        x: x.clone(),
        h0,
        steps,
        probs,
        log_probs,
    })
}

/// Backprop through the unrolled recurrence given the gradient of some scalar
/// objective with respect to the logits at every step.
pub fn backprop<F: Scalar>(
    model: &GruDecoder<F>,
    trace: &ForwardTrace<F>,
    dlogits: &[Array1<F>],
) -> GruGrads<F> {
    assert_eq!(dlogits.len(), trace.steps.len(), "one dlogits per step");
    let mut grads = GruGrads::zeros_like(model);
    let one = F::one();
    let mut dh: Array1<F> = Array1::zeros(model.hidden_size());
    for (t, step) in trace.steps.iter().enumerate().rev() {
        let dl = &dlogits[t];
        // logits = W_o h + b_o
        outer_add(&mut grads.out_w, dl, &step.h);
        grads.out_b += dl;
        dh = dh + model.out_w.t().dot(dl);

        // h = z * h_prev + (1 - z) * c
        let dz = &dh * &(&step.h_prev - &step.c);
        let dc = &dh * &step.z.mapv(|z| one - z);
        let mut dh_prev = &dh * &step.z;

        // c = tanh(W_c e + U_c (r * h_prev) + b_c)
        let da_c = &dc * &step.c.mapv(|c| one - c * c);
        let e = model.embed.row(step.input as usize).to_owned();
        outer_add(&mut grads.wc, &da_c, &e);
        let rh = &step.r * &step.h_prev;
        outer_add(&mut grads.uc, &da_c, &rh);
        grads.bc += &da_c;
        let d_rh = model.uc.t().dot(&da_c);
        let dr = &d_rh * &step.h_prev;
        dh_prev = dh_prev + &d_rh * &step.r;

        // r = sigmoid(W_r e + U_r h_prev + b_r)
        let da_r = &dr * &step.r.mapv(|r| r * (one - r));
        outer_add(&mut grads.wr, &da_r, &e);
        outer_add(&mut grads.ur, &da_r, &step.h_prev);
        grads.br += &da_r;
        dh_prev = dh_prev + model.ur.t().dot(&da_r);

        // z = sigmoid(W_z e + U_z h_prev + b_z)
        let da_z = &dz * &step.z.mapv(|z| z * (one - z));
        outer_add(&mut grads.wz, &da_z, &e);
        outer_add(&mut grads.uz, &da_z, &step.h_prev);
        grads.bz += &da_z;
        dh_prev = dh_prev + model.uz.t().dot(&da_z);

        // token embedding row
        let de = model.wz.t().dot(&da_z) + model.wr.t().dot(&da_r) + model.wc.t().dot(&da_c);
        let mut row = grads.embed.row_mut(step.input as usize);
        row += &de;

        dh = dh_prev;
    }
    // h0 = tanh(P x + p)
    let da0 = &dh * &trace.h0.mapv(|h| one - h * h);
    outer_add(&mut grads.input_w, &da0, &trace.x);
    grads.input_b += &da0;
    grads
}

fn outer_add<F: Scalar>(acc: &mut Array2<F>, a: &Array1<F>, b: &Array1<F>) {
    for (i, &ai) in a.iter().enumerate() {
        if ai != F::zero() {
            let mut row = acc.row_mut(i);
            row.scaled_add(ai, b);
        }
    }
}

// ---------------------------------------------------------------------------
// Decoding
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeMode {
    Greedy,
    Sample,
}

/// Decoding controls. `t_max` bounds the whole sequence including the BOS
/// prefix; `eos: None` disables early termination (fixed-length decoding,
/// used by enumeration oracles).
#[derive(Debug, Clone)]
pub struct DecodeConfig {
    pub t_max: usize,
    pub mode: DecodeMode,
    pub temperature: f64,
    pub seed: u64,
    pub bos: u32,
    pub eos: Option<u32>,
}

impl DecodeConfig {
    pub fn greedy(t_max: usize) -> Self {
        DecodeConfig {
            t_max,
            mode: DecodeMode::Greedy,
            temperature: 1.0,
            seed: 0,
            bos: corpus::BOS,
            eos: Some(corpus::EOS),
        }
    }

    pub fn sample(t_max: usize, temperature: f64, seed: u64) -> Self {
        DecodeConfig {
            t_max,
            mode: DecodeMode::Sample,
            temperature,
            seed,
            bos: corpus::BOS,
            eos: Some(corpus::EOS),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_max < 3 {
            return Err(Error::InvalidConfig("t_max must be >= 3".into()));
        }
        if self.temperature <= 0.0 {
            return Err(Error::InvalidConfig("temperature must be > 0".into()));
        }
        Ok(())
    }
}

/// One decoded sequence: the generated tokens (BOS excluded, EOS included
/// when emitted) with their log-probabilities under the temperature-1 policy.
#[derive(Debug, Clone)]
pub struct Rollout<F: Scalar> {
    pub tokens: Vec<u32>,
    pub log_probs: Vec<F>,
    pub terminal: bool,
}

impl<F: Scalar> Rollout<F> {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Sum of the per-step log-probabilities.
    pub fn log_prob(&self) -> F {
        self.log_probs.iter().copied().sum()
    }
}

/// Samples a rollout, drawing each token from softmax(logits / temperature)
/// and recording its log-probability under the temperature-1 distribution.
pub fn sample_sequence<F: Scalar>(
    model: &GruDecoder<F>,
    x: &Array1<F>,
    config: &DecodeConfig,
) -> Result<Rollout<F>> {
    let mut rng = rng_for(config.seed, stream::ROLLOUT);
    sample_sequence_with(model, x, config, &mut rng)
}

/// As `sample_sequence` but drawing randomness from the caller's stream.
pub fn sample_sequence_with<F: Scalar>(
    model: &GruDecoder<F>,
    x: &Array1<F>,
    config: &DecodeConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Rollout<F>> {
    config.validate()?;
    decode(model, x, config, Some(rng))
}

/// Deterministic argmax decoding; ties break toward the lowest token id.
pub fn greedy_decode<F: Scalar>(
    model: &GruDecoder<F>,
    x: &Array1<F>,
    config: &DecodeConfig,
) -> Result<Rollout<F>> {
    config.validate()?;
    decode(model, x, config, None)
}

fn decode<F: Scalar>(
    model: &GruDecoder<F>,
    x: &Array1<F>,
    config: &DecodeConfig,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<Rollout<F>> {
    let mut h = model.init_state(x)?;
    let mut prev = config.bos;
    let mut tokens = Vec::new();
    let mut log_probs = Vec::new();
    let mut terminal = false;
    // the BOS prefix counts against t_max
    while tokens.len() + 1 < config.t_max {
        let out = model.step(&h, prev, true)?;
        let logits = out.logits.expect("requested logits");
        let log_p = log_softmax(&logits);
        let tok = match (config.mode, rng.as_deref_mut()) {
            (DecodeMode::Sample, Some(rng)) => {
                let temp = F::from_f64_lossy(config.temperature);
                let scaled = logits.mapv(|l| l / temp);
                let p = softmax(&scaled);
                let u = F::from_f64_lossy(rng.gen::<f64>());
                let mut acc = F::zero();
                let mut chosen = p.len() - 1;
                for (i, &pi) in p.iter().enumerate() {
                    acc += pi;
                    if u < acc {
                        chosen = i;
                        break;
                    }
                }
                chosen as u32
            }
            _ => argmax(&logits) as u32,
        };
        tokens.push(tok);
        log_probs.push(log_p[tok as usize]);
        h = out.h;
        prev = tok;
        if Some(tok) == config.eos {
            terminal = true;
            break;
        }
    }
    Ok(Rollout {
        tokens,
        log_probs,
        terminal,
    })
}

// ---------------------------------------------------------------------------
// Objectives
// ---------------------------------------------------------------------------

/// Teacher-forced negative log-likelihood, averaged over the predicted steps.
/// `target` is a full tokenized sequence starting with BOS.
pub fn mle_loss<F: Scalar>(model: &GruDecoder<F>, x: &Array1<F>, target: &[u32]) -> Result<F> {
    if target.len() < 2 {
        return Err(Error::EmptyInput("target needs BOS plus at least one token"));
    }
    let inputs = &target[..target.len() - 1];
    let trace = unroll(model, x, inputs)?;
    let mut total = F::zero();
    for (t, lp) in trace.log_probs.iter().enumerate() {
        total += lp[target[t + 1] as usize];
    }
    Ok(-total / F::from_f64_lossy((target.len() - 1) as f64))
}

/// NLL plus its gradient (descent direction: apply with `apply_descent`).
pub fn mle_loss_grads<F: Scalar>(
    model: &GruDecoder<F>,
    x: &Array1<F>,
    target: &[u32],
) -> Result<(F, GruGrads<F>)> {
    if target.len() < 2 {
        return Err(Error::EmptyInput("target needs BOS plus at least one token"));
    }
    let inputs = &target[..target.len() - 1];
    let trace = unroll(model, x, inputs)?;
    let steps = F::from_f64_lossy((target.len() - 1) as f64);
    let mut total = F::zero();
    let mut dlogits = Vec::with_capacity(inputs.len());
    for (t, (probs, lp)) in trace.probs.iter().zip(&trace.log_probs).enumerate() {
        let y = target[t + 1] as usize;
        total += lp[y];
        // d NLL / d logits = (p - onehot(y)) / steps
        let mut dl = probs / steps;
        dl[y] -= F::one() / steps;
        dlogits.push(dl);
    }
    let grads = backprop(model, &trace, &dlogits);
    Ok((-total / steps, grads))
}

/// Log-probability of a generated token sequence with the gradient of the
/// summed log-probability (ascent direction). `tokens` excludes BOS.
pub fn sequence_logprob_grads<F: Scalar>(
    model: &GruDecoder<F>,
    x: &Array1<F>,
    tokens: &[u32],
    bos: u32,
) -> Result<(Vec<F>, GruGrads<F>)> {
    if tokens.is_empty() {
        return Err(Error::EmptyInput("empty rollout"));
    }
    let mut inputs = Vec::with_capacity(tokens.len());
    inputs.push(bos);
    inputs.extend_from_slice(&tokens[..tokens.len() - 1]);
    let trace = unroll(model, x, &inputs)?;
    let mut per_step = Vec::with_capacity(tokens.len());
    let mut dlogits = Vec::with_capacity(tokens.len());
    for (t, (probs, lp)) in trace.probs.iter().zip(&trace.log_probs).enumerate() {
        let y = tokens[t] as usize;
        per_step.push(lp[y]);
        // d sum(log p) / d logits = onehot(y) - p
        let mut dl = probs.mapv(|p| -p);
        dl[y] += F::one();
        dlogits.push(dl);
    }
    let grads = backprop(model, &trace, &dlogits);
    Ok((per_step, grads))
}

/// REINFORCE gradient for one rollout: `(reward - baseline) * grad(sum_t
/// log p(y_t))`, an ascent direction on the expected reward. Fails when the
/// rollout's stored log-probs disagree with the current model.
pub fn pg_gradient<F: Scalar>(
    model: &GruDecoder<F>,
    x: &Array1<F>,
    rollout: &Rollout<F>,
    reward: F,
    baseline: F,
) -> Result<GruGrads<F>> {
    let (per_step, mut grads) = sequence_logprob_grads(model, x, &rollout.tokens, corpus::BOS)?;
    for (stored, fresh) in rollout.log_probs.iter().zip(&per_step) {
        let delta = (stored.to_f64_lossy() - fresh.to_f64_lossy()).abs();
        if delta > STALE_ROLLOUT_TOL {
            return Err(Error::StaleRollout {
                delta,
                tol: STALE_ROLLOUT_TOL,
            });
        }
    }
    grads.scale(reward - baseline);
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;

    fn zeroed(v: usize, e: usize, h: usize, k: usize) -> GruDecoder<f64> {
        let mut model = GruDecoder::new(v, e, h, k, 10, 0);
        let n = model.param_count();
        model.assign_from_flat(&vec![0.0; n]).unwrap();
        model
    }

    #[test]
    fn init_state_is_tanh_of_projection() {
        let mut model = zeroed(3, 2, 2, 2);
        model.input_b = array![0.5, -0.5];
        let h0 = model.init_state(&array![0.0, 0.0]).unwrap();
        assert_relative_eq!(h0[0], 0.5f64.tanh(), epsilon = 1e-12);
        assert_relative_eq!(h0[1], (-0.5f64).tanh(), epsilon = 1e-12);

        let model = GruDecoder::<f64>::new(5, 3, 4, 3, 10, 7);
        let x = array![0.3, -0.9, 1.2];
        let h0 = model.init_state(&x).unwrap();
        assert!(h0.iter().all(|&v| v > -1.0 && v < 1.0));
        for i in 0..4 {
            let mut direct = model.input_b[i];
            for j in 0..3 {
                direct += model.input_w[[i, j]] * x[j];
            }
            assert_relative_eq!(h0[i], direct.tanh(), epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_parameters_give_zero_state_and_bias_logits() {
        let mut model = zeroed(4, 2, 3, 2);
        model.out_b = array![0.1, 0.2, 0.3, 0.4];
        let h = model.init_state(&array![1.0, -1.0]).unwrap();
        assert!(h.iter().all(|&v| v == 0.0));
        let out = model.step(&h, 0, true).unwrap();
        assert!(out.h.iter().all(|&v| v == 0.0));
        let logits = out.logits.unwrap();
        assert_eq!(logits, model.out_b);
        let p = softmax(&logits);
        let direct = softmax(&model.out_b);
        for i in 0..4 {
            assert_relative_eq!(p[i], direct[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn saturated_update_gate_carries_state() {
        let mut model = zeroed(3, 2, 2, 2);
        model.bz = array![50.0, 50.0]; // z -> 1
        let h = array![0.37, -0.61];
        let out = model.step(&h, 1, false).unwrap();
        for i in 0..2 {
            assert_relative_eq!(out.h[i], h[i], epsilon = 1e-9);
        }
    }

    #[test]
    fn step_rejects_bad_token_id() {
        let model = GruDecoder::<f64>::new(3, 2, 2, 2, 10, 0);
        let h = Array1::zeros(2);
        assert!(matches!(
            model.step(&h, 3, true),
            Err(Error::BadTokenId { id: 3, size: 3 })
        ));
    }

    #[test]
    fn softmax_at_each_step_is_a_distribution() {
        let model = GruDecoder::<f64>::new(6, 3, 4, 2, 10, 3);
        let x = array![0.4, -0.2];
        let trace = unroll(&model, &x, &[0, 5, 2, 1]).unwrap();
        for p in &trace.probs {
            assert!((p.sum() - 1.0).abs() < 1e-9);
            assert!(p.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn logits_gradient_matches_finite_differences_two_step() {
        // scalar objective: the j-th logit after the second step
        let model = GruDecoder::<f64>::new(4, 3, 3, 2, 10, 11);
        let x = array![0.5, -0.8];
        let inputs = [0u32, 2];
        let j = 1usize;
        let trace = unroll(&model, &x, &inputs).unwrap();
        let mut dlogits = vec![Array1::zeros(4), Array1::zeros(4)];
        dlogits[1][j] = 1.0;
        let grads = backprop(&model, &trace, &dlogits);

        let flat = model.flatten();
        let grads_flat = grads.flatten();
        let eval = |params: &[f64]| -> f64 {
            let mut m = model.clone();
            m.assign_from_flat(params).unwrap();
            let tr = unroll(&m, &x, &inputs).unwrap();
            let logits = m.out_w.dot(&tr.steps[1].h) + &m.out_b;
            logits[j]
        };
        let h = 1e-6;
        let mut checked = 0;
        for idx in (0..flat.len()).step_by(7) {
            let mut plus = flat.clone();
            plus[idx] += h;
            let mut minus = flat.clone();
            minus[idx] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let analytic = grads_flat[idx];
            assert!(
                crate::num::grad_close(analytic, numeric, 1e-4),
                "param {idx}: analytic {analytic}, numeric {numeric}"
            );
            checked += 1;
        }
        assert!(checked > 10);
    }

    #[test]
    fn mle_on_uniform_model_is_ln_v() {
        let model = zeroed(5, 2, 3, 2);
        let x = array![0.3, 0.7];
        let target = [0u32, 3, 1];
        let loss = mle_loss(&model, &x, &target).unwrap();
        assert_relative_eq!(loss, (5.0f64).ln(), epsilon = 1e-12);
    }

    #[test]
    fn mle_loss_is_positive_for_stochastic_models() {
        let model = GruDecoder::<f64>::new(5, 2, 3, 2, 10, 9);
        let loss = mle_loss(&model, &array![0.1, 0.2], &[0, 2, 4, 1]).unwrap();
        assert!(loss > 0.0);
    }

    #[test]
    fn mle_gradient_matches_finite_differences() {
        // V=5, T=4 instance
        let model = GruDecoder::<f64>::new(5, 3, 4, 2, 10, 13);
        let x = array![0.4, -0.6];
        let target = [0u32, 3, 2, 4, 1];
        let (_, grads) = mle_loss_grads(&model, &x, &target).unwrap();
        let flat = model.flatten();
        let grads_flat = grads.flatten();
        let h = 1e-6;
        let eval = |params: &[f64]| -> f64 {
            let mut m = model.clone();
            m.assign_from_flat(params).unwrap();
            mle_loss(&m, &x, &target).unwrap()
        };
        for idx in (0..flat.len()).step_by(5) {
            let mut plus = flat.clone();
            plus[idx] += h;
            let mut minus = flat.clone();
            minus[idx] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let analytic = grads_flat[idx];
            assert!(
                crate::num::grad_close(analytic, numeric, 1e-4),
                "param {idx}: analytic {analytic}, numeric {numeric}"
            );
        }
    }

    #[test]
    fn sampling_is_deterministic_per_seed_and_bounded() {
        let model = GruDecoder::<f64>::new(8, 3, 4, 2, 12, 17);
        let x = array![0.2, -0.4];
        let config = DecodeConfig::sample(12, 1.0, 99);
        let a = sample_sequence(&model, &x, &config).unwrap();
        let b = sample_sequence(&model, &x, &config).unwrap();
        assert_eq!(a.tokens, b.tokens);
        assert_eq!(a.log_probs, b.log_probs);
        for seed in 0..50 {
            let config = DecodeConfig::sample(12, 1.0, seed);
            let r = sample_sequence(&model, &x, &config).unwrap();
            assert!(r.len() + 1 <= 12, "rollout too long: {}", r.len());
            assert!(r.log_probs.iter().all(|&lp| lp <= 0.0 && lp.is_finite()));
            assert_eq!(r.tokens.len(), r.log_probs.len());
        }
    }

    #[test]
    fn rollout_logprobs_are_self_consistent() {
        let model = GruDecoder::<f64>::new(8, 3, 4, 2, 12, 17);
        let x = array![0.2, -0.4];
        for seed in 0..20 {
            let config = DecodeConfig::sample(12, 0.7, seed);
            let r = sample_sequence(&model, &x, &config).unwrap();
            if r.is_empty() {
                continue;
            }
            let (per_step, _) =
                sequence_logprob_grads(&model, &x, &r.tokens, corpus::BOS).unwrap();
            for (a, b) in r.log_probs.iter().zip(&per_step) {
                assert!((a - b).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn greedy_is_repeatable_and_matches_low_temperature_sampling() {
        let model = GruDecoder::<f64>::new(8, 3, 4, 2, 12, 23);
        let x = array![0.3, 0.1];
        let g1 = greedy_decode(&model, &x, &DecodeConfig::greedy(12)).unwrap();
        let g2 = greedy_decode(&model, &x, &DecodeConfig::greedy(12)).unwrap();
        assert_eq!(g1.tokens, g2.tokens);
        let cold = sample_sequence(&model, &x, &DecodeConfig::sample(12, 1e-8, 4)).unwrap();
        assert_eq!(g1.tokens, cold.tokens);
    }

    #[test]
    fn greedy_follows_a_hand_set_argmax_chain() {
        // zero recurrence; logits equal out_b; force token 2 forever
        let mut model = zeroed(4, 2, 2, 2);
        model.out_b = array![0.0, 0.1, 0.9, 0.2];
        let config = DecodeConfig {
            t_max: 4,
            mode: DecodeMode::Greedy,
            temperature: 1.0,
            seed: 0,
            bos: 0,
            eos: None,
        };
        let r = greedy_decode(&model, &array![0.0, 0.0], &config).unwrap();
        assert_eq!(r.tokens, vec![2, 2, 2]);
        assert!(!r.terminal);
    }

    #[test]
    fn greedy_is_invariant_to_logit_rescaling() {
        // argmax invariance: scaling out_w and out_b by c > 0 keeps the path
        let model = GruDecoder::<f64>::new(6, 3, 4, 2, 12, 29);
        let mut scaled = model.clone();
        scaled.out_w.mapv_inplace(|v| v * 3.7);
        scaled.out_b.mapv_inplace(|v| v * 3.7);
        let x = array![0.5, -0.2];
        let a = greedy_decode(&model, &x, &DecodeConfig::greedy(12)).unwrap();
        let b = greedy_decode(&scaled, &x, &DecodeConfig::greedy(12)).unwrap();
        assert_eq!(a.tokens, b.tokens);
    }

    #[test]
    fn sampled_first_token_frequencies_match_softmax() {
        // V=3 model, check the first-step empirical distribution
        let model = GruDecoder::<f64>::new(3, 2, 3, 2, 8, 31);
        let x = array![0.4, 0.4];
        let h0 = model.init_state(&x).unwrap();
        let logits = model.step(&h0, 0, true).unwrap().logits.unwrap();
        let p = softmax(&logits);

        let n = 10_000;
        let mut counts = [0usize; 3];
        let mut rng = rng_for(1234, stream::ROLLOUT);
        let config = DecodeConfig {
            t_max: 8,
            mode: DecodeMode::Sample,
            temperature: 1.0,
            seed: 0,
            bos: 0,
            eos: None,
        };
        for _ in 0..n {
            let r = sample_sequence_with(&model, &x, &config, &mut rng).unwrap();
            counts[r.tokens[0] as usize] += 1;
        }
        for i in 0..3 {
            let expected = p[i] * n as f64;
            let sd = (n as f64 * p[i] * (1.0 - p[i])).sqrt();
            let delta = (counts[i] as f64 - expected).abs();
            assert!(
                delta <= 3.0 * sd,
                "token {i}: count {} expected {expected:.1} (3sd = {:.1})",
                counts[i],
                3.0 * sd
            );
        }
    }

    #[test]
    fn pg_gradient_is_zero_when_reward_equals_baseline() {
        let model = GruDecoder::<f64>::new(5, 2, 3, 2, 10, 37);
        let x = array![0.2, 0.6];
        let r = sample_sequence(&model, &x, &DecodeConfig::sample(10, 1.0, 5)).unwrap();
        let grads = pg_gradient(&model, &x, &r, 0.7, 0.7).unwrap();
        assert!(grads.flatten().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn pg_gradient_is_linear_in_centered_reward() {
        let model = GruDecoder::<f64>::new(5, 2, 3, 2, 10, 41);
        let x = array![0.2, 0.6];
        let r = sample_sequence(&model, &x, &DecodeConfig::sample(10, 1.0, 6)).unwrap();
        let g1 = pg_gradient(&model, &x, &r, 0.5, 0.0).unwrap().flatten();
        let g3 = pg_gradient(&model, &x, &r, 1.5, 0.0).unwrap().flatten();
        for (a, b) in g1.iter().zip(&g3) {
            assert_relative_eq!(3.0 * a, *b, epsilon = 1e-10);
        }
    }

    #[test]
    fn pg_gradient_rejects_stale_rollouts() {
        let model = GruDecoder::<f64>::new(5, 2, 3, 2, 10, 43);
        let x = array![0.2, 0.6];
        let mut rollout =
            sample_sequence(&model, &x, &DecodeConfig::sample(10, 1.0, 7)).unwrap();
        rollout.log_probs[0] += 0.01; // as if from an older model
        assert!(matches!(
            pg_gradient(&model, &x, &rollout, 1.0, 0.0),
            Err(Error::StaleRollout { .. })
        ));
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("generator.ckpt");
        let model = GruDecoder::<f64>::new(7, 3, 5, 4, 42, 51);
        model.save(&path).unwrap();
        let back = GruDecoder::<f64>::load(&path).unwrap();
        assert_eq!(model, back);
        assert_eq!(back.t_max, 42);
    }

    use crate::rng::{rng_for, stream};
}
