//! The two discriminator critics and the reward they induce.
//!
//! The multi-modal discriminator classifies an (image embedding, poem) pair
//! as paired / unpaired / generated through an LSTM poem encoder, a gated
//! fusion layer and a softmax classifier. The poem-style discriminator
//! classifies a poem alone as poetic / disordered / paragraphic / generated.
//! The scalar training reward blends their positive-class probabilities.

use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{expect_schema, CheckpointReader, CheckpointWriter};
use crate::corpus::EOS;
use crate::error::{Error, Result};
use crate::mathutil::{argmax, sigmoid, softmax};
use crate::num::Scalar;
use crate::params::{self, BlockMut, BlockRef};
use crate::rng::{rng_for, stream, uniform_matrix, uniform_vector};

// ---------------------------------------------------------------------------
// LSTM sentence encoder (shared by both discriminators)
// ---------------------------------------------------------------------------

/// Standard LSTM cell over token embeddings; the final hidden state is the
/// sequence encoding. Consumes tokens up to and including the first EOS, so
/// padding appended after EOS cannot change the encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmEncoder<F: Scalar> {
    pub embed: Array2<F>, // V x E
    pub wi: Array2<F>,    // H x E
    pub ui: Array2<F>,    // H x H
    pub bi: Array1<F>,
    pub wf: Array2<F>,
    pub uf: Array2<F>,
    pub bf: Array1<F>,
    pub wo: Array2<F>,
    pub uo: Array2<F>,
    pub bo: Array1<F>,
    pub wg: Array2<F>,
    pub ug: Array2<F>,
    pub bg: Array1<F>,
}

struct LstmStep<F: Scalar> {
    input: u32,
    h_prev: Array1<F>,
    c_prev: Array1<F>,
    i: Array1<F>,
    f: Array1<F>,
    o: Array1<F>,
    g: Array1<F>,
    c: Array1<F>,
}

pub struct LstmTrace<F: Scalar> {
    steps: Vec<LstmStep<F>>,
    pub final_h: Array1<F>,
}

impl<F: Scalar> LstmEncoder<F> {
    fn new(v: usize, e: usize, h: usize, rng: &mut ChaCha8Rng) -> Self {
        // fan-in scaled init; forget-gate bias starts open
        let se = 1.0 / (e as f64).sqrt();
        let sh = 1.0 / (h as f64).sqrt();
        LstmEncoder {
            embed: uniform_matrix(rng, v, e, 0.5),
            wi: uniform_matrix(rng, h, e, se),
            ui: uniform_matrix(rng, h, h, sh),
            bi: Array1::zeros(h),
            wf: uniform_matrix(rng, h, e, se),
            uf: uniform_matrix(rng, h, h, sh),
            bf: Array1::from_elem(h, F::one()),
            wo: uniform_matrix(rng, h, e, se),
            uo: uniform_matrix(rng, h, h, sh),
            bo: Array1::zeros(h),
            wg: uniform_matrix(rng, h, e, se),
            ug: uniform_matrix(rng, h, h, sh),
            bg: Array1::zeros(h),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.embed.nrows()
    }

    pub fn hidden_size(&self) -> usize {
        self.bi.len()
    }

    /// Tokens actually consumed: everything up to and including the first
    /// EOS (the whole slice when no EOS is present).
    fn effective<'a>(&self, tokens: &'a [u32]) -> &'a [u32] {
        match tokens.iter().position(|&t| t == EOS) {
            Some(idx) => &tokens[..=idx],
            None => tokens,
        }
    }

    pub fn forward(&self, tokens: &[u32]) -> Result<LstmTrace<F>> {
        let tokens = self.effective(tokens);
        if tokens.is_empty() {
            return Err(Error::EmptyInput("empty token sequence"));
        }
        let h_size = self.hidden_size();
        let mut h: Array1<F> = Array1::zeros(h_size);
        let mut c: Array1<F> = Array1::zeros(h_size);
        let mut steps = Vec::with_capacity(tokens.len());
        for &tok in tokens {
            if (tok as usize) >= self.vocab_size() {
                return Err(Error::BadTokenId {
                    id: tok,
                    size: self.vocab_size(),
                });
            }
            let e = self.embed.row(tok as usize).to_owned();
            let i = (self.wi.dot(&e) + self.ui.dot(&h) + &self.bi).mapv(sigmoid);
            let f = (self.wf.dot(&e) + self.uf.dot(&h) + &self.bf).mapv(sigmoid);
            let o = (self.wo.dot(&e) + self.uo.dot(&h) + &self.bo).mapv(sigmoid);
            let g = (self.wg.dot(&e) + self.ug.dot(&h) + &self.bg).mapv(F::tanh);
            let c_next = &f * &c + &i * &g;
            let h_next = &o * &c_next.mapv(F::tanh);
            steps.push(LstmStep {
                input: tok,
                h_prev: h,
                c_prev: c,
                i,
                f,
                o,
                g,
                c: c_next.clone(),
            });
            h = h_next;
            c = c_next;
        }
        Ok(LstmTrace {
            steps,
            final_h: h,
        })
    }

    /// Backprop from a gradient at the final hidden state.
    fn backward(&self, trace: &LstmTrace<F>, d_final_h: &Array1<F>) -> LstmGrads<F> {
        let mut grads = LstmGrads::zeros_like(self);
        let one = F::one();
        let mut dh = d_final_h.clone();
        let mut dc: Array1<F> = Array1::zeros(self.hidden_size());
        for step in trace.steps.iter().rev() {
            let tanh_c = step.c.mapv(F::tanh);
            // h = o * tanh(c)
            let do_ = &dh * &tanh_c;
            dc = dc + &dh * &step.o * &tanh_c.mapv(|t| one - t * t);
            // c = f * c_prev + i * g
            let df = &dc * &step.c_prev;
            let di = &dc * &step.g;
            let dg = &dc * &step.i;

            let da_i = &di * &step.i.mapv(|v| v * (one - v));
            let da_f = &df * &step.f.mapv(|v| v * (one - v));
            let da_o = &do_ * &step.o.mapv(|v| v * (one - v));
            let da_g = &dg * &step.g.mapv(|v| one - v * v);

            let e = self.embed.row(step.input as usize).to_owned();
            outer_add(&mut grads.wi, &da_i, &e);
            outer_add(&mut grads.ui, &da_i, &step.h_prev);
            grads.bi += &da_i;
            outer_add(&mut grads.wf, &da_f, &e);
            outer_add(&mut grads.uf, &da_f, &step.h_prev);
            grads.bf += &da_f;
            outer_add(&mut grads.wo, &da_o, &e);
            outer_add(&mut grads.uo, &da_o, &step.h_prev);
            grads.bo += &da_o;
            outer_add(&mut grads.wg, &da_g, &e);
            outer_add(&mut grads.ug, &da_g, &step.h_prev);
            grads.bg += &da_g;

            let de = self.wi.t().dot(&da_i)
                + self.wf.t().dot(&da_f)
                + self.wo.t().dot(&da_o)
                + self.wg.t().dot(&da_g);
            let mut row = grads.embed.row_mut(step.input as usize);
            row += &de;

            dh = self.ui.t().dot(&da_i)
                + self.uf.t().dot(&da_f)
                + self.uo.t().dot(&da_o)
                + self.ug.t().dot(&da_g);
            dc = &dc * &step.f;
        }
        grads
    }

    fn blocks(&self) -> Vec<BlockRef<'_, F>> {
        vec![
            BlockRef::M(&self.embed),
            BlockRef::M(&self.wi),
            BlockRef::M(&self.ui),
            BlockRef::V(&self.bi),
            BlockRef::M(&self.wf),
            BlockRef::M(&self.uf),
            BlockRef::V(&self.bf),
            BlockRef::M(&self.wo),
            BlockRef::M(&self.uo),
            BlockRef::V(&self.bo),
            BlockRef::M(&self.wg),
            BlockRef::M(&self.ug),
            BlockRef::V(&self.bg),
        ]
    }

    fn blocks_mut(&mut self) -> Vec<BlockMut<'_, F>> {
        vec![
            BlockMut::M(&mut self.embed),
            BlockMut::M(&mut self.wi),
            BlockMut::M(&mut self.ui),
            BlockMut::V(&mut self.bi),
            BlockMut::M(&mut self.wf),
            BlockMut::M(&mut self.uf),
            BlockMut::V(&mut self.bf),
            BlockMut::M(&mut self.wo),
            BlockMut::M(&mut self.uo),
            BlockMut::V(&mut self.bo),
            BlockMut::M(&mut self.wg),
            BlockMut::M(&mut self.ug),
            BlockMut::V(&mut self.bg),
        ]
    }

    fn write(&self, w: &mut CheckpointWriter<std::io::BufWriter<std::fs::File>>) -> Result<()> {
        w.write_matrix(&self.embed)?;
        w.write_matrix(&self.wi)?;
        w.write_matrix(&self.ui)?;
        w.write_vector(&self.bi)?;
        w.write_matrix(&self.wf)?;
        w.write_matrix(&self.uf)?;
        w.write_vector(&self.bf)?;
        w.write_matrix(&self.wo)?;
        w.write_matrix(&self.uo)?;
        w.write_vector(&self.bo)?;
        w.write_matrix(&self.wg)?;
        w.write_matrix(&self.ug)?;
        w.write_vector(&self.bg)?;
        Ok(())
    }

    fn read(
        r: &mut CheckpointReader<std::io::BufReader<std::fs::File>>,
        v: usize,
        e: usize,
        h: usize,
    ) -> Result<Self> {
        Ok(LstmEncoder {
            embed: r.read_matrix(v, e)?,
            wi: r.read_matrix(h, e)?,
            ui: r.read_matrix(h, h)?,
            bi: r.read_vector(h)?,
            wf: r.read_matrix(h, e)?,
            uf: r.read_matrix(h, h)?,
            bf: r.read_vector(h)?,
            wo: r.read_matrix(h, e)?,
            uo: r.read_matrix(h, h)?,
            bo: r.read_vector(h)?,
            wg: r.read_matrix(h, e)?,
            ug: r.read_matrix(h, h)?,
            bg: r.read_vector(h)?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct LstmGrads<F: Scalar> {
    pub embed: Array2<F>,
    pub wi: Array2<F>,
    pub ui: Array2<F>,
    pub bi: Array1<F>,
    pub wf: Array2<F>,
    pub uf: Array2<F>,
    pub bf: Array1<F>,
    pub wo: Array2<F>,
    pub uo: Array2<F>,
    pub bo: Array1<F>,
    pub wg: Array2<F>,
    pub ug: Array2<F>,
    pub bg: Array1<F>,
}

impl<F: Scalar> LstmGrads<F> {
    fn zeros_like(enc: &LstmEncoder<F>) -> Self {
        LstmGrads {
            embed: Array2::zeros(enc.embed.dim()),
            wi: Array2::zeros(enc.wi.dim()),
            ui: Array2::zeros(enc.ui.dim()),
            bi: Array1::zeros(enc.bi.len()),
            wf: Array2::zeros(enc.wf.dim()),
            uf: Array2::zeros(enc.uf.dim()),
            bf: Array1::zeros(enc.bf.len()),
            wo: Array2::zeros(enc.wo.dim()),
            uo: Array2::zeros(enc.uo.dim()),
            bo: Array1::zeros(enc.bo.len()),
            wg: Array2::zeros(enc.wg.dim()),
            ug: Array2::zeros(enc.ug.dim()),
            bg: Array1::zeros(enc.bg.len()),
        }
    }

    fn add(&mut self, other: &LstmGrads<F>) {
        self.embed += &other.embed;
        self.wi += &other.wi;
        self.ui += &other.ui;
        self.bi += &other.bi;
        self.wf += &other.wf;
        self.uf += &other.uf;
        self.bf += &other.bf;
        self.wo += &other.wo;
        self.uo += &other.uo;
        self.bo += &other.bo;
        self.wg += &other.wg;
        self.ug += &other.ug;
        self.bg += &other.bg;
    }

    fn scale(&mut self, factor: F) {
        self.embed.mapv_inplace(|v| v * factor);
        self.wi.mapv_inplace(|v| v * factor);
        self.ui.mapv_inplace(|v| v * factor);
        self.bi.mapv_inplace(|v| v * factor);
        self.wf.mapv_inplace(|v| v * factor);
        self.uf.mapv_inplace(|v| v * factor);
        self.bf.mapv_inplace(|v| v * factor);
        self.wo.mapv_inplace(|v| v * factor);
        self.uo.mapv_inplace(|v| v * factor);
        self.bo.mapv_inplace(|v| v * factor);
        self.wg.mapv_inplace(|v| v * factor);
        self.ug.mapv_inplace(|v| v * factor);
        self.bg.mapv_inplace(|v| v * factor);
    }

    fn apply_descent_to(&self, enc: &mut LstmEncoder<F>, lr: F) {
        enc.embed.scaled_add(-lr, &self.embed);
        enc.wi.scaled_add(-lr, &self.wi);
        enc.ui.scaled_add(-lr, &self.ui);
        enc.bi.scaled_add(-lr, &self.bi);
        enc.wf.scaled_add(-lr, &self.wf);
        enc.uf.scaled_add(-lr, &self.uf);
        enc.bf.scaled_add(-lr, &self.bf);
        enc.wo.scaled_add(-lr, &self.wo);
        enc.uo.scaled_add(-lr, &self.uo);
        enc.bo.scaled_add(-lr, &self.bo);
        enc.wg.scaled_add(-lr, &self.wg);
        enc.ug.scaled_add(-lr, &self.ug);
        enc.bg.scaled_add(-lr, &self.bg);
    }

    fn blocks(&self) -> Vec<BlockRef<'_, F>> {
        vec![
            BlockRef::M(&self.embed),
            BlockRef::M(&self.wi),
            BlockRef::M(&self.ui),
            BlockRef::V(&self.bi),
            BlockRef::M(&self.wf),
            BlockRef::M(&self.uf),
            BlockRef::V(&self.bf),
            BlockRef::M(&self.wo),
            BlockRef::M(&self.uo),
            BlockRef::V(&self.bo),
            BlockRef::M(&self.wg),
            BlockRef::M(&self.ug),
            BlockRef::V(&self.bg),
        ]
    }
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
// Multi-modal discriminator
// ---------------------------------------------------------------------------

pub const DM_CLASSES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DmClass {
    Paired = 0,
    Unpaired = 1,
    Generated = 2,
}

impl DmClass {
    pub const ALL: [DmClass; 3] = [DmClass::Paired, DmClass::Unpaired, DmClass::Generated];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// 3-class critic over (image embedding, poem token sequence). Classifier
/// weights start at zero so a fresh model scores 1/3 per class.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiModalDiscriminator<F: Scalar> {
    pub encoder: LstmEncoder<F>,
    pub w_x: Array2<F>, // F x K
    pub b_x: Array1<F>,
    pub w_c: Array2<F>, // F x H
    pub b_c: Array1<F>,
    pub w_m: Array2<F>, // 3 x F
    pub b_m: Array1<F>,
    pub seed: u64,
}

impl<F: Scalar> MultiModalDiscriminator<F> {
    pub fn new(v: usize, e: usize, h: usize, fusion: usize, k: usize, seed: u64) -> Self {
        let mut rng = rng_for(seed, stream::DM_INIT);
        let sk = 1.0 / (k as f64).sqrt();
        let sh = 1.0 / (h as f64).sqrt();
        MultiModalDiscriminator {
            encoder: LstmEncoder::new(v, e, h, &mut rng),
            w_x: uniform_matrix(&mut rng, fusion, k, sk),
            b_x: uniform_vector(&mut rng, fusion, sk),
            w_c: uniform_matrix(&mut rng, fusion, h, sh),
            b_c: uniform_vector(&mut rng, fusion, sh),
            w_m: Array2::zeros((DM_CLASSES, fusion)),
            b_m: Array1::zeros(DM_CLASSES),
            seed,
        }
    }

    pub fn fusion_size(&self) -> usize {
        self.b_x.len()
    }

    pub fn cond_size(&self) -> usize {
        self.w_x.ncols()
    }

    /// C_m over {paired, unpaired, generated}:
    /// `softmax(W_m (tanh(W_x x + b_x) . tanh(W_c c + b_c)) + b_m)` with `c`
    /// the final LSTM state over the poem.
    pub fn forward(&self, x: &Array1<F>, tokens: &[u32]) -> Result<Array1<F>> {
        Ok(self.forward_trace(x, tokens)?.probs)
    }

    fn forward_trace(&self, x: &Array1<F>, tokens: &[u32]) -> Result<DmTrace<F>> {
        if x.len() != self.cond_size() {
            return Err(Error::dim(self.cond_size(), x.len(), "image embedding"));
        }
        let lstm = self.encoder.forward(tokens)?;
        let a = (self.w_x.dot(x) + &self.b_x).mapv(F::tanh);
        let b = (self.w_c.dot(&lstm.final_h) + &self.b_c).mapv(F::tanh);
        let fused = &a * &b;
        let probs = softmax(&(self.w_m.dot(&fused) + &self.b_m));
        Ok(DmTrace {
            lstm,
            a,
            b,
            fused,
            probs,
        })
    }

    pub fn all_finite(&self) -> bool {
        self.flatten().iter().all(|v| v.is_finite())
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut blocks = self.encoder.blocks();
        blocks.push(BlockRef::M(&self.w_x));
        blocks.push(BlockRef::V(&self.b_x));
        blocks.push(BlockRef::M(&self.w_c));
        blocks.push(BlockRef::V(&self.b_c));
        blocks.push(BlockRef::M(&self.w_m));
        blocks.push(BlockRef::V(&self.b_m));
        params::flatten(&blocks)
    }

    pub fn assign_from_flat(&mut self, flat: &[f64]) -> Result<()> {
        let mut blocks = self.encoder.blocks_mut();
        blocks.push(BlockMut::M(&mut self.w_x));
        blocks.push(BlockMut::V(&mut self.b_x));
        blocks.push(BlockMut::M(&mut self.w_c));
        blocks.push(BlockMut::V(&mut self.b_c));
        blocks.push(BlockMut::M(&mut self.w_m));
        blocks.push(BlockMut::V(&mut self.b_m));
        params::assign(blocks, flat)
    }

    const SCHEMA: &'static str = "dm-v1";

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let header = DmHeader {
            schema: Self::SCHEMA.into(),
            v: self.encoder.vocab_size(),
            e: self.encoder.embed.ncols(),
            h: self.encoder.hidden_size(),
            f: self.fusion_size(),
            k: self.cond_size(),
            seed: self.seed,
        };
        let mut w = CheckpointWriter::create(path, &header)?;
        self.encoder.write(&mut w)?;
        w.write_matrix(&self.w_x)?;
        w.write_vector(&self.b_x)?;
        w.write_matrix(&self.w_c)?;
        w.write_vector(&self.b_c)?;
        w.write_matrix(&self.w_m)?;
        w.write_vector(&self.b_m)?;
        w.finish()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (hd, mut r) = CheckpointReader::open::<DmHeader>(path)?;
        expect_schema(&hd.schema, Self::SCHEMA)?;
        let encoder = LstmEncoder::read(&mut r, hd.v, hd.e, hd.h)?;
        let model = MultiModalDiscriminator {
            encoder,
            w_x: r.read_matrix(hd.f, hd.k)?,
            b_x: r.read_vector(hd.f)?,
            w_c: r.read_matrix(hd.f, hd.h)?,
            b_c: r.read_vector(hd.f)?,
            w_m: r.read_matrix(DM_CLASSES, hd.f)?,
            b_m: r.read_vector(DM_CLASSES)?,
            seed: hd.seed,
        };
        r.finish()?;
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct DmHeader {
    schema: String,
    #[serde(rename = "V")]
    v: usize,
    #[serde(rename = "E")]
    e: usize,
    #[serde(rename = "H")]
    h: usize,
    #[serde(rename = "F")]
    f: usize,
    #[serde(rename = "K")]
    k: usize,
    seed: u64,
}

struct DmTrace<F: Scalar> {
    lstm: LstmTrace<F>,
    a: Array1<F>,
    b: Array1<F>,
    fused: Array1<F>,
    probs: Array1<F>,
}

/// Gradients for the multi-modal discriminator.
pub struct DmGrads<F: Scalar> {
    pub encoder: LstmGrads<F>,
    pub w_x: Array2<F>,
    pub b_x: Array1<F>,
    pub w_c: Array2<F>,
    pub b_c: Array1<F>,
    pub w_m: Array2<F>,
    pub b_m: Array1<F>,
}

impl<F: Scalar> DmGrads<F> {
    fn zeros_like(dm: &MultiModalDiscriminator<F>) -> Self {
        DmGrads {
            encoder: LstmGrads::zeros_like(&dm.encoder),
            w_x: Array2::zeros(dm.w_x.dim()),
            b_x: Array1::zeros(dm.b_x.len()),
            w_c: Array2::zeros(dm.w_c.dim()),
            b_c: Array1::zeros(dm.b_c.len()),
            w_m: Array2::zeros(dm.w_m.dim()),
            b_m: Array1::zeros(dm.b_m.len()),
        }
    }

    fn add(&mut self, other: &DmGrads<F>) {
        self.encoder.add(&other.encoder);
        self.w_x += &other.w_x;
        self.b_x += &other.b_x;
        self.w_c += &other.w_c;
        self.b_c += &other.b_c;
        self.w_m += &other.w_m;
        self.b_m += &other.b_m;
    }

    fn scale(&mut self, factor: F) {
        self.encoder.scale(factor);
        self.w_x.mapv_inplace(|v| v * factor);
        self.b_x.mapv_inplace(|v| v * factor);
        self.w_c.mapv_inplace(|v| v * factor);
        self.b_c.mapv_inplace(|v| v * factor);
        self.w_m.mapv_inplace(|v| v * factor);
        self.b_m.mapv_inplace(|v| v * factor);
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut blocks = self.encoder.blocks();
        blocks.push(BlockRef::M(&self.w_x));
        blocks.push(BlockRef::V(&self.b_x));
        blocks.push(BlockRef::M(&self.w_c));
        blocks.push(BlockRef::V(&self.b_c));
        blocks.push(BlockRef::M(&self.w_m));
        blocks.push(BlockRef::V(&self.b_m));
        params::flatten(&blocks)
    }
}

impl<F: Scalar> MultiModalDiscriminator<F> {
    pub fn apply_descent(&mut self, grads: &DmGrads<F>, lr: F) {
        grads.encoder.apply_descent_to(&mut self.encoder, lr);
        self.w_x.scaled_add(-lr, &grads.w_x);
        self.b_x.scaled_add(-lr, &grads.b_x);
        self.w_c.scaled_add(-lr, &grads.w_c);
        self.b_c.scaled_add(-lr, &grads.b_c);
        self.w_m.scaled_add(-lr, &grads.w_m);
        self.b_m.scaled_add(-lr, &grads.b_m);
    }

    /// Cross-entropy `-log C_m(label)` and its gradient.
    pub fn ce_loss_grads(
        &self,
        x: &Array1<F>,
        tokens: &[u32],
        label: DmClass,
    ) -> Result<(F, DmGrads<F>)> {
        let trace = self.forward_trace(x, tokens)?;
        let loss = -trace.probs[label.index()].ln();
        let mut grads = DmGrads::zeros_like(self);
        // d(-log p_label)/d logits = probs - onehot(label)
        let mut dlogits = trace.probs.clone();
        dlogits[label.index()] -= F::one();
        outer_add(&mut grads.w_m, &dlogits, &trace.fused);
        grads.b_m += &dlogits;
        let dfused = self.w_m.t().dot(&dlogits);
        let one = F::one();
        // fused = a * b
        let da = &dfused * &trace.b;
        let db = &dfused * &trace.a;
        let du = &da * &trace.a.mapv(|v| one - v * v);
        outer_add(&mut grads.w_x, &du, x);
        grads.b_x += &du;
        let dw = &db * &trace.b.mapv(|v| one - v * v);
        outer_add(&mut grads.w_c, &dw, &trace.lstm.final_h);
        grads.b_c += &dw;
        let dc = self.w_c.t().dot(&dw);
        grads.encoder = self.encoder.backward(&trace.lstm, &dc);
        Ok((loss, grads))
    }
}

// ---------------------------------------------------------------------------
// Poem-style discriminator
// ---------------------------------------------------------------------------

pub const DP_CLASSES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DpClass {
    Poetic = 0,
    Disordered = 1,
    Paragraphic = 2,
    Generated = 3,
}

impl DpClass {
    pub const ALL: [DpClass; 4] = [
        DpClass::Poetic,
        DpClass::Disordered,
        DpClass::Paragraphic,
        DpClass::Generated,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// 4-class style critic over a poem alone. Classifier weights start at zero
/// so a fresh model scores 1/4 per class.
#[derive(Debug, Clone, PartialEq)]
pub struct PoemStyleDiscriminator<F: Scalar> {
    pub encoder: LstmEncoder<F>,
    pub w_p: Array2<F>, // 4 x H
    pub b_p: Array1<F>,
    pub seed: u64,
}

impl<F: Scalar> PoemStyleDiscriminator<F> {
    pub fn new(v: usize, e: usize, h: usize, seed: u64) -> Self {
        let mut rng = rng_for(seed, stream::DP_INIT);
        PoemStyleDiscriminator {
            encoder: LstmEncoder::new(v, e, h, &mut rng),
            w_p: Array2::zeros((DP_CLASSES, h)),
            b_p: Array1::zeros(DP_CLASSES),
            seed,
        }
    }

    /// C_p over {poetic, disordered, paragraphic, generated}:
    /// `softmax(W_p . LSTM(y) + b_p)`.
    pub fn forward(&self, tokens: &[u32]) -> Result<Array1<F>> {
        let trace = self.encoder.forward(tokens)?;
        Ok(softmax(&(self.w_p.dot(&trace.final_h) + &self.b_p)))
    }

    pub fn all_finite(&self) -> bool {
        self.flatten().iter().all(|v| v.is_finite())
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut blocks = self.encoder.blocks();
        blocks.push(BlockRef::M(&self.w_p));
        blocks.push(BlockRef::V(&self.b_p));
        params::flatten(&blocks)
    }

    pub fn assign_from_flat(&mut self, flat: &[f64]) -> Result<()> {
        let mut blocks = self.encoder.blocks_mut();
        blocks.push(BlockMut::M(&mut self.w_p));
        blocks.push(BlockMut::V(&mut self.b_p));
        params::assign(blocks, flat)
    }

    pub fn apply_descent(&mut self, grads: &DpGrads<F>, lr: F) {
        grads.encoder.apply_descent_to(&mut self.encoder, lr);
        self.w_p.scaled_add(-lr, &grads.w_p);
        self.b_p.scaled_add(-lr, &grads.b_p);
    }

    /// Cross-entropy `-log C_p(label)` and its gradient.
    pub fn ce_loss_grads(&self, tokens: &[u32], label: DpClass) -> Result<(F, DpGrads<F>)> {
        let trace = self.encoder.forward(tokens)?;
        let probs = softmax(&(self.w_p.dot(&trace.final_h) + &self.b_p));
        let loss = -probs[label.index()].ln();
        let mut grads = DpGrads::zeros_like(self);
        let mut dlogits = probs;
        dlogits[label.index()] -= F::one();
        outer_add(&mut grads.w_p, &dlogits, &trace.final_h);
        grads.b_p += &dlogits;
        let dh = self.w_p.t().dot(&dlogits);
        grads.encoder = self.encoder.backward(&trace, &dh);
        Ok((loss, grads))
    }

    const SCHEMA: &'static str = "dp-v1";

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let header = DpHeader {
            schema: Self::SCHEMA.into(),
            v: self.encoder.vocab_size(),
            e: self.encoder.embed.ncols(),
            h: self.encoder.hidden_size(),
            seed: self.seed,
        };
        let mut w = CheckpointWriter::create(path, &header)?;
        self.encoder.write(&mut w)?;
        w.write_matrix(&self.w_p)?;
        w.write_vector(&self.b_p)?;
        w.finish()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (hd, mut r) = CheckpointReader::open::<DpHeader>(path)?;
        expect_schema(&hd.schema, Self::SCHEMA)?;
        let encoder = LstmEncoder::read(&mut r, hd.v, hd.e, hd.h)?;
        let model = PoemStyleDiscriminator {
            encoder,
            w_p: r.read_matrix(DP_CLASSES, hd.h)?,
            b_p: r.read_vector(DP_CLASSES)?,
            seed: hd.seed,
        };
        r.finish()?;
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct DpHeader {
    schema: String,
    #[serde(rename = "V")]
    v: usize,
    #[serde(rename = "E")]
    e: usize,
    #[serde(rename = "H")]
    h: usize,
    seed: u64,
}

pub struct DpGrads<F: Scalar> {
    pub encoder: LstmGrads<F>,
    pub w_p: Array2<F>,
    pub b_p: Array1<F>,
}

impl<F: Scalar> DpGrads<F> {
    fn zeros_like(dp: &PoemStyleDiscriminator<F>) -> Self {
        DpGrads {
            encoder: LstmGrads::zeros_like(&dp.encoder),
            w_p: Array2::zeros(dp.w_p.dim()),
            b_p: Array1::zeros(dp.b_p.len()),
        }
    }

    fn add(&mut self, other: &DpGrads<F>) {
        self.encoder.add(&other.encoder);
        self.w_p += &other.w_p;
        self.b_p += &other.b_p;
    }

    fn scale(&mut self, factor: F) {
        self.encoder.scale(factor);
        self.w_p.mapv_inplace(|v| v * factor);
        self.b_p.mapv_inplace(|v| v * factor);
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut blocks = self.encoder.blocks();
        blocks.push(BlockRef::M(&self.w_p));
        blocks.push(BlockRef::V(&self.b_p));
        params::flatten(&blocks)
    }
}

// ---------------------------------------------------------------------------
// Reward
// ---------------------------------------------------------------------------

/// Reward blending and the ablation switches.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RewardConfig {
    pub lambda: f64,
    pub use_dm: bool,
    pub use_dp: bool,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            lambda: 0.8,
            use_dm: true,
            use_dp: true,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidConfig("lambda must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Scalar reward for a generated sequence:
/// `lambda * C_m(paired) + (1 - lambda) * C_p(poetic)` with both critics
/// enabled; the single enabled critic's positive-class probability otherwise.
pub fn reward<F: Scalar>(
    x: &Array1<F>,
    tokens: &[u32],
    dm: Option<&MultiModalDiscriminator<F>>,
    dp: Option<&PoemStyleDiscriminator<F>>,
    config: &RewardConfig,
) -> Result<F> {
    config.validate()?;
    let cm = if config.use_dm {
        let dm = dm.ok_or(Error::InvalidConfig(
            "use_dm is set but no multi-modal discriminator was supplied".into(),
        ))?;
        Some(dm.forward(x, tokens)?[DmClass::Paired.index()])
    } else {
        None
    };
    let cp = if config.use_dp {
        let dp = dp.ok_or(Error::InvalidConfig(
            "use_dp is set but no poem-style discriminator was supplied".into(),
        ))?;
        Some(dp.forward(tokens)?[DpClass::Poetic.index()])
    } else {
        None
    };
    match (cm, cp) {
        (Some(cm), Some(cp)) => {
            let lambda = F::from_f64_lossy(config.lambda);
            Ok(lambda * cm + (F::one() - lambda) * cp)
        }
        (Some(cm), None) => Ok(cm),
        (None, Some(cp)) => Ok(cp),
        (None, None) => Err(Error::NoRewardSignal),
    }
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct DmExample<F: Scalar> {
    pub x: Array1<F>,
    pub tokens: Vec<u32>,
    pub label: DmClass,
}

#[derive(Debug, Clone)]
pub struct DpExample {
    pub tokens: Vec<u32>,
    pub label: DpClass,
}

#[derive(Debug, Clone)]
pub struct DiscTrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Default)]
pub struct DiscTrainReport {
    /// entry 0 is the pre-training mean loss
    pub epoch_losses: Vec<f64>,
    pub warnings: Vec<String>,
}

/// Stratified batch order: classes interleaved round-robin, each class
/// cycling through its own shuffled examples.
fn stratified_order(
    class_members: &[Vec<usize>],
    total: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let mut pools: Vec<Vec<usize>> = class_members
        .iter()
        .filter(|m| !m.is_empty())
        .cloned()
        .collect();
    for pool in &mut pools {
        pool.shuffle(rng);
    }
    let mut cursors = vec![0usize; pools.len()];
    let mut order = Vec::with_capacity(total);
    let mut class = 0;
    while order.len() < total {
        let pool = &pools[class % pools.len()];
        let cursor = &mut cursors[class % pools.len()];
        order.push(pool[*cursor % pool.len()]);
        *cursor += 1;
        class += 1;
    }
    order
}

/// Minimizes the categorical cross-entropy of the multi-modal discriminator
/// over labeled (x, y) examples with class-balanced minibatches.
pub fn train_dm<F: Scalar>(
    dm: &mut MultiModalDiscriminator<F>,
    examples: &[DmExample<F>],
    config: &DiscTrainConfig,
) -> Result<DiscTrainReport> {
    if examples.is_empty() {
        return Err(Error::EmptyInput("no discriminator examples"));
    }
    let mut report = DiscTrainReport::default();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); DM_CLASSES];
    for (i, ex) in examples.iter().enumerate() {
        members[ex.label.index()].push(i);
    }
    for class in DmClass::ALL {
        if members[class.index()].is_empty() {
            report
                .warnings
                .push(format!("class {class:?} absent from the training stream"));
        }
    }
    let mean_loss = |dm: &MultiModalDiscriminator<F>| -> Result<f64> {
        let mut total = 0.0;
        for ex in examples {
            total += -dm.forward(&ex.x, &ex.tokens)?[ex.label.index()]
                .ln()
                .to_f64_lossy();
        }
        Ok(total / examples.len() as f64)
    };
    report.epoch_losses.push(mean_loss(dm)?);
    let lr = F::from_f64_lossy(config.lr);
    let mut rng = rng_for(config.seed, stream::DISC_BATCHES);
    for _ in 0..config.epochs {
        let order = stratified_order(&members, examples.len(), &mut rng);
        for batch in order.chunks(config.batch_size.max(1)) {
            let mut acc: Option<DmGrads<F>> = None;
            for &i in batch {
                let ex = &examples[i];
                let (_, grads) = dm.ce_loss_grads(&ex.x, &ex.tokens, ex.label)?;
                match &mut acc {
                    Some(a) => a.add(&grads),
                    None => acc = Some(grads),
                }
            }
            if let Some(mut grads) = acc {
                grads.scale(F::one() / F::from_f64_lossy(batch.len() as f64));
                dm.apply_descent(&grads, lr);
            }
        }
        report.epoch_losses.push(mean_loss(dm)?);
        if !dm.all_finite() {
            return Err(Error::Divergence("multi-modal discriminator training"));
        }
    }
    Ok(report)
}

/// As `train_dm`, for the poem-style discriminator.
pub fn train_dp<F: Scalar>(
    dp: &mut PoemStyleDiscriminator<F>,
    examples: &[DpExample],
    config: &DiscTrainConfig,
) -> Result<DiscTrainReport> {
    if examples.is_empty() {
        return Err(Error::EmptyInput("no discriminator examples"));
    }
    let mut report = DiscTrainReport::default();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); DP_CLASSES];
    for (i, ex) in examples.iter().enumerate() {
        members[ex.label.index()].push(i);
    }
    for class in DpClass::ALL {
        if members[class.index()].is_empty() {
            report
                .warnings
                .push(format!("class {class:?} absent from the training stream"));
        }
    }
    let mean_loss = |dp: &PoemStyleDiscriminator<F>| -> Result<f64> {
        let mut total = 0.0;
        for ex in examples {
            total += -dp.forward(&ex.tokens)?[ex.label.index()].ln().to_f64_lossy();
        }
        Ok(total / examples.len() as f64)
    };
    report.epoch_losses.push(mean_loss(dp)?);
    let lr = F::from_f64_lossy(config.lr);
    let mut rng = rng_for(config.seed, stream::DISC_BATCHES.wrapping_add(1));
    for _ in 0..config.epochs {
        let order = stratified_order(&members, examples.len(), &mut rng);
        for batch in order.chunks(config.batch_size.max(1)) {
            let mut acc: Option<DpGrads<F>> = None;
            for &i in batch {
                let ex = &examples[i];
                let (_, grads) = dp.ce_loss_grads(&ex.tokens, ex.label)?;
                match &mut acc {
                    Some(a) => a.add(&grads),
                    None => acc = Some(grads),
                }
            }
            if let Some(mut grads) = acc {
                grads.scale(F::one() / F::from_f64_lossy(batch.len() as f64));
                dp.apply_descent(&grads, lr);
            }
        }
        report.epoch_losses.push(mean_loss(dp)?);
        if !dp.all_finite() {
            return Err(Error::Divergence("poem-style discriminator training"));
        }
    }
    Ok(report)
}

/// Fraction of examples whose argmax class equals the label.
pub fn dm_accuracy<F: Scalar>(
    dm: &MultiModalDiscriminator<F>,
    examples: &[DmExample<F>],
) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for ex in examples {
        let probs = dm.forward(&ex.x, &ex.tokens)?;
        if argmax(&probs) == ex.label.index() {
            hits += 1;
        }
    }
    Ok(hits as f64 / examples.len() as f64)
}

pub fn dp_accuracy<F: Scalar>(
    dp: &PoemStyleDiscriminator<F>,
    examples: &[DpExample],
) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for ex in examples {
        let probs = dp.forward(&ex.tokens)?;
        if argmax(&probs) == ex.label.index() {
            hits += 1;
        }
    }
    Ok(hits as f64 / examples.len() as f64)
}
