//! Tiny post-embedding transformer encoder with task heads.
//!
//! Each block is `y = x + Attn(x)`, `out = y + W2 gelu(W1 y)`; there is no
//! layer normalization. Every instance is encoded on its own, so sequences
//! need no padding. Heads read the mean-pooled final states (CLS, RGR) or
//! every token state (SL).
//!
//! Parameters live in flat `Vec<f64>`s: one for the encoder, one per task
//! head. Gradients use the same layout, so optimizers and checksums work on
//! plain slices.

use std::collections::BTreeMap;
use std::ops::Range;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::config::{derive_seed, ToyModelConfig};
use super::data::{Instance, Label, TaskDataset};
use super::ToyError;
use crate::gradstore::Objective;
use crate::grid::HeadGrid;

#[derive(Clone, Debug, PartialEq)]
pub struct BlockSlots {
    pub wq: Range<usize>,
    pub bq: Range<usize>,
    pub wk: Range<usize>,
    pub bk: Range<usize>,
    pub wv: Range<usize>,
    pub bv: Range<usize>,
    pub wo: Range<usize>,
    pub bo: Range<usize>,
    pub w1: Range<usize>,
    pub b1: Range<usize>,
    pub w2: Range<usize>,
    pub b2: Range<usize>,
}

/// Offsets of every encoder tensor inside the flat parameter vector.
/// Matrices are row-major `in x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub tok_emb: Range<usize>,
    pub pos_emb: Range<usize>,
    pub blocks: Vec<BlockSlots>,
    pub len: usize,
}

impl Layout {
    pub fn new(c: &ToyModelConfig) -> Self {
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let (d, f) = (c.model_dim, c.ff_dim);
        let tok_emb = take(c.vocab_size * d);
        let pos_emb = take(c.max_len * d);
        let blocks = (0..c.layers)
            .map(|_| BlockSlots {
                wq: take(d * d),
                bq: take(d),
                wk: take(d * d),
                bk: take(d),
                wv: take(d * d),
                bv: take(d),
                wo: take(d * d),
                bo: take(d),
                w1: take(d * f),
                b1: take(f),
                w2: take(f * d),
                b2: take(d),
            })
            .collect();
        Self {
            tok_emb,
            pos_emb,
            blocks,
            len: at,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskHead {
    pub objective: Objective,
    pub out_dim: usize,
    /// `W` (`model_dim x out_dim`, row-major) followed by `b`.
    pub params: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ToyModelConfig,
    pub layout: Layout,
    pub encoder: Vec<f64>,
    pub heads: BTreeMap<String, TaskHead>,
}

/// Gradient of one task's loss: encoder part plus that task's head.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradient {
    pub encoder: Vec<f64>,
    pub head: Vec<f64>,
}

impl Gradient {
    pub fn zeros_for(model: &Model, task_id: &str) -> Result<Self, ToyError> {
        let head = model.head(task_id)?;
        Ok(Self {
            encoder: vec![0.0; model.encoder.len()],
            head: vec![0.0; head.params.len()],
        })
    }

    pub fn norm(&self) -> f64 {
        self.encoder.iter().chain(&self.head).map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, c: f64) {
        self.encoder
            .iter_mut()
            .chain(self.head.iter_mut())
            .for_each(|g| *g *= c);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Prediction {
    Class(usize),
    Value(f64),
    Tags(Vec<usize>),
}

struct BlockCache {
    x: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: Vec<Array2<f64>>,
    o: Array2<f64>,
    y: Array2<f64>,
    z: Array2<f64>,
    g: Array2<f64>,
}

struct Trace {
    blocks: Vec<BlockCache>,
    out: Array2<f64>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn gelu(z: f64) -> f64 {
    0.5 * z * (1.0 + (GELU_C * (z + GELU_A * z * z * z)).tanh())
}

fn gelu_grad(z: f64) -> f64 {
    let t = (GELU_C * (z + GELU_A * z * z * z)).tanh();
    0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * z * z)
}

fn softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        softmax_in_place(row.as_slice_mut().expect("standard layout"));
    }
}

fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    v.iter_mut().for_each(|x| *x /= sum);
}

fn log_softmax_at(logits: &[f64], i: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits[i] - lse
}

fn argmax(v: &[f64]) -> usize {
    // First maximum wins.
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn mat<'a>(p: &'a [f64], r: &Range<usize>, rows: usize, cols: usize) -> ArrayView2<'a, f64> {
    ArrayView2::from_shape((rows, cols), &p[r.clone()]).expect("layout matches shape")
}

fn vec1<'a>(p: &'a [f64], r: &Range<usize>) -> ArrayView1<'a, f64> {
    ArrayView1::from(&p[r.clone()])
}

fn mat_mut<'a>(p: &'a mut [f64], r: &Range<usize>, rows: usize, cols: usize) -> ArrayViewMut2<'a, f64> {
    ArrayViewMut2::from_shape((rows, cols), &mut p[r.clone()]).expect("layout matches shape")
}

/// `g[r] += a^T b`.
fn add_at_b(g: &mut [f64], r: &Range<usize>, a: &ArrayView2<f64>, b: &ArrayView2<f64>) {
    let mut out = mat_mut(g, r, a.ncols(), b.ncols());
    general_mat_mul(1.0, &a.t(), b, 1.0, &mut out);
}

/// `g[r] += column sums of m`.
fn add_colsum(g: &mut [f64], r: &Range<usize>, m: &ArrayView2<f64>) {
    let mut out = ArrayViewMut1::from(&mut g[r.clone()]);
    out += &m.sum_axis(Axis(0));
}

fn affine(x: &ArrayView2<f64>, w: ArrayView2<f64>, b: ArrayView1<f64>) -> Array2<f64> {
    let mut out = x.dot(&w);
    out += &b;
    out
}

impl Model {
    /// Encoder initialized from `config.seed`; one head per `(task_id,
    /// objective, out_dim)`, each seeded from the task id alone.
    pub fn new(config: &ToyModelConfig, heads: &[(String, Objective, usize)]) -> Result<Self, ToyError> {
        let problems = config.problems();
        if !problems.is_empty() {
            return Err(ToyError::InvalidConfig(problems));
        }
        let layout = Layout::new(config);
        let mut encoder = vec![0.0; layout.len];
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (d, f) = (config.model_dim as f64, config.ff_dim as f64);
        let mut fill = |p: &mut [f64], r: &Range<usize>, std: f64| {
            let n = Normal::new(0.0, std).expect("positive std");
            p[r.clone()].iter_mut().for_each(|x| *x = n.sample(&mut rng));
        };
        fill(&mut encoder, &layout.tok_emb, 1.0);
        fill(&mut encoder, &layout.pos_emb, 0.5);
        for b in &layout.blocks {
            for r in [&b.wq, &b.wk, &b.wv] {
                fill(&mut encoder, r, d.sqrt().recip());
            }
            // Residual branches start small so stacked blocks stay near identity.
            fill(&mut encoder, &b.wo, 0.5 / d.sqrt());
            fill(&mut encoder, &b.w1, d.sqrt().recip());
            fill(&mut encoder, &b.w2, 0.5 / f.sqrt());
        }
        let mut model = Self {
            config: config.clone(),
            layout,
            encoder,
            heads: BTreeMap::new(),
        };
        for (task_id, objective, out_dim) in heads {
            model.add_head(task_id, *objective, *out_dim)?;
        }
        Ok(model)
    }

    pub fn for_dataset(config: &ToyModelConfig, ds: &TaskDataset) -> Result<Self, ToyError> {
        Self::new(config, &[(ds.task_id.clone(), ds.objective, ds.out_dim)])
    }

    /// Adds (or re-initializes) a head.
    pub fn add_head(&mut self, task_id: &str, objective: Objective, out_dim: usize) -> Result<(), ToyError> {
        if out_dim == 0 {
            return Err(ToyError::InvalidSpec {
                task_id: task_id.to_owned(),
                reason: "task head needs at least one output".into(),
            });
        }
        let d = self.config.model_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, &format!("head/{task_id}")));
        let mut params = vec![0.0; d * out_dim + out_dim];
        if self.config.head_init_scale > 0.0 {
            let n = Normal::new(0.0, self.config.head_init_scale / (d as f64).sqrt()).expect("positive std");
            params[..d * out_dim].iter_mut().for_each(|x| *x = n.sample(&mut rng));
        }
        self.heads.insert(
            task_id.to_owned(),
            TaskHead {
                objective,
                out_dim,
                params,
            },
        );
        Ok(())
    }

    pub fn head(&self, task_id: &str) -> Result<&TaskHead, ToyError> {
        self.heads
            .get(task_id)
            .ok_or_else(|| ToyError::UnknownTask(task_id.to_owned()))
    }

    pub fn param_count(&self) -> usize {
        self.encoder.len() + self.heads.values().map(|h| h.params.len()).sum::<usize>()
    }

    /// SHA-256 over every parameter's little-endian bytes, encoder first,
    /// then heads by task id.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for v in &self.encoder {
            h.update(v.to_le_bytes());
        }
        for (id, head) in &self.heads {
            h.update(id.as_bytes());
            for v in &head.params {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    fn check_tokens(&self, task_id: &str, inst: &Instance) -> Result<(), ToyError> {
        let bad = |reason: String| ToyError::BadInstance {
            task_id: task_id.to_owned(),
            instance_id: inst.id.clone(),
            reason,
        };
        if inst.tokens.is_empty() || inst.tokens.len() > self.config.max_len {
            return Err(bad(format!(
                "length {} outside 1..={}",
                inst.tokens.len(),
                self.config.max_len
            )));
        }
        if let Some(t) = inst.tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(bad(format!(
                "token {t} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    fn encode(&self, tokens: &[u32]) -> Trace {
        let c = &self.config;
        let (d, t_len) = (c.model_dim, tokens.len());
        let p = &self.encoder;
        let tok = mat(p, &self.layout.tok_emb, c.vocab_size, d);
        let pos = mat(p, &self.layout.pos_emb, c.max_len, d);
        let mut x = Array2::zeros((t_len, d));
        for (t, &tk) in tokens.iter().enumerate() {
            let mut row = x.row_mut(t);
            row += &tok.row(tk as usize);
            row += &pos.row(t);
        }
        let mut blocks = Vec::new();
        if c.blocks_enabled {
            for b in &self.layout.blocks {
                let (cache, out) = self.block_forward(b, x);
                blocks.push(cache);
                x = out;
            }
        }
        Trace { blocks, out: x }
    }

    fn block_forward(&self, b: &BlockSlots, x: Array2<f64>) -> (BlockCache, Array2<f64>) {
        let c = &self.config;
        let (d, f, dh) = (c.model_dim, c.ff_dim, c.head_dim());
        let p = &self.encoder;
        let xv = x.view();
        let q = affine(&xv, mat(p, &b.wq, d, d), vec1(p, &b.bq));
        let k = affine(&xv, mat(p, &b.wk, d, d), vec1(p, &b.bk));
        let v = affine(&xv, mat(p, &b.wv, d, d), vec1(p, &b.bv));
        let scale = (dh as f64).sqrt().recip();
        let mut o = Array2::zeros((x.nrows(), d));
        let mut attn = Vec::with_capacity(c.heads);
        for h in 0..c.heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let mut a = q.slice(cols).dot(&k.slice(cols).t());
            a *= scale;
            softmax_rows(&mut a);
            o.slice_mut(cols).assign(&a.dot(&v.slice(cols)));
            attn.push(a);
        }
        let mut y = affine(&o.view(), mat(p, &b.wo, d, d), vec1(p, &b.bo));
        y += &x;
        let z = affine(&y.view(), mat(p, &b.w1, d, f), vec1(p, &b.b1));
        let g = z.mapv(gelu);
        let mut out = affine(&g.view(), mat(p, &b.w2, f, d), vec1(p, &b.b2));
        out += &y;
        (
            BlockCache {
                x,
                q,
                k,
                v,
                attn,
                o,
                y,
                z,
                g,
            },
            out,
        )
    }

    /// Backpropagates `d_out` through one block, accumulating into `grad`,
    /// and returns the gradient at the block input.
    fn block_backward(&self, b: &BlockSlots, cache: &BlockCache, d_out: Array2<f64>, grad: &mut [f64]) -> Array2<f64> {
        let c = &self.config;
        let (d, f, dh) = (c.model_dim, c.ff_dim, c.head_dim());
        let p = &self.encoder;

        add_at_b(grad, &b.w2, &cache.g.view(), &d_out.view());
        add_colsum(grad, &b.b2, &d_out.view());
        let mut d_z = d_out.dot(&mat(p, &b.w2, f, d).t());
        d_z.zip_mut_with(&cache.z, |dz, &z| *dz *= gelu_grad(z));
        add_at_b(grad, &b.w1, &cache.y.view(), &d_z.view());
        add_colsum(grad, &b.b1, &d_z.view());
        let mut d_y = d_out;
        d_y += &d_z.dot(&mat(p, &b.w1, d, f).t());

        add_at_b(grad, &b.wo, &cache.o.view(), &d_y.view());
        add_colsum(grad, &b.bo, &d_y.view());
        let d_o = d_y.dot(&mat(p, &b.wo, d, d).t());

        let scale = (dh as f64).sqrt().recip();
        let t_len = cache.x.nrows();
        let mut d_q = Array2::zeros((t_len, d));
        let mut d_k = Array2::zeros((t_len, d));
        let mut d_v = Array2::zeros((t_len, d));
        for (h, a) in cache.attn.iter().enumerate() {
            let cols = s![.., h * dh..(h + 1) * dh];
            let d_oh = d_o.slice(cols);
            let d_a = d_oh.dot(&cache.v.slice(cols).t());
            d_v.slice_mut(cols).assign(&a.t().dot(&d_oh));
            let mut d_s = Array2::zeros((t_len, t_len));
            for i in 0..t_len {
                let (ar, dar) = (a.row(i), d_a.row(i));
                let inner = ar.dot(&dar);
                for j in 0..t_len {
                    d_s[[i, j]] = ar[j] * (dar[j] - inner) * scale;
                }
            }
            d_q.slice_mut(cols).assign(&d_s.dot(&cache.k.slice(cols)));
            d_k.slice_mut(cols).assign(&d_s.t().dot(&cache.q.slice(cols)));
        }
        let xv = cache.x.view();
        for (w, bias, dm) in [(&b.wq, &b.bq, &d_q), (&b.wk, &b.bk, &d_k), (&b.wv, &b.bv, &d_v)] {
            add_at_b(grad, w, &xv, &dm.view());
            add_colsum(grad, bias, &dm.view());
            d_y += &dm.dot(&mat(p, w, d, d).t());
        }
        d_y
    }

    /// Loss of one instance; adds `weight * dloss/dtheta` into `grad`.
    pub fn loss_and_grad(
        &self,
        task_id: &str,
        inst: &Instance,
        weight: f64,
        grad: &mut Gradient,
    ) -> Result<f64, ToyError> {
        self.scoped_loss_and_grad(task_id, inst, weight, grad, true)
    }

    fn scoped_loss_and_grad(
        &self,
        task_id: &str,
        inst: &Instance,
        weight: f64,
        grad: &mut Gradient,
        with_encoder: bool,
    ) -> Result<f64, ToyError> {
        let head = self.head(task_id)?;
        self.check_tokens(task_id, inst)?;
        let d = self.config.model_dim;
        let trace = self.encode(&inst.tokens);
        let t_len = inst.tokens.len();
        let w = mat(&head.params, &(0..d * head.out_dim), d, head.out_dim);
        let bias = vec1(&head.params, &(d * head.out_dim..head.params.len()));
        let w_range = 0..d * head.out_dim;
        let b_range = d * head.out_dim..head.params.len();

        let (loss, d_out) = match (head.objective, &inst.label) {
            (Objective::Classification, Label::Class(y)) if *y < head.out_dim => {
                let pooled = trace.out.mean_axis(Axis(0)).expect("non-empty sequence");
                let mut logits = pooled.dot(&w) + bias;
                let logits = logits.as_slice_mut().expect("contiguous");
                let loss = -log_softmax_at(logits, *y);
                softmax_in_place(logits);
                logits[*y] -= 1.0;
                let d_logits = Array1::from(logits.to_vec()) * weight;
                self.pooled_head_backward(&pooled, &d_logits, &w, t_len, &w_range, &b_range, grad, loss)
            }
            (Objective::Regression, Label::Value(y)) => {
                let pooled = trace.out.mean_axis(Axis(0)).expect("non-empty sequence");
                let pred = pooled.dot(&w)[0] + bias[0];
                let loss = (pred - y) * (pred - y);
                let d_logits = Array1::from(vec![2.0 * (pred - y) * weight]);
                self.pooled_head_backward(&pooled, &d_logits, &w, t_len, &w_range, &b_range, grad, loss)
            }
            (Objective::SequenceLabeling, Label::Tags(tags))
                if tags.len() == t_len && tags.iter().all(|&t| t < head.out_dim) =>
            {
                let mut logits = affine(&trace.out.view(), w, bias);
                let mut loss = 0.0;
                for (mut row, &tag) in logits.rows_mut().into_iter().zip(tags) {
                    let r = row.as_slice_mut().expect("contiguous");
                    loss -= log_softmax_at(r, tag);
                    softmax_in_place(r);
                    r[tag] -= 1.0;
                }
                let inv = 1.0 / t_len as f64;
                logits *= weight * inv;
                add_at_b(&mut grad.head, &w_range, &trace.out.view(), &logits.view());
                add_colsum(&mut grad.head, &b_range, &logits.view());
                (loss * inv, logits.dot(&w.t()))
            }
            (objective, label) => {
                return Err(ToyError::BadInstance {
                    task_id: task_id.to_owned(),
                    instance_id: inst.id.clone(),
                    reason: format!(
                        "label {label:?} does not fit a {objective:?} head of width {}",
                        head.out_dim
                    ),
                })
            }
        };
        if !with_encoder {
            return Ok(loss);
        }

        let mut d_x = d_out;
        for (b, cache) in self.layout.blocks.iter().zip(&trace.blocks).rev() {
            d_x = self.block_backward(b, cache, d_x, &mut grad.encoder);
        }
        let c = &self.config;
        let mut tok = mat_mut(&mut grad.encoder, &self.layout.tok_emb, c.vocab_size, d);
        for (t, &tk) in inst.tokens.iter().enumerate() {
            let mut row = tok.row_mut(tk as usize);
            row += &d_x.row(t);
        }
        let mut pos = mat_mut(&mut grad.encoder, &self.layout.pos_emb, c.max_len, d);
        pos.slice_mut(s![..t_len, ..]).zip_mut_with(&d_x, |g, &v| *g += v);
        Ok(loss)
    }

    #[allow(clippy::too_many_arguments)]
    fn pooled_head_backward(
        &self,
        pooled: &Array1<f64>,
        d_logits: &Array1<f64>,
        w: &ArrayView2<f64>,
        t_len: usize,
        w_range: &Range<usize>,
        b_range: &Range<usize>,
        grad: &mut Gradient,
        loss: f64,
    ) -> (f64, Array2<f64>) {
        let pooled2 = pooled.view().insert_axis(Axis(0));
        let d2 = d_logits.view().insert_axis(Axis(0));
        add_at_b(&mut grad.head, w_range, &pooled2, &d2);
        add_colsum(&mut grad.head, b_range, &d2);
        let d_pooled = w.dot(d_logits) / t_len as f64;
        let d_out = d_pooled
            .broadcast((t_len, pooled.len()))
            .expect("row broadcast")
            .to_owned();
        (loss, d_out)
    }

    /// Mean loss over `batch`, with the gradient of that mean.
    pub fn batch_loss_and_grad(&self, task_id: &str, batch: &[&Instance]) -> Result<(f64, Gradient), ToyError> {
        self.scoped_batch(task_id, batch, true)
    }

    /// As [`Model::batch_loss_and_grad`], but the encoder gradient is left
    /// at zero and its backward pass is skipped.
    pub fn batch_loss_and_head_grad(&self, task_id: &str, batch: &[&Instance]) -> Result<(f64, Gradient), ToyError> {
        self.scoped_batch(task_id, batch, false)
    }

    fn scoped_batch(
        &self,
        task_id: &str,
        batch: &[&Instance],
        with_encoder: bool,
    ) -> Result<(f64, Gradient), ToyError> {
        let mut grad = Gradient::zeros_for(self, task_id)?;
        if batch.is_empty() {
            return Ok((0.0, grad));
        }
        let w = 1.0 / batch.len() as f64;
        let mut total = 0.0;
        for inst in batch {
            total += self.scoped_loss_and_grad(task_id, inst, w, &mut grad, with_encoder)?;
        }
        Ok((total * w, grad))
    }

    pub fn batch_loss(&self, task_id: &str, batch: &[&Instance]) -> Result<f64, ToyError> {
        Ok(self.batch_loss_and_grad(task_id, batch)?.0)
    }

    pub fn predict(&self, task_id: &str, inst: &Instance) -> Result<Prediction, ToyError> {
        let head = self.head(task_id)?;
        self.check_tokens(task_id, inst)?;
        let d = self.config.model_dim;
        let trace = self.encode(&inst.tokens);
        let w = mat(&head.params, &(0..d * head.out_dim), d, head.out_dim);
        let bias = vec1(&head.params, &(d * head.out_dim..head.params.len()));
        Ok(match head.objective {
            Objective::Classification => {
                let pooled = trace.out.mean_axis(Axis(0)).expect("non-empty sequence");
                let logits = pooled.dot(&w) + bias;
                Prediction::Class(argmax(logits.as_slice().expect("contiguous")))
            }
            Objective::Regression => {
                let pooled = trace.out.mean_axis(Axis(0)).expect("non-empty sequence");
                Prediction::Value(pooled.dot(&w)[0] + bias[0])
            }
            Objective::SequenceLabeling => {
                let logits = affine(&trace.out.view(), w, bias);
                Prediction::Tags(
                    logits
                        .rows()
                        .into_iter()
                        .map(|r| argmax(r.as_slice().expect("contiguous")))
                        .collect(),
                )
            }
        })
    }

    /// Per-head gradient mass: for head `h` of layer `l`, the sum of `|g|`
    /// over its columns of `Wq`, `Wk`, `Wv`, the matching bias entries, and
    /// its rows of `Wo`. The output bias is shared and not attributed.
    pub fn head_cells(&self, encoder_grad: &[f64]) -> HeadGrid {
        let c = &self.config;
        let (d, dh) = (c.model_dim, c.head_dim());
        let mut cells = HeadGrid::zeros(c.layers, c.heads);
        for (l, b) in self.layout.blocks.iter().enumerate() {
            for h in 0..c.heads {
                let cols = h * dh..(h + 1) * dh;
                let mut total = 0.0;
                for (w, bias) in [(&b.wq, &b.bq), (&b.wk, &b.bk), (&b.wv, &b.bv)] {
                    let wm = mat(encoder_grad, w, d, d);
                    total += wm.slice(s![.., cols.clone()]).iter().map(|g| g.abs()).sum::<f64>();
                    total += encoder_grad[bias.clone()][cols.clone()]
                        .iter()
                        .map(|g| g.abs())
                        .sum::<f64>();
                }
                let wo = mat(encoder_grad, &b.wo, d, d);
                total += wo.slice(s![cols.clone(), ..]).iter().map(|g| g.abs()).sum::<f64>();
                cells.set(l, h, total);
            }
        }
        cells
    }

    /// Flat view of the parameters one task's loss depends on: encoder then
    /// that task's head. Indices match `Gradient` concatenated the same way.
    pub fn task_param_mut(&mut self, task_id: &str, index: usize) -> Result<&mut f64, ToyError> {
        let n = self.encoder.len();
        if index < n {
            return Ok(&mut self.encoder[index]);
        }
        let head = self
            .heads
            .get_mut(task_id)
            .ok_or_else(|| ToyError::UnknownTask(task_id.to_owned()))?;
        let len = head.params.len();
        head.params
            .get_mut(index - n)
            .ok_or(ToyError::ParamIndex { index, len: n + len })
    }

    pub fn task_param_count(&self, task_id: &str) -> Result<usize, ToyError> {
        Ok(self.encoder.len() + self.head(task_id)?.params.len())
    }
}
