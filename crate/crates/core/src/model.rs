//! Toy image-conditioned autoregressive language model with hand-derived
//! gradients.
//!
//! Row `t` of the output is the distribution of token `t + 1` given the image
//! and tokens `0..=t`:
//!
//! ```text
//! u_t = mean(E[tok_0..=tok_t]) + P[t] + x W_img
//! h_t = tanh(u_t W_h + b_h)
//! z_t = h_t W_o + b_o
//! ```
//!
//! `x` is the image feature, or a learned null-image vector for text-only
//! inputs. All parameters live in one flat vector; [`GradientBundle`] uses the
//! same layout so optimizers can work on plain slices.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::PseudoImage;
use crate::error::{Error, Result};
use crate::vocab::Token;

pub const INIT_SIGMA: f64 = 0.08;
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub vocab_size: usize,
    pub d_img: usize,
    pub d_model: usize,
    pub d_hidden: usize,
    pub max_len: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self { vocab_size: 128, d_img: 16, d_model: 32, d_hidden: 64, max_len: 16 }
    }
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("vocab_size", self.vocab_size),
            ("d_img", self.d_img),
            ("d_model", self.d_model),
            ("d_hidden", self.d_hidden),
            ("max_len", self.max_len),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::Shape(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    fn layout(&self) -> Layout {
        let (v, i, d, h, l) = (self.vocab_size, self.d_img, self.d_model, self.d_hidden, self.max_len);
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let token_embed = take(v * d);
        let img_proj = take(i * d);
        let pos_embed = take(l * d);
        let null_image = take(i);
        let w_hidden = take(d * h);
        let b_hidden = take(h);
        let w_out = take(h * v);
        let b_out = take(v);
        Layout { token_embed, img_proj, pos_embed, null_image, w_hidden, b_hidden, w_out, b_out, len: at }
    }

    pub fn n_params(&self) -> usize {
        self.layout().len
    }
}

type Span = std::ops::Range<usize>;

#[derive(Clone, Debug)]
struct Layout {
    token_embed: Span,
    img_proj: Span,
    pos_embed: Span,
    null_image: Span,
    w_hidden: Span,
    b_hidden: Span,
    w_out: Span,
    b_out: Span,
    len: usize,
}

/// Named views into a flat parameter (or gradient) vector.
macro_rules! block_accessors {
    ($($name:ident, $name_mut:ident;)*) => {
        $(
            pub fn $name(&self) -> &[f64] {
                let r = self.dims.layout().$name;
                &self.data[r]
            }
            pub fn $name_mut(&mut self) -> &mut [f64] {
                let r = self.dims.layout().$name;
                &mut self.data[r]
            }
        )*
    };
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub dims: ModelDims,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientBundle {
    pub dims: ModelDims,
    pub data: Vec<f64>,
    /// Number of examples accumulated.
    pub count: usize,
}

impl ModelParams {
    pub fn zeros(dims: ModelDims) -> Result<Self> {
        dims.validate()?;
        Ok(Self { dims, data: vec![0.0; dims.n_params()] })
    }

    /// Seeded Gaussian initialisation with standard deviation [`INIT_SIGMA`].
    pub fn init(dims: ModelDims, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(dims)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for x in p.data.iter_mut() {
            *x = INIT_SIGMA * rng.sample::<f64, _>(StandardNormal);
        }
        Ok(p)
    }

    pub fn from_flat(dims: ModelDims, data: Vec<f64>) -> Result<Self> {
        dims.validate()?;
        if data.len() != dims.n_params() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                dims.n_params(),
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    block_accessors! {
        token_embed, token_embed_mut;
        img_proj, img_proj_mut;
        pos_embed, pos_embed_mut;
        null_image, null_image_mut;
        w_hidden, w_hidden_mut;
        b_hidden, b_hidden_mut;
        w_out, w_out_mut;
        b_out, b_out_mut;
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// SHA-256 over the dimensions and the exact bit patterns of every
    /// parameter, hex encoded.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        let d = self.dims;
        for v in [d.vocab_size, d.d_img, d.d_model, d.d_hidden, d.max_len] {
            h.update((v as u64).to_le_bytes());
        }
        for x in &self.data {
            h.update(x.to_bits().to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ckpt = Checkpoint { version: CHECKPOINT_VERSION, dims: self.dims, params: self.data.clone() };
        std::fs::write(path, serde_json::to_vec(&ckpt)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_slice(&std::fs::read(path)?)?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", ckpt.version)));
        }
        let p = Self::from_flat(ckpt.dims, ckpt.params).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if !p.all_finite() {
            return Err(Error::Checkpoint("non-finite parameter".into()));
        }
        Ok(p)
    }

    fn check_input(&self, image: Option<&PseudoImage>, tokens: &[Token]) -> Result<()> {
        if tokens.len() > self.dims.max_len {
            return Err(Error::SequenceTooLong { len: tokens.len(), max_len: self.dims.max_len });
        }
        if let Some(t) = tokens.iter().find(|t| t.index() >= self.dims.vocab_size) {
            return Err(Error::TokenOutOfRange { token: t.0, vocab_size: self.dims.vocab_size });
        }
        if let Some(img) = image {
            if img.feature.len() != self.dims.d_img {
                return Err(Error::ImageDimension { got: img.feature.len(), expected: self.dims.d_img });
            }
        }
        Ok(())
    }

    /// Log-distributions for every position of `tokens`.
    pub fn forward(&self, image: Option<&PseudoImage>, tokens: &[Token]) -> Result<ModelOutput> {
        self.check_input(image, tokens)?;
        let rows: Vec<usize> = (0..tokens.len()).collect();
        let tr = self.trace(image, tokens, &rows);
        let v = self.dims.vocab_size;
        let mut logits = Matrix::zeros(tokens.len(), v);
        let mut logprobs = Matrix::zeros(tokens.len(), v);
        for (k, &t) in rows.iter().enumerate() {
            logits.row_mut(t).copy_from_slice(&tr.logits[k]);
            logprobs.row_mut(t).copy_from_slice(&tr.logprobs[k]);
        }
        Ok(ModelOutput { logits, logprobs })
    }

    /// Forward pass restricted to `rows`, keeping what backward needs.
    pub(crate) fn trace(&self, image: Option<&PseudoImage>, tokens: &[Token], rows: &[usize]) -> Trace {
        let ModelDims { vocab_size: nv, d_img: ni, d_model: nd, d_hidden: nh, .. } = self.dims;
        let lay = self.dims.layout();
        let e = &self.data[lay.token_embed];
        let pe = &self.data[lay.pos_embed];
        let wi = &self.data[lay.img_proj];
        let wh = &self.data[lay.w_hidden];
        let bh = &self.data[lay.b_hidden];
        let wo = &self.data[lay.w_out];
        let bo = &self.data[lay.b_out];

        let x: Vec<f64> = match image {
            Some(img) => img.feature.clone(),
            None => self.data[lay.null_image].to_vec(),
        };
        let mut img_term = vec![0.0; nd];
        for (i, xi) in x.iter().enumerate().take(ni) {
            let w = &wi[i * nd..(i + 1) * nd];
            img_term.iter_mut().zip(w).for_each(|(a, b)| *a += xi * b);
        }

        let max_row = rows.iter().copied().max().map_or(0, |m| m + 1);
        let mut prefix = vec![0.0; nd];
        let mut means = Vec::with_capacity(max_row);
        for (t, tok) in tokens.iter().take(max_row).enumerate() {
            let er = &e[tok.index() * nd..(tok.index() + 1) * nd];
            prefix.iter_mut().zip(er).for_each(|(a, b)| *a += b);
            let inv = 1.0 / (t + 1) as f64;
            means.push(prefix.iter().map(|s| s * inv).collect::<Vec<f64>>());
        }

        let mut tr = Trace { rows: rows.to_vec(), x, h: Vec::new(), u: Vec::new(), logits: Vec::new(), logprobs: Vec::new() };
        for &t in rows {
            let p = &pe[t * nd..(t + 1) * nd];
            let u: Vec<f64> = (0..nd).map(|k| means[t][k] + p[k] + img_term[k]).collect();
            let mut a = bh.to_vec();
            for (k, uk) in u.iter().enumerate() {
                let w = &wh[k * nh..(k + 1) * nh];
                a.iter_mut().zip(w).for_each(|(s, b)| *s += uk * b);
            }
            let h: Vec<f64> = a.iter().map(|v| v.tanh()).collect();
            let mut z = bo.to_vec();
            for (j, hj) in h.iter().enumerate() {
                let w = &wo[j * nv..(j + 1) * nv];
                z.iter_mut().zip(w).for_each(|(s, b)| *s += hj * b);
            }
            let lp = log_softmax(&z);
            tr.u.push(u);
            tr.h.push(h);
            tr.logits.push(z);
            tr.logprobs.push(lp);
        }
        tr
    }

    /// Accumulates into `grads` the gradient of `Σ_k dz[k] · z_{rows[k]}`,
    /// i.e. back-propagates the given logit gradients of a traced input.
    pub(crate) fn backprop(&self, tr: &Trace, tokens: &[Token], image_given: bool, dz: &[Vec<f64>], grads: &mut GradientBundle) {
        let ModelDims { vocab_size: nv, d_img: ni, d_model: nd, d_hidden: nh, .. } = self.dims;
        let lay = self.dims.layout();
        let wi = &self.data[lay.img_proj.clone()];
        let wh = &self.data[lay.w_hidden.clone()];
        let wo = &self.data[lay.w_out.clone()];
        let g = &mut grads.data;

        let max_row = tr.rows.iter().copied().max().map_or(0, |m| m + 1);
        // du_t / (t+1), summed over rows t >= s, is the gradient for token s.
        let mut du_scaled = vec![vec![0.0; nd]; max_row];
        let mut du_total = vec![0.0; nd];

        for (k, &t) in tr.rows.iter().enumerate() {
            let dzk = &dz[k];
            let h = &tr.h[k];
            let u = &tr.u[k];
            for (j, d) in dzk.iter().enumerate() {
                g[lay.b_out.start + j] += d;
            }
            let mut dh = vec![0.0; nh];
            for j in 0..nh {
                let w = &wo[j * nv..(j + 1) * nv];
                let gw = &mut g[lay.w_out.start + j * nv..lay.w_out.start + (j + 1) * nv];
                let hj = h[j];
                let mut acc = 0.0;
                for c in 0..nv {
                    gw[c] += hj * dzk[c];
                    acc += w[c] * dzk[c];
                }
                dh[j] = acc;
            }
            let da: Vec<f64> = dh.iter().zip(h).map(|(d, hv)| d * (1.0 - hv * hv)).collect();
            for j in 0..nh {
                g[lay.b_hidden.start + j] += da[j];
            }
            let mut du = vec![0.0; nd];
            for i in 0..nd {
                let w = &wh[i * nh..(i + 1) * nh];
                let gw = &mut g[lay.w_hidden.start + i * nh..lay.w_hidden.start + (i + 1) * nh];
                let ui = u[i];
                let mut acc = 0.0;
                for j in 0..nh {
                    gw[j] += ui * da[j];
                    acc += w[j] * da[j];
                }
                du[i] = acc;
            }
            for i in 0..nd {
                g[lay.pos_embed.start + t * nd + i] += du[i];
                du_total[i] += du[i];
            }
            let inv = 1.0 / (t + 1) as f64;
            du_scaled[t].iter_mut().zip(&du).for_each(|(a, b)| *a += b * inv);
        }

        // Image projection and (for text-only inputs) the null image.
        for i in 0..ni {
            let xi = tr.x[i];
            let gw = &mut g[lay.img_proj.start + i * nd..lay.img_proj.start + (i + 1) * nd];
            gw.iter_mut().zip(&du_total).for_each(|(a, b)| *a += xi * b);
        }
        if !image_given {
            for i in 0..ni {
                let w = &wi[i * nd..(i + 1) * nd];
                let dx: f64 = w.iter().zip(&du_total).map(|(a, b)| a * b).sum();
                g[lay.null_image.start + i] += dx;
            }
        }

        let mut acc = vec![0.0; nd];
        for s in (0..max_row).rev() {
            acc.iter_mut().zip(&du_scaled[s]).for_each(|(a, b)| *a += b);
            let tok = tokens[s].index();
            let start = lay.token_embed.start + tok * nd;
            g[start..start + nd].iter_mut().zip(&acc).for_each(|(a, b)| *a += b);
        }
    }
}

impl GradientBundle {
    pub fn zeros(dims: ModelDims) -> Self {
        Self { dims, data: vec![0.0; dims.n_params()], count: 0 }
    }

    block_accessors! {
        token_embed, token_embed_mut;
        img_proj, img_proj_mut;
        pos_embed, pos_embed_mut;
        null_image, null_image_mut;
        w_hidden, w_hidden_mut;
        b_hidden, b_hidden_mut;
        w_out, w_out_mut;
        b_out, b_out_mut;
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    dims: ModelDims,
    params: Vec<f64>,
}

#[derive(Clone, Debug)]
pub(crate) struct Trace {
    pub rows: Vec<usize>,
    pub x: Vec<f64>,
    pub u: Vec<Vec<f64>>,
    pub h: Vec<Vec<f64>>,
    pub logits: Vec<Vec<f64>>,
    pub logprobs: Vec<Vec<f64>>,
}

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelOutput {
    pub logits: Matrix,
    pub logprobs: Matrix,
}

pub fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

/// Anything that yields next-token log-distributions. Metrics and attacks
/// are written against this so they can be exercised with scripted models.
pub trait LanguageModel {
    fn vocab_size(&self) -> usize;

    fn max_len(&self) -> usize;

    /// Log-distributions of the token following each listed position.
    fn logprob_rows(&self, image: Option<&PseudoImage>, tokens: &[Token], rows: &[usize]) -> Result<Vec<Vec<f64>>>;
}

impl LanguageModel for ModelParams {
    fn vocab_size(&self) -> usize {
        self.dims.vocab_size
    }

    fn max_len(&self) -> usize {
        self.dims.max_len
    }

    fn logprob_rows(&self, image: Option<&PseudoImage>, tokens: &[Token], rows: &[usize]) -> Result<Vec<Vec<f64>>> {
        self.check_input(image, tokens)?;
        if let Some(&r) = rows.iter().find(|&&r| r >= tokens.len()) {
            return Err(Error::Shape(format!("row {r} outside sequence of length {}", tokens.len())));
        }
        Ok(self.trace(image, tokens, rows).logprobs)
    }
}

/// A prompt/answer pair as the model and the losses see it.
#[derive(Clone, Copy, Debug)]
pub struct Sequence<'a> {
    pub image: Option<&'a PseudoImage>,
    pub prompt: &'a [Token],
    pub answer: &'a [Token],
}

impl<'a> From<&'a crate::corpus::QAPair> for Sequence<'a> {
    fn from(p: &'a crate::corpus::QAPair) -> Self {
        Sequence { image: p.image.as_ref(), prompt: &p.prompt_tokens, answer: &p.answer_tokens }
    }
}

impl<'a> From<&'a crate::corpus::FinetuneExample> for Sequence<'a> {
    fn from(e: &'a crate::corpus::FinetuneExample) -> Self {
        Sequence { image: e.image.as_ref(), prompt: &e.input_tokens, answer: &e.target_tokens }
    }
}

/// Rows that predict each answer token when `prompt ++ answer` is fed in.
pub fn answer_rows(prompt_len: usize, answer_len: usize) -> Vec<usize> {
    (0..answer_len).map(|i| prompt_len + i - 1).collect()
}

pub(crate) fn concat(prompt: &[Token], answer: &[Token]) -> Vec<Token> {
    let mut v = prompt.to_vec();
    v.extend_from_slice(answer);
    v
}

/// Per-token log-probabilities of `answer` following `prompt`.
pub fn answer_logprobs(
    model: &dyn LanguageModel,
    image: Option<&PseudoImage>,
    prompt: &[Token],
    answer: &[Token],
) -> Result<Vec<f64>> {
    if answer.is_empty() {
        return Ok(Vec::new());
    }
    if prompt.is_empty() {
        return Err(Error::Empty("prompt"));
    }
    let seq = concat(prompt, answer);
    let rows = answer_rows(prompt.len(), answer.len());
    let lp = model.logprob_rows(image, &seq, &rows)?;
    Ok(lp.iter().zip(answer).map(|(row, a)| row[a.index()]).collect())
}

/// `Σ_t log P(answer_t | image, prompt, answer_<t)`.
pub fn sequence_logprob(
    model: &dyn LanguageModel,
    image: Option<&PseudoImage>,
    prompt: &[Token],
    answer: &[Token],
) -> Result<f64> {
    Ok(answer_logprobs(model, image, prompt, answer)?.iter().sum())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DecodeMode {
    Greedy,
    Sample { seed: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Decode {
    pub max_new: usize,
    pub mode: DecodeMode,
    /// Generation halts after emitting this token (it is included).
    pub stop: Option<Token>,
}

impl Decode {
    pub fn greedy(max_new: usize, stop: Token) -> Self {
        Self { max_new, mode: DecodeMode::Greedy, stop: Some(stop) }
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Autoregressive decoding. Returns only the generated tokens; stops at the
/// stop token, after `max_new` tokens, or when the context is full.
pub fn generate(
    model: &dyn LanguageModel,
    image: Option<&PseudoImage>,
    prompt: &[Token],
    decode: &Decode,
) -> Result<Vec<Token>> {
    if decode.max_new == 0 {
        return Err(Error::InvalidConfig("max_new must be >= 1".into()));
    }
    if prompt.is_empty() {
        return Err(Error::Empty("prompt"));
    }
    let mut rng = match decode.mode {
        DecodeMode::Sample { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        DecodeMode::Greedy => None,
    };
    let mut seq = prompt.to_vec();
    let mut out = Vec::new();
    while out.len() < decode.max_new && seq.len() < model.max_len() {
        let row = model.logprob_rows(image, &seq, &[seq.len() - 1])?.remove(0);
        let next = match rng.as_mut() {
            None => argmax(&row),
            Some(rng) => {
                let r: f64 = rng.random();
                let mut acc = 0.0;
                let mut pick = row.len() - 1;
                for (i, lp) in row.iter().enumerate() {
                    acc += lp.exp();
                    if r < acc {
                        pick = i;
                        break;
                    }
                }
                pick
            }
        };
        let tok = Token::from(next);
        seq.push(tok);
        out.push(tok);
        if Some(tok) == decode.stop {
            break;
        }
    }
    Ok(out)
}
