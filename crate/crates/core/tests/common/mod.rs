//! Helpers shared by the integration tests.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use siu_core::corpus::{ImageSubject, PseudoImage};
use siu_core::losses::{backward, evaluate_loss, DualMask, LossSpec};
use siu_core::model::{LanguageModel, ModelDims, ModelParams, Sequence};
use siu_core::Token;

pub const H: f64 = 1e-5;

pub fn dims() -> ModelDims {
    ModelDims { vocab_size: 32, d_img: 4, d_model: 8, d_hidden: 6, max_len: 10 }
}

pub struct Draw {
    pub params: ModelParams,
    pub reference: ModelParams,
    pub image: Option<PseudoImage>,
    pub prompt: Vec<Token>,
    pub answer: Vec<Token>,
    pub mask: DualMask,
    pub alpha: f64,
    pub beta: f64,
    pub kl_weight: f64,
}

pub fn draw(seed: u64) -> Draw {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = dims();
    let scale = |mut p: ModelParams, s: f64| {
        p.data.iter_mut().for_each(|x| *x *= s);
        p
    };
    let params = scale(ModelParams::init(d, rng.random()).unwrap(), 5.0);
    let reference = scale(ModelParams::init(d, rng.random()).unwrap(), 5.0);
    let image = rng.random_bool(0.5).then(|| PseudoImage {
        subject: ImageSubject::Unseen,
        feature: (0..d.d_img).map(|_| rng.random_range(-1.0..1.0)).collect(),
        noise_seed: 0,
    });
    let lp = rng.random_range(1..5);
    let la = rng.random_range(1..=d.max_len - lp);
    let tok = |rng: &mut ChaCha8Rng| Token(rng.random_range(0..d.vocab_size as u32));
    let prompt = (0..lp).map(|_| tok(&mut rng)).collect();
    let answer = (0..la).map(|_| tok(&mut rng)).collect();
    let mask = DualMask {
        token_mask: (0..la).map(|_| rng.random_bool(0.7)).collect(),
        vocab_mask: (0..d.vocab_size).map(|_| rng.random_bool(0.8)).collect(),
    };
    Draw {
        params,
        reference,
        image,
        prompt,
        answer,
        mask,
        alpha: rng.random_range(0.0..2.0),
        beta: rng.random_range(0.0..2.0),
        kl_weight: rng.random_range(0.0..2.0),
    }
}

pub fn specs(d: &Draw) -> Vec<(&'static str, LossSpec<'_>)> {
    vec![
        ("ce", LossSpec::cross_entropy()),
        ("dmk", LossSpec::dmk(&d.reference, &d.mask)),
        ("total", LossSpec::total(&d.reference, &d.mask, d.alpha, d.beta)),
        ("ga", LossSpec::ga()),
        ("ga_kl", LossSpec::ga_kl(&d.reference, d.kl_weight)),
    ]
}

/// Largest relative error over all parameters; the relative error of one
/// entry is `|a − n| / max(|a| + |n|, 1e-6)`.
pub fn worst_error(d: &Draw, spec: &LossSpec<'_>) -> f64 {
    gradient_errors(d, spec).0
}

/// Worst relative error (as in [`worst_error`]) and worst absolute
/// difference between analytic and central-difference gradients.
pub fn gradient_errors(d: &Draw, spec: &LossSpec<'_>) -> (f64, f64) {
    let seq = d.seq();
    let (_, g) = backward(&d.params, &[(seq, spec.clone())]).unwrap();
    let mut p = d.params.clone();
    let mut worst: f64 = 0.0;
    let mut worst_abs: f64 = 0.0;
    for i in 0..p.data.len() {
        let orig = p.data[i];
        p.data[i] = orig + H;
        let up = evaluate_loss(&p, seq, spec).unwrap().total;
        p.data[i] = orig - H;
        let down = evaluate_loss(&p, seq, spec).unwrap().total;
        p.data[i] = orig;
        let num = (up - down) / (2.0 * H);
        let a = g.data[i];
        let diff = (a - num).abs();
        worst_abs = worst_abs.max(diff);
        // Entries whose true gradient is ~0 are dominated by rounding.
        if diff > 1e-9 {
            worst = worst.max(diff / (a.abs() + num.abs()).max(1e-6));
        }
    }
    (worst, worst_abs)
}

impl Draw {
    pub fn seq(&self) -> Sequence<'_> {
        Sequence { image: self.image.as_ref(), prompt: &self.prompt, answer: &self.answer }
    }
}

/// Next-token distribution given only the previous token.
pub struct Bigram {
    /// `logp[a][b] = log P(b | a)`.
    pub logp: Vec<Vec<f64>>,
}

impl Bigram {
    pub fn uniform(vocab: usize) -> Self {
        Self { logp: vec![vec![-(vocab as f64).ln(); vocab]; vocab] }
    }

    /// Random rows drawn from `seed`.
    pub fn random(vocab: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logp = (0..vocab)
            .map(|_| {
                let w: Vec<f64> = (0..vocab).map(|_| rng.random_range(0.05..1.0)).collect();
                let s: f64 = w.iter().sum();
                w.iter().map(|x| (x / s).ln()).collect()
            })
            .collect();
        Self { logp }
    }
}

impl LanguageModel for Bigram {
    fn vocab_size(&self) -> usize {
        self.logp.len()
    }

    fn max_len(&self) -> usize {
        64
    }

    fn logprob_rows(&self, _: Option<&PseudoImage>, tokens: &[Token], rows: &[usize]) -> siu_core::Result<Vec<Vec<f64>>> {
        Ok(rows.iter().map(|&r| self.logp[tokens[r].index()].clone()).collect())
    }
}

/// Answers each known prompt with a fixed continuation, putting `peak` of
/// the mass on the scripted token. Unknown contexts get a uniform row.
pub struct Scripted {
    pub vocab: usize,
    pub peak: f64,
    pub rules: Vec<(Vec<Token>, Vec<Token>)>,
}

impl Scripted {
    fn next(&self, ctx: &[Token]) -> Option<Token> {
        self.rules
            .iter()
            .filter(|(p, _)| ctx.len() >= p.len() && ctx.starts_with(p))
            .max_by_key(|(p, _)| p.len())
            .and_then(|(p, a)| a.get(ctx.len() - p.len()).copied())
    }
}

impl LanguageModel for Scripted {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn max_len(&self) -> usize {
        64
    }

    fn logprob_rows(&self, _: Option<&PseudoImage>, tokens: &[Token], rows: &[usize]) -> siu_core::Result<Vec<Vec<f64>>> {
        Ok(rows
            .iter()
            .map(|&r| {
                let n = self.vocab as f64;
                match self.next(&tokens[..=r]) {
                    Some(t) => {
                        let rest = ((1.0 - self.peak) / (n - 1.0)).ln();
                        let mut row = vec![rest; self.vocab];
                        row[t.index()] = self.peak.ln();
                        row
                    }
                    None => vec![-n.ln(); self.vocab],
                }
            })
            .collect())
    }
}
