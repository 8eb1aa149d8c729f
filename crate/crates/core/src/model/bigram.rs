use crate::error::{Error, Result};
use crate::model::{Instance, Model, Payload};

/// Softmax bigram language model.
///
/// Parameters are a `(V + 1) x V` logit matrix stored row-major: row `r < V`
/// holds next-token logits after token `r`, row `V` is the start-of-sequence
/// context used to predict the first token. The per-instance loss is the
/// next-token negative log-likelihood summed over every position of the
/// sequence.
#[derive(Debug, Clone)]
pub struct SoftmaxBigram {
    vocab: usize,
}

impl SoftmaxBigram {
    pub fn new(vocab: usize) -> Self {
        assert!(vocab > 0, "vocabulary must be non-empty");
        SoftmaxBigram { vocab }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn tokens<'a>(&self, x: &'a Instance) -> Result<&'a [u32]> {
        match &x.payload {
            Payload::Tokens(t) => Ok(t),
            Payload::Features(_) => Err(Error::config("bigram model expects token payloads")),
        }
    }

    /// (context row, target) pairs of a sequence.
    fn transitions<'a>(&self, seq: &'a [u32]) -> impl Iterator<Item = (usize, usize)> + 'a {
        let bos = self.vocab;
        seq.iter().enumerate().map(move |(i, &tok)| {
            let ctx = if i == 0 { bos } else { seq[i - 1] as usize };
            (ctx, tok as usize)
        })
    }

    fn row<'a>(&self, theta: &'a [f64], ctx: usize) -> &'a [f64] {
        &theta[ctx * self.vocab..(ctx + 1) * self.vocab]
    }
}

/// Numerically stable softmax into `out`; returns log-sum-exp.
fn softmax(logits: &[f64], out: &mut [f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = (z - max).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
    max + sum.ln()
}

impl Model for SoftmaxBigram {
    fn num_params(&self) -> usize {
        (self.vocab + 1) * self.vocab
    }

    fn check_instance(&self, x: &Instance) -> Result<()> {
        let toks = self.tokens(x)?;
        if let Some(&bad) = toks.iter().find(|&&t| t as usize >= self.vocab) {
            return Err(Error::config(format!(
                "token id {bad} out of range for vocabulary of {} (instance {})",
                self.vocab, x.id
            )));
        }
        Ok(())
    }

    fn loss(&self, x: &Instance, theta: &[f64]) -> Result<f64> {
        let toks = self.tokens(x)?;
        let mut probs = vec![0.0; self.vocab];
        let mut nll = 0.0;
        for (ctx, target) in self.transitions(toks) {
            let row = self.row(theta, ctx);
            let lse = softmax(row, &mut probs);
            nll += lse - row[target];
        }
        Ok(nll)
    }

    fn grad_acc(&self, x: &Instance, theta: &[f64], weight: f64, out: &mut [f64]) -> Result<()> {
        let toks = self.tokens(x)?;
        let v = self.vocab;
        let mut probs = vec![0.0; v];
        for (ctx, target) in self.transitions(toks) {
            softmax(self.row(theta, ctx), &mut probs);
            let grow = &mut out[ctx * v..(ctx + 1) * v];
            for (g, p) in grow.iter_mut().zip(&probs) {
                *g += weight * p;
            }
            grow[target] -= weight;
        }
        Ok(())
    }

    fn has_exact_hvp(&self) -> bool {
        true
    }

    // Per position the logit Hessian is diag(p) - p p^T.
    fn hvp_acc(&self, x: &Instance, theta: &[f64], dir: &[f64], weight: f64, out: &mut [f64]) -> Result<()> {
        let toks = self.tokens(x)?;
        let v = self.vocab;
        let mut probs = vec![0.0; v];
        for (ctx, _) in self.transitions(toks) {
            softmax(self.row(theta, ctx), &mut probs);
            let drow = &dir[ctx * v..(ctx + 1) * v];
            let pv: f64 = probs.iter().zip(drow).map(|(p, d)| p * d).sum();
            let orow = &mut out[ctx * v..(ctx + 1) * v];
            for ((o, p), d) in orow.iter_mut().zip(&probs).zip(drow) {
                *o += weight * p * (d - pv);
            }
        }
        Ok(())
    }
}
