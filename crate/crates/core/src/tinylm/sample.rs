use rand::Rng as _;

use super::{argmax, softmax, LanguageModel, TokenSeq, EOS};
use crate::error::{Error, Result};
use crate::rng;

/// Sample a response after `prompt` until EOS or `max_len` tokens.
///
/// `temperature == 0.0` selects greedy decoding (argmax, lowest index on ties);
/// negative or non-finite temperatures are rejected. The EOS token is not part
/// of the returned response.
pub fn sample_sequence<M: LanguageModel + ?Sized>(
    model: &M,
    prompt: &TokenSeq,
    temperature: f64,
    max_len: usize,
    seed: u64,
) -> Result<TokenSeq> {
    if max_len == 0 {
        return Err(Error::input("max_len must be at least 1"));
    }
    if !(temperature >= 0.0) || !temperature.is_finite() {
        return Err(Error::input(format!("invalid temperature {temperature}")));
    }
    if prompt.is_empty() {
        return Err(Error::input("prompt must be non-empty"));
    }
    let mut rng = rng::from_seed(seed);
    let mut context = prompt.ids().to_vec();
    let mut response = Vec::new();
    for _ in 0..max_len {
        let z = model.next_token_logits(&context)?;
        let next = if temperature == 0.0 {
            argmax(&z.values)
        } else {
            let probs = softmax(&z.values, temperature);
            let u: f64 = rng.random();
            draw(&probs, u)
        };
        if next == EOS {
            break;
        }
        response.push(next);
        context.push(next);
    }
    Ok(TokenSeq::response(response))
}

/// Greedy continuation of `prompt`. Same as `sample_sequence` at temperature 0.
pub fn greedy_rollout<M: LanguageModel + ?Sized>(model: &M, prompt: &TokenSeq, max_len: usize) -> Result<TokenSeq> {
    sample_sequence(model, prompt, 0.0, max_len, 0)
}

/// Inverse-CDF draw; falls back to the last index with positive mass when
/// rounding leaves `u` beyond the accumulated total.
fn draw(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::tinylm::{LmConfig, LmParams};

    fn model() -> LmParams {
        let cfg = LmConfig { vocab_size: 6, embed_dim: 4, hidden_dim: 8, context_window: 4 };
        let mut m = LmParams::init(cfg, 1.0, &mut rng::from_seed(5)).unwrap();
        m.b_out[EOS] = -1.0;
        m
    }

    fn prompt() -> TokenSeq {
        TokenSeq::prompt(vec![1, 2]).unwrap()
    }

    #[test]
    fn same_seed_same_sequence() {
        let m = model();
        let a = sample_sequence(&m, &prompt(), 1.0, 20, 9).unwrap();
        let b = sample_sequence(&m, &prompt(), 1.0, 20, 9).unwrap();
        assert_eq!(a, b);
        assert!(a.len() <= 20);
    }

    #[test]
    fn temperature_zero_is_greedy_rollout() {
        let m = model();
        let sampled = sample_sequence(&m, &prompt(), 0.0, 12, 123).unwrap();
        let mut ctx = prompt().ids().to_vec();
        let mut manual = Vec::new();
        for _ in 0..12 {
            let z = m.next_token_logits(&ctx).unwrap();
            let t = argmax(&z.values);
            if t == EOS {
                break;
            }
            manual.push(t);
            ctx.push(t);
        }
        assert_eq!(sampled.ids(), manual.as_slice());
    }

    #[test]
    fn certain_eos_gives_empty_response() {
        let mut m = LmParams::zeros(LmConfig { vocab_size: 4, embed_dim: 2, hidden_dim: 2, context_window: 2 });
        m.b_out[EOS] = 1e3;
        let r = sample_sequence(&m, &prompt(), 0.8, 10, 1).unwrap();
        assert!(r.is_empty());
    }

    #[test]
    fn rejects_bad_arguments() {
        let m = model();
        assert!(sample_sequence(&m, &prompt(), 1.0, 0, 1).is_err());
        assert!(sample_sequence(&m, &prompt(), -0.5, 5, 1).is_err());
    }

    #[test]
    fn draw_follows_cdf() {
        let p = [0.2, 0.0, 0.5, 0.3];
        assert_eq!(draw(&p, 0.0), 0);
        assert_eq!(draw(&p, 0.19), 0);
        assert_eq!(draw(&p, 0.2), 2);
        assert_eq!(draw(&p, 0.95), 3);
        assert_eq!(draw(&p, 1.0), 3);
    }
}
