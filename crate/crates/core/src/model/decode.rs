use super::forward::{forward_hidden, logits, Packed};
use super::{KVCache, Model, TokenId};
use crate::error::{contract, Error, Result};
use crate::task::EMB;
use crate::tensor::{kernels, Scalar, Tape, Tensor};

#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    /// `[seq x vocab_size]`
    pub logits: Tensor<T>,
    /// `[seq x d_model]`, after the final layer norm.
    pub final_hidden: Tensor<T>,
}

/// Greedy continuation state: generated tokens plus the cache holding the
/// prefix and every generated token except the last one.
struct Continuation<T> {
    generated: Vec<TokenId>,
    cache: KVCache<T>,
}

impl<T: Scalar> Model<T> {
    /// Full causal forward pass over one sequence.
    pub fn forward_full(&self, tokens: &[TokenId]) -> Result<ForwardOutput<T>> {
        let mut tape = Tape::no_grad();
        let pv = self.params.bind(&mut tape, false);
        let hidden = forward_hidden(&mut tape, &pv, self, &Packed::single(tokens))?;
        let lg = logits(&mut tape, &pv, hidden)?;
        Ok(ForwardOutput {
            logits: tape.value(lg).clone(),
            final_hidden: tape.value(hidden).clone(),
        })
    }

    fn continue_greedy(
        &self,
        prefix: &[TokenId],
        stop: TokenId,
        max_new: usize,
    ) -> Result<Continuation<T>> {
        self.check_tokens(prefix)?;
        let mut cache = KVCache::new(self);
        let (lg, _) = self.extend(&mut cache, prefix)?;
        let v = self.config.vocab_size;
        let mut next = kernels::argmax(&lg[lg.len() - v..]) as TokenId;
        let mut generated = Vec::new();
        while generated.len() < max_new {
            generated.push(next);
            if next == stop || generated.len() == max_new {
                break;
            }
            next = kernels::argmax(&self.forward_step(next, &mut cache)?.logits) as TokenId;
        }
        if generated.last() != Some(&stop) {
            generated.push(stop);
        }
        Ok(Continuation { generated, cache })
    }

    /// Appends argmax tokens (ties to the lowest id) until `stop` appears or
    /// `max_new` tokens were produced; a missing `stop` is appended. The
    /// returned suffix always ends with `stop`.
    pub fn greedy_generate(
        &self,
        prefix: &[TokenId],
        stop: TokenId,
        max_new: usize,
    ) -> Result<Vec<TokenId>> {
        if prefix.len() + max_new > self.config.max_seq {
            return Err(Error::Length {
                len: prefix.len() + max_new,
                max: self.config.max_seq,
            });
        }
        Ok(self.continue_greedy(prefix, stop, max_new)?.generated)
    }

    /// Embedding with `<emb>` pre-filled: the final hidden state at the
    /// appended `<emb>` position.
    pub fn embed_direct(&self, x: &[TokenId]) -> Result<Tensor<T>> {
        Ok(self.embed_direct_many(&[x])?.remove(0))
    }

    /// [`Model::embed_direct`] for several sequences in one packed pass.
    pub fn embed_direct_many(&self, xs: &[&[TokenId]]) -> Result<Vec<Tensor<T>>> {
        let mut packed = Packed::new();
        let mut seq = Vec::new();
        for x in xs {
            if x.last() == Some(&EMB) {
                return Err(contract("input already ends with <emb>"));
            }
            seq.clear();
            seq.extend_from_slice(x);
            seq.push(EMB);
            packed.push(&seq);
        }
        let mut tape = Tape::no_grad();
        let pv = self.params.bind(&mut tape, false);
        let hidden = forward_hidden(&mut tape, &pv, self, &packed)?;
        let h = tape.value(hidden);
        packed
            .segments
            .iter()
            .map(|s| Tensor::new(vec![self.config.d_model], h.row(s.last()).to_vec()))
            .collect()
    }

    /// Reasoning-mode embedding: greedily writes a rationale until the model
    /// emits `<emb>` (forced after `max_new` tokens), then takes one more
    /// cached step on that `<emb>` and returns its final hidden state along
    /// with the rationale (without the `<emb>`).
    pub fn embed_with_reasoning(
        &self,
        q: &[TokenId],
        max_new: usize,
    ) -> Result<(Tensor<T>, Vec<TokenId>)> {
        if q.len() + max_new + 1 > self.config.max_seq {
            return Err(Error::Length {
                len: q.len() + max_new + 1,
                max: self.config.max_seq,
            });
        }
        let Continuation {
            mut generated,
            mut cache,
        } = self.continue_greedy(q, EMB, max_new)?;
        let emb = generated.pop().expect("generation ends with <emb>");
        debug_assert_eq!(emb, EMB);
        // the cache holds q and every generated token except the trailing <emb>
        for &t in generated[cache.len() - q.len()..].iter() {
            self.forward_step(t, &mut cache)?;
        }
        let step = self.forward_step(EMB, &mut cache)?;
        let embedding = Tensor::new(vec![self.config.d_model], step.hidden)?;
        Ok((embedding, generated))
    }
}
