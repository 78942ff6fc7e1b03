use super::{LayerField, Model, TokenId};
use crate::error::{Error, Result};
use crate::tensor::{kernels, Scalar};

/// Per-layer attention keys and values of every token processed so far.
#[derive(Debug, Clone)]
pub struct KVCache<T> {
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    len: usize,
    d_model: usize,
}

impl<T: Scalar> KVCache<T> {
    pub fn new(model: &Model<T>) -> Self {
        let n = model.config.n_layers;
        Self {
            keys: vec![Vec::new(); n],
            values: vec![Vec::new(); n],
            len: 0,
            d_model: model.config.d_model,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Cached `[len x d_model]` keys of one layer.
    pub fn layer_keys(&self, layer: usize) -> &[T] {
        &self.keys[layer]
    }

    /// Every layer holds exactly `len` rows.
    pub fn is_consistent(&self) -> bool {
        self.keys
            .iter()
            .chain(&self.values)
            .all(|k| k.len() == self.len * self.d_model)
    }
}

/// Outputs for the newest position after an incremental step.
#[derive(Debug, Clone)]
pub struct StepOutput<T> {
    pub logits: Vec<T>,
    pub hidden: Vec<T>,
}

fn linear_rows<T: Scalar>(x: &[T], w: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut y = vec![T::zero(); m * n];
    kernels::matmul(x, w, m, k, n, &mut y);
    let mut out = vec![T::zero(); m * n];
    kernels::add_bias(&y, b, &mut out);
    out
}

impl<T: Scalar> Model<T> {
    /// Runs `tokens` through the decoder on top of `cache`, appending their
    /// keys and values. Returns logits and final hidden rows for the new
    /// tokens only. Uses the same kernels, in the same order, as the taped
    /// forward pass.
    pub fn extend(&self, cache: &mut KVCache<T>, tokens: &[TokenId]) -> Result<(Vec<T>, Vec<T>)> {
        let c = &self.config;
        let (d, f, m) = (c.d_model, c.d_ff, tokens.len());
        if cache.len + m > c.max_seq {
            return Err(Error::Length {
                len: cache.len + m,
                max: c.max_seq,
            });
        }
        if let Some(&id) = tokens.iter().find(|&&t| t as usize >= c.vocab_size) {
            return Err(Error::Vocab {
                id,
                vocab_size: c.vocab_size,
            });
        }
        let p = &self.params;
        let mut x = vec![T::zero(); m * d];
        for (i, &t) in tokens.iter().enumerate() {
            let tok = p.tok_emb().row(t as usize);
            let pos = p.pos_emb().row(cache.len + i);
            for ((o, &a), &b) in x[i * d..(i + 1) * d].iter_mut().zip(tok).zip(pos) {
                *o = a + b;
            }
        }
        let mut scratch = Vec::new();
        for l in 0..c.n_layers {
            let w = |fld| p.layer(l, fld).data();
            let mut h = vec![T::zero(); m * d];
            kernels::layer_norm(
                &x,
                w(LayerField::Ln1Gain),
                w(LayerField::Ln1Bias),
                &mut h,
                None,
                None,
            );
            let q = linear_rows(&h, w(LayerField::Wq), w(LayerField::Bq), m, d, d);
            let k = linear_rows(&h, w(LayerField::Wk), w(LayerField::Bk), m, d, d);
            let v = linear_rows(&h, w(LayerField::Wv), w(LayerField::Bv), m, d, d);
            let base = cache.len;
            cache.keys[l].extend_from_slice(&k);
            cache.values[l].extend_from_slice(&v);
            let mut a = vec![T::zero(); m * d];
            for i in 0..m {
                let n_keys = base + i + 1;
                kernels::attend_row(
                    &q[i * d..(i + 1) * d],
                    &cache.keys[l][..n_keys * d],
                    &cache.values[l][..n_keys * d],
                    n_keys,
                    c.n_heads,
                    &mut a[i * d..(i + 1) * d],
                    &mut scratch,
                    None,
                );
            }
            let o = linear_rows(&a, w(LayerField::Wo), w(LayerField::Bo), m, d, d);
            for (xv, &ov) in x.iter_mut().zip(&o) {
                *xv += ov;
            }
            kernels::layer_norm(
                &x,
                w(LayerField::Ln2Gain),
                w(LayerField::Ln2Bias),
                &mut h,
                None,
                None,
            );
            let mut u = linear_rows(&h, w(LayerField::WUp), w(LayerField::BUp), m, d, f);
            for uv in u.iter_mut() {
                *uv = kernels::gelu(*uv);
            }
            let mm = linear_rows(&u, w(LayerField::WDown), w(LayerField::BDown), m, f, d);
            for (xv, &mv) in x.iter_mut().zip(&mm) {
                *xv += mv;
            }
        }
        cache.len += m;
        let mut hidden = vec![T::zero(); m * d];
        kernels::layer_norm(
            &x,
            p.lnf_gain().data(),
            p.lnf_bias().data(),
            &mut hidden,
            None,
            None,
        );
        let et = kernels::transpose(p.tok_emb().data(), c.vocab_size, d);
        let mut logits = vec![T::zero(); m * c.vocab_size];
        kernels::matmul(&hidden, &et, m, d, c.vocab_size, &mut logits);
        Ok((logits, hidden))
    }

    /// One incremental decoding step.
    pub fn forward_step(&self, token: TokenId, cache: &mut KVCache<T>) -> Result<StepOutput<T>> {
        let (logits, hidden) = self.extend(cache, &[token])?;
        Ok(StepOutput { logits, hidden })
    }
}
