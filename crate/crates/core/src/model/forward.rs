use super::{LayerField, Model, TokenId, PER_LAYER};
use crate::error::Result;
use crate::tensor::{Scalar, Segment, Tape, Var};

/// Parameter handles on a tape, in [`super::Params`] storage order.
#[derive(Debug, Clone)]
pub struct ParamVars {
    vars: Vec<Var>,
    n_layers: usize,
}

impl ParamVars {
    pub fn new(vars: Vec<Var>, n_layers: usize) -> Self {
        Self { vars, n_layers }
    }

    pub fn all(&self) -> &[Var] {
        &self.vars
    }

    pub fn tok_emb(&self) -> Var {
        self.vars[0]
    }

    pub fn pos_emb(&self) -> Var {
        self.vars[1]
    }

    pub fn layer(&self, l: usize, f: LayerField) -> Var {
        self.vars[2 + l * PER_LAYER + f as usize]
    }

    pub fn lnf(&self) -> (Var, Var) {
        let base = 2 + self.n_layers * PER_LAYER;
        (self.vars[base], self.vars[base + 1])
    }
}

/// Several token sequences concatenated row-wise, each remembered as a
/// [`Segment`] so attention stays within its own sequence.
#[derive(Debug, Clone, Default)]
pub struct Packed {
    pub tokens: Vec<TokenId>,
    pub positions: Vec<usize>,
    pub segments: Vec<Segment>,
}

impl Packed {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn single(seq: &[TokenId]) -> Self {
        let mut p = Self::new();
        p.push(seq);
        p
    }

    pub fn push(&mut self, seq: &[TokenId]) -> Segment {
        let seg = Segment {
            start: self.tokens.len(),
            len: seq.len(),
        };
        self.tokens.extend_from_slice(seq);
        self.positions.extend(0..seq.len());
        self.segments.push(seg);
        seg
    }

    pub fn rows(&self) -> usize {
        self.tokens.len()
    }
}

fn linear<T: Scalar>(tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_bias(y, b)
}

/// Final-layer (post layer-norm) hidden states for every row of `packed`.
pub fn forward_hidden<T: Scalar>(
    tape: &mut Tape<T>,
    pv: &ParamVars,
    model: &Model<T>,
    packed: &Packed,
) -> Result<Var> {
    for seg in &packed.segments {
        model.check_tokens(&packed.tokens[seg.start..seg.end()])?;
    }
    let ids: Vec<usize> = packed.tokens.iter().map(|&t| t as usize).collect();
    let tok = tape.gather_rows(pv.tok_emb(), &ids)?;
    let pos = tape.gather_rows(pv.pos_emb(), &packed.positions)?;
    let mut x = tape.add(tok, pos)?;
    let heads = model.config.n_heads;
    for l in 0..model.config.n_layers {
        let p = |f| pv.layer(l, f);
        let h = tape.layer_norm(x, p(LayerField::Ln1Gain), p(LayerField::Ln1Bias))?;
        let q = linear(tape, h, p(LayerField::Wq), p(LayerField::Bq))?;
        let k = linear(tape, h, p(LayerField::Wk), p(LayerField::Bk))?;
        let v = linear(tape, h, p(LayerField::Wv), p(LayerField::Bv))?;
        let a = tape.causal_attention(q, k, v, heads, &packed.segments)?;
        let o = linear(tape, a, p(LayerField::Wo), p(LayerField::Bo))?;
        x = tape.add(x, o)?;
        let h = tape.layer_norm(x, p(LayerField::Ln2Gain), p(LayerField::Ln2Bias))?;
        let u = linear(tape, h, p(LayerField::WUp), p(LayerField::BUp))?;
        let u = tape.gelu(u);
        let m = linear(tape, u, p(LayerField::WDown), p(LayerField::BDown))?;
        x = tape.add(x, m)?;
    }
    let (g, b) = pv.lnf();
    tape.layer_norm(x, g, b)
}

/// Next-token logits through the tied output projection.
pub fn logits<T: Scalar>(tape: &mut Tape<T>, pv: &ParamVars, hidden: Var) -> Result<Var> {
    let et = tape.transpose(pv.tok_emb())?;
    tape.matmul(hidden, et)
}
