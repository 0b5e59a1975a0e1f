use alloc::format;
use alloc::vec::Vec;

use super::{maybe_dropout, spec, BatchInput, DropoutRng, Init, ModelError, ParamSpec, TransformerConfig, INIT_STD};
use crate::tensor::{Tape, Var};

const EMBED: usize = 0;
const POSITION: usize = 1;
const PER_LAYER: usize = 12;

// offsets inside one block
const LN1_G: usize = 0;
const LN1_B: usize = 1;
const QKV_W: usize = 2;
const QKV_B: usize = 3;
const PROJ_W: usize = 4;
const PROJ_B: usize = 5;
const LN2_G: usize = 6;
const LN2_B: usize = 7;
const FF1_W: usize = 8;
const FF1_B: usize = 9;
const FF2_W: usize = 10;
const FF2_B: usize = 11;

pub(super) fn layout(c: &TransformerConfig) -> Vec<ParamSpec> {
    let d = c.d_model;
    let w = Init::Normal(INIT_STD);
    let mut out = Vec::with_capacity(2 + PER_LAYER * c.n_layers + 4);
    out.push(spec("embed.tokens", &[c.vocab_size, d], w));
    out.push(spec("embed.positions", &[c.max_len, d], w));
    for l in 0..c.n_layers {
        let p = |s: &str| format!("block{l}.{s}");
        out.push(spec(p("ln1.gain"), &[d], Init::Ones));
        out.push(spec(p("ln1.bias"), &[d], Init::Zeros));
        out.push(spec(p("attn.qkv.weight"), &[d, 3 * d], w));
        out.push(spec(p("attn.qkv.bias"), &[3 * d], Init::Zeros));
        out.push(spec(p("attn.proj.weight"), &[d, d], w));
        out.push(spec(p("attn.proj.bias"), &[d], Init::Zeros));
        out.push(spec(p("ln2.gain"), &[d], Init::Ones));
        out.push(spec(p("ln2.bias"), &[d], Init::Zeros));
        out.push(spec(p("ff.in.weight"), &[d, c.d_ff], w));
        out.push(spec(p("ff.in.bias"), &[c.d_ff], Init::Zeros));
        out.push(spec(p("ff.out.weight"), &[c.d_ff, d], w));
        out.push(spec(p("ff.out.bias"), &[d], Init::Zeros));
    }
    out.push(spec("final_ln.gain", &[d], Init::Ones));
    out.push(spec("final_ln.bias", &[d], Init::Zeros));
    out.push(spec("head.weight", &[d, c.n_classes], w));
    out.push(spec("head.bias", &[c.n_classes], Init::Zeros));
    out
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var, ModelError> {
    let y = tape.matmul(x, w)?;
    Ok(tape.add_row(y, b)?)
}

pub(super) fn forward(
    c: &TransformerConfig,
    tape: &mut Tape,
    p: &[Var],
    input: &BatchInput,
    mut dropout: DropoutRng<'_>,
    mut trace: Option<&mut Vec<Var>>,
) -> Result<Var, ModelError> {
    let d = c.d_model;
    let rate = c.dropout_rate;
    let positions: Vec<usize> = (0..input.batch).flat_map(|_| 0..input.seq).collect();
    let tok = tape.gather_rows(p[EMBED], &input.ids)?;
    let pos = tape.gather_rows(p[POSITION], &positions)?;
    let mut x = tape.add(tok, pos)?;
    x = maybe_dropout(tape, x, rate, &mut dropout)?;

    for l in 0..c.n_layers {
        let b = |k: usize| p[2 + l * PER_LAYER + k];
        let h = tape.layer_norm(x, b(LN1_G), b(LN1_B))?;
        let qkv = linear(tape, h, b(QKV_W), b(QKV_B))?;
        let q = tape.slice_cols(qkv, 0, d)?;
        let k = tape.slice_cols(qkv, d, 2 * d)?;
        let v = tape.slice_cols(qkv, 2 * d, 3 * d)?;
        let att = tape.causal_attention(q, k, v, input.seq, c.n_heads, &input.valid)?;
        if let Some(t) = trace.as_deref_mut() {
            t.push(att);
        }
        let att = linear(tape, att, b(PROJ_W), b(PROJ_B))?;
        let att = maybe_dropout(tape, att, rate, &mut dropout)?;
        x = tape.add(x, att)?;

        let h = tape.layer_norm(x, b(LN2_G), b(LN2_B))?;
        let f = linear(tape, h, b(FF1_W), b(FF1_B))?;
        let f = tape.gelu(f)?;
        let f = linear(tape, f, b(FF2_W), b(FF2_B))?;
        let f = maybe_dropout(tape, f, rate, &mut dropout)?;
        x = tape.add(x, f)?;
    }

    let last: Vec<usize> = input
        .valid
        .iter()
        .enumerate()
        .map(|(i, &len)| i * input.seq + len - 1)
        .collect();
    let top = 2 + c.n_layers * PER_LAYER;
    let x = tape.gather_rows(x, &last)?;
    let x = tape.layer_norm(x, p[top], p[top + 1])?;
    linear(tape, x, p[top + 2], p[top + 3])
}
