use alloc::vec;
use alloc::vec::Vec;

use super::{maybe_dropout, spec, BatchInput, DropoutRng, Init, LstmConfig, ModelError, ParamSpec, INIT_STD};
use crate::tensor::{Tape, Var};

const EMBED: usize = 0;
const W_INPUT: usize = 1;
const W_HIDDEN: usize = 2;
const BIAS: usize = 3;
const HEAD_W: usize = 4;
const HEAD_B: usize = 5;

/// Gate blocks are laid out as `[input | forget | cell | output]` columns.
pub(super) fn layout(c: &LstmConfig) -> Vec<ParamSpec> {
    let h = c.d_hidden;
    let recurrent = Init::Normal(1.0 / libm::sqrt(h as f64));
    vec![
        spec("embed.tokens", &[c.vocab_size, c.d_embed], Init::Normal(INIT_STD)),
        spec("lstm.input.weight", &[c.d_embed, 4 * h], recurrent),
        spec("lstm.hidden.weight", &[h, 4 * h], recurrent),
        spec("lstm.bias", &[4 * h], Init::Zeros),
        spec("head.weight", &[h, c.n_classes], Init::Normal(INIT_STD)),
        spec("head.bias", &[c.n_classes], Init::Zeros),
    ]
}

pub(super) fn forward(
    c: &LstmConfig,
    tape: &mut Tape,
    p: &[Var],
    input: &BatchInput,
    mut dropout: DropoutRng<'_>,
    trace: Option<&mut Vec<Var>>,
) -> Result<Var, ModelError> {
    let (n, seq, hd) = (input.batch, input.seq, c.d_hidden);
    let emb = tape.gather_rows(p[EMBED], &input.ids)?;
    let emb = maybe_dropout(tape, emb, c.dropout_rate, &mut dropout)?;
    // input contributions for every position at once
    let xw = tape.matmul(emb, p[W_INPUT])?;
    let mut h = tape.constant_from(vec![n, hd], vec![0.0; n * hd])?;
    let mut cell = tape.constant_from(vec![n, hd], vec![0.0; n * hd])?;
    for t in 0..seq {
        let rows: Vec<usize> = (0..n).map(|b| b * seq + t).collect();
        let xt = tape.gather_rows(xw, &rows)?;
        let hw = tape.matmul(h, p[W_HIDDEN])?;
        let z = tape.add(xt, hw)?;
        let z = tape.add_row(z, p[BIAS])?;
        let zi = tape.slice_cols(z, 0, hd)?;
        let zf = tape.slice_cols(z, hd, 2 * hd)?;
        let zg = tape.slice_cols(z, 2 * hd, 3 * hd)?;
        let zo = tape.slice_cols(z, 3 * hd, 4 * hd)?;
        let i = tape.sigmoid(zi)?;
        let f = tape.sigmoid(zf)?;
        let g = tape.tanh(zg)?;
        let o = tape.sigmoid(zo)?;
        let keep = tape.mul(f, cell)?;
        let write = tape.mul(i, g)?;
        let c_new = tape.add(keep, write)?;
        let c_act = tape.tanh(c_new)?;
        let h_new = tape.mul(o, c_act)?;
        let live: Vec<bool> = input.valid.iter().map(|&len| t < len).collect();
        if live.iter().all(|&b| b) {
            h = h_new;
            cell = c_new;
        } else {
            h = tape.blend_rows(&live, h_new, h)?;
            cell = tape.blend_rows(&live, c_new, cell)?;
        }
    }
    if let Some(tr) = trace {
        tr.push(h);
    }
    let y = tape.matmul(h, p[HEAD_W])?;
    Ok(tape.add_row(y, p[HEAD_B])?)
}
