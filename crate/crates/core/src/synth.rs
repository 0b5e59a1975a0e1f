//! Generator for a toy corpus of short C functions.
//!
//! A function is labeled vulnerable exactly when it calls one of
//! [`UNBOUNDED_APIS`] outside an `if` block whose condition mentions
//! `sizeof`. Safe functions use bounded variants, guard the call, or make no
//! such call at all. Decoys (guards without `sizeof`, guards that close
//! before the call) keep the label from being readable off a single token.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codeprep::{Label, RawSample};

pub const UNBOUNDED_APIS: [&str; 5] = ["strcpy", "strcat", "memcpy", "sprintf", "gets"];

const FUNC_NAMES: [&str; 8] = [
    "copy_name",
    "handle",
    "parse_field",
    "load",
    "set_path",
    "read_line",
    "store",
    "fill",
];
const SRC_NAMES: [&str; 5] = ["src", "input", "data", "str", "name"];
const BUF_NAMES: [&str; 5] = ["buf", "dst", "tmp", "line", "out"];
const BUF_SIZES: [u32; 4] = [8, 16, 32, 64];

struct Names<'a> {
    buf: &'a str,
    src: &'a str,
}

fn unbounded_call(rng: &mut ChaCha8Rng, n: &Names<'_>) -> String {
    let (buf, src) = (n.buf, n.src);
    match rng.random_range(0..5) {
        0 => format!("strcpy({buf}, {src});"),
        1 => format!("strcat({buf}, {src});"),
        2 => format!("memcpy({buf}, {src}, len);"),
        3 => format!("sprintf({buf}, \"%s\", {src});"),
        _ => format!("gets({buf});"),
    }
}

fn bounded_call(rng: &mut ChaCha8Rng, n: &Names<'_>) -> String {
    let (buf, src) = (n.buf, n.src);
    match rng.random_range(0..3) {
        0 => format!("strncpy({buf}, {src}, sizeof({buf}) - 1);"),
        1 => format!("snprintf({buf}, sizeof({buf}), \"%s\", {src});"),
        _ => format!("fgets({buf}, sizeof({buf}), stdin);"),
    }
}

fn size_guard(rng: &mut ChaCha8Rng, n: &Names<'_>) -> String {
    let (buf, src) = (n.buf, n.src);
    match rng.random_range(0..2) {
        0 => format!("if (strlen({src}) < sizeof({buf}))"),
        _ => format!("if (len < sizeof({buf}))"),
    }
}

fn weak_guard(rng: &mut ChaCha8Rng, n: &Names<'_>) -> String {
    let src = n.src;
    match rng.random_range(0..2) {
        0 => format!("if ({src} != NULL)"),
        _ => String::from("if (len > 0)"),
    }
}

fn filler(rng: &mut ChaCha8Rng, n: &Names<'_>) -> String {
    let (buf, src) = (n.buf, n.src);
    match rng.random_range(0..5) {
        0 => format!("len = strlen({src});"),
        1 => format!("{buf}[0] = 0;"),
        2 => String::from("count = count + 1;"),
        3 => format!("printf(\"%s\", {buf});"),
        _ => String::from("len = len * 2;"),
    }
}

fn body(rng: &mut ChaCha8Rng, n: &Names<'_>, vulnerable: bool) -> Vec<String> {
    let mut lines = Vec::new();
    if vulnerable {
        match rng.random_range(0..4) {
            0 | 1 => lines.push(unbounded_call(rng, n)),
            2 => {
                let g = weak_guard(rng, n);
                lines.push(format!("{g} {{ {} }}", unbounded_call(rng, n)));
            }
            _ => {
                let g = size_guard(rng, n);
                lines.push(format!("{g} {{ {} }}", filler(rng, n)));
                lines.push(unbounded_call(rng, n));
            }
        }
    } else {
        match rng.random_range(0..4) {
            0 => lines.push(bounded_call(rng, n)),
            1 | 2 => {
                let g = size_guard(rng, n);
                lines.push(format!("{g} {{ {} }}", unbounded_call(rng, n)));
            }
            _ => {
                let g = weak_guard(rng, n);
                lines.push(format!("{g} {{ {} }}", bounded_call(rng, n)));
            }
        }
    }
    let extra = rng.random_range(0..2);
    for _ in 0..extra {
        let at = rng.random_range(0..=lines.len());
        let f = filler(rng, n);
        lines.insert(at, f);
    }
    lines
}

/// One function with the requested label.
pub fn function(rng: &mut ChaCha8Rng, vulnerable: bool) -> String {
    let names = Names {
        buf: BUF_NAMES.choose(rng).expect("non-empty"),
        src: SRC_NAMES.choose(rng).expect("non-empty"),
    };
    let func = FUNC_NAMES.choose(rng).expect("non-empty");
    let size = BUF_SIZES.choose(rng).expect("non-empty");
    let mut out = format!("void {func}(char *{}, int len) {{\n", names.src);
    out.push_str(&format!("    char {}[{size}];\n", names.buf));
    for line in body(rng, &names, vulnerable) {
        out.push_str("    ");
        out.push_str(&line);
        out.push('\n');
    }
    out.push_str("}\n");
    out
}

/// `n` labeled functions, alternating labels, ids `synth-00000`, ...
pub fn generate(n: usize, seed: u64) -> Vec<RawSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let label = if i % 2 == 0 { Label::Safe } else { Label::Vulnerable };
            RawSample {
                id: format!("synth-{i:05}"),
                code: function(&mut rng, label == Label::Vulnerable),
                label,
                origin: None,
            }
        })
        .collect()
}
