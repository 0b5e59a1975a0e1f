use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;

use super::lex::{lex_with, Language, TokenKind};
use super::{ApiList, PrepError};

/// Normalizes comment-free C/C++ source; see [`normalize_with`].
pub fn normalize(code: &str, rename_identifiers: bool, api: &ApiList) -> Result<String, PrepError> {
    normalize_with(code, rename_identifiers, api, Language::C)
}

/// Drops preprocessor directives, collapses every whitespace run (newlines
/// included) to one space and, when `rename_identifiers` is set, maps
/// user-defined names to `FUNC<n>` (when followed by `(`) or `VAR<n>`, in
/// first-appearance order. Known API and builtin names are kept. One map
/// covers the whole input; scopes are not distinguished.
pub fn normalize_with(
    code: &str,
    rename_identifiers: bool,
    api: &ApiList,
    language: Language,
) -> Result<String, PrepError> {
    let code = drop_directives(code);
    let tokens = lex_with(&code, language)?;
    let mut out = String::with_capacity(code.len());
    let mut renames: BTreeMap<&str, String> = BTreeMap::new();
    let (mut vars, mut funcs) = (0usize, 0usize);
    let mut prev_end = None;
    for (i, tok) in tokens.iter().enumerate() {
        if let Some(end) = prev_end {
            if end < tok.offset {
                out.push(' ');
            }
        }
        prev_end = Some(tok.offset + tok.text.len());
        if rename_identifiers && tok.kind == TokenKind::Identifier && !api.is_known(&tok.text) {
            let name = renames.entry(tok.text.as_str()).or_insert_with(|| {
                let is_call = tokens.get(i + 1).is_some_and(|n| n.text == "(");
                if is_call {
                    funcs += 1;
                    format!("FUNC{funcs}")
                } else {
                    vars += 1;
                    format!("VAR{vars}")
                }
            });
            out.push_str(name);
        } else {
            out.push_str(&tok.text);
        }
    }
    Ok(out)
}

/// Blanks `#` directive lines (and their `\` continuations), keeping newlines.
fn drop_directives(code: &str) -> String {
    let mut out = String::with_capacity(code.len());
    let mut continuing = false;
    for line in code.split_inclusive('\n') {
        let body = line.trim_end_matches(['\n', '\r']);
        let directive = continuing || body.trim_start().starts_with('#');
        if directive {
            continuing = body.ends_with('\\');
            if line.ends_with('\n') {
                out.push('\n');
            }
        } else {
            out.push_str(line);
        }
    }
    out
}
