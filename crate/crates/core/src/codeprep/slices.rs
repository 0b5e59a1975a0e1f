use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::lex::{lex, LexToken, TokenKind};
use super::{strip_comments, ApiList, PrepError};

/// Default line radius around an anchor.
pub const DEFAULT_CONTEXT: usize = 3;

/// The four syntax-based vulnerability candidate categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SliceKind {
    ApiCall,
    ArrayUsage,
    PointerUsage,
    ArithmeticExpression,
}

impl SliceKind {
    pub const ALL: [SliceKind; 4] = [
        SliceKind::ApiCall,
        SliceKind::ArrayUsage,
        SliceKind::PointerUsage,
        SliceKind::ArithmeticExpression,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SliceKind::ApiCall => "api_call",
            SliceKind::ArrayUsage => "array_usage",
            SliceKind::PointerUsage => "pointer_usage",
            SliceKind::ArithmeticExpression => "arithmetic_expression",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeSlice {
    pub kind: SliceKind,
    pub anchor_line: usize,
    pub text: String,
}

fn is_operand_end(tokens: &[LexToken], i: usize) -> bool {
    let t = &tokens[i];
    match t.kind {
        TokenKind::Identifier | TokenKind::Number | TokenKind::String | TokenKind::Char => true,
        TokenKind::Keyword => matches!(t.text.as_str(), "this" | "true" | "false" | "nullptr"),
        TokenKind::Punctuation => t.text == ")" || t.text == "]",
        // postfix increment/decrement closes an operand
        TokenKind::Operator => (t.text == "++" || t.text == "--") && i > 0 && is_operand_end(tokens, i - 1),
    }
}

/// `struct foo` and friends: the name is a type, so a following `*` declares.
fn is_tag_name(tokens: &[LexToken], i: usize) -> bool {
    i > 0
        && tokens[i].kind == TokenKind::Identifier
        && matches!(tokens[i - 1].text.as_str(), "struct" | "union" | "enum" | "class")
}

fn is_operand_start(t: &LexToken) -> bool {
    match t.kind {
        TokenKind::Identifier | TokenKind::Number | TokenKind::String | TokenKind::Char => true,
        TokenKind::Keyword => matches!(t.text.as_str(), "sizeof" | "this" | "true" | "false" | "nullptr"),
        TokenKind::Punctuation => t.text == "(",
        TokenKind::Operator => matches!(t.text.as_str(), "-" | "+" | "!" | "~" | "*" | "&" | "++" | "--"),
    }
}

/// Heuristic gadget extraction: one slice per anchor construct, holding the
/// anchor line plus `context` lines on either side.
///
/// Anchors are a known API name followed by `(`, an identifier followed by
/// `[`, `->` or a unary `*`, and a binary `+ - * / %` between operands. This
/// is a lexical approximation of dependence-graph slicing.
pub fn extract_slices(code: &str, api: &ApiList, context: usize) -> Result<Vec<CodeSlice>, PrepError> {
    let stripped = strip_comments(code)?;
    let tokens = lex(&stripped)?;
    let mut anchors: BTreeSet<(usize, SliceKind)> = BTreeSet::new();
    for (i, tok) in tokens.iter().enumerate() {
        let next = tokens.get(i + 1);
        let prev_is_operand = i > 0 && is_operand_end(&tokens, i - 1) && !is_tag_name(&tokens, i - 1);
        let kind = match (tok.kind, tok.text.as_str()) {
            (TokenKind::Identifier, name) if api.contains(name) && next.is_some_and(|n| n.text == "(") => {
                Some(SliceKind::ApiCall)
            }
            (TokenKind::Identifier, _) if next.is_some_and(|n| n.text == "[") => Some(SliceKind::ArrayUsage),
            (TokenKind::Operator, "->") => Some(SliceKind::PointerUsage),
            (TokenKind::Operator, "*") if !prev_is_operand => Some(SliceKind::PointerUsage),
            (TokenKind::Operator, "+" | "-" | "*" | "/" | "%")
                if prev_is_operand && next.is_some_and(is_operand_start) =>
            {
                Some(SliceKind::ArithmeticExpression)
            }
            _ => None,
        };
        if let Some(kind) = kind {
            anchors.insert((tok.line, kind));
        }
    }
    let lines: Vec<&str> = stripped.lines().collect();
    Ok(anchors
        .into_iter()
        .map(|(line, kind)| {
            let first = line.saturating_sub(context).max(1);
            let last = (line + context).min(lines.len());
            let text = lines[first - 1..last].join("\n");
            CodeSlice {
                kind,
                anchor_line: line,
                text,
            }
        })
        .collect())
}
