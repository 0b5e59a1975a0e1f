use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::PrepError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenKind {
    Identifier,
    Keyword,
    Number,
    String,
    Char,
    Operator,
    Punctuation,
}

impl TokenKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TokenKind::Identifier => "identifier",
            TokenKind::Keyword => "keyword",
            TokenKind::Number => "number",
            TokenKind::String => "string",
            TokenKind::Char => "char",
            TokenKind::Operator => "operator",
            TokenKind::Punctuation => "punctuation",
        }
    }
}

/// Lexical conventions: C and C++ share one table, Java swaps the keyword
/// table and adds `>>>`/`>>>=` and `@`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Language {
    #[default]
    C,
    Java,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LexToken {
    pub kind: TokenKind,
    pub text: String,
    /// 1-based source line.
    pub line: usize,
    /// Byte offset of the first character.
    pub offset: usize,
}

const C_KEYWORDS: &[&str] = &[
    "_Alignas",
    "_Alignof",
    "_Atomic",
    "_Bool",
    "_Complex",
    "_Generic",
    "_Imaginary",
    "_Noreturn",
    "_Static_assert",
    "_Thread_local",
    "alignas",
    "alignof",
    "asm",
    "auto",
    "bool",
    "break",
    "case",
    "catch",
    "char",
    "char16_t",
    "char32_t",
    "char8_t",
    "class",
    "const",
    "const_cast",
    "consteval",
    "constexpr",
    "constinit",
    "continue",
    "decltype",
    "default",
    "delete",
    "do",
    "double",
    "dynamic_cast",
    "else",
    "enum",
    "explicit",
    "export",
    "extern",
    "false",
    "float",
    "for",
    "friend",
    "goto",
    "if",
    "inline",
    "int",
    "long",
    "mutable",
    "namespace",
    "new",
    "noexcept",
    "nullptr",
    "operator",
    "private",
    "protected",
    "public",
    "register",
    "reinterpret_cast",
    "restrict",
    "return",
    "short",
    "signed",
    "sizeof",
    "static",
    "static_assert",
    "static_cast",
    "struct",
    "switch",
    "template",
    "this",
    "thread_local",
    "throw",
    "true",
    "try",
    "typedef",
    "typeid",
    "typename",
    "union",
    "unsigned",
    "using",
    "virtual",
    "void",
    "volatile",
    "while",
];

const JAVA_KEYWORDS: &[&str] = &[
    "abstract",
    "assert",
    "boolean",
    "break",
    "byte",
    "case",
    "catch",
    "char",
    "class",
    "const",
    "continue",
    "default",
    "do",
    "double",
    "else",
    "enum",
    "extends",
    "false",
    "final",
    "finally",
    "float",
    "for",
    "goto",
    "if",
    "implements",
    "import",
    "instanceof",
    "int",
    "interface",
    "long",
    "native",
    "new",
    "null",
    "package",
    "private",
    "protected",
    "public",
    "record",
    "return",
    "short",
    "static",
    "strictfp",
    "super",
    "switch",
    "synchronized",
    "this",
    "throw",
    "throws",
    "transient",
    "true",
    "try",
    "var",
    "void",
    "volatile",
    "while",
    "yield",
];

// longest first within each length class
const OPERATORS_4: &[&str] = &[">>>="];
const OPERATORS_3: &[&str] = &["<<=", ">>=", "...", "->*", "<=>", ">>>"];
const OPERATORS_2: &[&str] = &[
    "->", "++", "--", "<<", ">>", "<=", ">=", "==", "!=", "&&", "||", "+=", "-=", "*=", "/=", "%=", "&=", "|=", "^=",
    "::", ".*",
];
const OPERATOR_CHARS: &[u8] = b"+-*/%=<>!&|^~?:.";
const PUNCT_CHARS: &[u8] = b";,()[]{}";

impl Language {
    pub fn is_keyword(self, word: &str) -> bool {
        let table = match self {
            Language::C => C_KEYWORDS,
            Language::Java => JAVA_KEYWORDS,
        };
        table.binary_search(&word).is_ok()
    }

    fn allows_operator(self, op: &str) -> bool {
        match op {
            ">>>" | ">>>=" => self == Language::Java,
            "->*" | "<=>" | ".*" => self == Language::C,
            _ => true,
        }
    }
}

/// Lexes comment-free C/C++ source.
pub fn lex(code: &str) -> Result<Vec<LexToken>, PrepError> {
    lex_with(code, Language::C)
}

const STRING_PREFIXES: &[&str] = &["L", "u", "U", "u8", "R", "LR", "uR", "UR", "u8R"];

pub fn lex_with(code: &str, language: Language) -> Result<Vec<LexToken>, PrepError> {
    let bytes = code.as_bytes();
    let mut tokens = Vec::new();
    let mut i = 0;
    let mut line = 1;
    while i < bytes.len() {
        let b = bytes[i];
        let start = i;
        let start_line = line;
        let push = |tokens: &mut Vec<LexToken>, kind, end: usize| {
            tokens.push(LexToken {
                kind,
                text: code[start..end].to_string(),
                line: start_line,
                offset: start,
            })
        };
        match b {
            b'\n' => {
                line += 1;
                i += 1;
            }
            b' ' | b'\t' | b'\r' | 0x0b | 0x0c => i += 1,
            b'\\' if bytes.get(i + 1) == Some(&b'\n') => {
                line += 1;
                i += 2;
            }
            b'\\' if bytes.get(i + 1) == Some(&b'\r') && bytes.get(i + 2) == Some(&b'\n') => {
                line += 1;
                i += 3;
            }
            b'a'..=b'z' | b'A'..=b'Z' | b'_' => {
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                    i += 1;
                }
                let word = &code[start..i];
                let quote = bytes.get(i).copied();
                if language == Language::C
                    && matches!(quote, Some(b'"') | Some(b'\''))
                    && STRING_PREFIXES.contains(&word)
                {
                    let raw = word.ends_with('R');
                    if quote == Some(b'"') && raw {
                        i = raw_string_end(code, i, start_line)?;
                        line += code[start..i].matches('\n').count();
                        push(&mut tokens, TokenKind::String, i);
                    } else if !raw {
                        let q = quote.unwrap();
                        i = quoted_end(bytes, i, q, start_line)?;
                        let kind = if q == b'"' { TokenKind::String } else { TokenKind::Char };
                        push(&mut tokens, kind, i);
                    } else {
                        push(&mut tokens, TokenKind::Identifier, i);
                    }
                } else {
                    let kind = if language.is_keyword(word) {
                        TokenKind::Keyword
                    } else {
                        TokenKind::Identifier
                    };
                    push(&mut tokens, kind, i);
                }
            }
            b'0'..=b'9' => {
                i = number_end(bytes, i);
                push(&mut tokens, TokenKind::Number, i);
            }
            b'.' if bytes.get(i + 1).is_some_and(|c| c.is_ascii_digit()) => {
                i = number_end(bytes, i);
                push(&mut tokens, TokenKind::Number, i);
            }
            b'"' => {
                i = quoted_end(bytes, i, b'"', start_line)?;
                push(&mut tokens, TokenKind::String, i);
            }
            b'\'' => {
                i = quoted_end(bytes, i, b'\'', start_line)?;
                push(&mut tokens, TokenKind::Char, i);
            }
            b'#' => {
                i += if bytes.get(i + 1) == Some(&b'#') { 2 } else { 1 };
                push(&mut tokens, TokenKind::Punctuation, i);
            }
            b'@' if language == Language::Java => {
                i += 1;
                push(&mut tokens, TokenKind::Punctuation, i);
            }
            _ if PUNCT_CHARS.contains(&b) => {
                i += 1;
                push(&mut tokens, TokenKind::Punctuation, i);
            }
            _ if OPERATOR_CHARS.contains(&b) => {
                let rest = &code[i..];
                let len = [OPERATORS_4, OPERATORS_3, OPERATORS_2]
                    .iter()
                    .flat_map(|table| table.iter())
                    .find(|op| rest.starts_with(**op) && language.allows_operator(op))
                    .map_or(1, |op| op.len());
                i += len;
                push(&mut tokens, TokenKind::Operator, i);
            }
            _ => {
                let ch = code[i..].chars().next().unwrap_or('\u{fffd}');
                return Err(PrepError::Unlexable { offset: i, ch });
            }
        }
    }
    Ok(tokens)
}

/// Preprocessing-number rule: digits, letters, `_`, `.`, exponent signs and
/// digit separators.
fn number_end(bytes: &[u8], mut i: usize) -> usize {
    i += 1;
    while i < bytes.len() {
        let c = bytes[i];
        let prev = bytes[i - 1];
        let part = c.is_ascii_alphanumeric()
            || c == b'_'
            || c == b'.'
            || ((c == b'+' || c == b'-') && matches!(prev, b'e' | b'E' | b'p' | b'P'))
            || (c == b'\'' && bytes.get(i + 1).is_some_and(|n| n.is_ascii_alphanumeric()));
        if !part {
            break;
        }
        i += 1;
    }
    i
}

/// End (exclusive) of a quoted literal starting at `i` (the opening quote).
fn quoted_end(bytes: &[u8], mut i: usize, quote: u8, line: usize) -> Result<usize, PrepError> {
    let what = if quote == b'"' { "string" } else { "char" };
    i += 1;
    while i < bytes.len() {
        match bytes[i] {
            b'\\' => i += 2,
            b'\n' => break,
            c if c == quote => return Ok(i + 1),
            _ => i += 1,
        }
    }
    Err(PrepError::UnterminatedLiteral { what, line })
}

/// End of a raw string `R"delim( ... )delim"` whose opening quote is at `i`.
fn raw_string_end(code: &str, i: usize, line: usize) -> Result<usize, PrepError> {
    let err = PrepError::UnterminatedLiteral {
        what: "raw string",
        line,
    };
    let after = &code[i + 1..];
    let open = after.find('(').ok_or(err.clone())?;
    let delim = &after[..open];
    let closing = alloc::format!("){delim}\"");
    let body_start = i + 1 + open + 1;
    let close = code[body_start..].find(closing.as_str()).ok_or(err)?;
    Ok(body_start + close + closing.len())
}
