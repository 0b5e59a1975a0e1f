use alloc::string::String;

use super::PrepError;

#[derive(Clone, Copy, PartialEq)]
enum State {
    Code,
    Str,
    Chr,
    Line,
    Block { start_line: usize },
}

/// Removes `//` and `/* */` comments, leaving literals untouched.
///
/// A block comment becomes one space followed by the newlines it spanned,
/// so every surviving token keeps its line number.
pub fn strip_comments(code: &str) -> Result<String, PrepError> {
    let mut out = String::with_capacity(code.len());
    let mut state = State::Code;
    let mut line = 1;
    let mut chars = code.chars().peekable();
    // whether the current alphanumeric run began with a digit (a number, where
    // `'` is a C++14 digit separator rather than a char literal)
    let mut in_number = false;
    let mut prev_alnum = false;
    while let Some(c) = chars.next() {
        match state {
            State::Code => match c {
                '/' if chars.peek() == Some(&'/') => {
                    chars.next();
                    state = State::Line;
                }
                '/' if chars.peek() == Some(&'*') => {
                    chars.next();
                    state = State::Block { start_line: line };
                    out.push(' ');
                }
                '"' => {
                    out.push(c);
                    state = State::Str;
                }
                '\'' if !in_number => {
                    out.push(c);
                    state = State::Chr;
                }
                _ => out.push(c),
            },
            State::Str | State::Chr => {
                out.push(c);
                let close = if state == State::Str { '"' } else { '\'' };
                if c == '\\' {
                    if let Some(n) = chars.next() {
                        if n == '\n' {
                            line += 1;
                        }
                        out.push(n);
                    }
                } else if c == close || c == '\n' {
                    state = State::Code;
                }
            }
            State::Line => {
                if c == '\\' && chars.peek() == Some(&'\n') {
                    // spliced line: the comment continues on the next line
                    chars.next();
                    out.push('\n');
                    line += 1;
                } else if c == '\n' {
                    out.push('\n');
                    state = State::Code;
                }
            }
            State::Block { .. } => {
                if c == '*' && chars.peek() == Some(&'/') {
                    chars.next();
                    state = State::Code;
                } else if c == '\n' {
                    out.push('\n');
                }
            }
        }
        if c == '\n' {
            line += 1;
        }
        if state == State::Code {
            let alnum = c.is_ascii_alphanumeric() || c == '_' || (c == '\'' && in_number);
            if alnum && !prev_alnum {
                in_number = c.is_ascii_digit();
            } else if !alnum {
                in_number = c == '.' && in_number;
            }
            prev_alnum = alnum;
        } else {
            prev_alnum = false;
            in_number = false;
        }
    }
    if let State::Block { start_line } = state {
        return Err(PrepError::UnterminatedComment { line: start_line });
    }
    Ok(out)
}
