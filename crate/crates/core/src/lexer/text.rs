const TEXT_OPERATORS: &[&str] = &["<=", ">=", "!=", "==", "->", "<<", ">>", "&&", "||", "..."];

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

/// Splits a preprocessed statement into words. Whitespace separates words;
/// punctuation is detached into its own tokens, keeping two-character
/// comparison operators and decimal numbers whole.
pub fn tokenize_text(statement: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in statement.split_whitespace() {
        let chars: Vec<char> = chunk.chars().collect();
        let mut i = 0;
        while i < chars.len() {
            let c = chars[i];
            if is_word_char(c) {
                let start = i;
                while i < chars.len() {
                    // a '.' between digits stays inside the number
                    let decimal_point = chars[i] == '.'
                        && chars[i - 1].is_ascii_digit()
                        && chars.get(i + 1).is_some_and(|d| d.is_ascii_digit());
                    if !(is_word_char(chars[i]) || decimal_point) {
                        break;
                    }
                    i += 1;
                }
                out.push(chars[start..i].iter().collect());
                continue;
            }
            let op = TEXT_OPERATORS.iter().find(|op| {
                op.chars().enumerate().all(|(k, oc)| chars.get(i + k) == Some(&oc))
            });
            match op {
                Some(op) => {
                    out.push(op.to_string());
                    i += op.len();
                }
                None => {
                    out.push(c.to_string());
                    i += 1;
                }
            }
        }
    }
    out
}
