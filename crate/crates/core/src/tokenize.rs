//! Identifier tokenization: case/underscore/digit splitting, stop-word
//! removal and a small rule-based lemmatizer.

/// Common English function words dropped from identifier tokens.
pub const STOP_WORDS: &[&str] = &[
    "a", "about", "after", "all", "also", "an", "and", "any", "are", "as", "at", "be", "because",
    "been", "but", "by", "can", "could", "do", "does", "for", "from", "had", "has", "have", "he",
    "her", "his", "how", "i", "if", "in", "into", "it", "its", "me", "my", "of", "on", "or",
    "our", "she", "so", "than", "that", "the", "their", "them", "then", "there", "these", "they",
    "this", "those", "to", "was", "we", "were", "what", "when", "which", "who", "will", "with",
    "would", "you", "your",
];

const MIN_STEM: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenizerOptions {
    pub remove_stop_words: bool,
    pub lemmatize: bool,
}

impl Default for TokenizerOptions {
    fn default() -> Self {
        Self {
            remove_stop_words: true,
            lemmatize: true,
        }
    }
}

/// Tokenizes an identifier with the default options.
pub fn tokenize_identifier(raw: &str) -> Vec<String> {
    tokenize_identifier_with(raw, TokenizerOptions::default())
}

pub fn tokenize_identifier_with(raw: &str, opts: TokenizerOptions) -> Vec<String> {
    split_identifier(raw)
        .into_iter()
        .filter(|t| !(opts.remove_stop_words && is_stop_word(t)))
        .map(|t| if opts.lemmatize { lemmatize(&t) } else { t })
        .collect()
}

pub fn is_stop_word(token: &str) -> bool {
    STOP_WORDS.binary_search(&token).is_ok()
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum CharClass {
    Lower,
    Upper,
    Digit,
    Other,
}

fn class_of(c: char) -> CharClass {
    if c.is_lowercase() {
        CharClass::Lower
    } else if c.is_uppercase() {
        CharClass::Upper
    } else if c.is_numeric() {
        CharClass::Digit
    } else if c.is_alphabetic() {
        // Scripts without case behave like lowercase letters.
        CharClass::Lower
    } else {
        CharClass::Other
    }
}

/// Splits on underscores and other non-alphanumerics, lower→upper
/// transitions, acronym ends (`HTTPServer` → `http`, `server`) and
/// letter/digit boundaries. Output is lowercase.
fn split_identifier(raw: &str) -> Vec<String> {
    let chars: Vec<char> = raw.chars().collect();
    let mut out = Vec::new();
    let mut current = String::new();
    for (i, &c) in chars.iter().enumerate() {
        let class = class_of(c);
        if class == CharClass::Other {
            flush(&mut current, &mut out);
            continue;
        }
        if let Some(&prev) = current.chars().last().as_ref() {
            let prev_class = class_of(prev);
            let boundary = match (prev_class, class) {
                (CharClass::Lower, CharClass::Upper) => true,
                (CharClass::Digit, CharClass::Lower | CharClass::Upper) => true,
                (CharClass::Lower | CharClass::Upper, CharClass::Digit) => true,
                (CharClass::Upper, CharClass::Upper) => chars
                    .get(i + 1)
                    .is_some_and(|&next| class_of(next) == CharClass::Lower),
                _ => false,
            };
            if boundary {
                flush(&mut current, &mut out);
            }
        }
        current.push(c);
    }
    flush(&mut current, &mut out);
    out
}

fn flush(current: &mut String, out: &mut Vec<String>) {
    if !current.is_empty() {
        out.push(current.to_lowercase());
        current.clear();
    }
}

/// Suffix-stripping lemmatizer. Every rule leaves a stem of at least
/// three characters or does nothing.
pub fn lemmatize(token: &str) -> String {
    if !token.is_ascii() || token.bytes().any(|b| b.is_ascii_digit()) {
        return token.to_string();
    }
    let strip = |suffix: &str| -> Option<&str> {
        token
            .strip_suffix(suffix)
            .filter(|stem| stem.len() >= MIN_STEM)
    };
    if let Some(stem) = strip("ies") {
        return format!("{stem}y");
    }
    if let Some(stem) = strip("ing") {
        return stem.to_string();
    }
    if let Some(stem) = strip("ed") {
        return stem.to_string();
    }
    if let Some(stem) = strip("es") {
        if ["s", "x", "z", "ch", "sh"].iter().any(|s| stem.ends_with(s)) {
            return stem.to_string();
        }
    }
    if !["ss", "us", "is"].iter().any(|s| token.ends_with(s)) {
        if let Some(stem) = strip("s") {
            return stem.to_string();
        }
    }
    token.to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stop_words_sorted_for_binary_search() {
        assert!(STOP_WORDS.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn snake_case() {
        assert_eq!(tokenize_identifier("get_current_date"), ["get", "current", "date"]);
    }

    #[test]
    fn camel_case() {
        assert_eq!(tokenize_identifier("rowCount"), ["row", "count"]);
        assert_eq!(tokenize_identifier("SqlVisitor"), ["sql", "visitor"]);
    }

    #[test]
    fn acronyms_and_digits() {
        assert_eq!(tokenize_identifier("HTTPServer"), ["http", "server"]);
        assert_eq!(tokenize_identifier("utf8_decode"), ["utf", "8", "decode"]);
        assert_eq!(tokenize_identifier("__init__"), ["init"]);
    }

    #[test]
    fn stop_words_removed_and_may_empty() {
        assert_eq!(tokenize_identifier("path_to_file"), ["path", "file"]);
        assert!(tokenize_identifier("the").is_empty());
        assert!(tokenize_identifier("_").is_empty());
    }

    #[test]
    fn lemmatizer_rules() {
        assert_eq!(lemmatize("counts"), "count");
        assert_eq!(lemmatize("boxes"), "box");
        assert_eq!(lemmatize("entries"), "entry");
        assert_eq!(lemmatize("parsing"), "pars");
        assert_eq!(lemmatize("loaded"), "load");
        assert_eq!(lemmatize("class"), "class");
        assert_eq!(lemmatize("status"), "status");
        // stems shorter than three are left alone
        assert_eq!(lemmatize("bed"), "bed");
        assert_eq!(lemmatize("ids"), "ids");
    }

    #[test]
    fn lemmatizer_can_be_disabled() {
        let opts = TokenizerOptions {
            remove_stop_words: false,
            lemmatize: false,
        };
        assert_eq!(tokenize_identifier_with("the_items", opts), ["the", "items"]);
    }
}
