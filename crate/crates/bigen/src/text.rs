//! Tokenization shared by the vocabulary and the NLP metrics.
//!
//! Pathology text is terse and code-heavy, so splitting is conservative:
//! lowercase, break on whitespace, peel sentence punctuation off chunk
//! edges, and keep hyphen/slash codes such as "m-8500/3" or "her-2" and
//! decimals such as "3.5" intact.

const EDGE_PUNCT: &[char] = &['.', ',', ';', ':'];

pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for chunk in text.split_whitespace() {
        let chunk = chunk.to_lowercase();
        let mut leading = Vec::new();
        let mut trailing = Vec::new();
        let mut core: &str = &chunk;
        while let Some(c) = core.chars().next() {
            if EDGE_PUNCT.contains(&c) {
                leading.push(c.to_string());
                core = &core[c.len_utf8()..];
            } else {
                break;
            }
        }
        while let Some(c) = core.chars().last() {
            if EDGE_PUNCT.contains(&c) {
                trailing.push(c.to_string());
                core = &core[..core.len() - c.len_utf8()];
            } else {
                break;
            }
        }
        tokens.extend(leading);
        if !core.is_empty() {
            tokens.push(core.to_string());
        }
        tokens.extend(trailing.into_iter().rev());
    }
    tokens
}

/// Inverse of [`tokenize`] for text in corpus style: words joined by single
/// spaces with sentence punctuation attached to the preceding word.
pub fn detokenize(tokens: &[String]) -> String {
    let mut out = String::new();
    for tok in tokens {
        let is_punct = tok.chars().count() == 1
            && EDGE_PUNCT.contains(&tok.chars().next().unwrap());
        if !out.is_empty() && !is_punct {
            out.push(' ');
        }
        out.push_str(tok);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codes_and_decimals_stay_whole() {
        assert_eq!(
            tokenize("m-8500/3 noted."),
            vec!["m-8500/3", "noted", "."]
        );
        assert_eq!(tokenize("tumor size 3.5 cm."), vec!["tumor", "size", "3.5", "cm", "."]);
        assert_eq!(tokenize("her-2 status: positive."), vec!["her-2", "status", ":", "positive", "."]);
    }

    #[test]
    fn lowercases() {
        assert_eq!(tokenize("Invasive Carcinoma"), vec!["invasive", "carcinoma"]);
    }

    #[test]
    fn detokenize_inverts_corpus_style() {
        for text in [
            "invasive ductal carcinoma present.",
            "her-2 status: positive.",
            "fibrous stroma noted; margins clear.",
        ] {
            assert_eq!(detokenize(&tokenize(text)), text);
        }
    }
}
