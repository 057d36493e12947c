//! The translation prompt prepended to every target.

/// Byte-stable template; placeholders are `{src_lang}`, `{tgt_lang}`, `{source}`.
pub const PROMPT_TEMPLATE: &str =
    "Translate this from {src_lang} to {tgt_lang}:\n{src_lang}: {source}\n{tgt_lang}:";

/// Renders the prompt for one source sentence.
pub fn render(src_lang: &str, tgt_lang: &str, source: &str) -> String {
    format!("Translate this from {src_lang} to {tgt_lang}:\n{src_lang}: {source}\n{tgt_lang}:")
}

/// Inverse of [`render`] for language codes without spaces, colons or newlines.
pub fn parse(prompt: &str) -> Option<(String, String, String)> {
    let rest = prompt.strip_prefix("Translate this from ")?;
    let (src, rest) = rest.split_once(" to ")?;
    let (tgt, rest) = rest.split_once(":\n")?;
    let rest = rest.strip_prefix(src)?.strip_prefix(": ")?;
    let source = rest.strip_suffix(&format!("\n{tgt}:"))?;
    Some((src.to_string(), tgt.to_string(), source.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn template_matches_render() {
        let expected = PROMPT_TEMPLATE
            .replace("{src_lang}", "en")
            .replace("{tgt_lang}", "qc")
            .replace("{source}", "abc");
        assert_eq!(render("en", "qc", "abc"), expected);
        assert_eq!(expected, "Translate this from en to qc:\nen: abc\nqc:");
    }

    proptest! {
        #[test]
        fn rendering_is_injective(src in "[a-z]{2,3}", tgt in "[a-z]{2,3}", source in "[a-z \n:]{0,20}") {
            let p = render(&src, &tgt, &source);
            prop_assert_eq!(parse(&p), Some((src, tgt, source)));
        }
    }
}
