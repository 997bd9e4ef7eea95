//! Annotated rationale rendering.
//!
//! A token carries four flags: part of the gold rationale (H), selected
//! before the attack (B), a trigger slot (T), selected after the attack
//! (A). The text form wraps runs of tokens in `{{H ... }}` style markers
//! so a diff of two reports stays readable, and it parses back without
//! loss. The HTML form colors the same flags for eyeballing.

use serde::{Deserialize, Serialize};

use crate::attack::SampleOutcome;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedToken {
    pub text: String,
    pub human: bool,
    pub before: bool,
    pub trigger: bool,
    pub after: bool,
}

/// Marker rank, outermost first. A marker covers a maximal span on which
/// its flag holds and every higher-ranked flag is constant.
const FLAGS: [(char, fn(&AnnotatedToken) -> bool); 4] = [
    ('H', |t| t.human),
    ('B', |t| t.before),
    ('T', |t| t.trigger),
    ('A', |t| t.after),
];

/// Attach the per-token flags of an attack outcome to token surfaces.
pub fn annotate(sample: &SampleOutcome, vocab: &[String]) -> Result<Vec<AnnotatedToken>> {
    let n = sample.adv_tokens.len();
    if sample.trigger_tokens.len() != n
        || sample.before_tokens.len() != n
        || sample.after_tokens.len() != n
    {
        return Err(Error::invalid("token flag lengths disagree"));
    }
    if let Some(h) = &sample.human_tokens {
        if h.len() != n {
            return Err(Error::invalid("token flag lengths disagree"));
        }
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let id = sample.adv_tokens[i];
        let text = vocab
            .get(id)
            .cloned()
            .ok_or_else(|| Error::invalid(format!("token id {} outside vocabulary", id)))?;
        out.push(AnnotatedToken {
            text,
            human: sample
                .human_tokens
                .as_ref()
                .map(|h| h[i] != 0)
                .unwrap_or(false),
            before: sample.before_tokens[i] != 0,
            trigger: sample.trigger_tokens[i] != 0,
            after: sample.after_tokens[i] != 0,
        });
    }
    Ok(out)
}

fn escape_token(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        if matches!(c, '\\' | '{' | '}' | ' ') {
            out.push('\\');
        }
        out.push(c);
    }
    out
}

fn open_flags(token: &AnnotatedToken) -> Vec<char> {
    FLAGS
        .iter()
        .filter(|(_, get)| get(token))
        .map(|(c, _)| *c)
        .collect()
}

/// Marker form: `{{H {{B good }} fine }} the {{T zzz }}`.
pub fn render_text(tokens: &[AnnotatedToken]) -> String {
    let mut parts: Vec<String> = Vec::new();
    let mut open: Vec<char> = Vec::new();
    for token in tokens {
        let want = open_flags(token);
        let keep = open
            .iter()
            .zip(&want)
            .take_while(|(a, b)| a == b)
            .count();
        for _ in keep..open.len() {
            parts.push("}}".to_string());
        }
        open.truncate(keep);
        for &c in &want[keep..] {
            parts.push(format!("{{{{{}", c));
            open.push(c);
        }
        parts.push(escape_token(&token.text));
    }
    for _ in 0..open.len() {
        parts.push("}}".to_string());
    }
    parts.join(" ")
}

/// Inverse of [`render_text`]. Accepts any properly nested markers, not
/// just the canonical ones the renderer emits.
pub fn parse_text(text: &str) -> Result<Vec<AnnotatedToken>> {
    let chars: Vec<char> = text.chars().collect();
    let mut i = 0usize;
    let mut open: Vec<char> = Vec::new();
    let mut out: Vec<AnnotatedToken> = Vec::new();
    while i < chars.len() {
        if chars[i] == ' ' {
            i += 1;
            continue;
        }
        if chars[i] == '{' {
            if i + 2 < chars.len() && chars[i + 1] == '{' {
                let flag = chars[i + 2];
                if !FLAGS.iter().any(|(c, _)| *c == flag) {
                    return Err(Error::invalid(format!("unknown marker {{{{{}", flag)));
                }
                if open.contains(&flag) {
                    return Err(Error::invalid(format!("marker {{{{{} nested in itself", flag)));
                }
                open.push(flag);
                i += 3;
                continue;
            }
            return Err(Error::invalid("stray brace; token braces must be escaped"));
        }
        if chars[i] == '}' {
            if i + 1 < chars.len() && chars[i + 1] == '}' {
                if open.pop().is_none() {
                    return Err(Error::invalid("closing marker without an open one"));
                }
                i += 2;
                continue;
            }
            return Err(Error::invalid("stray brace; token braces must be escaped"));
        }
        let mut text = String::new();
        while i < chars.len() {
            match chars[i] {
                ' ' | '{' | '}' => break,
                '\\' => {
                    i += 1;
                    if i >= chars.len() {
                        return Err(Error::invalid("dangling escape at end of input"));
                    }
                    text.push(chars[i]);
                    i += 1;
                }
                c => {
                    text.push(c);
                    i += 1;
                }
            }
        }
        let has = |f: char| open.contains(&f);
        out.push(AnnotatedToken {
            text,
            human: has('H'),
            before: has('B'),
            trigger: has('T'),
            after: has('A'),
        });
    }
    if !open.is_empty() {
        return Err(Error::invalid("unclosed marker at end of input"));
    }
    Ok(out)
}

fn escape_html(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            c => out.push(c),
        }
    }
    out
}

/// One span per token; flags become classes. Gold rationale underlined,
/// before-attack tinted blue, trigger slots red, after-attack yellow.
pub fn render_html_line(tokens: &[AnnotatedToken]) -> String {
    let mut out = String::new();
    for (i, token) in tokens.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        let mut classes: Vec<&str> = Vec::new();
        if token.human {
            classes.push("human");
        }
        if token.before {
            classes.push("before");
        }
        if token.trigger {
            classes.push("trigger");
        }
        if token.after {
            classes.push("after");
        }
        if classes.is_empty() {
            out.push_str(&escape_html(&token.text));
        } else {
            out.push_str(&format!(
                "<span class=\"{}\">{}</span>",
                classes.join(" "),
                escape_html(&token.text)
            ));
        }
    }
    out
}

const HTML_STYLE: &str = "body { font-family: monospace; line-height: 1.8; margin: 2em; }\n\
.human { text-decoration: underline; }\n\
.before { background: #cfe2ff; }\n\
.trigger { background: #ffc9c9; }\n\
.after { background: #fff3a8; }\n\
.before.after { background: linear-gradient(180deg, #cfe2ff 50%, #fff3a8 50%); }\n\
.trigger.after { background: linear-gradient(180deg, #ffc9c9 50%, #fff3a8 50%); }\n\
.meta { color: #666; margin-top: 1.2em; }\n";

/// Standalone page: one heading line and one annotated line per section.
pub fn render_html_document(title: &str, sections: &[(String, Vec<AnnotatedToken>)]) -> String {
    let mut out = String::new();
    out.push_str("<!doctype html>\n<html><head><meta charset=\"utf-8\">\n");
    out.push_str(&format!("<title>{}</title>\n", escape_html(title)));
    out.push_str(&format!("<style>\n{}</style>\n</head>\n<body>\n", HTML_STYLE));
    out.push_str(&format!("<h1>{}</h1>\n", escape_html(title)));
    out.push_str(
        "<p class=\"meta\">underline: gold rationale; blue: selected before; \
         red: trigger slots; yellow: selected after</p>\n",
    );
    for (heading, tokens) in sections {
        out.push_str(&format!("<p class=\"meta\">{}</p>\n", escape_html(heading)));
        out.push_str(&format!("<p>{}</p>\n", render_html_line(tokens)));
    }
    out.push_str("</body></html>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tok(text: &str, flags: &str) -> AnnotatedToken {
        AnnotatedToken {
            text: text.to_string(),
            human: flags.contains('H'),
            before: flags.contains('B'),
            trigger: flags.contains('T'),
            after: flags.contains('A'),
        }
    }

    #[test]
    fn renders_nested_markers_in_rank_order() {
        let tokens = vec![
            tok("the", ""),
            tok("film", "HB"),
            tok("soars", "HBA"),
            tok("zq", "TA"),
            tok("zr", "TA"),
            tok("end", ""),
        ];
        let text = render_text(&tokens);
        assert_eq!(
            text,
            "the {{H {{B film {{A soars }} }} }} {{T {{A zq zr }} }} end"
        );
    }

    #[test]
    fn marker_spans_are_maximal() {
        let tokens = vec![tok("a", "B"), tok("b", "B"), tok("c", "B")];
        let text = render_text(&tokens);
        assert_eq!(text.matches("{{B").count(), 1);
        assert_eq!(text, "{{B a b c }}");
    }

    #[test]
    fn text_round_trips_through_parse() {
        let cases = vec![
            vec![],
            vec![tok("lone", "")],
            vec![tok("a", "H"), tok("b", ""), tok("c", "HBTA")],
            vec![tok("x{y}", "B"), tok("back\\slash", "T"), tok("sp ace", "A")],
            vec![tok("a", "HB"), tok("b", "HA"), tok("c", "B"), tok("d", "TB")],
        ];
        for tokens in cases {
            let text = render_text(&tokens);
            let back = parse_text(&text).unwrap();
            assert_eq!(back, tokens, "through {:?}", text);
            assert_eq!(render_text(&back), text);
        }
    }

    #[test]
    fn round_trips_on_random_flag_sequences() {
        use rand::Rng;
        let mut rng = crate::rng::rng_from(77, &[]);
        for _ in 0..200 {
            let n = rng.gen_range(0..12usize);
            let tokens: Vec<AnnotatedToken> = (0..n)
                .map(|i| AnnotatedToken {
                    text: format!("w{}", i),
                    human: rng.gen_bool(0.4),
                    before: rng.gen_bool(0.4),
                    trigger: rng.gen_bool(0.3),
                    after: rng.gen_bool(0.4),
                })
                .collect();
            let text = render_text(&tokens);
            assert_eq!(parse_text(&text).unwrap(), tokens, "through {:?}", text);
        }
    }

    #[test]
    fn parse_accepts_non_canonical_nesting() {
        let tokens = parse_text("{{A {{H deep }} }}").unwrap();
        assert_eq!(tokens, vec![tok("deep", "HA")]);
    }

    #[test]
    fn parse_rejects_malformed_input() {
        assert!(parse_text("{{H open").is_err());
        assert!(parse_text("close }}").is_err());
        assert!(parse_text("{{X what }}").is_err());
        assert!(parse_text("{{H {{H twice }} }}").is_err());
        assert!(parse_text("un{escaped").is_err());
        assert!(parse_text("trailing\\").is_err());
    }

    #[test]
    fn html_escapes_and_classes() {
        let tokens = vec![tok("a<b", "HT"), tok("plain", "")];
        let line = render_html_line(&tokens);
        assert_eq!(line, "<span class=\"human trigger\">a&lt;b</span> plain");
        let page = render_html_document("run & report", &[("doc 0".to_string(), tokens)]);
        assert!(page.contains("run &amp; report"));
        assert!(page.contains(".trigger"));
        assert!(page.starts_with("<!doctype html>"));
    }
}
