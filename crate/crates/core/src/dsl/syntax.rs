//! Element-level syntax: a small XML subset with located diagnostics.
//!
//! Supported: one root element, nested elements, attributes in single or
//! double quotes, comments, an optional `<?xml ...?>` prolog, and the five
//! predefined entities. Character data other than whitespace is rejected.
//! Inside attribute values the raw characters `<`, `>` and `&` are accepted
//! so expressions can be written without escaping.

use super::ast::Span;
use super::SyntaxError;

#[derive(Debug, Clone, PartialEq)]
pub struct Attr {
    pub name: String,
    pub value: String,
    pub span: Span,
    /// Location of the first character of the value.
    pub value_span: Span,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Element {
    pub name: String,
    pub attrs: Vec<Attr>,
    pub children: Vec<Element>,
    pub span: Span,
}

impl Element {
    pub fn attr(&self, name: &str) -> Option<&Attr> {
        self.attrs.iter().find(|a| a.name == name)
    }
}

const MAX_ELEMENT_DEPTH: usize = 64;

struct Cursor<'a> {
    depth: usize,
    src: &'a [u8],
    text: &'a str,
    pos: usize,
    line: u32,
    col: u32,
}

impl<'a> Cursor<'a> {
    fn span(&self) -> Span {
        Span { line: self.line, col: self.col }
    }

    fn peek(&self) -> Option<char> {
        self.text[self.pos..].chars().next()
    }

    fn starts_with(&self, s: &str) -> bool {
        self.text[self.pos..].starts_with(s)
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.peek()?;
        self.pos += c.len_utf8();
        if c == '\n' {
            self.line += 1;
            self.col = 1;
        } else {
            self.col += 1;
        }
        Some(c)
    }

    fn eat(&mut self, s: &str) -> bool {
        if self.starts_with(s) {
            for _ in s.chars() {
                self.bump();
            }
            true
        } else {
            false
        }
    }

    fn skip_ws(&mut self) {
        while matches!(self.peek(), Some(c) if c.is_whitespace()) {
            self.bump();
        }
    }

    fn at_end(&self) -> bool {
        self.pos >= self.src.len()
    }

    fn err(&self, message: impl Into<String>, expected: &[&str]) -> SyntaxError {
        SyntaxError {
            line: self.line,
            col: self.col,
            message: message.into(),
            expected: expected.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn name(&mut self) -> Result<String, SyntaxError> {
        let start = self.pos;
        while let Some(c) = self.peek() {
            if c.is_ascii_alphanumeric() || c == '_' || c == '-' || c == '.' || c == ':' {
                self.bump();
            } else {
                break;
            }
        }
        if self.pos == start {
            return Err(self.err("expected a name", &["name"]));
        }
        Ok(self.text[start..self.pos].to_string())
    }

    /// Skip comments, a prolog and whitespace.
    fn skip_misc(&mut self) -> Result<(), SyntaxError> {
        loop {
            self.skip_ws();
            if self.starts_with("<!--") {
                let open = self.span();
                self.eat("<!--");
                loop {
                    if self.at_end() {
                        return Err(SyntaxError {
                            line: open.line,
                            col: open.col,
                            message: format!("unclosed comment opened at line {}", open.line),
                            expected: vec!["-->".into()],
                        });
                    }
                    if self.eat("-->") {
                        break;
                    }
                    self.bump();
                }
            } else if self.starts_with("<?") {
                let open = self.span();
                self.eat("<?");
                loop {
                    if self.at_end() {
                        return Err(SyntaxError {
                            line: open.line,
                            col: open.col,
                            message: format!("unclosed processing instruction opened at line {}", open.line),
                            expected: vec!["?>".into()],
                        });
                    }
                    if self.eat("?>") {
                        break;
                    }
                    self.bump();
                }
            } else {
                return Ok(());
            }
        }
    }

    fn attr_value(&mut self) -> Result<(String, Span), SyntaxError> {
        let quote = match self.peek() {
            Some(q @ ('"' | '\'')) => q,
            _ => return Err(self.err("expected a quoted attribute value", &["\"", "'"])),
        };
        let open = self.span();
        self.bump();
        let value_span = self.span();
        let mut out = String::new();
        loop {
            match self.peek() {
                None => {
                    return Err(SyntaxError {
                        line: open.line,
                        col: open.col,
                        message: format!("unterminated attribute value opened at line {}", open.line),
                        expected: vec![quote.to_string()],
                    })
                }
                Some(c) if c == quote => {
                    self.bump();
                    return Ok((out, value_span));
                }
                Some('&') => {
                    let mut decoded = false;
                    for (ent, ch) in [("&lt;", '<'), ("&gt;", '>'), ("&amp;", '&'), ("&quot;", '"'), ("&apos;", '\'')] {
                        if self.eat(ent) {
                            out.push(ch);
                            decoded = true;
                            break;
                        }
                    }
                    if !decoded {
                        self.bump();
                        out.push('&');
                    }
                }
                Some(c) => {
                    self.bump();
                    out.push(c);
                }
            }
        }
    }

    fn element(&mut self) -> Result<Element, SyntaxError> {
        let span = self.span();
        if !self.eat("<") {
            return Err(self.err("expected an element", &["<"]));
        }
        let name = self.name()?;
        if self.depth >= MAX_ELEMENT_DEPTH {
            return Err(self.err(format!("elements nested deeper than {MAX_ELEMENT_DEPTH}"), &[]));
        }
        let mut attrs: Vec<Attr> = Vec::new();
        loop {
            let had_ws = matches!(self.peek(), Some(c) if c.is_whitespace());
            self.skip_ws();
            if self.eat("/>") {
                return Ok(Element { name, attrs, children: Vec::new(), span });
            }
            if self.eat(">") {
                break;
            }
            if self.at_end() {
                return Err(SyntaxError {
                    line: span.line,
                    col: span.col,
                    message: format!("unclosed start tag <{name}> opened at line {}", span.line),
                    expected: vec![">".into(), "/>".into()],
                });
            }
            if !had_ws {
                return Err(self.err("expected whitespace before attribute", &[" ", ">", "/>"]));
            }
            let aspan = self.span();
            let aname = self.name()?;
            self.skip_ws();
            if !self.eat("=") {
                return Err(self.err(format!("expected '=' after attribute '{aname}'"), &["="]));
            }
            self.skip_ws();
            let (value, value_span) = self.attr_value()?;
            if attrs.iter().any(|a| a.name == aname) {
                return Err(SyntaxError {
                    line: aspan.line,
                    col: aspan.col,
                    message: format!("duplicate attribute '{aname}' on <{name}>"),
                    expected: vec![],
                });
            }
            attrs.push(Attr { name: aname, value, span: aspan, value_span });
        }
        let mut children = Vec::new();
        loop {
            self.skip_misc()?;
            if self.at_end() {
                return Err(SyntaxError {
                    line: span.line,
                    col: span.col,
                    message: format!("unclosed element <{name}> opened at line {}", span.line),
                    expected: vec![format!("</{name}>")],
                });
            }
            let close_span = self.span();
            if self.eat("</") {
                let close = self.name()?;
                self.skip_ws();
                if close != name {
                    return Err(SyntaxError {
                        line: close_span.line,
                        col: close_span.col,
                        message: format!(
                            "mismatched closing tag </{close}>: element <{name}> opened at line {} is still open",
                            span.line
                        ),
                        expected: vec![format!("</{name}>")],
                    });
                }
                if !self.eat(">") {
                    return Err(self.err("expected '>'", &[">"]));
                }
                return Ok(Element { name, attrs, children, span });
            }
            if self.peek() == Some('<') {
                self.depth += 1;
                let child = self.element();
                self.depth -= 1;
                children.push(child?);
            } else {
                return Err(self.err(format!("unexpected text inside <{name}>"), &["<element>", &format!("</{name}>")]));
            }
        }
    }
}

/// Parse a document into its root element.
pub fn parse_document(text: &str) -> Result<Element, SyntaxError> {
    let mut c = Cursor { depth: 0, src: text.as_bytes(), text, pos: 0, line: 1, col: 1 };
    if c.starts_with("\u{feff}") {
        c.bump();
    }
    c.skip_misc()?;
    if c.at_end() {
        return Err(c.err("empty document", &["<app>"]));
    }
    let root = c.element()?;
    c.skip_misc()?;
    if !c.at_end() {
        return Err(c.err("content after the root element", &["end of input"]));
    }
    Ok(root)
}

/// Advance a span over `text` (for locating positions inside values).
pub fn advance(mut span: Span, text: &str) -> Span {
    for ch in text.chars() {
        if ch == '\n' {
            span.line += 1;
            span.col = 1;
        } else {
            span.col += 1;
        }
    }
    span
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nested_elements_and_attributes() {
        let doc = r#"<?xml version="1.0"?>
<!-- c -->
<app name="x">
  <event name='e' match="a < b &amp;&amp; c"/>
</app>"#;
        let root = parse_document(doc).unwrap();
        assert_eq!(root.name, "app");
        assert_eq!(root.span, Span { line: 3, col: 1 });
        let ev = &root.children[0];
        assert_eq!(ev.attr("match").unwrap().value, "a < b && c");
        assert_eq!(ev.attr("name").unwrap().value_span, Span { line: 4, col: 16 });
    }

    #[test]
    fn unclosed_element_names_construct_and_line() {
        let err = parse_document("<app name=\"x\">\n  <state name=\"s\">\n</app>").unwrap_err();
        assert!(err.message.contains("<state>"), "{}", err.message);
        assert!(err.message.contains("line 2"), "{}", err.message);

        let err = parse_document("<app name=\"x\">\n  <state name=\"s\">\n").unwrap_err();
        assert!(err.message.contains("unclosed element <state> opened at line 2"), "{}", err.message);
        assert_eq!(err.line, 2);
    }

    #[test]
    fn text_content_is_rejected() {
        let err = parse_document("<app>hello</app>").unwrap_err();
        assert!(err.message.contains("unexpected text"));
        assert_eq!((err.line, err.col), (1, 6));
    }

    #[test]
    fn deep_element_nesting_is_an_error() {
        let s = "<a>".repeat(10_000);
        assert!(parse_document(&s).unwrap_err().message.contains("nested"));
    }

    #[test]
    fn duplicate_attribute() {
        assert!(parse_document("<a x='1' x='2'/>").is_err());
    }

    proptest::proptest! {
        #[test]
        fn never_panics(s in "\\PC{0,120}") {
            let _ = parse_document(&s);
        }

        #[test]
        fn never_panics_on_markup_soup(s in "[<>/=\"' a-z!?\\-\n]{0,80}") {
            let _ = parse_document(&s);
        }
    }
}
