//! Element tree to [`AppSpec`].

use super::ast::*;
use super::expr::parse_expr;
use super::syntax::{advance, parse_document, Attr, Element};
use super::SyntaxError;
use crate::pipeline::Field;

const METRIC_PARAMS: [&str; 8] =
    ["epsilon", "delta", "conservative", "bits", "hashes", "subtables", "buckets", "cells"];

fn at(span: Span, message: impl Into<String>, expected: &[&str]) -> SyntaxError {
    SyntaxError {
        line: span.line,
        col: span.col,
        message: message.into(),
        expected: expected.iter().map(|s| s.to_string()).collect(),
    }
}

fn check_attrs(el: &Element, allowed: &[&str]) -> Result<(), SyntaxError> {
    for a in &el.attrs {
        if !allowed.contains(&a.name.as_str()) {
            return Err(at(a.span, format!("unknown attribute '{}' on <{}>", a.name, el.name), allowed));
        }
    }
    Ok(())
}

fn required<'a>(el: &'a Element, name: &str) -> Result<&'a Attr, SyntaxError> {
    el.attr(name).ok_or_else(|| at(el.span, format!("<{}> is missing required attribute '{name}'", el.name), &[name]))
}

fn ident(a: &Attr) -> Ident {
    Ident::new(a.value.trim(), a.value_span)
}

fn raw(a: &Attr) -> (String, Span) {
    (a.value.trim().to_string(), a.value_span)
}

fn no_children(el: &Element) -> Result<(), SyntaxError> {
    match el.children.first() {
        Some(c) => Err(at(c.span, format!("<{}> takes no child elements", el.name), &[])),
        None => Ok(()),
    }
}

fn expr_attr(a: &Attr) -> Result<Expr, SyntaxError> {
    parse_expr(&a.value, a.value_span)
}

/// Split a comma-separated list, keeping the location of each item.
fn list(a: &Attr) -> Vec<Ident> {
    let mut out = Vec::new();
    let mut offset = 0usize;
    for piece in a.value.split(',') {
        let lead = piece.len() - piece.trim_start().len();
        let span = advance(a.value_span, &a.value[..offset + lead]);
        let name = piece.trim();
        if !name.is_empty() {
            out.push(Ident::new(name, span));
        }
        offset += piece.len() + 1;
    }
    out
}

fn normalize(el: &Element) -> Result<bool, SyntaxError> {
    match el.attr("normalize") {
        None => Ok(false),
        Some(a) => match a.value.trim() {
            "bidirectional" => Ok(true),
            "none" => Ok(false),
            _ => Err(at(a.value_span, format!("invalid normalize value '{}'", a.value), &["bidirectional", "none"])),
        },
    }
}

fn key_decl(a: &Attr, bidirectional: bool) -> KeyDecl {
    KeyDecl { selectors: list(a), bidirectional, span: a.value_span }
}

/// Decide whether a key attribute names the primary key, a secondary key or
/// a field list.
pub(crate) fn key_source(items: Vec<Ident>, span: Span, bidirectional: bool) -> KeySource {
    if items.len() == 1 && !bidirectional {
        let only = &items[0];
        if only.name == "primary" {
            return KeySource::Primary(only.span);
        }
        if !only.name.contains('.') && Field::from_name(&only.name).is_none() {
            return KeySource::Named(only.clone());
        }
    }
    KeySource::Fields(KeyDecl { selectors: items, bidirectional, span })
}

fn template(a: &Attr) -> Result<Vec<TemplatePiece>, SyntaxError> {
    let mut out = Vec::new();
    let mut text = String::new();
    let chars: Vec<char> = a.value.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c == '{' && chars.get(i + 1) == Some(&'{') {
            text.push('{');
            i += 2;
        } else if c == '}' && chars.get(i + 1) == Some(&'}') {
            text.push('}');
            i += 2;
        } else if c == '{' {
            let prefix: String = chars[..i].iter().collect();
            let span = advance(a.value_span, &prefix);
            let Some(close) = chars[i + 1..].iter().position(|&c| c == '}') else {
                return Err(at(
                    advance(a.value_span, &chars[..i].iter().collect::<String>()),
                    "unclosed '{' in message template",
                    &["}"],
                ));
            };
            let name: String = chars[i + 1..i + 1 + close].iter().collect();
            if !text.is_empty() {
                out.push(TemplatePiece::Text(std::mem::take(&mut text)));
            }
            out.push(TemplatePiece::Placeholder(Ident::new(name.trim(), span)));
            i += close + 2;
        } else if c == '}' {
            return Err(at(
                advance(a.value_span, &chars[..i].iter().collect::<String>()),
                "unmatched '}' in message template",
                &["}}"],
            ));
        } else {
            text.push(c);
            i += 1;
        }
    }
    if !text.is_empty() {
        out.push(TemplatePiece::Text(text));
    }
    Ok(out)
}

fn event(el: &Element) -> Result<EventDecl, SyntaxError> {
    check_attrs(el, &["name", "match", "key", "normalize"])?;
    let name = ident(required(el, "name")?);
    let predicate = expr_attr(required(el, "match")?)?;
    let primary_key = key_decl(required(el, "key")?, normalize(el)?);
    let mut secondary_keys = Vec::new();
    for c in &el.children {
        if c.name != "secondary" {
            return Err(at(c.span, format!("unexpected element <{}> inside <event>", c.name), &["<secondary>"]));
        }
        check_attrs(c, &["name", "key", "normalize"])?;
        no_children(c)?;
        secondary_keys.push(SecondaryDecl {
            name: ident(required(c, "name")?),
            key: key_decl(required(c, "key")?, normalize(c)?),
            span: c.span,
        });
    }
    Ok(EventDecl { name, source: EventSource::Packet { predicate, primary_key, secondary_keys }, span: el.span })
}

fn remote_event(el: &Element) -> Result<EventDecl, SyntaxError> {
    check_attrs(el, &["name", "topic", "key", "normalize", "entity_field"])?;
    let name = ident(required(el, "name")?);
    let topic = ident(required(el, "topic")?);
    let key = key_decl(required(el, "key")?, normalize(el)?);
    let entity_field = el.attr("entity_field").map(|a| a.value.trim().to_string()).unwrap_or_else(|| "entity".into());
    let mut inputs = Vec::new();
    for c in &el.children {
        if c.name != "input" {
            return Err(at(c.span, format!("unexpected element <{}> inside <remote_event>", c.name), &["<input>"]));
        }
        check_attrs(c, &["name", "field"])?;
        no_children(c)?;
        let name = ident(required(c, "name")?);
        let field = c.attr("field").map(|a| a.value.trim().to_string()).unwrap_or_else(|| name.name.clone());
        inputs.push(InputDecl { name, field, span: c.span });
    }
    Ok(EventDecl { name, source: EventSource::Remote { topic, key, entity_field, inputs }, span: el.span })
}

fn metric(el: &Element) -> Result<MetricDecl, SyntaxError> {
    let mut allowed = vec!["name", "kind", "key", "normalize", "events", "window", "mode", "panes", "inc"];
    allowed.extend(METRIC_PARAMS);
    check_attrs(el, &allowed)?;
    no_children(el)?;
    let name = ident(required(el, "name")?);
    let kind = ident(required(el, "kind")?);
    let bidir = normalize(el)?;
    let key = match el.attr("key") {
        Some(a) => key_source(list(a), a.value_span, bidir),
        None => KeySource::Primary(el.span),
    };
    let events = el.attr("events").map(list);
    let params = el
        .attrs
        .iter()
        .filter(|a| METRIC_PARAMS.contains(&a.name.as_str()))
        .map(|a| Param { name: a.name.clone(), value: a.value.trim().to_string(), span: a.value_span })
        .collect();
    let window = match el.attr("window") {
        Some(w) => {
            Some(WindowDecl { length: raw(w), mode: el.attr("mode").map(ident), panes: el.attr("panes").map(raw) })
        }
        None => {
            if let Some(a) = el.attr("mode").or_else(|| el.attr("panes")) {
                return Err(at(a.span, format!("'{}' requires a 'window' attribute", a.name), &["window"]));
            }
            None
        }
    };
    let inc = el.attr("inc").map(expr_attr).transpose()?;
    Ok(MetricDecl { name, kind, key, events, params, window, inc, span: el.span })
}

fn action(el: &Element) -> Result<ActionDecl, SyntaxError> {
    no_children(el)?;
    let kind = match el.name.as_str() {
        "alert" => {
            check_attrs(el, &["topic", "message"])?;
            ActionKind::Alert {
                topic: ident(required(el, "topic")?),
                message: el.attr("message").map(template).transpose()?.unwrap_or_default(),
            }
        }
        "export" => {
            check_attrs(el, &["topic"])?;
            ActionKind::Export { topic: ident(required(el, "topic")?) }
        }
        "set" => {
            check_attrs(el, &["reg", "value"])?;
            ActionKind::Set { register: raw(required(el, "reg")?), value: expr_attr(required(el, "value")?)? }
        }
        "schedule" => {
            check_attrs(el, &["delay", "tag"])?;
            ActionKind::Schedule { delay: raw(required(el, "delay")?), tag: el.attr("tag").map(raw) }
        }
        "cancel" => {
            check_attrs(el, &["tag"])?;
            ActionKind::Cancel { tag: el.attr("tag").map(raw) }
        }
        "reset" => {
            check_attrs(el, &["metrics"])?;
            ActionKind::Reset { metrics: list(required(el, "metrics")?) }
        }
        "drop" => {
            check_attrs(el, &[])?;
            ActionKind::Drop
        }
        other => {
            return Err(at(
                el.span,
                format!("unknown action <{other}>"),
                &["<alert>", "<export>", "<set>", "<schedule>", "<cancel>", "<reset>", "<drop>"],
            ))
        }
    };
    Ok(ActionDecl { kind, span: el.span })
}

fn state(el: &Element) -> Result<StateDecl, SyntaxError> {
    check_attrs(el, &["name"])?;
    let name = ident(required(el, "name")?);
    let mut rules = Vec::new();
    for r in &el.children {
        if r.name != "rule" {
            return Err(at(r.span, format!("unexpected element <{}> inside <state>", r.name), &["<rule>"]));
        }
        check_attrs(r, &["when", "next"])?;
        let condition = expr_attr(required(r, "when")?)?;
        let next_state = r.attr("next").map(ident);
        let actions = r.children.iter().map(action).collect::<Result<_, _>>()?;
        rules.push(RuleDecl { condition, actions, next_state, span: r.span });
    }
    Ok(StateDecl { name, rules, span: el.span })
}

fn export(el: &Element) -> Result<ExportDecl, SyntaxError> {
    check_attrs(el, &["topic", "kind", "features"])?;
    no_children(el)?;
    Ok(ExportDecl {
        topic: ident(required(el, "topic")?),
        kind: el.attr("kind").map(ident).unwrap_or_else(|| Ident::new("alert", el.span)),
        features: el.attr("features").map(list),
        span: el.span,
    })
}

/// Parse DSL text into an [`AppSpec`]. Names are not resolved here.
pub fn parse(text: &str) -> Result<AppSpec, SyntaxError> {
    let root = parse_document(text)?;
    if root.name != "app" {
        return Err(at(root.span, format!("expected root element <app>, found <{}>", root.name), &["<app>"]));
    }
    check_attrs(&root, &["name", "initial", "registers", "seed", "capacity"])?;
    let mut spec = AppSpec {
        name: ident(required(&root, "name")?),
        initial_state: ident(required(&root, "initial")?),
        registers: root.attr("registers").map(raw),
        seed: root.attr("seed").map(raw),
        entity_capacity: root.attr("capacity").map(raw),
        events: Vec::new(),
        metrics: Vec::new(),
        features: Vec::new(),
        states: Vec::new(),
        exports: Vec::new(),
        span: root.span,
    };
    for el in &root.children {
        match el.name.as_str() {
            "event" => spec.events.push(event(el)?),
            "remote_event" => spec.events.push(remote_event(el)?),
            "metric" => spec.metrics.push(metric(el)?),
            "feature" => {
                check_attrs(el, &["name", "expr"])?;
                no_children(el)?;
                spec.features.push(FeatureDecl {
                    name: ident(required(el, "name")?),
                    expr: expr_attr(required(el, "expr")?)?,
                    span: el.span,
                });
            }
            "export" => spec.exports.push(export(el)?),
            "state" => spec.states.push(state(el)?),
            other => {
                return Err(at(
                    el.span,
                    format!("unexpected element <{other}> inside <app>"),
                    &["<event>", "<remote_event>", "<metric>", "<feature>", "<export>", "<state>"],
                ))
            }
        }
    }
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"<app name="min" initial="idle">
  <event name="tcp_syn" match="tcp.flags == SYN" key="ip.src"/>
  <state name="idle"/>
</app>"#;

    #[test]
    fn minimal_document() {
        let spec = parse(MINIMAL).unwrap();
        assert_eq!(spec.events.len(), 1);
        assert_eq!(spec.states.len(), 1);
        assert!(spec.metrics.is_empty());
        assert_eq!(spec.events[0].name.name, "tcp_syn");
        assert_eq!(spec.events[0].name.span, Span { line: 2, col: 16 });
    }

    #[test]
    fn forward_reference_parses() {
        let doc = r#"<app name="a" initial="s">
  <state name="s"><rule when="rate > 10" next="s"/></state>
  <feature name="rate" expr="1"/>
</app>"#;
        assert!(parse(doc).is_ok());
    }

    #[test]
    fn unclosed_block() {
        let doc = "<app name=\"a\" initial=\"s\">\n  <state name=\"s\">\n    <rule when=\"true\">\n  </state>\n</app>";
        let err = parse(doc).unwrap_err();
        assert!(err.message.contains("<rule>") && err.message.contains("line 3"), "{}", err.message);
    }

    #[test]
    fn key_sources() {
        let sp = Span::default();
        let i = |s: &str| vec![Ident::new(s, sp)];
        assert!(matches!(key_source(i("primary"), sp, false), KeySource::Primary(_)));
        assert!(matches!(key_source(i("flow"), sp, false), KeySource::Named(_)));
        assert!(matches!(key_source(i("ip.src"), sp, false), KeySource::Fields(_)));
        assert!(matches!(key_source(i("l4_sport"), sp, false), KeySource::Fields(_)));
        assert!(matches!(key_source(i("ip.sorc"), sp, false), KeySource::Fields(_)));
    }

    #[test]
    fn list_locations() {
        let doc = "<app name=\"a\" initial=\"s\">\n<event name=\"e\" match=\"true\" key=\"ip.src, ip.dst\"/><state name=\"s\"/></app>";
        let spec = parse(doc).unwrap();
        let EventSource::Packet { primary_key, .. } = &spec.events[0].source else { panic!() };
        assert_eq!(primary_key.selectors[1].span, Span { line: 2, col: 43 });
    }

    #[test]
    fn templates() {
        let doc = r#"<app name="a" initial="s"><state name="s"><rule when="true"><alert topic="t" message="x {entity} {{y}} {reg[0]}"/></rule></state></app>"#;
        let spec = parse(doc).unwrap();
        let ActionKind::Alert { message, .. } = &spec.states[0].rules[0].actions[0].kind else { panic!() };
        assert_eq!(message.len(), 4);
        assert!(matches!(&message[2], TemplatePiece::Text(t) if t == " {y} "));
    }

    #[test]
    fn unknown_attribute_and_element() {
        assert!(parse(r#"<app name="a" initial="s" colour="red"/>"#).is_err());
        assert!(parse(r#"<app name="a" initial="s"><gadget/></app>"#).is_err());
        assert!(parse(r#"<app name="a"/>"#).is_err());
    }
}
