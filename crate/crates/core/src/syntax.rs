//! Lexer, recursive-descent parser and canonical serializer for the MMS
//! SMIL profile.
//!
//! The grammar is deliberately narrow: `smil`, `head`, `layout`,
//! `root-layout`, `region`, `body`, `par` and the five media elements. No
//! namespaces, DOCTYPE, CDATA or entities beyond `&amp; &lt; &gt; &quot;`.
//! Comments and an `<?xml ...?>` prolog are skipped.

use std::fmt;

use thiserror::Error;

use crate::smil::{validate, Dimension, Layout, MediaItem, MediaKind, Par, Region, SmilTree, Unit, Violation};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    TagOpen,
    TagClose,
    TagSelfClose,
    AttrName,
    AttrValue,
    Text,
    Eof,
}

/// A lexical token.
///
/// `lexeme` is the raw source slice. Concatenating every lexeme, with the
/// whitespace, comments and prolog the lexer skipped, gives back the input.
/// The `>` closing a start tag is folded into the lexeme of the token before
/// it. `value` holds the semantic payload: the element or attribute name, or
/// the entity-decoded attribute value or text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub kind: TokenKind,
    pub lexeme: String,
    pub value: String,
    pub line: usize,
    pub column: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParseErrorCode {
    /// Malformed markup found by the lexer (unterminated tag, bad entity, ...).
    Malformed,
    UnexpectedToken,
    UnknownElement,
    MissingAttribute,
    BadClockValue,
    BadDimension,
    Unclosed,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{line}:{column}: {code:?}: {detail}")]
pub struct ParseError {
    pub line: usize,
    pub column: usize,
    pub code: ParseErrorCode,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SerializeError {
    #[error("tree has {} conformance violation(s), first: {}", .0.len(), .0[0])]
    Invalid(Vec<Violation>),
}

// ---------------------------------------------------------------------------
// Lexer

struct Lexer<'a> {
    src: &'a str,
    pos: usize,
    line: usize,
    column: usize,
    tokens: Vec<Token>,
}

impl<'a> Lexer<'a> {
    fn new(src: &'a str) -> Self {
        Lexer { src, pos: 0, line: 1, column: 1, tokens: Vec::new() }
    }

    fn rest(&self) -> &'a str {
        &self.src[self.pos..]
    }

    fn peek(&self) -> Option<char> {
        self.rest().chars().next()
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.peek()?;
        self.pos += c.len_utf8();
        if c == '\n' {
            self.line += 1;
            self.column = 1;
        } else {
            self.column += 1;
        }
        Some(c)
    }

    fn bump_str(&mut self, s: &str) {
        for _ in s.chars() {
            self.bump();
        }
    }

    fn err(&self, code: ParseErrorCode, detail: impl Into<String>) -> ParseError {
        ParseError { line: self.line, column: self.column, code, detail: detail.into() }
    }

    fn skip_ws(&mut self) {
        while self.peek().is_some_and(char::is_whitespace) {
            self.bump();
        }
    }

    fn push(&mut self, kind: TokenKind, start: usize, line: usize, column: usize, value: String) {
        self.tokens.push(Token {
            kind,
            lexeme: self.src[start..self.pos].to_string(),
            value,
            line,
            column,
        });
    }

    fn name(&mut self) -> Option<String> {
        let start = self.pos;
        while self.peek().is_some_and(is_name_char) {
            self.bump();
        }
        (self.pos > start).then(|| self.src[start..self.pos].to_string())
    }

    fn skip_until(&mut self, terminator: &str, what: &str) -> Result<(), ParseError> {
        match self.rest().find(terminator) {
            Some(off) => {
                let end = self.pos + off + terminator.len();
                while self.pos < end {
                    self.bump();
                }
                Ok(())
            }
            None => Err(self.err(ParseErrorCode::Unclosed, format!("unterminated {what}"))),
        }
    }

    fn run(mut self) -> Result<Vec<Token>, ParseError> {
        loop {
            self.skip_ws();
            let (start, line, column) = (self.pos, self.line, self.column);
            let rest = self.rest();
            if rest.is_empty() {
                self.push(TokenKind::Eof, start, line, column, String::new());
                return Ok(self.tokens);
            }
            if rest.starts_with("<!--") {
                self.skip_until("-->", "comment")?;
            } else if rest.starts_with("<?") {
                self.skip_until("?>", "processing instruction")?;
            } else if rest.starts_with("<!") {
                return Err(self.err(ParseErrorCode::Malformed, "DOCTYPE and CDATA are not supported"));
            } else if rest.starts_with("</") {
                self.bump_str("</");
                let name = self
                    .name()
                    .ok_or_else(|| self.err(ParseErrorCode::Malformed, "expected element name after '</'"))?;
                self.skip_ws();
                if self.peek() != Some('>') {
                    return Err(self.err(ParseErrorCode::Unclosed, format!("closing tag </{name} is not terminated")));
                }
                self.bump();
                self.push(TokenKind::TagClose, start, line, column, name);
            } else if rest.starts_with('<') {
                self.bump();
                let name = self
                    .name()
                    .ok_or_else(|| self.err(ParseErrorCode::Malformed, "expected element name after '<'"))?;
                self.push(TokenKind::TagOpen, start, line, column, name);
                self.tag_body()?;
            } else {
                self.text(start, line, column)?;
            }
        }
    }

    fn tag_body(&mut self) -> Result<(), ParseError> {
        loop {
            self.skip_ws();
            let (start, line, column) = (self.pos, self.line, self.column);
            match self.peek() {
                None => return Err(self.err(ParseErrorCode::Unclosed, "input ends inside a tag")),
                Some('>') => {
                    self.bump();
                    let last = self.tokens.last_mut().expect("tag_body follows a TagOpen");
                    last.lexeme.push('>');
                    return Ok(());
                }
                Some('/') => {
                    self.bump();
                    if self.peek() != Some('>') {
                        return Err(self.err(ParseErrorCode::Malformed, "expected '>' after '/'"));
                    }
                    self.bump();
                    self.push(TokenKind::TagSelfClose, start, line, column, String::new());
                    return Ok(());
                }
                Some(c) if is_name_char(c) => {
                    let name = self.name().unwrap_or_default();
                    self.push(TokenKind::AttrName, start, line, column, name);
                    self.skip_ws();
                    let (start, line, column) = (self.pos, self.line, self.column);
                    match self.peek() {
                        Some('=') => {
                            self.bump();
                        }
                        None => return Err(self.err(ParseErrorCode::Unclosed, "input ends inside a tag")),
                        Some(_) => return Err(self.err(ParseErrorCode::Malformed, "expected '=' after attribute name")),
                    }
                    self.skip_ws();
                    let quote = match self.peek() {
                        Some(q @ ('"' | '\'')) => q,
                        None => return Err(self.err(ParseErrorCode::Unclosed, "input ends inside a tag")),
                        Some(_) => return Err(self.err(ParseErrorCode::Malformed, "attribute value must be quoted")),
                    };
                    self.bump();
                    let value_start = self.pos;
                    loop {
                        match self.peek() {
                            None => return Err(self.err(ParseErrorCode::Unclosed, "unterminated attribute value")),
                            Some('<') => return Err(self.err(ParseErrorCode::Malformed, "'<' inside attribute value")),
                            Some(c) if c == quote => break,
                            Some(_) => {
                                self.bump();
                            }
                        }
                    }
                    let raw = &self.src[value_start..self.pos];
                    let value = decode_entities(raw).map_err(|d| ParseError {
                        line,
                        column,
                        code: ParseErrorCode::Malformed,
                        detail: d,
                    })?;
                    self.bump();
                    self.push(TokenKind::AttrValue, start, line, column, value);
                }
                Some(c) => return Err(self.err(ParseErrorCode::Malformed, format!("unexpected {c:?} inside tag"))),
            }
        }
    }

    fn text(&mut self, start: usize, line: usize, column: usize) -> Result<(), ParseError> {
        while self.peek().is_some_and(|c| c != '<') {
            self.bump();
        }
        let raw = &self.src[start..self.pos];
        let value = decode_entities(raw).map_err(|d| ParseError { line, column, code: ParseErrorCode::Malformed, detail: d })?;
        self.push(TokenKind::Text, start, line, column, value);
        Ok(())
    }
}

fn is_name_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | ':' | '.')
}

fn decode_entities(raw: &str) -> Result<String, String> {
    if !raw.contains('&') {
        return Ok(raw.to_string());
    }
    let mut out = String::with_capacity(raw.len());
    let mut rest = raw;
    while let Some(i) = rest.find('&') {
        out.push_str(&rest[..i]);
        rest = &rest[i..];
        let end = rest.find(';').ok_or_else(|| "unterminated entity".to_string())?;
        out.push(match &rest[..=end] {
            "&amp;" => '&',
            "&lt;" => '<',
            "&gt;" => '>',
            "&quot;" => '"',
            other => return Err(format!("unsupported entity {other}")),
        });
        rest = &rest[end + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

fn escape_attr(value: &str) -> String {
    let mut out = String::with_capacity(value.len());
    for c in value.chars() {
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

/// Splits SMIL text into tokens. The stream always ends with [`TokenKind::Eof`].
pub fn tokenize(input: &str) -> Result<Vec<Token>, ParseError> {
    Lexer::new(input).run()
}

// ---------------------------------------------------------------------------
// Parser

#[derive(Debug, Clone, Copy, Default)]
pub struct ParseOptions {
    /// Skip unknown elements (and their subtrees) with a warning instead of
    /// failing.
    pub lenient: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Warning {
    pub line: usize,
    pub column: usize,
    pub detail: String,
}

impl fmt::Display for Warning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}: {}", self.line, self.column, self.detail)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Parsed {
    pub tree: SmilTree,
    pub warnings: Vec<Warning>,
}

struct Attr {
    name: String,
    value: String,
    line: usize,
    column: usize,
}

struct Element {
    name: String,
    attrs: Vec<Attr>,
    children: Vec<Element>,
    line: usize,
    column: usize,
}

struct TreeBuilder<'t> {
    tokens: &'t [Token],
    pos: usize,
}

impl<'t> TreeBuilder<'t> {
    fn peek(&self) -> &'t Token {
        // tokenize guarantees a trailing Eof; clamp for hand-built streams
        &self.tokens[self.pos.min(self.tokens.len() - 1)]
    }

    fn next(&mut self) -> &'t Token {
        let t = self.peek();
        if self.pos < self.tokens.len() {
            self.pos += 1;
        }
        t
    }

    fn element(&mut self) -> Result<Element, ParseError> {
        let open = self.next();
        if open.kind != TokenKind::TagOpen {
            return Err(unexpected(open, "expected an element"));
        }
        let mut el = Element {
            name: open.value.clone(),
            attrs: Vec::new(),
            children: Vec::new(),
            line: open.line,
            column: open.column,
        };
        while self.peek().kind == TokenKind::AttrName {
            let name = self.next();
            let value = self.next();
            if value.kind != TokenKind::AttrValue {
                return Err(unexpected(value, "expected attribute value"));
            }
            if el.attrs.iter().any(|a| a.name == name.value) {
                return Err(unexpected(name, &format!("duplicate attribute {:?}", name.value)));
            }
            el.attrs.push(Attr {
                name: name.value.clone(),
                value: value.value.clone(),
                line: name.line,
                column: name.column,
            });
        }
        if self.peek().kind == TokenKind::TagSelfClose {
            self.next();
            return Ok(el);
        }
        loop {
            let t = self.peek();
            match t.kind {
                TokenKind::TagOpen => {
                    let child = self.element()?;
                    el.children.push(child);
                }
                TokenKind::TagClose if t.value == el.name => {
                    self.next();
                    return Ok(el);
                }
                TokenKind::TagClose => {
                    return Err(unexpected(t, &format!("</{}> does not close <{}>", t.value, el.name)));
                }
                TokenKind::Eof => {
                    return Err(ParseError {
                        line: t.line,
                        column: t.column,
                        code: ParseErrorCode::Unclosed,
                        detail: format!("<{}> opened at {}:{} is never closed", el.name, el.line, el.column),
                    })
                }
                TokenKind::Text => return Err(unexpected(t, "character data is not allowed here")),
                _ => return Err(unexpected(t, "unexpected token")),
            }
        }
    }
}

fn unexpected(t: &Token, detail: &str) -> ParseError {
    ParseError {
        line: t.line,
        column: t.column,
        code: ParseErrorCode::UnexpectedToken,
        detail: format!("{detail} (found {:?} {:?})", t.kind, t.value),
    }
}

fn err_at(line: usize, column: usize, code: ParseErrorCode, detail: impl Into<String>) -> ParseError {
    ParseError { line, column, code, detail: detail.into() }
}

const KNOWN_ELEMENTS: &[&str] = &[
    "smil", "head", "layout", "root-layout", "region", "body", "par", "img", "text", "audio", "video", "ref",
];

struct Semantics {
    options: ParseOptions,
    warnings: Vec<Warning>,
}

impl Semantics {
    fn warn(&mut self, line: usize, column: usize, detail: String) {
        self.warnings.push(Warning { line, column, detail });
    }

    /// Filters `children` down to the ones this parser understands. Unknown
    /// names fail in strict mode; known-but-misplaced ones always fail.
    fn children<'e>(&mut self, parent: &'e Element, allowed: &[&str]) -> Result<Vec<&'e Element>, ParseError> {
        let mut out = Vec::new();
        for child in &parent.children {
            if allowed.contains(&child.name.as_str()) {
                out.push(child);
            } else if KNOWN_ELEMENTS.contains(&child.name.as_str()) {
                return Err(err_at(
                    child.line,
                    child.column,
                    ParseErrorCode::UnexpectedToken,
                    format!("<{}> is not allowed inside <{}>", child.name, parent.name),
                ));
            } else if self.options.lenient {
                self.warn(child.line, child.column, format!("skipped unknown element <{}>", child.name));
            } else {
                return Err(err_at(
                    child.line,
                    child.column,
                    ParseErrorCode::UnknownElement,
                    format!("unknown element <{}>", child.name),
                ));
            }
        }
        Ok(out)
    }

    fn attrs<'e>(&mut self, el: &'e Element, known: &[&str]) -> Vec<&'e Attr> {
        let mut out = Vec::new();
        for a in &el.attrs {
            if known.contains(&a.name.as_str()) {
                out.push(a);
            } else {
                self.warn(a.line, a.column, format!("ignored attribute {:?} on <{}>", a.name, el.name));
            }
        }
        out
    }

    fn smil(&mut self, root: &Element) -> Result<SmilTree, ParseError> {
        if root.name != "smil" {
            let code = if KNOWN_ELEMENTS.contains(&root.name.as_str()) {
                ParseErrorCode::UnexpectedToken
            } else {
                ParseErrorCode::UnknownElement
            };
            return Err(err_at(root.line, root.column, code, format!("root element must be <smil>, found <{}>", root.name)));
        }
        let mut tree = SmilTree::default();
        let (mut seen_head, mut seen_body) = (false, false);
        for child in self.children(root, &["head", "body"])? {
            let dup = if child.name == "head" { &mut seen_head } else { &mut seen_body };
            if std::mem::replace(dup, true) {
                return Err(err_at(child.line, child.column, ParseErrorCode::UnexpectedToken, format!("second <{}>", child.name)));
            }
            if child.name == "head" {
                if seen_body {
                    return Err(err_at(child.line, child.column, ParseErrorCode::UnexpectedToken, "<head> after <body>"));
                }
                tree.layout = self.head(child)?;
            } else {
                tree.pars = self.body(child)?;
            }
        }
        Ok(tree)
    }

    fn head(&mut self, head: &Element) -> Result<Layout, ParseError> {
        let mut layout = None;
        for child in self.children(head, &["layout"])? {
            if layout.is_some() {
                return Err(err_at(child.line, child.column, ParseErrorCode::UnexpectedToken, "second <layout>"));
            }
            layout = Some(self.layout(child)?);
        }
        Ok(layout.unwrap_or_default())
    }

    fn layout(&mut self, el: &Element) -> Result<Layout, ParseError> {
        let mut layout = Layout::default();
        let mut seen_root = false;
        for child in self.children(el, &["root-layout", "region"])? {
            if child.name == "root-layout" {
                if std::mem::replace(&mut seen_root, true) {
                    return Err(err_at(child.line, child.column, ParseErrorCode::UnexpectedToken, "second <root-layout>"));
                }
                self.children(child, &[])?;
                for a in self.attrs(child, &["width", "height"]) {
                    let dim = parse_dimension(&a.value).ok_or_else(|| bad_dimension(a))?;
                    if dim.unit != Unit::Pixels {
                        return Err(err_at(
                            a.line,
                            a.column,
                            ParseErrorCode::BadDimension,
                            "root-layout dimensions must be pixels",
                        ));
                    }
                    if a.name == "width" {
                        layout.root_width = Some(dim.value);
                    } else {
                        layout.root_height = Some(dim.value);
                    }
                }
            } else {
                layout.regions.push(self.region(child)?);
            }
        }
        Ok(layout)
    }

    fn region(&mut self, el: &Element) -> Result<Region, ParseError> {
        self.children(el, &[])?;
        let mut region = Region::full("");
        let mut has_id = false;
        for a in self.attrs(el, &["id", "left", "top", "width", "height", "z-index"]) {
            match a.name.as_str() {
                "id" => {
                    region.id = a.value.clone();
                    has_id = true;
                }
                "z-index" => {
                    region.z_index = a.value.trim().parse().map_err(|_| bad_dimension(a))?;
                }
                name => {
                    let dim = parse_dimension(&a.value).ok_or_else(|| bad_dimension(a))?;
                    match name {
                        "left" => region.left = dim,
                        "top" => region.top = dim,
                        "width" => region.width = dim,
                        _ => region.height = dim,
                    }
                }
            }
        }
        if !has_id {
            return Err(err_at(el.line, el.column, ParseErrorCode::MissingAttribute, "<region> requires id"));
        }
        Ok(region)
    }

    fn body(&mut self, el: &Element) -> Result<Vec<Par>, ParseError> {
        self.children(el, &["par"])?.into_iter().map(|p| self.par(p)).collect()
    }

    fn par(&mut self, el: &Element) -> Result<Par, ParseError> {
        let mut dur = None;
        let mut end = None;
        for a in self.attrs(el, &["dur", "end"]) {
            let ms = parse_clock(&a.value).ok_or_else(|| bad_clock(a))?;
            if a.name == "dur" {
                dur = Some(ms);
            } else {
                end = Some(ms);
            }
        }
        let media_elements = self.children(el, &["img", "text", "audio", "video", "ref"])?;
        let media = media_elements.into_iter().map(|m| self.media(m)).collect::<Result<_, _>>()?;
        Ok(Par { dur_ms: dur.or(end), media })
    }

    fn media(&mut self, el: &Element) -> Result<MediaItem, ParseError> {
        self.children(el, &[])?;
        let kind = MediaKind::from_element(&el.name).expect("filtered by children()");
        let mut item = MediaItem::new(kind, "");
        let mut has_src = false;
        let mut end: Option<(u64, &Attr)> = None;
        for a in self.attrs(el, &["src", "region", "begin", "dur", "end", "alt"]) {
            match a.name.as_str() {
                "src" => {
                    item.src = a.value.clone();
                    has_src = true;
                }
                "region" => item.region_id = Some(a.value.clone()),
                "alt" => item.alt = Some(a.value.clone()),
                "begin" => item.begin_ms = parse_clock(&a.value).ok_or_else(|| bad_clock(a))?,
                "dur" => item.dur_ms = Some(parse_clock(&a.value).ok_or_else(|| bad_clock(a))?),
                _ => end = Some((parse_clock(&a.value).ok_or_else(|| bad_clock(a))?, a)),
            }
        }
        if !has_src {
            return Err(err_at(el.line, el.column, ParseErrorCode::MissingAttribute, format!("<{}> requires src", el.name)));
        }
        if let (None, Some((end_ms, attr))) = (item.dur_ms, end) {
            let dur = end_ms.checked_sub(item.begin_ms).ok_or_else(|| {
                err_at(attr.line, attr.column, ParseErrorCode::BadClockValue, "end precedes begin")
            })?;
            item.dur_ms = Some(dur);
        }
        Ok(item)
    }
}

fn bad_dimension(a: &Attr) -> ParseError {
    err_at(a.line, a.column, ParseErrorCode::BadDimension, format!("bad {} value {:?}", a.name, a.value))
}

fn bad_clock(a: &Attr) -> ParseError {
    err_at(a.line, a.column, ParseErrorCode::BadClockValue, format!("bad clock value {:?} for {}", a.value, a.name))
}

/// Parses a clock value into milliseconds. Accepts `Ns`, `N.Ns`, `Nms`,
/// `N.Nms` and bare (possibly fractional) seconds, rounding half-up.
pub fn parse_clock(raw: &str) -> Option<u64> {
    let s = raw.trim();
    let (number, scale_ms) = if let Some(n) = s.strip_suffix("ms") {
        (n, false)
    } else if let Some(n) = s.strip_suffix('s') {
        (n, true)
    } else {
        (s, true)
    };
    let (int_part, frac_part) = match number.split_once('.') {
        Some((i, f)) => (i, f),
        None => (number, ""),
    };
    let digits = |d: &str| !d.is_empty() && d.bytes().all(|b| b.is_ascii_digit());
    if !digits(int_part) || (number.contains('.') && !digits(frac_part)) {
        return None;
    }
    let int: u64 = int_part.parse().ok()?;
    let frac = frac_part.as_bytes();
    let digit = |i: usize| frac.get(i).map_or(0, |b| u64::from(b - b'0'));
    if scale_ms {
        let ms = digit(0) * 100 + digit(1) * 10 + digit(2) + u64::from(digit(3) >= 5);
        int.checked_mul(1000)?.checked_add(ms)
    } else {
        int.checked_add(u64::from(digit(0) >= 5))
    }
}

/// Parses `N`, `Npx` or `N%`.
pub fn parse_dimension(raw: &str) -> Option<Dimension> {
    let s = raw.trim();
    let (number, unit) = if let Some(n) = s.strip_suffix('%') {
        (n, Unit::Percent)
    } else if let Some(n) = s.strip_suffix("px") {
        (n, Unit::Pixels)
    } else {
        (s, Unit::Pixels)
    };
    if number.is_empty() || !number.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    Some(Dimension { value: number.parse().ok()?, unit })
}

/// Builds a [`SmilTree`] from a token stream. Conformance (duplicate kinds,
/// dangling regions, ...) is left to [`crate::smil::validate`].
pub fn parse(tokens: &[Token]) -> Result<SmilTree, ParseError> {
    parse_with(tokens, ParseOptions::default()).map(|p| p.tree)
}

pub fn parse_with(tokens: &[Token], options: ParseOptions) -> Result<Parsed, ParseError> {
    if tokens.is_empty() {
        return Err(err_at(1, 1, ParseErrorCode::UnexpectedToken, "empty token stream"));
    }
    let mut builder = TreeBuilder { tokens, pos: 0 };
    let root = builder.element()?;
    let trailing = builder.peek();
    if trailing.kind != TokenKind::Eof {
        return Err(unexpected(trailing, "content after </smil>"));
    }
    let mut sem = Semantics { options, warnings: Vec::new() };
    let tree = sem.smil(&root)?;
    Ok(Parsed { tree, warnings: sem.warnings })
}

/// `tokenize` followed by `parse`.
pub fn parse_str(input: &str) -> Result<SmilTree, ParseError> {
    parse(&tokenize(input)?)
}

pub fn parse_str_with(input: &str, options: ParseOptions) -> Result<Parsed, ParseError> {
    parse_with(&tokenize(input)?, options)
}

// ---------------------------------------------------------------------------
// Serializer

struct Writer {
    out: String,
}

impl Writer {
    fn line(&mut self, depth: usize, text: &str) {
        for _ in 0..depth {
            self.out.push_str("  ");
        }
        self.out.push_str(text);
        self.out.push_str("\r\n");
    }
}

fn attr(out: &mut String, name: &str, value: &str) {
    out.push(' ');
    out.push_str(name);
    out.push_str("=\"");
    out.push_str(&escape_attr(value));
    out.push('"');
}

/// Renders `tree` in canonical form: two-space indent, CRLF line endings,
/// durations in milliseconds and attributes in the fixed order
/// `id, left, top, width, height, z-index, src, region, begin, dur, alt`.
/// Default-valued optional attributes (`begin="0"`, `z-index="0"`) are omitted.
pub fn serialize(tree: &SmilTree) -> Result<String, SerializeError> {
    let violations = validate(tree);
    if !violations.is_empty() {
        return Err(SerializeError::Invalid(violations));
    }
    let mut w = Writer { out: String::new() };
    w.line(0, "<smil>");
    let layout = &tree.layout;
    if !layout.is_empty() {
        w.line(1, "<head>");
        w.line(2, "<layout>");
        if layout.root_width.is_some() || layout.root_height.is_some() {
            let mut s = String::from("<root-layout");
            if let Some(wd) = layout.root_width {
                attr(&mut s, "width", &wd.to_string());
            }
            if let Some(h) = layout.root_height {
                attr(&mut s, "height", &h.to_string());
            }
            s.push_str("/>");
            w.line(3, &s);
        }
        for r in &layout.regions {
            let mut s = String::from("<region");
            attr(&mut s, "id", &r.id);
            attr(&mut s, "left", &r.left.to_string());
            attr(&mut s, "top", &r.top.to_string());
            attr(&mut s, "width", &r.width.to_string());
            attr(&mut s, "height", &r.height.to_string());
            if r.z_index != 0 {
                attr(&mut s, "z-index", &r.z_index.to_string());
            }
            s.push_str("/>");
            w.line(3, &s);
        }
        w.line(2, "</layout>");
        w.line(1, "</head>");
    }
    if tree.pars.is_empty() {
        w.line(1, "<body/>");
    } else {
        w.line(1, "<body>");
        for par in &tree.pars {
            let mut s = String::from("<par");
            if let Some(d) = par.dur_ms {
                attr(&mut s, "dur", &format!("{d}ms"));
            }
            if par.media.is_empty() {
                s.push_str("/>");
                w.line(2, &s);
                continue;
            }
            s.push('>');
            w.line(2, &s);
            for m in &par.media {
                let mut s = format!("<{}", m.kind.element());
                attr(&mut s, "src", &m.src);
                if let Some(region) = &m.region_id {
                    attr(&mut s, "region", region);
                }
                if m.begin_ms != 0 {
                    attr(&mut s, "begin", &format!("{}ms", m.begin_ms));
                }
                if let Some(d) = m.dur_ms {
                    attr(&mut s, "dur", &format!("{d}ms"));
                }
                if let Some(alt) = &m.alt {
                    attr(&mut s, "alt", alt);
                }
                s.push_str("/>");
                w.line(3, &s);
            }
            w.line(2, "</par>");
        }
        w.line(1, "</body>");
    }
    w.line(0, "</smil>");
    Ok(w.out)
}
