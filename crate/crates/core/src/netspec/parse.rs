use super::spec::{LayerSpec, NetSpec, ResidualBlock, Shape, TrainPolicy, Width};
use super::{BranchSpec, NetSpecError, SourcePos};
use crate::tensor::{InitScheme, LrnParams, PoolKind};

/// Result of parsing: a complete network or a branch template.
#[derive(Clone, Debug, PartialEq)]
pub enum ParsedSpec {
    Net(NetSpec),
    Branch(BranchSpec),
}

impl ParsedSpec {
    pub fn into_net(self) -> Result<NetSpec, NetSpecError> {
        match self {
            ParsedSpec::Net(n) => Ok(n),
            ParsedSpec::Branch(_) => Err(NetSpecError::WrongSpecKind {
                expected: "network",
                found: "branch",
            }),
        }
    }

    pub fn into_branch(self) -> Result<BranchSpec, NetSpecError> {
        match self {
            ParsedSpec::Branch(b) => Ok(b),
            ParsedSpec::Net(_) => Err(NetSpecError::WrongSpecKind {
                expected: "branch",
                found: "network",
            }),
        }
    }
}

pub fn parse_netspec(text: &str) -> Result<ParsedSpec, NetSpecError> {
    parse_inner(text, None)
}

/// Like [`parse_netspec`], using `input` when the text has no `INPUT` line.
pub fn parse_netspec_with_input(text: &str, input: Shape) -> Result<ParsedSpec, NetSpecError> {
    parse_inner(text, Some(input))
}

fn parse_inner(text: &str, fallback_input: Option<Shape>) -> Result<ParsedSpec, NetSpecError> {
    let mut p = Parser::new(text);
    let doc = p.document()?;
    let symbolic = doc.layers.iter().any(|l| l.width() == Some(Width::Classes));
    let name = doc.name.unwrap_or_default();
    if symbolic {
        return Ok(ParsedSpec::Branch(BranchSpec {
            name,
            layers: doc.layers,
            blocks: doc.blocks,
            policy: doc.policy,
        }));
    }
    let input = doc
        .input
        .or(fallback_input)
        .ok_or(NetSpecError::MissingInput)?;
    NetSpec::checked(
        name,
        input,
        doc.layers,
        doc.blocks,
        doc.policy.unwrap_or_default(),
        Some(&doc.positions),
    )
    .map(ParsedSpec::Net)
}

#[derive(Default)]
struct Document {
    name: Option<String>,
    input: Option<Shape>,
    layers: Vec<LayerSpec>,
    positions: Vec<SourcePos>,
    blocks: Vec<ResidualBlock>,
    policy: Option<TrainPolicy>,
}

struct Parser {
    chars: Vec<(char, SourcePos)>,
    i: usize,
    end: SourcePos,
}

fn is_separator(c: char) -> bool {
    matches!(c, '\n' | '/' | '}')
}

impl Parser {
    fn new(text: &str) -> Self {
        let mut chars = Vec::with_capacity(text.len());
        let (mut line, mut column) = (1, 1);
        let mut in_comment = false;
        for c in text.chars() {
            if c == '#' {
                in_comment = true;
            }
            if c == '\n' {
                in_comment = false;
            }
            if !in_comment && c != '\r' {
                chars.push((c, SourcePos { line, column }));
            }
            if c == '\n' {
                line += 1;
                column = 1;
            } else {
                column += 1;
            }
        }
        Self {
            chars,
            i: 0,
            end: SourcePos { line, column },
        }
    }

    fn peek(&self) -> Option<char> {
        self.chars.get(self.i).map(|&(c, _)| c)
    }

    fn pos(&self) -> SourcePos {
        self.chars.get(self.i).map_or(self.end, |&(_, p)| p)
    }

    fn skip_inline_space(&mut self) {
        while matches!(self.peek(), Some(c) if c.is_whitespace() && c != '\n') {
            self.i += 1;
        }
    }

    fn skip_separators(&mut self) {
        while matches!(self.peek(), Some(c) if c.is_whitespace() || c == '/') {
            self.i += 1;
        }
    }

    fn word(&mut self) -> String {
        let mut w = String::new();
        while let Some(c) = self.peek().filter(|c| c.is_ascii_alphabetic()) {
            w.push(c);
            self.i += 1;
        }
        w
    }

    /// Text up to the next layer separator, trimmed.
    fn argument(&mut self) -> String {
        let mut s = String::new();
        while let Some(c) = self.peek().filter(|&c| !is_separator(c)) {
            s.push(c);
            self.i += 1;
        }
        s.trim().to_string()
    }

    fn expect(&mut self, want: char, what: &'static str) -> Result<(), NetSpecError> {
        self.skip_inline_space();
        if self.peek() == Some(want) {
            self.i += 1;
            Ok(())
        } else {
            Err(NetSpecError::Malformed {
                what,
                text: self.peek().map(String::from).unwrap_or_default(),
                reason: format!("expected '{want}'"),
                pos: self.pos(),
            })
        }
    }

    fn document(&mut self) -> Result<Document, NetSpecError> {
        let mut doc = Document::default();
        self.items(&mut doc, false)?;
        if self.peek().is_some() {
            return Err(NetSpecError::Malformed {
                what: "document",
                text: "}".into(),
                reason: "unbalanced closing brace".into(),
                pos: self.pos(),
            });
        }
        Ok(doc)
    }

    fn items(&mut self, doc: &mut Document, in_block: bool) -> Result<(), NetSpecError> {
        loop {
            self.skip_separators();
            let start = self.pos();
            match self.peek() {
                None | Some('}') => return Ok(()),
                Some(c) if !c.is_ascii_alphabetic() => {
                    return Err(NetSpecError::UnknownLayer {
                        kind: self.argument(),
                        pos: start,
                    })
                }
                _ => {}
            }
            let word = self.word().to_ascii_uppercase();
            match word.as_str() {
                "BLOCK" => {
                    if in_block {
                        return Err(NetSpecError::Malformed {
                            what: "block",
                            text: word,
                            reason: "blocks cannot nest".into(),
                            pos: start,
                        });
                    }
                    self.block(doc, start)?;
                }
                "POLICY" if !in_block => {
                    let policy = self.policy(start)?;
                    doc.policy = Some(policy);
                }
                "NAME" | "INPUT" if !in_block => {
                    self.expect(':', "header")?;
                    let arg = self.argument();
                    if word == "NAME" {
                        doc.name = Some(arg);
                    } else {
                        doc.input = Some(parse_input(&arg, start)?);
                    }
                }
                "CONV" | "POOL" | "LRN" | "FC" => {
                    let arg = if word == "LRN" {
                        self.skip_inline_space();
                        if self.peek() == Some(':') {
                            self.i += 1;
                            self.argument()
                        } else {
                            let rest = self.argument();
                            if !rest.is_empty() {
                                return Err(malformed("LRN", &rest, "expected ':'", start));
                            }
                            rest
                        }
                    } else {
                        self.expect(':', layer_what(&word))?;
                        self.argument()
                    };
                    let (layer, count) = parse_layer(&word, &arg, start)?;
                    for _ in 0..count {
                        doc.layers.push(layer.clone());
                        doc.positions.push(start);
                    }
                }
                _ => {
                    return Err(NetSpecError::UnknownLayer {
                        kind: word,
                        pos: start,
                    })
                }
            }
        }
    }

    fn block(&mut self, doc: &mut Document, start: SourcePos) -> Result<(), NetSpecError> {
        self.expect('{', "block")?;
        let mut body = Document::default();
        self.items(&mut body, true)?;
        self.expect('}', "block")?;
        self.skip_inline_space();
        let rep_pos = self.pos();
        let rep = self.argument();
        let count = rep
            .strip_prefix(['x', 'X', '×'])
            .and_then(|n| n.trim().parse::<usize>().ok())
            .filter(|&n| n >= 1)
            .ok_or_else(|| malformed("block", &rep, "expected repetition 'x<N>'", rep_pos))?;
        if body.layers.is_empty() {
            return Err(malformed("block", "", "empty block", start));
        }
        for _ in 0..count {
            doc.blocks.push(ResidualBlock {
                start: doc.layers.len(),
                len: body.layers.len(),
            });
            doc.layers.extend(body.layers.iter().cloned());
            doc.positions.extend(body.positions.iter().copied());
        }
        Ok(())
    }

    fn policy(&mut self, start: SourcePos) -> Result<TrainPolicy, NetSpecError> {
        self.skip_separators();
        self.expect('{', "policy")?;
        let mut entries: Vec<(String, SourcePos)> = Vec::new();
        let mut cur = String::new();
        let mut cur_pos = self.pos();
        loop {
            let Some(c) = self.peek() else {
                return Err(malformed("policy", "", "unterminated POLICY block", start));
            };
            let here = self.pos();
            self.i += 1;
            if c == '}' || c == ';' || c == '\n' {
                if !cur.trim().is_empty() {
                    entries.push((cur.trim().to_string(), cur_pos));
                }
                cur.clear();
                if c == '}' {
                    break;
                }
                continue;
            }
            if cur.trim().is_empty() && !c.is_whitespace() {
                cur_pos = here;
            }
            cur.push(c);
        }

        let mut policy = TrainPolicy::default();
        let mut schedule = Vec::new();
        for (entry, pos) in entries {
            let bad = |reason: &str| malformed("policy", &entry, reason, pos);
            let (key, value) = entry
                .split_once('=')
                .map(|(k, v)| (k.trim().to_ascii_lowercase(), v.trim()))
                .ok_or_else(|| bad("expected key=value"))?;
            match key.as_str() {
                "lr" => {
                    let (lr, epochs) = value
                        .split_once(':')
                        .ok_or_else(|| bad("expected lr=<rate>:<epochs>"))?;
                    let lr: f64 = lr.trim().parse().map_err(|_| bad("bad learning rate"))?;
                    let epochs: usize = epochs.trim().parse().map_err(|_| bad("bad epoch count"))?;
                    schedule.push((lr, epochs));
                }
                "momentum" => policy.momentum = value.parse().map_err(|_| bad("bad number"))?,
                "decay" => policy.weight_decay = value.parse().map_err(|_| bad("bad number"))?,
                "init" => {
                    policy.init = value.parse::<InitScheme>().map_err(|e| bad(&e))?;
                }
                "batch" => policy.batch_size = value.parse().map_err(|_| bad("bad integer"))?,
                "mirror" => {
                    policy.mirror = match value {
                        "0" => false,
                        "1" => true,
                        _ => return Err(bad("mirror must be 0 or 1")),
                    }
                }
                "crop" => {
                    let n: usize = value.parse().map_err(|_| bad("bad integer"))?;
                    policy.crop = (n > 0).then_some(n);
                }
                "pad" => policy.pad = value.parse().map_err(|_| bad("bad integer"))?,
                _ => return Err(bad("unknown policy key")),
            }
        }
        if !schedule.is_empty() {
            policy.schedule = schedule;
        }
        policy
            .validate()
            .map_err(|reason| malformed("policy", "POLICY", &reason, start))?;
        Ok(policy)
    }
}

fn layer_what(word: &str) -> &'static str {
    match word {
        "CONV" => "layer triple",
        "POOL" => "pool",
        "FC" => "fully-connected layer",
        _ => "layer",
    }
}

fn malformed(what: &'static str, text: &str, reason: &str, pos: SourcePos) -> NetSpecError {
    NetSpecError::Malformed {
        what,
        text: text.to_string(),
        reason: reason.to_string(),
        pos,
    }
}

fn split_x(s: &str) -> Vec<&str> {
    s.split(['x', 'X', '×']).map(str::trim).collect()
}

fn parse_input(arg: &str, pos: SourcePos) -> Result<Shape, NetSpecError> {
    let dims: Option<Vec<usize>> = split_x(arg)
        .iter()
        .map(|d| d.parse().ok().filter(|&n: &usize| n > 0))
        .collect();
    match dims.as_deref() {
        Some(&[n]) => Ok([n, 1, 1]),
        Some(&[c, h, w]) => Ok([c, h, w]),
        _ => Err(malformed("input", arg, "expected <c>x<h>x<w> or <n>", pos)),
    }
}

fn positive(s: &str) -> Option<usize> {
    s.trim().parse().ok().filter(|&n: &usize| n > 0)
}

fn parse_width(s: &str) -> Option<Width> {
    match s.trim() {
        "c" => Some(Width::Classes),
        other => positive(other).map(Width::Fixed),
    }
}

/// Parses one layer argument; returns the layer and its repetition count.
fn parse_layer(
    word: &str,
    arg: &str,
    pos: SourcePos,
) -> Result<(LayerSpec, usize), NetSpecError> {
    match word {
        "CONV" => {
            let triple_err = |reason: &str| NetSpecError::MalformedTriple {
                text: arg.to_string(),
                reason: reason.to_string(),
                pos,
            };
            let mut parts = arg.split(',');
            let triple = split_x(parts.next().unwrap_or(""));
            let [n, f, k] = triple.as_slice() else {
                return Err(triple_err("expected <layers>x<filters>x<kernel>"));
            };
            let count = positive(n).ok_or_else(|| triple_err("bad layer count"))?;
            let filters = parse_width(f).ok_or_else(|| triple_err("bad filter count"))?;
            let kernel = positive(k).ok_or_else(|| triple_err("bad kernel size"))?;
            let (mut stride, mut pad, mut groups) = (1, kernel / 2, 1);
            for opt in parts {
                let (key, value) = opt
                    .split_once('=')
                    .ok_or_else(|| triple_err("option must be key=value"))?;
                let value: usize = value
                    .trim()
                    .parse()
                    .map_err(|_| triple_err("option value must be an integer"))?;
                match key.trim() {
                    "s" if value > 0 => stride = value,
                    "p" => pad = value,
                    "g" if value > 0 => groups = value,
                    _ => return Err(triple_err("unknown or invalid option")),
                }
            }
            let conv = LayerSpec::Conv {
                filters,
                kernel,
                stride,
                pad,
                groups,
            };
            Ok((conv, count))
        }
        "POOL" => {
            let parts: Vec<&str> = arg.split(',').map(str::trim).collect();
            let bad = |reason: &str| malformed("pool", arg, reason, pos);
            let [w, s, mode] = parts.as_slice() else {
                return Err(bad("expected <window>,<stride>,<MAX|AVE>"));
            };
            let window = positive(w).ok_or_else(|| bad("bad window"))?;
            let stride = positive(s).ok_or_else(|| bad("bad stride"))?;
            let kind = match mode.to_ascii_uppercase().as_str() {
                "MAX" => PoolKind::Max,
                "AVE" | "AVG" => PoolKind::Average,
                _ => return Err(bad("pool type must be MAX or AVE")),
            };
            Ok((
                LayerSpec::Pool {
                    window,
                    stride,
                    kind,
                },
                1,
            ))
        }
        "LRN" => {
            if arg.is_empty() {
                return Ok((LayerSpec::Lrn(LrnParams::default()), 1));
            }
            let bad = || malformed("LRN", arg, "expected <n>,<alpha>,<beta>,<k>", pos);
            let parts: Vec<&str> = arg.split(',').map(str::trim).collect();
            let [n, a, b, k] = parts.as_slice() else {
                return Err(bad());
            };
            let p = LrnParams {
                size: positive(n).ok_or_else(bad)?,
                alpha: a.parse().map_err(|_| bad())?,
                beta: b.parse().map_err(|_| bad())?,
                k: k.parse().map_err(|_| bad())?,
            };
            Ok((LayerSpec::Lrn(p), 1))
        }
        "FC" => {
            let width = parse_width(arg)
                .ok_or_else(|| malformed("fully-connected layer", arg, "expected <width|c>", pos))?;
            Ok((LayerSpec::Fc { width }, 1))
        }
        _ => unreachable!("caller filters layer keywords"),
    }
}
