//! Newick serialization of semantic trees and a small general parser.
//!
//! Internal nodes are labeled `L<layer>C<cluster>`. A child's branch length
//! is the radius difference between its parent's layer and its own; document
//! leaves hang off their attachment node with length 0.

use std::fmt::Write as _;

use thiserror::Error;

use crate::tree::{NodeId, SemanticTree};

#[derive(Debug, Error, PartialEq)]
#[error("newick parse error at byte {position}: {message}")]
pub struct NewickError {
    pub position: usize,
    pub message: String,
}

/// Parsed Newick tree.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NewickNode {
    pub name: String,
    pub length: Option<f64>,
    pub children: Vec<NewickNode>,
}

impl NewickNode {
    pub fn leaf(name: &str, length: Option<f64>) -> Self {
        Self {
            name: name.to_string(),
            length,
            children: Vec::new(),
        }
    }

    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }

    /// Leaf names in left-to-right order.
    pub fn leaf_names(&self) -> Vec<&str> {
        let mut out = Vec::new();
        let mut stack = vec![self];
        while let Some(n) = stack.pop() {
            if n.is_leaf() {
                out.push(n.name.as_str());
            }
            stack.extend(n.children.iter().rev());
        }
        out
    }

    pub fn node_count(&self) -> usize {
        let mut count = 0;
        let mut stack = vec![self];
        while let Some(n) = stack.pop() {
            count += 1;
            stack.extend(n.children.iter());
        }
        count
    }

    /// Serializes this tree; names that need it are single-quoted.
    pub fn to_newick(&self) -> String {
        let mut out = String::new();
        // (node, next child index)
        let mut stack: Vec<(&NewickNode, usize)> = vec![(self, 0)];
        while let Some((node, next)) = stack.pop() {
            if next == 0 && !node.children.is_empty() {
                out.push('(');
            }
            if next < node.children.len() {
                if next > 0 {
                    out.push(',');
                }
                stack.push((node, next + 1));
                stack.push((&node.children[next], 0));
                continue;
            }
            if !node.children.is_empty() {
                out.push(')');
            }
            out.push_str(&quote_label(&node.name));
            if let Some(len) = node.length {
                write!(out, ":{len}").unwrap();
            }
        }
        out.push(';');
        out
    }
}

const RESERVED: &[char] = &['(', ')', ',', ':', ';', '[', ']', '\''];

/// Replaces Newick-reserved characters and whitespace with `_`.
pub fn sanitize_label(s: &str) -> String {
    s.chars()
        .map(|c| if RESERVED.contains(&c) || c.is_whitespace() { '_' } else { c })
        .collect()
}

fn quote_label(s: &str) -> String {
    if s.chars().any(|c| RESERVED.contains(&c) || c.is_whitespace()) {
        format!("'{}'", s.replace('\'', "''"))
    } else {
        s.to_string()
    }
}

/// Writes `tree` as Newick. With `documents`, each document becomes a leaf
/// (its sanitized external id) under its attachment node.
pub fn to_newick(tree: &SemanticTree, attachment: &[NodeId], documents: Option<&[String]>) -> String {
    let layers = tree.layers();
    let mut attached: Vec<Vec<Vec<usize>>> = layers.iter().map(|l| vec![Vec::new(); l.cluster_count]).collect();
    if documents.is_some() {
        for (i, a) in attachment.iter().enumerate() {
            attached[a.layer as usize][a.cluster as usize].push(i);
        }
    }
    enum Item {
        Open(NodeId),
        Close(NodeId, bool),
        Document(usize),
        Comma,
    }
    let mut out = String::new();
    let mut stack = vec![Item::Open(tree.root())];
    while let Some(item) = stack.pop() {
        match item {
            Item::Comma => out.push(','),
            Item::Document(doc) => {
                let name = sanitize_label(&documents.expect("documents present")[doc]);
                write!(out, "{name}:0").unwrap();
            }
            Item::Open(node) => {
                let children = tree.children(node);
                let docs = &attached[node.layer as usize][node.cluster as usize];
                let has_children = !children.is_empty() || !docs.is_empty();
                if has_children {
                    out.push('(');
                }
                stack.push(Item::Close(node, has_children));
                // Reverse push: clusters pop first, then documents, each ascending.
                let items: Vec<Item> = children
                    .into_iter()
                    .map(Item::Open)
                    .chain(docs.iter().map(|&d| Item::Document(d)))
                    .collect();
                let count = items.len();
                for (k, item) in items.into_iter().enumerate().rev() {
                    stack.push(item);
                    if k > 0 && k < count {
                        stack.push(Item::Comma);
                    }
                }
            }
            Item::Close(node, has_children) => {
                if has_children {
                    out.push(')');
                }
                write!(out, "{node}").unwrap();
                if let Some(p) = tree.parent(node) {
                    write!(out, ":{}", tree.epsilon(p) - tree.epsilon(node)).unwrap();
                }
            }
        }
    }
    out.push(';');
    out
}

/// Parses a single Newick tree terminated by `;`.
pub fn parse_newick(s: &str) -> Result<NewickNode, NewickError> {
    Parser { src: s.as_bytes(), text: s, pos: 0 }.parse()
}

struct Parser<'a> {
    src: &'a [u8],
    text: &'a str,
    pos: usize,
}

impl Parser<'_> {
    fn error<T>(&self, message: &str) -> Result<T, NewickError> {
        Err(NewickError {
            position: self.pos,
            message: message.to_string(),
        })
    }

    fn skip_ws(&mut self) -> Result<(), NewickError> {
        loop {
            match self.src.get(self.pos) {
                Some(c) if c.is_ascii_whitespace() => self.pos += 1,
                Some(b'[') => {
                    let start = self.pos;
                    match self.text[self.pos..].find(']') {
                        Some(off) => self.pos += off + 1,
                        None => {
                            self.pos = start;
                            return self.error("unterminated comment");
                        }
                    }
                }
                _ => return Ok(()),
            }
        }
    }

    fn peek(&mut self) -> Result<Option<u8>, NewickError> {
        self.skip_ws()?;
        Ok(self.src.get(self.pos).copied())
    }

    fn label(&mut self) -> Result<String, NewickError> {
        self.skip_ws()?;
        if self.src.get(self.pos) == Some(&b'\'') {
            let start = self.pos;
            self.pos += 1;
            let mut out = String::new();
            loop {
                let rest = &self.text[self.pos..];
                match rest.find('\'') {
                    None => {
                        self.pos = start;
                        return self.error("unterminated quoted label");
                    }
                    Some(off) => {
                        out.push_str(&rest[..off]);
                        self.pos += off + 1;
                        if self.src.get(self.pos) == Some(&b'\'') {
                            out.push('\'');
                            self.pos += 1;
                        } else {
                            return Ok(out);
                        }
                    }
                }
            }
        }
        let start = self.pos;
        while let Some(&c) = self.src.get(self.pos) {
            if b"(),:;[]'".contains(&c) || c.is_ascii_whitespace() {
                break;
            }
            self.pos += 1;
        }
        Ok(self.text[start..self.pos].to_string())
    }

    fn length(&mut self) -> Result<Option<f64>, NewickError> {
        if self.peek()? != Some(b':') {
            return Ok(None);
        }
        self.pos += 1;
        self.skip_ws()?;
        let start = self.pos;
        while let Some(&c) = self.src.get(self.pos) {
            if c.is_ascii_digit() || b"+-.eE".contains(&c) {
                self.pos += 1;
            } else {
                break;
            }
        }
        let raw = &self.text[start..self.pos];
        match raw.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(Some(v)),
            _ => {
                self.pos = start;
                self.error(&format!("malformed branch length {raw:?}"))
            }
        }
    }

    fn parse(mut self) -> Result<NewickNode, NewickError> {
        let mut open: Vec<Vec<NewickNode>> = Vec::new();
        'subtree: loop {
            match self.peek()? {
                Some(b'(') => {
                    self.pos += 1;
                    open.push(Vec::new());
                    continue 'subtree;
                }
                None => return self.error("unexpected end of input"),
                _ => {}
            }
            let name = self.label()?;
            let length = self.length()?;
            let mut node = NewickNode {
                name,
                length,
                children: Vec::new(),
            };
            loop {
                match self.peek()? {
                    Some(b',') => {
                        if open.is_empty() {
                            return self.error("',' outside parentheses");
                        }
                        self.pos += 1;
                        open.last_mut().unwrap().push(node);
                        continue 'subtree;
                    }
                    Some(b')') => {
                        let Some(mut children) = open.pop() else {
                            return self.error("unbalanced ')'");
                        };
                        self.pos += 1;
                        children.push(node);
                        let name = self.label()?;
                        let length = self.length()?;
                        node = NewickNode { name, length, children };
                    }
                    Some(b';') => {
                        if !open.is_empty() {
                            return self.error("unbalanced parentheses: missing ')'");
                        }
                        self.pos += 1;
                        if self.peek()?.is_some() {
                            return self.error("trailing characters after ';'");
                        }
                        return Ok(node);
                    }
                    None if !open.is_empty() => return self.error("unbalanced parentheses: missing ')'"),
                    None => return self.error("missing terminating ';'"),
                    Some(c) => return self.error(&format!("unexpected character {:?}", c as char)),
                }
            }
        }
    }
}
