//! Penn Treebank bracketed-tree reader and clause-based sub-event segmentation.
//!
//! Each word is assigned to the lowest clause node (S, SBAR, SINV, FRAG) that
//! dominates it. Every clause with at least two assigned words becomes a
//! sub-event; words whose clause was too small stay unassigned.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{CtgError, Result};

/// Clause-level tags that open a sub-event.
pub const CLAUSE_TAGS: [&str; 4] = ["S", "SBAR", "SINV", "FRAG"];

/// Upper bound on sub-events per query; also the attention head count.
pub const MAX_SUBEVENTS: usize = 6;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PennTree {
    Node { label: String, children: Vec<PennTree> },
    Leaf(String),
}

impl PennTree {
    pub fn leaves(&self) -> Vec<&str> {
        let mut out = Vec::new();
        self.collect_leaves(&mut out);
        out
    }

    fn collect_leaves<'a>(&'a self, out: &mut Vec<&'a str>) {
        match self {
            PennTree::Leaf(w) => out.push(w),
            PennTree::Node { children, .. } => children.iter().for_each(|c| c.collect_leaves(out)),
        }
    }

    pub fn label(&self) -> Option<&str> {
        match self {
            PennTree::Node { label, .. } => Some(label),
            PennTree::Leaf(_) => None,
        }
    }
}

impl fmt::Display for PennTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PennTree::Leaf(w) => f.write_str(w),
            PennTree::Node { label, children } => {
                write!(f, "({label}")?;
                for c in children {
                    write!(f, " {c}")?;
                }
                f.write_str(")")
            }
        }
    }
}

/// True when the label's base category (before any `-` or `=` function tag)
/// is a clause tag. `-NONE-` and similar labels starting with `-` never match.
pub fn is_clause_label(label: &str) -> bool {
    let base = label.split(['-', '=']).next().unwrap_or("");
    CLAUSE_TAGS.contains(&base)
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Tok<'a> {
    Open,
    Close,
    Atom(&'a str),
}

fn tokenize(text: &str) -> Vec<(usize, Tok<'_>)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, ch) in text.char_indices() {
        let delim = ch == '(' || ch == ')' || ch.is_whitespace();
        if delim {
            if let Some(s) = start.take() {
                out.push((s, Tok::Atom(&text[s..i])));
            }
            match ch {
                '(' => out.push((i, Tok::Open)),
                ')' => out.push((i, Tok::Close)),
                _ => {}
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        out.push((s, Tok::Atom(&text[s..])));
    }
    out
}

/// Parses one bracketed tree. An unlabeled outer wrapper, as in `( (S ...) )`,
/// becomes a node with an empty label.
pub fn parse_ptb(text: &str) -> Result<PennTree> {
    let toks = tokenize(text);
    if toks.is_empty() {
        return Err(parse_err(0, "empty input"));
    }
    let mut pos = 0;
    let tree = parse_node(&toks, &mut pos, text.len())?;
    if let Some(&(off, _)) = toks.get(pos) {
        return Err(parse_err(off, "unexpected content after tree"));
    }
    Ok(tree)
}

fn parse_node(toks: &[(usize, Tok<'_>)], pos: &mut usize, end: usize) -> Result<PennTree> {
    let Some(&(open_off, ref t)) = toks.get(*pos) else {
        return Err(parse_err(end, "unexpected end of input"));
    };
    if *t != Tok::Open {
        return Err(parse_err(open_off, "expected '('"));
    }
    *pos += 1;
    let label = match toks.get(*pos) {
        Some((_, Tok::Atom(a))) => {
            *pos += 1;
            a.to_string()
        }
        Some((_, Tok::Open)) => String::new(),
        Some(&(off, Tok::Close)) => return Err(parse_err(off, "empty node")),
        None => return Err(parse_err(end, "unexpected end of input")),
    };
    let mut children = Vec::new();
    loop {
        match toks.get(*pos) {
            None => return Err(parse_err(end, "unexpected end of input: unbalanced brackets")),
            Some((_, Tok::Close)) => {
                *pos += 1;
                break;
            }
            Some((_, Tok::Open)) => children.push(parse_node(toks, pos, end)?),
            Some((_, Tok::Atom(a))) => {
                children.push(PennTree::Leaf(a.to_string()));
                *pos += 1;
            }
        }
    }
    if children.is_empty() {
        return Err(parse_err(open_off, format!("node '{label}' has no children")));
    }
    Ok(PennTree::Node { label, children })
}

fn parse_err(offset: usize, msg: impl Into<String>) -> CtgError {
    CtgError::Parse {
        offset,
        msg: msg.into(),
    }
}

/// Per-sub-event word masks over the `n_tokens` words of a query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubEventMasks {
    pub n_tokens: usize,
    pub masks: Vec<Vec<f64>>,
}

impl SubEventMasks {
    pub fn k(&self) -> usize {
        self.masks.len()
    }

    /// A single sub-event covering every word.
    pub fn whole_query(n_tokens: usize) -> Self {
        SubEventMasks {
            n_tokens,
            masks: vec![vec![1.0; n_tokens]],
        }
    }

    /// Word indices of sub-event `k` with a nonzero mask entry.
    pub fn members(&self, k: usize) -> Vec<usize> {
        self.masks[k]
            .iter()
            .enumerate()
            .filter(|(_, &m)| m != 0.0)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Assigns every word to its lowest clause ancestor; `None` when no clause
/// dominates the word.
fn lowest_clause_assignment(tree: &PennTree) -> Vec<Option<usize>> {
    fn walk(t: &PennTree, current: Option<usize>, next_id: &mut usize, out: &mut Vec<Option<usize>>) {
        match t {
            PennTree::Leaf(_) => out.push(current),
            PennTree::Node { label, children } => {
                let here = if is_clause_label(label) {
                    let id = *next_id;
                    *next_id += 1;
                    Some(id)
                } else {
                    current
                };
                for c in children {
                    walk(c, here, next_id, out);
                }
            }
        }
    }
    let mut out = Vec::new();
    walk(tree, None, &mut 0, &mut out);
    out
}

pub fn segment_clauses(tree: &PennTree) -> SubEventMasks {
    let assign = lowest_clause_assignment(tree);
    let n = assign.len();

    // clause id -> assigned word positions, in order of first word
    let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
    for (i, a) in assign.iter().enumerate() {
        if let Some(c) = a {
            match groups.iter_mut().find(|(id, _)| id == c) {
                Some((_, words)) => words.push(i),
                None => groups.push((*c, vec![i])),
            }
        }
    }
    let mut kept: Vec<Vec<usize>> = groups.into_iter().map(|(_, w)| w).filter(|w| w.len() >= 2).collect();

    if kept.len() > MAX_SUBEVENTS {
        // most words first; stable sort keeps the earlier clause on ties
        kept.sort_by(|a, b| b.len().cmp(&a.len()));
        kept.truncate(MAX_SUBEVENTS);
        kept.sort_by_key(|w| w[0]);
    }
    if kept.is_empty() {
        return SubEventMasks::whole_query(n);
    }
    let masks = kept
        .iter()
        .map(|words| {
            let mut m = vec![0.0; n];
            words.iter().for_each(|&i| m[i] = 1.0);
            m
        })
        .collect();
    SubEventMasks { n_tokens: n, masks }
}

pub fn count_clauses(tree: &PennTree) -> usize {
    match tree {
        PennTree::Leaf(_) => 0,
        PennTree::Node { label, children } => {
            usize::from(is_clause_label(label)) + children.iter().map(count_clauses).sum::<usize>()
        }
    }
}
