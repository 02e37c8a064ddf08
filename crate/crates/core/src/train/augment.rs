//! Semantics-preserving source augmentation: identifier renaming and
//! equivalent-expression substitution.

use std::collections::{BTreeSet, HashMap};

use rand::seq::IndexedRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::clex::{self, Token, TokenKind};
use crate::rng::{substream, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationConfig {
    /// Chance that each enabled transform is applied to a sample.
    pub p: f64,
    #[serde(default = "yes")]
    pub rename: bool,
    #[serde(default = "yes")]
    pub expr_subst: bool,
    /// Chance that each matching site is rewritten once substitution applies.
    #[serde(default = "half")]
    pub site_p: f64,
}

fn yes() -> bool {
    true
}

fn half() -> f64 {
    0.5
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            p: 0.2,
            rename: true,
            expr_subst: true,
            site_p: 0.5,
        }
    }
}

impl AugmentationConfig {
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [("p", self.p), ("site_p", self.site_p)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(format!("augmentation {name} must lie in [0, 1], got {v}"));
            }
        }
        Ok(())
    }

    /// Applies each enabled transform with probability `p`.
    pub fn apply(&self, code: &str, rng: &mut Rng) -> String {
        let mut out = code.to_string();
        if self.rename && rng.random::<f64>() < self.p {
            out = rename_with(&out, rng);
        }
        if self.expr_subst && rng.random::<f64>() < self.p {
            out = expr_subst_with(&out, rng, self.site_p);
        }
        out
    }
}

fn renamable(t: &Token<'_>) -> bool {
    t.kind == TokenKind::Identifier && !clex::is_library_name(t.text)
}

const STEMS: &[&str] = &[
    "val", "tmp", "item", "node", "buf", "ptr", "idx", "data", "obj", "cnt", "len", "cur", "arg",
    "res", "elem", "slot",
];

/// Consistent renaming of user identifiers. Keywords, library names,
/// directives and literals are left alone.
pub fn augment_rename(code: &str, seed: u64) -> String {
    rename_with(code, &mut substream(seed, "augment.rename"))
}

fn rename_with(code: &str, rng: &mut Rng) -> String {
    let toks = clex::lex(code);
    let taken: BTreeSet<&str> = toks.iter().filter(|t| t.kind == TokenKind::Identifier).map(|t| t.text).collect();
    let mut used: BTreeSet<String> = taken.iter().map(|s| s.to_string()).collect();
    let mut map: HashMap<&str, String> = HashMap::new();
    let mut out = String::with_capacity(code.len() + 16);
    for t in &toks {
        if !renamable(t) {
            out.push_str(t.text);
            continue;
        }
        let name = map.entry(t.text).or_insert_with(|| loop {
            let stem = STEMS.choose(rng).expect("non-empty");
            let cand = format!("{stem}_{}", rng.random_range(0..10_000u32));
            if !clex::is_keyword(&cand) && !clex::is_library_name(&cand) && used.insert(cand.clone()) {
                break cand;
            }
        });
        out.push_str(name);
    }
    out
}

/// Rewrites every catalogue site with probability 0.5.
pub fn augment_expr_subst(code: &str, seed: u64) -> String {
    expr_subst_with(code, &mut substream(seed, "augment.subst"), 0.5)
}

fn is_stmt_start(prev: Option<&Token<'_>>) -> bool {
    match prev {
        None => true,
        Some(t) => matches!(t.text, ";" | "{" | "}" | ")" | "else" | "do") && t.kind != TokenKind::Str,
    }
}

/// A match covering significant tokens `[start, end)` and its replacement.
struct Site {
    start: usize,
    end: usize,
    text: String,
}

fn find_sites(sig: &[Token<'_>]) -> Vec<Site> {
    let text = |i: usize| sig.get(i).map(|t| t.text);
    let ident = |i: usize| sig.get(i).is_some_and(|t| t.kind == TokenKind::Identifier);
    let operand = |i: usize| {
        sig.get(i)
            .is_some_and(|t| matches!(t.kind, TokenKind::Identifier | TokenKind::Number))
    };
    let context_ok = |start: usize, end: usize| {
        let prev = start.checked_sub(1).map(|p| &sig[p]);
        match text(end) {
            Some(";") => is_stmt_start(prev),
            Some(")") => prev.is_some_and(|p| p.text == ";"),
            _ => false,
        }
    };
    let mut sites = Vec::new();
    let mut i = 0;
    while i < sig.len() {
        let found = if ident(i) && matches!(text(i + 1), Some("++" | "--")) && context_ok(i, i + 2) {
            let op = if text(i + 1) == Some("++") { "+" } else { "-" };
            Some((2, format!("{x} = {x} {op} 1", x = sig[i].text)))
        } else if ident(i) && text(i + 1) == Some("+=") && operand(i + 2) && context_ok(i, i + 3) {
            Some((3, format!("{x} = {x} + {k}", x = sig[i].text, k = sig[i + 2].text)))
        } else if ident(i)
            && text(i + 1) == Some("=")
            && text(i + 2) == Some(sig[i].text)
            && matches!(text(i + 3), Some("+" | "-"))
            && operand(i + 4)
            && context_ok(i, i + 5)
        {
            let (x, op, k) = (sig[i].text, sig[i + 3].text, sig[i + 4].text);
            match (op, k) {
                ("+", "1") => Some((5, format!("{x}++"))),
                ("-", "1") => Some((5, format!("{x}--"))),
                ("+", _) => Some((5, format!("{x} += {k}"))),
                _ => None,
            }
        } else {
            None
        };
        match found {
            Some((len, text)) => {
                sites.push(Site { start: i, end: i + len, text });
                i += len;
            }
            None => i += 1,
        }
    }
    sites
}

fn expr_subst_with(code: &str, rng: &mut Rng, site_p: f64) -> String {
    let toks = clex::lex(code);
    let sig_pos: Vec<usize> = (0..toks.len()).filter(|&i| toks[i].kind.is_significant()).collect();
    let sig: Vec<Token<'_>> = sig_pos.iter().map(|&i| toks[i]).collect();
    let mut chosen: HashMap<usize, Site> = HashMap::new();
    for s in find_sites(&sig) {
        if rng.random::<f64>() < site_p {
            chosen.insert(sig_pos[s.start], s);
        }
    }
    let mut out = String::with_capacity(code.len() + 16);
    let mut i = 0;
    while i < toks.len() {
        if let Some(site) = chosen.get(&i) {
            out.push_str(&site.text);
            i = sig_pos[site.end - 1] + 1;
        } else {
            out.push_str(toks[i].text);
            i += 1;
        }
    }
    out
}
