//! Prompt templates with `{name}` placeholders.
//!
//! `{{` and `}}` render as literal braces. A placeholder that the caller does
//! not supply is an error, as is an unterminated `{`.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    source: String,
}

impl Template {
    pub fn new(source: impl Into<String>) -> Self {
        Self {
            source: source.into(),
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        std::fs::read_to_string(path)
            .map(Self::new)
            .map_err(|e| Error::io(path, e))
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    /// Placeholder names in order of first appearance.
    pub fn placeholders(&self) -> Result<Vec<String>> {
        let mut names = Vec::new();
        self.walk(|piece| {
            if let Piece::Placeholder(name) = piece {
                if !names.iter().any(|n| n == name) {
                    names.push(name.to_string());
                }
            }
            Ok(())
        })?;
        Ok(names)
    }

    /// Checks that every placeholder is one of `allowed`.
    pub fn check(&self, allowed: &[&str]) -> Result<()> {
        for name in self.placeholders()? {
            if !allowed.contains(&name.as_str()) {
                return Err(Error::Template(format!("unknown placeholder {{{name}}}")));
            }
        }
        Ok(())
    }

    pub fn render(&self, values: &[(&str, &str)]) -> Result<String> {
        let mut out = String::with_capacity(self.source.len());
        self.walk(|piece| {
            match piece {
                Piece::Literal(s) => out.push_str(s),
                Piece::Placeholder(name) => {
                    let value = values
                        .iter()
                        .find(|(k, _)| *k == name)
                        .map(|(_, v)| *v)
                        .ok_or_else(|| Error::Template(format!("unknown placeholder {{{name}}}")))?;
                    out.push_str(value);
                }
            }
            Ok(())
        })?;
        Ok(out)
    }

    fn walk<'a>(&'a self, mut visit: impl FnMut(Piece<'a>) -> Result<()>) -> Result<()> {
        let src = self.source.as_str();
        let mut rest = src;
        while let Some(pos) = rest.find(['{', '}']) {
            visit(Piece::Literal(&rest[..pos]))?;
            let tail = &rest[pos..];
            if let Some(after) = tail.strip_prefix("{{") {
                visit(Piece::Literal("{"))?;
                rest = after;
            } else if let Some(after) = tail.strip_prefix("}}") {
                visit(Piece::Literal("}"))?;
                rest = after;
            } else if tail.starts_with('}') {
                return Err(Error::Template("unmatched '}'".into()));
            } else {
                let close = tail
                    .find('}')
                    .ok_or_else(|| Error::Template("unterminated placeholder".into()))?;
                let name = &tail[1..close];
                if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                    return Err(Error::Template(format!("malformed placeholder {{{name}}}")));
                }
                visit(Piece::Placeholder(name))?;
                rest = &tail[close + 1..];
            }
        }
        visit(Piece::Literal(rest))
    }
}

enum Piece<'a> {
    Literal(&'a str),
    Placeholder(&'a str),
}

/// The prompt set used by the engine, the aggregators and the baselines.
#[derive(Debug, Clone)]
pub struct PromptSet {
    pub generate: Template,
    pub verify: Template,
    pub refine: Template,
    pub explore: Template,
    pub compare: Template,
    pub aggregate: Template,
    pub critique: Template,
    pub rewrite: Template,
    pub debate: Template,
    pub conform: Template,
    pub synthesize: Template,
}

impl Default for PromptSet {
    fn default() -> Self {
        Self {
            generate: Template::new(include_str!("../templates/generate.txt")),
            verify: Template::new(include_str!("../templates/verify.txt")),
            refine: Template::new(include_str!("../templates/refine.txt")),
            explore: Template::new(include_str!("../templates/explore.txt")),
            compare: Template::new(include_str!("../templates/compare.txt")),
            aggregate: Template::new(include_str!("../templates/aggregate.txt")),
            critique: Template::new(include_str!("../templates/critique.txt")),
            rewrite: Template::new(include_str!("../templates/rewrite.txt")),
            debate: Template::new(include_str!("../templates/debate.txt")),
            conform: Template::new(include_str!("../templates/conform.txt")),
            synthesize: Template::new(include_str!("../templates/synthesize.txt")),
        }
    }
}

impl PromptSet {
    /// Placeholders each template may use.
    pub const ALLOWED: [(&'static str, &'static [&'static str]); 11] = [
        ("generate", &["problem"]),
        ("verify", &["problem", "tagged_steps", "final_answer"]),
        ("refine", &["problem", "trace", "feedback"]),
        ("explore", &["problem"]),
        ("compare", &["problem", "solution_a", "solution_b"]),
        ("aggregate", &["problem", "candidates"]),
        ("critique", &["problem", "trace"]),
        ("rewrite", &["problem", "trace", "critique"]),
        ("debate", &["problem", "trace", "peer_answers"]),
        ("conform", &["problem", "trace", "majority_answer"]),
        ("synthesize", &["problem", "candidates"]),
    ];

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Template> {
        Some(match name {
            "generate" => &mut self.generate,
            "verify" => &mut self.verify,
            "refine" => &mut self.refine,
            "explore" => &mut self.explore,
            "compare" => &mut self.compare,
            "aggregate" => &mut self.aggregate,
            "critique" => &mut self.critique,
            "rewrite" => &mut self.rewrite,
            "debate" => &mut self.debate,
            "conform" => &mut self.conform,
            "synthesize" => &mut self.synthesize,
            _ => return None,
        })
    }

    pub fn validate(&mut self) -> Result<()> {
        for (name, allowed) in Self::ALLOWED {
            let template = self.get_mut(name).expect("listed template");
            template
                .check(allowed)
                .map_err(|e| Error::Template(format!("{name}: {e}")))?;
        }
        Ok(())
    }
}
