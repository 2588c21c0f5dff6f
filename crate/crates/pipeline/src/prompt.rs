//! Judgment prompt template and rendering.

use serde::{Deserialize, Serialize};

use crate::error::{PipelineError, Result};

/// Sentence every judgment prompt must carry so replies stay binary.
pub const REQUIRED_INSTRUCTION: &str = "Respond only with 'Yes' or 'No'";

pub const DEFAULT_TEMPLATE: &str = "You are a meticulous QA evaluation agent. Your task is to \
determine if a retrieved question-answer pair fully resolves the user's query. Consider whether \
the QA pair addresses all parts of the query and maintains semantic equivalence. Think about how \
you could measure whether the response makes progress toward fully answering the user's \
question. Respond only with 'Yes' or 'No', no explanation.

User Query: {user_query}

Retrieved Question: {candidate_Q}

Retrieved Answer: {candidate_A}

{document}

Output 'Yes' if the retrieved QA is a perfect match, otherwise 'No'.
";

pub const DEFAULT_DOCUMENT_HEADER: &str = "Supporting Document:";

const SLOTS: [&str; 4] = ["user_query", "candidate_Q", "candidate_A", "document"];

/// A template with `{user_query}`, `{candidate_Q}`, `{candidate_A}` and an
/// optional `{document}` slot.
///
/// The `{document}` slot must sit on a line of its own. With a document it is
/// replaced by the header line followed by the text; without one the line and
/// the blank line after it are dropped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgmentPrompt {
    pub template: String,
    #[serde(default = "default_header")]
    pub document_header: String,
}

fn default_header() -> String {
    DEFAULT_DOCUMENT_HEADER.to_string()
}

impl Default for JudgmentPrompt {
    fn default() -> Self {
        JudgmentPrompt {
            template: DEFAULT_TEMPLATE.to_string(),
            document_header: default_header(),
        }
    }
}

enum Piece<'a> {
    Text(&'a str),
    Slot(usize),
}

fn parse(template: &str) -> Vec<Piece<'_>> {
    let mut out = Vec::new();
    let mut rest = template;
    while let Some(start) = rest.find('{') {
        let Some(len) = rest[start..].find('}') else {
            out.push(Piece::Text(rest));
            return out;
        };
        let name = &rest[start + 1..start + len];
        match SLOTS.iter().position(|s| *s == name) {
            Some(slot) => {
                out.push(Piece::Text(&rest[..start]));
                out.push(Piece::Slot(slot));
            }
            None => out.push(Piece::Text(&rest[..=start + len])),
        }
        rest = &rest[start + len + 1..];
    }
    out.push(Piece::Text(rest));
    out
}

impl JudgmentPrompt {
    pub fn new(template: impl Into<String>) -> Result<Self> {
        let p = JudgmentPrompt {
            template: template.into(),
            document_header: default_header(),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.template.contains(REQUIRED_INSTRUCTION) {
            return Err(PipelineError::Template(format!(
                "must contain the instruction {REQUIRED_INSTRUCTION:?}"
            )));
        }
        let pieces = parse(&self.template);
        for (slot, name) in SLOTS.iter().enumerate().take(3) {
            if !pieces.iter().any(|p| matches!(p, Piece::Slot(s) if *s == slot)) {
                return Err(PipelineError::Template(format!("missing slot {{{name}}}")));
            }
        }
        for line in self.template.lines() {
            if line.contains("{document}") && line.trim() != "{document}" {
                return Err(PipelineError::Template(
                    "{document} must be alone on its line".into(),
                ));
            }
        }
        Ok(())
    }

    /// Fills the slots in one pass, so slot-like text inside the values is kept verbatim.
    pub fn render(
        &self,
        query: &str,
        candidate_q: &str,
        candidate_a: &str,
        document: Option<&str>,
    ) -> Result<String> {
        for (value, name) in [
            (query, "query"),
            (candidate_q, "candidate question"),
            (candidate_a, "candidate answer"),
        ] {
            if value.trim().is_empty() {
                return Err(PipelineError::EmptyField(name));
            }
        }
        self.validate()?;
        let document = document.filter(|d| !d.trim().is_empty());
        let template = match document {
            Some(_) => self.template.clone(),
            None => strip_document_line(&self.template),
        };
        let doc_block = document
            .map(|d| format!("{}\n{}", self.document_header, d))
            .unwrap_or_default();
        let mut out = String::with_capacity(template.len() + query.len() + candidate_a.len());
        for piece in parse(&template) {
            match piece {
                Piece::Text(t) => out.push_str(t),
                Piece::Slot(0) => out.push_str(query),
                Piece::Slot(1) => out.push_str(candidate_q),
                Piece::Slot(2) => out.push_str(candidate_a),
                Piece::Slot(_) => out.push_str(&doc_block),
            }
        }
        Ok(out)
    }
}

fn strip_document_line(template: &str) -> String {
    let lines: Vec<&str> = template.split('\n').collect();
    let mut out = Vec::with_capacity(lines.len());
    let mut skip_blank = false;
    for line in lines {
        if line.trim() == "{document}" {
            skip_blank = true;
            continue;
        }
        if skip_blank && line.trim().is_empty() {
            skip_blank = false;
            continue;
        }
        skip_blank = false;
        out.push(line);
    }
    out.join("\n")
}
