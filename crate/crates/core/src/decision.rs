//! Parsing of raw refiner / labeler replies.
//!
//! Replies follow the `<reason>...</reason><answer>...</answer>` convention.
//! Text outside the tags is tolerated and discarded. When no `<answer>` block
//! is present the whole reply (minus any reason block) is the answer.

use crate::error::CoreError;
use crate::types::{is_keep_sentinel, Action, PromptText, RefinementDecision};

/// Returns the inner text of the first `<tag>...</tag>` block and the input
/// with that block removed.
fn extract_block<'a>(
    raw: &'a str,
    tag: &'static str,
) -> Result<Option<(&'a str, String)>, CoreError> {
    let open = format!("<{tag}>");
    let close = format!("</{tag}>");
    let Some(start) = raw.find(&open) else {
        return Ok(None);
    };
    let body_start = start + open.len();
    let Some(rel_end) = raw[body_start..].find(&close) else {
        return Err(CoreError::MalformedTags(tag));
    };
    let body_end = body_start + rel_end;
    let mut rest = String::with_capacity(raw.len());
    rest.push_str(&raw[..start]);
    rest.push_str(&raw[body_end + close.len()..]);
    Ok(Some((&raw[body_start..body_end], rest)))
}

/// Strips one layer of matching quotes or backticks, e.g. `'keep'`.
fn unquote(s: &str) -> &str {
    for q in ['\'', '"', '`'] {
        if s.len() >= 2 && s.starts_with(q) && s.ends_with(q) {
            return s[1..s.len() - 1].trim();
        }
    }
    s
}

pub fn parse_decision(raw: &str) -> Result<RefinementDecision, CoreError> {
    let (reason, rest) = match extract_block(raw, "reason")? {
        Some((body, rest)) => (Some(body.trim().to_string()), rest),
        None => (None, raw.to_string()),
    };
    let answer = match extract_block(&rest, "answer")? {
        Some((body, _)) => body.trim().to_string(),
        None => rest.trim().to_string(),
    };
    let answer = unquote(&answer);
    if answer.is_empty() {
        return Err(CoreError::EmptyDecision);
    }
    let action = if is_keep_sentinel(answer) {
        Action::Keep
    } else {
        Action::Refine(PromptText::refined(answer)?)
    };
    Ok(RefinementDecision { action, reason })
}
