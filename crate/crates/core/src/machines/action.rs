//! Wire format for model actions: exactly one fenced block tagged `test`,
//! `edit`, `approve`, or `select:N`. Fences with any other tag are ignored.

use crate::types::{Action, Edit, SearchReplaceBlock, TestScript};

const SEARCH: &str = "<<<<<<< SEARCH";
const DIVIDER: &str = "=======";
const REPLACE: &str = ">>>>>>> REPLACE";

fn action_tag(tag: &str) -> bool {
    matches!(tag, "test" | "edit" | "approve") || tag.starts_with("select")
}

/// Parses the single action in `reply`; the error is a correction message.
pub fn parse_action(reply: &str) -> Result<Action, String> {
    let mut found: Vec<(String, Vec<&str>)> = Vec::new();
    let mut open: Option<(String, bool, Vec<&str>)> = None;
    for line in reply.lines() {
        let trimmed = line.trim_end();
        match open.as_mut() {
            None => {
                if let Some(tag) = trimmed.trim_start().strip_prefix("```") {
                    let tag = tag.trim().to_string();
                    let is_action = action_tag(&tag);
                    open = Some((tag, is_action, Vec::new()));
                }
            }
            Some((_, _, body)) => {
                if trimmed.trim_start() == "```" {
                    let (tag, is_action, body) = open.take().expect("open fence");
                    if is_action {
                        found.push((tag, body));
                    }
                } else {
                    body.push(line);
                }
            }
        }
    }
    if let Some((tag, true, _)) = &open {
        return Err(format!("the ```{tag} block is not closed"));
    }
    let (tag, body) = match found.len() {
        0 => return Err("no action block found".into()),
        1 => found.pop().expect("one block"),
        n => return Err(format!("found {n} action blocks; reply with exactly one")),
    };
    match tag.as_str() {
        "test" => {
            let mut script = body.join("\n");
            script.push('\n');
            if script.trim().is_empty() {
                return Err("the test block is empty".into());
            }
            Ok(Action::WriteTest(TestScript::new(script)))
        }
        "edit" => parse_edit_body(&body).map(|blocks| Action::WriteEdit(Edit::from_blocks(blocks))),
        "approve" => Ok(Action::Approve),
        other => {
            let n = other
                .strip_prefix("select:")
                .or_else(|| other.strip_prefix("select "))
                .map(str::trim)
                .ok_or_else(|| format!("`{other}` is not an action; use select:N"))?;
            n.parse::<usize>()
                .map(Action::Select)
                .map_err(|_| format!("`{n}` is not a candidate number"))
        }
    }
}

fn parse_edit_body(body: &[&str]) -> Result<Vec<SearchReplaceBlock>, String> {
    let mut blocks = Vec::new();
    let mut i = 0;
    while i < body.len() {
        let line = body[i].trim_end();
        if line.trim().is_empty() {
            i += 1;
            continue;
        }
        let path = line
            .strip_prefix(SEARCH)
            .map(str::trim)
            .ok_or_else(|| format!("expected `{SEARCH} <path>`, found `{line}`"))?;
        if path.is_empty() {
            return Err(format!("`{SEARCH}` needs a file path"));
        }
        let n = blocks.len() + 1;
        i += 1;
        let start = i;
        while i < body.len() && body[i].trim_end() != DIVIDER {
            i += 1;
        }
        if i == body.len() {
            return Err(format!("section {n} has no `{DIVIDER}` line"));
        }
        let search = body[start..i].join("\n");
        i += 1;
        let start = i;
        while i < body.len() && body[i].trim_end() != REPLACE {
            i += 1;
        }
        if i == body.len() {
            return Err(format!("section {n} has no `{REPLACE}` line"));
        }
        let replace = body[start..i].join("\n");
        i += 1;
        let block = SearchReplaceBlock::new(path, search, replace)
            .map_err(|e| format!("section {n}: {e}"))?;
        blocks.push(block);
    }
    if blocks.is_empty() {
        return Err("the edit block has no SEARCH/REPLACE sections".into());
    }
    Ok(blocks)
}

/// Renders an action back into its wire form; `parse_action` inverts it.
pub fn render_action(action: &Action) -> String {
    match action {
        Action::WriteTest(t) => format!("```test\n{}```\n", ensure_newline(&t.script_text)),
        Action::WriteEdit(e) => {
            let mut out = String::from("```edit\n");
            for b in &e.blocks {
                out.push_str(&format!(
                    "{SEARCH} {}\n{}\n{DIVIDER}\n{}{REPLACE}\n",
                    b.file_path,
                    b.search_text,
                    if b.replace_text.is_empty() {
                        String::new()
                    } else {
                        format!("{}\n", b.replace_text)
                    }
                ));
            }
            out.push_str("```\n");
            out
        }
        Action::Approve => "```approve\n```\n".into(),
        Action::Select(n) => format!("```select:{n}\n```\n"),
    }
}

fn ensure_newline(s: &str) -> String {
    if s.ends_with('\n') {
        s.to_string()
    } else {
        format!("{s}\n")
    }
}
