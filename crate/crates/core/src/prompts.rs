//! Versioned prompt templates with `{{placeholder}}` substitution.
//!
//! Template files look like:
//!
//! ```text
//! # version: 1
//! [system]
//! ...
//! [user]
//! ... {{placeholder}} ...
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::llm::ChatMessage;

#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error("cannot read template {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("template {name}: {message}")]
    Malformed { name: String, message: String },
    #[error("template {name} lacks required placeholder {{{{{placeholder}}}}}")]
    MissingPlaceholder { name: String, placeholder: String },
    #[error("template {name}: placeholder {{{{{placeholder}}}}} is unbound")]
    Unbound { name: String, placeholder: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateName {
    /// Mapping validation (confirm / revise / reject).
    Select,
    /// Disease-relevant feature selection.
    NodeSelect,
    /// Candidate path pruning.
    PathSelect,
    /// Chain-of-thought generation.
    CotGen,
}

impl TemplateName {
    pub const ALL: [TemplateName; 4] = [
        TemplateName::Select,
        TemplateName::NodeSelect,
        TemplateName::PathSelect,
        TemplateName::CotGen,
    ];

    pub fn file_stem(self) -> &'static str {
        match self {
            TemplateName::Select => "select",
            TemplateName::NodeSelect => "node_select",
            TemplateName::PathSelect => "path_select",
            TemplateName::CotGen => "cot_gen",
        }
    }

    pub fn required(self) -> &'static [&'static str] {
        match self {
            TemplateName::Select => &[
                "code",
                "description",
                "proposed_id",
                "proposed_name",
                "proposed_type",
                "score",
                "candidates",
            ],
            TemplateName::NodeSelect => &["disease_name", "disease_node", "k_node", "features"],
            TemplateName::PathSelect => &["disease_name", "k_path", "paths"],
            TemplateName::CotGen => &[
                "disease_name",
                "codes_present",
                "relevance_present",
                "relevance_absent",
                "paths",
                "label_block",
            ],
        }
    }

    fn builtin(self) -> &'static str {
        match self {
            TemplateName::Select => include_str!("../prompts/select.txt"),
            TemplateName::NodeSelect => include_str!("../prompts/node_select.txt"),
            TemplateName::PathSelect => include_str!("../prompts/path_select.txt"),
            TemplateName::CotGen => include_str!("../prompts/cot_gen.txt"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub name: TemplateName,
    pub version: String,
    pub system: String,
    pub user: String,
}

fn placeholders(text: &str) -> BTreeSet<&str> {
    let mut out = BTreeSet::new();
    let mut rest = text;
    while let Some(start) = rest.find("{{") {
        let after = &rest[start + 2..];
        match after.find("}}") {
            Some(end) => {
                let name = after[..end].trim();
                if !name.is_empty() && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                    out.insert(name);
                }
                rest = &after[end + 2..];
            }
            None => break,
        }
    }
    out
}

fn substitute(name: TemplateName, text: &str, vars: &BTreeMap<&str, String>) -> Result<String, PromptError> {
    let mut out = String::with_capacity(text.len() * 2);
    let mut rest = text;
    while let Some(start) = rest.find("{{") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let Some(end) = after.find("}}") else {
            out.push_str(&rest[start..]);
            rest = "";
            break;
        };
        let key = after[..end].trim();
        match vars.get(key) {
            Some(value) => out.push_str(value),
            None => {
                return Err(PromptError::Unbound {
                    name: name.file_stem().into(),
                    placeholder: key.into(),
                })
            }
        }
        rest = &after[end + 2..];
    }
    out.push_str(rest);
    Ok(out)
}

impl PromptTemplate {
    pub fn parse(name: TemplateName, source: &str) -> Result<Self, PromptError> {
        let malformed = |message: &str| PromptError::Malformed {
            name: name.file_stem().into(),
            message: message.into(),
        };
        let mut version = None;
        let mut section: Option<&str> = None;
        let mut system = Vec::new();
        let mut user = Vec::new();
        for line in source.lines() {
            match line.trim_end() {
                "[system]" => section = Some("system"),
                "[user]" => section = Some("user"),
                l if section.is_none() && l.starts_with('#') => {
                    if let Some(v) = l.trim_start_matches('#').trim().strip_prefix("version:") {
                        version = Some(v.trim().to_string());
                    }
                }
                l if section.is_none() && l.trim().is_empty() => {}
                _ => match section {
                    Some("system") => system.push(line),
                    Some(_) => user.push(line),
                    None => return Err(malformed("text before the [system] section")),
                },
            }
        }
        let version = version.ok_or_else(|| malformed("missing `# version:` header"))?;
        if user.is_empty() {
            return Err(malformed("missing [user] section"));
        }
        let template = PromptTemplate {
            name,
            version,
            system: system.join("\n").trim().to_string(),
            user: user.join("\n").trim_end().to_string(),
        };
        let present: BTreeSet<&str> = placeholders(&template.system)
            .union(&placeholders(&template.user))
            .copied()
            .collect();
        for required in name.required() {
            if !present.contains(required) {
                return Err(PromptError::MissingPlaceholder {
                    name: name.file_stem().into(),
                    placeholder: (*required).into(),
                });
            }
        }
        Ok(template)
    }

    pub fn builtin(name: TemplateName) -> Self {
        PromptTemplate::parse(name, name.builtin()).expect("bundled templates are valid")
    }

    /// Render to a (system, user) message pair. Trailing whitespace of the
    /// user message is trimmed so empty trailing blocks leave no residue.
    pub fn render(&self, vars: &BTreeMap<&str, String>) -> Result<Vec<ChatMessage>, PromptError> {
        let user = substitute(self.name, &self.user, vars)?;
        let mut messages = Vec::with_capacity(2);
        if !self.system.is_empty() {
            messages.push(ChatMessage::system(substitute(self.name, &self.system, vars)?));
        }
        messages.push(ChatMessage::user(user.trim_end()));
        Ok(messages)
    }
}

/// The four pipeline templates.
#[derive(Debug, Clone)]
pub struct PromptSet {
    templates: BTreeMap<TemplateName, PromptTemplate>,
}

impl Default for PromptSet {
    fn default() -> Self {
        PromptSet {
            templates: TemplateName::ALL
                .iter()
                .map(|&n| (n, PromptTemplate::builtin(n)))
                .collect(),
        }
    }
}

impl PromptSet {
    /// Bundled templates, overridden by `{dir}/{name}.txt` where such files exist.
    pub fn load(dir: Option<&Path>) -> Result<Self, PromptError> {
        let mut set = PromptSet::default();
        if let Some(dir) = dir {
            for name in TemplateName::ALL {
                let path = dir.join(format!("{}.txt", name.file_stem()));
                if path.exists() {
                    let text = std::fs::read_to_string(&path).map_err(|source| PromptError::Io {
                        path: path.clone(),
                        source,
                    })?;
                    set.templates.insert(name, PromptTemplate::parse(name, &text)?);
                }
            }
        }
        Ok(set)
    }

    pub fn get(&self, name: TemplateName) -> &PromptTemplate {
        &self.templates[&name]
    }

    pub fn versions(&self) -> BTreeMap<&'static str, String> {
        self.templates
            .iter()
            .map(|(n, t)| (n.file_stem(), t.version.clone()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_templates_parse() {
        let set = PromptSet::default();
        for name in TemplateName::ALL {
            assert_eq!(set.get(name).version, "1");
        }
        assert_eq!(set.versions().len(), 4);
    }

    #[test]
    fn missing_required_placeholder_rejected() {
        let src = "# version: 2\n[system]\nsys\n[user]\nDisease {{disease_name}} {{k_path}}\n";
        let err = PromptTemplate::parse(TemplateName::PathSelect, src).unwrap_err();
        assert!(matches!(err, PromptError::MissingPlaceholder { ref placeholder, .. } if placeholder == "paths"));
    }

    #[test]
    fn unbound_placeholder_is_an_error() {
        let t = PromptTemplate::builtin(TemplateName::PathSelect);
        let vars: BTreeMap<&str, String> = [("disease_name", "x".to_string())].into_iter().collect();
        assert!(matches!(t.render(&vars), Err(PromptError::Unbound { .. })));
    }

    #[test]
    fn renders_system_and_user() {
        let src = "# version: 3\n[system]\nBe {{tone}}.\n[user]\n{{disease_name}} / {{k_path}} / {{paths}}\n{{extra}}\n";
        let t = PromptTemplate::parse(TemplateName::PathSelect, src).unwrap();
        let vars: BTreeMap<&str, String> = [
            ("tone", "brief".to_string()),
            ("disease_name", "Shock".to_string()),
            ("k_path", "5".to_string()),
            ("paths", "[1] a".to_string()),
            ("extra", String::new()),
        ]
        .into_iter()
        .collect();
        let m = t.render(&vars).unwrap();
        assert_eq!(m[0].content, "Be brief.");
        assert_eq!(m[1].content, "Shock / 5 / [1] a");
    }

    #[test]
    fn directory_overrides_one_template() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join("path_select.txt"),
            "# version: 9\n[system]\ns\n[user]\n{{disease_name}} {{k_path}} {{paths}}\n",
        )
        .unwrap();
        let set = PromptSet::load(Some(dir.path())).unwrap();
        assert_eq!(set.get(TemplateName::PathSelect).version, "9");
        assert_eq!(set.get(TemplateName::CotGen).version, "1");
    }
}
