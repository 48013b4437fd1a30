use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{AltError, Result};

/// A versioned chat prompt with `{{slot}}` placeholders.
///
/// File format: `key: value` header lines (`name`, `version`, `slots`), then
/// `---system` and `---user` sections.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub name: String,
    pub version: u32,
    pub slots: Vec<String>,
    pub system: String,
    pub user: String,
}

impl PromptTemplate {
    pub fn parse(text: &str) -> Result<Self> {
        let mut header = BTreeMap::new();
        let mut sections: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        let mut current: Option<&str> = None;
        for line in text.lines() {
            if let Some(name) = line.strip_prefix("---") {
                let name = name.trim();
                if name != "system" && name != "user" {
                    return Err(AltError::Format(format!("unknown template section {name:?}")));
                }
                current = Some(if name == "system" { "system" } else { "user" });
                sections.entry(current.unwrap()).or_default();
                continue;
            }
            match current {
                Some(s) => sections.get_mut(s).unwrap().push(line),
                None if line.trim().is_empty() => {}
                None => {
                    let (k, v) = line
                        .split_once(':')
                        .ok_or_else(|| AltError::Format(format!("bad template header line {line:?}")))?;
                    header.insert(k.trim().to_string(), v.trim().to_string());
                }
            }
        }
        let get = |k: &str| {
            header
                .get(k)
                .cloned()
                .ok_or_else(|| AltError::Format(format!("template header lacks {k:?}")))
        };
        let join = |s: &str| sections.get(s).map(|l| l.join("\n").trim().to_string());
        let t = Self {
            name: get("name")?,
            version: get("version")?
                .parse()
                .map_err(|_| AltError::Format("template version must be an integer".into()))?,
            slots: get("slots")?
                .split(',')
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .collect(),
            system: join("system").unwrap_or_default(),
            user: join("user").ok_or_else(|| AltError::Format("template lacks a user section".into()))?,
        };
        for slot in &t.slots {
            let marker = format!("{{{{{slot}}}}}");
            if !t.user.contains(&marker) && !t.system.contains(&marker) {
                return Err(AltError::Format(format!("slot {slot:?} is declared but unused")));
            }
        }
        Ok(t)
    }

    pub fn id(&self) -> String {
        format!("{}.v{}", self.name, self.version)
    }

    /// Substitute every declared slot. Missing or unknown values are errors.
    pub fn render(&self, values: &[(&str, &str)]) -> Result<(String, String)> {
        for (k, _) in values {
            if !self.slots.iter().any(|s| s == k) {
                return Err(AltError::validation(format!("template {} has no slot {k:?}", self.id())));
            }
        }
        let mut system = self.system.clone();
        let mut user = self.user.clone();
        for slot in &self.slots {
            let value = values
                .iter()
                .find(|(k, _)| k == slot)
                .map(|(_, v)| *v)
                .ok_or_else(|| AltError::validation(format!("no value for slot {slot:?}")))?;
            let marker = format!("{{{{{slot}}}}}");
            system = system.replace(&marker, value);
            user = user.replace(&marker, value);
        }
        Ok((system, user))
    }
}

const BUILTIN: [&str; 5] = [
    include_str!("../../templates/categorical_dialogue.v1.txt"),
    include_str!("../../templates/categorical_toxicity.v1.txt"),
    include_str!("../../templates/unconstrained_summarization.v1.txt"),
    include_str!("../../templates/unconstrained_toxicity.v1.txt"),
    include_str!("../../templates/judge.v1.txt"),
];

/// Templates addressable as `name.vN`, or by bare `name` for the highest version.
#[derive(Debug, Clone, Default)]
pub struct TemplateRegistry {
    templates: BTreeMap<(String, u32), PromptTemplate>,
}

impl TemplateRegistry {
    pub fn builtin() -> Self {
        let mut r = Self::default();
        for text in BUILTIN {
            r.insert(PromptTemplate::parse(text).expect("builtin template"));
        }
        r
    }

    pub fn insert(&mut self, t: PromptTemplate) {
        self.templates.insert((t.name.clone(), t.version), t);
    }

    /// Add every `*.txt` template in `dir`, replacing builtins with the same id.
    pub fn load_dir(&mut self, dir: &Path) -> Result<()> {
        let entries = std::fs::read_dir(dir).map_err(|e| AltError::io(dir, e))?;
        let mut paths: Vec<_> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
        paths.sort();
        for p in paths.into_iter().filter(|p| p.extension().is_some_and(|e| e == "txt")) {
            let text = std::fs::read_to_string(&p).map_err(|e| AltError::io(&p, e))?;
            self.insert(PromptTemplate::parse(&text)?);
        }
        Ok(())
    }

    pub fn get(&self, id: &str) -> Result<&PromptTemplate> {
        let found = match id.rsplit_once(".v").and_then(|(n, v)| Some((n, v.parse::<u32>().ok()?))) {
            Some((name, version)) => self.templates.get(&(name.to_string(), version)),
            None => self
                .templates
                .range((id.to_string(), 0)..=(id.to_string(), u32::MAX))
                .next_back()
                .map(|(_, t)| t),
        };
        found.ok_or_else(|| AltError::validation(format!("unknown template {id:?}")))
    }

    pub fn ids(&self) -> Vec<String> {
        self.templates.values().map(PromptTemplate::id).collect()
    }
}
