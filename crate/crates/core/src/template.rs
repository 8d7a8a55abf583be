//! Prompt templates: a TOML header between `---` fences followed by a body
//! with `{name}` placeholders.
//!
//! ```text
//! ---
//! name = "enhance"
//! n = 10
//! temperature = 0.7
//! ---
//! Describe "{query}" in {n} sentences.
//! ```

use crate::genclient::{GenerationRequest, DEFAULT_TEMPERATURE};
use serde::Deserialize;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const DEFAULT_ENHANCE: &str = include_str!("../templates/enhance.txt");
pub const DEFAULT_TAGS_SCENE: &str = include_str!("../templates/tags_scene.txt");
pub const DEFAULT_TAGS_MOOD: &str = include_str!("../templates/tags_mood.txt");
pub const DEFAULT_TRIPLES: &str = include_str!("../templates/triples.txt");
pub const DEFAULT_FRAGMENT: &str = include_str!("../templates/fragment.txt");

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("{0}: {1}")]
    Io(PathBuf, #[source] std::io::Error),
    #[error("template is missing its `---` header")]
    MissingHeader,
    #[error("bad template header: {0}")]
    Header(String),
    #[error("template `{name}` must contain {{{placeholder}}} exactly once (found {found})")]
    Placeholder { name: String, placeholder: String, found: usize },
    #[error("template `{0}` has n = 0")]
    ZeroCount(String),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    name: String,
    #[serde(default = "default_n")]
    n: usize,
    #[serde(default = "default_temperature")]
    temperature: f64,
    #[serde(default = "default_max_tokens")]
    max_tokens: u32,
    #[serde(default)]
    system: Option<String>,
}

fn default_n() -> usize {
    10
}
fn default_temperature() -> f64 {
    DEFAULT_TEMPERATURE
}
fn default_max_tokens() -> u32 {
    512
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptTemplate {
    pub name: String,
    pub body: String,
    /// Target number of sentences per generation.
    pub n: usize,
    pub temperature: f64,
    pub max_tokens: u32,
    pub system: Option<String>,
}

impl PromptTemplate {
    pub fn parse(text: &str) -> Result<Self, TemplateError> {
        let text = text.strip_prefix('\u{feff}').unwrap_or(text);
        let rest = text
            .strip_prefix("---\n")
            .or_else(|| text.strip_prefix("---\r\n"))
            .ok_or(TemplateError::MissingHeader)?;
        let end = rest.find("\n---").ok_or(TemplateError::MissingHeader)?;
        let header: Header = toml::from_str(&rest[..end]).map_err(|e| TemplateError::Header(e.to_string()))?;
        let body = rest[end + 4..].trim_start_matches(['\r', '\n']).trim_end().to_string();
        if header.n == 0 {
            return Err(TemplateError::ZeroCount(header.name));
        }
        if !header.temperature.is_finite() || header.temperature < 0.0 {
            return Err(TemplateError::Header(format!("temperature {} must be finite and >= 0", header.temperature)));
        }
        Ok(PromptTemplate {
            name: header.name,
            body,
            n: header.n,
            temperature: header.temperature,
            max_tokens: header.max_tokens,
            system: header.system,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TemplateError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| TemplateError::Io(path.into(), e))?;
        Self::parse(&text)
    }

    /// Loads `<dir>/<name>.txt` when a directory is given, else the built-in
    /// default text.
    pub fn load_or_default(dir: Option<&Path>, name: &str, default: &str) -> Result<Self, TemplateError> {
        match dir {
            Some(d) => Self::load(d.join(format!("{name}.txt"))),
            None => Self::parse(default),
        }
    }

    pub fn placeholder_count(&self, placeholder: &str) -> usize {
        self.body.matches(&format!("{{{placeholder}}}")).count()
    }

    pub fn require_once(&self, placeholder: &str) -> Result<(), TemplateError> {
        match self.placeholder_count(placeholder) {
            1 => Ok(()),
            found => Err(TemplateError::Placeholder {
                name: self.name.clone(),
                placeholder: placeholder.to_string(),
                found,
            }),
        }
    }

    /// Substitutes `{n}` and each `(name, value)` pair.
    pub fn render(&self, vars: &[(&str, &str)]) -> String {
        let mut out = self.body.replace("{n}", &self.n.to_string());
        for (k, v) in vars {
            out = out.replace(&format!("{{{k}}}"), v);
        }
        out
    }

    pub fn request(&self, model: &str, prompt: String, batch_tag: u32) -> GenerationRequest {
        GenerationRequest {
            model_name: model.to_string(),
            system: self.system.clone(),
            prompt,
            image_uri: None,
            temperature: self.temperature,
            max_tokens: self.max_tokens,
            batch_tag,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_parse() {
        let e = PromptTemplate::parse(DEFAULT_ENHANCE).unwrap();
        assert_eq!(e.name, "enhance");
        assert_eq!(e.n, 10);
        e.require_once("query").unwrap();
        PromptTemplate::parse(DEFAULT_TRIPLES).unwrap().require_once("caption").unwrap();
        PromptTemplate::parse(DEFAULT_FRAGMENT).unwrap().require_once("triples").unwrap();
        PromptTemplate::parse(DEFAULT_TAGS_SCENE).unwrap();
        PromptTemplate::parse(DEFAULT_TAGS_MOOD).unwrap();
    }

    #[test]
    fn render_substitutes() {
        let t = PromptTemplate::parse("---\nname = \"t\"\nn = 3\n---\nGive {n} for {query}.\n").unwrap();
        assert_eq!(t.render(&[("query", "a dog")]), "Give 3 for a dog.");
        assert_eq!(t.temperature, DEFAULT_TEMPERATURE);
    }

    #[test]
    fn placeholder_must_appear_once() {
        let t = PromptTemplate::parse("---\nname = \"t\"\n---\n{query} and {query}").unwrap();
        assert!(matches!(t.require_once("query"), Err(TemplateError::Placeholder { found: 2, .. })));
        let t = PromptTemplate::parse("---\nname = \"t\"\n---\nnothing").unwrap();
        assert!(t.require_once("query").is_err());
    }

    #[test]
    fn bad_headers() {
        assert!(matches!(PromptTemplate::parse("{query}"), Err(TemplateError::MissingHeader)));
        assert!(matches!(PromptTemplate::parse("---\nname = \"t\"\nn = 0\n---\n{query}"), Err(TemplateError::ZeroCount(_))));
        assert!(matches!(PromptTemplate::parse("---\nnm = \"t\"\n---\n{query}"), Err(TemplateError::Header(_))));
    }
}
