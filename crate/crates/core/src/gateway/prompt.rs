//! Prompt templates and placeholder rendering.

use std::collections::BTreeMap;
use std::fmt;

use super::GatewayError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TemplateName {
    GenHigh,
    GenLow,
    Fusion,
    Rating,
}

impl fmt::Display for TemplateName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TemplateName::GenHigh => "gen_high",
            TemplateName::GenLow => "gen_low",
            TemplateName::Fusion => "fusion",
            TemplateName::Rating => "rating",
        })
    }
}

/// A named template body with `{placeholder}` slots. Braces that do not
/// enclose one of the template's declared placeholders are literal text (the
/// rating template embeds a JSON schema).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub name: TemplateName,
    pub body: &'static str,
    pub placeholders: &'static [&'static str],
}

impl PromptTemplate {
    pub fn get(name: TemplateName) -> Self {
        match name {
            TemplateName::GenHigh => PromptTemplate {
                name,
                body: include_str!("../../templates/gen_high.txt"),
                placeholders: &["task_type", "passage"],
            },
            TemplateName::GenLow => PromptTemplate {
                name,
                body: include_str!("../../templates/gen_low.txt"),
                placeholders: &["n", "task_type", "orig"],
            },
            TemplateName::Fusion => PromptTemplate {
                name,
                body: include_str!("../../templates/fusion.txt"),
                placeholders: &["task_type", "text1", "text2"],
            },
            TemplateName::Rating => PromptTemplate {
                name,
                body: include_str!("../../templates/rating.txt"),
                placeholders: &["instruction", "input", "response"],
            },
        }
    }

    /// Substitutes every declared placeholder; all other text is copied as is.
    pub fn render(&self, vars: &BTreeMap<String, String>) -> Result<String, GatewayError> {
        if let Some(missing) = self.placeholders.iter().find(|p| !vars.contains_key(**p)) {
            return Err(GatewayError::MissingPlaceholder {
                template: self.name.to_string(),
                name: missing.to_string(),
            });
        }
        let body = self.body;
        let mut out = String::with_capacity(body.len() + 256);
        let mut rest = body;
        while let Some(open) = rest.find('{') {
            out.push_str(&rest[..open]);
            let after = &rest[open + 1..];
            let close = after.find('}');
            let slot = close.map(|c| &after[..c]);
            match slot {
                Some(name) if self.placeholders.contains(&name) => {
                    out.push_str(&vars[name]);
                    rest = &after[name.len() + 1..];
                }
                _ => {
                    out.push('{');
                    rest = after;
                }
            }
        }
        out.push_str(rest);
        Ok(out)
    }
}

/// Convenience wrapper over [`PromptTemplate::render`].
pub fn render_prompt(
    name: TemplateName,
    vars: &BTreeMap<String, String>,
) -> Result<String, GatewayError> {
    PromptTemplate::get(name).render(vars)
}

/// Builds a variable map from string pairs.
pub fn vars<I, K, V>(pairs: I) -> BTreeMap<String, String>
where
    I: IntoIterator<Item = (K, V)>,
    K: Into<String>,
    V: ToString,
{
    pairs
        .into_iter()
        .map(|(k, v)| (k.into(), v.to_string()))
        .collect()
}
