use std::collections::{BTreeSet, HashMap};

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum TemplateError {
    #[error("missing slot {0}")]
    MissingSlot(String),
    #[error("unterminated slot in template {0}")]
    Unterminated(String),
}

/// Prompt body with `{{slot}}` placeholders. Every slot in the body is required.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptTemplate {
    pub name: String,
    pub body: String,
    pub required_slots: BTreeSet<String>,
}

impl PromptTemplate {
    pub fn new(name: impl Into<String>, body: impl Into<String>) -> Result<Self, TemplateError> {
        let name = name.into();
        let body = body.into();
        let mut required_slots = BTreeSet::new();
        let mut rest = body.as_str();
        while let Some(start) = rest.find("{{") {
            let after = &rest[start + 2..];
            let end = after.find("}}").ok_or_else(|| TemplateError::Unterminated(name.clone()))?;
            required_slots.insert(after[..end].trim().to_string());
            rest = &after[end + 2..];
        }
        Ok(PromptTemplate { name, body, required_slots })
    }

    /// Single left-to-right pass; bound values are inserted verbatim and never re-expanded.
    pub fn render(&self, bindings: &HashMap<&str, String>) -> Result<String, TemplateError> {
        if let Some(missing) = self.required_slots.iter().find(|s| !bindings.contains_key(s.as_str())) {
            return Err(TemplateError::MissingSlot(missing.clone()));
        }
        let mut out = String::with_capacity(self.body.len());
        let mut rest = self.body.as_str();
        while let Some(start) = rest.find("{{") {
            out.push_str(&rest[..start]);
            let after = &rest[start + 2..];
            let end = after.find("}}").ok_or_else(|| TemplateError::Unterminated(self.name.clone()))?;
            out.push_str(&bindings[after[..end].trim()]);
            rest = &after[end + 2..];
        }
        out.push_str(rest);
        Ok(out)
    }

    /// Convenience over [`PromptTemplate::render`] with borrowed pairs.
    pub fn fill(&self, pairs: &[(&str, &str)]) -> Result<String, TemplateError> {
        let map: HashMap<&str, String> = pairs.iter().map(|(k, v)| (*k, v.to_string())).collect();
        self.render(&map)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn substitutes_slot() {
        let t = PromptTemplate::new("t", "Fact: {{fact}}").unwrap();
        assert_eq!(t.fill(&[("fact", "X stole a phone")]).unwrap(), "Fact: X stole a phone");
    }

    #[test]
    fn missing_slot_is_named() {
        let t = PromptTemplate::new("t", "Fact: {{fact}}").unwrap();
        assert_eq!(t.fill(&[]).unwrap_err().to_string(), "missing slot fact");
    }

    #[test]
    fn braces_in_bindings_are_not_expanded() {
        let t = PromptTemplate::new("t", "{{a}} and {{b}}").unwrap();
        assert_eq!(t.fill(&[("a", "{{b}}"), ("b", "2")]).unwrap(), "{{b}} and 2");
    }

    #[test]
    fn required_slots_are_collected() {
        let t = PromptTemplate::new("t", "{{ x }}{{y}}{{x}}").unwrap();
        assert_eq!(t.required_slots.iter().cloned().collect::<Vec<_>>(), ["x", "y"]);
        assert!(PromptTemplate::new("t", "{{oops").is_err());
    }
}
