use super::ClassLabel;
use crate::error::{Error, Result};

pub const PLACEHOLDER: &str = "{}";

/// Hard prompt templates used to expand a class name into several
/// descriptions.
pub const DEFAULT_TEMPLATES: [&str; 35] = [
    "a photo of a {}.",
    "a recording of a {}.",
    "the sound of a {}.",
    "a blurry photo of a {}.",
    "a close-up photo of the {}.",
    "a video frame showing a {}.",
    "a noisy recording of the {}.",
    "a bright photo of a {}.",
    "a dark photo of the {}.",
    "a cropped photo of a {}.",
    "an audio clip of a {}.",
    "a good photo of the {}.",
    "a low resolution photo of a {}.",
    "the {} can be heard in the background.",
    "someone is watching a {}.",
    "a clip where a {} makes noise.",
    "a picture of one {}.",
    "there is a {} in the scene.",
    "a loud {}.",
    "a quiet {} nearby.",
    "an image containing a {}.",
    "a snapshot of the {} outdoors.",
    "a {} in a classroom.",
    "a field recording featuring a {}.",
    "a jpeg of a {}.",
    "a sketch of a {}.",
    "a famous {}.",
    "this is a {}.",
    "itap of a {}.",
    "a rendering of the {}.",
    "a clean recording of one {}.",
    "art of the {}.",
    "a {} seen from far away.",
    "a short sound made by a {}.",
    "a scene with the {} in focus.",
];

/// A validated list of templates, each holding the placeholder exactly once.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptTemplateSet {
    templates: Vec<String>,
}

impl PromptTemplateSet {
    pub fn new(templates: Vec<String>) -> Result<Self> {
        if templates.is_empty() {
            return Err(Error::InvalidConfig("prompt template set is empty".into()));
        }
        for t in &templates {
            if t.trim().is_empty() || t.matches(PLACEHOLDER).count() != 1 {
                return Err(Error::InvalidConfig(format!(
                    "template {t:?} must contain '{PLACEHOLDER}' exactly once"
                )));
            }
        }
        Ok(Self { templates })
    }

    /// The first `n` built-in templates.
    pub fn standard(n: usize) -> Result<Self> {
        if n > DEFAULT_TEMPLATES.len() {
            return Err(Error::InvalidConfig(format!(
                "{n} prompts requested, {} built-in templates available",
                DEFAULT_TEMPLATES.len()
            )));
        }
        Self::new(DEFAULT_TEMPLATES[..n].iter().map(|s| s.to_string()).collect())
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn templates(&self) -> &[String] {
        &self.templates
    }
}

pub fn expand_label(label: &ClassLabel, templates: &PromptTemplateSet) -> Vec<String> {
    templates
        .templates
        .iter()
        .map(|t| t.replacen(PLACEHOLDER, &label.name, 1))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dog() -> ClassLabel {
        ClassLabel {
            id: 0,
            name: "dog".into(),
        }
    }

    #[test]
    fn single_template() {
        let set = PromptTemplateSet::new(vec!["a photo of a {}".into()]).unwrap();
        assert_eq!(expand_label(&dog(), &set), vec!["a photo of a dog"]);
    }

    #[test]
    fn thirty_five_prompts() {
        let set = PromptTemplateSet::standard(35).unwrap();
        let prompts = expand_label(&dog(), &set);
        assert_eq!(prompts.len(), 35);
        assert!(prompts.iter().all(|p| p.contains("dog") && !p.contains(PLACEHOLDER)));
        assert!(PromptTemplateSet::standard(36).is_err());
    }

    #[test]
    fn invalid_templates() {
        assert!(PromptTemplateSet::new(vec![]).is_err());
        assert!(PromptTemplateSet::new(vec!["no placeholder".into()]).is_err());
        assert!(PromptTemplateSet::new(vec!["{} and {}".into()]).is_err());
    }
}
