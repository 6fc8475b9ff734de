use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::error::{CarpeError, Result};
use crate::params::hex;

const BANK_SOURCE: &str = include_str!("../../data/templates.toml");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemplateMode {
    Open,
    Closed,
}

#[derive(Debug, Clone, Deserialize)]
pub struct TemplateBank {
    pub classification_open: Vec<String>,
    pub classification_closed: Vec<String>,
    pub count: String,
    pub relation: String,
    pub color: String,
    pub caption_prompt: String,
    pub caption_answer: String,
    pub scene_description: String,
    pub scene_object: String,
    pub answer_words: Vec<String>,
}

pub const OPEN_TEMPLATES: usize = 10;
pub const CLOSED_TEMPLATES: usize = 10;

impl TemplateBank {
    /// The bank shipped in `data/templates.toml`.
    pub fn builtin() -> Result<Self> {
        Self::parse(BANK_SOURCE)
    }

    pub fn parse(source: &str) -> Result<Self> {
        let bank: TemplateBank =
            toml::from_str(source).map_err(|e| CarpeError::Config(format!("template bank: {e}")))?;
        if bank.classification_open.len() != OPEN_TEMPLATES
            || bank.classification_closed.len() != CLOSED_TEMPLATES
        {
            return Err(CarpeError::Config(format!(
                "template bank needs {OPEN_TEMPLATES} open and {CLOSED_TEMPLATES} closed classification templates"
            )));
        }
        if bank.classification_open.iter().any(|t| t.contains("{labels}"))
            || bank.classification_closed.iter().any(|t| !t.contains("{labels}"))
        {
            return Err(CarpeError::Config(
                "only closed-world templates may carry a {labels} slot".into(),
            ));
        }
        Ok(bank)
    }

    pub fn source_hash() -> String {
        hex(&Sha256::digest(BANK_SOURCE.as_bytes()))
    }

    /// Classification template by flat index: `0..10` open, `10..20` closed.
    pub fn classification(&self, index: usize) -> (&str, TemplateMode) {
        if index < OPEN_TEMPLATES {
            (&self.classification_open[index], TemplateMode::Open)
        } else {
            (&self.classification_closed[index - OPEN_TEMPLATES], TemplateMode::Closed)
        }
    }

    pub fn classification_count(&self) -> usize {
        OPEN_TEMPLATES + CLOSED_TEMPLATES
    }
}
