//! Bundled data assets: closed value sets, task modalities, the infill
//! lexicon and prompt templates.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use serde::Deserialize;

use crate::metadata::AttributeKey;

/// A prompt template with a `# version: N` header and `{name}` placeholders.
#[derive(Debug, Clone, Copy)]
pub struct PromptTemplate {
    pub name: &'static str,
    pub version: u32,
    body: &'static str,
}

impl PromptTemplate {
    fn parse(name: &'static str, source: &'static str) -> Self {
        let (version, body) = match source.split_once('\n') {
            Some((first, rest)) if first.starts_with("# version:") => (
                first["# version:".len()..].trim().parse().unwrap_or(0),
                rest,
            ),
            _ => (0, source),
        };
        PromptTemplate {
            name,
            version,
            body: body.trim_end(),
        }
    }

    pub fn text(&self) -> &'static str {
        self.body
    }

    /// Substitutes `{name}` placeholders in one pass, so values containing
    /// braces are left untouched.
    pub fn render(&self, vars: &[(&str, &str)]) -> String {
        let mut out = String::with_capacity(self.body.len());
        let mut rest = self.body;
        while let Some(start) = rest.find('{') {
            out.push_str(&rest[..start]);
            let after = &rest[start + 1..];
            let hit = after.find('}').and_then(|end| {
                let name = &after[..end];
                vars.iter().find(|(k, _)| *k == name).map(|(_, v)| (end, *v))
            });
            match hit {
                Some((end, value)) => {
                    out.push_str(value);
                    rest = &after[end + 1..];
                }
                None => {
                    out.push('{');
                    rest = after;
                }
            }
        }
        out.push_str(rest);
        out
    }
}

macro_rules! prompt {
    ($name:literal) => {
        PromptTemplate::parse($name, include_str!(concat!("../assets/prompts/", $name, ".txt")))
    };
}

pub mod prompts {
    use super::PromptTemplate;

    pub fn extraction_system() -> PromptTemplate {
        prompt!("extraction_system")
    }
    pub fn extraction_repair() -> PromptTemplate {
        prompt!("extraction_repair")
    }
    pub fn extraction_validate() -> PromptTemplate {
        prompt!("extraction_validate")
    }
    pub fn mutation_infill() -> PromptTemplate {
        prompt!("mutation_infill")
    }
    pub fn request_validate() -> PromptTemplate {
        prompt!("request_validate")
    }
    pub fn judge() -> PromptTemplate {
        prompt!("judge")
    }
}

/// The per-key judgment prompt for a special attribute.
pub fn special_prompt(key: AttributeKey) -> Option<PromptTemplate> {
    use AttributeKey::*;
    Some(match key {
        License => prompt!("license"),
        Copyright => prompt!("copyright"),
        Hardware => prompt!("hardware"),
        Software => prompt!("software"),
        TrainingCost => prompt!("training_cost"),
        InferenceCost => prompt!("inference_cost"),
        Limitation => prompt!("limitation"),
        Biases => prompt!("biases"),
        ModelSize => prompt!("model_size"),
        _ => return None,
    })
}

fn data_lines(text: &str) -> impl Iterator<Item = Vec<&str>> {
    text.lines()
        .map(str::trim_end)
        .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|l| l.split('\t').collect())
}

/// Closed value sets keyed by attribute.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ValueSets {
    sets: BTreeMap<AttributeKey, Vec<String>>,
}

#[derive(Deserialize)]
struct ValueSetsFile {
    #[serde(flatten)]
    sets: BTreeMap<String, Vec<String>>,
}

impl ValueSets {
    pub fn bundled() -> &'static ValueSets {
        static SETS: OnceLock<ValueSets> = OnceLock::new();
        SETS.get_or_init(|| {
            ValueSets::from_toml(include_str!("../assets/value_sets.toml"))
                .expect("bundled value sets parse")
        })
    }

    pub fn from_toml(text: &str) -> Result<ValueSets, String> {
        let file: ValueSetsFile = toml::from_str(text).map_err(|e| e.to_string())?;
        let mut sets = BTreeMap::new();
        for (name, values) in file.sets {
            let key: AttributeKey = name.parse().map_err(|e| format!("{e}"))?;
            sets.insert(key, values);
        }
        Ok(ValueSets { sets })
    }

    pub fn with_set(mut self, key: AttributeKey, values: Vec<String>) -> Self {
        self.sets.insert(key, values);
        self
    }

    pub fn get(&self, key: AttributeKey) -> Option<&[String]> {
        self.sets.get(&key).map(Vec::as_slice)
    }

    pub fn keys(&self) -> impl Iterator<Item = AttributeKey> + '_ {
        self.sets.keys().copied()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskModality {
    pub input: String,
    pub output: String,
}

pub fn task_modalities() -> &'static BTreeMap<String, TaskModality> {
    static TABLE: OnceLock<BTreeMap<String, TaskModality>> = OnceLock::new();
    TABLE.get_or_init(|| {
        data_lines(include_str!("../assets/task_modalities.tsv"))
            .filter(|cols| cols.len() >= 3)
            .map(|cols| {
                (
                    cols[0].to_string(),
                    TaskModality {
                        input: cols[1].to_string(),
                        output: cols[2].to_string(),
                    },
                )
            })
            .collect()
    })
}

pub const MODALITIES: [&str; 7] = ["text", "image", "audio", "video", "tabular", "label", "embedding"];

/// Finds the modality a free-text format description refers to, if exactly
/// one is mentioned.
pub fn modality_of(text: &str) -> Option<&'static str> {
    let lower = text.to_lowercase();
    let words: Vec<&str> = lower
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .collect();
    let mentions = |m: &str| {
        words.iter().any(|w| {
            *w == m
                || (m == "image" && matches!(*w, "images" | "picture" | "photo" | "photos" | "pixel" | "pixels"))
                || (m == "audio" && matches!(*w, "speech" | "sound" | "waveform" | "wav"))
                || (m == "video" && matches!(*w, "videos" | "frames"))
                || (m == "text" && matches!(*w, "texts" | "sentence" | "sentences" | "string" | "strings" | "tokens"))
                || (m == "tabular" && matches!(*w, "table" | "tables" | "csv"))
        })
    };
    let hits: Vec<&'static str> = MODALITIES[..5].iter().copied().filter(|m| mentions(m)).collect();
    match hits.as_slice() {
        [one] => Some(one),
        _ => None,
    }
}

/// Word substitutions used when no generator is configured for infill.
pub fn mutation_lexicon() -> &'static BTreeMap<String, Vec<String>> {
    static LEXICON: OnceLock<BTreeMap<String, Vec<String>>> = OnceLock::new();
    LEXICON.get_or_init(|| {
        data_lines(include_str!("../assets/mutation_lexicon.tsv"))
            .filter(|cols| cols.len() >= 2)
            .map(|cols| {
                (
                    cols[0].to_string(),
                    cols[1].split('|').map(str::to_string).collect(),
                )
            })
            .collect()
    })
}

pub const LICENSE_TABLE: &str = include_str!("../assets/licenses.tsv");

pub(crate) fn license_rows() -> impl Iterator<Item = Vec<&'static str>> {
    data_lines(LICENSE_TABLE)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_special_key_has_a_prompt() {
        for key in AttributeKey::ALL {
            assert_eq!(special_prompt(key).is_some(), key.is_special(), "{key}");
        }
        let t = special_prompt(AttributeKey::License).unwrap();
        assert_eq!(t.version, 1);
        let r = t.render(&[("required", "mit"), ("candidate", "{x}")]);
        assert!(r.contains("Requirement: mit"));
        assert!(r.contains("Candidate model: {x}"));
        assert!(!r.starts_with("# version"));
    }

    #[test]
    fn bundled_sets_load() {
        let sets = ValueSets::bundled();
        assert!(sets.get(AttributeKey::License).unwrap().contains(&"mit".to_string()));
        assert!(sets.get(AttributeKey::InputFormat).unwrap().len() > 1);
        assert!(sets.get(AttributeKey::Function).is_none());
        assert_eq!(task_modalities()["image-classification"].input, "image");
        assert!(mutation_lexicon().contains_key("detection"));
    }

    #[test]
    fn modality_detection() {
        assert_eq!(modality_of("RGB images, 224x224"), Some("image"));
        assert_eq!(modality_of("raw text"), Some("text"));
        assert_eq!(modality_of("text and images"), None);
        assert_eq!(modality_of("nothing"), None);
    }
}
