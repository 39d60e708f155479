//! Labeled example types and their JSONL file format.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Faithful,
    Hallucinated,
}

impl Label {
    pub fn is_positive(self) -> bool {
        self == Label::Hallucinated
    }

    pub fn target(self) -> f64 {
        if self.is_positive() {
            1.0
        } else {
            0.0
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HallucinationType {
    None,
    Baseless,
    Contradictory,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectorKind {
    Rule,
    Llm,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DocumentPair {
    pub id: String,
    pub context: String,
    pub reference: String,
}

impl DocumentPair {
    pub fn validate(&self) -> Result<()> {
        if self.context.trim().is_empty() || self.reference.trim().is_empty() {
            return Err(Error::Contract(format!("pair {} has empty text", self.id)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub id: String,
    pub context: String,
    pub response: String,
    pub label: Label,
    pub hallucination_type: HallucinationType,
    pub injected_sentence_index: Option<usize>,
    pub injector: InjectorKind,
}

impl LabeledExample {
    pub fn validate(&self) -> Result<()> {
        let faithful = self.label == Label::Faithful;
        if faithful != (self.hallucination_type == HallucinationType::None) {
            return Err(Error::Contract(format!(
                "example {}: label {:?} disagrees with type {:?}",
                self.id, self.label, self.hallucination_type
            )));
        }
        if !faithful && self.injector == InjectorKind::Rule && self.injected_sentence_index.is_none() {
            return Err(Error::Contract(format!(
                "example {}: rule injection without sentence index",
                self.id
            )));
        }
        Ok(())
    }
}

/// Same fields as [`LabeledExample`], rejecting anything extra.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct StrictExample {
    id: String,
    context: String,
    response: String,
    label: Label,
    hallucination_type: HallucinationType,
    injected_sentence_index: Option<usize>,
    injector: InjectorKind,
}

impl From<StrictExample> for LabeledExample {
    fn from(s: StrictExample) -> Self {
        LabeledExample {
            id: s.id,
            context: s.context,
            response: s.response,
            label: s.label,
            hallucination_type: s.hallucination_type,
            injected_sentence_index: s.injected_sentence_index,
            injector: s.injector,
        }
    }
}

pub fn write_jsonl<T: Serialize>(mut w: impl Write, items: &[T]) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads labeled examples; blank lines are skipped. `strict` rejects unknown
/// fields.
pub fn read_examples(r: impl BufRead, strict: bool) -> Result<Vec<LabeledExample>> {
    read_lines(r, |line| {
        let ex: LabeledExample = if strict {
            serde_json::from_str::<StrictExample>(line)?.into()
        } else {
            serde_json::from_str(line)?
        };
        ex.validate()?;
        Ok(ex)
    })
}

pub fn read_pairs(r: impl BufRead) -> Result<Vec<DocumentPair>> {
    read_lines(r, |line| {
        let p: DocumentPair = serde_json::from_str(line)?;
        p.validate()?;
        Ok(p)
    })
}

fn read_lines<T>(r: impl BufRead, mut parse: impl FnMut(&str) -> Result<T>) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse(&line).map_err(|e| Error::Data {
            line: n + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn example() -> LabeledExample {
        LabeledExample {
            id: "x1".into(),
            context: "The keep is old.".into(),
            response: "The keep is not old.".into(),
            label: Label::Hallucinated,
            hallucination_type: HallucinationType::Contradictory,
            injected_sentence_index: Some(0),
            injector: InjectorKind::Rule,
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let items = vec![example()];
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &items).unwrap();
        let line = String::from_utf8(buf.clone()).unwrap();
        assert!(line.contains(r#""label":"hallucinated""#));
        assert!(line.contains(r#""hallucination_type":"contradictory""#));
        assert_eq!(read_examples(buf.as_slice(), true).unwrap(), items);
    }

    #[test]
    fn strict_mode_rejects_unknown_fields() {
        let mut v = serde_json::to_value(example()).unwrap();
        v["extra"] = serde_json::json!(1);
        let line = v.to_string();
        assert!(matches!(
            read_examples(line.as_bytes(), true),
            Err(Error::Data { line: 1, .. })
        ));
        assert_eq!(read_examples(line.as_bytes(), false).unwrap().len(), 1);
    }

    #[test]
    fn label_type_consistency_is_enforced() {
        let mut ex = example();
        ex.hallucination_type = HallucinationType::None;
        assert!(ex.validate().is_err());
        let mut ex = example();
        ex.injected_sentence_index = None;
        assert!(ex.validate().is_err());
        ex.injector = InjectorKind::Llm;
        assert!(ex.validate().is_ok());
    }
}
