//! Controllable-summarization records: attribute-labeled (source, summary)
//! pairs, instruction prompt rendering, preference-pair construction, and a
//! synthetic corpus generator sized for single-CPU experiments.
//!
//! Two prompt styles cover two needs. `Instruct` reproduces the full
//! natural-language instruction template word for word, including its
//! "focussed" spelling; it is the fidelity surface. `Compact` is a terse
//! key=value shape that fits the same information into a tiny context
//! window for byte-level training.

use crate::tensor::Prng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {what}")]
    Parse { path: String, line: usize, what: String },
    #[error("a record carries 1 or 2 control attributes, got {0}")]
    AttributeCount(usize),
    #[error("unknown attribute kind '{0}'")]
    UnknownKind(String),
    #[error("invalid {kind} value '{value}'")]
    BadValue { kind: &'static str, value: String },
    #[error("record field '{0}' is empty")]
    EmptyField(&'static str),
}

pub type Result<T> = std::result::Result<T, CorpusError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LengthValue {
    Short,
    Normal,
    Long,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExtractivenessValue {
    Normal,
    High,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpecificityValue {
    Normal,
    High,
}

/// One control attribute with its instructed value. Topic carries a phrase
/// list ("Nepal, route" is two phrases); the other kinds are categorical.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ControlAttribute {
    Length(LengthValue),
    Extractiveness(ExtractivenessValue),
    Specificity(SpecificityValue),
    Topic(Vec<String>),
}

impl ControlAttribute {
    pub fn kind(&self) -> &'static str {
        match self {
            ControlAttribute::Length(_) => "length",
            ControlAttribute::Extractiveness(_) => "extractiveness",
            ControlAttribute::Specificity(_) => "specificity",
            ControlAttribute::Topic(_) => "topic",
        }
    }

    /// The value as it appears inside prompts and files.
    pub fn value_label(&self) -> String {
        match self {
            ControlAttribute::Length(v) => match v {
                LengthValue::Short => "short",
                LengthValue::Normal => "normal",
                LengthValue::Long => "long",
            }
            .to_string(),
            ControlAttribute::Extractiveness(v) => match v {
                ExtractivenessValue::Normal => "normal",
                ExtractivenessValue::High => "high",
                ExtractivenessValue::Full => "full",
            }
            .to_string(),
            ControlAttribute::Specificity(v) => match v {
                SpecificityValue::Normal => "normal",
                SpecificityValue::High => "high",
            }
            .to_string(),
            ControlAttribute::Topic(phrases) => phrases.join(", "),
        }
    }

    /// Position in the canonical value order of this kind; ties (topics)
    /// fall back to the label.
    fn value_rank(&self) -> usize {
        match self {
            ControlAttribute::Length(v) => *v as usize,
            ControlAttribute::Extractiveness(v) => *v as usize,
            ControlAttribute::Specificity(v) => *v as usize,
            ControlAttribute::Topic(_) => usize::MAX,
        }
    }

    /// Parses a (kind, value) pair as written in config files and CLI
    /// arguments. Topic values split on commas into phrases.
    pub fn parse(kind: &str, value: &str) -> Result<ControlAttribute> {
        match kind {
            "length" => match value {
                "short" => Ok(ControlAttribute::Length(LengthValue::Short)),
                "normal" => Ok(ControlAttribute::Length(LengthValue::Normal)),
                "long" => Ok(ControlAttribute::Length(LengthValue::Long)),
                _ => Err(CorpusError::BadValue { kind: "length", value: value.into() }),
            },
            "extractiveness" => match value {
                "normal" => Ok(ControlAttribute::Extractiveness(ExtractivenessValue::Normal)),
                "high" => Ok(ControlAttribute::Extractiveness(ExtractivenessValue::High)),
                "full" => Ok(ControlAttribute::Extractiveness(ExtractivenessValue::Full)),
                _ => Err(CorpusError::BadValue { kind: "extractiveness", value: value.into() }),
            },
            "specificity" => match value {
                "normal" => Ok(ControlAttribute::Specificity(SpecificityValue::Normal)),
                "high" => Ok(ControlAttribute::Specificity(SpecificityValue::High)),
                _ => Err(CorpusError::BadValue { kind: "specificity", value: value.into() }),
            },
            "topic" => {
                let phrases: Vec<String> = value
                    .split(',')
                    .map(|p| p.trim().to_string())
                    .filter(|p| !p.is_empty())
                    .collect();
                if phrases.is_empty() {
                    return Err(CorpusError::BadValue { kind: "topic", value: value.into() });
                }
                Ok(ControlAttribute::Topic(phrases))
            }
            _ => Err(CorpusError::UnknownKind(kind.into())),
        }
    }

    /// The instruction sentence pair for this attribute: the request, then
    /// the definition sentence that anchors what the value means. Topic has
    /// no definition sentence.
    fn instruction_sentence(&self) -> String {
        match self {
            ControlAttribute::Length(_) => format!(
                "The summary should be {} in length. The length is defined in terms of number of words used in the summary.",
                self.value_label()
            ),
            ControlAttribute::Extractiveness(_) => format!(
                "The summary should be {} in extractiveness. Extractiveness is defined by the degree of exact copying from the source text.",
                self.value_label()
            ),
            ControlAttribute::Specificity(_) => format!(
                "The summary should be {} in specificity. Specificity is defined by the degree of detail in the summary.",
                self.value_label()
            ),
            ControlAttribute::Topic(_) => {
                format!("The summary should be focussed on the topic {}.", self.value_label())
            }
        }
    }
}

/// One labeled example: a source text and a reference summary written under
/// the given control attributes (one or two of them).
#[derive(Debug, Clone, PartialEq)]
pub struct MacsumRecord {
    pub id: String,
    pub source: String,
    pub attributes: Vec<ControlAttribute>,
    pub summary: String,
}

fn validate_attribute_count(n: usize) -> Result<()> {
    if n == 0 || n > 2 {
        return Err(CorpusError::AttributeCount(n));
    }
    Ok(())
}

impl MacsumRecord {
    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(CorpusError::EmptyField("id"));
        }
        if self.source.is_empty() {
            return Err(CorpusError::EmptyField("source"));
        }
        if self.summary.is_empty() {
            return Err(CorpusError::EmptyField("summary"));
        }
        validate_attribute_count(self.attributes.len())?;
        let mut kinds: Vec<&str> = self.attributes.iter().map(|a| a.kind()).collect();
        kinds.dedup();
        if kinds.len() != self.attributes.len() {
            return Err(CorpusError::BadValue {
                kind: "attributes",
                value: "duplicate attribute kind".into(),
            });
        }
        Ok(())
    }
}

const PREAMBLE: &str = "You are an honest and to the point assistant, please follow the instruction and answer to the point. Please do not provide any irrelevant information or add any extra words than that is necessary to answer the question. Write a summary of the source text.";

/// Full instruction prompt: fixed preamble, one instruction sentence pair
/// per attribute in list order, the source lead-in, then the source text.
pub fn render_prompt(attributes: &[ControlAttribute], source: &str) -> Result<String> {
    validate_attribute_count(attributes.len())?;
    let mut parts = vec![PREAMBLE.to_string()];
    for attribute in attributes {
        parts.push(attribute.instruction_sentence());
    }
    parts.push("The source text is given below.".to_string());
    Ok(format!("{} {}", parts.join(" "), source))
}

/// Terse prompt for byte-level training: the same information in a few
/// dozen tokens instead of a few hundred.
pub fn render_compact_prompt(attributes: &[ControlAttribute], source: &str) -> Result<String> {
    validate_attribute_count(attributes.len())?;
    let mut out = format!("text: {source}\n");
    for attribute in attributes {
        out.push_str(&format!("{}={}\n", attribute.kind(), attribute.value_label()));
    }
    out.push_str("summary:\n");
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptStyle {
    Instruct,
    Compact,
}

impl PromptStyle {
    pub fn render(&self, attributes: &[ControlAttribute], source: &str) -> Result<String> {
        match self {
            PromptStyle::Instruct => render_prompt(attributes, source),
            PromptStyle::Compact => render_compact_prompt(attributes, source),
        }
    }
}

/// One preference example: under the prompt's instructed value, `chosen`
/// is the summary labeled with that value and `rejected` a summary of the
/// same source labeled with a different value of the same aspect.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PreferencePair {
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
    pub aspect: String,
    pub instructed: String,
}

#[derive(Debug, Default)]
pub struct PairBuild {
    pub pairs: Vec<PreferencePair>,
    /// Groups that offered only one distinct value: nothing to prefer.
    pub skipped_groups: usize,
    /// Candidate pairs dropped because chosen and rejected text matched.
    pub skipped_identical: usize,
}

struct GroupMember {
    attribute: ControlAttribute,
    id: String,
    summary: String,
}

/// Builds within-aspect preference pairs. Records are grouped by (source,
/// attribute kind); a record carrying two attributes joins both groups. In
/// each group, every distinct value takes a turn as the instruction, with
/// every differently-labeled summary as the rejected side: a group with k
/// distinct values and one summary each yields k*(k-1) pairs. Order is
/// deterministic: groups by first appearance, members by (value order, id).
pub fn build_preference_pairs(records: &[MacsumRecord], style: PromptStyle) -> Result<PairBuild> {
    for record in records {
        record.validate()?;
    }
    let mut group_index: HashMap<(String, &'static str), usize> = HashMap::new();
    let mut groups: Vec<(String, &'static str, Vec<GroupMember>)> = Vec::new();
    for record in records {
        for attribute in &record.attributes {
            let key = (record.source.clone(), attribute.kind());
            let at = *group_index.entry(key).or_insert_with(|| {
                groups.push((record.source.clone(), attribute.kind(), Vec::new()));
                groups.len() - 1
            });
            groups[at].2.push(GroupMember {
                attribute: attribute.clone(),
                id: record.id.clone(),
                summary: record.summary.clone(),
            });
        }
    }

    let mut build = PairBuild::default();
    for (source, aspect, mut members) in groups {
        members.sort_by(|a, b| {
            (a.attribute.value_rank(), a.attribute.value_label(), &a.id).cmp(&(
                b.attribute.value_rank(),
                b.attribute.value_label(),
                &b.id,
            ))
        });
        let mut labels: Vec<String> = members.iter().map(|m| m.attribute.value_label()).collect();
        labels.dedup();
        labels.sort();
        labels.dedup();
        if labels.len() < 2 {
            build.skipped_groups += 1;
            continue;
        }
        for chosen in &members {
            let prompt = style.render(std::slice::from_ref(&chosen.attribute), &source)?;
            for rejected in &members {
                if chosen.attribute.value_label() == rejected.attribute.value_label() {
                    continue;
                }
                if chosen.summary == rejected.summary {
                    build.skipped_identical += 1;
                    continue;
                }
                build.pairs.push(PreferencePair {
                    prompt: prompt.clone(),
                    chosen: chosen.summary.clone(),
                    rejected: rejected.summary.clone(),
                    aspect: aspect.to_string(),
                    instructed: chosen.attribute.value_label(),
                });
            }
        }
    }
    Ok(build)
}

/// On-disk row shape. Attributes serialize as a JSON object keyed by kind;
/// key order is alphabetical, which happens to match the instruction order
/// of every supported two-attribute combination.
#[derive(Serialize, Deserialize)]
struct RawRecord {
    id: String,
    source: String,
    attributes: serde_json::Map<String, serde_json::Value>,
    summary: String,
}

fn attribute_to_json(attribute: &ControlAttribute) -> serde_json::Value {
    match attribute {
        ControlAttribute::Topic(phrases) => {
            serde_json::Value::Array(phrases.iter().map(|p| p.clone().into()).collect())
        }
        other => serde_json::Value::String(other.value_label()),
    }
}

fn attribute_from_json(kind: &str, value: &serde_json::Value) -> Result<ControlAttribute> {
    if kind == "topic" {
        let phrases: Option<Vec<String>> = value.as_array().map(|items| {
            items.iter().filter_map(|v| v.as_str().map(str::to_string)).collect()
        });
        return match phrases {
            Some(list)
                if !list.is_empty()
                    && list.len() == value.as_array().unwrap().len()
                    && list.iter().all(|p| !p.is_empty()) =>
            {
                Ok(ControlAttribute::Topic(list))
            }
            _ => Err(CorpusError::BadValue { kind: "topic", value: value.to_string() }),
        };
    }
    let Some(label) = value.as_str() else {
        return Err(CorpusError::BadValue { kind: "attributes", value: value.to_string() });
    };
    ControlAttribute::parse(kind, label)
}

fn to_raw(record: &MacsumRecord) -> RawRecord {
    let mut attributes = serde_json::Map::new();
    for attribute in &record.attributes {
        attributes.insert(attribute.kind().to_string(), attribute_to_json(attribute));
    }
    RawRecord {
        id: record.id.clone(),
        source: record.source.clone(),
        attributes,
        summary: record.summary.clone(),
    }
}

fn from_raw(raw: RawRecord) -> Result<MacsumRecord> {
    let mut attributes = Vec::with_capacity(raw.attributes.len());
    validate_attribute_count(raw.attributes.len())?;
    // serde_json maps iterate alphabetically, the canonical kind order.
    for (kind, value) in &raw.attributes {
        attributes.push(attribute_from_json(kind, value)?);
    }
    let record =
        MacsumRecord { id: raw.id, source: raw.source, attributes, summary: raw.summary };
    record.validate()?;
    Ok(record)
}

/// Reads one record per line, reporting failures with their line number.
pub fn read_jsonl(path: &Path) -> Result<Vec<MacsumRecord>> {
    let display = path.display().to_string();
    let file = std::fs::File::open(path)
        .map_err(|source| CorpusError::Io { path: display.clone(), source })?;
    let mut records = Vec::new();
    for (idx, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let parse_err = |what: String| CorpusError::Parse {
            path: display.clone(),
            line: line_no,
            what,
        };
        let line = line.map_err(|source| CorpusError::Io { path: display.clone(), source })?;
        if line.trim().is_empty() {
            return Err(parse_err("empty line".into()));
        }
        let raw: RawRecord =
            serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        records.push(from_raw(raw).map_err(|e| parse_err(e.to_string()))?);
    }
    Ok(records)
}

pub fn write_jsonl(records: &[MacsumRecord], path: &Path) -> Result<()> {
    let display = path.display().to_string();
    let io_err = |source| CorpusError::Io { path: display.clone(), source };
    for record in records {
        record.validate()?;
    }
    let mut file = std::fs::File::create(path).map_err(io_err)?;
    for record in records {
        let line = serde_json::to_string(&to_raw(record)).expect("record serializes");
        file.write_all(line.as_bytes()).map_err(io_err)?;
        file.write_all(b"\n").map_err(io_err)?;
    }
    Ok(())
}

/// Writes preference pairs one JSON object per line.
pub fn write_pairs_jsonl(pairs: &[PreferencePair], path: &Path) -> Result<()> {
    let display = path.display().to_string();
    let io_err = |source| CorpusError::Io { path: display.clone(), source };
    let mut file = std::fs::File::create(path).map_err(io_err)?;
    for pair in pairs {
        let line = serde_json::to_string(pair).expect("pair serializes");
        file.write_all(line.as_bytes()).map_err(io_err)?;
        file.write_all(b"\n").map_err(io_err)?;
    }
    Ok(())
}

pub fn read_pairs_jsonl(path: &Path) -> Result<Vec<PreferencePair>> {
    let display = path.display().to_string();
    let file = std::fs::File::open(path)
        .map_err(|source| CorpusError::Io { path: display.clone(), source })?;
    let mut pairs = Vec::new();
    for (idx, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| CorpusError::Io { path: display.clone(), source })?;
        let pair: PreferencePair = serde_json::from_str(&line).map_err(|e| {
            CorpusError::Parse { path: display.clone(), line: idx + 1, what: e.to_string() }
        })?;
        pairs.push(pair);
    }
    Ok(pairs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthTask {
    /// Summaries are 8/16/32-word prefixes labeled short/normal/long.
    LengthControl,
    /// Summaries are 16-word prefixes, verbatim (full) or shuffled (normal).
    CopyControl,
}

impl SynthTask {
    pub fn as_str(&self) -> &'static str {
        match self {
            SynthTask::LengthControl => "length_control",
            SynthTask::CopyControl => "copy_control",
        }
    }
}

const ARTICLE_WORDS: usize = 40;
const COPY_SPAN_WORDS: usize = 16;

/// 32 distinct two-letter words; small enough that a byte model sees every
/// word many times, large enough that articles differ.
fn synth_vocab() -> Vec<String> {
    (0..32u8)
        .map(|i| String::from_utf8(vec![b'a' + i / 8, b'a' + i % 8]).expect("ascii"))
        .collect()
}

/// Deterministic labeled corpus. Every label is true by construction: the
/// length task plants prefix summaries of exactly 8, 16, or 32 words; the
/// copy task plants the same 16-word span verbatim ("full") or shuffled
/// out of order ("normal"), so copying metrics separate the two labels.
pub fn synth_corpus(task: SynthTask, n: usize, seed: u64) -> Vec<MacsumRecord> {
    let vocab = synth_vocab();
    let mut prng = Prng::new(seed);
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let record = match task {
            SynthTask::LengthControl => {
                let words: Vec<&str> =
                    (0..ARTICLE_WORDS).map(|_| vocab[prng.gen_range(vocab.len())].as_str()).collect();
                let (value, take) = match i % 3 {
                    0 => (LengthValue::Short, 8),
                    1 => (LengthValue::Normal, 16),
                    _ => (LengthValue::Long, 32),
                };
                MacsumRecord {
                    id: format!("len-{i:04}"),
                    source: words.join(" "),
                    attributes: vec![ControlAttribute::Length(value)],
                    summary: words[..take].join(" "),
                }
            }
            SynthTask::CopyControl => {
                // A distinct-word leading span makes "shuffled" genuinely
                // different from "verbatim".
                let mut indices: Vec<usize> = (0..vocab.len()).collect();
                prng.shuffle(&mut indices);
                let mut words: Vec<&str> =
                    indices[..COPY_SPAN_WORDS].iter().map(|&j| vocab[j].as_str()).collect();
                for _ in COPY_SPAN_WORDS..ARTICLE_WORDS {
                    words.push(vocab[prng.gen_range(vocab.len())].as_str());
                }
                let span = &words[..COPY_SPAN_WORDS];
                let (value, summary) = if i % 2 == 0 {
                    (ExtractivenessValue::Full, span.join(" "))
                } else {
                    let mut shuffled: Vec<&str> = span.to_vec();
                    for _ in 0..8 {
                        prng.shuffle(&mut shuffled);
                        if shuffled != span {
                            break;
                        }
                    }
                    (ExtractivenessValue::Normal, shuffled.join(" "))
                };
                MacsumRecord {
                    id: format!("copy-{i:04}"),
                    source: words.join(" "),
                    attributes: vec![ControlAttribute::Extractiveness(value)],
                    summary,
                }
            }
        };
        records.push(record);
    }
    records
}
