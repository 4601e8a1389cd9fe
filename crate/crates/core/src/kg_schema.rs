//! Knowledge-graph triplets: schema types, the text grammar, the tolerant
//! post-processing parser, and prediction-vs-gold diffing.
//!
//! The text grammar is
//!
//! ```text
//! (subject, relation, object); (subject, relation, object); ...
//! ```
//!
//! with exactly one space after every comma and semicolon. Entity text may not
//! contain `(`, `)`, `,` or `;`. Entity labels are not part of the text form;
//! they travel in the JSON-lines file format instead.

use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum KgError {
    #[error("grammar violation: {0}")]
    GrammarViolation(String),
    #[error("unknown relation {0:?}")]
    UnknownRelation(String),
    #[error("unknown entity label {0:?}")]
    UnknownLabel(String),
    #[error("malformed KG record on line {line}: {msg}")]
    Record { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

const RESERVED: [char; 4] = ['(', ')', ',', ';'];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    SuggestiveOf,
    LocatedAt,
    Modify,
}

impl Relation {
    pub const ALL: [Relation; 3] = [Relation::SuggestiveOf, Relation::LocatedAt, Relation::Modify];

    pub fn as_str(self) -> &'static str {
        match self {
            Relation::SuggestiveOf => "suggestive_of",
            Relation::LocatedAt => "located_at",
            Relation::Modify => "modify",
        }
    }
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Relation {
    type Err = KgError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Relation::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| KgError::UnknownRelation(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityLabel {
    Anatomy,
    #[default]
    ObservationPresent,
    ObservationUncertain,
    ObservationAbsent,
}

impl EntityLabel {
    pub const ALL: [EntityLabel; 4] = [
        EntityLabel::Anatomy,
        EntityLabel::ObservationPresent,
        EntityLabel::ObservationUncertain,
        EntityLabel::ObservationAbsent,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EntityLabel::Anatomy => "anatomy",
            EntityLabel::ObservationPresent => "observation_present",
            EntityLabel::ObservationUncertain => "observation_uncertain",
            EntityLabel::ObservationAbsent => "observation_absent",
        }
    }
}

impl FromStr for EntityLabel {
    type Err = KgError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EntityLabel::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| KgError::UnknownLabel(s.to_string()))
    }
}

/// A span of one or more words naming an anatomy or an observation.
///
/// Text is whitespace-normalized on construction (trimmed, internal runs
/// collapsed to one space).
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Entity {
    text: String,
    label: EntityLabel,
}

impl Entity {
    pub fn new(text: &str) -> Result<Self, KgError> {
        Self::with_label(text, EntityLabel::default())
    }

    pub fn with_label(text: &str, label: EntityLabel) -> Result<Self, KgError> {
        if let Some(c) = text.chars().find(|c| RESERVED.contains(c)) {
            return Err(KgError::GrammarViolation(format!(
                "entity {text:?} contains reserved character {c:?}"
            )));
        }
        let text = text.split_whitespace().collect::<Vec<_>>().join(" ");
        if text.is_empty() {
            return Err(KgError::GrammarViolation("empty entity text".into()));
        }
        Ok(Self { text, label })
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn label(&self) -> EntityLabel {
        self.label
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triplet {
    pub subject: Entity,
    pub relation: Relation,
    pub object: Entity,
}

impl Triplet {
    pub fn new(subject: Entity, relation: Relation, object: Entity) -> Self {
        Self {
            subject,
            relation,
            object,
        }
    }

    /// Convenience constructor with default labels.
    pub fn parse_parts(subject: &str, relation: &str, object: &str) -> Result<Self, KgError> {
        Ok(Self::new(Entity::new(subject)?, relation.parse()?, Entity::new(object)?))
    }

    /// Identity used by [`kg_diff`]: lowercased entity text, exact relation.
    pub fn match_key(&self) -> (String, Relation, String) {
        (
            self.subject.text.to_lowercase(),
            self.relation,
            self.object.text.to_lowercase(),
        )
    }
}

impl fmt::Display for Triplet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.subject.text, self.relation, self.object.text)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KnowledgeGraph {
    pub source_id: String,
    pub triplets: Vec<Triplet>,
}

impl KnowledgeGraph {
    pub fn new(source_id: impl Into<String>, triplets: Vec<Triplet>) -> Self {
        Self {
            source_id: source_id.into(),
            triplets,
        }
    }

    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }
}

/// `(s, r, o); (s, r, o)`.
pub fn serialize_triplets(kg: &KnowledgeGraph) -> String {
    kg.triplets
        .iter()
        .map(Triplet::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

/// Serialization with every grammar punctuation mark as its own
/// whitespace-delimited token: `( s , r , o ) ; ( s , r , o )`.
pub fn to_metric_string(kg: &KnowledgeGraph) -> String {
    kg.triplets
        .iter()
        .map(|t| format!("( {} , {} , {} )", t.subject.text, t.relation, t.object.text))
        .collect::<Vec<_>>()
        .join(" ; ")
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParseOutcome {
    pub graph: KnowledgeGraph,
    /// Parenthesized fragments that did not form a valid triplet.
    pub skipped: usize,
}

static FRAGMENT: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\(([^()]*)\)").expect("valid regex"));

/// Extract every `( text , relation , text )` fragment from free-form model
/// output. Fragments with the wrong arity, an unknown relation, or empty
/// entity text are skipped and counted; nothing is fatal.
pub fn parse_triplets(text: &str) -> ParseOutcome {
    let mut triplets = Vec::new();
    let mut skipped = 0;
    for cap in FRAGMENT.captures_iter(text) {
        match parse_fragment(&cap[1]) {
            Some(t) => triplets.push(t),
            None => skipped += 1,
        }
    }
    ParseOutcome {
        graph: KnowledgeGraph::new(String::new(), triplets),
        skipped,
    }
}

/// [`parse_triplets`] over arbitrary bytes (invalid UTF-8 replaced).
pub fn parse_triplet_bytes(bytes: &[u8]) -> ParseOutcome {
    parse_triplets(&String::from_utf8_lossy(bytes))
}

fn parse_fragment(inner: &str) -> Option<Triplet> {
    let parts: Vec<&str> = inner.split(',').collect();
    let [s, r, o] = parts.as_slice() else {
        return None;
    };
    let relation = r.trim().parse().ok()?;
    Some(Triplet::new(Entity::new(s).ok()?, relation, Entity::new(o).ok()?))
}

/// Set comparison of a predicted graph against gold (Fig.-2 style marking).
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DiffReport {
    /// Predicted triplets present in gold.
    pub correct: Vec<Triplet>,
    /// Predicted triplets absent from gold.
    pub hallucinated: Vec<Triplet>,
    /// Gold triplets absent from the prediction.
    pub missed: Vec<Triplet>,
}

fn dedup(kg: &KnowledgeGraph) -> Vec<&Triplet> {
    let mut seen = HashSet::new();
    kg.triplets.iter().filter(|t| seen.insert(t.match_key())).collect()
}

/// Deduplicate both graphs, then split into intersection and the two
/// differences. Entity text compares case-insensitively; relations exactly.
pub fn kg_diff(pred: &KnowledgeGraph, gold: &KnowledgeGraph) -> DiffReport {
    let pred = dedup(pred);
    let gold = dedup(gold);
    let gold_keys: HashSet<_> = gold.iter().map(|t| t.match_key()).collect();
    let pred_keys: HashSet<_> = pred.iter().map(|t| t.match_key()).collect();
    let mut report = DiffReport::default();
    for t in pred {
        if gold_keys.contains(&t.match_key()) {
            report.correct.push(t.clone());
        } else {
            report.hallucinated.push(t.clone());
        }
    }
    report.missed = gold
        .into_iter()
        .filter(|t| !pred_keys.contains(&t.match_key()))
        .cloned()
        .collect();
    report
}

#[derive(Serialize, Deserialize)]
struct KgRecord {
    id: String,
    triplets: Vec<[String; 5]>,
}

pub(crate) fn triplet_to_row(t: &Triplet) -> [String; 5] {
    [
        t.subject.text.clone(),
        t.subject.label.as_str().to_string(),
        t.relation.as_str().to_string(),
        t.object.text.clone(),
        t.object.label.as_str().to_string(),
    ]
}

pub(crate) fn triplet_from_row(row: &[String; 5]) -> Result<Triplet, KgError> {
    Ok(Triplet::new(
        Entity::with_label(&row[0], row[1].parse()?)?,
        row[2].parse()?,
        Entity::with_label(&row[3], row[4].parse()?)?,
    ))
}

/// One JSON-lines record: `{"id": ..., "triplets": [[s, label, rel, o, label], ...]}`.
pub fn kg_to_json_line(kg: &KnowledgeGraph) -> String {
    let rec = KgRecord {
        id: kg.source_id.clone(),
        triplets: kg.triplets.iter().map(triplet_to_row).collect(),
    };
    serde_json::to_string(&rec).expect("KG record serializes")
}

pub fn kg_from_json_line(line: &str) -> Result<KnowledgeGraph, KgError> {
    let rec: KgRecord = serde_json::from_str(line).map_err(|e| KgError::Record {
        line: 0,
        msg: e.to_string(),
    })?;
    let triplets = rec.triplets.iter().map(triplet_from_row).collect::<Result<_, _>>()?;
    Ok(KnowledgeGraph::new(rec.id, triplets))
}

pub fn write_kg_jsonl(path: &Path, graphs: &[KnowledgeGraph]) -> Result<(), KgError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for kg in graphs {
        out.write_all(kg_to_json_line(kg).as_bytes())?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_kg_jsonl(path: &Path) -> Result<Vec<KnowledgeGraph>, KgError> {
    let reader = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut graphs = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        graphs.push(kg_from_json_line(&line).map_err(|e| match e {
            KgError::Record { msg, .. } => KgError::Record { line: i + 1, msg },
            other => other,
        })?);
    }
    Ok(graphs)
}
