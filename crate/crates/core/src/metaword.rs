//! Meta-word schema, attribute extraction and per-prefix features.

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value as Json};

use crate::corpus::{is_punctuation, tokenize, FreqStats};
use crate::error::{Error, Result};

pub const MAX_RESPONSE_LENGTH: usize = 25;
pub const MIN_UTTERANCE_WORDS: usize = 3;

const WH_WORDS: [&str; 7] = ["who", "what", "when", "where", "why", "how", "which"];

pub const ACT_YES_NO: &str = "yes-no-question";
pub const ACT_WH: &str = "wh-question";
pub const ACT_STATEMENT: &str = "statement";
pub const ACT_OTHER: &str = "other";

/// The five response attributes, in canonical schema order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Attribute {
    /// response length
    RL,
    /// dialogue act
    DA,
    /// multiple utterances
    MU,
    /// copy ratio
    CR,
    /// specificity
    S,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum VarType {
    Categorical,
    Real,
}

/// Which state-update loss supervises a variable: `Tracked` variables have a
/// per-prefix feature and are compared at every step, `Final` ones only at
/// the end of the response.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossCase {
    Tracked,
    Final,
}

impl Attribute {
    pub const ALL: [Attribute; 5] = [Attribute::RL, Attribute::DA, Attribute::MU, Attribute::CR, Attribute::S];

    pub fn key(self) -> &'static str {
        match self {
            Attribute::RL => "RL",
            Attribute::DA => "DA",
            Attribute::MU => "MU",
            Attribute::CR => "CR",
            Attribute::S => "S",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.key().eq_ignore_ascii_case(s.trim()))
    }

    pub fn var_type(self) -> VarType {
        match self {
            Attribute::RL | Attribute::DA | Attribute::MU => VarType::Categorical,
            Attribute::CR | Attribute::S => VarType::Real,
        }
    }

    pub fn loss_case(self) -> LossCase {
        match self {
            Attribute::RL | Attribute::CR | Attribute::S => LossCase::Tracked,
            Attribute::DA | Attribute::MU => LossCase::Final,
        }
    }
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Value {
    Category(String),
    Real(f64),
}

impl Value {
    pub fn as_category(&self) -> Option<&str> {
        match self {
            Value::Category(c) => Some(c),
            Value::Real(_) => None,
        }
    }

    pub fn as_real(&self) -> Option<f64> {
        match self {
            Value::Real(x) => Some(*x),
            Value::Category(_) => None,
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Category(c) => f.write_str(c),
            Value::Real(x) => write!(f, "{x}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaWordVariable {
    pub attribute: Attribute,
    pub value: Value,
}

impl MetaWordVariable {
    pub fn key(&self) -> &'static str {
        self.attribute.key()
    }

    pub fn var_type(&self) -> VarType {
        self.attribute.var_type()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariableDecl {
    pub attribute: Attribute,
    pub var_type: VarType,
    /// Category inventory; empty for real variables, whose range is [0, 1].
    pub categories: Vec<String>,
    pub case: LossCase,
}

impl VariableDecl {
    fn default_for(attribute: Attribute) -> Self {
        let categories = match attribute {
            Attribute::RL => (1..=MAX_RESPONSE_LENGTH).map(|n| n.to_string()).collect(),
            Attribute::DA => [ACT_YES_NO, ACT_WH, ACT_STATEMENT, ACT_OTHER]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            Attribute::MU => vec!["false".into(), "true".into()],
            Attribute::CR | Attribute::S => Vec::new(),
        };
        Self {
            attribute,
            var_type: attribute.var_type(),
            categories,
            case: attribute.loss_case(),
        }
    }

    pub fn category_index(&self, value: &str) -> Option<usize> {
        self.categories.iter().position(|c| c == value)
    }
}

/// The active attribute subset, always in canonical order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeSchema {
    decls: Vec<VariableDecl>,
}

impl Default for AttributeSchema {
    fn default() -> Self {
        Self::full()
    }
}

impl AttributeSchema {
    pub fn full() -> Self {
        Self::from_attributes(&Attribute::ALL)
    }

    pub fn empty() -> Self {
        Self { decls: Vec::new() }
    }

    pub fn from_attributes(attrs: &[Attribute]) -> Self {
        let set: HashSet<Attribute> = attrs.iter().copied().collect();
        Self {
            decls: Attribute::ALL
                .into_iter()
                .filter(|a| set.contains(a))
                .map(VariableDecl::default_for)
                .collect(),
        }
    }

    /// `"RL,DA,MU"`, `"all"` or `"none"`.
    pub fn parse(spec: &str) -> Result<Self> {
        let spec = spec.trim();
        if spec.eq_ignore_ascii_case("all") {
            return Ok(Self::full());
        }
        if spec.is_empty() || spec.eq_ignore_ascii_case("none") {
            return Ok(Self::empty());
        }
        let attrs = spec
            .split(',')
            .map(|k| Attribute::parse(k).ok_or_else(|| Error::metaword(k.trim(), "unknown attribute")))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_attributes(&attrs))
    }

    /// Replaces the dialogue-act inventory.
    pub fn with_act_inventory(mut self, acts: Vec<String>) -> Self {
        for d in &mut self.decls {
            if d.attribute == Attribute::DA {
                d.categories = acts.clone();
            }
        }
        self
    }

    pub fn id(&self) -> String {
        if self.decls.is_empty() {
            "none".into()
        } else {
            self.decls
                .iter()
                .map(|d| d.attribute.key())
                .collect::<Vec<_>>()
                .join(",")
        }
    }

    pub fn decls(&self) -> &[VariableDecl] {
        &self.decls
    }

    pub fn attributes(&self) -> Vec<Attribute> {
        self.decls.iter().map(|d| d.attribute).collect()
    }

    pub fn decl(&self, attribute: Attribute) -> Option<&VariableDecl> {
        self.decls.iter().find(|d| d.attribute == attribute)
    }

    pub fn len(&self) -> usize {
        self.decls.len()
    }

    pub fn is_empty(&self) -> bool {
        self.decls.is_empty()
    }

    /// Every token that can appear in a key or categorical value, for the
    /// meta-word embedding table.
    pub fn meta_tokens(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for d in &self.decls {
            for t in std::iter::once(d.attribute.key().to_string()).chain(d.categories.iter().cloned()) {
                for tok in meta_tokenize(&t) {
                    if seen.insert(tok.clone()) {
                        out.push(tok);
                    }
                }
            }
        }
        out
    }

    pub fn validate_variable(&self, var: &MetaWordVariable) -> Result<()> {
        let key = var.key();
        let decl = self
            .decl(var.attribute)
            .ok_or_else(|| Error::metaword(key, "not part of the active schema"))?;
        match (&var.value, decl.var_type) {
            (Value::Category(c), VarType::Categorical) => {
                if decl.category_index(c).is_none() {
                    if var.attribute == Attribute::RL {
                        return Err(Error::metaword(key, format!("{c:?} outside 1-{MAX_RESPONSE_LENGTH}")));
                    }
                    return Err(Error::metaword(key, format!("{c:?} not in category inventory")));
                }
                Ok(())
            }
            (Value::Real(x), VarType::Real) => {
                if !(0.0..=1.0).contains(x) {
                    return Err(Error::metaword(key, format!("{x} outside [0, 1]")));
                }
                Ok(())
            }
            _ => Err(Error::metaword(key, "value type does not match declaration")),
        }
    }

    /// Checks that `mw` has exactly this schema's variables, in order, with
    /// in-range values.
    pub fn validate(&self, mw: &MetaWord) -> Result<()> {
        for d in &self.decls {
            if mw.get(d.attribute).is_none() {
                return Err(Error::metaword(d.attribute.key(), "missing"));
            }
        }
        if mw.len() != self.decls.len() {
            let extra = mw
                .vars()
                .iter()
                .find(|v| self.decl(v.attribute).is_none())
                .map_or("?", |v| v.key());
            return Err(Error::metaword(extra, "not part of the active schema"));
        }
        for (v, d) in mw.vars().iter().zip(&self.decls) {
            if v.attribute != d.attribute {
                return Err(Error::metaword(v.key(), "out of schema order"));
            }
            self.validate_variable(v)?;
        }
        Ok(())
    }
}

/// Keys and categorical values are split on whitespace only, so
/// `yes-no-question` stays one token.
pub fn meta_tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_string).collect()
}

/// Ordered list of `(key, type, value)` variables describing a response.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct MetaWord {
    vars: Vec<MetaWordVariable>,
}

impl MetaWord {
    pub fn new(mut vars: Vec<MetaWordVariable>) -> Result<Self> {
        vars.sort_by_key(|v| v.attribute);
        for w in vars.windows(2) {
            if w[0].attribute == w[1].attribute {
                return Err(Error::metaword(w[0].key(), "duplicate key"));
            }
        }
        Ok(Self { vars })
    }

    pub fn vars(&self) -> &[MetaWordVariable] {
        &self.vars
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn get(&self, attribute: Attribute) -> Option<&Value> {
        self.vars.iter().find(|v| v.attribute == attribute).map(|v| &v.value)
    }

    pub fn set(&mut self, attribute: Attribute, value: Value) {
        match self.vars.iter_mut().find(|v| v.attribute == attribute) {
            Some(v) => v.value = value,
            None => {
                self.vars.push(MetaWordVariable { attribute, value });
                self.vars.sort_by_key(|v| v.attribute);
            }
        }
    }

    /// Restriction to the attributes of `schema`.
    pub fn project(&self, schema: &AttributeSchema) -> MetaWord {
        MetaWord {
            vars: self
                .vars
                .iter()
                .filter(|v| schema.decl(v.attribute).is_some())
                .cloned()
                .collect(),
        }
    }

    /// Parses `"RL=8,DA=yes-no-question,MU=false,CR=0.2,S=0.6"`; every
    /// variable is validated against `schema` but may be a subset of it.
    pub fn parse_assignments(text: &str, schema: &AttributeSchema) -> Result<Self> {
        let mut vars = Vec::new();
        for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::metaword(part, "expected KEY=VALUE"))?;
            let attribute = Attribute::parse(k).ok_or_else(|| Error::metaword(k.trim(), "unknown attribute"))?;
            let v = v.trim();
            let value = match attribute.var_type() {
                VarType::Categorical => Value::Category(v.to_string()),
                VarType::Real => Value::Real(
                    v.parse::<f64>()
                        .map_err(|_| Error::metaword(attribute.key(), format!("{v:?} is not a number")))?,
                ),
            };
            let var = MetaWordVariable { attribute, value };
            schema.validate_variable(&var)?;
            vars.push(var);
        }
        Self::new(vars)
    }

    pub fn to_json(&self) -> Json {
        let mut m = Map::new();
        for v in &self.vars {
            let j = match &v.value {
                Value::Category(c) => Json::String(c.clone()),
                Value::Real(x) => serde_json::json!(x),
            };
            m.insert(v.key().to_string(), j);
        }
        Json::Object(m)
    }

    pub fn from_json(j: &Json) -> Result<Self> {
        let obj = j
            .as_object()
            .ok_or_else(|| Error::metaword("metaword", "expected a JSON object"))?;
        let mut vars = Vec::new();
        for (k, v) in obj {
            let attribute = Attribute::parse(k).ok_or_else(|| Error::metaword(k, "unknown attribute"))?;
            let value = match (attribute.var_type(), v) {
                (VarType::Categorical, Json::String(s)) => Value::Category(s.clone()),
                (VarType::Categorical, Json::Bool(b)) => Value::Category(b.to_string()),
                (VarType::Categorical, Json::Number(n)) => Value::Category(n.to_string()),
                (VarType::Real, Json::Number(n)) => Value::Real(n.as_f64().unwrap_or(f64::NAN)),
                _ => return Err(Error::metaword(k, format!("bad value {v}"))),
            };
            vars.push(MetaWordVariable { attribute, value });
        }
        Self::new(vars)
    }
}

impl fmt::Display for MetaWord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.vars.iter().map(|v| format!("{}={}", v.key(), v.value)).collect();
        f.write_str(&parts.join(","))
    }
}

struct Utterance<'a> {
    tokens: &'a [String],
    terminal: Option<&'a str>,
}

impl Utterance<'_> {
    fn words(&self) -> impl Iterator<Item = &str> {
        self.tokens.iter().map(String::as_str).filter(|t| !is_punctuation(t))
    }
}

fn is_terminal(t: &str) -> bool {
    matches!(t, "." | "?" | "!")
}

/// Splits on `.`, `?` and `!`; empty pieces from repeated terminals vanish.
fn utterances(tokens: &[String]) -> Vec<Utterance<'_>> {
    let mut out = Vec::new();
    let mut start = 0;
    for (i, t) in tokens.iter().enumerate() {
        if is_terminal(t) {
            if i > start {
                out.push(Utterance {
                    tokens: &tokens[start..i],
                    terminal: Some(t.as_str()),
                });
            }
            start = i + 1;
        }
    }
    if start < tokens.len() {
        out.push(Utterance {
            tokens: &tokens[start..],
            terminal: None,
        });
    }
    out
}

fn length_category(n: usize) -> String {
    n.min(MAX_RESPONSE_LENGTH).to_string()
}

pub fn extract_rl(response: &[String]) -> Result<String> {
    if response.is_empty() {
        return Err(Error::metaword("RL", "empty response"));
    }
    Ok(length_category(response.len()))
}

/// Rule-based four-way act tagger.
pub fn extract_da(response: &[String]) -> String {
    let utts = utterances(response);
    if let Some(q) = utts.iter().find(|u| u.terminal == Some("?")) {
        let first = q.words().next().unwrap_or("");
        return if WH_WORDS.contains(&first) { ACT_WH } else { ACT_YES_NO }.to_string();
    }
    if response.len() >= 3 {
        ACT_STATEMENT.to_string()
    } else {
        ACT_OTHER.to_string()
    }
}

pub fn extract_mu(response: &[String]) -> bool {
    utterances(response)
        .iter()
        .filter(|u| u.words().count() >= MIN_UTTERANCE_WORDS)
        .count()
        > 1
}

/// Distinct non-excluded response unigrams found in the message, over the
/// number of non-excluded response tokens.
pub fn extract_cr(message: &[String], response: &[String], stats: &FreqStats) -> f64 {
    let msg: HashSet<&str> = message.iter().map(String::as_str).collect();
    let mut shared: HashSet<&str> = HashSet::new();
    let mut denom = 0usize;
    for t in response.iter().map(String::as_str).filter(|t| !stats.is_excluded(t)) {
        denom += 1;
        if msg.contains(t) {
            shared.insert(t);
        }
    }
    if denom == 0 {
        0.0
    } else {
        (shared.len() as f64 / denom as f64).clamp(0.0, 1.0)
    }
}

/// Maximum normalized inverse word frequency over the response's words.
pub fn extract_s(response: &[String], stats: &FreqStats) -> f64 {
    response
        .iter()
        .filter(|t| !is_punctuation(t))
        .map(|t| stats.niwf(t))
        .fold(0.0, f64::max)
}

pub fn extract_attribute(
    attribute: Attribute,
    message: &[String],
    response: &[String],
    stats: &FreqStats,
) -> Result<Value> {
    Ok(match attribute {
        Attribute::RL => Value::Category(extract_rl(response)?),
        Attribute::DA => Value::Category(extract_da(response)),
        Attribute::MU => Value::Category(extract_mu(response).to_string()),
        Attribute::CR => Value::Real(extract_cr(message, response, stats)),
        Attribute::S => Value::Real(extract_s(response, stats)),
    })
}

pub fn extract_metaword(
    message: &[String],
    response: &[String],
    schema: &AttributeSchema,
    stats: &FreqStats,
) -> Result<MetaWord> {
    if response.is_empty() {
        return Err(Error::metaword("response", "empty response"));
    }
    let vars = schema
        .decls()
        .iter()
        .map(|d| {
            Ok(MetaWordVariable {
                attribute: d.attribute,
                value: extract_attribute(d.attribute, message, response, stats)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    MetaWord::new(vars)
}

/// Value of a tracked variable on the response prefix `y_1..y_t`.
pub fn prefix_feature(attribute: Attribute, message: &[String], prefix: &[String], stats: &FreqStats) -> Result<Value> {
    match attribute {
        Attribute::RL => {
            if prefix.is_empty() {
                return Err(Error::metaword("RL", "empty prefix"));
            }
            Ok(Value::Category(length_category(prefix.len())))
        }
        Attribute::CR => Ok(Value::Real(extract_cr(message, prefix, stats))),
        Attribute::S => Ok(Value::Real(extract_s(prefix, stats))),
        Attribute::DA | Attribute::MU => Err(Error::metaword(
            attribute.key(),
            "no prefix feature for a variable judged on the whole response",
        )),
    }
}

/// A message/response pair with the meta-word extracted from it.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedPair {
    pub message: String,
    pub response: String,
    pub metaword: MetaWord,
}

impl AnnotatedPair {
    pub fn to_json(&self) -> Json {
        serde_json::json!({
            "message": self.message,
            "response": self.response,
            "metaword": self.metaword.to_json(),
        })
    }

    pub fn from_json(j: &Json) -> Result<Self> {
        let field = |k: &str| -> Result<String> {
            j.get(k)
                .and_then(Json::as_str)
                .map(str::to_string)
                .ok_or_else(|| Error::metaword(k, "missing string field"))
        };
        let mw = j
            .get("metaword")
            .ok_or_else(|| Error::metaword("metaword", "missing field"))?;
        Ok(Self {
            message: field("message")?,
            response: field("response")?,
            metaword: MetaWord::from_json(mw)?,
        })
    }
}

pub fn annotate(message: &str, response: &str, schema: &AttributeSchema, stats: &FreqStats) -> Result<AnnotatedPair> {
    let m = tokenize(message);
    let r = tokenize(response);
    Ok(AnnotatedPair {
        message: message.to_string(),
        response: response.to_string(),
        metaword: extract_metaword(&m, &r, schema, stats)?,
    })
}

pub fn write_annotated(path: &Path, pairs: &[AnnotatedPair]) -> Result<()> {
    let mut f = std::io::BufWriter::new(File::create(path)?);
    for p in pairs {
        serde_json::to_writer(&mut f, &p.to_json())?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_annotated(path: &Path) -> Result<Vec<AnnotatedPair>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let wrap = |msg: String| Error::Parse { line: i + 1, msg };
        let j: Json = serde_json::from_str(&line).map_err(|e| wrap(e.to_string()))?;
        out.push(AnnotatedPair::from_json(&j).map_err(|e| wrap(e.to_string()))?);
    }
    Ok(out)
}
