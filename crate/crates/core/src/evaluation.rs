//! Automatic metrics: BLEU, distinct-n, embedding similarity, A-bow/E-bow
//! set precision/recall, meta-word expression and perplexity.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, FreqStats, RawPair};
use crate::error::{Error, Result};
use crate::inference::Generation;
use crate::metaword::{extract_attribute, Attribute, AttributeSchema, MetaWord, Value, VarType};
use crate::model::GtmnSeq2Seq;
use crate::scalar::Scalar;

pub use crate::training::perplexity;

/// Added to a zero n-gram precision.
pub const BLEU_EPSILON: f64 = 1e-9;
pub const BLEU_MAX_ORDER: usize = 4;

fn ngrams<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w.iter().map(|s| s.as_ref()).collect()).or_insert(0) += 1;
        }
    }
    out
}

/// Corpus BLEU up to 4-grams with uniform weights, brevity penalty against
/// the closest reference length, and `BLEU_EPSILON` in place of zero
/// precisions.
pub fn corpus_bleu<S: AsRef<str>>(hypotheses: &[Vec<S>], references: &[Vec<Vec<S>>]) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(Error::Config(format!(
            "{} hypotheses but {} reference sets",
            hypotheses.len(),
            references.len()
        )));
    }
    if hypotheses.is_empty() {
        return Err(Error::Empty("hypothesis set"));
    }
    let mut matches = [0usize; BLEU_MAX_ORDER];
    let mut totals = [0usize; BLEU_MAX_ORDER];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (hyp, refs) in hypotheses.iter().zip(references) {
        if refs.is_empty() {
            return Err(Error::Empty("reference set"));
        }
        hyp_len += hyp.len();
        let closest = refs
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| (l.abs_diff(hyp.len()), l))
            .unwrap_or(0);
        ref_len += closest;
        for n in 1..=BLEU_MAX_ORDER {
            let h = ngrams(hyp, n);
            let mut max_ref: HashMap<Vec<&str>, usize> = HashMap::new();
            for r in refs {
                for (g, c) in ngrams(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            for (g, c) in &h {
                matches[n - 1] += (*c).min(max_ref.get(g).copied().unwrap_or(0));
            }
            totals[n - 1] += h.values().sum::<usize>();
        }
    }
    // Orders with no candidate n-grams anywhere in the corpus carry no
    // evidence and are left out of the geometric mean.
    let orders: Vec<usize> = (0..BLEU_MAX_ORDER).filter(|&n| totals[n] > 0).collect();
    if orders.is_empty() {
        return Ok(0.0);
    }
    let mut log_p = 0.0;
    for &n in &orders {
        let p = if matches[n] == 0 {
            BLEU_EPSILON / totals[n] as f64
        } else {
            matches[n] as f64 / totals[n] as f64
        };
        log_p += p.ln() / orders.len() as f64;
    }
    let bp = if hyp_len == 0 {
        0.0
    } else if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok((bp * log_p.exp()).clamp(0.0, 1.0))
}

/// Single-reference corpus BLEU.
pub fn bleu<S: AsRef<str> + Clone>(hypotheses: &[Vec<S>], references: &[Vec<S>]) -> Result<f64> {
    let refs: Vec<Vec<Vec<S>>> = references.iter().map(|r| vec![r.clone()]).collect();
    corpus_bleu(hypotheses, &refs)
}

/// Distinct n-grams over total n-grams in the whole set; 0 without n-grams.
pub fn distinct_n<S: AsRef<str>>(responses: &[Vec<S>], n: usize) -> f64 {
    let mut distinct = HashSet::new();
    let mut total = 0;
    for r in responses {
        if n == 0 || r.len() < n {
            continue;
        }
        for w in r.windows(n) {
            distinct.insert(w.iter().map(|s| s.as_ref()).collect::<Vec<_>>());
            total += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        distinct.len() as f64 / total as f64
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingOrigin {
    Model,
    File(String),
}

/// Word vectors used by the embedding metrics. Out-of-vocabulary tokens are
/// skipped.
#[derive(Clone, Debug)]
pub struct EmbeddingSource {
    vectors: HashMap<String, Vec<f64>>,
    dim: usize,
    pub origin: EmbeddingOrigin,
}

impl EmbeddingSource {
    pub fn new(vectors: HashMap<String, Vec<f64>>, origin: EmbeddingOrigin) -> Result<Self> {
        let dim = vectors.values().next().map_or(0, Vec::len);
        if dim == 0 {
            return Err(Error::Empty("embedding table"));
        }
        if let Some((w, v)) = vectors.iter().find(|(_, v)| v.len() != dim) {
            return Err(Error::Config(format!(
                "embedding for {w:?} has {} values, expected {dim}",
                v.len()
            )));
        }
        Ok(Self { vectors, dim, origin })
    }

    /// The response-side embedding table of a trained generator; reserved
    /// symbols are left out.
    pub fn from_model<T: Scalar>(model: &GtmnSeq2Seq<T>) -> Result<Self> {
        let table = model.params.get(model.layers.dec_embedding);
        let d = model.d();
        let vectors = model
            .spec
            .resp_vocab
            .tokens()
            .iter()
            .enumerate()
            .skip(crate::corpus::RESERVED.len())
            .map(|(i, t)| {
                (
                    t.clone(),
                    table.data()[i * d..(i + 1) * d]
                        .iter()
                        .map(|x| x.to_f64_lossy())
                        .collect(),
                )
            })
            .collect();
        Self::new(vectors, EmbeddingOrigin::Model)
    }

    /// `token v1 v2 ...` per line.
    pub fn from_reader<R: BufRead>(reader: R, origin: EmbeddingOrigin) -> Result<Self> {
        let mut vectors = HashMap::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let mut parts = line.split_whitespace();
            let Some(word) = parts.next() else { continue };
            let v = parts
                .map(|x| x.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Parse {
                    line: i + 1,
                    msg: e.to_string(),
                })?;
            vectors.insert(word.to_string(), v);
        }
        Self::new(vectors, origin)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::from_reader(f, EmbeddingOrigin::File(path.display().to_string()))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, token: &str) -> Option<&[f64]> {
        self.vectors.get(token).map(Vec::as_slice)
    }

    fn lookup<'a, S: AsRef<str>>(&'a self, tokens: &[S]) -> Vec<&'a [f64]> {
        tokens.iter().filter_map(|t| self.get(t.as_ref())).collect()
    }

    /// Mean of the in-vocabulary token vectors.
    pub fn average<S: AsRef<str>>(&self, tokens: &[S]) -> Option<Vec<f64>> {
        let vs = self.lookup(tokens);
        if vs.is_empty() {
            return None;
        }
        let mut out = vec![0.0; self.dim];
        for v in &vs {
            for (o, x) in out.iter_mut().zip(*v) {
                *o += x;
            }
        }
        let n = vs.len() as f64;
        out.iter_mut().for_each(|o| *o /= n);
        Some(out)
    }

    /// Per dimension, the component with the largest magnitude.
    pub fn extrema<S: AsRef<str>>(&self, tokens: &[S]) -> Option<Vec<f64>> {
        let vs = self.lookup(tokens);
        if vs.is_empty() {
            return None;
        }
        Some(
            (0..self.dim)
                .map(|j| {
                    vs.iter()
                        .map(|v| v[j])
                        .fold(0.0, |best: f64, x| if x.abs() > best.abs() { x } else { best })
                })
                .collect(),
        )
    }
}

/// Cosine similarity; 0 when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingScores {
    pub average: f64,
    pub extrema: f64,
    pub greedy: f64,
}

/// `None` when either sentence has no in-vocabulary token.
pub fn embedding_metrics<S: AsRef<str>>(hyp: &[S], reference: &[S], src: &EmbeddingSource) -> Option<EmbeddingScores> {
    let (hv, rv) = (src.lookup(hyp), src.lookup(reference));
    if hv.is_empty() || rv.is_empty() {
        return None;
    }
    let one_way = |from: &[&[f64]], to: &[&[f64]]| -> f64 {
        from.iter()
            .map(|a| to.iter().map(|b| cosine(a, b)).fold(f64::NEG_INFINITY, f64::max))
            .sum::<f64>()
            / from.len() as f64
    };
    Some(EmbeddingScores {
        average: cosine(&src.average(hyp)?, &src.average(reference)?),
        extrema: cosine(&src.extrema(hyp)?, &src.extrema(reference)?),
        greedy: 0.5 * (one_way(&hv, &rv) + one_way(&rv, &hv)),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BowScores {
    pub a_precision: f64,
    pub a_recall: f64,
    pub e_precision: f64,
    pub e_recall: f64,
}

fn set_precision_recall(gen: &[Vec<f64>], refs: &[Vec<f64>]) -> (f64, f64) {
    let best = |a: &Vec<f64>, set: &[Vec<f64>]| set.iter().map(|b| cosine(a, b)).fold(f64::NEG_INFINITY, f64::max);
    let p = gen.iter().map(|g| best(g, refs)).sum::<f64>() / gen.len() as f64;
    let r = refs.iter().map(|r| best(r, gen)).sum::<f64>() / refs.len() as f64;
    (p, r)
}

/// Precision: mean over generated responses of the best cosine against the
/// references. Recall: the same from the reference side. Sentences without
/// in-vocabulary tokens are dropped.
pub fn abow_ebow<S: AsRef<str>>(
    generated: &[Vec<S>],
    references: &[Vec<S>],
    src: &EmbeddingSource,
) -> Result<BowScores> {
    let vecs = |set: &[Vec<S>], f: &dyn Fn(&[S]) -> Option<Vec<f64>>| -> Vec<Vec<f64>> {
        set.iter().filter_map(|s| f(s)).collect()
    };
    let avg = |s: &[S]| src.average(s);
    let ext = |s: &[S]| src.extrema(s);
    let (ga, ra) = (vecs(generated, &avg), vecs(references, &avg));
    let (ge, re) = (vecs(generated, &ext), vecs(references, &ext));
    if ga.is_empty() {
        return Err(Error::Empty("generated set"));
    }
    if ra.is_empty() {
        return Err(Error::Empty("reference set"));
    }
    let (a_precision, a_recall) = set_precision_recall(&ga, &ra);
    let (e_precision, e_recall) = set_precision_recall(&ge, &re);
    Ok(BowScores {
        a_precision,
        a_recall,
        e_precision,
        e_recall,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariableScore {
    pub attribute: Attribute,
    /// `accuracy` for categorical variables, `square_deviation` for reals.
    pub metric: String,
    /// `None` when no instance could be scored.
    pub value: Option<f64>,
    pub count: usize,
    pub skipped: usize,
}

/// Re-extracts each variable from the generated response and compares it
/// with the meta-word used to generate it.
pub fn metaword_expression<S: AsRef<str>>(
    items: &[(Vec<S>, Vec<S>, MetaWord)],
    schema: &AttributeSchema,
    stats: &FreqStats,
) -> Result<Vec<VariableScore>> {
    if items.is_empty() {
        return Err(Error::Empty("response set"));
    }
    let mut out = Vec::new();
    for decl in schema.decls() {
        let (mut sum, mut count, mut skipped) = (0.0, 0, 0);
        for (msg, resp, mw) in items {
            let Some(target) = mw.get(decl.attribute) else {
                skipped += 1;
                continue;
            };
            let msg: Vec<String> = msg.iter().map(|s| s.as_ref().to_string()).collect();
            let resp: Vec<String> = resp.iter().map(|s| s.as_ref().to_string()).collect();
            let Ok(got) = extract_attribute(decl.attribute, &msg, &resp, stats) else {
                skipped += 1;
                continue;
            };
            match (target, got) {
                (Value::Category(a), Value::Category(b)) => sum += f64::from(u8::from(*a == b)),
                (Value::Real(a), Value::Real(b)) => sum += (a - b).powi(2),
                _ => {
                    skipped += 1;
                    continue;
                }
            }
            count += 1;
        }
        out.push(VariableScore {
            attribute: decl.attribute,
            metric: match decl.var_type {
                VarType::Categorical => "accuracy".into(),
                VarType::Real => "square_deviation".into(),
            },
            value: (count > 0).then(|| sum / count as f64),
            count,
            skipped,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelevanceScores {
    pub bleu: f64,
    pub embedding: Option<EmbeddingScores>,
    /// Instances with at least one in-vocabulary token on both sides.
    pub embedding_evaluated: usize,
    pub embedding_skipped: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiversityScores {
    pub distinct_1: f64,
    pub distinct_2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportConfig {
    pub bleu_max_order: usize,
    pub bleu_epsilon: f64,
    pub embedding_source: Option<EmbeddingOrigin>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub generated: usize,
    pub messages: usize,
    pub references: usize,
    pub relevance: RelevanceScores,
    pub diversity: DiversityScores,
    /// Present when some message has several references.
    pub one_to_many: Option<BowScores>,
    pub expression: Option<Vec<VariableScore>>,
    pub perplexity: Option<f64>,
    pub config: ReportConfig,
}

/// Groups consecutive items by message, keeping first-seen order.
fn group_by_message<'a, I: Iterator<Item = (&'a str, &'a str)>>(items: I) -> Vec<(String, Vec<Vec<String>>)> {
    let mut groups: Vec<(String, Vec<Vec<String>>)> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for (m, r) in items {
        let i = *index.entry(m.to_string()).or_insert_with(|| {
            groups.push((m.to_string(), Vec::new()));
            groups.len() - 1
        });
        groups[i].1.push(tokenize(r));
    }
    groups
}

/// Builds a report from generation records and reference pairs. Both sides
/// are grouped by message; the message sequences must agree.
pub fn build_report(
    generated: &[Generation],
    references: &[RawPair],
    embeddings: Option<&EmbeddingSource>,
    stats: Option<(&AttributeSchema, &FreqStats)>,
    perplexity: Option<f64>,
) -> Result<EvalReport> {
    if generated.is_empty() {
        return Err(Error::Empty("generated set"));
    }
    let gen_groups = group_by_message(generated.iter().map(|g| (g.message.as_str(), g.response.as_str())));
    let ref_groups = group_by_message(references.iter().map(|p| (p.message.as_str(), p.response.as_str())));
    if gen_groups.len() != ref_groups.len() {
        return Err(Error::Config(format!(
            "alignment mismatch: {} generated messages vs {} reference messages",
            gen_groups.len(),
            ref_groups.len()
        )));
    }
    for (i, (g, r)) in gen_groups.iter().zip(&ref_groups).enumerate() {
        if g.0.trim() != r.0.trim() {
            return Err(Error::Config(format!(
                "alignment mismatch at message {}: {:?} vs {:?}",
                i + 1,
                g.0,
                r.0
            )));
        }
    }

    let mut hyps = Vec::new();
    let mut refs = Vec::new();
    for ((_, gs), (_, rs)) in gen_groups.iter().zip(&ref_groups) {
        for g in gs {
            hyps.push(g.clone());
            refs.push(rs.clone());
        }
    }
    let bleu = corpus_bleu(&hyps, &refs)?;

    let (mut emb_sum, mut evaluated, mut skipped) = ((0.0, 0.0, 0.0), 0, 0);
    if let Some(src) = embeddings {
        for (h, rs) in hyps.iter().zip(&refs) {
            // best-matching reference for each score
            let scores: Vec<EmbeddingScores> = rs.iter().filter_map(|r| embedding_metrics(h, r, src)).collect();
            if scores.is_empty() {
                skipped += 1;
                continue;
            }
            let best = |f: fn(&EmbeddingScores) -> f64| scores.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
            emb_sum.0 += best(|s| s.average);
            emb_sum.1 += best(|s| s.extrema);
            emb_sum.2 += best(|s| s.greedy);
            evaluated += 1;
        }
    }
    let embedding = (evaluated > 0).then(|| {
        let n = evaluated as f64;
        EmbeddingScores {
            average: emb_sum.0 / n,
            extrema: emb_sum.1 / n,
            greedy: emb_sum.2 / n,
        }
    });

    let one_to_many = match embeddings {
        Some(src) if ref_groups.iter().any(|(_, rs)| rs.len() > 1) => {
            let mut acc = [0.0; 4];
            let mut n = 0;
            for ((_, gs), (_, rs)) in gen_groups.iter().zip(&ref_groups) {
                if let Ok(s) = abow_ebow(gs, rs, src) {
                    acc[0] += s.a_precision;
                    acc[1] += s.a_recall;
                    acc[2] += s.e_precision;
                    acc[3] += s.e_recall;
                    n += 1;
                }
            }
            (n > 0).then(|| BowScores {
                a_precision: acc[0] / n as f64,
                a_recall: acc[1] / n as f64,
                e_precision: acc[2] / n as f64,
                e_recall: acc[3] / n as f64,
            })
        }
        _ => None,
    };

    let expression = match stats {
        Some((schema, st)) => {
            let items: Vec<(Vec<String>, Vec<String>, MetaWord)> = generated
                .iter()
                .map(|g| (tokenize(&g.message), tokenize(&g.response), g.metaword.clone()))
                .collect();
            Some(metaword_expression(&items, schema, st)?)
        }
        None => None,
    };

    Ok(EvalReport {
        generated: generated.len(),
        messages: gen_groups.len(),
        references: references.len(),
        relevance: RelevanceScores {
            bleu,
            embedding,
            embedding_evaluated: evaluated,
            embedding_skipped: skipped,
        },
        diversity: DiversityScores {
            distinct_1: distinct_n(&hyps, 1),
            distinct_2: distinct_n(&hyps, 2),
        },
        one_to_many,
        expression,
        perplexity,
        config: ReportConfig {
            bleu_max_order: BLEU_MAX_ORDER,
            bleu_epsilon: BLEU_EPSILON,
            embedding_source: embeddings.map(|e| e.origin.clone()),
        },
    })
}

/// Reads generation output lines. `metaword` and `log_prob` are optional so
/// a plain `{"message", "response"}` file can be scored as well; records
/// without a meta-word are skipped by the expression metric.
pub fn load_generated(path: &Path) -> Result<Vec<Generation>> {
    let reader = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let wrap = |msg: String| Error::Parse { line: i + 1, msg };
        let j: serde_json::Value = serde_json::from_str(&line).map_err(|e| wrap(e.to_string()))?;
        let text = |k: &str| {
            j.get(k)
                .and_then(serde_json::Value::as_str)
                .map(str::to_string)
                .ok_or_else(|| wrap(format!("missing string field {k:?}")))
        };
        let metaword = match j.get("metaword") {
            Some(m) => MetaWord::from_json(m).map_err(|e| wrap(e.to_string()))?,
            None => MetaWord::default(),
        };
        out.push(Generation {
            message: text("message")?,
            response: text("response")?,
            metaword,
            log_prob: j
                .get("log_prob")
                .and_then(serde_json::Value::as_f64)
                .unwrap_or(f64::NAN),
        });
    }
    Ok(out)
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let row = |f: &mut fmt::Formatter<'_>, name: &str, v: f64| writeln!(f, "  {name:<20} {v:>10.4}");
        writeln!(
            f,
            "instances: {} generated, {} messages, {} references",
            self.generated, self.messages, self.references
        )?;
        writeln!(f, "relevance")?;
        row(f, "BLEU", self.relevance.bleu)?;
        if let Some(e) = &self.relevance.embedding {
            row(f, "Average", e.average)?;
            row(f, "Extrema", e.extrema)?;
            row(f, "Greedy", e.greedy)?;
            writeln!(
                f,
                "  ({} skipped: no in-vocabulary tokens)",
                self.relevance.embedding_skipped
            )?;
        }
        writeln!(f, "diversity")?;
        row(f, "Distinct-1", self.diversity.distinct_1)?;
        row(f, "Distinct-2", self.diversity.distinct_2)?;
        if let Some(b) = &self.one_to_many {
            writeln!(f, "one-to-many")?;
            row(f, "A-bow precision", b.a_precision)?;
            row(f, "A-bow recall", b.a_recall)?;
            row(f, "E-bow precision", b.e_precision)?;
            row(f, "E-bow recall", b.e_recall)?;
        }
        if let Some(ex) = &self.expression {
            writeln!(f, "meta-word expression")?;
            for s in ex {
                match s.value {
                    Some(v) => row(f, &format!("{} {}", s.attribute.key(), s.metric), v)?,
                    None => writeln!(
                        f,
                        "  {:<20} {:>10}",
                        format!("{} {}", s.attribute.key(), s.metric),
                        "n/a"
                    )?,
                }
            }
        }
        if let Some(p) = self.perplexity {
            writeln!(f, "perplexity")?;
            row(f, "PPL", p)?;
        }
        Ok(())
    }
}
