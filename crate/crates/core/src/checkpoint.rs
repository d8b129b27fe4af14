//! Versioned JSON container for trained parameters.
//!
//! Tensors are stored as `(name, shape, row-major f64)`; f64 values are
//! written in shortest round-trip form, so a save/load cycle is bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::corpus::Vocab;
use crate::error::{Error, Result};
use crate::gtmn::MetaVocab;
use crate::metaword::AttributeSchema;
use crate::model::{GtmnSeq2Seq, ModelSpec};
use crate::scalar::Scalar;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Generator,
    Predictor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub kind: CheckpointKind,
    pub d: usize,
    pub schema: AttributeSchema,
    pub msg_vocab: Vocab,
    #[serde(default)]
    pub resp_vocab: Option<Vocab>,
    #[serde(default)]
    pub meta_vocab: Option<MetaVocab>,
    /// Training configuration echo.
    #[serde(default)]
    pub config: serde_json::Value,
    /// Per-epoch log records.
    #[serde(default)]
    pub history: Vec<serde_json::Value>,
    pub tensors: Vec<TensorRecord>,
}

pub(crate) fn records(named: Vec<(String, Tensor<f64>)>) -> Vec<TensorRecord> {
    named
        .into_iter()
        .map(|(name, t)| TensorRecord {
            name,
            shape: t.shape().to_vec(),
            data: t.into_data(),
        })
        .collect()
}

impl Checkpoint {
    pub fn from_model<T: Scalar>(
        model: &GtmnSeq2Seq<T>,
        config: serde_json::Value,
        history: Vec<serde_json::Value>,
    ) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            kind: CheckpointKind::Generator,
            d: model.spec.d,
            schema: model.spec.schema.clone(),
            msg_vocab: model.spec.msg_vocab.clone(),
            resp_vocab: Some(model.spec.resp_vocab.clone()),
            meta_vocab: Some(model.spec.meta_vocab.clone()),
            config,
            history,
            tensors: records(model.named_tensors()),
        }
    }

    pub fn expect_kind(&self, kind: CheckpointKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!(
                "expected a {kind:?} checkpoint, found {:?}",
                self.kind
            )));
        }
        Ok(())
    }

    pub fn named_tensors(&self) -> Result<Vec<(String, Tensor<f64>)>> {
        self.tensors
            .iter()
            .map(|r| Ok((r.name.clone(), Tensor::new(r.shape.clone(), r.data.clone())?)))
            .collect()
    }

    pub fn to_model<T: Scalar>(&self) -> Result<GtmnSeq2Seq<T>> {
        self.expect_kind(CheckpointKind::Generator)?;
        let missing = |what: &str| Error::Checkpoint(format!("generator checkpoint without {what}"));
        let spec = ModelSpec {
            d: self.d,
            schema: self.schema.clone(),
            msg_vocab: self.msg_vocab.clone(),
            resp_vocab: self.resp_vocab.clone().ok_or_else(|| missing("response vocabulary"))?,
            meta_vocab: self.meta_vocab.clone().ok_or_else(|| missing("meta-word vocabulary"))?,
        };
        GtmnSeq2Seq::from_tensors(spec, &self.named_tensors()?)
    }

    pub fn to_writer<W: Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer(w, self)?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.to_writer(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path)?;
        let ck: Self = serde_json::from_reader(BufReader::new(f))?;
        if ck.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {} (expected {FORMAT_VERSION})",
                ck.format_version
            )));
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::training::tests::toy_setup;

    #[test]
    fn save_load_is_bit_exact() {
        let (m, ex, _) = toy_setup(5, AttributeSchema::full(), 3, 21);
        let ck = Checkpoint::from_model(&m, serde_json::json!({"lambda": 1.0}), vec![]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        let m2: GtmnSeq2Seq<f64> = back.to_model().unwrap();
        for e in &ex {
            let mut t1 = Tape::new(&m.params);
            let mut t2 = Tape::new(&m2.params);
            let a = m.teacher_forced(&mut t1, &e.message, &e.metaword, &e.targets).unwrap();
            let b = m2.teacher_forced(&mut t2, &e.message, &e.metaword, &e.targets).unwrap();
            for (x, y) in a.steps.iter().zip(&b.steps) {
                assert_eq!(t1.value(x.log_probs), t2.value(y.log_probs));
            }
        }
        // saving the reloaded model gives identical bytes
        let mut b1 = Vec::new();
        let mut b2 = Vec::new();
        ck.to_writer(&mut b1).unwrap();
        Checkpoint::from_model(&m2, serde_json::json!({"lambda": 1.0}), vec![])
            .to_writer(&mut b2)
            .unwrap();
        assert_eq!(b1, b2);
    }

    #[test]
    fn rejects_wrong_version_and_kind() {
        let (m, _, _) = toy_setup(3, AttributeSchema::empty(), 1, 22);
        let mut ck = Checkpoint::from_model(&m, serde_json::Value::Null, vec![]);
        ck.kind = CheckpointKind::Predictor;
        assert!(ck.to_model::<f64>().is_err());
        ck.kind = CheckpointKind::Generator;
        ck.format_version = 99;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        ck.save(&path).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let (m, _, _) = toy_setup(3, AttributeSchema::empty(), 1, 23);
        let mut ck = Checkpoint::from_model(&m, serde_json::Value::Null, vec![]);
        ck.tensors[0].shape = vec![1, ck.tensors[0].data.len()];
        assert!(ck.to_model::<f64>().is_err());
    }
}
