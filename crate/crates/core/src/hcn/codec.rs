//! Binary model container.
//!
//! Layout, all little-endian:
//! `"HCN1"`, format u32, model version u64, V d E T H as u32,
//! learning rate f64, max epochs u32, clip norm f64, seed u64, init scale f64,
//! stop loss f64, catalog JSON (u64 length + bytes), parameter count u64, parameters as f64.

use serde::{Deserialize, Serialize};

use super::network::Params;
use super::{Featurizer, HcnError, Hyperparams, PolicyModel};
use crate::compile::Catalog;
use crate::flow::EntityDef;
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"HCN1";
pub const FORMAT_VERSION: u32 = 1;

const MAX_WIDTH: usize = 1 << 16;

#[derive(Serialize, Deserialize)]
struct CatalogBlob {
    vocab: Vec<String>,
    entity_order: Vec<String>,
    entities: Vec<EntityDef>,
    catalog: Catalog,
}

pub fn save_model<S: Scalar>(model: &PolicyModel<S>) -> Vec<u8> {
    let shape = model.params.shape;
    let mut out = Vec::with_capacity(128 + shape.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&model.version.to_le_bytes());
    for dim in [shape.vocab, shape.embedding, shape.entities, shape.templates, shape.hidden] {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    let h = &model.hyper;
    out.extend_from_slice(&h.learning_rate.to_le_bytes());
    out.extend_from_slice(&(h.max_epochs as u32).to_le_bytes());
    out.extend_from_slice(&h.clip_norm.to_le_bytes());
    out.extend_from_slice(&h.seed.to_le_bytes());
    out.extend_from_slice(&h.init_scale.to_le_bytes());
    out.extend_from_slice(&h.stop_loss.to_le_bytes());
    let blob = CatalogBlob {
        vocab: model.featurizer.vocab.clone(),
        entity_order: model.featurizer.entity_order.clone(),
        entities: model.entities.clone(),
        catalog: model.catalog.clone(),
    };
    let json = serde_json::to_vec(&blob).expect("catalog serializes");
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(model.params.data.len() as u64).to_le_bytes());
    for v in &model.params.data {
        out.extend_from_slice(&v.as_f64().to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], HcnError> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(HcnError::TruncatedFile)?;
        let out = &self.bytes[self.at..end];
        self.at = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, HcnError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, HcnError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, HcnError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn load_model(bytes: &[u8]) -> Result<PolicyModel<f64>, HcnError> {
    load_model_as(bytes)
}

/// Loads a model into any scalar type; values are stored as f64.
pub fn load_model_as<S: Scalar>(bytes: &[u8]) -> Result<PolicyModel<S>, HcnError> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(4).map_err(|_| HcnError::BadMagic)? != MAGIC {
        return Err(HcnError::BadMagic);
    }
    let format = r.u32()?;
    if format != FORMAT_VERSION {
        return Err(HcnError::DimMismatch(format!("unsupported format version {format}")));
    }
    let version = r.u64()?;
    let mut dims = [0usize; 5];
    for d in &mut dims {
        *d = r.u32()? as usize;
    }
    let [vocab, embedding, entities, templates, hidden] = dims;
    let hyper = Hyperparams {
        embedding_dim: embedding,
        hidden_size: hidden,
        learning_rate: r.f64()?,
        max_epochs: r.u32()? as usize,
        clip_norm: r.f64()?,
        seed: r.u64()?,
        init_scale: r.f64()?,
        stop_loss: r.f64()?,
    };
    let json_len = r.u64()? as usize;
    let blob: CatalogBlob =
        serde_json::from_slice(r.take(json_len)?).map_err(|e| HcnError::BadCatalog(e.to_string()))?;
    let check = |what: &str, header: usize, found: usize| {
        if header == found {
            Ok(())
        } else {
            Err(HcnError::DimMismatch(format!("{what}: header says {header}, catalog has {found}")))
        }
    };
    check("vocabulary", vocab, blob.vocab.len())?;
    check("entities", entities, blob.entity_order.len())?;
    check("templates", templates, blob.catalog.len())?;
    check("masks", templates, blob.catalog.masks.len())?;

    let featurizer = Featurizer {
        vocab: blob.vocab,
        embedding_dim: embedding,
        entity_order: blob.entity_order,
        template_count: templates,
    };
    if embedding > MAX_WIDTH || hidden > MAX_WIDTH {
        return Err(HcnError::DimMismatch(format!("layer width {embedding}x{hidden} is implausible")));
    }
    let shape = featurizer.shape(hidden);
    let count = r.u64()? as usize;
    if count.checked_mul(8).is_none_or(|n| n > bytes.len() - r.at) {
        return Err(HcnError::TruncatedFile);
    }
    if count != shape.len() {
        return Err(HcnError::DimMismatch(format!("expected {} parameters, file has {count}", shape.len())));
    }
    let data = (0..count).map(|_| r.f64().map(S::of)).collect::<Result<Vec<S>, _>>()?;
    if r.at != bytes.len() {
        return Err(HcnError::DimMismatch(format!("{} trailing bytes", bytes.len() - r.at)));
    }
    Ok(PolicyModel {
        version,
        hyper,
        featurizer,
        entities: blob.entities,
        catalog: blob.catalog,
        params: Params { shape, data },
    })
}
