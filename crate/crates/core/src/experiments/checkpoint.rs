//! Checkpoint file: magic "TSCK", u32 version, u32-length-prefixed UTF-8
//! config text, u32 tensor count, then per tensor a u16-length-prefixed name,
//! u8 rank, rank u64 dims and little-endian f64 data. All integers are
//! little-endian.

use std::fs;
use std::path::Path;

use super::config::{model_config_text, take_model_config};
use crate::codec::{byte_len, ByteReader};
use crate::error::{Error, Result};
use crate::keyvalue::KeyValues;
use crate::models::{dense_shapes, ModelConfig, StepModel, HEAD_PREFIX};
use crate::numerics::{ParamStore, Tensor};
use crate::seso::{PermutationTable, SesoModel, SEGMENTS, SESO_HEAD_PREFIX};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TSCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    /// (P, seed) of the permutation table, for sequence-sorting models.
    pub table: Option<(usize, u64)>,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn from_step(model: &StepModel) -> Self {
        Self {
            config: model.config.clone(),
            table: None,
            params: model.store.clone(),
        }
    }

    pub fn from_seso(model: &SesoModel) -> Self {
        Self {
            config: model.config.clone(),
            table: Some((model.table.len(), model.table.seed())),
            params: model.store.clone(),
        }
    }

    fn config_text(&self) -> String {
        let mut text = model_config_text(&self.config);
        if let Some((p, seed)) = self.table {
            text += &format!("permutations = {p}\ntable_seed = {seed}\n");
        }
        text
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let text = self.config_text();
        let text_len = u32::try_from(text.len()).map_err(|_| Error::Config("config text too long".into()))?;
        out.extend_from_slice(&text_len.to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        let count = u32::try_from(self.params.len()).map_err(|_| Error::Config("too many tensors".into()))?;
        out.extend_from_slice(&count.to_le_bytes());
        for p in self.params.iter() {
            let name_len = u16::try_from(p.name.len())
                .map_err(|_| Error::Config(format!("parameter name {:?} too long", p.name)))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            let rank = u8::try_from(p.value.rank()).map_err(|_| Error::Config("tensor rank above 255".into()))?;
            out.push(rank);
            for &d in p.value.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Structural decoding only; [`Checkpoint::step_model`] and
    /// [`Checkpoint::seso_model`] check the tensors against the architecture.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(CHECKPOINT_MAGIC)?;
        r.version(CHECKPOINT_VERSION)?;
        let text_len = r.u32()? as usize;
        let text =
            std::str::from_utf8(r.take(text_len)?).map_err(|_| Error::Malformed("config text is not UTF-8".into()))?;
        let (config, table) = parse_config_text(text).map_err(|e| match e {
            Error::Config(msg) => Error::Malformed(format!("checkpoint config: {msg}")),
            e => e,
        })?;

        let count = r.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Malformed("parameter name is not UTF-8".into()))?
                .to_string();
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.len_u64("dimension")?);
            }
            let elements = shape.iter().try_fold(1usize, |acc, &d| byte_len(acc, d))?;
            let bytes = byte_len(elements, 8)?;
            if bytes > r.remaining() {
                return Err(Error::Truncated {
                    needed: bytes,
                    available: r.remaining(),
                });
            }
            let data = r
                .take(bytes)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            let value = Tensor::new(shape, data).map_err(|e| Error::Malformed(format!("{name}: {e}")))?;
            params.add(name, value).map_err(|e| Error::Malformed(e.to_string()))?;
        }
        r.finish()?;
        Ok(Self { config, table, params })
    }

    /// Errors unless the stored architecture matches `expected`.
    pub fn expect_backbone(&self, expected: &ModelConfig) -> Result<()> {
        if !self.config.same_backbone(expected) {
            return Err(Error::Incompatible(format!(
                "checkpoint holds a {} (N = {}, H = {}), requested {} (N = {}, H = {})",
                self.config.label(),
                self.config.input_dim,
                self.config.hidden,
                expected.label(),
                expected.input_dim,
                expected.hidden
            )));
        }
        Ok(())
    }

    pub fn step_model(&self) -> Result<StepModel> {
        if self.table.is_some() {
            return Err(Error::Incompatible(
                "checkpoint holds a sequence-sorting model; strip its puzzle head to train steps".into(),
            ));
        }
        let mut expected = self.config.backbone_shapes();
        expected.extend(dense_shapes(
            HEAD_PREFIX,
            self.config.rep_width(),
            self.config.num_classes,
        ));
        check_shapes(&expected, &self.params)?;
        let mut model = StepModel::build(&self.config, 0)?;
        copy_values(&mut model.store, &self.params)?;
        Ok(model)
    }

    pub fn seso_model(&self) -> Result<SesoModel> {
        let (p, seed) = self
            .table
            .ok_or_else(|| Error::Incompatible("checkpoint holds no permutation table".into()))?;
        let mut expected = self.config.backbone_shapes();
        expected.extend(dense_shapes(SESO_HEAD_PREFIX, SEGMENTS * self.config.rep_width(), p));
        check_shapes(&expected, &self.params)?;
        let table = PermutationTable::build(p, seed).map_err(|e| Error::Malformed(e.to_string()))?;
        let mut model = SesoModel::build(&self.config, table, 0)?;
        copy_values(&mut model.store, &self.params)?;
        Ok(model)
    }
}

fn parse_config_text(text: &str) -> Result<(ModelConfig, Option<(usize, u64)>)> {
    let mut kv = KeyValues::parse(text)?;
    let config = take_model_config(&mut kv)?;
    let table = match (kv.take::<usize>("permutations")?, kv.take::<u64>("table_seed")?) {
        (Some(p), Some(seed)) => Some((p, seed)),
        (None, None) => None,
        _ => return Err(Error::Config("permutations and table_seed must appear together".into())),
    };
    kv.finish()?;
    Ok((config, table))
}

/// Unknown names and wrong shapes are distinct errors; missing tensors make
/// the checkpoint malformed.
fn check_shapes(expected: &[(String, Vec<usize>)], params: &ParamStore) -> Result<()> {
    for p in params.iter() {
        match expected.iter().find(|(name, _)| *name == p.name) {
            None => return Err(Error::UnknownParameter(p.name.clone())),
            Some((_, shape)) if shape.as_slice() != p.value.shape() => {
                return Err(Error::ParameterShape {
                    name: p.name.clone(),
                    expected: shape.clone(),
                    found: p.value.shape().to_vec(),
                })
            }
            Some(_) => {}
        }
    }
    if let Some((name, _)) = expected.iter().find(|(name, _)| params.by_name(name).is_none()) {
        return Err(Error::Malformed(format!("checkpoint lacks parameter {name:?}")));
    }
    Ok(())
}

fn copy_values(dst: &mut ParamStore, src: &ParamStore) -> Result<()> {
    src.iter().try_for_each(|p| dst.set_value(&p.name, p.value.clone()))
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = ckpt.encode()?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::decode(&bytes)
}
