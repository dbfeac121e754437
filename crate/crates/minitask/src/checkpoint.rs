//! Single-file checkpoints: a fixed magic and format version, a JSON
//! manifest (configs, vocabulary, tensor table), then every parameter's f64
//! data little-endian in manifest order. Reads are strict: any mismatch
//! between manifest and payload is an error, never a best-effort load.

use crate::autodiff::Params;
use crate::encoder::{EncoderConfig, Vocab};
use crate::error::{Error, Result};
use crate::gan::GanConfig;
use crate::heads::HeadConfig;
use crate::tensor::Tensor;
use crate::train::Model;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"MTCK";
/// Bump on any layout change; old readers must refuse newer files.
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Element offset into the payload.
    offset: usize,
    len: usize,
}

/// Exactly one of `heads`/`gan` is present: a multitask checkpoint carries
/// head parameters, an adversarial one carries generator and discriminator
/// parameters.
#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    encoder: EncoderConfig,
    heads: Option<HeadConfig>,
    gan: Option<GanConfig>,
    vocab: Vec<String>,
    tensors: Vec<TensorEntry>,
}

/// A loaded checkpoint of either flavor.
#[derive(Debug)]
pub struct Checkpoint {
    pub params: Params,
    pub encoder_cfg: EncoderConfig,
    pub head_cfg: Option<HeadConfig>,
    pub gan_cfg: Option<GanConfig>,
    pub vocab: Vocab,
}

impl Checkpoint {
    /// The multitask model inside, or an error for adversarial checkpoints.
    pub fn into_model(self) -> Result<(Model, Vocab)> {
        let head_cfg = self.head_cfg.ok_or_else(|| {
            Error::Contract("checkpoint holds an adversarial run, not a multitask model".into())
        })?;
        Ok((
            Model {
                params: self.params,
                encoder_cfg: self.encoder_cfg,
                head_cfg,
            },
            self.vocab,
        ))
    }
}

fn corrupt(path: &Path, why: impl std::fmt::Display) -> Error {
    Error::Contract(format!("checkpoint {}: {why}", path.display()))
}

fn write_file(
    path: &Path,
    params: &Params,
    encoder: &EncoderConfig,
    heads: Option<&HeadConfig>,
    gan: Option<&GanConfig>,
    vocab: &Vocab,
) -> Result<()> {
    let mut tensors = Vec::with_capacity(params.len());
    let mut payload: Vec<u8> = Vec::new();
    let mut offset = 0usize;
    for (name, value, _) in params.iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: value.shape().to_vec(),
            offset,
            len: value.numel(),
        });
        offset += value.numel();
        for &x in value.data() {
            payload.extend_from_slice(&x.to_le_bytes());
        }
    }
    let manifest = Manifest {
        encoder: encoder.clone(),
        heads: heads.cloned(),
        gan: gan.cloned(),
        vocab: vocab.words().to_vec(),
        tensors,
    };
    let manifest_bytes =
        serde_json::to_vec(&manifest).map_err(|e| corrupt(path, format!("manifest: {e}")))?;

    let io_err = |e| Error::io(path.display().to_string(), e);
    let mut file = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
    file.write_all(MAGIC).map_err(io_err)?;
    file.write_all(&VERSION.to_le_bytes()).map_err(io_err)?;
    file.write_all(&(manifest_bytes.len() as u64).to_le_bytes())
        .map_err(io_err)?;
    file.write_all(&manifest_bytes).map_err(io_err)?;
    file.write_all(&payload).map_err(io_err)?;
    file.flush().map_err(io_err)
}

/// Writes a multitask model and its vocabulary to one file.
pub fn save_checkpoint(path: &Path, model: &Model, vocab: &Vocab) -> Result<()> {
    write_file(
        path,
        &model.params,
        &model.encoder_cfg,
        Some(&model.head_cfg),
        None,
        vocab,
    )
}

/// Writes an adversarial run's encoder, generator, and discriminator.
pub fn save_gan_checkpoint(
    path: &Path,
    params: &Params,
    encoder: &EncoderConfig,
    gan: &GanConfig,
    vocab: &Vocab,
) -> Result<()> {
    write_file(path, params, encoder, None, Some(gan), vocab)
}

/// Reads a checkpoint back. Bit-exact: the parameters compare equal to what
/// was saved.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let io_err = |e| Error::io(path.display().to_string(), e);
    let mut file = std::io::BufReader::new(std::fs::File::open(path).map_err(io_err)?);

    let mut magic = [0u8; 4];
    file.read_exact(&mut magic).map_err(io_err)?;
    if &magic != MAGIC {
        return Err(corrupt(path, "not a checkpoint file"));
    }
    let mut word = [0u8; 4];
    file.read_exact(&mut word).map_err(io_err)?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(corrupt(
            path,
            format!("format version {version}; this build reads {VERSION}"),
        ));
    }
    let mut long = [0u8; 8];
    file.read_exact(&mut long).map_err(io_err)?;
    let manifest_len = u64::from_le_bytes(long) as usize;
    let mut manifest_bytes = vec![0u8; manifest_len];
    file.read_exact(&mut manifest_bytes).map_err(io_err)?;
    let manifest: Manifest = serde_json::from_slice(&manifest_bytes)
        .map_err(|e| corrupt(path, format!("manifest: {e}")))?;

    let total: usize = manifest.tensors.iter().map(|t| t.len).sum();
    let mut payload = vec![0u8; total * 8];
    file.read_exact(&mut payload).map_err(io_err)?;
    let mut rest = [0u8; 1];
    if file.read(&mut rest).map_err(io_err)? != 0 {
        return Err(corrupt(path, "trailing bytes after the tensor payload"));
    }

    let mut params = Params::new();
    let mut expected_offset = 0usize;
    for entry in &manifest.tensors {
        if entry.offset != expected_offset {
            return Err(corrupt(
                path,
                format!("tensor {} offset {} is not contiguous", entry.name, entry.offset),
            ));
        }
        if entry.shape.iter().product::<usize>() != entry.len {
            return Err(corrupt(
                path,
                format!("tensor {} shape {:?} disagrees with len {}", entry.name, entry.shape, entry.len),
            ));
        }
        let start = entry.offset * 8;
        let data: Vec<f64> = payload[start..start + entry.len * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        if params.contains(&entry.name) {
            return Err(corrupt(path, format!("duplicate tensor {}", entry.name)));
        }
        params.insert(entry.name.clone(), Tensor::new(entry.shape.clone(), data)?);
        expected_offset += entry.len;
    }

    let vocab = Vocab::from_tokens(manifest.vocab)?;
    manifest.encoder.validate()?;
    match (&manifest.heads, &manifest.gan) {
        (Some(h), None) => h.validate()?,
        (None, Some(g)) => g.validate()?,
        _ => {
            return Err(corrupt(
                path,
                "expected exactly one of the head or adversarial sections",
            ))
        }
    }
    if manifest.encoder.vocab_size != vocab.len() {
        return Err(corrupt(
            path,
            format!(
                "vocabulary holds {} ids but the encoder expects {}",
                vocab.len(),
                manifest.encoder.vocab_size
            ),
        ));
    }
    Ok(Checkpoint {
        params,
        encoder_cfg: manifest.encoder,
        head_cfg: manifest.heads,
        gan_cfg: manifest.gan,
        vocab,
    })
}
