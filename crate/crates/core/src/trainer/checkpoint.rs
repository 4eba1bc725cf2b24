use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::OptimizerState;
use crate::error::{Error, Result};
use crate::io_util;
use crate::model::{parameter_shapes, ModelConfig};
use crate::numerics::{DType, ParameterStore, Real, Tensor};
use crate::textpipe::{Codec, MergeTable, Segmenter, Unit, Vocabulary};

const FORMAT: &str = "charnmt-checkpoint";
const VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "tensors.bin";

/// Artifact roles recognised by [`Checkpoint::codecs`].
pub const SOURCE_MERGES: &str = "source_merges";
pub const SOURCE_VOCAB: &str = "source_vocab";
pub const TARGET_MERGES: &str = "target_merges";
pub const TARGET_VOCAB: &str = "target_vocab";

/// A text file the model depends on, copied into the checkpoint directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Artifact {
    pub role: String,
    pub contents: String,
}

impl Artifact {
    pub fn read(role: &str, path: &Path) -> Result<Self> {
        Ok(Artifact {
            role: role.to_string(),
            contents: io_util::read_to_string(path)?,
        })
    }

    fn file_name(&self) -> String {
        format!("{}.txt", self.role)
    }
}

/// Everything needed to decode with, or resume training of, one model.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub step: u64,
    pub model: ModelConfig,
    pub target_unit: Unit,
    /// The resolved training configuration, stored verbatim.
    pub config_text: String,
    pub params: ParameterStore<T>,
    pub optimizer: Option<OptimizerState<T>>,
    pub best_dev_nll: Option<f64>,
    pub artifacts: Vec<Artifact>,
}

#[derive(Serialize, Deserialize)]
struct ModelEntry {
    src_vocab: usize,
    tgt_vocab: usize,
    d_emb: usize,
    d_enc: usize,
    d_dec: usize,
    d_att: usize,
    decoder: String,
    attention: String,
}

#[derive(Serialize, Deserialize)]
struct ArtifactEntry {
    role: String,
    file: String,
    sha256: String,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    bytes: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    step: u64,
    model: ModelEntry,
    target_unit: String,
    best_dev_nll: Option<f64>,
    optimizer_step: Option<u64>,
    config: String,
    artifacts: Vec<ArtifactEntry>,
    tensors: Vec<TensorEntry>,
    blob_bytes: u64,
    blob_sha256: String,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn first_moment(name: &str) -> String {
    format!("adam.m/{name}")
}

fn second_moment(name: &str) -> String {
    format!("adam.v/{name}")
}

fn corrupt(msg: String) -> Error {
    Error::Integrity(msg)
}

/// Stored dtype of a checkpoint, read from its manifest alone.
pub fn checkpoint_dtype(dir: &Path) -> Result<DType> {
    let manifest = read_manifest(dir)?;
    manifest
        .tensors
        .first()
        .map(|t| t.dtype.parse())
        .unwrap_or(Ok(DType::F32))
        .map_err(|_| corrupt("manifest lists an unknown dtype".into()))
}

fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = io_util::read_to_string(&path)?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| corrupt(format!("{}: {e}", path.display())))?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(corrupt(format!(
            "{}: unsupported format {} v{}",
            path.display(),
            manifest.format,
            manifest.version
        )));
    }
    Ok(manifest)
}

impl<T: Real> Checkpoint<T> {
    fn tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> =
            self.params.iter().map(|(n, t)| (n.to_string(), t)).collect();
        if let Some(opt) = &self.optimizer {
            out.extend(opt.first.iter().map(|(n, t)| (first_moment(n), t)));
            out.extend(opt.second.iter().map(|(n, t)| (second_moment(n), t)));
        }
        out
    }

    fn encode(&self) -> (Manifest, Vec<u8>) {
        let mut blob = Vec::new();
        let mut tensors = Vec::new();
        for (name, t) in self.tensors() {
            let offset = blob.len() as u64;
            for &v in t.data() {
                v.write_le(&mut blob);
            }
            tensors.push(TensorEntry {
                name,
                dtype: T::DTYPE.as_str().to_string(),
                shape: t.shape().to_vec(),
                offset,
                bytes: blob.len() as u64 - offset,
            });
        }
        let m = &self.model;
        let manifest = Manifest {
            format: FORMAT.to_string(),
            version: VERSION,
            step: self.step,
            model: ModelEntry {
                src_vocab: m.src_vocab,
                tgt_vocab: m.tgt_vocab,
                d_emb: m.d_emb,
                d_enc: m.d_enc,
                d_dec: m.d_dec,
                d_att: m.d_att,
                decoder: m.decoder.to_string(),
                attention: m.attention.to_string(),
            },
            target_unit: self.target_unit.to_string(),
            best_dev_nll: self.best_dev_nll,
            optimizer_step: self.optimizer.as_ref().map(|o| o.step),
            config: self.config_text.clone(),
            artifacts: self
                .artifacts
                .iter()
                .map(|a| ArtifactEntry {
                    role: a.role.clone(),
                    file: a.file_name(),
                    sha256: sha256_hex(a.contents.as_bytes()),
                })
                .collect(),
            tensors,
            blob_bytes: blob.len() as u64,
            blob_sha256: sha256_hex(&blob),
        };
        (manifest, blob)
    }

    /// Writes the checkpoint directory. The new contents are assembled in a
    /// sibling temporary directory and swapped in with renames.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let (manifest, blob) = self.encode();
        let parent = match dir.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        fs::create_dir_all(&parent).map_err(|e| Error::io(&parent, e))?;
        let staging = tempfile::Builder::new()
            .prefix(".ckpt-")
            .tempdir_in(&parent)
            .map_err(|e| Error::io(&parent, e))?;
        let write = |name: &str, bytes: &[u8]| {
            let p = staging.path().join(name);
            fs::write(&p, bytes).map_err(|e| Error::io(p, e))
        };
        write(BLOB_FILE, &blob)?;
        for a in &self.artifacts {
            write(&a.file_name(), a.contents.as_bytes())?;
        }
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        write(MANIFEST_FILE, format!("{json}\n").as_bytes())?;

        let staged = staging.keep();
        let old = if dir.exists() {
            let trash = tempfile::Builder::new()
                .prefix(".ckpt-old-")
                .tempdir_in(&parent)
                .map_err(|e| Error::io(&parent, e))?
                .keep();
            let aside = trash.join("ckpt");
            fs::rename(dir, &aside).map_err(|e| Error::io(dir, e))?;
            Some(trash)
        } else {
            None
        };
        fs::rename(&staged, dir).map_err(|e| Error::io(dir, e))?;
        if let Some(trash) = old {
            fs::remove_dir_all(&trash).map_err(|e| Error::io(trash, e))?;
        }
        Ok(())
    }

    /// Reads and fully validates a checkpoint. Values stored at another
    /// precision are converted.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = read_manifest(dir)?;
        let me = &manifest.model;
        let model = ModelConfig {
            src_vocab: me.src_vocab,
            tgt_vocab: me.tgt_vocab,
            d_emb: me.d_emb,
            d_enc: me.d_enc,
            d_dec: me.d_dec,
            d_att: me.d_att,
            decoder: me.decoder.parse()?,
            attention: me.attention.parse()?,
        };
        model.validate()?;
        let target_unit: Unit = manifest.target_unit.parse()?;

        let blob_path = dir.join(BLOB_FILE);
        let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
        if blob.len() as u64 != manifest.blob_bytes {
            return Err(corrupt(format!(
                "{} holds {} bytes, manifest declares {}",
                blob_path.display(),
                blob.len(),
                manifest.blob_bytes
            )));
        }
        if sha256_hex(&blob) != manifest.blob_sha256 {
            return Err(corrupt(format!("{} fails its checksum", blob_path.display())));
        }

        let read_tensor = |name: &str, shape: &[usize]| -> Result<Tensor<T>> {
            let entry = manifest
                .tensors
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| corrupt(format!("tensor `{name}` is missing")))?;
            if entry.shape != shape {
                return Err(corrupt(format!(
                    "tensor `{name}` has shape {:?}, model needs {shape:?}",
                    entry.shape
                )));
            }
            let dtype: DType = entry
                .dtype
                .parse()
                .map_err(|_| corrupt(format!("tensor `{name}` has unknown dtype {}", entry.dtype)))?;
            let n: usize = shape.iter().product();
            let end = entry.offset.checked_add(entry.bytes);
            if entry.bytes != (n * dtype.size()) as u64 || end.is_none_or(|e| e > blob.len() as u64) {
                return Err(corrupt(format!("tensor `{name}` has an invalid byte range")));
            }
            let bytes = &blob[entry.offset as usize..(entry.offset + entry.bytes) as usize];
            let data: Vec<T> = match dtype {
                DType::F32 => bytes.chunks_exact(4).map(|c| T::from_f64_lossy(f32::read_le(c) as f64)).collect(),
                DType::F64 => bytes.chunks_exact(8).map(|c| T::from_f64_lossy(f64::read_le(c))).collect(),
            };
            Tensor::new(shape.to_vec(), data)
        };

        let shapes = parameter_shapes(&model);
        let mut expected: Vec<String> = shapes.iter().map(|(n, _)| n.clone()).collect();
        let mut params = ParameterStore::new();
        for (name, shape) in &shapes {
            params.insert(name.clone(), read_tensor(name, shape)?)?;
        }
        let optimizer = match manifest.optimizer_step {
            None => None,
            Some(step) => {
                let mut first = ParameterStore::new();
                let mut second = ParameterStore::new();
                for (name, shape) in &shapes {
                    let (m, v) = (first_moment(name), second_moment(name));
                    first.insert(name.clone(), read_tensor(&m, shape)?)?;
                    second.insert(name.clone(), read_tensor(&v, shape)?)?;
                    expected.push(m);
                    expected.push(v);
                }
                Some(OptimizerState { first, second, step })
            }
        };
        if let Some(extra) = manifest.tensors.iter().find(|t| !expected.contains(&t.name)) {
            return Err(corrupt(format!("unexpected tensor `{}`", extra.name)));
        }

        let mut artifacts = Vec::new();
        for a in &manifest.artifacts {
            let path = dir.join(&a.file);
            let contents = io_util::read_to_string(&path)?;
            if sha256_hex(contents.as_bytes()) != a.sha256 {
                return Err(corrupt(format!(
                    "artifact `{}` ({}) does not match its recorded hash",
                    a.role,
                    path.display()
                )));
            }
            artifacts.push(Artifact {
                role: a.role.clone(),
                contents,
            });
        }

        Ok(Checkpoint {
            step: manifest.step,
            model,
            target_unit,
            config_text: manifest.config,
            params,
            optimizer,
            best_dev_nll: manifest.best_dev_nll,
            artifacts,
        })
    }

    pub fn artifact(&self, role: &str) -> Option<&str> {
        self.artifacts
            .iter()
            .find(|a| a.role == role)
            .map(|a| a.contents.as_str())
    }

    /// Source and target pipelines rebuilt from the stored artifacts, and
    /// checked against the model's vocabulary sizes.
    pub fn codecs(&self) -> Result<(Codec, Codec)> {
        let (source, target) = codecs_from_artifacts(self.target_unit, &self.artifacts)?;
        if source.vocab().len() != self.model.src_vocab || target.vocab().len() != self.model.tgt_vocab {
            return Err(Error::Consistency(format!(
                "model expects vocabularies of {}/{} symbols, stored files have {}/{}",
                self.model.src_vocab,
                self.model.tgt_vocab,
                source.vocab().len(),
                target.vocab().len()
            )));
        }
        Ok((source, target))
    }
}

/// Builds both pipelines from vocabulary and (optional) merge artifacts.
pub fn codecs_from_artifacts(target_unit: Unit, artifacts: &[Artifact]) -> Result<(Codec, Codec)> {
    let find = |role: &str| artifacts.iter().find(|a| a.role == role).map(|a| a.contents.as_str());
    let need = |role: &str| {
        find(role).ok_or_else(|| Error::Consistency(format!("no `{role}` artifact available")))
    };
    let merges = |role: &str| find(role).map(MergeTable::parse).transpose();
    let source_vocab = Vocabulary::parse(Unit::Subword, need(SOURCE_VOCAB)?)?;
    let target_vocab = Vocabulary::parse(target_unit, need(TARGET_VOCAB)?)?;
    let source = match merges(SOURCE_MERGES)? {
        Some(m) => Codec::bpe(m, source_vocab)?,
        None => Codec::new(Segmenter::Whitespace, source_vocab)?,
    };
    let target = match (target_unit, merges(TARGET_MERGES)?) {
        (Unit::Character, _) => Codec::characters(target_vocab)?,
        (Unit::Subword, Some(m)) => Codec::bpe(m, target_vocab)?,
        (Unit::Subword, None) => Codec::new(Segmenter::Whitespace, target_vocab)?,
    };
    Ok((source, target))
}
