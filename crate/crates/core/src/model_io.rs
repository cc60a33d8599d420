//! Checkpoint persistence and layer-subset extraction.
//!
//! # File layout (format version 1)
//!
//! | bytes            | content                                        |
//! |------------------|------------------------------------------------|
//! | 0..4             | magic `ADEC`                                   |
//! | 4                | format version, `1`                            |
//! | 5..13            | header length `H`, u64 little-endian           |
//! | 13..13+H         | header, UTF-8 JSON ([`CheckpointHeader`])      |
//! | ..P              | zero padding up to the next multiple of 64     |
//! | P..              | payload: little-endian f32 tensor blobs        |
//!
//! Manifest offsets are relative to `P` and are multiples of 64; the gaps
//! between blobs are zero bytes. The file ends exactly at the end of the last
//! blob. The vocabulary lives in a sibling text file named by the header.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::io::Read;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::encoder::{expected_tensors, EncoderConfig, EncoderModel, EncoderWeights};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::tokenizer::Vocab;

pub const MAGIC: &[u8; 4] = b"ADEC";
pub const FORMAT_VERSION: u8 = 1;
pub const ALIGN: usize = 64;
const PREAMBLE: usize = 4 + 1 + 8;

/// Where an extracted model's layers came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub teacher_id: String,
    pub teacher_layers: usize,
    /// Original-teacher indices of this model's layers, ascending.
    pub layers: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub model_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl ModelMeta {
    pub fn new(model_id: impl Into<String>) -> Self {
        ModelMeta {
            model_id: model_id.into(),
            provenance: None,
            notes: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: EncoderConfig,
    #[serde(flatten)]
    pub meta: ModelMeta,
    /// Vocabulary file, relative to the checkpoint's directory.
    pub vocab: String,
    pub tensors: Vec<TensorEntry>,
}

/// Teacher layer indices to keep, strictly increasing.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LayerScheme(Vec<usize>);

impl LayerScheme {
    pub fn new(indices: Vec<usize>, teacher_layers: usize) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Input("layer scheme is empty".into()));
        }
        if let Some(bad) = indices.iter().find(|i| **i >= teacher_layers) {
            return Err(Error::Range {
                what: "teacher layers",
                index: *bad,
                len: teacher_layers,
            });
        }
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Input(format!(
                "layer scheme {indices:?} is not strictly increasing"
            )));
        }
        Ok(LayerScheme(indices))
    }

    pub fn all(teacher_layers: usize) -> Result<Self> {
        Self::new((0..teacher_layers).collect(), teacher_layers)
    }

    /// `"all"` or a comma-separated list such as `"0,11"`.
    pub fn parse(s: &str, teacher_layers: usize) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("all") {
            return Self::all(teacher_layers);
        }
        let indices = s
            .trim_matches(|c| c == '[' || c == ']')
            .split(',')
            .filter(|p| !p.trim().is_empty())
            .map(|p| {
                p.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Input(format!("bad layer index {p:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(indices, teacher_layers)
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl fmt::Display for LayerScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(usize::to_string).collect();
        write!(f, "[{}]", parts.join(","))
    }
}

/// The canonical layer subsets for a 12-layer teacher, in order: five
/// 4-layer, four 2-layer and four 1-layer schemes.
///
/// For any other depth the first/last analogue is returned instead:
/// `{first two + last two}`, `{first, last}`, `{first}`, `{last}`, with
/// duplicates removed for very shallow teachers.
pub fn builtin_schemes(teacher_layers: usize) -> Result<Vec<LayerScheme>> {
    let raw: Vec<Vec<usize>> = match teacher_layers {
        0 => {
            return Err(Error::Input(
                "a teacher without layers has no layer schemes".into(),
            ))
        }
        12 => vec![
            vec![1, 4, 7, 10],
            vec![0, 1, 10, 11],
            vec![0, 1, 2, 3],
            vec![4, 5, 6, 7],
            vec![8, 9, 10, 11],
            vec![0, 10],
            vec![0, 11],
            vec![1, 10],
            vec![1, 11],
            vec![0],
            vec![1],
            vec![10],
            vec![11],
        ],
        l => {
            let last = l - 1;
            let four: BTreeSet<usize> = [0, 1.min(last), last.saturating_sub(1), last].into();
            let two: BTreeSet<usize> = [0, last].into();
            vec![
                four.into_iter().collect(),
                two.into_iter().collect(),
                vec![0],
                vec![last],
            ]
        }
    };
    let mut seen = BTreeSet::new();
    raw.into_iter()
        .filter(|s| seen.insert(s.clone()))
        .map(|s| LayerScheme::new(s, teacher_layers))
        .collect()
}

/// Builds a student from a subset of the teacher's transformer layers.
///
/// Embedding tables, the embedding norm, pooling and vocabulary are copied
/// unchanged; kept layers are renumbered `0..k` in ascending teacher order.
/// Provenance always refers back to the original teacher, so extracting from
/// an already-extracted model composes.
pub fn extract_layers(teacher: &EncoderModel, scheme: &LayerScheme) -> Result<EncoderModel> {
    let depth = teacher.config.num_layers;
    let scheme = LayerScheme::new(scheme.0.clone(), depth)?;

    let provenance = match &teacher.meta.provenance {
        Some(p) => Provenance {
            teacher_id: p.teacher_id.clone(),
            teacher_layers: p.teacher_layers,
            layers: scheme.0.iter().map(|i| p.layers[*i]).collect(),
        },
        None => Provenance {
            teacher_id: teacher.meta.model_id.clone(),
            teacher_layers: depth,
            layers: scheme.0.clone(),
        },
    };

    let mut config = teacher.config.clone();
    config.num_layers = scheme.len();
    let src = &teacher.weights;
    let weights = EncoderWeights {
        word: src.word.clone(),
        position: src.position.clone(),
        token_type: src.token_type.clone(),
        norm_g: src.norm_g.clone(),
        norm_b: src.norm_b.clone(),
        layers: scheme.0.iter().map(|i| src.layers[*i].clone()).collect(),
    };
    let layer_list: Vec<String> = provenance.layers.iter().map(usize::to_string).collect();
    let meta = ModelMeta {
        model_id: format!("{}@{}", provenance.teacher_id, layer_list.join(",")),
        provenance: Some(provenance),
        notes: Vec::new(),
    };
    EncoderModel::new(config, weights, Arc::clone(&teacher.vocab), meta)
}

/// Writes `bytes` to a temporary file beside `path`, then renames it over.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    use std::io::Write;
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        tmp.as_file()
            .set_permissions(std::fs::Permissions::from_mode(0o644))
            .map_err(|e| Error::io(path, e))?;
    }
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn align_up(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

/// Vocabulary file name written next to a checkpoint.
pub fn vocab_file_name(checkpoint: &Path) -> String {
    let stem = checkpoint
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into());
    format!("{stem}.vocab.txt")
}

/// Serializes a checkpoint to bytes, with `vocab` as the referenced file.
pub fn to_bytes(model: &EncoderModel, vocab: &str) -> Result<Vec<u8>> {
    model.weights.check(&model.config)?;
    let mut entries = Vec::new();
    let mut offset = 0usize;
    for (name, t) in model.weights.named() {
        let nbytes = t.len() * 4;
        entries.push(TensorEntry {
            name,
            dtype: "f32".into(),
            shape: t.shape().to_vec(),
            offset: offset as u64,
            nbytes: nbytes as u64,
        });
        offset = align_up(offset + nbytes);
    }
    let header = CheckpointHeader {
        config: model.config.clone(),
        meta: model.meta.clone(),
        vocab: vocab.to_string(),
        tensors: entries,
    };
    let header_bytes = serde_json::to_vec_pretty(&header)
        .map_err(|e| Error::Format(format!("header serialization: {e}")))?;

    let payload_start = align_up(PREAMBLE + header_bytes.len());
    let mut out = Vec::with_capacity(payload_start + offset);
    out.extend_from_slice(MAGIC);
    out.push(FORMAT_VERSION);
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    out.resize(payload_start, 0);
    for ((_, t), entry) in model.weights.named().into_iter().zip(&header.tensors) {
        out.resize(payload_start + entry.offset as usize, 0);
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Writes the checkpoint and its vocabulary file, each atomically.
pub fn save(model: &EncoderModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let vocab_name = vocab_file_name(path);
    let bytes = to_bytes(model, &vocab_name)?;
    let dir = path.parent().unwrap_or(Path::new(""));
    model.vocab.save(dir.join(&vocab_name))?;
    write_atomic(path, &bytes)
}

fn parse_preamble(bytes: &[u8]) -> Result<usize> {
    if bytes.len() < PREAMBLE {
        return Err(Error::Format(format!(
            "file too short for preamble ({} bytes)",
            bytes.len()
        )));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", &bytes[..4])));
    }
    if bytes[4] != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported format version {}",
            bytes[4]
        )));
    }
    let len = u64::from_le_bytes(bytes[5..13].try_into().unwrap());
    usize::try_from(len).map_err(|_| Error::Format("header length overflows".into()))
}

fn parse_header(bytes: &[u8]) -> Result<CheckpointHeader> {
    serde_json::from_slice(bytes).map_err(|e| Error::Format(format!("header: {e}")))
}

/// Reads only the preamble and header.
pub fn read_header(path: impl AsRef<Path>) -> Result<CheckpointHeader> {
    let path = path.as_ref();
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut pre = [0u8; PREAMBLE];
    f.read_exact(&mut pre)
        .map_err(|_| Error::Format("file too short for preamble".into()))?;
    let len = parse_preamble(&pre)?;
    let mut header = vec![0u8; len];
    f.read_exact(&mut header)
        .map_err(|_| Error::Format(format!("header truncated (expected {len} bytes)")))?;
    parse_header(&header)
}

fn validate_manifest(header: &CheckpointHeader, payload_len: usize) -> Result<()> {
    let mut names = BTreeSet::new();
    let mut end = 0u64;
    for e in &header.tensors {
        if !names.insert(e.name.as_str()) {
            return Err(Error::Format(format!("duplicate tensor name {}", e.name)));
        }
        if e.dtype != "f32" {
            return Err(Error::Format(format!("{}: unsupported dtype {}", e.name, e.dtype)));
        }
        let want = e.shape.iter().product::<usize>() as u64 * 4;
        if want != e.nbytes {
            return Err(Error::Format(format!(
                "{}: shape {:?} needs {want} bytes, manifest says {}",
                e.name, e.shape, e.nbytes
            )));
        }
        if e.offset % ALIGN as u64 != 0 || e.offset < end {
            return Err(Error::Format(format!(
                "{}: offset {} is unaligned or overlaps the previous tensor",
                e.name, e.offset
            )));
        }
        end = e.offset + e.nbytes;
    }
    if end as usize != payload_len {
        return Err(Error::Format(format!(
            "payload length mismatch: manifest covers {end} bytes, file has {payload_len}"
        )));
    }
    if let Some(p) = &header.meta.provenance {
        LayerScheme::new(p.layers.clone(), p.teacher_layers)
            .map_err(|e| Error::Format(format!("provenance: {e}")))?;
        if p.layers.len() != header.config.num_layers {
            return Err(Error::Format(format!(
                "provenance lists {} layers, config has {}",
                p.layers.len(),
                header.config.num_layers
            )));
        }
    }
    Ok(())
}

/// Decodes checkpoint bytes; the vocabulary is supplied separately.
pub fn from_bytes(bytes: &[u8], vocab: Arc<Vocab>) -> Result<EncoderModel> {
    let header_len = parse_preamble(bytes)?;
    let header_end = PREAMBLE
        .checked_add(header_len)
        .filter(|e| *e <= bytes.len())
        .ok_or_else(|| Error::Format("header truncated".into()))?;
    let header = parse_header(&bytes[PREAMBLE..header_end])?;
    header
        .config
        .validate()
        .map_err(|e| Error::Format(format!("config: {e}")))?;
    let payload_start = align_up(header_end);
    if bytes.len() < payload_start {
        return Err(Error::Format("payload truncated before first tensor".into()));
    }
    let payload = &bytes[payload_start..];
    validate_manifest(&header, payload.len())?;

    let expected = expected_tensors(&header.config);
    let expected_names: BTreeSet<&str> = expected.iter().map(|(n, _)| n.as_str()).collect();
    let unknown: Vec<&str> = header
        .tensors
        .iter()
        .map(|e| e.name.as_str())
        .filter(|n| !expected_names.contains(n))
        .collect();
    if !unknown.is_empty() {
        return Err(Error::Format(format!("unknown tensors: {}", unknown.join(", "))));
    }
    let by_name: HashMap<&str, &TensorEntry> =
        header.tensors.iter().map(|e| (e.name.as_str(), e)).collect();
    let shapes: HashMap<&str, &Vec<usize>> =
        expected.iter().map(|(n, s)| (n.as_str(), s)).collect();

    let weights = EncoderWeights::try_build(header.config.num_layers, |name| {
        let e = by_name
            .get(name)
            .ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
        if &e.shape != shapes[name] {
            return Err(Error::Format(format!(
                "tensor {name} has shape {:?}, config implies {:?}",
                e.shape, shapes[name]
            )));
        }
        let blob = &payload[e.offset as usize..(e.offset + e.nbytes) as usize];
        let data = blob
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(e.shape.clone(), data)
    })?;
    EncoderModel::new(header.config, weights, vocab, header.meta)
        .map_err(|e| Error::Format(e.to_string()))
}

/// Loads and validates a checkpoint plus its referenced vocabulary.
pub fn load(path: impl AsRef<Path>) -> Result<EncoderModel> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let header_len = parse_preamble(&bytes)?;
    let header = parse_header(
        bytes
            .get(PREAMBLE..PREAMBLE + header_len)
            .ok_or_else(|| Error::Format("header truncated".into()))?,
    )?;
    let dir = path.parent().unwrap_or(Path::new(""));
    let vocab = Vocab::load(dir.join(&header.vocab))?;
    from_bytes(&bytes, Arc::new(vocab))
}
