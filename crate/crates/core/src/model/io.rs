//! Checkpoint container.
//!
//! ```text
//! offset  size  content
//! 0       8     magic "FFLOWMDL"
//! 8       4     format version, u32 little-endian (currently 1)
//! 12      4     manifest length M, u32 little-endian
//! 16      M     manifest, UTF-8 JSON
//! 16+M    ...   tensor data, IEEE-754 f32 little-endian, row-major
//! ```
//!
//! The manifest lists each tensor's name, shape and byte offset relative to
//! the start of the tensor data. See `docs/model-format.md`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{DeciderConfig, SeqClassifier};
use crate::error::{Error, Result};
use crate::representation::{FeatureConfig, Granularity};

pub const MAGIC: &[u8; 8] = b"FFLOWMDL";
pub const FORMAT_VERSION: u32 = 1;

pub const TENSOR_NAMES: [&str; 4] = ["lstm.weight", "lstm.bias", "head.weight", "head.bias"];

/// A trained classifier with everything needed to run it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: SeqClassifier<f32>,
    pub features: FeatureConfig,
    pub decider: DeciderConfig,
    /// Calibrated acceptance threshold for result selection.
    pub threshold: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub version: u32,
    pub granularity: Granularity,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub class_names: Vec<String>,
    pub unknown_index: usize,
    pub gate_order: String,
    pub features: FeatureConfig,
    pub decider: DeciderConfig,
    pub threshold: Option<f64>,
    pub tensors: Vec<TensorEntry>,
}

pub fn write_checkpoint<W: Write>(ckpt: &Checkpoint, mut out: W) -> Result<()> {
    let m = &ckpt.model;
    m.validate()?;
    let shapes: [Vec<usize>; 4] = [
        m.w.shape().to_vec(),
        m.b.shape().to_vec(),
        m.head_w.shape().to_vec(),
        m.head_b.shape().to_vec(),
    ];
    let mut offset = 0;
    let tensors = TENSOR_NAMES
        .iter()
        .zip(shapes)
        .map(|(name, shape)| {
            let entry = TensorEntry {
                name: name.to_string(),
                offset,
                shape,
            };
            offset += entry.shape.iter().product::<usize>() * 4;
            entry
        })
        .collect();
    let manifest = Manifest {
        version: FORMAT_VERSION,
        granularity: m.granularity,
        input_dim: m.input_dim,
        hidden_dim: m.hidden_dim,
        class_names: m.class_names.clone(),
        unknown_index: m.unknown_index(),
        gate_order: "input,forget,cell,output".into(),
        features: ckpt.features,
        decider: ckpt.decider,
        threshold: ckpt.threshold,
        tensors,
    };
    let json = serde_json::to_vec(&manifest)?;
    out.write_all(MAGIC)?;
    out.write_all(&FORMAT_VERSION.to_le_bytes())?;
    out.write_all(&(json.len() as u32).to_le_bytes())?;
    out.write_all(&json)?;
    for tensor in m.params() {
        for v in tensor {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Checkpoint> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let mut word = [0u8; 4];
    input.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    input.read_exact(&mut word)?;
    let mut json = vec![0u8; u32::from_le_bytes(word) as usize];
    input.read_exact(&mut json)?;
    let manifest: Manifest = serde_json::from_slice(&json)?;

    let mut data = Vec::new();
    input.read_to_end(&mut data)?;
    let tensor = |name: &str| -> Result<(Vec<usize>, Vec<f32>)> {
        let entry = manifest
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
        let count: usize = entry.shape.iter().product();
        let bytes = data
            .get(entry.offset..entry.offset + 4 * count)
            .ok_or_else(|| Error::Format(format!("tensor {name} truncated")))?;
        let values = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok((entry.shape.clone(), values))
    };
    let matrix = |name: &str| -> Result<Array2<f32>> {
        let (shape, values) = tensor(name)?;
        if shape.len() != 2 {
            return Err(Error::Format(format!("{name} must be 2-D")));
        }
        Array2::from_shape_vec((shape[0], shape[1]), values).map_err(|e| Error::Format(e.to_string()))
    };
    let vector = |name: &str| -> Result<Array1<f32>> {
        let (shape, values) = tensor(name)?;
        if shape.len() != 1 {
            return Err(Error::Format(format!("{name} must be 1-D")));
        }
        Ok(Array1::from(values))
    };

    let model = SeqClassifier {
        granularity: manifest.granularity,
        input_dim: manifest.input_dim,
        hidden_dim: manifest.hidden_dim,
        class_names: manifest.class_names.clone(),
        w: matrix(TENSOR_NAMES[0])?,
        b: vector(TENSOR_NAMES[1])?,
        head_w: matrix(TENSOR_NAMES[2])?,
        head_b: vector(TENSOR_NAMES[3])?,
    };
    model.validate()?;
    if manifest.unknown_index != model.unknown_index() {
        return Err(Error::Format("unknown class must be the last output".into()));
    }
    Ok(Checkpoint {
        model,
        features: manifest.features,
        decider: manifest.decider,
        threshold: manifest.threshold,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    write_checkpoint(ckpt, BufWriter::new(File::create(path)?))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
