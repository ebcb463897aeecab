//! On-disk containers.
//!
//! Checkpoints are versioned JSON: a header with the model shape and seed,
//! then every parameter group as `{name, rows, cols, values}` in row-major
//! order. Floats are written shortest-round-trip, so load(save(x)) == x
//! bitwise.
//!
//! Datasets are a small binary container:
//!
//! ```text
//! b"ABPEMDS\0" | u32 version | u64 header_len | header JSON
//! per split, per sample: i64 label (-1 = none) | T_A·raw f64 | T_V·raw f64
//! ```
//!
//! All integers and floats little-endian.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{RawSample, Split};
use crate::error::{Error, Result};
use crate::model::{EncoderStub, FusionParams, Model, ModelDims, ParamGroup};
use crate::synth::{BenchConfig, Corruption};
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "abpem-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;
const DATASET_MAGIC: &[u8; 8] = b"ABPEMDS\0";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub raw_dim: usize,
    pub d: usize,
    pub d_ff: usize,
    pub t_a: usize,
    pub t_v: usize,
    pub n_classes: usize,
    pub seed: u64,
    /// Accuracy on the clean test split after pretraining.
    pub clean_acc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct GroupRecord {
    name: String,
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl GroupRecord {
    fn new(name: &str, t: &Tensor) -> Self {
        Self { name: name.to_string(), rows: t.rows(), cols: t.cols(), values: t.data.clone() }
    }

    fn tensor(&self, expected: (usize, usize)) -> Result<Tensor> {
        if (self.rows, self.cols) != expected {
            return Err(Error::Format(format!(
                "group {} has shape {:?}, expected {:?}",
                self.name,
                (self.rows, self.cols),
                expected
            )));
        }
        Tensor::from_vec(self.rows, self.cols, self.values.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    header: CheckpointHeader,
    tunable: Vec<String>,
    groups: Vec<GroupRecord>,
}

/// A model plus its provenance header.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub model: Model,
}

impl Checkpoint {
    pub fn new(model: Model, seed: u64, clean_acc: Option<f64>) -> Self {
        let d = *model.dims();
        let header = CheckpointHeader {
            raw_dim: d.raw_dim,
            d: d.d,
            d_ff: d.d_ff,
            t_a: d.t_a,
            t_v: d.t_v,
            n_classes: d.n_classes,
            seed,
            clean_acc,
        };
        Self { header, model }
    }

    pub fn to_json(&self) -> Result<String> {
        if !self.model.fusion.is_finite() {
            return Err(Error::Numeric("refusing to save non-finite parameters".into()));
        }
        let fusion = &self.model.fusion;
        let mut groups = vec![
            GroupRecord::new("encoder_a", &self.model.encoder_a.proj),
            GroupRecord::new("encoder_v", &self.model.encoder_v.proj),
        ];
        groups.extend(ParamGroup::ALL.iter().map(|g| GroupRecord::new(g.name(), fusion.get(*g))));
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            header: self.header.clone(),
            tunable: fusion.tunable_groups().iter().map(|g| g.name().to_string()).collect(),
            groups,
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: CheckpointFile = serde_json::from_str(text)?;
        if file.format != CHECKPOINT_FORMAT {
            return Err(Error::Format(format!("not a checkpoint: format '{}'", file.format)));
        }
        if file.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {}", file.version)));
        }
        let h = &file.header;
        let dims =
            ModelDims { raw_dim: h.raw_dim, d: h.d, d_ff: h.d_ff, t_a: h.t_a, t_v: h.t_v, n_classes: h.n_classes };
        dims.validate()?;
        let find = |name: &str| {
            file.groups.iter().find(|g| g.name == name).ok_or_else(|| Error::Format(format!("missing group {name}")))
        };
        let encoder_a = EncoderStub::new(find("encoder_a")?.tensor((dims.raw_dim, dims.d))?);
        let encoder_v = EncoderStub::new(find("encoder_v")?.tensor((dims.raw_dim, dims.d))?);
        let mut fusion = FusionParams::zeros(dims);
        for g in ParamGroup::ALL {
            *fusion.get_mut(g) = find(g.name())?.tensor(g.shape(&dims))?;
        }
        let tunable = file
            .tunable
            .iter()
            .map(|n| ParamGroup::from_name(n).ok_or_else(|| Error::Format(format!("unknown group {n}"))))
            .collect::<Result<Vec<_>>>()?;
        fusion.set_tunable(&tunable);
        Ok(Self { header: file.header, model: Model { encoder_a, encoder_v, fusion } })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub bench: BenchConfig,
    pub seed: u64,
    pub corruption: Option<Corruption>,
    /// `(name, sample count)` in file order.
    pub splits: Vec<(String, usize)>,
}

/// Named splits of one benchmark instance.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub bench: BenchConfig,
    pub seed: u64,
    pub corruption: Option<Corruption>,
    pub splits: Vec<(String, Split)>,
}

impl Dataset {
    pub fn split(&self, name: &str) -> Result<&Split> {
        self.splits
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, s)| s)
            .ok_or_else(|| Error::Format(format!("dataset has no split '{name}'")))
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let header = DatasetHeader {
            bench: self.bench.clone(),
            seed: self.seed,
            corruption: self.corruption,
            splits: self.splits.iter().map(|(n, s)| (n.clone(), s.len())).collect(),
        };
        let header = serde_json::to_vec(&header)?;
        w.write_all(DATASET_MAGIC)?;
        w.write_all(&DATASET_VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        let (ta, tv, width) = (self.bench.t_a, self.bench.t_v, self.bench.d);
        for (name, split) in &self.splits {
            for s in &split.samples {
                if s.a.shape() != (ta, width) || s.v.shape() != (tv, width) {
                    return Err(Error::Format(format!("sample in split {name} has the wrong shape")));
                }
                let label = s.label.map_or(-1i64, |y| y as i64);
                w.write_all(&label.to_le_bytes())?;
                for x in s.a.data.iter().chain(&s.v.data) {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != DATASET_MAGIC {
            return Err(Error::Format("not a dataset container".into()));
        }
        let mut u32b = [0u8; 4];
        r.read_exact(&mut u32b)?;
        let version = u32::from_le_bytes(u32b);
        if version != DATASET_VERSION {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        let mut u64b = [0u8; 8];
        r.read_exact(&mut u64b)?;
        let len = u64::from_le_bytes(u64b) as usize;
        let mut header = vec![0u8; len];
        r.read_exact(&mut header)?;
        let header: DatasetHeader = serde_json::from_slice(&header)?;
        let (ta, tv, width) = (header.bench.t_a, header.bench.t_v, header.bench.d);
        let mut read_tensor = |rows: usize, r: &mut dyn Read| -> Result<Tensor> {
            let mut data = Vec::with_capacity(rows * width);
            for _ in 0..rows * width {
                r.read_exact(&mut u64b)?;
                data.push(f64::from_le_bytes(u64b));
            }
            Tensor::from_vec(rows, width, data)
        };
        let mut splits = Vec::new();
        for (name, n) in &header.splits {
            let mut samples = Vec::with_capacity(*n);
            for _ in 0..*n {
                let mut lb = [0u8; 8];
                r.read_exact(&mut lb)?;
                let label = i64::from_le_bytes(lb);
                let a = read_tensor(ta, r)?;
                let v = read_tensor(tv, r)?;
                let label = if label < 0 { None } else { Some(label as usize) };
                samples.push(RawSample { a, v, label });
            }
            splits.push((name.clone(), Split::new(samples)));
        }
        Ok(Self { bench: header.bench, seed: header.seed, corruption: header.corruption, splits })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut std::io::BufReader::new(fs::File::open(path)?))
    }
}
