//! Model checkpoints: one JSON header line followed by the tensors as
//! little-endian `f32`, in header order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use dtits_core::encoder::{EncoderConfig, PredictorWeights};
use dtits_core::losses::Mode;
use dtits_core::model::{Model, Stage};
use dtits_core::transform::WarpBasis;
use dtits_core::PrototypeBank;

use crate::error::{CliError, Result};

pub const FORMAT: &str = "dtits-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format: String,
    pub version: u32,
    pub mode: String,
    pub stage: String,
    pub len: usize,
    pub channels: usize,
    pub prototypes: usize,
    pub landmarks: usize,
    pub filters: [usize; 3],
    pub kernels: [usize; 3],
    pub warp_scale: f64,
    /// Cluster-to-class map (0-based) attached after unsupervised training.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_map: Option<Vec<usize>>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub mode: Mode,
    pub stage: Stage,
    pub class_map: Option<Vec<usize>>,
}

fn mode_name(m: Mode) -> &'static str {
    match m {
        Mode::Supervised => "sup",
        Mode::Unsupervised => "unsup",
    }
}

fn bad(path: &Path, msg: impl std::fmt::Display) -> CliError {
    CliError::Data(format!("{}: {msg}", path.display()))
}

pub fn save(path: &Path, ck: &Checkpoint) -> Result<()> {
    let m = &ck.model;
    let cfg = &m.encoder.config;
    let mut tensors = vec![TensorEntry { name: "prototypes".into(), shape: vec![m.bank.count(), m.bank.len(), m.bank.channels()] }];
    let named = m.encoder.named();
    tensors.extend(named.iter().map(|(n, s, _)| TensorEntry { name: n.clone(), shape: s.clone() }));
    let header = Header {
        format: FORMAT.into(),
        version: VERSION,
        mode: mode_name(ck.mode).into(),
        stage: ck.stage.name().into(),
        len: m.bank.len(),
        channels: m.bank.channels(),
        prototypes: m.bank.count(),
        landmarks: cfg.landmarks,
        filters: cfg.filters,
        kernels: cfg.kernels,
        warp_scale: cfg.warp_scale,
        class_map: ck.class_map.clone(),
        tensors,
    };
    let mut buf = serde_json::to_vec(&header).map_err(|e| bad(path, e))?;
    buf.push(b'\n');
    for v in m.bank.data().iter().chain(named.iter().flat_map(|(_, _, d)| d.iter())) {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    crate::io::write_bytes(path, &buf)
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| bad(path, "missing checkpoint header"))?;
    let header: Header = serde_json::from_slice(&bytes[..nl]).map_err(|e| bad(path, format!("bad header: {e}")))?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(bad(path, format!("unsupported checkpoint {} v{}", header.format, header.version)));
    }
    let mode: Mode = header.mode.parse().map_err(|e| bad(path, e))?;
    let stage: Stage = header.stage.parse().map_err(|e| bad(path, e))?;
    let payload = &bytes[nl + 1..];
    let total: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    if payload.len() != 4 * total {
        return Err(bad(path, format!("expected {} payload bytes, found {}", 4 * total, payload.len())));
    }
    let mut values = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64);
    let mut cfg = EncoderConfig::new(header.channels, header.prototypes, header.landmarks).with_filters(header.filters);
    cfg.kernels = header.kernels;
    cfg.warp_scale = header.warp_scale;
    let mut encoder = PredictorWeights::new(cfg, 0)?;
    let first = header.tensors.first().ok_or_else(|| bad(path, "no tensors"))?;
    if first.name != "prototypes" || first.shape != [header.prototypes, header.len, header.channels] {
        return Err(bad(path, "first tensor must be the prototypes"));
    }
    let bank = PrototypeBank::new(header.prototypes, header.len, header.channels, values.by_ref().take(header.prototypes * header.len * header.channels).collect())?;
    let expected = encoder.named().iter().map(|(n, s, _)| (n.clone(), s.clone())).collect::<Vec<_>>();
    let found = header.tensors[1..].iter().map(|t| (t.name.clone(), t.shape.clone())).collect::<Vec<_>>();
    if expected != found {
        return Err(bad(path, "tensor manifest does not match the encoder layout"));
    }
    for (_, dst) in encoder.named_mut() {
        for d in dst.iter_mut() {
            *d = values.next().expect("length checked");
        }
    }
    let basis = WarpBasis::uniform(header.len, header.landmarks)?;
    let model = Model::new(bank, encoder, basis)?;
    Ok(Checkpoint { model, mode, stage, class_map: header.class_map })
}
