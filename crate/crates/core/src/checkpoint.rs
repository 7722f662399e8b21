//! Binary session snapshots.
//!
//! Layout: `b"DNAL"`, `u32` format version, `u64` header length, a JSON header, then
//! every tensor as little-endian `f32` in the order listed by the header.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::compute::{BnConfig, Rng, RngState, Tensor};
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::gating::GateGradForm;
use crate::model::{Model, ModelSpec, Topology};
use crate::pruner::ChannelMask;
use crate::trainer::{MetricsRow, Progress, Session};

pub const MAGIC: &[u8; 4] = b"DNAL";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct GateHeader {
    delta: f64,
    enabled: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload.
    offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    spec: ModelSpec,
    topology: Topology,
    bn_config: BnConfig,
    grad_form: GateGradForm,
    gates: Vec<GateHeader>,
    bn_populated: Vec<bool>,
    rng: RngState,
    progress: Progress,
    rows: Vec<MetricsRow>,
    masks: Option<ChannelMask>,
    equivalence: Option<f64>,
    pre_prune_s: Option<Vec<Vec<f32>>>,
    tensors: Vec<TensorEntry>,
}

fn model_tensors(model: &Model<f32>) -> Vec<(String, &Tensor<f32>)> {
    let mut out = Vec::new();
    for (name, p) in model.params() {
        out.push((format!("{name}.m"), &p.momentum));
        out.push((name, &p.value));
    }
    for (name, b) in model.bn_states() {
        out.push((format!("{name}.mean"), &b.running_mean));
        out.push((format!("{name}.var"), &b.running_var));
    }
    for (i, g) in model.gates().enumerate() {
        out.push((format!("gate{i}.s"), &g.s.value));
        out.push((format!("gate{i}.m"), &g.s.momentum));
    }
    out
}

struct Reader<'a, 'h> {
    rest: &'a [u8],
    offset: u64,
    entries: std::slice::Iter<'h, TensorEntry>,
}

impl Reader<'_, '_> {
    fn fill(&mut self, name: String, slot: &mut Tensor<f32>) -> Result<()> {
        let entry = self
            .entries
            .next()
            .ok_or_else(|| Error::Format(format!("tensor `{name}` missing")))?;
        if name != entry.name || slot.shape() != entry.shape.as_slice() {
            return Err(Error::Format(format!(
                "tensor `{}` {:?} does not match `{name}` {:?}",
                entry.name,
                entry.shape,
                slot.shape()
            )));
        }
        if entry.offset != self.offset {
            return Err(Error::Format(format!(
                "tensor `{name}` at offset {}, expected {}",
                entry.offset, self.offset
            )));
        }
        let raw = take(&mut self.rest, slot.len() * 4, &name)?;
        self.offset += raw.len() as u64;
        for (d, c) in slot.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
            *d = f32::from_le_bytes(c.try_into().unwrap());
        }
        Ok(())
    }
}

pub fn to_bytes(session: &Session) -> Result<Vec<u8>> {
    let model = &session.model;
    let tensors = model_tensors(model);
    let header = Header {
        config: session.cfg.clone(),
        spec: model.spec.clone(),
        topology: model.topology(),
        bn_config: model.bn_config,
        grad_form: model.grad_form,
        gates: model
            .gates()
            .map(|g| GateHeader {
                delta: g.delta as f64,
                enabled: g.enabled,
            })
            .collect(),
        bn_populated: model.bn_states().iter().map(|(_, b)| b.populated).collect(),
        rng: session.rng.state(),
        progress: session.progress.clone(),
        rows: session.rows.clone(),
        masks: session.masks.clone(),
        equivalence: session.equivalence,
        pre_prune_s: session.pre_prune_s.clone(),
        tensors: tensors
            .iter()
            .scan(0u64, |off, (n, t)| {
                let e = TensorEntry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                    offset: *off,
                };
                *off += t.len() as u64 * 4;
                Some(e)
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let payload: usize = tensors.iter().map(|(_, t)| t.len() * 4).sum();
    let mut out = Vec::with_capacity(16 + json.len() + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Format(format!("truncated while reading {what}")));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Session> {
    let mut rest = bytes;
    if take(&mut rest, 4, "magic")? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(take(&mut rest, 4, "version")?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!(
            "version {version}, expected {VERSION}"
        )));
    }
    let len = u64::from_le_bytes(take(&mut rest, 8, "header length")?.try_into().unwrap());
    let len = usize::try_from(len).map_err(|_| Error::Format("header length overflows".into()))?;
    let header: Header = serde_json::from_slice(take(&mut rest, len, "header")?)?;

    let mut model = Model::<f32>::skeleton(&header.spec, &header.topology)?;
    model.bn_config = header.bn_config;
    model.grad_form = header.grad_form;
    let mut r = Reader {
        rest,
        offset: 0,
        entries: header.tensors.iter(),
    };
    for (name, p) in model.params_mut() {
        r.fill(format!("{name}.m"), &mut p.momentum)?;
        r.fill(name, &mut p.value)?;
    }
    for (name, b) in model.bn_states_mut() {
        r.fill(format!("{name}.mean"), &mut b.running_mean)?;
        r.fill(format!("{name}.var"), &mut b.running_var)?;
    }
    for (i, g) in model.gates_mut().enumerate() {
        r.fill(format!("gate{i}.s"), &mut g.s.value)?;
        r.fill(format!("gate{i}.m"), &mut g.s.momentum)?;
    }
    if r.entries.next().is_some() {
        return Err(Error::Format(
            "more tensors listed than the model holds".into(),
        ));
    }
    let rest = r.rest;
    if !rest.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes", rest.len())));
    }
    let n_gates = model.gates().count();
    if header.gates.len() != n_gates {
        return Err(Error::Format(format!(
            "{} gate headers for {n_gates} layers",
            header.gates.len()
        )));
    }
    for (g, h) in model.gates_mut().zip(&header.gates) {
        g.delta = h.delta as f32;
        g.enabled = h.enabled;
    }
    let mut bn = model.bn_states_mut();
    if bn.len() != header.bn_populated.len() {
        return Err(Error::Format("batch-norm flag count mismatch".into()));
    }
    for ((_, b), &p) in bn.iter_mut().zip(&header.bn_populated) {
        b.populated = p;
    }
    let rng = Rng::from_state(&header.rng)
        .ok_or_else(|| Error::Format("bad generator position".into()))?;
    Ok(Session {
        cfg: header.config,
        model,
        rng,
        progress: header.progress,
        rows: header.rows,
        masks: header.masks,
        equivalence: header.equivalence,
        pre_prune_s: header.pre_prune_s,
    })
}

/// Writes to a sibling temporary file, then renames it into place.
pub fn save(session: &Session, path: &Path) -> Result<()> {
    let bytes = to_bytes(session)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Session> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::DatasetKind;
    use crate::trainer::{Data, Stage};

    fn cfg() -> TrainConfig {
        TrainConfig {
            model: "tiny".into(),
            num_classes: 2,
            dataset: DatasetKind::Blobs,
            synthetic_train: 64,
            synthetic_test: 32,
            image_size: 8,
            batch_size: 16,
            weight_epochs: 1,
            arch_epochs: 2,
            finetune_epochs: 1,
            equivalence_inputs: 8,
            ..TrainConfig::default()
        }
    }

    fn same(a: &Session, b: &Session) {
        assert_eq!(to_bytes(a).unwrap(), to_bytes(b).unwrap());
        assert_eq!(a.rng.state(), b.rng.state());
        assert_eq!(a.model.topology(), b.model.topology());
    }

    #[test]
    fn roundtrip_is_exact_at_every_stage() {
        let data = Data::from_config(&cfg()).unwrap();
        let mut s = Session::new(cfg()).unwrap();
        loop {
            let back = from_bytes(&to_bytes(&s).unwrap()).unwrap();
            same(&s, &back);
            if s.is_done() {
                break;
            }
            s.step(&data).unwrap();
        }
        assert!(s
            .model
            .layers()
            .iter()
            .all(|l| l.gates.len() == l.out_map.len()));
    }

    #[test]
    fn resumed_run_matches_uninterrupted() {
        let data = Data::from_config(&cfg()).unwrap();
        let mut full = Session::new(cfg()).unwrap();
        full.run_to_end(&data).unwrap();
        let mut part = Session::new(cfg()).unwrap();
        part.run_while(&data, |st| st != Stage::Arch).unwrap();
        part.step(&data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mid.ckpt");
        save(&part, &path).unwrap();
        let mut resumed = load(&path).unwrap();
        resumed.run_to_end(&data).unwrap();
        same(&full, &resumed);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = to_bytes(&Session::new(cfg()).unwrap()).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(from_bytes(&bad), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(from_bytes(&bad), Err(Error::Format(m)) if m.contains("version")));
        assert!(
            matches!(from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Format(m)) if m.contains("truncated"))
        );
        assert!(from_bytes(&bytes[..10]).is_err());
        let missing = load(Path::new("/nonexistent/x.ckpt")).unwrap_err();
        assert!(missing.to_string().contains("/nonexistent/x.ckpt"));
    }
}
