//! Checkpoint archive: `ecl-ckpt v1`.
//!
//! A single binary file holding named f64 tensors with shape metadata plus a
//! JSON manifest. Per expert it stores the encoder, both classifier heads,
//! the contrastive head, the momentum twin, and the queue buffer. Inference
//! needs only the encoder and classification head, so a checkpoint stripped
//! of every training-only tensor still evaluates identically.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{EclError, Result};
use crate::expertnet::{ConHead, Encoder, Expert, Linear, MomentumTwin, QueueState};

const MAGIC: &[u8; 8] = b"ECLCKPT1";
pub const CKPT_FORMAT: &str = "ecl-ckpt v1";

/// Manifest carried at the head of the archive.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CkptManifest {
    #[serde(rename = "K")]
    pub k: usize,
    pub d: usize,
    #[serde(rename = "C")]
    pub c: usize,
    pub d_prime: usize,
    pub format: String,
}

/// A named tensor with explicit shape.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl TensorEntry {
    fn mat(name: String, m: &Array2<f64>) -> Self {
        Self {
            name,
            dims: vec![m.nrows(), m.ncols()],
            data: m.iter().copied().collect(),
        }
    }

    fn vec(name: String, v: &Array1<f64>) -> Self {
        Self { name, dims: vec![v.len()], data: v.to_vec() }
    }

    fn scalar(name: String, v: f64) -> Self {
        Self { name, dims: vec![1], data: vec![v] }
    }

    fn to_mat(&self) -> Result<Array2<f64>> {
        if self.dims.len() != 2 {
            return Err(EclError::Data(format!("tensor {} is not 2-d", self.name)));
        }
        Array2::from_shape_vec((self.dims[0], self.dims[1]), self.data.clone())
            .map_err(|e| EclError::Data(format!("tensor {}: {e}", self.name)))
    }

    fn to_vec1(&self) -> Result<Array1<f64>> {
        if self.dims.len() != 1 {
            return Err(EclError::Data(format!("tensor {} is not 1-d", self.name)));
        }
        Ok(Array1::from_vec(self.data.clone()))
    }
}

/// In-memory checkpoint archive.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: CkptManifest,
    pub tensors: Vec<TensorEntry>,
}

fn expert_prefix(k: usize) -> String {
    format!("expert{k}")
}

fn push_linear(tensors: &mut Vec<TensorEntry>, prefix: &str, lin: &Linear) {
    tensors.push(TensorEntry::mat(format!("{prefix}.w"), &lin.w));
    tensors.push(TensorEntry::vec(format!("{prefix}.b"), &lin.b));
}

fn push_encoder(tensors: &mut Vec<TensorEntry>, prefix: &str, enc: &Encoder) {
    for (j, lin) in enc.layers.iter().enumerate() {
        push_linear(tensors, &format!("{prefix}.encoder.{j}"), lin);
    }
}

fn push_con(tensors: &mut Vec<TensorEntry>, prefix: &str, con: &ConHead) {
    push_linear(tensors, &format!("{prefix}.con.0"), &con.lin1);
    push_linear(tensors, &format!("{prefix}.con.1"), &con.lin2);
}

/// Assembles the full archive from trained components.
pub fn build_checkpoint(
    experts: &[Expert],
    twins: &[MomentumTwin],
    queues: &[QueueState],
) -> Result<Checkpoint> {
    if experts.is_empty() || twins.len() != experts.len() || queues.len() != experts.len() {
        return Err(EclError::InvalidInput(
            "experts, twins, and queues must have equal non-zero length".into(),
        ));
    }
    let mut tensors = Vec::new();
    for (k, expert) in experts.iter().enumerate() {
        let p = expert_prefix(k);
        push_encoder(&mut tensors, &p, &expert.encoder);
        push_linear(&mut tensors, &format!("{p}.cls"), &expert.cls_head);
        push_linear(&mut tensors, &format!("{p}.ref"), &expert.ref_head);
        push_con(&mut tensors, &p, &expert.con_head);
        push_encoder(&mut tensors, &format!("{p}.twin"), &twins[k].encoder);
        push_con(&mut tensors, &format!("{p}.twin"), &twins[k].con_head);
        tensors.push(TensorEntry::mat(
            format!("{p}.queue.buffer"),
            &queues[k].rows().to_owned(),
        ));
        tensors.push(TensorEntry::scalar(
            format!("{p}.queue.cursor"),
            queues[k].cursor() as f64,
        ));
    }
    let first = &experts[0];
    Ok(Checkpoint {
        manifest: CkptManifest {
            k: experts.len(),
            d: first.feature_dim(),
            c: first.num_classes(),
            d_prime: first.embed_dim(),
            format: CKPT_FORMAT.to_string(),
        },
        tensors,
    })
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&TensorEntry> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Removes the reference heads, contrastive heads, momentum twins, and
    /// queues, leaving exactly what inference reads.
    pub fn strip_training_tensors(&mut self) {
        self.tensors.retain(|t| {
            let rest = match t.name.split_once('.') {
                Some((_, rest)) => rest,
                None => return true,
            };
            !(rest.starts_with("ref.")
                || rest.starts_with("con.")
                || rest.starts_with("twin.")
                || rest.starts_with("queue."))
        });
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = BufWriter::new(file);
        w.write_all(MAGIC)?;
        let manifest =
            serde_json::to_vec(&self.manifest).expect("manifest serializes");
        w.write_all(&(manifest.len() as u64).to_le_bytes())?;
        w.write_all(&manifest)?;
        w.write_all(&(self.tensors.len() as u64).to_le_bytes())?;
        for t in &self.tensors {
            let name = t.name.as_bytes();
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&[t.dims.len() as u8])?;
            for &d in &t.dims {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            let expected: usize = t.dims.iter().product();
            if expected != t.data.len() {
                return Err(EclError::InvalidInput(format!(
                    "tensor {} has {} values for dims {:?}",
                    t.name,
                    t.data.len(),
                    t.dims
                )));
            }
            for &v in &t.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)
            .map_err(|e| EclError::Data(format!("cannot open checkpoint {}: {e}", path.display())))?;
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| EclError::Data("truncated checkpoint".into()))?;
        if &magic != MAGIC {
            return Err(EclError::Data("not an ecl-ckpt v1 file".into()));
        }
        let manifest_len = read_u64(&mut r)? as usize;
        if manifest_len > 1 << 20 {
            return Err(EclError::Data("unreasonable manifest size".into()));
        }
        let mut manifest_buf = vec![0u8; manifest_len];
        r.read_exact(&mut manifest_buf)
            .map_err(|_| EclError::Data("truncated manifest".into()))?;
        let manifest: CkptManifest = serde_json::from_slice(&manifest_buf)
            .map_err(|e| EclError::Data(format!("bad manifest: {e}")))?;
        if manifest.format != CKPT_FORMAT {
            return Err(EclError::Data(format!(
                "unsupported checkpoint format '{}'",
                manifest.format
            )));
        }
        let count = read_u64(&mut r)? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            if name_len > 4096 {
                return Err(EclError::Data("unreasonable tensor name".into()));
            }
            let mut name_buf = vec![0u8; name_len];
            r.read_exact(&mut name_buf)
                .map_err(|_| EclError::Data("truncated tensor name".into()))?;
            let name = String::from_utf8(name_buf)
                .map_err(|_| EclError::Data("tensor name is not utf-8".into()))?;
            let mut ndim = [0u8; 1];
            r.read_exact(&mut ndim)
                .map_err(|_| EclError::Data("truncated tensor header".into()))?;
            let mut dims = Vec::with_capacity(ndim[0] as usize);
            for _ in 0..ndim[0] {
                dims.push(read_u64(&mut r)? as usize);
            }
            let len: usize = dims.iter().product();
            if len > 1 << 28 {
                return Err(EclError::Data("unreasonable tensor size".into()));
            }
            let mut data = Vec::with_capacity(len);
            let mut buf = [0u8; 8];
            for _ in 0..len {
                r.read_exact(&mut buf)
                    .map_err(|_| EclError::Data("truncated tensor data".into()))?;
                data.push(f64::from_le_bytes(buf));
            }
            tensors.push(TensorEntry { name, dims, data });
        }
        Ok(Self { manifest, tensors })
    }
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)
        .map_err(|_| EclError::Data("truncated checkpoint".into()))?;
    Ok(u64::from_le_bytes(buf))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| EclError::Data("truncated checkpoint".into()))?;
    Ok(u32::from_le_bytes(buf))
}

/// One expert as reconstructed from an archive; training-only heads may be
/// absent when the checkpoint was stripped.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedExpert {
    pub encoder: Encoder,
    pub cls_head: Linear,
    pub ref_head: Option<Linear>,
    pub con_head: Option<ConHead>,
}

/// Full model reconstructed from an archive.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedModel {
    pub manifest: CkptManifest,
    pub experts: Vec<LoadedExpert>,
    pub twins: Vec<Option<(Encoder, ConHead)>>,
    pub queues: Vec<Option<QueueState>>,
}

fn load_linear(ck: &Checkpoint, prefix: &str) -> Result<Option<Linear>> {
    match (ck.get(&format!("{prefix}.w")), ck.get(&format!("{prefix}.b"))) {
        (Some(w), Some(b)) => Ok(Some(Linear { w: w.to_mat()?, b: b.to_vec1()? })),
        (None, None) => Ok(None),
        _ => Err(EclError::Data(format!("incomplete linear tensors at {prefix}"))),
    }
}

fn load_encoder(ck: &Checkpoint, prefix: &str) -> Result<Option<Encoder>> {
    let mut layers = Vec::new();
    while let Some(lin) = load_linear(ck, &format!("{prefix}.encoder.{}", layers.len()))? {
        layers.push(lin);
    }
    if layers.is_empty() {
        return Ok(None);
    }
    Ok(Some(Encoder { layers }))
}

fn load_con(ck: &Checkpoint, prefix: &str) -> Result<Option<ConHead>> {
    let lin1 = load_linear(ck, &format!("{prefix}.con.0"))?;
    let lin2 = load_linear(ck, &format!("{prefix}.con.1"))?;
    match (lin1, lin2) {
        (Some(lin1), Some(lin2)) => Ok(Some(ConHead { lin1, lin2 })),
        (None, None) => Ok(None),
        _ => Err(EclError::Data(format!("incomplete contrastive head at {prefix}"))),
    }
}

/// Rebuilds the model structures from an archive.
pub fn load_model(ck: &Checkpoint) -> Result<LoadedModel> {
    let k = ck.manifest.k;
    if k == 0 {
        return Err(EclError::Data("manifest declares zero experts".into()));
    }
    let mut experts = Vec::with_capacity(k);
    let mut twins = Vec::with_capacity(k);
    let mut queues = Vec::with_capacity(k);
    for i in 0..k {
        let p = expert_prefix(i);
        let encoder = load_encoder(ck, &p)?
            .ok_or_else(|| EclError::Data(format!("missing encoder for expert {i}")))?;
        let cls_head = load_linear(ck, &format!("{p}.cls"))?
            .ok_or_else(|| EclError::Data(format!("missing cls head for expert {i}")))?;
        if encoder.output_dim() != cls_head.in_dim() {
            return Err(EclError::Data(format!("expert {i} head/encoder dims disagree")));
        }
        let ref_head = load_linear(ck, &format!("{p}.ref"))?;
        let con_head = load_con(ck, &p)?;
        experts.push(LoadedExpert { encoder, cls_head, ref_head, con_head });

        let twin_prefix = format!("{p}.twin");
        let twin_encoder = load_encoder(ck, &twin_prefix)?;
        let twin_con = load_con(ck, &twin_prefix)?;
        twins.push(match (twin_encoder, twin_con) {
            (Some(e), Some(c)) => Some((e, c)),
            (None, None) => None,
            _ => return Err(EclError::Data(format!("incomplete twin for expert {i}"))),
        });

        let buffer = ck.get(&format!("{p}.queue.buffer"));
        let cursor = ck.get(&format!("{p}.queue.cursor"));
        queues.push(match (buffer, cursor) {
            (Some(buf), Some(cur)) => {
                let cursor = cur.data.first().copied().unwrap_or(0.0) as usize;
                Some(QueueState::from_parts(buf.to_mat()?, cursor)?)
            }
            (None, None) => None,
            _ => return Err(EclError::Data(format!("incomplete queue for expert {i}"))),
        });
    }
    Ok(LoadedModel { manifest: ck.manifest.clone(), experts, twins, queues })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expertnet::ExpertArch;

    fn build_parts(k: usize) -> (Vec<Expert>, Vec<MomentumTwin>, Vec<QueueState>) {
        let arch = ExpertArch {
            input_dim: 4,
            encoder_widths: vec![6, 5],
            num_classes: 3,
            embed_dim: 2,
        };
        let experts: Vec<Expert> =
            (0..k).map(|i| Expert::new_seeded(&arch, i, 77).unwrap()).collect();
        let twins = experts
            .iter()
            .map(|e| MomentumTwin::from_expert(e, 0.9).unwrap())
            .collect();
        let queues = (0..k).map(|i| QueueState::new_seeded(8, 2, i as u64).unwrap()).collect();
        (experts, twins, queues)
    }

    #[test]
    fn round_trip_is_bitwise() {
        let (experts, twins, queues) = build_parts(2);
        let ck = build_checkpoint(&experts, &twins, &queues).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        ck.write_to(&path).unwrap();
        let back = Checkpoint::read_from(&path).unwrap();
        assert_eq!(ck, back);

        let model = load_model(&back).unwrap();
        assert_eq!(model.manifest.k, 2);
        assert_eq!(model.manifest.d, 5);
        assert_eq!(model.manifest.c, 3);
        assert_eq!(model.manifest.d_prime, 2);
        for (loaded, original) in model.experts.iter().zip(&experts) {
            assert_eq!(loaded.encoder, original.encoder);
            assert_eq!(loaded.cls_head, original.cls_head);
            assert_eq!(loaded.ref_head.as_ref().unwrap(), &original.ref_head);
            assert_eq!(loaded.con_head.as_ref().unwrap(), &original.con_head);
        }
        for (loaded, original) in model.queues.iter().zip(&queues) {
            assert_eq!(loaded.as_ref().unwrap(), original);
        }
    }

    #[test]
    fn strip_keeps_only_inference_tensors() {
        let (experts, twins, queues) = build_parts(2);
        let mut ck = build_checkpoint(&experts, &twins, &queues).unwrap();
        ck.strip_training_tensors();
        assert!(ck.tensors.iter().all(|t| {
            t.name.contains(".encoder.") && !t.name.contains(".twin.")
                || t.name.contains(".cls.")
        }));
        let model = load_model(&ck).unwrap();
        for (loaded, original) in model.experts.iter().zip(&experts) {
            assert_eq!(loaded.encoder, original.encoder);
            assert_eq!(loaded.cls_head, original.cls_head);
            assert!(loaded.ref_head.is_none());
            assert!(loaded.con_head.is_none());
        }
        assert!(model.twins.iter().all(Option::is_none));
        assert!(model.queues.iter().all(Option::is_none));
    }

    #[test]
    fn rejects_malformed_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        std::fs::write(&path, b"garbage").unwrap();
        assert!(Checkpoint::read_from(&path).is_err());
        std::fs::write(&path, b"ECLCKPT1\x01\x00\x00\x00").unwrap();
        assert!(Checkpoint::read_from(&path).is_err());
    }

    #[test]
    fn manifest_json_field_names() {
        let (experts, twins, queues) = build_parts(1);
        let ck = build_checkpoint(&experts, &twins, &queues).unwrap();
        let json = serde_json::to_string(&ck.manifest).unwrap();
        assert_eq!(
            json,
            r#"{"K":1,"d":5,"C":3,"d_prime":2,"format":"ecl-ckpt v1"}"#
        );
    }
}
