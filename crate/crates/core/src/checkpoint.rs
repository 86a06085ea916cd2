//! Binary checkpoint format.
//!
//! All integers are little-endian `u32`; all tensor values little-endian `f64`.
//!
//! ```text
//! magic      6 bytes  "MLDNN1"
//! version    u32      1
//! arch       u32 len + UTF-8   architecture text (empty for hand-built graphs)
//! topology   u32 len + UTF-8   one node per line: kind name preds args...
//! metadata   u32 len + UTF-8   key=value lines
//! count      u32
//! tensor*    u32 len + UTF-8 name, u32 rows, u32 cols, rows*cols f64
//! ```
//!
//! The layout is fully determined by the graph contents, so saving a loaded
//! checkpoint reproduces the original bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::data::Normalizer;
use crate::error::{Error, Result};
use crate::graph::{GraphBuilder, ModelGraph, NodeKind};
use crate::layers::{Activation, BatchNormState};
use crate::modelspec::parse_spec;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

pub const MAGIC: &[u8; 6] = b"MLDNN1";
pub const VERSION: u32 = 1;

const NORMALIZER_MU: &str = "normalizer.mu";
const NORMALIZER_SIGMA: &str = "normalizer.sigma";
const SIGMA_FLOOR_KEY: &str = "normalizer.sigma_floor";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T = f64> {
    pub graph: ModelGraph<T>,
    pub normalizer: Option<Normalizer<T>>,
    pub metadata: BTreeMap<String, String>,
}

pub fn checkpoint_save<T: Scalar>(g: &ModelGraph<T>, path: impl AsRef<Path>) -> Result<()> {
    save_checkpoint(path, g, None, &BTreeMap::new())
}

pub fn checkpoint_load<T: Scalar>(path: impl AsRef<Path>) -> Result<ModelGraph<T>> {
    Ok(load_checkpoint(path)?.graph)
}

pub fn save_checkpoint<T: Scalar>(
    path: impl AsRef<Path>,
    g: &ModelGraph<T>,
    normalizer: Option<&Normalizer<T>>,
    metadata: &BTreeMap<String, String>,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(g, normalizer, metadata)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

fn topology<T: Scalar>(g: &ModelGraph<T>) -> String {
    let mut s = String::new();
    for node in g.nodes() {
        let preds = if node.predecessors.is_empty() {
            "-".to_string()
        } else {
            node.predecessors.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
        };
        let args = match &node.kind {
            NodeKind::Input { width } => width.to_string(),
            NodeKind::BatchNorm { state, .. } => {
                format!("{:?} {:?}", state.momentum.as_f64(), state.epsilon.as_f64())
            }
            NodeKind::Dense { params, activation, .. } => {
                format!("{} {}", params.out_dim(), activation.keyword())
            }
            NodeKind::Concat { .. } => String::new(),
        };
        let line = format!("{} {} {} {}", node.kind.keyword(), node.name, preds, args);
        s.push_str(line.trim_end());
        s.push('\n');
    }
    s
}

pub fn encode<T: Scalar>(
    g: &ModelGraph<T>,
    normalizer: Option<&Normalizer<T>>,
    metadata: &BTreeMap<String, String>,
) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let arch = g.architecture().map(|a| a.render()).unwrap_or_default();
    put_str(&mut out, &arch)?;
    put_str(&mut out, &topology(g))?;

    let mut meta = metadata.clone();
    if let Some(nz) = normalizer {
        meta.insert(SIGMA_FLOOR_KEY.into(), format!("{:?}", nz.sigma_floor.as_f64()));
    }
    let mut meta_text = String::new();
    for (k, v) in &meta {
        if k.contains('=') || k.contains('\n') || v.contains('\n') {
            return Err(Error::Checkpoint(format!("metadata entry '{k}' cannot be encoded")));
        }
        meta_text.push_str(&format!("{k}={v}\n"));
    }
    put_str(&mut out, &meta_text)?;

    let mut tensors: Vec<(String, &Matrix<T>)> = g.tensors();
    if let Some(nz) = normalizer {
        tensors.push((NORMALIZER_MU.into(), &nz.mu));
        tensors.push((NORMALIZER_SIGMA.into(), &nz.sigma));
    }
    put_u32(&mut out, tensors.len())?;
    for (name, m) in tensors {
        put_str(&mut out, &name)?;
        put_u32(&mut out, m.rows())?;
        put_u32(&mut out, m.cols())?;
        for v in m.as_slice() {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    Ok(out)
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("value {v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    put_u32(out, s.len())?;
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "truncated checkpoint: {what} needs {n} bytes at offset {}, only {} remain",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)?;
        let b = self.take(n, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Checkpoint(format!("{what} is not valid UTF-8")))
    }
}

fn bad_topology(line: &str, why: &str) -> Error {
    Error::Checkpoint(format!("bad topology line '{line}': {why}"))
}

fn rebuild<T: Scalar>(text: &str) -> Result<ModelGraph<T>> {
    let mut lines = text.lines();
    let first = lines.next().ok_or_else(|| Error::Checkpoint("empty topology".into()))?;
    let f: Vec<&str> = first.split(' ').collect();
    let width = match f.as_slice() {
        ["input", "input", "-", w] => w.parse().map_err(|_| bad_topology(first, "input width"))?,
        _ => return Err(bad_topology(first, "expected the input node first")),
    };
    let mut b = GraphBuilder::<T>::new(width, 0)?;
    for line in lines {
        let f: Vec<&str> = line.split(' ').collect();
        let pred = |s: &str| -> Result<usize> { s.parse().map_err(|_| bad_topology(line, "predecessor id")) };
        let num = |s: &str| -> Result<f64> { s.parse().map_err(|_| bad_topology(line, "number")) };
        match f.as_slice() {
            ["batchnorm", name, p, momentum, eps] => {
                let p = pred(p)?;
                let width = b.node_width(p).ok_or_else(|| bad_topology(line, "unknown predecessor"))?;
                let state = BatchNormState::with_hyper(width, T::lit(num(momentum)?), T::lit(num(eps)?))?;
                b.batchnorm_with(name, p, state)?;
            }
            ["dense", name, p, units, act] => {
                let units: usize = units.parse().map_err(|_| bad_topology(line, "unit count"))?;
                let act = match *act {
                    "relu" => Activation::Relu,
                    "linear" => Activation::Linear,
                    _ => return Err(bad_topology(line, "activation")),
                };
                b.dense(name, pred(p)?, units, act)?;
            }
            ["concat", name, ps] => {
                let preds = ps.split(',').map(pred).collect::<Result<Vec<_>>>()?;
                b.concat(name, &preds)?;
            }
            _ => return Err(bad_topology(line, "unrecognized node")),
        }
    }
    b.finish()
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(MAGIC.len(), "magic header").map_err(|_| {
        Error::Checkpoint("not a checkpoint: expected magic \"MLDNN1\" but the file is too short".into())
    })?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "not a checkpoint: expected magic \"MLDNN1\", found {:?}",
            String::from_utf8_lossy(magic)
        )));
    }
    let version = r.u32("version")?;
    if version != VERSION as usize {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let arch = r.string("architecture text")?;
    let topo = r.string("topology")?;
    let meta_text = r.string("metadata")?;

    let mut graph = rebuild::<T>(&topo)?;
    if !arch.is_empty() {
        graph.set_architecture(Some(parse_spec(&arch)?));
    }
    let mut metadata = BTreeMap::new();
    for line in meta_text.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Checkpoint(format!("bad metadata line '{line}'")))?;
        metadata.insert(k.to_string(), v.to_string());
    }

    let count = r.u32("tensor count")?;
    let mut loaded: BTreeMap<String, Matrix<T>> = BTreeMap::new();
    for _ in 0..count {
        let name = r.string("tensor name")?;
        let rows = r.u32("tensor rows")?;
        let cols = r.u32("tensor cols")?;
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::Checkpoint(format!("tensor '{name}' shape overflows")))?;
        let raw = r.take(n, &format!("tensor '{name}'"))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8-byte chunk"))))
            .collect();
        let m = Matrix::new(rows, cols, data).map_err(|e| Error::Checkpoint(format!("tensor '{name}': {e}")))?;
        if loaded.insert(name.clone(), m).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor '{name}'")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} unexpected trailing bytes after the last tensor",
            bytes.len() - r.pos
        )));
    }

    for (name, slot) in graph.tensors_mut() {
        let m = loaded
            .remove(&name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor '{name}'")))?;
        if m.shape() != slot.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor '{name}' is {:?}, graph expects {:?}",
                m.shape(),
                slot.shape()
            )));
        }
        *slot = m;
    }
    let normalizer = match (loaded.remove(NORMALIZER_MU), loaded.remove(NORMALIZER_SIGMA)) {
        (Some(mu), Some(sigma)) => {
            let floor = metadata
                .remove(SIGMA_FLOOR_KEY)
                .and_then(|s| s.parse::<f64>().ok())
                .ok_or_else(|| Error::Checkpoint("normalizer present without its sigma floor".into()))?;
            Some(Normalizer {
                mu,
                sigma,
                sigma_floor: T::lit(floor),
            })
        }
        (None, None) => None,
        _ => return Err(Error::Checkpoint("normalizer needs both mu and sigma".into())),
    };
    if let Some(extra) = loaded.keys().next() {
        return Err(Error::Checkpoint(format!("unknown tensor '{extra}'")));
    }
    Ok(Checkpoint {
        graph,
        normalizer,
        metadata,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::fit_normalizer;
    use crate::layers::Mode;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
    }

    fn trained_graph() -> ModelGraph {
        let mut g = ModelGraph::build_default_seeded(5);
        // move the running statistics away from their defaults
        g.forward(&random(8, 13, 1), Mode::Train).unwrap();
        g.clear_caches();
        g
    }

    #[test]
    fn round_trip_is_bitwise() {
        let g = trained_graph();
        let nz = fit_normalizer(&random(10, 13, 2)).unwrap();
        let mut meta = BTreeMap::new();
        meta.insert("seed".to_string(), "5".to_string());
        let bytes = encode(&g, Some(&nz), &meta).unwrap();
        let ck: Checkpoint = decode(&bytes).unwrap();
        assert_eq!(ck.graph, g);
        assert_eq!(ck.normalizer.as_ref(), Some(&nz));
        assert_eq!(ck.metadata, meta);
        assert_eq!(encode(&ck.graph, ck.normalizer.as_ref(), &ck.metadata).unwrap(), bytes);

        let x = random(6, 13, 3);
        let a = g.predict(&x).unwrap();
        let b = ck.graph.predict(&x).unwrap();
        let bits = |m: &Matrix| m.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn file_round_trip_and_hand_built_graph() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.ckpt");
        let mut b = GraphBuilder::<f64>::new(4, 9).unwrap();
        let bn = b.batchnorm("bn", 0).unwrap();
        let d1 = b.dense("a", bn, 3, Activation::Relu).unwrap();
        let d2 = b.dense("b", bn, 2, Activation::Linear).unwrap();
        let c = b.concat("cat", &[d1, d2]).unwrap();
        b.dense("out", c, 1, Activation::Linear).unwrap();
        let g = b.finish().unwrap();
        checkpoint_save(&g, &p).unwrap();
        let first = fs::read(&p).unwrap();
        let back: ModelGraph = checkpoint_load(&p).unwrap();
        assert_eq!(back, g);
        assert!(back.architecture().is_none());
        checkpoint_save(&back, &p).unwrap();
        assert_eq!(fs::read(&p).unwrap(), first);
    }

    #[test]
    fn corrupted_magic() {
        let mut bytes = encode(&ModelGraph::<f64>::build_default(), None, &BTreeMap::new()).unwrap();
        bytes[0] = b'X';
        let err = decode::<f64>(&bytes).unwrap_err().to_string();
        assert!(err.contains("MLDNN1"), "{err}");
        assert!(decode::<f64>(b"MLD").unwrap_err().to_string().contains("MLDNN1"));
    }

    #[test]
    fn version_mismatch_and_truncation() {
        let bytes = encode(&ModelGraph::<f64>::build_default(), None, &BTreeMap::new()).unwrap();
        let mut v2 = bytes.clone();
        v2[6] = 2;
        assert!(decode::<f64>(&v2).unwrap_err().to_string().contains("version 2"));
        for cut in [10, 40, bytes.len() / 2, bytes.len() - 1] {
            let err = decode::<f64>(&bytes[..cut]).unwrap_err().to_string();
            assert!(err.contains("truncated"), "cut {cut}: {err}");
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode::<f64>(&extra).unwrap_err().to_string().contains("trailing"));
    }

    #[test]
    fn f32_graph_round_trips() {
        let g = ModelGraph::<f32>::build_default_seeded(2);
        let bytes = encode(&g, None, &BTreeMap::new()).unwrap();
        let back: Checkpoint<f32> = decode(&bytes).unwrap();
        assert_eq!(back.graph, g);
    }
}
