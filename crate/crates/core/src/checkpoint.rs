//! Binary checkpoints.
//!
//! Layout: the 8-byte magic `ZLCKPT01`, a little-endian u64 header length,
//! a JSON header, then every parameter block as little-endian f64 in header
//! order. The header lists each block's name and shape.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factored::{FactoredConfig, FactoredLayer};
use crate::heads::{Clusters, DenseHead, HsmHead, OutputHead};
use crate::linalg::Matrix;
use crate::model::{Layer, ModelConfig, NgramModel};

const MAGIC: &[u8; 8] = b"ZLCKPT01";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct BlockMeta {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum HeadMeta {
    Dense,
    Factored { config: FactoredConfig },
    Hsm { clusters: Vec<Vec<usize>> },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum Header {
    Model { config: ModelConfig, head: HeadMeta, blocks: Vec<BlockMeta> },
    FactoredLayer { n_classes: usize, dim: usize, config: FactoredConfig, blocks: Vec<BlockMeta> },
}

impl Header {
    fn blocks(&self) -> &[BlockMeta] {
        match self {
            Header::Model { blocks, .. } | Header::FactoredLayer { blocks, .. } => blocks,
        }
    }
}

#[derive(Default)]
struct Blocks {
    meta: Vec<BlockMeta>,
    data: Vec<Matrix>,
}

impl Blocks {
    fn push(&mut self, name: impl Into<String>, m: Matrix) {
        self.meta.push(BlockMeta { name: name.into(), rows: m.rows(), cols: m.cols() });
        self.data.push(m);
    }

    fn push_vec(&mut self, name: impl Into<String>, v: &[f64]) {
        self.push(name, Matrix::from_vec(v.len(), 1, v.to_vec()));
    }
}

fn write_container<W: Write>(mut w: W, header: &Header, blocks: &[Matrix]) -> Result<()> {
    let json = serde_json::to_vec(header)?;
    w.write_all(MAGIC)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for m in blocks {
        for v in m.as_slice() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_container<R: Read>(mut r: R) -> Result<(Header, Vec<(String, Matrix)>)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Data("not a checkpoint file".into()));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    if len > 1 << 30 {
        return Err(Error::Data("checkpoint header is implausibly large".into()));
    }
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json)?;
    let mut out = Vec::with_capacity(header.blocks().len());
    for b in header.blocks() {
        let mut bytes = vec![0u8; b.rows * b.cols * 8];
        r.read_exact(&mut bytes).map_err(|_| Error::Data(format!("checkpoint block `{}` is truncated", b.name)))?;
        let data: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!("checkpoint block `{}` holds non-finite values", b.name)));
        }
        out.push((b.name.clone(), Matrix::from_vec(b.rows, b.cols, data)));
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(Error::Data("trailing bytes after the last checkpoint block".into()));
    }
    Ok((header, out))
}

fn take(blocks: &mut std::vec::IntoIter<(String, Matrix)>, name: &str) -> Result<Matrix> {
    match blocks.next() {
        Some((n, m)) if n == name => Ok(m),
        Some((n, _)) => Err(Error::Data(format!("expected checkpoint block `{name}`, found `{n}`"))),
        None => Err(Error::Data(format!("checkpoint block `{name}` is missing"))),
    }
}

pub fn write_model<W: Write>(model: &NgramModel, w: W) -> Result<()> {
    let mut b = Blocks::default();
    b.push("embeddings", model.embeddings().clone());
    for (i, l) in model.layers().iter().enumerate() {
        b.push(format!("layer{i}.w"), l.w.clone());
        b.push_vec(format!("layer{i}.b"), &l.b);
    }
    let head = match model.head() {
        OutputHead::Dense(h) => {
            b.push("head.w", h.weights().clone());
            HeadMeta::Dense
        }
        OutputHead::Factored(f) => {
            b.push("head.w", f.materialize());
            HeadMeta::Factored { config: f.config() }
        }
        OutputHead::Hsm(h) => {
            b.push("head.cluster", h.w_cluster().clone());
            for (j, w) in h.w_word().iter().enumerate() {
                b.push(format!("head.word{j}"), w.clone());
            }
            HeadMeta::Hsm { clusters: h.clusters().all_members().to_vec() }
        }
    };
    let header = Header::Model { config: model.config().clone(), head, blocks: b.meta };
    write_container(w, &header, &b.data)
}

pub fn read_model<R: Read>(r: R) -> Result<NgramModel> {
    let (header, blocks) = read_container(r)?;
    let Header::Model { config, head, .. } = header else {
        return Err(Error::Data("checkpoint holds a bare factored layer, not a model".into()));
    };
    let mut it = blocks.into_iter();
    let embeddings = take(&mut it, "embeddings")?;
    let mut layers = Vec::with_capacity(config.hidden_sizes.len());
    for i in 0..config.hidden_sizes.len() {
        let w = take(&mut it, &format!("layer{i}.w"))?;
        let b = take(&mut it, &format!("layer{i}.b"))?.into_vec();
        layers.push(Layer { w, b });
    }
    let head = match head {
        HeadMeta::Dense => OutputHead::Dense(DenseHead::from_weights(take(&mut it, "head.w")?)?),
        HeadMeta::Factored { config } => {
            OutputHead::Factored(FactoredLayer::from_weights(take(&mut it, "head.w")?, config)?)
        }
        HeadMeta::Hsm { clusters } => {
            let clusters = Clusters::from_members(clusters).map_err(|e| Error::Data(e.to_string()))?;
            let w_cluster = take(&mut it, "head.cluster")?;
            let w_word = (0..clusters.n_clusters())
                .map(|j| take(&mut it, &format!("head.word{j}")))
                .collect::<Result<Vec<_>>>()?;
            OutputHead::Hsm(HsmHead::from_parts(clusters, w_cluster, w_word)?)
        }
    };
    if it.next().is_some() {
        return Err(Error::Data("unexpected extra checkpoint blocks".into()));
    }
    NgramModel::from_parts(config, embeddings, layers, head).map_err(|e| match e {
        Error::Config(m) => Error::Data(format!("checkpoint configuration is invalid: {m}")),
        e => e,
    })
}

pub fn save_model(model: &NgramModel, path: &Path) -> Result<()> {
    write_model(model, BufWriter::new(File::create(path)?))
}

pub fn load_model(path: &Path) -> Result<NgramModel> {
    read_model(BufReader::new(File::open(path)?))
}

/// Stores `D`, `d`, the configuration and the effective weights; loading
/// starts from `V = W`, `U = I`.
pub fn write_factored<W: Write>(layer: &FactoredLayer, w: W) -> Result<()> {
    let mut b = Blocks::default();
    b.push("w", layer.materialize());
    let header = Header::FactoredLayer {
        n_classes: layer.n_classes(),
        dim: layer.dim(),
        config: layer.config(),
        blocks: b.meta,
    };
    write_container(w, &header, &b.data)
}

pub fn read_factored<R: Read>(r: R) -> Result<FactoredLayer> {
    let (header, blocks) = read_container(r)?;
    let Header::FactoredLayer { n_classes, dim, config, .. } = header else {
        return Err(Error::Data("checkpoint holds a model, not a factored layer".into()));
    };
    let mut it = blocks.into_iter();
    let w = take(&mut it, "w")?;
    if (w.rows(), w.cols()) != (n_classes, dim) {
        return Err(Error::Data("factored checkpoint shape does not match its header".into()));
    }
    FactoredLayer::from_weights(w, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heads::HeadKind;
    use crate::losses::{Loss, LossKind};
    use crate::model::Activation;

    fn model(head: HeadKind, loss: Loss) -> NgramModel {
        let cfg = ModelConfig {
            vocab_size: 9,
            context_len: 2,
            emb_dim: 3,
            hidden_sizes: vec![4],
            activation: Activation::Relu,
            head,
            loss,
            seed: 1,
            init_scale: 0.5,
            output_bias: true,
            n_clusters: None,
            factored: FactoredConfig::default(),
        };
        NgramModel::new(cfg, None).unwrap()
    }

    #[test]
    fn round_trip_every_head() {
        let cases = [
            (HeadKind::Dense, Loss::plain(LossKind::LogSoftmax).unwrap()),
            (HeadKind::Factored, Loss::zloss(0.1, 10.0).unwrap()),
            (HeadKind::Hsm, Loss::plain(LossKind::LogSoftmax).unwrap()),
        ];
        for (kind, loss) in cases {
            let mut m = model(kind, loss);
            // Move a factored head away from U = I before saving.
            let cache = m.forward_hidden(&[1, 2]).unwrap();
            let st = m.head().prepare(&cache.h, 3, &loss).unwrap();
            m.head_mut().apply(&st, 0.3).unwrap();
            let mut buf = Vec::new();
            write_model(&m, &mut buf).unwrap();
            assert_eq!(&buf[..8], b"ZLCKPT01");
            let back = read_model(buf.as_slice()).unwrap();
            assert_eq!(back.config(), m.config());
            for ctx in [[0u32, 0], [4, 8], [7, 1]] {
                let (a, b) = (m.scores(&ctx).unwrap(), back.scores(&ctx).unwrap());
                for (x, y) in a.iter().zip(&b) {
                    assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()), "{kind}");
                }
            }
            buf.truncate(buf.len() - 3);
            assert!(matches!(read_model(buf.as_slice()), Err(Error::Data(_))));
        }
    }

    #[test]
    fn factored_layer_round_trip() {
        let mut layer = FactoredLayer::new(12, 3, 0.4, 2).unwrap();
        let g = crate::losses::SphericalGrad { alpha: 0.1, beta: 0.05, gamma: -0.7 };
        layer.apply_update(&[0.3, -0.2, 0.9], 4, &g, 0.5).unwrap();
        let mut buf = Vec::new();
        write_factored(&layer, &mut buf).unwrap();
        let back = read_factored(buf.as_slice()).unwrap();
        assert!(back.materialize().relative_distance(&layer.materialize()) < 1e-15);
        assert_eq!(*back.u(), Matrix::identity(3));
        assert!(read_model(buf.as_slice()).is_err());
    }

    #[test]
    fn garbage_is_a_data_error() {
        let err = read_model(&b"not a checkpoint at all"[..]).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }
}
