//! Binary model checkpoints.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! offset  size  field
//! 0       8     magic "FBSDCKPT"
//! 8       4     version (u32) = 1
//! 12      4     backbone layer count L (u32)
//! 16      1     head present (u8: 0 or 1)
//! 17      9*L   per backbone layer: in (u32), out (u32), relu (u8)
//! ...     8     head in (u32), head out (u32)       -- only if head present
//! ...           parameters, layer by layer (backbone first, then head):
//!               weight as out*in f64 row-major, then bias as out f64
//! ```
//!
//! The file ends exactly after the last parameter. The backbone/head boundary
//! is the header's layer count; a backbone-only checkpoint (head byte 0) is
//! what the server would persist for the global backbone.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::layer::LinearLayer;
use super::model::{BackboneNet, HeadLayer, SplitModel};
use crate::error::{Error, Result};
use crate::tensor::Tensor2D;

pub const MAGIC: &[u8; 8] = b"FBSDCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub backbone: BackboneNet,
    pub head: Option<HeadLayer>,
}

impl Checkpoint {
    pub fn into_model(self) -> Result<SplitModel> {
        let head = self.head.ok_or_else(|| Error::Format {
            offset: 16,
            msg: "checkpoint holds no head".into(),
        })?;
        SplitModel::new(self.backbone, head)
    }
}

pub fn write_checkpoint<W: Write>(mut w: W, backbone: &BackboneNet, head: Option<&HeadLayer>) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(backbone.num_layers() as u32).to_le_bytes())?;
    w.write_all(&[head.is_some() as u8])?;
    for (i, o, relu) in backbone.architecture() {
        w.write_all(&(i as u32).to_le_bytes())?;
        w.write_all(&(o as u32).to_le_bytes())?;
        w.write_all(&[relu as u8])?;
    }
    if let Some(h) = head {
        w.write_all(&(h.feature_dim() as u32).to_le_bytes())?;
        w.write_all(&(h.num_classes() as u32).to_le_bytes())?;
    }
    let layers = backbone.layers().chain(head.map(HeadLayer::layer));
    for layer in layers {
        for v in layer.params() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Reader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner.read_exact(&mut buf).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => Error::Format {
                offset: self.offset,
                msg: format!("truncated while reading {what}"),
            },
            _ => Error::Io(e),
        })?;
        self.offset += N as u64;
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes::<4>(what)?))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes::<8>(what)?))
    }
}

pub fn read_checkpoint<R: Read>(r: R) -> Result<Checkpoint> {
    let mut r = Reader { inner: r, offset: 0 };
    if &r.bytes::<8>("magic")? != MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: "bad checkpoint magic".into(),
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format {
            offset: 8,
            msg: format!("unsupported checkpoint version {version}"),
        });
    }
    let n_layers = r.u32("layer count")? as usize;
    let has_head = match r.bytes::<1>("head flag")?[0] {
        0 => false,
        1 => true,
        other => {
            return Err(Error::Format {
                offset: 16,
                msg: format!("head flag must be 0 or 1, got {other}"),
            })
        }
    };
    let mut dims = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let i = r.u32("layer input width")? as usize;
        let o = r.u32("layer output width")? as usize;
        let relu = r.bytes::<1>("activation flag")?[0] != 0;
        dims.push((i, o, relu));
    }
    let head_dims = if has_head {
        Some((r.u32("head input width")? as usize, r.u32("head output width")? as usize))
    } else {
        None
    };
    let read_layer = |r: &mut Reader<R>, i: usize, o: usize| -> Result<LinearLayer> {
        let mut w = Vec::with_capacity(i * o);
        for _ in 0..i * o {
            w.push(r.f64("weights")?);
        }
        let mut b = Vec::with_capacity(o);
        for _ in 0..o {
            b.push(r.f64("bias")?);
        }
        LinearLayer::from_params(Tensor2D::from_vec(o, i, w)?, b)
    };
    let mut layers = Vec::with_capacity(n_layers);
    for &(i, o, relu) in &dims {
        layers.push((read_layer(&mut r, i, o)?, relu));
    }
    let backbone = BackboneNet::from_layers(layers)?;
    let head = match head_dims {
        Some((i, o)) => Some(HeadLayer::from_layer(read_layer(&mut r, i, o)?)),
        None => None,
    };
    let mut trailing = [0u8; 1];
    if r.inner.read(&mut trailing)? != 0 {
        return Err(Error::Format {
            offset: r.offset,
            msg: "trailing bytes after parameters".into(),
        });
    }
    if let Some(h) = &head {
        if h.feature_dim() != backbone.feature_dim() {
            return Err(Error::Architecture(format!(
                "checkpoint head expects {} features, backbone emits {}",
                h.feature_dim(),
                backbone.feature_dim()
            )));
        }
    }
    Ok(Checkpoint { backbone, head })
}

pub fn save_model(path: &Path, model: &SplitModel) -> Result<()> {
    write_checkpoint(BufWriter::new(File::create(path)?), &model.backbone, Some(&model.head))
}

pub fn save_backbone(path: &Path, backbone: &BackboneNet) -> Result<()> {
    write_checkpoint(BufWriter::new(File::create(path)?), backbone, None)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
