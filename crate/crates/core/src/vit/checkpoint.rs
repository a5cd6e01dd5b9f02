//! Checkpoint layout:
//!
//! ```text
//! vit-checkpoint v1\n
//! image_size=<usize>\n   patch_size, embed_dim, layers, heads, mlp_dim,
//! ...                    num_classes, dropout follow in that order
//! tensors=<count>\n
//! tensor <name> <d0>x<d1>...\n   one line per tensor, declaration order
//! end\n
//! <f32 little-endian values of every tensor, same order, row-major>
//! ```

use std::fs;
use std::path::Path;

use super::{ViTConfig, ViTModel};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

const MAGIC: &str = "vit-checkpoint v1";

pub fn encode_checkpoint<R: Real>(model: &ViTModel<R>) -> Vec<u8> {
    let c = model.config();
    let mut header = format!(
        "{MAGIC}\nimage_size={}\npatch_size={}\nembed_dim={}\nlayers={}\nheads={}\nmlp_dim={}\nnum_classes={}\ndropout={}\ntensors={}\n",
        c.image_size,
        c.patch_size,
        c.embed_dim,
        c.layers,
        c.heads,
        c.mlp_dim,
        c.num_classes,
        c.dropout,
        model.params().len()
    );
    for (name, t) in model.named_params() {
        let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        header.push_str(&format!("tensor {name} {}\n", dims.join("x")));
    }
    header.push_str("end\n");
    let mut out = header.into_bytes();
    for t in model.params() {
        for &v in t.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    out
}

fn next_line<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a str> {
    let rest = &bytes[*pos..];
    let end =
        rest.iter().position(|&b| b == b'\n').ok_or_else(|| Error::Format("checkpoint header is truncated".into()))?;
    *pos += end + 1;
    std::str::from_utf8(&rest[..end]).map_err(|_| Error::Format("checkpoint header is not UTF-8".into()))
}

fn keyed<T: std::str::FromStr>(line: &str, key: &str) -> Result<T> {
    line.strip_prefix(key)
        .and_then(|r| r.strip_prefix('='))
        .and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| Error::Format(format!("expected '{key}=<value>', found '{line}'")))
}

pub fn decode_checkpoint<R: Real>(bytes: &[u8]) -> Result<ViTModel<R>> {
    let mut pos = 0;
    if next_line(bytes, &mut pos)? != MAGIC {
        return Err(Error::Format("not a vit checkpoint".into()));
    }
    let mut field = |key| -> Result<String> { keyed(next_line(bytes, &mut pos)?, key) };
    let config = ViTConfig {
        image_size: field("image_size")?.parse().map_err(|_| Error::Format("image_size".into()))?,
        patch_size: field("patch_size")?.parse().map_err(|_| Error::Format("patch_size".into()))?,
        embed_dim: field("embed_dim")?.parse().map_err(|_| Error::Format("embed_dim".into()))?,
        layers: field("layers")?.parse().map_err(|_| Error::Format("layers".into()))?,
        heads: field("heads")?.parse().map_err(|_| Error::Format("heads".into()))?,
        mlp_dim: field("mlp_dim")?.parse().map_err(|_| Error::Format("mlp_dim".into()))?,
        num_classes: field("num_classes")?.parse().map_err(|_| Error::Format("num_classes".into()))?,
        dropout: field("dropout")?.parse().map_err(|_| Error::Format("dropout".into()))?,
    };
    let count: usize = keyed(next_line(bytes, &mut pos)?, "tensors")?;
    let mut specs = Vec::with_capacity(count);
    for _ in 0..count {
        let line = next_line(bytes, &mut pos)?;
        let mut parts = line.split(' ');
        let (Some("tensor"), Some(name), Some(dims), None) = (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(Error::Format(format!("bad tensor line '{line}'")));
        };
        let shape = dims
            .split('x')
            .map(|d| d.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::Format(format!("bad tensor dims '{dims}'")))?;
        specs.push((name.to_string(), shape));
    }
    if next_line(bytes, &mut pos)? != "end" {
        return Err(Error::Format("missing header terminator".into()));
    }
    let mut named = Vec::with_capacity(count);
    for (name, shape) in specs {
        let n: usize = shape.iter().product();
        let raw = bytes.get(pos..pos + 4 * n).ok_or_else(|| Error::Format(format!("payload truncated in '{name}'")))?;
        pos += 4 * n;
        let data = raw.chunks_exact(4).map(|b| R::lit(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)).collect();
        named.push((name, Tensor::new(shape, data)?));
    }
    if pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - pos)));
    }
    ViTModel::from_named(config, named)
}

pub fn save_checkpoint<R: Real>(model: &ViTModel<R>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(model)).map_err(|e| Error::path(path, e))
}

pub fn load_checkpoint<R: Real>(path: impl AsRef<Path>) -> Result<ViTModel<R>> {
    let path = path.as_ref();
    decode_checkpoint(&fs::read(path).map_err(|e| Error::path(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> ViTModel<f32> {
        ViTModel::init(ViTConfig::preset("vit-b8", 10).unwrap(), 21).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let m = model();
        let bytes = encode_checkpoint(&m);
        let back: ViTModel<f32> = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(encode_checkpoint(&back), bytes);
    }

    #[test]
    fn payload_is_little_endian_f32_after_header() {
        let m = model();
        let bytes = encode_checkpoint(&m);
        let header_end = bytes.windows(5).position(|w| w == b"\nend\n").unwrap() + 5;
        assert_eq!(bytes.len() - header_end, 4 * m.param_count());
        let first = m.params()[0].data()[0];
        assert_eq!(&bytes[header_end..header_end + 4], &first.to_le_bytes());
        let header = std::str::from_utf8(&bytes[..header_end]).unwrap();
        assert!(header.starts_with("vit-checkpoint v1\nimage_size=32\npatch_size=8\n"));
        assert!(header.contains("tensor patch_embed.weight 192x32\n"));
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let bytes = encode_checkpoint(&model());
        assert!(decode_checkpoint::<f32>(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_checkpoint::<f32>(&extra).is_err());
        assert!(decode_checkpoint::<f32>(b"nonsense\n").is_err());
    }
}
