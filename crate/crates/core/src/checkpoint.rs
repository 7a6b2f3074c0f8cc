//! Checkpoint container: a plain-text manifest header followed by
//! length-prefixed raw tensor payloads, everything little-endian.
//!
//! ```text
//! DFCKPT 1
//! iteration <n>
//! config <single-line echo of the training configuration>
//! tensors <count>
//! <name> <rank> <dim..>        (one line per tensor, manifest order)
//! data
//! <u64 element count><f64 elements>   (per tensor, same order)
//! ```
//!
//! Saving the result of a load reproduces the input byte for byte.

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;
use std::fmt::Write as _;
use std::path::Path;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "DFCKPT";

#[derive(Debug)]
pub struct Checkpoint {
    pub version: u32,
    pub iteration: u64,
    pub config: String,
    pub params: ParamSet,
}

fn err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn to_bytes(params: &ParamSet, iteration: u64, config: &str) -> Result<Vec<u8>> {
    if config.contains('\n') {
        return Err(err("config echo must be a single line"));
    }
    let mut head = String::new();
    let _ = writeln!(head, "{MAGIC} {FORMAT_VERSION}");
    let _ = writeln!(head, "iteration {iteration}");
    let _ = writeln!(head, "config {config}");
    let _ = writeln!(head, "tensors {}", params.len());
    for (name, t) in params.iter() {
        if name.is_empty() || name.chars().any(char::is_whitespace) {
            return Err(err(format!("tensor name {name:?} not storable")));
        }
        let _ = write!(head, "{name} {}", t.rank());
        for d in t.shape() {
            let _ = write!(head, " {d}");
        }
        head.push('\n');
    }
    head.push_str("data\n");

    let mut bytes = head.into_bytes();
    for (_, t) in params.iter() {
        bytes.extend_from_slice(&(t.numel() as u64).to_le_bytes());
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(bytes)
}

pub fn save(path: &Path, params: &ParamSet, iteration: u64, config: &str) -> Result<()> {
    std::fs::write(path, to_bytes(params, iteration, config)?)?;
    Ok(())
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let mut pos = 0usize;
    let mut line = || -> Result<&str> {
        let rest = bytes.get(pos..).ok_or_else(|| err("truncated header"))?;
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| err("truncated header"))?;
        let s = std::str::from_utf8(&rest[..end]).map_err(|_| err("header is not UTF-8"))?;
        pos += end + 1;
        Ok(s)
    };

    let magic_line = line()?;
    let version: u32 = match magic_line.split_once(' ') {
        Some((MAGIC, v)) => v
            .parse()
            .map_err(|_| err(format!("bad version field {v:?}")))?,
        _ => return Err(err(format!("bad magic {magic_line:?}"))),
    };
    if version != FORMAT_VERSION {
        return Err(err(format!(
            "version mismatch: file has {version}, reader supports {FORMAT_VERSION}"
        )));
    }
    let iteration: u64 = line()?
        .strip_prefix("iteration ")
        .ok_or_else(|| err("missing iteration line"))?
        .parse()
        .map_err(|_| err("bad iteration count"))?;
    let config = line()?
        .strip_prefix("config")
        .ok_or_else(|| err("missing config line"))?
        .strip_prefix(' ')
        .unwrap_or("")
        .to_string();
    let count: usize = line()?
        .strip_prefix("tensors ")
        .ok_or_else(|| err("missing tensors line"))?
        .parse()
        .map_err(|_| err("bad tensor count"))?;

    let mut manifest = Vec::with_capacity(count);
    for _ in 0..count {
        let entry = line()?;
        let mut fields = entry.split(' ');
        let name = fields.next().filter(|s| !s.is_empty());
        let rank: usize = fields
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| err(format!("bad manifest entry {entry:?}")))?;
        let dims: Option<Vec<usize>> = fields.map(|s| s.parse().ok()).collect();
        match (name, dims) {
            (Some(name), Some(dims)) if dims.len() == rank => {
                manifest.push((name.to_string(), dims));
            }
            _ => return Err(err(format!("bad manifest entry {entry:?}"))),
        }
    }
    if line()? != "data" {
        return Err(err("missing data marker"));
    }

    let mut params = ParamSet::new();
    for (name, dims) in manifest {
        if params.get(&name).is_some() {
            return Err(err(format!("duplicate tensor {name}")));
        }
        let want: usize = dims.iter().product();
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            let slice = bytes
                .get(*pos..*pos + n)
                .ok_or_else(|| err(format!("truncated payload for {name}")))?;
            *pos += n;
            Ok(slice)
        };
        let len = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
        if len != want {
            return Err(err(format!(
                "length prefix for {name} is {len}, shape {dims:?} needs {want}"
            )));
        }
        let raw = take(&mut pos, len * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.add(name, Tensor::new(dims, data)?);
    }
    if pos != bytes.len() {
        return Err(err(format!(
            "{} trailing bytes after last tensor",
            bytes.len() - pos
        )));
    }
    Ok(Checkpoint {
        version,
        iteration,
        config,
        params,
    })
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    from_bytes(&std::fs::read(path)?)
}

/// Copy checkpoint tensors into `target`, requiring the two sets to
/// describe the same model: no unknown names, no missing names, no
/// shape changes.
pub fn restore(target: &mut ParamSet, ckpt: &Checkpoint) -> Result<()> {
    let mut unknown: Vec<&str> = ckpt
        .params
        .names()
        .filter(|n| target.get(n).is_none())
        .collect();
    if !unknown.is_empty() {
        unknown.sort_unstable();
        return Err(err(format!("unknown tensors in file: {unknown:?}")));
    }
    let mut missing: Vec<&str> = target
        .names()
        .filter(|n| ckpt.params.get(n).is_none())
        .collect();
    if !missing.is_empty() {
        missing.sort_unstable();
        return Err(err(format!("tensors missing from file: {missing:?}")));
    }
    for (name, t) in ckpt.params.iter() {
        let have = target.get(name).unwrap();
        if have.shape() != t.shape() {
            return Err(err(format!(
                "shape mismatch for {name}: file {:?}, model {:?}",
                t.shape(),
                have.shape()
            )));
        }
    }
    for (name, t) in ckpt.params.iter() {
        target.set(name, t.clone())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamSet {
        let mut ps = ParamSet::new();
        ps.add("a.w", Tensor::from_fn(&[2, 3], |i| i as f64 * 0.25 - 1.0));
        ps.add("a.b", Tensor::new(vec![3], vec![0.5, -0.5, 2.0]).unwrap());
        ps.add("z", Tensor::scalar(42.0));
        ps
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let ps = sample();
        let bytes = to_bytes(&ps, 17, "lr=0.001 iters=30").unwrap();
        let ckpt = from_bytes(&bytes).unwrap();
        assert_eq!(ckpt.version, FORMAT_VERSION);
        assert_eq!(ckpt.iteration, 17);
        assert_eq!(ckpt.config, "lr=0.001 iters=30");
        let again = to_bytes(&ckpt.params, ckpt.iteration, &ckpt.config).unwrap();
        assert_eq!(bytes, again);
        for (name, t) in ps.iter() {
            assert_eq!(ckpt.params.get(name).unwrap().data(), t.data());
        }
    }

    #[test]
    fn empty_config_round_trips() {
        let bytes = to_bytes(&sample(), 0, "").unwrap();
        let ckpt = from_bytes(&bytes).unwrap();
        assert_eq!(ckpt.config, "");
        assert_eq!(to_bytes(&ckpt.params, 0, "").unwrap(), bytes);
    }

    #[test]
    fn version_mismatch_rejected() {
        let mut bytes = to_bytes(&sample(), 0, "").unwrap();
        bytes[7] = b'2';
        let msg = from_bytes(&bytes).unwrap_err().to_string();
        assert!(msg.contains("version mismatch"), "{msg}");
    }

    #[test]
    fn truncation_rejected() {
        let bytes = to_bytes(&sample(), 0, "").unwrap();
        let msg = from_bytes(&bytes[..bytes.len() - 4])
            .unwrap_err()
            .to_string();
        assert!(msg.contains("truncated"), "{msg}");
        let msg = from_bytes(&bytes[..20]).unwrap_err().to_string();
        assert!(msg.contains("truncated"), "{msg}");
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = to_bytes(&sample(), 0, "").unwrap();
        bytes.push(0);
        let msg = from_bytes(&bytes).unwrap_err().to_string();
        assert!(msg.contains("trailing"), "{msg}");
    }

    #[test]
    fn restore_checks_name_sets_and_shapes() {
        let ps = sample();
        let ckpt = from_bytes(&to_bytes(&ps, 3, "").unwrap()).unwrap();

        let mut ok = sample();
        ok.set("z", Tensor::scalar(0.0)).unwrap();
        restore(&mut ok, &ckpt).unwrap();
        assert_eq!(ok.get("z").unwrap().item(), 42.0);

        let mut extra = sample();
        extra.add("new", Tensor::scalar(1.0));
        let msg = restore(&mut extra, &ckpt).unwrap_err().to_string();
        assert!(msg.contains("missing") && msg.contains("new"), "{msg}");

        let mut fewer = ParamSet::new();
        fewer.add("a.w", Tensor::zeros(&[2, 3]));
        let msg = restore(&mut fewer, &ckpt).unwrap_err().to_string();
        assert!(msg.contains("unknown"), "{msg}");

        let mut renamed = sample();
        let mut shifted = ParamSet::new();
        for (name, t) in ckpt.params.iter() {
            let name = if name == "z" { "zz" } else { name };
            shifted.add(name, t.clone());
        }
        let alt = Checkpoint {
            version: 1,
            iteration: 0,
            config: String::new(),
            params: shifted,
        };
        let msg = restore(&mut renamed, &alt).unwrap_err().to_string();
        assert!(msg.contains("unknown") && msg.contains("zz"), "{msg}");

        let mut wrong_shape = ParamSet::new();
        wrong_shape.add("a.w", Tensor::zeros(&[3, 2]));
        wrong_shape.add("a.b", Tensor::zeros(&[3]));
        wrong_shape.add("z", Tensor::scalar(0.0));
        let msg = restore(&mut wrong_shape, &ckpt).unwrap_err().to_string();
        assert!(msg.contains("shape mismatch for a.w"), "{msg}");
    }

    #[test]
    fn bad_length_prefix_rejected() {
        let ps = sample();
        let bytes = to_bytes(&ps, 0, "").unwrap();
        let marker = b"data\n";
        let data_at = bytes
            .windows(marker.len())
            .position(|w| w == marker)
            .unwrap()
            + marker.len();
        let mut bytes = bytes;
        bytes[data_at] = 99;
        let msg = from_bytes(&bytes).unwrap_err().to_string();
        assert!(msg.contains("length prefix"), "{msg}");
    }

    #[test]
    fn file_round_trip() {
        let dir = std::env::temp_dir().join("dfckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.ckpt");
        save(&path, &sample(), 9, "seed=1").unwrap();
        let ckpt = load(&path).unwrap();
        assert_eq!(ckpt.iteration, 9);
        assert_eq!(ckpt.params.len(), 3);
        std::fs::remove_file(&path).unwrap();
    }
}
