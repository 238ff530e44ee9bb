//! On-disk formats: checkpoints, binary PNM images and digests.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{ParamSet, Tensor};

pub const CHECKPOINT_MAGIC: &str = "DIFFEDIT-CKPT 1";

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Digest of parameter names, shapes and exact values.
pub fn params_digest(params: &ParamSet) -> String {
    let mut h = Sha256::new();
    for (name, t) in params.iter() {
        h.update(name.as_bytes());
        h.update([0u8]);
        for s in t.shape() {
            h.update((*s as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Text header followed by a little-endian f64 blob.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub module: String,
    pub config_hash: String,
    pub seed: u64,
    pub meta: BTreeMap<String, String>,
    pub params: ParamSet,
}

fn token_ok(s: &str) -> bool {
    !s.is_empty() && !s.chars().any(|c| c.is_whitespace())
}

impl Checkpoint {
    pub fn new(module: &str, config_hash: &str, seed: u64, params: ParamSet) -> Self {
        Self {
            module: module.into(),
            config_hash: config_hash.into(),
            seed,
            meta: BTreeMap::new(),
            params,
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.insert(key.into(), value.to_string());
        self
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta.get(key).map(String::as_str).ok_or_else(|| {
            Error::Format(format!(
                "checkpoint '{}' lacks meta key '{key}'",
                self.module
            ))
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        for s in [&self.module, &self.config_hash] {
            if !token_ok(s) {
                return Err(Error::Format(format!(
                    "header token '{s}' is empty or has whitespace"
                )));
            }
        }
        let mut head = format!(
            "{CHECKPOINT_MAGIC}\nmodule {}\nconfig_hash {}\nseed {}\n",
            self.module, self.config_hash, self.seed
        );
        for (k, v) in &self.meta {
            if !token_ok(k) || v.contains('\n') {
                return Err(Error::Format(format!("bad meta entry '{k}'")));
            }
            head.push_str(&format!("meta {k} {v}\n"));
        }
        let mut offset = 0usize;
        for (name, t) in self.params.iter() {
            if !token_ok(name) {
                return Err(Error::Format(format!("tensor name '{name}'")));
            }
            let shape: Vec<String> = t.shape().iter().map(|s| s.to_string()).collect();
            head.push_str(&format!(
                "tensor {name} {} {offset} {}\n",
                shape.join(","),
                t.len()
            ));
            offset += t.len();
        }
        head.push_str("end\n");
        let mut out = head.into_bytes();
        out.reserve(offset * 8);
        for (_, t) in self.params.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (lines, blob) = split_header(bytes)?;
        let mut it = lines.iter();
        if it.next().map(String::as_str) != Some(CHECKPOINT_MAGIC) {
            return Err(Error::Format("missing checkpoint magic line".into()));
        }
        let field = |line: Option<&String>, key: &str| -> Result<String> {
            line.and_then(|l| l.strip_prefix(&format!("{key} ")))
                .map(str::to_string)
                .ok_or_else(|| Error::Format(format!("expected '{key}' header line")))
        };
        let module = field(it.next(), "module")?;
        let config_hash = field(it.next(), "config_hash")?;
        let seed = field(it.next(), "seed")?
            .parse()
            .map_err(|_| Error::Format("seed is not an integer".into()))?;
        let mut meta = BTreeMap::new();
        let mut manifest = Vec::new();
        for line in it {
            let parts: Vec<&str> = line.splitn(3, ' ').collect();
            match parts[0] {
                "meta" if parts.len() == 3 => {
                    meta.insert(parts[1].to_string(), parts[2].to_string());
                }
                "tensor" => manifest.push(parse_tensor_line(line)?),
                _ => return Err(Error::Format(format!("unexpected header line '{line}'"))),
            }
        }
        let total: usize = manifest.iter().map(|m| m.2.iter().product::<usize>()).sum();
        if blob.len() != total * 8 {
            return Err(Error::Format(format!(
                "blob has {} bytes, manifest needs {}",
                blob.len(),
                total * 8
            )));
        }
        let mut params = ParamSet::new();
        let mut expect = 0usize;
        for (name, offset, shape) in manifest {
            if offset != expect {
                return Err(Error::Format(format!(
                    "tensor '{name}' offset {offset}, expected {expect}"
                )));
            }
            let n: usize = shape.iter().product();
            let data = blob[offset * 8..(offset + n) * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            params.push(name, Tensor::new(&shape, data)?);
            expect += n;
        }
        Ok(Self {
            module,
            config_hash,
            seed,
            meta,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }

    /// Loads and checks the module name.
    pub fn load_module(path: &Path, module: &str) -> Result<Self> {
        let c = Self::load(path)?;
        if c.module != module {
            return Err(Error::Format(format!(
                "{} holds module '{}', expected '{module}'",
                path.display(),
                c.module
            )));
        }
        Ok(c)
    }

    pub fn digest(&self) -> Result<String> {
        Ok(sha256_hex(&self.to_bytes()?))
    }
}

fn parse_tensor_line(line: &str) -> Result<(String, usize, Vec<usize>)> {
    let bad = || Error::Format(format!("bad tensor line '{line}'"));
    let p: Vec<&str> = line.split(' ').collect();
    if p.len() != 5 {
        return Err(bad());
    }
    let shape: Vec<usize> = p[2]
        .split(',')
        .map(|s| s.parse().map_err(|_| bad()))
        .collect::<Result<_>>()?;
    let offset: usize = p[3].parse().map_err(|_| bad())?;
    let count: usize = p[4].parse().map_err(|_| bad())?;
    if shape.iter().product::<usize>() != count || shape.contains(&0) {
        return Err(bad());
    }
    Ok((p[1].to_string(), offset, shape))
}

/// Splits a text header terminated by an `end` line from the binary rest.
pub fn split_header(bytes: &[u8]) -> Result<(Vec<String>, &[u8])> {
    let mut lines = Vec::new();
    let mut pos = 0;
    while pos < bytes.len() {
        let nl = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format("header without terminating 'end' line".into()))?;
        let line = std::str::from_utf8(&bytes[pos..pos + nl])
            .map_err(|_| Error::Format("header is not UTF-8".into()))?;
        pos += nl + 1;
        if line == "end" {
            return Ok((lines, &bytes[pos..]));
        }
        lines.push(line.to_string());
    }
    Err(Error::Format(
        "header without terminating 'end' line".into(),
    ))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes `[h·w·channels]` values in `[0, 1]` as binary P5 (1 channel) or
/// P6 (3 channels) with max value 255.
pub fn encode_pnm(pixels: &[f64], height: usize, width: usize, channels: usize) -> Result<Vec<u8>> {
    let magic = match channels {
        1 => "P5",
        3 => "P6",
        _ => {
            return Err(Error::Range(format!(
                "PNM supports 1 or 3 channels, got {channels}"
            )))
        }
    };
    if pixels.len() != height * width * channels {
        return Err(Error::ShapeMismatch(format!(
            "{} values for {height}x{width}x{channels}",
            pixels.len()
        )));
    }
    let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    out.extend(pixels.iter().map(|&v| to_byte(v)));
    Ok(out)
}

/// Decodes a binary P5/P6 file into `(values in [0,1], height, width, channels)`.
pub fn decode_pnm(bytes: &[u8]) -> Result<(Vec<f64>, usize, usize, usize)> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PNM header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    let channels = match fields[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        m => return Err(Error::Format(format!("unsupported PNM magic '{m}'"))),
    };
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Format(format!("bad PNM number '{s}'")))
    };
    let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if max != 255 {
        return Err(Error::Format(format!("PNM max value {max}, expected 255")));
    }
    let body = bytes.get(pos..).unwrap_or(&[]);
    if body.len() != w * h * channels {
        return Err(Error::Format(format!(
            "PNM body has {} bytes, expected {}",
            body.len(),
            w * h * channels
        )));
    }
    Ok((
        body.iter().map(|&b| b as f64 / 255.0).collect(),
        h,
        w,
        channels,
    ))
}

/// Tiles `[h·w·c]` images into a `rows × cols` grid with a 1-pixel border.
pub fn tile_grid(
    tiles: &[Vec<f64>],
    rows: usize,
    cols: usize,
    h: usize,
    w: usize,
    c: usize,
) -> Result<(Vec<f64>, usize, usize)> {
    if tiles.len() != rows * cols {
        return Err(Error::ShapeMismatch(format!(
            "{} tiles for a {rows}x{cols} grid",
            tiles.len()
        )));
    }
    let (gh, gw) = (rows * (h + 1) + 1, cols * (w + 1) + 1);
    let mut out = vec![1.0; gh * gw * c];
    for (k, tile) in tiles.iter().enumerate() {
        if tile.len() != h * w * c {
            return Err(Error::ShapeMismatch(format!(
                "tile {k} has {} values",
                tile.len()
            )));
        }
        let (r0, c0) = (1 + (k / cols) * (h + 1), 1 + (k % cols) * (w + 1));
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    out[((r0 + y) * gw + c0 + x) * c + ch] = tile[(y * w + x) * c + ch];
                }
            }
        }
    }
    Ok((out, gh, gw))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;

    fn sample_params() -> ParamSet {
        let mut rng = RngStream::new(1, 0);
        let mut p = ParamSet::new();
        p.push("a.w", rng.gaussian(&[3, 4]).unwrap());
        p.push("b", rng.gaussian(&[5]).unwrap());
        p
    }

    #[test]
    fn checkpoint_round_trip_is_bit_identical() {
        let c = Checkpoint::new("denoiser", "abc123", 7, sample_params())
            .with_meta("width", 8)
            .with_meta("note", "two words");
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.meta("note").unwrap(), "two words");
    }

    #[test]
    fn checkpoint_rejects_truncated_blob() {
        let bytes = Checkpoint::new("m", "h", 0, sample_params())
            .to_bytes()
            .unwrap();
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 1]),
            Err(Error::Format(_))
        ));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        assert!(Checkpoint::from_bytes(b"garbage\nend\n").is_err());
    }

    #[test]
    fn params_digest_tracks_values() {
        let p = sample_params();
        let mut q = p.clone();
        assert_eq!(params_digest(&p), params_digest(&q));
        q.get_mut(1).data_mut()[0] += 1e-15;
        assert_ne!(params_digest(&p), params_digest(&q));
    }

    #[test]
    fn pnm_round_trip() {
        let px: Vec<f64> = (0..12).map(|i| i as f64 / 11.0).collect();
        for (h, w, c) in [(3, 4, 1), (2, 2, 3)] {
            let bytes = encode_pnm(&px, h, w, c).unwrap();
            let (back, bh, bw, bc) = decode_pnm(&bytes).unwrap();
            assert_eq!((bh, bw, bc), (h, w, c));
            for (a, b) in px.iter().zip(&back) {
                assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
            }
        }
        assert!(encode_pnm(&px, 3, 3, 1).is_err());
    }

    #[test]
    fn grid_layout() {
        let tiles = vec![vec![0.0; 4], vec![0.5; 4]];
        let (g, gh, gw) = tile_grid(&tiles, 1, 2, 2, 2, 1).unwrap();
        assert_eq!((gh, gw), (4, 7));
        assert_eq!(g[gw + 1], 0.0);
        assert_eq!(g[gw + 4], 0.5);
        assert_eq!(g[0], 1.0);
    }
}
