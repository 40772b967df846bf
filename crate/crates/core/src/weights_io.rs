//! `SCFG1` checkpoint files: a line-oriented ASCII manifest, then raw
//! little-endian `f32` tensors in manifest order. See
//! `docs/checkpoint-format.md` for the byte layout.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{tensor_specs, ModelConfig, ModelParams};
use crate::sampler::SplitMix64;

pub const MAGIC: &str = "SCFG1";
pub const FORMAT_VERSION: u32 = 1;
/// Half-width of the uniform initializer used by [`random_checkpoint`].
pub const INIT_RANGE: f32 = 0.05;

const CONFIG_KEYS: [&str; 9] = [
    "n_layers",
    "n_heads",
    "d_model",
    "d_ff",
    "vocab_size",
    "n_classes",
    "max_seq_len",
    "grid_rows",
    "grid_cols",
];

/// One manifest `tensor` line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ManifestEntry {
    pub fn byte_len(&self) -> usize {
        self.shape.iter().product::<usize>() * 4
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub version: u32,
    pub config: ModelConfig,
    pub tensors: Vec<ManifestEntry>,
    /// Byte offset of the payload from the start of the file.
    pub header_len: usize,
}

fn config_values(c: &ModelConfig) -> [usize; 9] {
    [
        c.n_layers,
        c.n_heads,
        c.d_model,
        c.d_ff,
        c.vocab_size,
        c.n_classes,
        c.max_seq_len,
        c.grid_rows,
        c.grid_cols,
    ]
}

/// Serializes params to checkpoint bytes.
pub fn to_bytes(params: &ModelParams) -> Vec<u8> {
    let tensors = params.tensors();
    let mut header = String::new();
    let _ = writeln!(header, "{MAGIC}");
    let _ = writeln!(header, "format_version {FORMAT_VERSION}");
    for (key, value) in CONFIG_KEYS.iter().zip(config_values(&params.config)) {
        let _ = writeln!(header, "{key} {value}");
    }
    let _ = writeln!(header, "tensors {}", tensors.len());
    let mut offset = 0usize;
    for (spec, data) in &tensors {
        let dims: Vec<String> = spec.shape.iter().map(usize::to_string).collect();
        let _ = writeln!(header, "tensor {} {} {offset}", spec.name, dims.join("x"));
        offset += data.len() * 4;
    }
    header.push_str("end\n");

    let mut out = header.into_bytes();
    out.reserve(offset);
    for (_, data) in &tensors {
        for v in *data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint(path: impl AsRef<Path>, params: &ModelParams) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_bytes(params)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ModelConfig, ModelParams)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

/// Parses and checks the manifest only. Tensor names and shapes are compared
/// against the architecture implied by the config lines.
pub fn read_manifest(bytes: &[u8]) -> Result<Manifest> {
    let mut lines = HeaderLines { bytes, pos: 0 };
    let Some(first) = lines.next() else {
        return Err(Error::format("empty file"));
    };
    if first? != MAGIC {
        return Err(Error::format(format!("bad magic, expected `{MAGIC}`")));
    }

    let mut version = None;
    let mut values: [Option<usize>; 9] = [None; 9];
    let mut expected_count = None;
    let mut entries = Vec::new();
    let mut saw_end = false;
    for line in lines.by_ref() {
        let line = line?;
        if line == "end" {
            saw_end = true;
            break;
        }
        let mut parts = line.split(' ');
        let key = parts.next().unwrap_or_default();
        let rest: Vec<&str> = parts.collect();
        match key {
            "format_version" => {
                let v: u32 = parse_field(key, &rest)?;
                if v != FORMAT_VERSION {
                    return Err(Error::format(format!("unsupported format_version {v}")));
                }
                version = Some(v);
            }
            "tensors" => expected_count = Some(parse_field::<usize>(key, &rest)?),
            "tensor" => {
                if rest.len() != 3 {
                    return Err(Error::format(format!("malformed tensor line `{line}`")));
                }
                let shape = rest[1]
                    .split('x')
                    .map(|d| d.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| Error::format(format!("bad shape in `{line}`")))?;
                let offset = rest[2]
                    .parse()
                    .map_err(|_| Error::format(format!("bad offset in `{line}`")))?;
                entries.push(ManifestEntry {
                    name: rest[0].to_string(),
                    shape,
                    offset,
                });
            }
            other => match CONFIG_KEYS.iter().position(|k| *k == other) {
                Some(i) => {
                    if values[i].is_some() {
                        return Err(Error::format(format!("duplicate key `{other}`")));
                    }
                    values[i] = Some(parse_field(other, &rest)?);
                }
                None => return Err(Error::format(format!("unknown manifest key `{other}`"))),
            },
        }
    }
    if !saw_end {
        return Err(Error::format("manifest has no `end` line"));
    }
    let version = version.ok_or_else(|| Error::format("missing format_version"))?;
    let mut v = [0usize; 9];
    for (i, slot) in values.iter().enumerate() {
        v[i] = slot.ok_or_else(|| Error::format(format!("missing key `{}`", CONFIG_KEYS[i])))?;
    }
    let config = ModelConfig {
        n_layers: v[0],
        n_heads: v[1],
        d_model: v[2],
        d_ff: v[3],
        vocab_size: v[4],
        n_classes: v[5],
        max_seq_len: v[6],
        grid_rows: v[7],
        grid_cols: v[8],
    };
    config.validate()?;

    let specs = tensor_specs(&config);
    if let Some(n) = expected_count {
        if n != entries.len() {
            return Err(Error::format(format!(
                "`tensors {n}` but {} tensor lines",
                entries.len()
            )));
        }
    }
    let mut offset = 0;
    for (i, spec) in specs.iter().enumerate() {
        let Some(entry) = entries.get(i) else {
            return Err(Error::validation(&spec.name, "missing from manifest"));
        };
        if entry.name != spec.name {
            return Err(Error::validation(
                &spec.name,
                format!("manifest lists `{}` in its place", entry.name),
            ));
        }
        if entry.shape != spec.shape {
            return Err(Error::validation(
                &spec.name,
                format!("shape {:?}, expected {:?}", entry.shape, spec.shape),
            ));
        }
        if entry.offset != offset {
            return Err(Error::validation(
                &spec.name,
                format!("offset {}, expected {offset}", entry.offset),
            ));
        }
        offset += entry.byte_len();
    }
    if let Some(extra) = entries.get(specs.len()) {
        return Err(Error::validation(&extra.name, "not part of the architecture"));
    }
    Ok(Manifest {
        version,
        config,
        tensors: entries,
        header_len: lines.pos,
    })
}

pub fn from_bytes(bytes: &[u8]) -> Result<(ModelConfig, ModelParams)> {
    let manifest = read_manifest(bytes)?;
    let payload = &bytes[manifest.header_len..];
    let needed: usize = manifest.tensors.iter().map(ManifestEntry::byte_len).sum();
    if payload.len() < needed {
        let missing = manifest
            .tensors
            .iter()
            .find(|e| e.offset + e.byte_len() > payload.len())
            .expect("some tensor extends past the payload");
        return Err(Error::validation(
            &missing.name,
            format!(
                "payload truncated: {} bytes present, tensor needs bytes {}..{}",
                payload.len(),
                missing.offset,
                missing.offset + missing.byte_len()
            ),
        ));
    }
    if payload.len() > needed {
        return Err(Error::format(format!(
            "payload has {} trailing bytes",
            payload.len() - needed
        )));
    }
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for entry in &manifest.tensors {
        let raw = &payload[entry.offset..entry.offset + entry.byte_len()];
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::validation(&entry.name, format!("non-finite value at index {i}")));
        }
        tensors.push(data);
    }
    let params = ModelParams::from_canonical(manifest.config, tensors)?;
    Ok((manifest.config, params))
}

/// Seeded init: weights uniform in `[-0.05, 0.05]`, LayerNorm gains one, biases zero.
pub fn random_checkpoint(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = SplitMix64::new(seed);
    let tensors = tensor_specs(config)
        .into_iter()
        .map(|spec| {
            let n = spec.numel();
            if spec.name.ends_with(".gain") {
                vec![1.0; n]
            } else if spec.shape.len() == 1 {
                vec![0.0; n]
            } else {
                (0..n)
                    .map(|_| ((rng.next_f64() * 2.0 - 1.0) * INIT_RANGE as f64) as f32)
                    .collect()
            }
        })
        .collect();
    ModelParams::from_canonical(*config, tensors)
}

fn parse_field<T: std::str::FromStr>(key: &str, rest: &[&str]) -> Result<T> {
    match rest {
        [v] => v
            .parse()
            .map_err(|_| Error::format(format!("bad value `{v}` for `{key}`"))),
        _ => Err(Error::format(format!("`{key}` takes exactly one value"))),
    }
}

/// Newline-terminated ASCII lines from the head of the file.
struct HeaderLines<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Iterator for HeaderLines<'a> {
    type Item = Result<&'a str>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.bytes.len() {
            return None;
        }
        let rest = &self.bytes[self.pos..];
        let Some(nl) = rest.iter().take(4096).position(|&b| b == b'\n') else {
            return Some(Err(Error::format("manifest line is unterminated or too long")));
        };
        self.pos += nl + 1;
        Some(
            std::str::from_utf8(&rest[..nl])
                .map_err(|_| Error::format("manifest is not ASCII text"))
                .and_then(|s| {
                    if s.is_ascii() {
                        Ok(s)
                    } else {
                        Err(Error::format("manifest is not ASCII text"))
                    }
                }),
        )
    }
}
