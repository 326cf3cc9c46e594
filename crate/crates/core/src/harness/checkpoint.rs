//! Versioned parameter container: a text header (magic, format version,
//! precision, config echo, block table) followed by the raw little-endian
//! values of every block in table order.

use std::path::Path;

use crate::agent::Agent;
use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::harness::train::build_models;
use crate::numerics::{Matrix, ParamBlock, Parameterized};
use crate::scalar::Scalar;
use crate::worldmodel::WorldModel;

pub const MAGIC: &str = "dcmpc checkpoint";
pub const FORMAT_VERSION: u32 = 1;

/// Models restored from disk together with the run configuration.
#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub config: RunConfig,
    pub world: WorldModel<T>,
    pub agent: Agent<T>,
}

fn all_blocks<'a, T: Scalar>(world: &'a WorldModel<T>, agent: &'a Agent<T>) -> Vec<&'a ParamBlock<T>> {
    let mut out = world.blocks();
    out.extend(agent.all_blocks());
    out
}

pub fn encode_checkpoint<T: Scalar>(config: &RunConfig, world: &WorldModel<T>, agent: &Agent<T>) -> Vec<u8> {
    let blocks = all_blocks(world, agent);
    let cfg_text = config.to_toml_string();
    let mut out = format!(
        "{MAGIC}\nversion {FORMAT_VERSION}\nprecision {}\nconfig {}\n{cfg_text}\nblocks {}\n",
        T::PRECISION,
        cfg_text.len(),
        blocks.len()
    )
    .into_bytes();
    for b in &blocks {
        out.extend(format!("{} {} {}\n", b.name, b.value.rows(), b.value.cols()).bytes());
    }
    out.extend(b"payload\n");
    for b in &blocks {
        for &v in b.value.as_slice() {
            v.write_le(&mut out);
        }
    }
    out
}

pub fn save_checkpoint<T: Scalar>(path: &Path, config: &RunConfig, world: &WorldModel<T>, agent: &Agent<T>) -> Result<()> {
    std::fs::write(path, encode_checkpoint(config, world, agent))?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn line(&mut self) -> Result<&'a str> {
        let rest = &self.bytes[self.pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::CheckpointVersion("header ends prematurely".into()))?;
        self.pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| Error::CheckpointVersion("header is not UTF-8".into()))
    }

    fn keyed(&mut self, key: &str) -> Result<&'a str> {
        let line = self.line()?;
        line.strip_prefix(key)
            .and_then(|r| r.strip_prefix(' '))
            .ok_or_else(|| Error::CheckpointVersion(format!("expected `{key}` header line, found `{line}`")))
    }

    fn number(&mut self, key: &str) -> Result<usize> {
        let v = self.keyed(key)?;
        v.parse()
            .map_err(|_| Error::CheckpointVersion(format!("`{key}` header value `{v}` is not a count")))
    }
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.line()?;
    if magic != MAGIC {
        return Err(Error::CheckpointVersion(format!("bad magic `{magic}`")));
    }
    let version = cur.number("version")?;
    if version != FORMAT_VERSION as usize {
        return Err(Error::CheckpointVersion(format!(
            "format version {version}, this build reads {FORMAT_VERSION}"
        )));
    }
    let precision = cur.keyed("precision")?;
    if precision != T::PRECISION {
        return Err(Error::CheckpointVersion(format!(
            "checkpoint precision {precision}, requested {}",
            T::PRECISION
        )));
    }
    let cfg_len = cur.number("config")?;
    let cfg_end = cur.pos + cfg_len;
    if cfg_end + 1 > bytes.len() || bytes[cfg_end] != b'\n' {
        return Err(Error::CheckpointVersion("config echo length does not match".into()));
    }
    let cfg_text = std::str::from_utf8(&bytes[cur.pos..cfg_end])
        .map_err(|_| Error::CheckpointVersion("config echo is not UTF-8".into()))?;
    let config = RunConfig::from_toml_str(cfg_text).map_err(|e| Error::CheckpointVersion(format!("config echo: {e}")))?;
    cur.pos = cfg_end + 1;
    let count = cur.number("blocks")?;
    let mut table = Vec::with_capacity(count);
    for _ in 0..count {
        let line = cur.line()?;
        let parts: Vec<&str> = line.split(' ').collect();
        let parsed = match parts.as_slice() {
            [name, r, c] => r.parse::<usize>().ok().zip(c.parse::<usize>().ok()).map(|(r, c)| (name.to_string(), r, c)),
            _ => None,
        };
        table.push(parsed.ok_or_else(|| Error::CheckpointVersion(format!("malformed block line `{line}`")))?);
    }
    if cur.line()? != "payload" {
        return Err(Error::CheckpointVersion("missing payload marker".into()));
    }

    let (mut world, mut agent) = build_models::<T>(&config, 0)?;
    let expected: Vec<(String, usize, usize)> = all_blocks(&world, &agent)
        .iter()
        .map(|b| (b.name.clone(), b.value.rows(), b.value.cols()))
        .collect();
    if expected.len() != table.len() {
        return Err(Error::CheckpointShape {
            block: "<block table>".into(),
            file: format!("{} blocks", table.len()),
            model: format!("{} blocks", expected.len()),
        });
    }
    for (f, m) in table.iter().zip(&expected) {
        if f != m {
            return Err(Error::CheckpointShape {
                block: m.0.clone(),
                file: format!("{} {}x{}", f.0, f.1, f.2),
                model: format!("{} {}x{}", m.0, m.1, m.2),
            });
        }
    }

    let mut values = Vec::with_capacity(table.len());
    for (name, r, c) in &table {
        let needed = r * c * T::BYTES;
        let available = bytes.len() - cur.pos;
        if needed > available {
            return Err(Error::CheckpointTruncated {
                block: name.clone(),
                needed,
                available,
            });
        }
        let data: Vec<T> = bytes[cur.pos..cur.pos + needed].chunks_exact(T::BYTES).map(T::read_le).collect();
        cur.pos += needed;
        values.push(Matrix::from_vec(*r, *c, data)?);
    }
    if cur.pos != bytes.len() {
        return Err(Error::CheckpointVersion(format!("{} trailing bytes after payload", bytes.len() - cur.pos)));
    }
    let mut targets = world.blocks_mut();
    targets.extend(agent.all_blocks_mut());
    for (b, v) in targets.into_iter().zip(values) {
        b.value = v;
    }
    Ok(Checkpoint { config, world, agent })
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    decode_checkpoint(&std::fs::read(path)?)
}

/// Precision recorded in a checkpoint header, without loading it.
pub fn checkpoint_precision(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.line()? != MAGIC {
        return Err(Error::CheckpointVersion("bad magic".into()));
    }
    cur.number("version")?;
    Ok(cur.keyed("precision")?.to_string())
}
