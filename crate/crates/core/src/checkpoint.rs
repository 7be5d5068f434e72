//! Binary checkpoints.
//!
//! Layout, integers little-endian:
//!
//! ```text
//! "GFO1"  u16 version  u32 len  config text (UTF-8)
//! per section: u32 len  name (UTF-8)  u8 rank  u32 dim × rank  f64 × Π dims
//! u32 CRC32 of every preceding byte
//! ```

use std::path::Path;

use crate::config::RunConfigFile;
use crate::error::{Error, Result};
use crate::numeric::SeededRng;
use crate::params::Parameters;
use crate::trainer::Model;

pub const MAGIC: &[u8; 4] = b"GFO1";
pub const VERSION: u16 = 1;

/// Section holding the backbone layer widths of a saved model.
const LAYER_DIMS: &str = "meta.layer_dims";

#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    pub sections: Vec<Section>,
}

fn bad<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Checkpoint(msg.into()))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return bad(format!(
                "truncated {what}: need {n} bytes at offset {}, {} left",
                self.pos,
                self.buf.len() - self.pos
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        String::from_utf8(self.take(n, what)?.to_vec()).or_else(|_| bad(format!("{what} is not UTF-8")))
    }
}

impl Checkpoint {
    pub fn new(config_text: &str) -> Self {
        Self {
            config_text: config_text.to_string(),
            sections: Vec::new(),
        }
    }

    pub fn push(&mut self, name: &str, dims: &[usize], data: &[f64]) {
        self.sections.push(Section {
            name: name.to_string(),
            dims: dims.to_vec(),
            data: data.to_vec(),
        });
    }

    /// Appends one section per tensor of `params`.
    pub fn push_parameters<P: Parameters>(&mut self, params: &P) {
        params.visit("", &mut |name, dims, data| self.push(name, dims, data));
    }

    pub fn section(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }

    /// Overwrites every tensor of `params` from the section of the same name.
    pub fn restore<P: Parameters>(&self, params: &mut P) -> Result<()> {
        let mut err = None;
        params.visit_mut("", &mut |name, dims, data| {
            if err.is_some() {
                return;
            }
            match self.section(name) {
                None => err = Some(format!("missing section '{name}'")),
                Some(s) if s.dims != dims => {
                    err = Some(format!("section '{name}' has dims {:?}, expected {dims:?}", s.dims))
                }
                Some(s) => data.copy_from_slice(&s.data),
            }
        });
        match err {
            Some(e) => bad(e),
            None => Ok(()),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.config_text.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config_text.as_bytes());
        for s in &self.sections {
            out.extend_from_slice(&(s.name.len() as u32).to_le_bytes());
            out.extend_from_slice(s.name.as_bytes());
            out.push(s.dims.len() as u8);
            for &d in &s.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &s.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 2 + 4 + 4 {
            return bad(format!("{} bytes is too short for a checkpoint", bytes.len()));
        }
        if &bytes[..4] != MAGIC {
            return bad("bad magic");
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let actual = crc32fast::hash(body);
        if stored != actual {
            return bad(format!("CRC mismatch: stored {stored:08x}, computed {actual:08x}"));
        }
        let mut r = Reader { buf: body, pos: 4 };
        let version = u16::from_le_bytes(r.take(2, "version")?.try_into().expect("2 bytes"));
        if version != VERSION {
            return bad(format!("unsupported version {version}"));
        }
        let mut ck = Checkpoint::new(&r.string("config text")?);
        while r.pos < body.len() {
            let name = r.string("section name")?;
            let rank = r.take(1, "rank")?[0] as usize;
            let dims = (0..rank)
                .map(|_| r.u32("dims").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let count: usize = dims.iter().product();
            let payload = r.take(count * 8, &format!("payload of '{name}'"))?;
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            ck.sections.push(Section { name, dims, data });
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Checkpoint of `model` trained under the configuration `config_text`.
pub fn model_checkpoint(config_text: &str, model: &Model) -> Checkpoint {
    let mut ck = Checkpoint::new(config_text);
    let dims: Vec<f64> = model.backbone.layer_dims().iter().map(|&d| d as f64).collect();
    ck.push(LAYER_DIMS, &[dims.len()], &dims);
    ck.push_parameters(model);
    ck
}

/// Rebuilds the configuration and model stored by [`model_checkpoint`].
pub fn restore_model(ck: &Checkpoint) -> Result<(RunConfigFile, Model)> {
    let cfg = RunConfigFile::parse(&ck.config_text)?;
    let dims: Vec<usize> = match ck.section(LAYER_DIMS) {
        Some(s) => s.data.iter().map(|&d| d as usize).collect(),
        None => return bad(format!("missing section '{LAYER_DIMS}'")),
    };
    // the values are overwritten below; only the structure matters
    let mut model = Model::new(&cfg.train, &dims, &mut SeededRng::new(0))?;
    ck.restore(&mut model)?;
    let expected = model.flatten().len() + 1;
    if ck.sections.len() != expected {
        return bad(format!("{} sections, expected {expected}", ck.sections.len()));
    }
    Ok((cfg, model))
}
