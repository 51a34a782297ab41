//! The message record written next to a watermarked image.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use latmark::Message;
use serde::{Deserialize, Serialize};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub bits: usize,
    /// MSB-first hex, `bits / 4` characters (rounded up).
    pub message: String,
}

impl Sidecar {
    pub fn new(m: &Message) -> Self {
        Sidecar { bits: m.len(), message: m.to_hex() }
    }

    pub fn message(&self) -> Result<Message> {
        Ok(Message::from_hex(&self.message, self.bits)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")
            .with_context(|| format!("cannot write sidecar {}", path.display()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).with_context(|| format!("cannot read sidecar {}", path.display()))?;
        let sc: Sidecar = serde_json::from_str(&s).with_context(|| format!("corrupt sidecar {}", path.display()))?;
        if sc.bits == 0 {
            bail!("corrupt sidecar {}: zero-length message", path.display());
        }
        sc.message().with_context(|| format!("corrupt sidecar {}", path.display()))?;
        Ok(sc)
    }
}

/// `out.png` -> `out.png.msg.json`.
pub fn default_path(image: &Path) -> PathBuf {
    let mut s = image.as_os_str().to_owned();
    s.push(".msg.json");
    PathBuf::from(s)
}
