//! Provenance header carried by every file the tool writes.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TOOL_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

/// PNG text-chunk keyword holding the header.
pub const PNG_META_KEY: &str = "deep-disaster";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Meta {
    pub tool_version: String,
    pub command_line: String,
    pub config_hash: String,
}

impl Meta {
    pub fn new(command_line: impl Into<String>, config_hash: impl Into<String>) -> Self {
        Self {
            tool_version: TOOL_VERSION.to_string(),
            command_line: command_line.into(),
            config_hash: config_hash.into(),
        }
    }

    /// Header as `# `-prefixed comment lines for text outputs.
    pub fn comment_lines(&self) -> String {
        format!(
            "# tool: {}\n# command: {}\n# config_hash: {}\n",
            self.tool_version, self.command_line, self.config_hash
        )
    }

    pub fn text(&self) -> String {
        format!("tool: {}; command: {}; config_hash: {}", self.tool_version, self.command_line, self.config_hash)
    }
}

/// Write `body` preceded by the comment header, via a temp file and rename.
pub fn write_text_with_meta(path: &Path, meta: &Meta, body: &str) -> Result<()> {
    let mut content = meta.comment_lines();
    content.push_str(body);
    write_atomic(path, content.as_bytes())
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Encode an 8-bit image as PNG with the header in a text chunk.
pub fn encode_png(width: u32, height: u32, channels: usize, pixels: &[u8], meta: &Meta) -> Result<Vec<u8>> {
    let color = match channels {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        c => return Err(Error::Invalid(format!("cannot encode {c}-channel PNG"))),
    };
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width, height);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        enc.add_text_chunk(PNG_META_KEY.to_string(), meta.text())
            .map_err(|e| Error::Invalid(format!("png text chunk: {e}")))?;
        let mut writer = enc.write_header().map_err(|e| Error::Invalid(format!("png header: {e}")))?;
        writer.write_image_data(pixels).map_err(|e| Error::Invalid(format!("png data: {e}")))?;
    }
    Ok(out)
}

pub fn write_png(path: &Path, width: u32, height: u32, channels: usize, pixels: &[u8], meta: &Meta) -> Result<()> {
    let bytes = encode_png(width, height, channels, pixels, meta)?;
    write_atomic(path, &bytes)
}

/// Skip leading `#` header lines of a text output.
pub fn strip_comment_header(text: &str) -> &str {
    let mut rest = text;
    while rest.starts_with('#') {
        rest = match rest.find('\n') {
            Some(i) => &rest[i + 1..],
            None => "",
        };
    }
    rest
}
