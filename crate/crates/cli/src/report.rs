//! Versioned JSON reports and JSON-lines metrics.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::CliResult;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Serialize)]
struct Envelope<'a, B: Serialize> {
    schema_version: u32,
    command: &'a str,
    #[serde(flatten)]
    body: &'a B,
}

/// Write `out/report.json` as `{schema_version, command, ...body}`.
pub fn write_report<B: Serialize>(out: &Path, command: &str, body: &B) -> CliResult<()> {
    std::fs::create_dir_all(out)?;
    let env = Envelope {
        schema_version: SCHEMA_VERSION,
        command,
        body,
    };
    let mut text = serde_json::to_string_pretty(&env)?;
    text.push('\n');
    std::fs::write(out.join("report.json"), text)?;
    Ok(())
}

pub struct JsonLines<W: Write> {
    inner: W,
}

impl<W: Write> JsonLines<W> {
    pub fn new(inner: W) -> Self {
        Self { inner }
    }

    pub fn write<R: Serialize>(&mut self, record: &R) -> CliResult<()> {
        serde_json::to_writer(&mut self.inner, record)?;
        self.inner.write_all(b"\n")?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.inner
    }
}
