//! JSON run reports. Floats are written with 17 significant digits so that
//! identical runs produce identical bytes.

use std::io;

use serde::Serialize;
use serde_json::ser::{Formatter, PrettyFormatter};
use serde_json::Value;
use sha2::{Digest, Sha256};

pub const SCHEMA: &str = "v1";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    /// Largest observed deviation.
    pub error: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl Check {
    pub fn new(name: impl Into<String>, error: f64, tolerance: f64) -> Self {
        // NaN never passes.
        Check {
            name: name.into(),
            error,
            tolerance,
            pass: error <= tolerance,
        }
    }

    /// A boolean condition, recorded with error 0 or 1.
    pub fn holds(name: impl Into<String>, ok: bool) -> Self {
        Check {
            name: name.into(),
            error: if ok { 0.0 } else { 1.0 },
            tolerance: 0.0,
            pass: ok,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InputDigest {
    pub name: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub schema: &'static str,
    pub command: Vec<String>,
    pub inputs: Vec<InputDigest>,
    pub outputs: Value,
    pub checks: Vec<Check>,
    pub pass: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_time_s: Option<f64>,
}

impl RunReport {
    pub fn new(command: Vec<String>) -> Self {
        RunReport {
            schema: SCHEMA,
            command,
            inputs: Vec::new(),
            outputs: Value::Null,
            checks: Vec::new(),
            pass: true,
            wall_time_s: None,
        }
    }

    pub fn add_input(&mut self, name: &str, bytes: &[u8]) {
        self.inputs.push(InputDigest {
            name: name.to_string(),
            sha256: digest(bytes),
        });
    }

    pub fn check(&mut self, c: Check) {
        self.pass &= c.pass;
        self.checks.push(c);
    }

    pub fn to_json(&self) -> String {
        to_json_string(self)
    }
}

pub fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Pretty printing with every float as `d.dddddddddddddddde±x`.
pub struct FixedFormatter(PrettyFormatter<'static>);

impl Default for FixedFormatter {
    fn default() -> Self {
        FixedFormatter(PrettyFormatter::with_indent(b"  "))
    }
}

impl Formatter for FixedFormatter {
    fn write_f64<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        write!(writer, "{value:.16e}")
    }

    fn begin_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_array(w)
    }

    fn end_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array(w)
    }

    fn begin_array_value<W: ?Sized + io::Write>(
        &mut self,
        w: &mut W,
        first: bool,
    ) -> io::Result<()> {
        self.0.begin_array_value(w, first)
    }

    fn end_array_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array_value(w)
    }

    fn begin_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object(w)
    }

    fn end_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object(w)
    }

    fn begin_object_key<W: ?Sized + io::Write>(
        &mut self,
        w: &mut W,
        first: bool,
    ) -> io::Result<()> {
        self.0.begin_object_key(w, first)
    }

    fn begin_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object_value(w)
    }

    fn end_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object_value(w)
    }
}

pub fn to_json_string<T: Serialize + ?Sized>(value: &T) -> String {
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, FixedFormatter::default());
    value
        .serialize(&mut ser)
        .expect("serializing to memory cannot fail");
    out.push(b'\n');
    String::from_utf8(out).expect("serde_json writes UTF-8")
}
