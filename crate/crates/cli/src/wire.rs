//! Length-delimited JSON framing: a 4-byte big-endian length, then that
//! many bytes of UTF-8 JSON.
//!
//! Requests are `{"v":1,"id":n,"method":…,"params":{…}}`. Responses echo the
//! id with either `"result"` or `"error"`.

use std::io::{self, Read, Write};

use etr_core::{EtrError, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const PROTOCOL_VERSION: u32 = 1;
pub const MAX_FRAME: usize = 64 << 20;

pub fn write_frame(w: &mut impl Write, msg: &impl Serialize) -> Result<()> {
    let body = serde_json::to_vec(msg)?;
    if body.len() > MAX_FRAME {
        return Err(EtrError::protocol("frame", format!("{} bytes exceeds limit", body.len())));
    }
    w.write_all(&(body.len() as u32).to_be_bytes())?;
    w.write_all(&body)?;
    w.flush()?;
    Ok(())
}

/// `Ok(None)` on a clean end of stream before any length byte.
pub fn read_frame(r: &mut impl Read) -> Result<Option<Value>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let n = u32::from_be_bytes(len) as usize;
    if n > MAX_FRAME {
        return Err(EtrError::protocol("frame", format!("{n} bytes exceeds limit")));
    }
    let mut body = vec![0u8; n];
    r.read_exact(&mut body)?;
    serde_json::from_slice(&body)
        .map(Some)
        .map_err(|e| EtrError::protocol("frame", format!("invalid JSON: {e}")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub v: u32,
    pub id: u64,
    pub method: String,
    #[serde(default)]
    pub params: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireError {
    pub kind: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backend: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub v: u32,
    pub id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<WireError>,
}

impl Response {
    pub fn ok(id: u64, result: Value) -> Self {
        Response {
            v: PROTOCOL_VERSION,
            id,
            result: Some(result),
            error: None,
        }
    }

    pub fn err(id: u64, e: &EtrError) -> Self {
        let (kind, backend) = match e {
            EtrError::Backend { backend, .. } => ("backend", Some(backend.clone())),
            EtrError::MissingCapability { backend, .. } => ("capability", Some(backend.clone())),
            EtrError::Protocol { .. } => ("protocol", None),
            EtrError::InvalidConfig(_) | EtrError::Json(_) => ("request", None),
            _ => ("runtime", None),
        };
        Response {
            v: PROTOCOL_VERSION,
            id,
            result: None,
            error: Some(WireError {
                kind: kind.into(),
                message: e.to_string(),
                backend,
            }),
        }
    }
}

/// Field accessors that name the offending field on failure.
pub mod field {
    use super::*;

    pub fn get<'a>(v: &'a Value, name: &str) -> Result<&'a Value> {
        v.get(name).ok_or_else(|| EtrError::protocol(name, "missing"))
    }

    pub fn str<'a>(v: &'a Value, name: &str) -> Result<&'a str> {
        get(v, name)?.as_str().ok_or_else(|| EtrError::protocol(name, "expected a string"))
    }

    pub fn opt_str<'a>(v: &'a Value, name: &str) -> Result<Option<&'a str>> {
        match v.get(name) {
            None | Some(Value::Null) => Ok(None),
            Some(x) => x.as_str().map(Some).ok_or_else(|| EtrError::protocol(name, "expected a string")),
        }
    }

    pub fn usize(v: &Value, name: &str) -> Result<usize> {
        get(v, name)?
            .as_u64()
            .map(|x| x as usize)
            .ok_or_else(|| EtrError::protocol(name, "expected a nonnegative integer"))
    }

    pub fn bool_or(v: &Value, name: &str, default: bool) -> Result<bool> {
        match v.get(name) {
            None | Some(Value::Null) => Ok(default),
            Some(x) => x.as_bool().ok_or_else(|| EtrError::protocol(name, "expected a boolean")),
        }
    }

    /// An array of exactly `len` finite numbers.
    pub fn floats(v: &Value, name: &str, len: usize) -> Result<Vec<f64>> {
        let arr = get(v, name)?
            .as_array()
            .ok_or_else(|| EtrError::protocol(name, "expected an array"))?;
        if arr.len() != len {
            return Err(EtrError::protocol(name, format!("expected {len} values, got {}", arr.len())));
        }
        arr.iter()
            .map(|x| {
                x.as_f64()
                    .filter(|f| f.is_finite())
                    .ok_or_else(|| EtrError::protocol(name, "expected finite numbers"))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn frame_round_trip() {
        let mut buf = Vec::new();
        write_frame(&mut buf, &json!({"a": [0.1, 1e-300, -2.5]})).unwrap();
        assert_eq!(&buf[..4], &(buf.len() as u32 - 4).to_be_bytes());
        let mut r = buf.as_slice();
        assert_eq!(read_frame(&mut r).unwrap().unwrap(), json!({"a": [0.1, 1e-300, -2.5]}));
        assert!(read_frame(&mut r).unwrap().is_none());
    }

    #[test]
    fn floats_survive_text() {
        let xs: Vec<f64> = (1..2000).map(|i| (i as f64).sqrt().sin() / 7.0 * 10f64.powi(i % 40 - 20)).collect();
        let text = serde_json::to_string(&xs).unwrap();
        let back: Vec<f64> = serde_json::from_str(&text).unwrap();
        assert!(xs.iter().zip(&back).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn truncated_frame_is_an_error() {
        let mut buf = Vec::new();
        write_frame(&mut buf, &json!({"x": 1})).unwrap();
        buf.pop();
        assert!(read_frame(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn field_errors_name_the_field() {
        let v = json!({"h": [1.0, "x"]});
        let e = field::floats(&v, "h", 2).unwrap_err();
        assert!(e.to_string().contains("`h`"), "{e}");
        let e = field::floats(&v, "logits", 2).unwrap_err();
        assert!(e.to_string().contains("`logits`"), "{e}");
    }
}
