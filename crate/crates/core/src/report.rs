//! Text output conventions shared by every artifact: floats with 17
//! significant digits, LF line endings, `null` for non-finite JSON numbers.

use std::io;

use nalgebra::DMatrix;
use serde::ser::SerializeSeq;
use serde::{Serialize, Serializer};

/// Formats a float with 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    if x.is_nan() {
        "NaN".to_string()
    } else if x.is_infinite() {
        if x > 0.0 { "inf" } else { "-inf" }.to_string()
    } else {
        format!("{x:.16e}")
    }
}

/// `serde_json` formatter that writes every float with 17 significant digits
/// and maps NaN/inf to `null`.
#[derive(Debug, Default, Clone, Copy)]
pub struct SigDigitsFormatter;

impl serde_json::ser::Formatter for SigDigitsFormatter {
    fn write_f64<W>(&mut self, writer: &mut W, value: f64) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        if value.is_finite() {
            writer.write_all(format!("{value:.16e}").as_bytes())
        } else {
            writer.write_all(b"null")
        }
    }

    fn write_f32<W>(&mut self, writer: &mut W, value: f32) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        self.write_f64(writer, value as f64)
    }
}

/// Serializes `value` as JSON with [`SigDigitsFormatter`] and a trailing newline.
pub fn to_json<T: Serialize + ?Sized>(value: &T) -> serde_json::Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, SigDigitsFormatter);
    value.serialize(&mut ser)?;
    buf.push(b'\n');
    Ok(String::from_utf8(buf).expect("serde_json writes UTF-8"))
}

/// Row-major nested sequence.
pub fn serialize_matrix<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
    let mut seq = s.serialize_seq(Some(m.nrows()))?;
    for i in 0..m.nrows() {
        let row: Vec<f64> = m.row(i).iter().copied().collect();
        seq.serialize_element(&row)?;
    }
    seq.end()
}

pub fn serialize_opt_matrix<S: Serializer>(m: &Option<DMatrix<f64>>, s: S) -> Result<S::Ok, S::Error> {
    match m {
        Some(m) => serialize_matrix(m, s),
        None => s.serialize_none(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_carry_seventeen_digits() {
        assert_eq!(fmt_f64(0.1), "1.0000000000000001e-1");
        assert_eq!(fmt_f64(-2.0), "-2.0000000000000000e0");
        let parsed: f64 = fmt_f64(std::f64::consts::PI).parse().unwrap();
        assert_eq!(parsed, std::f64::consts::PI);
    }

    #[test]
    fn json_uses_null_for_nan() {
        let out = to_json(&vec![1.0, f64::NAN]).unwrap();
        assert_eq!(out, "[1.0000000000000000e0,null]\n");
        let v: serde_json::Value = serde_json::from_str(&out).unwrap();
        assert_eq!(v[0].as_f64(), Some(1.0));
    }
}
