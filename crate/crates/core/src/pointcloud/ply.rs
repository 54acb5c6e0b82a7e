//! ASCII PLY reading and writing.
//!
//! Coordinates are written with 9 significant digits; colors as `uchar`
//! triples. The reader accepts exactly the two layouts the writer emits
//! (with `float` or `double` coordinates).

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use super::PointCloud;
use crate::error::{io_err, Error, Result};

/// Formats `v` with 9 significant digits, `%g` style.
pub(crate) fn fmt_sig9(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let sci = format!("{v:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("exponent");
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        let fixed = format!("{v:.decimals$}");
        trim_zeros(&fixed).to_string()
    } else {
        format!("{}e{}", trim_zeros(mantissa), exp)
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

pub(crate) fn header(count: usize, colored: bool) -> String {
    let mut h = String::new();
    h.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(h, "element vertex {count}");
    h.push_str("property float x\nproperty float y\nproperty float z\n");
    if colored {
        h.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    }
    h.push_str("end_header\n");
    h
}

/// Serializes `pc` to any writer.
pub fn write_ply_to(pc: &PointCloud, mut out: impl Write) -> std::io::Result<()> {
    let colors = pc.vertex_colors();
    let mut buf = header(pc.len(), colors.is_some());
    for (i, p) in pc.points().iter().enumerate() {
        let _ = write!(buf, "{} {} {}", fmt_sig9(p[0]), fmt_sig9(p[1]), fmt_sig9(p[2]));
        if let Some(c) = colors {
            let [r, g, b] = c[i];
            let _ = write!(buf, " {r} {g} {b}");
        }
        buf.push('\n');
    }
    out.write_all(buf.as_bytes())
}

pub fn write_ply(pc: &PointCloud, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(io_err(path))?;
    let mut w = std::io::BufWriter::new(file);
    write_ply_to(pc, &mut w).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

pub fn read_ply(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    parse_ply(&text, &path.display().to_string())
}

pub(crate) fn parse_ply(text: &str, source: &str) -> Result<PointCloud> {
    let err = |line: usize, message: String| Error::Parse {
        path: source.to_string(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim_end_matches('\r')));
    let mut next = |what: &str| {
        lines
            .next()
            .ok_or_else(|| err(0, format!("unexpected end of file, expected {what}")))
    };

    let (n, l) = next("magic")?;
    if l != "ply" {
        return Err(err(n, format!("expected 'ply', found {l:?}")));
    }
    let (n, l) = next("format")?;
    if l != "format ascii 1.0" {
        return Err(err(n, format!("unsupported format line {l:?}")));
    }
    let (n, l) = next("element line")?;
    let count: usize = l
        .strip_prefix("element vertex ")
        .and_then(|c| c.trim().parse().ok())
        .ok_or_else(|| err(n, format!("expected 'element vertex <N>', found {l:?}")))?;

    let mut props = Vec::new();
    let header_end = loop {
        let (n, l) = next("end_header")?;
        if l == "end_header" {
            break n;
        }
        let parts: Vec<&str> = l.split_whitespace().collect();
        match parts.as_slice() {
            ["property", ty, name] => props.push((n, ty.to_string(), name.to_string())),
            _ => return Err(err(n, format!("unsupported header line {l:?}"))),
        }
    };
    let names: Vec<&str> = props.iter().map(|(_, _, name)| name.as_str()).collect();
    let colored = match names.as_slice() {
        ["x", "y", "z"] => false,
        ["x", "y", "z", "red", "green", "blue"] => true,
        _ => {
            return Err(err(
                props.first().map_or(header_end, |p| p.0),
                format!("unsupported vertex properties {names:?}"),
            ))
        }
    };
    for (n, ty, name) in &props {
        let ok = if matches!(name.as_str(), "x" | "y" | "z") {
            matches!(ty.as_str(), "float" | "double" | "float32" | "float64")
        } else {
            matches!(ty.as_str(), "uchar" | "uint8")
        };
        if !ok {
            return Err(err(*n, format!("unsupported type {ty} for property {name}")));
        }
    }

    let mut points = Vec::with_capacity(count);
    let mut colors = Vec::with_capacity(if colored { count } else { 0 });
    let mut last_line = header_end;
    for (n, l) in lines.by_ref() {
        last_line = n;
        if l.trim().is_empty() {
            continue;
        }
        if points.len() == count {
            return Err(err(n, format!("extra data after {count} vertices")));
        }
        let fields: Vec<&str> = l.split_whitespace().collect();
        let expected = if colored { 6 } else { 3 };
        if fields.len() != expected {
            return Err(err(n, format!("expected {expected} values, found {}", fields.len())));
        }
        let mut p = [0.0; 3];
        for k in 0..3 {
            let v: f64 = fields[k]
                .parse()
                .map_err(|_| err(n, format!("invalid coordinate {:?}", fields[k])))?;
            if !v.is_finite() {
                return Err(err(n, format!("non-finite coordinate {:?}", fields[k])));
            }
            p[k] = v;
        }
        points.push(p);
        if colored {
            let mut c = [0u8; 3];
            for k in 0..3 {
                c[k] = fields[3 + k]
                    .parse()
                    .map_err(|_| err(n, format!("invalid color channel {:?}", fields[3 + k])))?;
            }
            colors.push(c);
        }
    }
    if points.len() != count {
        return Err(err(
            last_line,
            format!("header declares {count} vertices but only {} were found", points.len()),
        ));
    }
    let pc = PointCloud::new(points).map_err(|e| err(header_end, e.to_string()))?;
    if colored {
        pc.with_colors(colors)
    } else {
        Ok(pc)
    }
}
