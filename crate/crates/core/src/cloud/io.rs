//! ASCII XYZ and binary little-endian PLY point files.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use super::PointCloud;
use crate::error::{Error, Result};
use crate::linalg::Vec3;

/// One `x y z` triple per line; blank lines and `#` comments are skipped,
/// extra columns are ignored.
pub fn read_xyz(r: impl Read) -> Result<PointCloud> {
    let mut pts = Vec::new();
    for (n, line) in BufReader::new(r).lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace().map(str::parse::<f64>);
        let mut p = [0.0; 3];
        for c in &mut p {
            *c = match it.next() {
                Some(Ok(v)) => v,
                _ => return Err(Error::Data(format!("line {}: expected three reals", n + 1))),
            };
        }
        pts.push(p);
    }
    PointCloud::new(pts)
}

pub fn write_xyz(pc: &PointCloud, mut w: impl Write) -> Result<()> {
    for p in pc.points() {
        writeln!(w, "{} {} {}", p[0], p[1], p[2])?;
    }
    Ok(())
}

#[derive(Debug)]
struct Property {
    name: String,
    size: usize,
}

fn scalar_size(ty: &str) -> Option<usize> {
    Some(match ty {
        "char" | "uchar" | "int8" | "uint8" => 1,
        "short" | "ushort" | "int16" | "uint16" => 2,
        "int" | "uint" | "int32" | "uint32" | "float" | "float32" => 4,
        "double" | "float64" => 8,
        _ => return None,
    })
}

/// Binary little-endian PLY whose `vertex` element carries float32 `x`, `y`,
/// `z` properties. Other scalar vertex properties are skipped; elements after
/// `vertex` are ignored.
pub fn read_ply(r: impl Read) -> Result<PointCloud> {
    let mut r = BufReader::new(r);
    let mut line = String::new();
    let mut next_line = |r: &mut BufReader<_>| -> Result<String> {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(Error::Data("unexpected end of PLY header".into()));
        }
        Ok(line.trim().to_string())
    };
    if next_line(&mut r)? != "ply" {
        return Err(Error::Data("missing `ply` magic".into()));
    }
    let mut vertex_count = None;
    let mut props: Vec<Property> = Vec::new();
    let mut in_vertex = false;
    let mut seen_vertex = false;
    loop {
        let l = next_line(&mut r)?;
        let tok: Vec<&str> = l.split_whitespace().collect();
        match tok.as_slice() {
            ["end_header"] => break,
            ["format", fmt, _] => {
                if *fmt != "binary_little_endian" {
                    return Err(Error::Data(format!("unsupported PLY format `{fmt}`")));
                }
            }
            ["element", name, count] => {
                in_vertex = *name == "vertex";
                if in_vertex {
                    if seen_vertex {
                        return Err(Error::Data("duplicate vertex element".into()));
                    }
                    seen_vertex = true;
                    vertex_count = Some(
                        count
                            .parse::<usize>()
                            .map_err(|_| Error::Data("bad vertex count".into()))?,
                    );
                } else if !seen_vertex {
                    return Err(Error::Data(format!("element `{name}` precedes vertex")));
                }
            }
            ["property", "list", ..] if in_vertex => {
                return Err(Error::Data("list properties on vertices are unsupported".into()));
            }
            ["property", ty, name] if in_vertex => {
                let size = scalar_size(ty)
                    .ok_or_else(|| Error::Data(format!("unknown PLY type `{ty}`")))?;
                if matches!(*name, "x" | "y" | "z") && !matches!(*ty, "float" | "float32") {
                    return Err(Error::Data(format!("coordinate `{name}` must be float32")));
                }
                props.push(Property {
                    name: name.to_string(),
                    size,
                });
            }
            _ => {}
        }
    }
    let n = vertex_count.ok_or_else(|| Error::Data("no vertex element".into()))?;
    let mut offsets = [None; 3];
    let mut stride = 0;
    for p in &props {
        if let Some(a) = ["x", "y", "z"].iter().position(|c| *c == p.name) {
            offsets[a] = Some(stride);
        }
        stride += p.size;
    }
    let offsets: Vec<usize> = offsets
        .iter()
        .map(|o| o.ok_or_else(|| Error::Data("vertex lacks x/y/z".into())))
        .collect::<Result<_>>()?;
    let mut buf = vec![0u8; stride * n];
    r.read_exact(&mut buf)?;
    let pts: Vec<Vec3> = buf
        .chunks_exact(stride)
        .map(|rec| {
            let f = |o: usize| f32::from_le_bytes(rec[o..o + 4].try_into().expect("4 bytes")) as f64;
            [f(offsets[0]), f(offsets[1]), f(offsets[2])]
        })
        .collect();
    PointCloud::new(pts)
}

pub fn write_ply(pc: &PointCloud, mut w: impl Write) -> Result<()> {
    write!(
        w,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\n\
         property float x\nproperty float y\nproperty float z\nend_header\n",
        pc.len()
    )?;
    let mut buf = Vec::with_capacity(pc.len() * 12);
    for p in pc.points() {
        for c in p {
            buf.extend_from_slice(&(*c as f32).to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Dispatches on the extension (`.ply`, otherwise XYZ).
pub fn read_cloud(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let f = std::fs::File::open(path)?;
    match path.extension().and_then(|e| e.to_str()) {
        Some(e) if e.eq_ignore_ascii_case("ply") => read_ply(f),
        _ => read_xyz(f),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn xyz_round_trip() {
        let pc = PointCloud::new(vec![[0.5, -1.25, 3.0], [1e-3, 2.0, 0.0]]).unwrap();
        let mut out = Vec::new();
        write_xyz(&pc, &mut out).unwrap();
        let back = read_xyz(out.as_slice()).unwrap();
        assert_eq!(back, pc);
    }

    #[test]
    fn xyz_rejects_short_lines() {
        assert!(read_xyz("1 2\n".as_bytes()).is_err());
        assert!(read_xyz("# only a comment\n".as_bytes()).is_err());
    }

    #[test]
    fn ply_round_trip_at_f32_precision() {
        let pc = PointCloud::new(vec![[0.5, -1.25, 3.0], [0.1, 0.2, 0.3]]).unwrap();
        let mut out = Vec::new();
        write_ply(&pc, &mut out).unwrap();
        let back = read_ply(out.as_slice()).unwrap();
        for (a, b) in back.points().iter().zip(pc.points()) {
            for k in 0..3 {
                assert_eq!(a[k], b[k] as f32 as f64);
            }
        }
    }

    #[test]
    fn ply_skips_extra_properties() {
        let mut bytes = b"ply\nformat binary_little_endian 1.0\nelement vertex 1\n\
property uchar red\nproperty float x\nproperty float y\nproperty float z\nproperty double w\n\
end_header\n"
            .to_vec();
        bytes.push(7);
        for v in [1.0f32, 2.0, 3.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes.extend_from_slice(&9.0f64.to_le_bytes());
        let pc = read_ply(bytes.as_slice()).unwrap();
        assert_eq!(pc.points(), &[[1.0, 2.0, 3.0]]);
    }

    #[test]
    fn ply_rejects_ascii() {
        let s = "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nend_header\n1\n";
        assert!(read_ply(s.as_bytes()).is_err());
    }
}
