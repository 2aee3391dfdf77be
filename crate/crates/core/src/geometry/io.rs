use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::{Point, PointCloud};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Reads whitespace-separated `x y z` lines; blank and `#` lines are skipped.
pub fn read_xyz<T: Scalar>(path: impl AsRef<Path>) -> Result<PointCloud<T>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(parse_err(format!(
                "expected 3 values, found {}",
                fields.len()
            )));
        }
        let mut p = [T::zero(); 3];
        for (slot, f) in p.iter_mut().zip(&fields) {
            let v: f64 = f
                .parse()
                .map_err(|_| parse_err(format!("not a number: {f:?}")))?;
            if !v.is_finite() {
                return Err(parse_err(format!("non-finite value {f:?}")));
            }
            *slot = T::lit(v);
        }
        points.push(p);
    }
    PointCloud::new(points).map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        msg: "no points".into(),
    })
}

/// Writes one `x y z` line per point with 9 significant digits.
pub fn write_xyz<T: Scalar>(cloud: &PointCloud<T>, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for p in &cloud.points {
        let [x, y, z] = p.map(|c| c.to_f64().unwrap_or(f64::NAN));
        writeln!(w, "{x:.8e} {y:.8e} {z:.8e}")?;
    }
    w.flush()?;
    Ok(())
}

/// Writes an ASCII PLY 1.0 file, with per-vertex RGB when `colors` is given.
pub fn write_ply<T: Scalar>(
    cloud: &PointCloud<T>,
    path: impl AsRef<Path>,
    colors: Option<&[[u8; 3]]>,
) -> Result<()> {
    if let Some(c) = colors {
        if c.len() != cloud.len() {
            return Err(Error::contract(format!(
                "{} colors for {} points",
                c.len(),
                cloud.len()
            )));
        }
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(ply_header(cloud.len(), colors.is_some()).as_bytes())?;
    for (i, p) in cloud.points.iter().enumerate() {
        let [x, y, z] = p.map(|c| c.to_f64().unwrap_or(f64::NAN));
        write!(w, "{x:.8e} {y:.8e} {z:.8e}")?;
        if let Some(c) = colors {
            write!(w, " {} {} {}", c[i][0], c[i][1], c[i][2])?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn ply_header(vertices: usize, color: bool) -> String {
    let mut h = format!(
        "ply\nformat ascii 1.0\nelement vertex {vertices}\nproperty float x\nproperty float y\nproperty float z\n"
    );
    if color {
        h.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    }
    h.push_str("end_header\n");
    h
}

/// Contents of an ASCII PLY file as written by [`write_ply`].
#[derive(Clone, Debug, PartialEq)]
pub struct PlyCloud {
    pub points: Vec<Point<f64>>,
    pub colors: Option<Vec<[u8; 3]>>,
}

/// Reads and validates an ASCII PLY file with x/y/z (and optional
/// red/green/blue) vertex properties.
pub fn read_ply(path: impl AsRef<Path>) -> Result<PlyCloud> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let err = |line: usize, msg: &str| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.to_string(),
    };
    let mut lines = text.lines().enumerate();
    let mut next = |expect: &str| -> Result<(usize, String)> {
        let (i, l) = lines
            .next()
            .ok_or_else(|| err(0, &format!("missing {expect}")))?;
        Ok((i + 1, l.trim().to_string()))
    };
    let (i, magic) = next("magic")?;
    if magic != "ply" {
        return Err(err(i, "missing 'ply' magic"));
    }
    let (i, fmt) = next("format")?;
    if fmt != "format ascii 1.0" {
        return Err(err(i, "only 'format ascii 1.0' is supported"));
    }
    let (i, elem) = next("element")?;
    let count: usize = elem
        .strip_prefix("element vertex ")
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| err(i, "expected 'element vertex N'"))?;
    let mut props = Vec::new();
    let header_end = loop {
        let (i, l) = next("end_header")?;
        if l == "end_header" {
            break i;
        }
        match l.split_whitespace().collect::<Vec<_>>()[..] {
            ["property", _, name] => props.push(name.to_string()),
            _ => return Err(err(i, "unexpected header line")),
        }
    };
    let xyz = ["x", "y", "z"];
    let rgb = ["x", "y", "z", "red", "green", "blue"];
    let has_color = if props == xyz {
        false
    } else if props == rgb {
        true
    } else {
        return Err(err(
            header_end,
            "vertex properties must be x y z [red green blue]",
        ));
    };
    let mut points = Vec::with_capacity(count);
    let mut colors = Vec::new();
    for (i, l) in text.lines().enumerate().skip(header_end) {
        if points.len() == count {
            if !l.trim().is_empty() {
                return Err(err(i + 1, "data after last vertex"));
            }
            continue;
        }
        let f: Vec<&str> = l.split_whitespace().collect();
        if f.len() != props.len() {
            return Err(err(i + 1, "wrong number of vertex fields"));
        }
        let mut p = [0.0; 3];
        for a in 0..3 {
            p[a] = f[a].parse().map_err(|_| err(i + 1, "bad coordinate"))?;
        }
        points.push(p);
        if has_color {
            let mut c = [0u8; 3];
            for a in 0..3 {
                c[a] = f[3 + a].parse().map_err(|_| err(i + 1, "bad color"))?;
            }
            colors.push(c);
        }
    }
    if points.len() != count {
        return Err(err(
            0,
            &format!("header declares {count} vertices, found {}", points.len()),
        ));
    }
    Ok(PlyCloud {
        points,
        colors: has_color.then_some(colors),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn xyz_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.xyz");
        let cloud = PointCloud::new(vec![
            [0.125f32, -3.5, 1e-3],
            [7.0, 0.0, -0.25],
            [1.0 / 3.0, 2.0, 5.5],
        ])
        .unwrap();
        write_xyz(&cloud, &path).unwrap();
        let back: PointCloud<f32> = read_xyz(&path).unwrap();
        assert_eq!(back.points, cloud.points);
    }

    #[test]
    fn xyz_arity_error_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.xyz");
        fs::write(&path, "1 2\n").unwrap();
        let err = read_xyz::<f64>(&path).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }), "{err}");
    }

    #[test]
    fn xyz_skips_comments() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.xyz");
        fs::write(&path, "# header\n1 2 3\n\n4 5 6\n").unwrap();
        assert_eq!(read_xyz::<f64>(&path).unwrap().len(), 2);
    }

    #[test]
    fn ply_header_template() {
        let h = ply_header(5, false);
        assert!(h.contains("element vertex 5\n"));
        assert_eq!(h.matches("property float").count(), 3);
        assert!(!h.contains("uchar"));
    }

    #[test]
    fn ply_round_trip_with_color() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ply");
        let cloud = PointCloud::new(vec![[0.5f64, 1.0, -2.0], [0.0, 0.0, 0.0]]).unwrap();
        let colors = [[255u8, 0, 0], [0, 128, 255]];
        write_ply(&cloud, &path, Some(&colors)).unwrap();
        let ply = read_ply(&path).unwrap();
        assert_eq!(ply.points, cloud.points);
        assert_eq!(ply.colors.unwrap(), colors.to_vec());
    }
}
