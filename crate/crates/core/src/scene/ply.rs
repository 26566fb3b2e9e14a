//! Minimal PLY reader/writer for xyz point clouds with optional uchar RGB.
//!
//! Supports `format ascii 1.0` and `format binary_little_endian 1.0`, with
//! `x`/`y`/`z` as float or double and optional `red`/`green`/`blue` uchar
//! properties. Non-vertex elements after the vertices are rejected rather
//! than skipped.

use super::{PointCloud, SceneError};
use nalgebra::Point3;
use std::io::{BufRead, BufReader, Read};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PlyFormat {
    Ascii,
    BinaryLe,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PropType {
    Float,
    Double,
    Uchar,
}

impl PropType {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "float" | "float32" => Some(PropType::Float),
            "double" | "float64" => Some(PropType::Double),
            "uchar" | "uint8" => Some(PropType::Uchar),
            _ => None,
        }
    }

    fn size(self) -> usize {
        match self {
            PropType::Float => 4,
            PropType::Double => 8,
            PropType::Uchar => 1,
        }
    }
}

struct Header {
    format: PlyFormat,
    vertex_count: usize,
    properties: Vec<(String, PropType)>,
}

fn load_err(path: &Path, message: impl Into<String>) -> SceneError {
    SceneError::Load {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn io_err(path: &Path, source: std::io::Error) -> SceneError {
    SceneError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn read_header<R: BufRead>(reader: &mut R, path: &Path) -> Result<Header, SceneError> {
    let mut line = String::new();
    reader.read_line(&mut line).map_err(|e| io_err(path, e))?;
    if line.trim_end() != "ply" {
        return Err(load_err(path, "missing 'ply' magic line"));
    }
    let mut format = None;
    let mut vertex_count = None;
    let mut properties = Vec::new();
    let mut in_vertex_element = false;
    loop {
        line.clear();
        if reader.read_line(&mut line).map_err(|e| io_err(path, e))? == 0 {
            return Err(load_err(path, "truncated header"));
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.as_slice() {
            ["end_header"] => break,
            ["comment", ..] => {}
            ["format", f, "1.0"] => {
                format = match *f {
                    "ascii" => Some(PlyFormat::Ascii),
                    "binary_little_endian" => Some(PlyFormat::BinaryLe),
                    other => return Err(load_err(path, format!("unsupported format '{other}'"))),
                };
            }
            ["element", "vertex", n] => {
                vertex_count = Some(
                    n.parse::<usize>()
                        .map_err(|_| load_err(path, format!("bad vertex count '{n}'")))?,
                );
                in_vertex_element = true;
            }
            ["element", name, _] => {
                return Err(load_err(path, format!("unsupported element '{name}'")));
            }
            ["property", ty, name] if in_vertex_element => {
                let ty = PropType::parse(ty)
                    .ok_or_else(|| load_err(path, format!("unsupported property type '{ty}'")))?;
                properties.push(((*name).to_string(), ty));
            }
            _ => {
                return Err(load_err(
                    path,
                    format!("unrecognized header line: {}", line.trim_end()),
                ))
            }
        }
    }
    Ok(Header {
        format: format.ok_or_else(|| load_err(path, "missing format line"))?,
        vertex_count: vertex_count.ok_or_else(|| load_err(path, "missing vertex element"))?,
        properties,
    })
}

/// Loads a PLY point cloud. Fails on non-finite coordinates.
pub fn load_ply(path: &Path) -> Result<PointCloud, SceneError> {
    let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut reader = BufReader::new(file);
    let header = read_header(&mut reader, path)?;

    let find = |name: &str| header.properties.iter().position(|(n, _)| n == name);
    let xyz = [find("x"), find("y"), find("z")];
    if xyz.iter().any(Option::is_none) {
        return Err(load_err(path, "vertex element must declare x, y, z"));
    }
    let xyz = [xyz[0].unwrap(), xyz[1].unwrap(), xyz[2].unwrap()];
    let rgb = match (find("red"), find("green"), find("blue")) {
        (Some(r), Some(g), Some(b)) => Some([r, g, b]),
        (None, None, None) => None,
        _ => return Err(load_err(path, "partial rgb properties")),
    };

    let mut positions = Vec::with_capacity(header.vertex_count);
    let mut colors = rgb.map(|_| Vec::with_capacity(header.vertex_count));

    match header.format {
        PlyFormat::Ascii => {
            let mut line = String::new();
            for row in 0..header.vertex_count {
                line.clear();
                if reader.read_line(&mut line).map_err(|e| io_err(path, e))? == 0 {
                    return Err(load_err(path, format!("truncated at vertex {row}")));
                }
                let fields: Vec<&str> = line.split_whitespace().collect();
                if fields.len() != header.properties.len() {
                    return Err(load_err(
                        path,
                        format!(
                            "vertex {row}: expected {} fields, got {}",
                            header.properties.len(),
                            fields.len()
                        ),
                    ));
                }
                let value = |idx: usize| -> Result<f64, SceneError> {
                    fields[idx].parse::<f64>().map_err(|_| {
                        load_err(path, format!("vertex {row}: bad number '{}'", fields[idx]))
                    })
                };
                positions.push(Point3::new(value(xyz[0])?, value(xyz[1])?, value(xyz[2])?));
                if let (Some(cols), Some(rgb)) = (colors.as_mut(), rgb) {
                    cols.push([
                        value(rgb[0])? as u8,
                        value(rgb[1])? as u8,
                        value(rgb[2])? as u8,
                    ]);
                }
            }
        }
        PlyFormat::BinaryLe => {
            let row_size: usize = header.properties.iter().map(|(_, t)| t.size()).sum();
            let mut row = vec![0u8; row_size];
            let offsets: Vec<usize> = header
                .properties
                .iter()
                .scan(0usize, |acc, (_, t)| {
                    let o = *acc;
                    *acc += t.size();
                    Some(o)
                })
                .collect();
            let read_scalar = |row: &[u8], idx: usize| -> f64 {
                let off = offsets[idx];
                match header.properties[idx].1 {
                    PropType::Float => {
                        f32::from_le_bytes(row[off..off + 4].try_into().unwrap()).into()
                    }
                    PropType::Double => f64::from_le_bytes(row[off..off + 8].try_into().unwrap()),
                    PropType::Uchar => f64::from(row[off]),
                }
            };
            for i in 0..header.vertex_count {
                reader
                    .read_exact(&mut row)
                    .map_err(|_| load_err(path, format!("truncated at vertex {i}")))?;
                positions.push(Point3::new(
                    read_scalar(&row, xyz[0]),
                    read_scalar(&row, xyz[1]),
                    read_scalar(&row, xyz[2]),
                ));
                if let (Some(cols), Some(rgb)) = (colors.as_mut(), rgb) {
                    cols.push([
                        read_scalar(&row, rgb[0]) as u8,
                        read_scalar(&row, rgb[1]) as u8,
                        read_scalar(&row, rgb[2]) as u8,
                    ]);
                }
            }
        }
    }

    PointCloud::new(positions, colors)
}

/// Writes a point cloud as binary little-endian PLY (double xyz, uchar rgb).
/// Double precision keeps save/load round trips exact, so boxes recomputed
/// from a reloaded cloud match boxes computed before saving.
pub fn save_ply(path: &Path, cloud: &PointCloud) -> Result<(), SceneError> {
    let mut out = Vec::new();
    let has_rgb = cloud.colors().is_some();
    out.extend_from_slice(b"ply\nformat binary_little_endian 1.0\n");
    out.extend_from_slice(format!("element vertex {}\n", cloud.len()).as_bytes());
    out.extend_from_slice(b"property double x\nproperty double y\nproperty double z\n");
    if has_rgb {
        out.extend_from_slice(b"property uchar red\nproperty uchar green\nproperty uchar blue\n");
    }
    out.extend_from_slice(b"end_header\n");
    for i in 0..cloud.len() {
        let p = cloud.position(i as u32);
        for d in 0..3 {
            out.extend_from_slice(&p[d].to_le_bytes());
        }
        if has_rgb {
            out.extend_from_slice(&cloud.color(i as u32).unwrap());
        }
    }
    write_atomic(path, &out)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), SceneError> {
    crate::util::write_atomic(path, bytes).map_err(|e| SceneError::Io {
        path: PathBuf::from(path),
        source: e,
    })
}
