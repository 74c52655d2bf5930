//! PLY mesh export/import, ASCII and binary little-endian flavors.
//!
//! Written layout (both flavors): vertex element with float x/y/z, face
//! element with `list uchar int vertex_indices`. The reader accepts float or
//! double coordinates and ignores trailing vertex properties.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::math::vec3;
use crate::mesh::TriangleMesh;

#[derive(Debug, Error)]
pub enum PlyError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed ply {0}: {1}")]
    Parse(PathBuf, String),
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> PlyError + '_ {
    move |source| PlyError::Io { path: path.to_path_buf(), source }
}

pub fn write_ascii(mesh: &TriangleMesh, path: &Path) -> Result<(), PlyError> {
    let mut out = Vec::new();
    header(&mut out, mesh, "ascii");
    for v in &mesh.vertices {
        out.extend_from_slice(format!("{} {} {}\n", v.x as f32, v.y as f32, v.z as f32).as_bytes());
    }
    for t in &mesh.triangles {
        out.extend_from_slice(format!("3 {} {} {}\n", t[0], t[1], t[2]).as_bytes());
    }
    std::fs::write(path, out).map_err(io_err(path))
}

pub fn write_binary(mesh: &TriangleMesh, path: &Path) -> Result<(), PlyError> {
    let mut out = Vec::new();
    header(&mut out, mesh, "binary_little_endian");
    for v in &mesh.vertices {
        for c in [v.x, v.y, v.z] {
            out.extend_from_slice(&(c as f32).to_le_bytes());
        }
    }
    for t in &mesh.triangles {
        out.push(3u8);
        for idx in t {
            out.extend_from_slice(&(*idx as i32).to_le_bytes());
        }
    }
    std::fs::write(path, out).map_err(io_err(path))
}

fn header(out: &mut Vec<u8>, mesh: &TriangleMesh, format: &str) {
    let _ = write!(
        out,
        "ply\nformat {format} 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nelement face {}\nproperty list uchar int vertex_indices\nend_header\n",
        mesh.vertices.len(),
        mesh.triangles.len()
    );
}

struct HeaderInfo {
    format: String,
    n_vertices: usize,
    n_faces: usize,
    vertex_props: Vec<String>, // property scalar types in order
}

pub fn read(path: &Path) -> Result<TriangleMesh, PlyError> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let mut reader = BufReader::new(file);
    let parse_err = |m: &str| PlyError::Parse(path.to_path_buf(), m.to_string());

    let mut line = String::new();
    let mut info = HeaderInfo {
        format: String::new(),
        n_vertices: 0,
        n_faces: 0,
        vertex_props: Vec::new(),
    };
    let mut current_element = String::new();
    loop {
        line.clear();
        if reader.read_line(&mut line).map_err(io_err(path))? == 0 {
            return Err(parse_err("truncated header"));
        }
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["ply"] | [] | ["comment", ..] => {}
            ["format", f, "1.0"] => info.format = f.to_string(),
            ["element", "vertex", n] => {
                current_element = "vertex".into();
                info.n_vertices = n.parse().map_err(|_| parse_err("bad vertex count"))?;
            }
            ["element", "face", n] => {
                current_element = "face".into();
                info.n_faces = n.parse().map_err(|_| parse_err("bad face count"))?;
            }
            ["element", ..] => current_element = "other".into(),
            ["property", "list", ..] => {}
            ["property", ty, _name] if current_element == "vertex" => {
                info.vertex_props.push(ty.to_string());
            }
            ["property", ..] => {}
            ["end_header"] => break,
            other => return Err(parse_err(&format!("unexpected header line {other:?}"))),
        }
    }
    if info.vertex_props.len() < 3 {
        return Err(parse_err("vertex element needs at least x y z"));
    }

    let mut mesh = TriangleMesh::default();
    match info.format.as_str() {
        "ascii" => {
            for _ in 0..info.n_vertices {
                line.clear();
                reader.read_line(&mut line).map_err(io_err(path))?;
                let mut it = line.split_whitespace();
                let mut xyz = [0.0f64; 3];
                for c in xyz.iter_mut() {
                    *c = it
                        .next()
                        .ok_or_else(|| parse_err("short vertex line"))?
                        .parse()
                        .map_err(|_| parse_err("bad vertex number"))?;
                }
                mesh.vertices.push(vec3(xyz[0], xyz[1], xyz[2]));
            }
            for _ in 0..info.n_faces {
                line.clear();
                reader.read_line(&mut line).map_err(io_err(path))?;
                let nums: Vec<i64> = line
                    .split_whitespace()
                    .map(|w| w.parse().map_err(|_| parse_err("bad face number")))
                    .collect::<Result<_, _>>()?;
                if nums.first() != Some(&3) || nums.len() < 4 {
                    return Err(parse_err("only triangle faces supported"));
                }
                mesh.triangles.push([nums[1] as u32, nums[2] as u32, nums[3] as u32]);
            }
        }
        "binary_little_endian" => {
            let scalar_size = |ty: &str| -> Result<usize, PlyError> {
                match ty {
                    "float" | "float32" | "int" | "int32" | "uint" | "uint32" => Ok(4),
                    "double" | "float64" => Ok(8),
                    "uchar" | "uint8" | "char" | "int8" => Ok(1),
                    "short" | "ushort" | "int16" | "uint16" => Ok(2),
                    other => Err(parse_err(&format!("unsupported property type {other}"))),
                }
            };
            let mut buf = Vec::new();
            reader.read_to_end(&mut buf).map_err(io_err(path))?;
            let mut at = 0usize;
            let take = |at: &mut usize, n: usize| -> Result<&[u8], PlyError> {
                if *at + n > buf.len() {
                    return Err(parse_err("truncated binary body"));
                }
                let s = &buf[*at..*at + n];
                *at += n;
                Ok(s)
            };
            for _ in 0..info.n_vertices {
                let mut xyz = [0.0f64; 3];
                for (k, ty) in info.vertex_props.iter().enumerate() {
                    let size = scalar_size(ty)?;
                    let bytes = take(&mut at, size)?;
                    if k < 3 {
                        xyz[k] = match size {
                            4 => f32::from_le_bytes(bytes.try_into().unwrap()) as f64,
                            8 => f64::from_le_bytes(bytes.try_into().unwrap()),
                            _ => return Err(parse_err("vertex coordinate must be float/double")),
                        };
                    }
                }
                mesh.vertices.push(vec3(xyz[0], xyz[1], xyz[2]));
            }
            for _ in 0..info.n_faces {
                let n = take(&mut at, 1)?[0];
                if n != 3 {
                    return Err(parse_err("only triangle faces supported"));
                }
                let mut tri = [0u32; 3];
                for slot in tri.iter_mut() {
                    let bytes = take(&mut at, 4)?;
                    *slot = i32::from_le_bytes(bytes.try_into().unwrap()) as u32;
                }
                mesh.triangles.push(tri);
            }
        }
        other => return Err(parse_err(&format!("unsupported format {other}"))),
    }
    for t in &mesh.triangles {
        if t.iter().any(|&i| i as usize >= mesh.vertices.len()) {
            return Err(parse_err("face index out of range"));
        }
    }
    Ok(mesh)
}
