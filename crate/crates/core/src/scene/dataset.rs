//! Scene manifests and PLY point clouds.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::camera::{Camera, CameraJson};
use crate::error::{Error, Result};
use crate::image::{load_image, Image};

/// JSON manifest. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub cameras: Vec<CameraJson>,
    pub images: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub priors: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depths: Option<Vec<String>>,
    pub points: String,
    /// Optional clean views, used only for evaluation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub references: Option<Vec<String>>,
    #[serde(default)]
    pub background: [f64; 3],
}

/// A loaded scene: every referenced file is read eagerly.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub cameras: Vec<Camera>,
    pub images: Vec<Image>,
    pub priors: Option<Vec<Image>>,
    pub depths: Option<Vec<Image>>,
    pub references: Option<Vec<Image>>,
    pub points: Vec<[f64; 3]>,
    pub colors: Vec<[f64; 3]>,
    pub background: [f64; 3],
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    pub fn load(manifest_path: impl AsRef<Path>) -> Result<Self> {
        let manifest_path = manifest_path.as_ref();
        let text =
            std::fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::format(manifest_path, e.to_string()))?;
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        Self::from_manifest(&manifest, base)
    }

    pub fn from_manifest(m: &Manifest, base: &Path) -> Result<Self> {
        let n = m.cameras.len();
        if n < 2 {
            return Err(Error::Dataset(format!(
                "need at least 2 views, manifest lists {n}"
            )));
        }
        let check_len = |what: &str, len: usize| {
            if len != n {
                Err(Error::Dataset(format!("{n} cameras but {len} {what}")))
            } else {
                Ok(())
            }
        };
        check_len("images", m.images.len())?;
        let resolve = |p: &String| -> PathBuf { base.join(p) };
        let load_all = |paths: &[String]| -> Result<Vec<Image>> {
            paths.iter().map(|p| load_image(resolve(p))).collect()
        };
        let cameras = m
            .cameras
            .iter()
            .map(Camera::from_json)
            .collect::<Result<Vec<_>>>()?;
        let images = load_all(&m.images)?;
        let priors = match &m.priors {
            Some(p) => {
                check_len("priors", p.len())?;
                Some(load_all(p)?)
            }
            None => None,
        };
        let depths = match &m.depths {
            Some(p) => {
                check_len("depths", p.len())?;
                Some(load_all(p)?)
            }
            None => None,
        };
        let references = match &m.references {
            Some(p) => {
                check_len("references", p.len())?;
                Some(load_all(p)?)
            }
            None => None,
        };
        let (points, colors) = read_ply(resolve(&m.points))?;
        let ds = Dataset {
            cameras,
            images,
            priors,
            depths,
            references,
            points,
            colors,
            background: m.background,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Shape and count checks across all views.
    pub fn validate(&self) -> Result<()> {
        let n = self.cameras.len();
        if n < 2 {
            return Err(Error::Dataset(format!("need at least 2 views, got {n}")));
        }
        if self.images.len() != n {
            return Err(Error::Dataset(format!(
                "{n} cameras but {} images",
                self.images.len()
            )));
        }
        for (i, (cam, img)) in self.cameras.iter().zip(&self.images).enumerate() {
            cam.validate()?;
            if img.width() != cam.width || img.height() != cam.height || img.channels() != 3 {
                return Err(Error::Dataset(format!(
                    "view {i}: image is {}x{}x{}, camera expects {}x{}x3",
                    img.width(),
                    img.height(),
                    img.channels(),
                    cam.width,
                    cam.height
                )));
            }
            let single = |what: &str, maps: &Option<Vec<Image>>| -> Result<()> {
                if let Some(maps) = maps {
                    if maps.len() != n {
                        return Err(Error::Dataset(format!(
                            "{n} cameras but {} {what}",
                            maps.len()
                        )));
                    }
                    let m = &maps[i];
                    if m.width() != cam.width || m.height() != cam.height || m.channels() != 1 {
                        return Err(Error::Dataset(format!(
                            "view {i}: {what} map has the wrong shape"
                        )));
                    }
                }
                Ok(())
            };
            single("prior", &self.priors)?;
            single("depth", &self.depths)?;
            if let Some(refs) = &self.references {
                if refs.len() != n || !refs[i].same_shape(img) {
                    return Err(Error::Dataset(format!(
                        "view {i}: reference has the wrong shape"
                    )));
                }
            }
        }
        if self.points.is_empty() {
            return Err(Error::Dataset("point cloud is empty".into()));
        }
        if self.points.len() != self.colors.len() {
            return Err(Error::Dataset("point and color counts differ".into()));
        }
        Ok(())
    }

    /// Radius of the sphere around the mean camera center that holds every camera,
    /// scaled by 1.1.
    pub fn camera_extent(&self) -> f64 {
        let centers: Vec<[f64; 3]> = self.cameras.iter().map(Camera::center).collect();
        let n = centers.len() as f64;
        let mut mean = [0.0; 3];
        for c in &centers {
            for k in 0..3 {
                mean[k] += c[k] / n;
            }
        }
        let r = centers
            .iter()
            .map(|c| {
                ((c[0] - mean[0]).powi(2) + (c[1] - mean[1]).powi(2) + (c[2] - mean[2]).powi(2))
                    .sqrt()
            })
            .fold(0.0, f64::max);
        if r > 1e-9 {
            1.1 * r
        } else {
            1.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum PlyType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl PlyType {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => PlyType::I8,
            "uchar" | "uint8" => PlyType::U8,
            "short" | "int16" => PlyType::I16,
            "ushort" | "uint16" => PlyType::U16,
            "int" | "int32" => PlyType::I32,
            "uint" | "uint32" => PlyType::U32,
            "float" | "float32" => PlyType::F32,
            "double" | "float64" => PlyType::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            PlyType::I8 | PlyType::U8 => 1,
            PlyType::I16 | PlyType::U16 => 2,
            PlyType::I32 | PlyType::U32 | PlyType::F32 => 4,
            PlyType::F64 => 8,
        }
    }

    fn read_le(self, b: &[u8]) -> f64 {
        match self {
            PlyType::I8 => b[0] as i8 as f64,
            PlyType::U8 => b[0] as f64,
            PlyType::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            PlyType::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            PlyType::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            PlyType::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            PlyType::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            PlyType::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }

    /// Divisor that maps stored colors onto `[0, 1]`.
    fn color_scale(self) -> f64 {
        match self {
            PlyType::U8 => 255.0,
            PlyType::U16 => 65535.0,
            PlyType::F32 | PlyType::F64 => 1.0,
            _ => 255.0,
        }
    }
}

/// Reads vertex positions and colors from an ASCII or binary little-endian PLY.
/// Missing colors default to mid grey.
pub fn read_ply(path: impl AsRef<Path>) -> Result<(Vec<[f64; 3]>, Vec<[f64; 3]>)> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let bad = |reason: &str| Error::format(path, reason.to_string());

    let mut line = String::new();
    let next_line = |reader: &mut BufReader<std::fs::File>, line: &mut String| -> Result<bool> {
        line.clear();
        let n = reader.read_line(line).map_err(|e| Error::io(path, e))?;
        Ok(n > 0)
    };
    if !next_line(&mut reader, &mut line)? || line.trim() != "ply" {
        return Err(bad("missing ply magic"));
    }
    let mut binary = false;
    let mut vertex_count = None;
    let mut in_vertex = false;
    let mut props: Vec<(String, PlyType)> = Vec::new();
    let mut seen_other_element = false;
    loop {
        if !next_line(&mut reader, &mut line)? {
            return Err(bad("header is not terminated"));
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["end_header"] => break,
            ["format", "ascii", _] => binary = false,
            ["format", "binary_little_endian", _] => binary = true,
            ["format", other, _] => return Err(bad(&format!("unsupported format {other}"))),
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", "vertex", n] => {
                if seen_other_element {
                    return Err(bad("vertex element must come first"));
                }
                vertex_count = Some(n.parse::<usize>().map_err(|_| bad("bad vertex count"))?);
                in_vertex = true;
            }
            ["element", ..] => {
                in_vertex = false;
                seen_other_element = true;
            }
            ["property", "list", ..] if in_vertex => {
                return Err(bad("list properties on vertices are not supported"))
            }
            ["property", ty, name] if in_vertex => {
                let t = PlyType::parse(ty)
                    .ok_or_else(|| bad(&format!("unknown property type {ty}")))?;
                props.push((name.to_string(), t));
            }
            ["property", ..] => {}
            _ => return Err(bad(&format!("unexpected header line `{}`", line.trim()))),
        }
    }
    let n = vertex_count.ok_or_else(|| bad("no vertex element"))?;
    let find = |name: &str| props.iter().position(|(p, _)| p == name);
    let xyz = [find("x"), find("y"), find("z")];
    if xyz.iter().any(Option::is_none) {
        return Err(bad("vertex element lacks x/y/z"));
    }
    let xyz = xyz.map(Option::unwrap);
    let rgb = match [find("red"), find("green"), find("blue")] {
        [Some(r), Some(g), Some(b)] => Some([r, g, b]),
        _ => None,
    };

    let mut points = Vec::with_capacity(n);
    let mut colors = Vec::with_capacity(n);
    let mut row = vec![0.0; props.len()];
    let mut push = |row: &[f64]| {
        points.push(xyz.map(|k| row[k]));
        colors.push(match rgb {
            Some(idx) => idx.map(|k| row[k] / props[k].1.color_scale()),
            None => [0.5; 3],
        });
    };
    if binary {
        let stride: usize = props.iter().map(|(_, t)| t.size()).sum();
        let mut buf = vec![0u8; stride];
        for _ in 0..n {
            reader.read_exact(&mut buf).map_err(|_| {
                Error::Truncated(format!("{} has fewer than {n} vertices", path.display()))
            })?;
            let mut off = 0;
            for (k, (_, t)) in props.iter().enumerate() {
                row[k] = t.read_le(&buf[off..]);
                off += t.size();
            }
            push(&row);
        }
    } else {
        for i in 0..n {
            if !next_line(&mut reader, &mut line)? {
                return Err(Error::Truncated(format!(
                    "{} has {i} of {n} vertices",
                    path.display()
                )));
            }
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks.len() < props.len() {
                return Err(bad(&format!("vertex {i} has {} values", toks.len())));
            }
            for k in 0..props.len() {
                row[k] = toks[k]
                    .parse()
                    .map_err(|_| bad(&format!("vertex {i}: bad number `{}`", toks[k])))?;
            }
            push(&row);
        }
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(bad("non-finite vertex coordinate"));
    }
    Ok((points, colors))
}

/// Writes an ASCII PLY with float positions and 8-bit colors.
pub fn write_ply(path: impl AsRef<Path>, points: &[[f64; 3]], colors: &[[f64; 3]]) -> Result<()> {
    let path = path.as_ref();
    if points.len() != colors.len() {
        return Err(Error::Shape(format!(
            "{} points but {} colors",
            points.len(),
            colors.len()
        )));
    }
    let mut s = String::new();
    s.push_str("ply\nformat ascii 1.0\n");
    s.push_str(&format!("element vertex {}\n", points.len()));
    s.push_str("property float x\nproperty float y\nproperty float z\n");
    s.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n");
    for (p, c) in points.iter().zip(colors) {
        let q = c.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8);
        s.push_str(&format!(
            "{} {} {} {} {} {}\n",
            p[0] as f32, p[1] as f32, p[2] as f32, q[0], q[1], q[2]
        ));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(s.as_bytes()).map_err(|e| Error::io(path, e))
}
