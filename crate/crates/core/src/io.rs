//! File formats: point clouds, range-image and coefficient dumps, feature and
//! match dumps, pose files and CSV tables. Every writer goes through a temporary
//! file that is renamed into place, so outputs are either complete or absent.

use std::fmt::Write as _;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use thiserror::Error;

use crate::features::{Descriptor, Keypoint};
use crate::geometry::{Point3, PointCloud, RigidTransform};
use crate::matching::Match;
use crate::range_image::RangeImage;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{0}: unrecognized point cloud format")]
    UnknownFormat(PathBuf),
    #[error("{path}: {location}: {message}")]
    Parse {
        path: PathBuf,
        location: String,
        message: String,
    },
    #[error("{0}: point cloud is empty")]
    EmptyCloud(PathBuf),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn parse_err(path: &Path, location: String, message: impl Into<String>) -> IoError {
    IoError::Parse {
        path: path.to_path_buf(),
        location,
        message: message.into(),
    }
}

/// Writes `path` through a sibling temporary file and an atomic rename.
pub fn write_atomic(
    path: &Path,
    f: impl FnOnce(&mut dyn Write) -> io::Result<()>,
) -> Result<(), IoError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut builder = tempfile::Builder::new();
    // Temp files default to 0600.
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        builder.permissions(fs::Permissions::from_mode(0o666));
    }
    let tmp = builder.tempfile_in(dir).map_err(io_err(path))?;
    {
        let mut w = BufWriter::new(tmp.as_file());
        f(&mut w).map_err(io_err(path))?;
        w.flush().map_err(io_err(path))?;
    }
    tmp.as_file().sync_all().map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| io_err(path)(e.error))?;
    Ok(())
}

pub fn write_text(path: &Path, text: &str) -> Result<(), IoError> {
    write_atomic(path, |w| w.write_all(text.as_bytes()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloudFormat {
    XyzText,
    PlyAscii,
    PlyBinaryLe,
}

impl CloudFormat {
    /// Format implied by a file extension (`.xyz`/`.txt` → text, `.ply` → binary PLY).
    pub fn from_extension(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "xyz" | "txt" => Some(Self::XyzText),
            "ply" => Some(Self::PlyBinaryLe),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedCloud {
    pub cloud: PointCloud,
    pub format: CloudFormat,
    /// Records with non-finite coordinates that were skipped.
    pub dropped: usize,
}

/// Reads a point cloud, detecting PLY by its magic line and falling back to
/// whitespace-separated `x y z` text. Non-finite records are dropped.
pub fn load_cloud(path: &Path) -> Result<LoadedCloud, IoError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let (points, format) = if bytes.starts_with(b"ply\n") || bytes.starts_with(b"ply\r\n") {
        read_ply(path, &bytes)?
    } else if matches!(
        CloudFormat::from_extension(path),
        Some(CloudFormat::XyzText)
    ) || looks_like_text(&bytes)
    {
        (read_xyz(path, &bytes)?, CloudFormat::XyzText)
    } else {
        return Err(IoError::UnknownFormat(path.to_path_buf()));
    };
    let mut cloud = PointCloud::new(points);
    let dropped = cloud.retain_finite();
    if dropped > 0 {
        log::warn!("{}: dropped {dropped} non-finite records", path.display());
    }
    if cloud.is_empty() {
        return Err(IoError::EmptyCloud(path.to_path_buf()));
    }
    Ok(LoadedCloud {
        cloud,
        format,
        dropped,
    })
}

fn looks_like_text(bytes: &[u8]) -> bool {
    let head = &bytes[..bytes.len().min(4096)];
    std::str::from_utf8(head).is_ok_and(|s| {
        s.chars()
            .all(|c| c.is_ascii_digit() || c.is_ascii_whitespace() || "+-.eEnNaAiIfF#,".contains(c))
    })
}

fn read_xyz(path: &Path, bytes: &[u8]) -> Result<Vec<Point3>, IoError> {
    let text = std::str::from_utf8(bytes)
        .map_err(|e| parse_err(path, format!("byte {}", e.valid_up_to()), "invalid UTF-8"))?;
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|s| !s.is_empty())
            .collect();
        if fields.len() < 3 {
            return Err(parse_err(
                path,
                format!("line {}", i + 1),
                "expected at least 3 coordinates",
            ));
        }
        let mut xyz = [0.0; 3];
        for (k, f) in fields[..3].iter().enumerate() {
            xyz[k] = f.parse().map_err(|_| {
                parse_err(path, format!("line {}", i + 1), format!("bad number {f:?}"))
            })?;
        }
        points.push(Point3::new(xyz[0], xyz[1], xyz[2]));
    }
    Ok(points)
}

#[derive(Debug, Clone, Copy)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "char" | "int8" => Self::I8,
            "uchar" | "uint8" => Self::U8,
            "short" | "int16" => Self::I16,
            "ushort" | "uint16" => Self::U16,
            "int" | "int32" => Self::I32,
            "uint" | "uint32" => Self::U32,
            "float" | "float32" => Self::F32,
            "double" | "float64" => Self::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Self::I8 | Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }

    fn read_le(self, b: &[u8]) -> f64 {
        match self {
            Self::I8 => b[0] as i8 as f64,
            Self::U8 => b[0] as f64,
            Self::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Self::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Self::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

struct PlyElement {
    name: String,
    count: usize,
    props: Vec<(String, Scalar)>,
}

fn read_ply(path: &Path, bytes: &[u8]) -> Result<(Vec<Point3>, CloudFormat), IoError> {
    let end = find_subslice(bytes, b"end_header")
        .ok_or_else(|| parse_err(path, "header".into(), "missing end_header"))?;
    let mut body = end + b"end_header".len();
    if bytes.get(body) == Some(&b'\r') {
        body += 1;
    }
    if bytes.get(body) == Some(&b'\n') {
        body += 1;
    }
    let header = std::str::from_utf8(&bytes[..end])
        .map_err(|_| parse_err(path, "header".into(), "invalid UTF-8"))?;
    let mut format = None;
    let mut elements: Vec<PlyElement> = Vec::new();
    for (i, line) in header.lines().enumerate() {
        let loc = || format!("header line {}", i + 1);
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["ply"] | [] => {}
            ["comment", ..] | ["obj_info", ..] => {}
            ["format", "ascii", _] => format = Some(CloudFormat::PlyAscii),
            ["format", "binary_little_endian", _] => format = Some(CloudFormat::PlyBinaryLe),
            ["format", other, _] => {
                return Err(parse_err(
                    path,
                    loc(),
                    format!("unsupported format {other}"),
                ))
            }
            ["element", name, count] => elements.push(PlyElement {
                name: name.to_string(),
                count: count
                    .parse()
                    .map_err(|_| parse_err(path, loc(), "bad element count"))?,
                props: Vec::new(),
            }),
            ["property", "list", ..] => {
                let e = elements
                    .last_mut()
                    .ok_or_else(|| parse_err(path, loc(), "property before element"))?;
                if e.name == "vertex" {
                    return Err(parse_err(
                        path,
                        loc(),
                        "list properties on vertices are not supported",
                    ));
                }
                // Elements with lists are only skippable after the vertex data.
                e.props.push(("<list>".into(), Scalar::U8));
            }
            ["property", ty, name] => {
                let ty = Scalar::parse(ty)
                    .ok_or_else(|| parse_err(path, loc(), format!("unknown type {ty}")))?;
                let e = elements
                    .last_mut()
                    .ok_or_else(|| parse_err(path, loc(), "property before element"))?;
                e.props.push((name.to_string(), ty));
            }
            _ => return Err(parse_err(path, loc(), format!("unexpected line {line:?}"))),
        }
    }
    let format = format.ok_or_else(|| parse_err(path, "header".into(), "missing format line"))?;
    let vi = elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| parse_err(path, "header".into(), "no vertex element"))?;
    if elements[..vi]
        .iter()
        .any(|e| e.props.iter().any(|(n, _)| n == "<list>"))
    {
        return Err(parse_err(
            path,
            "header".into(),
            "list properties before the vertex element are not supported",
        ));
    }
    let vertex = &elements[vi];
    let col = |axis: &str| {
        vertex
            .props
            .iter()
            .position(|(n, _)| n == axis)
            .ok_or_else(|| parse_err(path, "header".into(), format!("vertex has no {axis}")))
    };
    let (cx, cy, cz) = (col("x")?, col("y")?, col("z")?);

    let mut points = Vec::with_capacity(vertex.count);
    match format {
        CloudFormat::PlyAscii => {
            let text = std::str::from_utf8(&bytes[body..])
                .map_err(|_| parse_err(path, "body".into(), "invalid UTF-8"))?;
            let header_lines = header.lines().count() + 1;
            let mut lines = text.lines().enumerate();
            let skip: usize = elements[..vi].iter().map(|e| e.count).sum();
            for _ in 0..skip {
                lines.next();
            }
            for _ in 0..vertex.count {
                let (i, line) = lines.next().ok_or_else(|| {
                    parse_err(path, "body".into(), "fewer vertices than declared")
                })?;
                let loc = || format!("line {}", header_lines + i + 1);
                let fields: Vec<&str> = line.split_whitespace().collect();
                if fields.len() < vertex.props.len() {
                    return Err(parse_err(path, loc(), "too few properties"));
                }
                let get = |c: usize| -> Result<f64, IoError> {
                    fields[c]
                        .parse()
                        .map_err(|_| parse_err(path, loc(), format!("bad number {:?}", fields[c])))
                };
                points.push(Point3::new(get(cx)?, get(cy)?, get(cz)?));
            }
        }
        CloudFormat::PlyBinaryLe => {
            let mut offset = body;
            for e in &elements[..vi] {
                offset += e.count * e.props.iter().map(|(_, t)| t.size()).sum::<usize>();
            }
            let mut starts = Vec::with_capacity(vertex.props.len());
            let mut stride = 0;
            for (_, t) in &vertex.props {
                starts.push(stride);
                stride += t.size();
            }
            let need = offset + stride * vertex.count;
            if bytes.len() < need {
                return Err(parse_err(
                    path,
                    format!("byte {}", bytes.len()),
                    format!(
                        "file truncated: {} vertices need {need} bytes",
                        vertex.count
                    ),
                ));
            }
            for k in 0..vertex.count {
                let rec = &bytes[offset + k * stride..offset + (k + 1) * stride];
                let get = |c: usize| vertex.props[c].1.read_le(&rec[starts[c]..]);
                points.push(Point3::new(get(cx), get(cy), get(cz)));
            }
        }
        CloudFormat::XyzText => unreachable!("PLY header decides between the PLY variants"),
    }
    Ok((points, format))
}

fn find_subslice(hay: &[u8], needle: &[u8]) -> Option<usize> {
    hay.windows(needle.len()).position(|w| w == needle)
}

/// Writes `cloud`; binary PLY stores doubles so a reload is bit-exact.
pub fn write_cloud(cloud: &PointCloud, path: &Path, format: CloudFormat) -> Result<(), IoError> {
    if cloud.is_empty() {
        return Err(IoError::EmptyCloud(path.to_path_buf()));
    }
    write_atomic(path, |w| match format {
        CloudFormat::XyzText => {
            for p in &cloud.points {
                writeln!(w, "{} {} {}", p.x, p.y, p.z)?;
            }
            Ok(())
        }
        CloudFormat::PlyAscii | CloudFormat::PlyBinaryLe => {
            let fmt = if format == CloudFormat::PlyAscii {
                "ascii"
            } else {
                "binary_little_endian"
            };
            write!(
                w,
                "ply\nformat {fmt} 1.0\nelement vertex {}\n\
                 property double x\nproperty double y\nproperty double z\nend_header\n",
                cloud.len()
            )?;
            for p in &cloud.points {
                if format == CloudFormat::PlyAscii {
                    writeln!(w, "{} {} {}", p.x, p.y, p.z)?;
                } else {
                    for v in [p.x, p.y, p.z] {
                        w.write_all(&v.to_le_bytes())?;
                    }
                }
            }
            Ok(())
        }
    })
}

/// 16-bit binary PGM of values in `[0, 1]`.
pub fn write_pgm16(
    path: &Path,
    width: usize,
    height: usize,
    values: &[f64],
) -> Result<(), IoError> {
    assert_eq!(values.len(), width * height);
    write_atomic(path, |w| {
        write!(w, "P5\n{width} {height}\n65535\n")?;
        for v in values {
            let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
            w.write_all(&q.to_be_bytes())?;
        }
        Ok(())
    })
}

/// Reads a 16-bit binary PGM back into `[0, 1]` values.
pub fn read_pgm16(path: &Path) -> Result<(usize, usize, Vec<f64>), IoError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if bytes.get(i) == Some(&b'#') {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(parse_err(path, format!("byte {i}"), "truncated PGM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    i += 1;
    let bad = |m: &str| parse_err(path, "header".into(), m);
    if fields[0] != "P5" {
        return Err(bad("not a binary PGM"));
    }
    let width: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
    let height: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
    if fields[3] != "65535" {
        return Err(bad("only 16-bit PGM is supported"));
    }
    let data = bytes
        .get(i..i + 2 * width * height)
        .ok_or_else(|| bad("truncated pixel data"))?;
    let values = data
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / 65535.0)
        .collect();
    Ok((width, height, values))
}

/// Path of the key=value sidecar written next to a range-image PGM.
pub fn sidecar_path(pgm: &Path) -> PathBuf {
    let mut s = pgm.as_os_str().to_owned();
    s.push(".txt");
    PathBuf::from(s)
}

/// Normalized range image as PGM plus its sidecar with angular resolutions
/// and the ranges mapped to 0 and 65535.
pub fn write_range_image(path: &Path, img: &RangeImage) -> Result<(), IoError> {
    write_pgm16(path, img.width, img.height, &img.normalized)?;
    let (lo, hi) = img.normalization.unwrap_or((f64::NAN, f64::NAN));
    let m = &img.model;
    let text = format!(
        "az_res_deg={}\nel_res_deg={}\nrange_min_m={lo}\nrange_max_m={hi}\n\
         az_span_deg={},{}\nel_span_deg={},{}\n",
        m.azimuth_resolution.to_degrees(),
        m.elevation_resolution.to_degrees(),
        m.azimuth_span.0.to_degrees(),
        m.azimuth_span.1.to_degrees(),
        m.elevation_span.0.to_degrees(),
        m.elevation_span.1.to_degrees(),
    );
    write_text(&sidecar_path(path), &text)
}

pub fn keypoints_csv(kps: &[Keypoint]) -> String {
    let mut s = String::from("u,v,level,response,x,y,z\n");
    for k in kps {
        let p = k.world.unwrap_or(Point3::new(f64::NAN, f64::NAN, f64::NAN));
        writeln!(
            s,
            "{},{},{},{},{},{},{}",
            k.u, k.v, k.level, k.response, p.x, p.y, p.z
        )
        .expect("writing to a String");
    }
    s
}

/// Descriptors as consecutive little-endian f32 records.
pub fn write_descriptors(path: &Path, descs: &[Descriptor]) -> Result<(), IoError> {
    write_atomic(path, |w| {
        for d in descs {
            for v in d.0 {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        Ok(())
    })
}

pub fn read_descriptors(path: &Path) -> Result<Vec<Vec<f32>>, IoError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let rec = 4 * crate::features::DESCRIPTOR_LEN;
    if bytes.len() % rec != 0 {
        return Err(parse_err(
            path,
            format!("byte {}", bytes.len() - bytes.len() % rec),
            "trailing partial record",
        ));
    }
    Ok(bytes
        .chunks_exact(rec)
        .map(|r| {
            r.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect()
        })
        .collect())
}

pub fn matches_csv(matches: &[Match], inlier_flags: &[bool]) -> String {
    let mut s = String::from("model_idx,data_idx,desc_dist,inlier\n");
    for (m, f) in matches.iter().zip(inlier_flags) {
        writeln!(
            s,
            "{},{},{},{}",
            m.model_index, m.data_index, m.distance, *f as u8
        )
        .expect("writing to a String");
    }
    s
}

pub fn ecdf_csv(points: &[(f64, f64)]) -> String {
    let mut s = String::from("threshold,proportion\n");
    for (t, p) in points {
        writeln!(s, "{t},{p}").expect("writing to a String");
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseRecord {
    pub id: String,
    pub pose: RigidTransform,
}

/// Pose lines `id tx ty tz qw qx qy qz`; `#` lines are comments.
pub fn parse_poses(path: &Path, text: &str) -> Result<Vec<PoseRecord>, IoError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let loc = || format!("line {}", i + 1);
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 8 {
            return Err(parse_err(path, loc(), "expected `id tx ty tz qw qx qy qz`"));
        }
        let mut v = [0.0; 7];
        for (k, s) in f[1..].iter().enumerate() {
            v[k] = s
                .parse()
                .map_err(|_| parse_err(path, loc(), format!("bad number {s:?}")))?;
        }
        let q: Quaternion<f64> = Quaternion::new(v[3], v[4], v[5], v[6]);
        let n = q.norm();
        if !((n - 1.0).abs() < 1e-3) {
            return Err(parse_err(
                path,
                loc(),
                format!("quaternion norm {n} is not 1"),
            ));
        }
        out.push(PoseRecord {
            id: f[0].to_string(),
            pose: RigidTransform::from_quaternion(
                UnitQuaternion::from_quaternion(q),
                Vector3::new(v[0], v[1], v[2]),
            ),
        });
    }
    Ok(out)
}

pub fn load_poses(path: &Path) -> Result<Vec<PoseRecord>, IoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_poses(path, &text)
}

pub fn poses_text(records: &[PoseRecord], header: &str) -> String {
    let mut s = String::new();
    for line in header.lines() {
        writeln!(s, "# {line}").expect("writing to a String");
    }
    for r in records {
        let t = r.pose.translation;
        let q = r.pose.quaternion();
        writeln!(
            s,
            "{} {} {} {} {} {} {} {}",
            r.id, t.x, t.y, t.z, q.w, q.i, q.j, q.k
        )
        .expect("writing to a String");
    }
    s
}
