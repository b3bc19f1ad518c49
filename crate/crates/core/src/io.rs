//! Readers and writers for the external file formats: packed float32 scans,
//! KITTI-style pose files, and headered binary matrices.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{PointCloud, RigidTransform, SequenceMeta};

const SCAN_RECORD_BYTES: usize = 16;

/// Loads a scan stored as packed little-endian float32 quadruples
/// (x, y, z, intensity) with no header.
pub fn load_scan(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % SCAN_RECORD_BYTES != 0 {
        return Err(Error::format(
            path,
            format!(
                "scan length {} is not a multiple of the {}-byte record",
                bytes.len(),
                SCAN_RECORD_BYTES
            ),
        ));
    }
    let n = bytes.len() / SCAN_RECORD_BYTES;
    let mut points = Vec::with_capacity(n);
    let mut intensity = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(SCAN_RECORD_BYTES) {
        let f = |o: usize| f32::from_le_bytes([rec[o], rec[o + 1], rec[o + 2], rec[o + 3]]);
        points.push(Vector3::new(f(0) as f64, f(4) as f64, f(8) as f64));
        intensity.push(f(12));
    }
    PointCloud::with_attributes(points, Some(intensity), None)
        .map_err(|e| Error::format(path, e.to_string()))
}

/// Writes a cloud in the canonical scan record format. Missing intensity is
/// written as 0.0. Coordinates are narrowed to f32.
pub fn write_scan(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::with_capacity(cloud.len() * SCAN_RECORD_BYTES);
    for (i, p) in cloud.points().iter().enumerate() {
        for c in [p.x as f32, p.y as f32, p.z as f32] {
            buf.extend_from_slice(&c.to_le_bytes());
        }
        let inten = cloud.intensity().map(|v| v[i]).unwrap_or(0.0);
        buf.extend_from_slice(&inten.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn parse_pose_tokens(path: &Path, line_no: usize, tokens: &[&str]) -> Result<RigidTransform> {
    if tokens.len() != 12 {
        return Err(Error::format(
            path,
            format!("pose line {} has {} values, expected 12", line_no, tokens.len()),
        ));
    }
    let mut vals = [0.0f64; 12];
    for (i, tok) in tokens.iter().enumerate() {
        vals[i] = tok.parse::<f64>().map_err(|_| {
            Error::format(path, format!("pose line {line_no}: bad number '{tok}'"))
        })?;
    }
    let rotation = Matrix3::new(
        vals[0], vals[1], vals[2], vals[4], vals[5], vals[6], vals[8], vals[9], vals[10],
    );
    let translation = Vector3::new(vals[3], vals[7], vals[11]);
    // Pose files carry limited precision; project back onto SO(3).
    RigidTransform::orthonormalized(rotation, translation)
        .map_err(|e| Error::format(path, format!("pose line {line_no}: {e}")))
}

/// Loads a KITTI-style pose file: one pose per line, 12 whitespace-separated
/// reals forming a row-major 3×4 `[R|t]`. When a sensor-to-reference extrinsic
/// is supplied each pose is right-multiplied so the result expresses the
/// sensor frame in the world frame: `P′ = P · calib`.
pub fn load_poses(
    path: impl AsRef<Path>,
    calib: Option<&RigidTransform>,
) -> Result<Vec<RigidTransform>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut poses = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        let pose = parse_pose_tokens(path, idx + 1, &tokens)?;
        poses.push(match calib {
            Some(c) => pose.compose(c),
            None => pose,
        });
    }
    Ok(poses)
}

/// Loads a calibration extrinsic: the first line holding 12 reals, with an
/// optional leading `Tr:`-style label (the KITTI calib.txt convention).
pub fn load_calib(path: impl AsRef<Path>) -> Result<RigidTransform> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    for (idx, line) in text.lines().enumerate() {
        let mut tokens: Vec<&str> = line.split_whitespace().collect();
        if let Some(first) = tokens.first() {
            if first.ends_with(':') {
                if *first != "Tr:" && tokens.len() == 13 {
                    continue; // projection matrices etc.
                }
                tokens.remove(0);
            }
        }
        if tokens.len() == 12 {
            return parse_pose_tokens(path, idx + 1, &tokens);
        }
    }
    Err(Error::format(path, "no 12-value calibration line found"))
}

/// Discovers a sequence directory: every `*.bin` scan (sorted by file name)
/// and the matching `poses.txt`.
pub fn load_sequence(dir: impl AsRef<Path>, calib: Option<&RigidTransform>) -> Result<SequenceMeta> {
    let dir = dir.as_ref();
    let mut scans: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "bin"))
        .collect();
    scans.sort();
    if scans.is_empty() {
        return Err(Error::format(dir, "no .bin scans found"));
    }
    let poses = load_poses(dir.join("poses.txt"), calib)?;
    SequenceMeta::new(scans, poses)
}

/// Writes a row-major float32 matrix with a two-u32 little-endian header
/// (rows, cols). Shared export format for descriptors, plans and weights.
pub fn write_matrix_f32(
    path: impl AsRef<Path>,
    rows: usize,
    cols: usize,
    values: impl IntoIterator<Item = f64>,
) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::with_capacity(8 + rows * cols * 4);
    buf.extend_from_slice(&(rows as u32).to_le_bytes());
    buf.extend_from_slice(&(cols as u32).to_le_bytes());
    let mut count = 0usize;
    for v in values {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
        count += 1;
    }
    if count != rows * cols {
        return Err(Error::invalid(
            "matrix export",
            format!("value count {} does not match {rows}x{cols}", count),
        ));
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Reads the format written by [`write_matrix_f32`].
pub fn read_matrix_f32(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<f32>)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 {
        return Err(Error::format(path, "matrix file shorter than header"));
    }
    let rows = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let expected = 8 + rows * cols * 4;
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            format!("matrix payload is {} bytes, expected {}", bytes.len(), expected),
        ));
    }
    let vals = bytes[8..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((rows, cols, vals))
}

/// Writes CSV content atomically enough for our purposes (single write call).
pub fn write_text(path: impl AsRef<Path>, content: &str) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(content.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn single_record_scan() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.bin");
        let mut bytes = Vec::new();
        for v in [1.0f32, 2.0, 3.0, 0.5] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(&path, bytes).unwrap();
        let cloud = load_scan(&path).unwrap();
        assert_eq!(cloud.len(), 1);
        assert_eq!(cloud.points()[0], Vector3::new(1.0, 2.0, 3.0));
        assert_eq!(cloud.intensity().unwrap()[0], 0.5);
    }

    #[test]
    fn empty_scan_file_gives_empty_cloud() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.bin");
        fs::write(&path, b"").unwrap();
        let cloud = load_scan(&path).unwrap();
        assert!(cloud.is_empty());
    }

    #[test]
    fn seventeen_byte_scan_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        fs::write(&path, vec![0u8; 17]).unwrap();
        assert!(matches!(load_scan(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn missing_scan_is_an_io_error() {
        assert!(matches!(
            load_scan("/nonexistent/file.bin"),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn scan_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rt.bin");
        let cloud = PointCloud::with_attributes(
            vec![
                Vector3::new(1.25, -3.5, 0.125),
                Vector3::new(100.0, 0.0, -42.0),
            ],
            Some(vec![0.25, 0.75]),
            None,
        )
        .unwrap();
        write_scan(&path, &cloud).unwrap();
        let back = load_scan(&path).unwrap();
        assert_eq!(back, cloud);
        // Second write of the reloaded cloud reproduces the same bytes.
        let path2 = dir.path().join("rt2.bin");
        write_scan(&path2, &back).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn pose_lines_parse_identity_and_translation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("poses.txt");
        fs::write(
            &path,
            "1 0 0 0 0 1 0 0 0 0 1 0\n1 0 0 0 0 1 0 0 0 0 1 5\n",
        )
        .unwrap();
        let poses = load_poses(&path, None).unwrap();
        assert_eq!(poses.len(), 2);
        assert_relative_eq!(poses[0].rotation(), &Matrix3::identity(), epsilon = 1e-12);
        assert_relative_eq!(
            *poses[1].translation(),
            Vector3::new(0.0, 0.0, 5.0),
            epsilon = 1e-12
        );
    }

    #[test]
    fn pose_line_with_wrong_token_count_fails() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("poses.txt");
        fs::write(&path, "1 0 0 0 0 1 0 0 0 0 1\n").unwrap();
        assert!(matches!(load_poses(&path, None), Err(Error::Format { .. })));
    }

    #[test]
    fn calib_right_multiplication_matches_hand_product() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("poses.txt");
        // Pose: yaw 90° about z with translation (1, 2, 3).
        fs::write(
            &path,
            "0 -1 0 1 1 0 0 2 0 0 1 3\n1 0 0 0 0 1 0 0 0 0 1 0\n",
        )
        .unwrap();
        let calib =
            RigidTransform::new(Matrix3::identity(), Vector3::new(0.5, 0.0, -1.0)).unwrap();
        let poses = load_poses(&path, Some(&calib)).unwrap();
        // P·calib: rotation unchanged, translation = R·t_c + t.
        // R = yaw90 ⇒ R·(0.5,0,-1) = (0,0.5,-1); plus (1,2,3) = (1,2.5,2).
        assert_relative_eq!(
            *poses[0].translation(),
            Vector3::new(1.0, 2.5, 2.0),
            epsilon = 1e-12
        );
        assert_relative_eq!(
            *poses[1].translation(),
            Vector3::new(0.5, 0.0, -1.0),
            epsilon = 1e-12
        );
    }

    #[test]
    fn calib_file_with_label_parses() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("calib.txt");
        fs::write(
            &path,
            "P0: 1 0 0 0 0 1 0 0 0 0 1 0 0\nTr: 1 0 0 0.27 0 1 0 0 0 0 1 -0.08\n",
        )
        .unwrap();
        let calib = load_calib(&path).unwrap();
        assert_relative_eq!(
            *calib.translation(),
            Vector3::new(0.27, 0.0, -0.08),
            epsilon = 1e-12
        );
    }

    #[test]
    fn matrix_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.f32");
        write_matrix_f32(&path, 2, 3, [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let (r, c, v) = read_matrix_f32(&path).unwrap();
        assert_eq!((r, c), (2, 3));
        assert_eq!(v, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }
}
