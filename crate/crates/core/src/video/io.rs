//! Raw `f32` video files with a key=value sidecar, and binary PPM output.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::RawVideo;
use crate::error::{Error, Result};

/// Sidecar path: the video path with its extension replaced by `manifest`.
pub fn manifest_path(path: &Path) -> PathBuf {
    path.with_extension("manifest")
}

fn parse_manifest(text: &str, path: &Path) -> Result<[usize; 4]> {
    let mut dims = [None; 4];
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::config(format!("{}:{}: expected key=value", path.display(), lineno + 1))
        })?;
        let slot = match key.trim() {
            "channels" => 0,
            "frames" => 1,
            "height" => 2,
            "width" => 3,
            other => {
                return Err(Error::config(format!(
                    "{}: unknown manifest key `{other}`",
                    path.display()
                )))
            }
        };
        let v: usize = value.trim().parse().map_err(|_| {
            Error::config(format!("{}: `{key}` is not a count", path.display()))
        })?;
        dims[slot] = Some(v);
    }
    let names = ["channels", "frames", "height", "width"];
    let mut out = [0; 4];
    for i in 0..4 {
        out[i] = dims[i].ok_or_else(|| {
            Error::config(format!("{}: missing `{}`", path.display(), names[i]))
        })?;
    }
    Ok(out)
}

/// Reads headerless little-endian `f32` samples in `(C, T, H, W)` order.
pub fn read_raw_video(path: &Path) -> Result<RawVideo> {
    let mpath = manifest_path(path);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let [c, t, h, w] = parse_manifest(&text, &mpath)?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != c * t * h * w * 4 {
        return Err(Error::dim(format!(
            "{}: {} bytes, manifest says {c}x{t}x{h}x{w} f32",
            path.display(),
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    RawVideo::new(c, t, h, w, data)
}

pub fn write_raw_video(path: &Path, video: &RawVideo) -> Result<()> {
    let mut bytes = Vec::with_capacity(video.data.len() * 4);
    for v in &video.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let manifest = format!(
        "channels={}\nframes={}\nheight={}\nwidth={}\n",
        video.channels, video.frames, video.height, video.width
    );
    let mpath = manifest_path(path);
    fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))
}

/// Binary (P6) PPM from a planar `3×H×W` buffer in `[0, 1]`.
pub fn write_ppm(path: &Path, height: usize, width: usize, planes: &[f32]) -> Result<()> {
    assert_eq!(planes.len(), 3 * height * width);
    let plane = height * width;
    let mut out = Vec::with_capacity(20 + 3 * plane);
    write!(out, "P6\n{width} {height}\n255\n").unwrap();
    for i in 0..plane {
        for c in 0..3 {
            let v = planes[c * plane + i].clamp(0.0, 1.0);
            out.push((v * 255.0).round() as u8);
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raw_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clip.f32");
        let data: Vec<f32> = (0..3 * 4 * 2 * 5).map(|i| i as f32 * 0.01).collect();
        let v = RawVideo::new(3, 4, 2, 5, data).unwrap();
        write_raw_video(&path, &v).unwrap();
        assert_eq!(
            fs::read_to_string(dir.path().join("clip.manifest")).unwrap(),
            "channels=3\nframes=4\nheight=2\nwidth=5\n"
        );
        assert_eq!(read_raw_video(&path).unwrap(), v);
    }

    #[test]
    fn size_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clip.f32");
        fs::write(&path, [0u8; 12]).unwrap();
        fs::write(manifest_path(&path), "channels=1\nframes=2\nheight=2\nwidth=1\n").unwrap();
        assert!(read_raw_video(&path).is_err());
        fs::write(manifest_path(&path), "channels=1\nframes=2\n").unwrap();
        let err = read_raw_video(&path).unwrap_err().to_string();
        assert!(err.contains("height"), "{err}");
    }

    #[test]
    fn ppm_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ppm");
        write_ppm(&path, 1, 2, &[1.0, 0.0, 0.5, 0.5, 0.0, 1.0]).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P6\n2 1\n255\n"));
        assert_eq!(&bytes[11..], &[255, 128, 0, 0, 128, 255]);
    }
}
