//! Image files, pair manifests and report sinks.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use letflow::{Homography, Keypoint, Tensor};

use crate::error::CliError;

/// Decodes an 8-bit PNG, PGM or PPM into RGB values in `[0, 1]`. Gray images
/// are replicated to three channels.
pub fn load_image(path: &Path) -> Result<Tensor, CliError> {
    let err = |reason: String| CliError::Image {
        path: path.to_path_buf(),
        reason,
    };
    let decoded = image::ImageReader::open(path)
        .map_err(|e| err(e.to_string()))?
        .with_guessed_format()
        .map_err(|e| err(e.to_string()))?
        .decode()
        .map_err(|e| err(e.to_string()))?;
    let rgb = decoded.to_rgb8();
    let (w, h) = rgb.dimensions();
    let data = rgb.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    Tensor::from_vec(h as usize, w as usize, 3, data).map_err(|e| err(e.to_string()))
}

/// Writes an RGB tensor as an 8-bit image; the format follows the extension.
pub fn save_image(path: &Path, image: &Tensor) -> Result<(), CliError> {
    let bytes: Vec<u8> = image
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let buf = image::RgbImage::from_raw(image.width() as u32, image.height() as u32, bytes)
        .ok_or_else(|| CliError::Internal("image buffer size mismatch".into()))?;
    buf.save(path).map_err(|e| CliError::Write {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub line: usize,
    pub image_a: PathBuf,
    pub image_b: PathBuf,
    pub homography: Homography,
}

/// Parses `pathA pathB h00 … h22` lines. Blank lines and `#` comments are
/// skipped; relative paths resolve against `base`.
pub fn parse_manifest(text: &str, path: &Path, base: &Path) -> Result<Vec<ManifestEntry>, CliError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |reason: String| CliError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            reason,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 11 {
            return Err(bad(format!("expected 11 fields, found {}", fields.len())));
        }
        let mut h = [0.0f64; 9];
        for (k, f) in fields[2..].iter().enumerate() {
            h[k] = f
                .parse()
                .ok()
                .filter(|v: &f64| v.is_finite())
                .ok_or_else(|| bad(format!("homography entry {} is not a number: {f:?}", k + 1)))?;
        }
        let homography = Homography::from_row_major(h);
        if !homography.is_invertible() {
            return Err(bad("homography is singular".into()));
        }
        out.push(ManifestEntry {
            line: i + 1,
            image_a: base.join(fields[0]),
            image_b: base.join(fields[1]),
            homography,
        });
    }
    if out.is_empty() {
        return Err(CliError::Parse {
            path: path.to_path_buf(),
            line: 0,
            reason: "no pairs listed".into(),
        });
    }
    Ok(out)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>, CliError> {
    let text = fs::read_to_string(path).map_err(|source| CliError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    parse_manifest(&text, path, path.parent().unwrap_or(Path::new(".")))
}

#[derive(Debug, serde::Deserialize)]
struct PointRow {
    x: f32,
    y: f32,
    #[serde(default)]
    score: f32,
}

/// Reads a CSV with an `x,y` header (and optionally `score`), as written by
/// the `detect` command.
pub fn read_points(path: &Path) -> Result<Vec<Keypoint>, CliError> {
    let file = fs::File::open(path).map_err(|source| CliError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    let mut reader = csv::Reader::from_reader(file);
    let mut out = Vec::new();
    for (i, row) in reader.deserialize::<PointRow>().enumerate() {
        let row = row.map_err(|e| CliError::Parse {
            path: path.to_path_buf(),
            line: i + 2,
            reason: e.to_string(),
        })?;
        if !(row.x.is_finite() && row.y.is_finite()) {
            return Err(CliError::Parse {
                path: path.to_path_buf(),
                line: i + 2,
                reason: "coordinates must be finite".into(),
            });
        }
        out.push(Keypoint::new(row.x, row.y, row.score));
    }
    Ok(out)
}

/// Image files in `dir` ordered by the number in their stem.
pub fn list_frames(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let bad = |reason: String| CliError::Sequence {
        path: dir.to_path_buf(),
        reason,
    };
    let mut frames = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| bad(e.to_string()))? {
        let path = entry.map_err(|e| bad(e.to_string()))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if !matches!(ext.as_deref(), Some("png" | "pgm" | "ppm" | "pnm")) {
            continue;
        }
        let digits: String = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("")
            .chars()
            .filter(char::is_ascii_digit)
            .collect();
        let Ok(index) = digits.parse::<u64>() else {
            continue;
        };
        frames.push((index, path));
    }
    frames.sort();
    if frames.len() < 2 {
        return Err(bad(format!("need at least 2 numbered frames, found {}", frames.len())));
    }
    Ok(frames.into_iter().map(|(_, p)| p).collect())
}

/// Sends the finished report to `path` or stdout.
pub fn emit(output: Option<&Path>, body: &[u8]) -> Result<(), CliError> {
    match output {
        Some(path) => fs::write(path, body).map_err(|e| CliError::Write {
            path: path.to_path_buf(),
            reason: e.to_string(),
        }),
        None => {
            let mut out = std::io::stdout().lock();
            match out.write_all(body).and_then(|_| out.flush()) {
                Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(CliError::Write {
                    path: PathBuf::from("<stdout>"),
                    reason: e.to_string(),
                }),
                _ => Ok(()),
            }
        }
    }
}
