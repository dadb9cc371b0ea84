//! Image file I/O: binary PPM (P6, 8-bit) and PNG, float tensors in [0, 1].
//! All artifact writes go through a temp-file-plus-rename so interrupted
//! runs never leave partial files under final names.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Write bytes atomically: temp file in the same directory, then rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile_path(dir, path);
    let mut n = 0;
    while tmp.exists() {
        n += 1;
        tmp = dir.join(format!(
            ".{}.tmp{n}",
            path.file_name().and_then(|s| s.to_str()).unwrap_or("artifact")
        ));
    }
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn tempfile_path(dir: &Path, path: &Path) -> std::path::PathBuf {
    dir.join(format!(
        ".{}.tmp",
        path.file_name().and_then(|s| s.to_str()).unwrap_or("artifact")
    ))
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn encode_ppm(img: &Tensor) -> Result<Vec<u8>> {
    let (h, w, c) = img.dims3()?;
    if c != 3 {
        return Err(Error::ImageFormat(format!("PPM needs 3 channels, got {c}")));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(h * w * 3);
    for &v in img.data() {
        out.push(to_u8(v));
    }
    Ok(out)
}

fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    // Header: "P6", whitespace/comments, width, height, maxval, one ws byte.
    let mut pos = 0;
    let mut token = |bytes: &[u8]| -> Result<String> {
        while pos < bytes.len() {
            match bytes[pos] {
                b'#' => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                b' ' | b'\t' | b'\r' | b'\n' => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::ImageFormat("truncated PPM header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token(bytes)? != "P6" {
        return Err(Error::ImageFormat("not a P6 PPM".into()));
    }
    let w: usize = token(bytes)?.parse().map_err(|_| Error::ImageFormat("bad PPM width".into()))?;
    let h: usize = token(bytes)?.parse().map_err(|_| Error::ImageFormat("bad PPM height".into()))?;
    let maxval: usize = token(bytes)?.parse().map_err(|_| Error::ImageFormat("bad PPM maxval".into()))?;
    if maxval != 255 {
        return Err(Error::ImageFormat(format!("unsupported PPM maxval {maxval}")));
    }
    pos += 1; // single whitespace after maxval
    let need = h * w * 3;
    if bytes.len() < pos + need {
        return Err(Error::ImageFormat("truncated PPM payload".into()));
    }
    let data = bytes[pos..pos + need].iter().map(|&b| b as f32 / 255.0).collect();
    Tensor::from_vec(vec![h, w, 3], data)
}

fn encode_png(img: &Tensor) -> Result<Vec<u8>> {
    let (h, w, c) = img.dims3()?;
    if c != 3 {
        return Err(Error::ImageFormat(format!("PNG writer needs 3 channels, got {c}")));
    }
    let raw: Vec<u8> = img.data().iter().map(|&v| to_u8(v)).collect();
    let buf = image::RgbImage::from_raw(w as u32, h as u32, raw)
        .ok_or_else(|| Error::ImageFormat("PNG buffer size mismatch".into()))?;
    let mut out = std::io::Cursor::new(Vec::new());
    buf.write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| Error::ImageFormat(format!("PNG encode: {e}")))?;
    Ok(out.into_inner())
}

fn decode_png(bytes: &[u8]) -> Result<Tensor> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| Error::ImageFormat(format!("PNG decode: {e}")))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.into_raw().into_iter().map(|b| b as f32 / 255.0).collect();
    Tensor::from_vec(vec![h, w, 3], data)
}

/// Write an (h, w, 3) tensor as PPM or PNG depending on the file extension.
pub fn write_image(path: &Path, img: &Tensor) -> Result<()> {
    let bytes = match extension(path)?.as_str() {
        "ppm" => encode_ppm(img)?,
        "png" => encode_png(img)?,
        other => {
            return Err(Error::ImageFormat(format!(
                "unsupported image extension .{other} (use .ppm or .png)"
            )))
        }
    };
    atomic_write(path, &bytes)
}

/// Read a PPM or PNG image into an (h, w, 3) tensor in [0, 1].
pub fn read_image(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    match extension(path)?.as_str() {
        "ppm" => decode_ppm(&bytes),
        "png" => decode_png(&bytes),
        other => Err(Error::ImageFormat(format!(
            "unsupported image extension .{other} (use .ppm or .png)"
        ))),
    }
}

fn extension(path: &Path) -> Result<String> {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .ok_or_else(|| Error::ImageFormat(format!("no file extension on {}", path.display())))
}

/// Newline-delimited path list.
pub fn read_manifest(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path)?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_owned)
        .collect())
}

pub fn write_manifest(path: &Path, entries: &[String]) -> Result<()> {
    let mut text = entries.join("\n");
    text.push('\n');
    atomic_write(path, text.as_bytes())
}
