//! Sample directories on disk.
//!
//! ```text
//! <root>/manifest.txt                 key=value lines
//! <root>/<split>/<map_id>/buildings.<ext>
//! <root>/<split>/<map_id>/vehicles.<ext>      dynamic maps only
//! <root>/<split>/<map_id>/tx_<k>.<ext>
//! <root>/<split>/<map_id>/gain_<k>.<ext>
//! ```
//!
//! `<ext>` is `png` (8-bit grayscale) or `f32grid`: magic `F32G`, u32 rows,
//! u32 cols, then row-major little-endian f32 values.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::sample::{EnvironmentSample, Mode};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.txt";
const F32GRID_MAGIC: &[u8; 4] = b"F32G";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageFormat {
    #[default]
    Png,
    F32Grid,
}

impl ImageFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ImageFormat::Png => "png",
            ImageFormat::F32Grid => "f32grid",
        }
    }
}

impl FromStr for ImageFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "png" => Ok(ImageFormat::Png),
            "f32grid" => Ok(ImageFormat::F32Grid),
            _ => Err(Error::Config(format!(
                "unknown image format '{s}' (png|f32grid)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!(
                "unknown split '{s}' (train|val|test)"
            ))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Dataset description stored at the dataset root.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub mode: Mode,
    pub grid: usize,
    pub format: ImageFormat,
    /// Sample counts per split.
    pub counts: BTreeMap<Split, usize>,
    /// Extra keys, kept for provenance (e.g. the generator seed).
    pub extra: BTreeMap<String, String>,
}

impl DatasetManifest {
    pub fn count(&self, split: Split) -> usize {
        self.counts.get(&split).copied().unwrap_or(0)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "mode={}\ngrid={}\nformat={}\n",
            self.mode,
            self.grid,
            self.format.extension()
        );
        for split in Split::ALL {
            s += &format!("{}={}\n", split, self.count(split));
        }
        for (k, v) in &self.extra {
            s += &format!("{k}={v}\n");
        }
        s
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let bad = |d: String| Error::data(path, d);
        let mut kv = BTreeMap::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("line {} is not key=value", no + 1)))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let mut take = |k: &str| {
            kv.remove(k)
                .ok_or_else(|| bad(format!("missing key '{k}'")))
        };
        let mode = take("mode")?.parse()?;
        let grid = take("grid")?
            .parse()
            .map_err(|_| bad("grid is not an integer".into()))?;
        let format = take("format")?.parse()?;
        let mut counts = BTreeMap::new();
        for split in Split::ALL {
            let n = match kv.remove(split.as_str()) {
                Some(v) => v
                    .parse()
                    .map_err(|_| bad(format!("{split} count is not an integer")))?,
                None => 0,
            };
            counts.insert(split, n);
        }
        Ok(DatasetManifest {
            mode,
            grid,
            format,
            counts,
            extra: kv,
        })
    }

    pub fn read(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::data(&path, e.to_string()))?;
        Self::parse(&text, &path)
    }

    pub fn write(&self, root: &Path) -> Result<()> {
        fs::create_dir_all(root)?;
        fs::write(root.join(MANIFEST_FILE), self.to_text())?;
        Ok(())
    }
}

/// A single-channel image as `(rows, cols, values)`.
pub type Plane<T> = (usize, usize, Vec<T>);

pub fn read_png_gray8(path: &Path) -> Result<Plane<u8>> {
    let fail = |d: String| Error::data(path, d);
    let file = File::open(path).map_err(|e| fail(e.to_string()))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| fail(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| fail("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| fail(e.to_string()))?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
        return Err(fail(format!(
            "expected 8-bit grayscale, got {:?} {:?}",
            info.color_type, info.bit_depth
        )));
    }
    let (rows, cols) = (info.height as usize, info.width as usize);
    buf.truncate(info.line_size * rows);
    let data = buf
        .chunks(info.line_size)
        .flat_map(|line| line[..cols].iter().copied())
        .collect();
    Ok((rows, cols, data))
}

pub fn write_png_gray8(path: &Path, rows: usize, cols: usize, data: &[u8]) -> Result<()> {
    let fail = |d: String| Error::data(path, d);
    if data.len() != rows * cols {
        return Err(fail(format!("{} pixels for {rows}x{cols}", data.len())));
    }
    let file = File::create(path)?;
    let mut enc = png::Encoder::new(BufWriter::new(file), cols as u32, rows as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| fail(e.to_string()))?;
    writer
        .write_image_data(data)
        .map_err(|e| fail(e.to_string()))?;
    writer.finish().map_err(|e| fail(e.to_string()))?;
    Ok(())
}

pub fn read_f32grid(path: &Path) -> Result<Plane<f32>> {
    let fail = |d: String| Error::data(path, d);
    let mut bytes = Vec::new();
    File::open(path)
        .map_err(|e| fail(e.to_string()))?
        .read_to_end(&mut bytes)?;
    if bytes.len() < 12 || &bytes[..4] != F32GRID_MAGIC {
        return Err(fail("missing F32G header".into()));
    }
    let word = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
    let (rows, cols) = (word(4), word(8));
    let body = &bytes[12..];
    if body.len() != rows * cols * 4 {
        return Err(fail(format!(
            "{} payload bytes for {rows}x{cols}",
            body.len()
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok((rows, cols, data))
}

pub fn write_f32grid(path: &Path, rows: usize, cols: usize, data: &[f32]) -> Result<()> {
    if data.len() != rows * cols {
        return Err(Error::data(
            path,
            format!("{} values for {rows}x{cols}", data.len()),
        ));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(F32GRID_MAGIC)?;
    w.write_all(&(rows as u32).to_le_bytes())?;
    w.write_all(&(cols as u32).to_le_bytes())?;
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Copy, PartialEq)]
enum Channel {
    Binary,
    Gain,
}

fn read_plane(path: &Path, format: ImageFormat, channel: Channel, grid: usize) -> Result<Vec<f32>> {
    let (rows, cols, data) = match format {
        ImageFormat::Png => {
            let (r, c, px) = read_png_gray8(path)?;
            let v = match channel {
                Channel::Binary => px
                    .iter()
                    .map(|&b| if b >= 128 { 1.0 } else { 0.0 })
                    .collect(),
                Channel::Gain => px.iter().map(|&b| b as f32 / 255.0).collect(),
            };
            (r, c, v)
        }
        ImageFormat::F32Grid => {
            let (r, c, v) = read_f32grid(path)?;
            let v = match channel {
                Channel::Binary => v
                    .into_iter()
                    .map(|x| if x >= 0.5 { 1.0 } else { 0.0 })
                    .collect(),
                Channel::Gain => v,
            };
            (r, c, v)
        }
    };
    if rows != grid || cols != grid {
        return Err(Error::data(
            path,
            format!("image is {rows}x{cols}, expected {grid}x{grid}"),
        ));
    }
    Ok(data)
}

fn write_plane(
    path: &Path,
    format: ImageFormat,
    channel: Channel,
    grid: usize,
    v: &[f32],
) -> Result<()> {
    match format {
        ImageFormat::Png => {
            let px: Vec<u8> = match channel {
                Channel::Binary => v.iter().map(|&x| if x >= 0.5 { 255 } else { 0 }).collect(),
                Channel::Gain => v
                    .iter()
                    .map(|&x| (x.clamp(0.0, 1.0) * 255.0).round() as u8)
                    .collect(),
            };
            write_png_gray8(path, grid, grid, &px)
        }
        ImageFormat::F32Grid => write_f32grid(path, grid, grid, v),
    }
}

/// Writes all transmitter placements of one map. They must share obstacles.
pub fn save_map(dir: &Path, samples: &[EnvironmentSample], format: ImageFormat) -> Result<()> {
    let Some(first) = samples.first() else {
        return Ok(());
    };
    if samples
        .iter()
        .any(|s| s.h_s != first.h_s || s.h_d != first.h_d || s.grid != first.grid)
    {
        return Err(Error::data(
            dir,
            "samples of one map must share their obstacles",
        ));
    }
    fs::create_dir_all(dir)?;
    let ext = format.extension();
    let g = first.grid;
    write_plane(
        &dir.join(format!("buildings.{ext}")),
        format,
        Channel::Binary,
        g,
        &first.h_s,
    )?;
    if first.mode == Mode::Drm {
        write_plane(
            &dir.join(format!("vehicles.{ext}")),
            format,
            Channel::Binary,
            g,
            &first.h_d,
        )?;
    }
    for (k, s) in samples.iter().enumerate() {
        write_plane(
            &dir.join(format!("tx_{k}.{ext}")),
            format,
            Channel::Binary,
            g,
            &s.r,
        )?;
        write_plane(
            &dir.join(format!("gain_{k}.{ext}")),
            format,
            Channel::Gain,
            g,
            &s.p,
        )?;
    }
    Ok(())
}

/// Reads every transmitter placement of one map directory, in `k` order.
pub fn load_map(
    dir: &Path,
    mode: Mode,
    grid: usize,
    format: ImageFormat,
) -> Result<Vec<EnvironmentSample>> {
    read_map(dir, mode, grid, format, true)
}

/// Like [`load_map`] but gain files are optional; missing gains read as zero.
pub fn load_map_inputs(
    dir: &Path,
    mode: Mode,
    grid: usize,
    format: ImageFormat,
) -> Result<Vec<EnvironmentSample>> {
    read_map(dir, mode, grid, format, false)
}

/// Format of the map directory `dir`, judged by its buildings file.
pub fn detect_format(dir: &Path) -> Result<ImageFormat> {
    [ImageFormat::Png, ImageFormat::F32Grid]
        .into_iter()
        .find(|f| dir.join(format!("buildings.{}", f.extension())).is_file())
        .ok_or_else(|| Error::data(dir, "no buildings.png or buildings.f32grid"))
}

fn read_map(
    dir: &Path,
    mode: Mode,
    grid: usize,
    format: ImageFormat,
    need_gain: bool,
) -> Result<Vec<EnvironmentSample>> {
    let ext = format.extension();
    let h_s = read_plane(
        &dir.join(format!("buildings.{ext}")),
        format,
        Channel::Binary,
        grid,
    )?;
    let h_d = match mode {
        Mode::Drm => read_plane(
            &dir.join(format!("vehicles.{ext}")),
            format,
            Channel::Binary,
            grid,
        )?,
        Mode::Srm => vec![0.0; grid * grid],
    };
    let mut ks = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::data(dir, e.to_string()))? {
        let name = entry?.file_name().to_string_lossy().into_owned();
        if let Some(k) = name
            .strip_prefix("tx_")
            .and_then(|r| r.strip_suffix(&format!(".{ext}")))
        {
            ks.push(
                k.parse::<usize>()
                    .map_err(|_| Error::data(dir.join(&name), "bad transmitter index"))?,
            );
        }
    }
    ks.sort_unstable();
    if ks.is_empty() {
        return Err(Error::data(dir, format!("no tx_<k>.{ext} files")));
    }
    let mut out = Vec::new();
    for k in ks {
        let tx_path = dir.join(format!("tx_{k}.{ext}"));
        let r = read_plane(&tx_path, format, Channel::Binary, grid)?;
        let gain = dir.join(format!("gain_{k}.{ext}"));
        let p = if need_gain || gain.exists() {
            read_plane(&gain, format, Channel::Gain, grid)?
        } else {
            vec![0.0; grid * grid]
        };
        let s = EnvironmentSample {
            grid,
            mode,
            h_s: h_s.clone(),
            h_d: h_d.clone(),
            r,
            p,
        };
        s.check().map_err(|d| Error::data(&tx_path, d))?;
        out.push(s);
    }
    Ok(out)
}

pub fn split_dir(root: &Path, split: Split) -> PathBuf {
    root.join(split.as_str())
}

/// All samples of one split, maps in name order.
pub fn load_dataset(
    root: &Path,
    split: Split,
) -> Result<(DatasetManifest, Vec<EnvironmentSample>)> {
    let manifest = DatasetManifest::read(root)?;
    let dir = split_dir(root, split);
    let mut maps = Vec::new();
    if manifest.count(split) > 0 {
        for entry in fs::read_dir(&dir).map_err(|e| Error::data(&dir, e.to_string()))? {
            let entry = entry?;
            if entry.file_type()?.is_dir() {
                maps.push(entry.path());
            }
        }
    }
    maps.sort();
    let mut samples = Vec::new();
    for m in maps {
        samples.extend(load_map(&m, manifest.mode, manifest.grid, manifest.format)?);
    }
    if samples.len() != manifest.count(split) {
        return Err(Error::data(
            &dir,
            format!(
                "found {} samples, manifest declares {}",
                samples.len(),
                manifest.count(split)
            ),
        ));
    }
    Ok((manifest, samples))
}
