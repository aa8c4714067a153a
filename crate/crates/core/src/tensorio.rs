//! Raster types and their on-disk containers.
//!
//! Every binary container shares one header layout: four magic bytes, a
//! little-endian `u32` version (currently 1), a container-specific list of
//! little-endian `u32` dimensions, then the payload. Feature tensors and
//! score maps use `MSRF`, label rasters use `MSRL`. Images are binary PPM
//! (`P6`, maxval 255).

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{dim_mismatch, invalid, Error, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const FEATURE_MAGIC: &[u8; 4] = b"MSRF";
pub const LABEL_MAGIC: &[u8; 4] = b"MSRL";

/// Reserved label value for pixels without a class.
pub const NODATA: u8 = 255;

/// Colour used for [`NODATA`] pixels in colour-mapped output.
pub const NODATA_COLOR: [u8; 3] = [255, 0, 255];

/// Patch-grid provenance of a feature map produced by a patch tokenizer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridMeta {
    pub patch: usize,
    pub grid_height: usize,
    pub grid_width: usize,
}

/// Dense `D×H×W` embedding raster in channel-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
    pub grid: Option<GridMeta>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        check_dims(&[channels, height, width])?;
        if data.len() != channels * height * width {
            return Err(dim_mismatch(format!(
                "feature payload has {} values, expected {}×{}×{}",
                data.len(),
                channels,
                height,
                width
            )));
        }
        check_finite(&data)?;
        Ok(Self {
            channels,
            height,
            width,
            data,
            grid: None,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        assert!(
            channels > 0 && height > 0 && width > 0,
            "feature map dims must be positive"
        );
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
            grid: None,
        }
    }

    /// Builds a map from pixel-major rows (`N×D`, `N = H·W`).
    pub fn from_pixel_major(
        channels: usize,
        height: usize,
        width: usize,
        rows: &[f32],
    ) -> Result<Self> {
        let n = height * width;
        if rows.len() != n * channels {
            return Err(dim_mismatch("pixel-major buffer length"));
        }
        let mut data = vec![0.0; rows.len()];
        for (i, row) in rows.chunks_exact(channels).enumerate() {
            for (d, &x) in row.iter().enumerate() {
                data[d * n + i] = x;
            }
        }
        Self::new(channels, height, width, data)
    }

    pub fn with_grid(mut self, grid: GridMeta) -> Self {
        self.grid = Some(grid);
        self
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, d: usize, u: usize, v: usize) -> usize {
        d * self.height * self.width + u * self.width + v
    }

    #[inline]
    pub fn get(&self, d: usize, u: usize, v: usize) -> f32 {
        self.data[self.index(d, u, v)]
    }

    /// Copies the feature vector of flat pixel `idx` into `out`.
    pub fn pixel_into(&self, idx: usize, out: &mut [f32]) {
        let n = self.pixels();
        for (d, o) in out.iter_mut().enumerate().take(self.channels) {
            *o = self.data[d * n + idx];
        }
    }

    /// Transposes to pixel-major rows (`N×D`).
    pub fn to_pixel_major(&self) -> Vec<f32> {
        let n = self.pixels();
        let dim = self.channels;
        let mut out = vec![0.0; n * dim];
        for d in 0..dim {
            let plane = &self.data[d * n..(d + 1) * n];
            for (i, &x) in plane.iter().enumerate() {
                out[i * dim + d] = x;
            }
        }
        out
    }

    /// Multiplies every value by `factor`.
    pub fn scaled(&self, factor: f32) -> Self {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|x| *x *= factor);
        out
    }
}

/// `H×W` raster of class indices over `0..classes`, with [`NODATA`] reserved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    classes: usize,
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(classes: usize, height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        check_dims(&[height, width])?;
        if classes == 0 || classes > NODATA as usize {
            return Err(invalid(format!("class count {classes} outside 1..=255")));
        }
        if data.len() != height * width {
            return Err(dim_mismatch(format!(
                "label payload has {} values, expected {}×{}",
                data.len(),
                height,
                width
            )));
        }
        if let Some(&value) = data.iter().find(|&&x| x != NODATA && x as usize >= classes) {
            return Err(Error::ClassOutOfRange { value, classes });
        }
        Ok(Self {
            classes,
            height,
            width,
            data,
        })
    }

    pub fn filled(classes: usize, height: usize, width: usize, value: u8) -> Result<Self> {
        Self::new(classes, height, width, vec![value; height * width])
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> u8 {
        self.data[u * self.width + v]
    }

    pub fn same_shape(&self, other: &LabelMap) -> bool {
        self.height == other.height && self.width == other.width
    }
}

/// RGB image with channels in `[0, 1]`, channel-major `3×H×W`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRaster {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageRaster {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        check_dims(&[height, width])?;
        if data.len() != 3 * height * width {
            return Err(dim_mismatch("image payload length"));
        }
        if let Some(i) = data.iter().position(|x| !(0.0..=1.0).contains(x)) {
            return Err(invalid(format!(
                "image value {} at {} outside [0,1]",
                data[i], i
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, c: usize, u: usize, v: usize) -> f32 {
        self.data[c * self.height * self.width + u * self.width + v]
    }

    #[inline]
    pub fn rgb(&self, u: usize, v: usize) -> [f32; 3] {
        let n = self.pixels();
        let i = u * self.width + v;
        [self.data[i], self.data[n + i], self.data[2 * n + i]]
    }
}

/// Per-class score planes `C×H×W`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMap {
    classes: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ScoreMap {
    pub fn new(classes: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        check_dims(&[classes, height, width])?;
        if classes < 2 {
            return Err(invalid("score map needs at least two classes"));
        }
        if data.len() != classes * height * width {
            return Err(dim_mismatch("score payload length"));
        }
        check_finite(&data)?;
        Ok(Self {
            classes,
            height,
            width,
            data,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, c: usize, u: usize, v: usize) -> f32 {
        self.data[c * self.height * self.width + u * self.width + v]
    }

    /// Score maps share the `MSRF` container with feature maps.
    pub fn to_feature_map(&self) -> FeatureMap {
        FeatureMap {
            channels: self.classes,
            height: self.height,
            width: self.width,
            data: self.data.clone(),
            grid: None,
        }
    }

    pub fn from_feature_map(map: FeatureMap) -> Result<Self> {
        let (c, h, w) = (map.channels, map.height, map.width);
        Self::new(c, h, w, map.into_data())
    }
}

fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.iter().any(|&d| d == 0) {
        return Err(invalid(format!(
            "dimensions must be positive, got {dims:?}"
        )));
    }
    if dims.iter().any(|&d| d > u32::MAX as usize) {
        return Err(invalid("dimension exceeds u32 range"));
    }
    Ok(())
}

fn check_finite(data: &[f32]) -> Result<()> {
    match data.iter().position(|x| !x.is_finite()) {
        Some(i) => Err(Error::NonFinite(i)),
        None => Ok(()),
    }
}

pub(crate) fn encode_header(magic: &[u8; 4], dims: &[usize], payload_bytes: usize) -> Vec<u8> {
    let mut buf = Vec::with_capacity(8 + 4 * dims.len() + payload_bytes);
    buf.extend_from_slice(magic);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for &d in dims {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    buf
}

/// Parses a container header and returns `(dims, payload)`.
pub(crate) fn decode_header<'a>(
    bytes: &'a [u8],
    magic: &[u8; 4],
    n_dims: usize,
) -> Result<(Vec<usize>, &'a [u8])> {
    let header_len = 8 + 4 * n_dims;
    if bytes.len() < 4 || &bytes[..4] != magic {
        let found = String::from_utf8_lossy(&bytes[..bytes.len().min(4)]).into_owned();
        return Err(Error::BadMagic {
            expected: String::from_utf8_lossy(magic).into_owned(),
            found,
        });
    }
    if bytes.len() < header_len {
        return Err(Error::Truncated {
            expected: header_len,
            found: bytes.len(),
        });
    }
    let version = read_u32(&bytes[4..8]);
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let dims = (0..n_dims)
        .map(|i| read_u32(&bytes[8 + 4 * i..12 + 4 * i]) as usize)
        .collect();
    Ok((dims, &bytes[header_len..]))
}

pub(crate) fn expect_len(payload: &[u8], expected: usize) -> Result<()> {
    if payload.len() < expected {
        return Err(Error::Truncated {
            expected,
            found: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(invalid(format!(
            "{} trailing bytes after payload",
            payload.len() - expected
        )));
    }
    Ok(())
}

#[inline]
pub(crate) fn read_u32(b: &[u8]) -> u32 {
    u32::from_le_bytes([b[0], b[1], b[2], b[3]])
}

pub(crate) fn push_f32s(buf: &mut Vec<u8>, values: impl IntoIterator<Item = f32>) {
    for x in values {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

pub(crate) fn read_f32s(payload: &[u8]) -> Vec<f32> {
    payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect()
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut file = fs::File::create(path)?;
    file.write_all(bytes)?;
    file.flush()?;
    Ok(())
}

pub fn encode_feature_map(map: &FeatureMap) -> Result<Vec<u8>> {
    check_finite(&map.data)?;
    let mut buf = encode_header(
        FEATURE_MAGIC,
        &[map.channels, map.height, map.width],
        4 * map.data.len(),
    );
    push_f32s(&mut buf, map.data.iter().copied());
    Ok(buf)
}

pub fn decode_feature_map(bytes: &[u8]) -> Result<FeatureMap> {
    let (dims, payload) = decode_header(bytes, FEATURE_MAGIC, 3)?;
    check_dims(&dims)?;
    expect_len(payload, 4 * dims[0] * dims[1] * dims[2])?;
    FeatureMap::new(dims[0], dims[1], dims[2], read_f32s(payload))
}

pub fn write_feature_map(map: &FeatureMap, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_feature_map(map)?;
    write_bytes(path.as_ref(), &bytes)
}

pub fn read_feature_map(path: impl AsRef<Path>) -> Result<FeatureMap> {
    decode_feature_map(&fs::read(path)?)
}

pub fn encode_label_map(map: &LabelMap) -> Vec<u8> {
    let mut buf = encode_header(
        LABEL_MAGIC,
        &[map.classes, map.height, map.width],
        map.data.len(),
    );
    buf.extend_from_slice(&map.data);
    buf
}

pub fn decode_label_map(bytes: &[u8]) -> Result<LabelMap> {
    let (dims, payload) = decode_header(bytes, LABEL_MAGIC, 3)?;
    check_dims(&dims[1..])?;
    expect_len(payload, dims[1] * dims[2])?;
    LabelMap::new(dims[0], dims[1], dims[2], payload.to_vec())
}

pub fn write_label_map(map: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_label_map(map))
}

pub fn read_label_map(path: impl AsRef<Path>) -> Result<LabelMap> {
    decode_label_map(&fs::read(path)?)
}

pub fn write_score_map(map: &ScoreMap, path: impl AsRef<Path>) -> Result<()> {
    write_feature_map(&map.to_feature_map(), path)
}

pub fn read_score_map(path: impl AsRef<Path>) -> Result<ScoreMap> {
    ScoreMap::from_feature_map(read_feature_map(path)?)
}

/// Splits a PPM header into tokens, honouring `#` comments. Returns the
/// tokens and the offset of the single whitespace byte that ends the header.
fn ppm_header(bytes: &[u8]) -> Result<(Vec<String>, usize)> {
    let mut tokens = Vec::with_capacity(4);
    let mut i = 0;
    while tokens.len() < 4 {
        while i < bytes.len() && (bytes[i].is_ascii_whitespace() || bytes[i] == b'#') {
            if bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            } else {
                i += 1;
            }
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() && bytes[i] != b'#' {
            i += 1;
        }
        if start == i {
            return Err(Error::Image("header ended early".into()));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    if i >= bytes.len() || !bytes[i].is_ascii_whitespace() {
        return Err(Error::Image("missing whitespace after maxval".into()));
    }
    Ok((tokens, i + 1))
}

pub fn decode_ppm(bytes: &[u8]) -> Result<ImageRaster> {
    let (tokens, offset) = ppm_header(bytes)?;
    if tokens[0] != "P6" {
        return Err(Error::Image(format!("expected P6, found {:?}", tokens[0])));
    }
    let parse = |s: &str, what: &str| -> Result<usize> {
        s.parse::<usize>()
            .map_err(|_| Error::Image(format!("bad {what}: {s:?}")))
    };
    let width = parse(&tokens[1], "width")?;
    let height = parse(&tokens[2], "height")?;
    let maxval = parse(&tokens[3], "maxval")?;
    if maxval != 255 {
        return Err(Error::Image(format!("maxval must be 255, found {maxval}")));
    }
    check_dims(&[height, width])?;
    let n = height * width;
    let payload = &bytes[offset..];
    if payload.len() < 3 * n {
        return Err(Error::Truncated {
            expected: 3 * n,
            found: payload.len(),
        });
    }
    let mut data = vec![0.0f32; 3 * n];
    for (i, px) in payload[..3 * n].chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * n + i] = px[c] as f32 / 255.0;
        }
    }
    ImageRaster::new(height, width, data)
}

pub fn encode_ppm(image: &ImageRaster) -> Vec<u8> {
    let n = image.pixels();
    let mut buf = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    buf.reserve(3 * n);
    for i in 0..n {
        for c in 0..3 {
            buf.push(quantize(image.data[c * n + i]));
        }
    }
    buf
}

/// `×255` with round-half-up.
#[inline]
pub fn quantize(x: f32) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

pub fn read_image(path: impl AsRef<Path>) -> Result<ImageRaster> {
    decode_ppm(&fs::read(path)?)
}

pub fn write_image(image: &ImageRaster, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_ppm(image))
}

/// Renders a label map with one RGB triple per class; nodata is magenta.
pub fn encode_colormap(labels: &LabelMap, palette: &[[u8; 3]]) -> Result<Vec<u8>> {
    if palette.len() != labels.classes {
        return Err(dim_mismatch(format!(
            "palette has {} colours for {} classes",
            palette.len(),
            labels.classes
        )));
    }
    let mut buf = format!("P6\n{} {}\n255\n", labels.width, labels.height).into_bytes();
    for &l in &labels.data {
        let rgb = if l == NODATA {
            NODATA_COLOR
        } else {
            palette[l as usize]
        };
        buf.extend_from_slice(&rgb);
    }
    Ok(buf)
}

pub fn write_colormap(
    labels: &LabelMap,
    palette: &[[u8; 3]],
    path: impl AsRef<Path>,
) -> Result<()> {
    write_bytes(path.as_ref(), &encode_colormap(labels, palette)?)
}

/// A fixed qualitative palette, cycled when more colours are needed.
pub fn default_palette(classes: usize) -> Vec<[u8; 3]> {
    const BASE: [[u8; 3]; 10] = [
        [0, 97, 255],
        [38, 115, 0],
        [163, 255, 115],
        [255, 170, 0],
        [156, 156, 156],
        [255, 0, 0],
        [0, 197, 255],
        [115, 76, 0],
        [230, 230, 0],
        [0, 0, 0],
    ];
    (0..classes).map(|c| BASE[c % BASE.len()]).collect()
}
