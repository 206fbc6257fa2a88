//! Netpbm image and label files and dataset manifests.
//!
//! Images are binary PPM (`P6`, maxval 255); label maps are binary PGM
//! (`P5`, maxval 65535, big-endian samples).

use std::path::{Path, PathBuf};

use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;
use crate::segmentation::LabelMap;
use crate::tensor::Tensor;

fn parse_err<T>(offset: usize, message: impl Into<String>) -> Result<T> {
    Err(Error::Parse { offset, message: message.into() })
}

struct Header {
    width: usize,
    height: usize,
    maxval: usize,
    data_offset: usize,
}

fn parse_header(bytes: &[u8], magic: &[u8; 2]) -> Result<Header> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return parse_err(0, format!("expected magic {}", String::from_utf8_lossy(magic)));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        // whitespace and comments before each number
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return parse_err(pos, "header ends early"),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return parse_err(pos, format!("expected a decimal number for header field {}", i + 1));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .expect("ascii digits")
            .parse()
            .or_else(|_| parse_err(start, "header number out of range"))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return parse_err(pos, "expected a single whitespace byte after maxval"),
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return parse_err(2, format!("empty image {width}x{height}"));
    }
    Ok(Header { width, height, maxval, data_offset: pos })
}

fn payload<'a>(bytes: &'a [u8], h: &Header, expected: usize) -> Result<&'a [u8]> {
    let actual = bytes.len() - h.data_offset;
    if actual < expected {
        return parse_err(
            bytes.len(),
            format!("truncated payload: expected {expected} bytes, found {actual}"),
        );
    }
    if actual > expected {
        return parse_err(h.data_offset + expected, format!("{} trailing bytes after payload", actual - expected));
    }
    Ok(&bytes[h.data_offset..])
}

/// Decodes an 8-bit `P6` file into `[H, W, 3]` values in `[0, 1]`.
pub fn decode_ppm<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    let h = parse_header(bytes, b"P6")?;
    if h.maxval != 255 {
        return parse_err(2, format!("only 8-bit PPM (maxval 255) is supported, got {}", h.maxval));
    }
    let data = payload(bytes, &h, h.width * h.height * 3)?;
    Tensor::new(&[h.height, h.width, 3], data.iter().map(|&b| T::of(b as f64 / 255.0)).collect())
}

pub fn encode_ppm<T: Scalar>(image: &Tensor<T>) -> Result<Vec<u8>> {
    let (h, w, c) = image.dims3()?;
    if c != 3 {
        return invalid(format!("PPM needs 3 channels, got {c}"));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|v| (v.to_f64().unwrap_or(0.0) * 255.0).round().clamp(0.0, 255.0) as u8));
    Ok(out)
}

pub fn read_image<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    decode_ppm(&std::fs::read(path)?).map_err(|e| with_path(e, path))
}

pub fn write_image<T: Scalar>(path: impl AsRef<Path>, image: &Tensor<T>) -> Result<()> {
    Ok(std::fs::write(path, encode_ppm(image)?)?)
}

/// Writes a single-channel `[H, W]` or `[H, W, 1]` map as a gray PPM after
/// scaling `[lo, hi]` to `[0, 1]`.
pub fn write_gray<T: Scalar>(path: impl AsRef<Path>, values: &Tensor<T>, lo: f64, hi: f64) -> Result<()> {
    let (h, w) = (values.shape()[0], values.shape()[1]);
    if values.len() != h * w {
        return invalid(format!("gray image must have one channel, got {:?}", values.shape()));
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    let img = Tensor::from_fn(&[h, w, 3], |i| {
        T::of(((values.data()[i[0] * w + i[1]].to_f64().unwrap_or(0.0) - lo) / span).clamp(0.0, 1.0))
    });
    write_image(path, &img)
}

/// Decodes a 16-bit `P5` label file.
pub fn decode_pgm_labels(bytes: &[u8]) -> Result<LabelMap> {
    let h = parse_header(bytes, b"P5")?;
    if h.maxval != 65535 {
        return parse_err(2, format!("label maps must be 16-bit PGM with maxval 65535, got maxval {}", h.maxval));
    }
    let data = payload(bytes, &h, h.width * h.height * 2)?;
    let labels = data.chunks_exact(2).map(|b| u16::from_be_bytes([b[0], b[1]]) as u32).collect();
    LabelMap::new(h.width, h.height, labels)
}

pub fn encode_pgm_labels(labels: &LabelMap) -> Result<Vec<u8>> {
    if let Some(max) = labels.max_label().filter(|&m| m > u16::MAX as u32) {
        return invalid(format!(
            "label id {max} does not fit a 16-bit PGM; compact the labels or use fewer superpixels"
        ));
    }
    let mut out = format!("P5\n{} {}\n65535\n", labels.width, labels.height).into_bytes();
    for &l in &labels.labels {
        out.extend((l as u16).to_be_bytes());
    }
    Ok(out)
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelMap> {
    let path = path.as_ref();
    decode_pgm_labels(&std::fs::read(path)?).map_err(|e| with_path(e, path))
}

pub fn write_labels(path: impl AsRef<Path>, labels: &LabelMap) -> Result<()> {
    Ok(std::fs::write(path, encode_pgm_labels(labels)?)?)
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Parse { offset, message } => Error::Parse { offset, message: format!("{}: {message}", path.display()) },
        other => other,
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub labels: Option<PathBuf>,
}

/// Text manifest: one `image[TAB]labels` pair per line (labels optional),
/// `#` comments, and an optional `#split=NAME` line. Relative paths are
/// resolved against the manifest's directory.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub split: Option<String>,
}

impl DatasetManifest {
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut m = Self::default();
        let mut offset = 0;
        for line in text.split_inclusive('\n') {
            let start = offset;
            offset += line.len();
            let line = line.trim_end_matches(['\n', '\r']);
            if let Some(split) = line.strip_prefix("#split=") {
                m.split = Some(split.trim().to_string());
                continue;
            }
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split('\t');
            let image = parts.next().unwrap_or("").trim();
            let labels = parts.next().map(str::trim).filter(|s| !s.is_empty());
            if image.is_empty() || parts.next().is_some() {
                return parse_err(start, "manifest lines must be `image` or `image<TAB>labels`");
            }
            m.entries.push(ManifestEntry { image: base.join(image), labels: labels.map(|l| base.join(l)) });
        }
        Ok(m)
    }

    /// Reads a manifest and checks that every referenced file exists.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or(Path::new("."));
        let m = Self::parse(&std::fs::read_to_string(path)?, base)?;
        for e in &m.entries {
            for p in std::iter::once(&e.image).chain(e.labels.as_ref()) {
                if !p.is_file() {
                    return invalid(format!("manifest {} references missing file {}", path.display(), p.display()));
                }
            }
        }
        Ok(m)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        if let Some(split) = &self.split {
            s.push_str(&format!("#split={split}\n"));
        }
        for e in &self.entries {
            s.push_str(&e.image.display().to_string());
            if let Some(l) = &e.labels {
                s.push('\t');
                s.push_str(&l.display().to_string());
            }
            s.push('\n');
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_built_ppm() {
        let mut bytes = b"P6\n2 2\n255\n".to_vec();
        bytes.extend([255, 0, 0, 0, 255, 0, 0, 0, 255, 51, 102, 153]);
        let img = decode_ppm::<f32>(&bytes).unwrap();
        assert_eq!(img.shape(), &[2, 2, 3]);
        assert_eq!(img.at(&[0, 1, 1]), 1.0);
        assert_eq!(img.at(&[1, 1, 0]), 0.2);
        assert_eq!(encode_ppm(&img).unwrap(), bytes);
    }

    #[test]
    fn comments_in_header() {
        let mut bytes = b"P6 # made by hand\n1 # width\n1\n255\n".to_vec();
        bytes.extend([1, 2, 3]);
        assert_eq!(decode_ppm::<f64>(&bytes).unwrap().shape(), &[1, 1, 3]);
    }

    #[test]
    fn every_byte_round_trips() {
        let data: Vec<u8> = (0..=255u8).flat_map(|v| [v, 255 - v, v / 2]).collect();
        let mut bytes = b"P6\n16 16\n255\n".to_vec();
        bytes.extend(&data);
        assert_eq!(encode_ppm(&decode_ppm::<f32>(&bytes).unwrap()).unwrap(), bytes);
    }

    #[test]
    fn truncation_reports_sizes_and_offset() {
        let mut bytes = b"P6\n2 2\n255\n".to_vec();
        bytes.extend([0; 10]);
        match decode_ppm::<f32>(&bytes) {
            Err(Error::Parse { offset, message }) => {
                assert_eq!(offset, bytes.len());
                assert!(message.contains("expected 12") && message.contains("found 10"), "{message}");
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(decode_ppm::<f32>(b"P3\n1 1\n255\n"), Err(Error::Parse { offset: 0, .. })));
        assert!(matches!(decode_ppm::<f32>(b"P6\n1 x\n255\n"), Err(Error::Parse { offset: 5, .. })));
    }

    #[test]
    fn label_round_trip_and_limits() {
        let l = LabelMap::from_fn(208, 208, |x, y| ((y / 16) * 13 + x / 16) as u32);
        let bytes = encode_pgm_labels(&l).unwrap();
        let back = decode_pgm_labels(&bytes).unwrap();
        assert_eq!(back, l);
        assert_eq!(back.n_labels(), 169);

        let wide = LabelMap::from_fn(2, 1, |x, _| x as u32 * 65535);
        assert_eq!(decode_pgm_labels(&encode_pgm_labels(&wide).unwrap()).unwrap(), wide);
        assert!(encode_pgm_labels(&LabelMap::from_fn(1, 1, |_, _| 65536)).is_err());

        let mut eight = b"P5\n1 1\n255\n".to_vec();
        eight.push(3);
        assert!(decode_pgm_labels(&eight).is_err());
    }

    #[test]
    fn manifest_parsing() {
        let text = "#split=train\n# comment\na.ppm\ta.pgm\n\nb.ppm\n";
        let m = DatasetManifest::parse(text, Path::new("/data")).unwrap();
        assert_eq!(m.split.as_deref(), Some("train"));
        assert_eq!(m.entries.len(), 2);
        assert_eq!(m.entries[0].labels, Some(PathBuf::from("/data/a.pgm")));
        assert_eq!(m.entries[1].labels, None);
        assert!(DatasetManifest::parse("a\tb\tc\n", Path::new(".")).is_err());
        assert_eq!(DatasetManifest::parse(&m.render(), Path::new("/")).unwrap(), m);
    }

    #[test]
    fn manifest_load_checks_files() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("m.txt"), "missing.ppm\n").unwrap();
        assert!(DatasetManifest::load(dir.path().join("m.txt")).is_err());
        write_image(dir.path().join("x.ppm"), &Tensor::<f32>::zeros(&[2, 2, 3])).unwrap();
        std::fs::write(dir.path().join("m.txt"), "x.ppm\n").unwrap();
        assert_eq!(DatasetManifest::load(dir.path().join("m.txt")).unwrap().entries.len(), 1);
    }
}
