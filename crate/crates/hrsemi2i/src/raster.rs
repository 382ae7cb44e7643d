//! Multi-band raster tiles: binary tile format, manifests, preprocessing.
//!
//! Tiles are stored in a little-endian container: magic `MBT1`, four u32
//! header fields (bands, height, width, dtype code 0=uint8 / 1=float32),
//! then the band-major payload. Label rasters live next to their tile as
//! `<stem>.labels.mbt`, a single-band uint8 tile.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tape::reflect_index;

pub const MAGIC: &[u8; 4] = b"MBT1";
pub const NUM_CLASSES: usize = 5;
pub const CLASS_NAMES: [&str; NUM_CLASSES] =
    ["background", "vegetation", "hydro", "roads", "buildings"];

#[derive(Clone, Debug, PartialEq)]
pub enum TileData {
    U8(Vec<u8>),
    F32(Vec<f32>),
}

impl TileData {
    pub fn len(&self) -> usize {
        match self {
            TileData::U8(v) => v.len(),
            TileData::F32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn dtype_code(&self) -> u32 {
        match self {
            TileData::U8(_) => 0,
            TileData::F32(_) => 1,
        }
    }
}

/// Band-major raster tile with an optional class-id raster.
#[derive(Clone, Debug, PartialEq)]
pub struct Tile {
    pub bands: usize,
    pub height: usize,
    pub width: usize,
    pub data: TileData,
    /// Per-pixel class ids in 0..5, row-major height×width.
    pub labels: Option<Vec<u8>>,
}

impl Tile {
    pub fn new_u8(bands: usize, height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        Self::new(bands, height, width, TileData::U8(data))
    }

    pub fn new_f32(bands: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        Self::new(bands, height, width, TileData::F32(data))
    }

    fn new(bands: usize, height: usize, width: usize, data: TileData) -> Result<Self> {
        if bands == 0 || height == 0 || width == 0 {
            return Err(Error::shape("tile dimensions must be positive"));
        }
        let expect = bands
            .checked_mul(height)
            .and_then(|n| n.checked_mul(width))
            .ok_or_else(|| Error::shape("tile dimensions overflow"))?;
        if data.len() != expect {
            return Err(Error::shape(format!(
                "payload has {} values, {}x{}x{} needs {}",
                data.len(),
                bands,
                height,
                width,
                expect
            )));
        }
        Ok(Tile { bands, height, width, data, labels: None })
    }

    pub fn with_labels(mut self, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != self.height * self.width {
            return Err(Error::shape("label raster must match tile height*width"));
        }
        if let Some(bad) = labels.iter().find(|&&v| v as usize >= NUM_CLASSES) {
            return Err(Error::data(format!("label id {bad} out of range 0..{NUM_CLASSES}")));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn pixels_per_band(&self) -> usize {
        self.height * self.width
    }

    /// Pixel values widened to f64 in storage order.
    pub fn to_f64(&self) -> Vec<f64> {
        match &self.data {
            TileData::U8(v) => v.iter().map(|&x| x as f64).collect(),
            TileData::F32(v) => v.iter().map(|&x| x as f64).collect(),
        }
    }
}

fn labels_path(tile_path: &Path) -> PathBuf {
    tile_path.with_extension("labels.mbt")
}

/// Serialize a tile (and its label sibling, when present). A stale sibling
/// from a previous write is removed so that read_tile mirrors this tile
/// exactly.
pub fn write_tile(tile: &Tile, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(20 + tile.data.len() * 4);
    buf.extend_from_slice(MAGIC);
    for v in [tile.bands as u32, tile.height as u32, tile.width as u32, tile.data.dtype_code()] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    match &tile.data {
        TileData::U8(v) => buf.extend_from_slice(v),
        TileData::F32(v) => {
            for x in v {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;

    let sibling = labels_path(path);
    match &tile.labels {
        Some(labels) => {
            let label_tile = Tile::new_u8(1, tile.height, tile.width, labels.clone())?;
            let mut lbuf = Vec::with_capacity(20 + labels.len());
            lbuf.extend_from_slice(MAGIC);
            for v in [1u32, tile.height as u32, tile.width as u32, 0u32] {
                lbuf.extend_from_slice(&v.to_le_bytes());
            }
            if let TileData::U8(v) = &label_tile.data {
                lbuf.extend_from_slice(v);
            }
            fs::File::create(&sibling)?.write_all(&lbuf)?;
        }
        None => {
            if sibling.exists() {
                fs::remove_file(&sibling)?;
            }
        }
    }
    Ok(())
}

fn parse_tile_bytes(bytes: &[u8], path: &Path) -> Result<Tile> {
    if bytes.len() < 20 {
        return Err(Error::Format(format!("{}: shorter than the 20-byte header", path.display())));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::Format(format!("{}: bad magic", path.display())));
    }
    let field = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    let (bands, height, width, dtype) =
        (field(0) as usize, field(1) as usize, field(2) as usize, field(3));
    if bands == 0 || height == 0 || width == 0 {
        return Err(Error::Format(format!("{}: zero dimension in header", path.display())));
    }
    let n = bands
        .checked_mul(height)
        .and_then(|n| n.checked_mul(width))
        .ok_or_else(|| Error::Format(format!("{}: header dimensions overflow", path.display())))?;
    let payload = &bytes[20..];
    let data = match dtype {
        0 => {
            if payload.len() != n {
                return Err(Error::Corrupt(format!(
                    "{}: expected {} payload bytes, found {}",
                    path.display(),
                    n,
                    payload.len()
                )));
            }
            TileData::U8(payload.to_vec())
        }
        1 => {
            if payload.len() != n * 4 {
                return Err(Error::Corrupt(format!(
                    "{}: expected {} payload bytes, found {}",
                    path.display(),
                    n * 4,
                    payload.len()
                )));
            }
            TileData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            )
        }
        other => {
            return Err(Error::Format(format!("{}: unknown dtype code {other}", path.display())))
        }
    };
    Tile::new(bands, height, width, data)
}

/// Deserialize a tile; a `<stem>.labels.mbt` sibling, when present, is
/// attached as the label raster.
pub fn read_tile(path: &Path) -> Result<Tile> {
    let bytes = fs::read(path)?;
    let tile = parse_tile_bytes(&bytes, path)?;
    let sibling = labels_path(path);
    if !sibling.exists() {
        return Ok(tile);
    }
    let lbytes = fs::read(&sibling)?;
    let ltile = parse_tile_bytes(&lbytes, &sibling)?;
    if ltile.bands != 1 || (ltile.height, ltile.width) != (tile.height, tile.width) {
        return Err(Error::Corrupt(format!(
            "{}: label raster shape does not match tile",
            sibling.display()
        )));
    }
    match ltile.data {
        TileData::U8(labels) => tile.with_labels(labels),
        TileData::F32(_) => {
            Err(Error::Corrupt(format!("{}: label raster must be uint8", sibling.display())))
        }
    }
}

/// Map uint8 values to float32 in [-1, 1] via v/127.5 - 1.
pub fn normalize(tile: &Tile) -> Result<Tile> {
    let values = match &tile.data {
        TileData::U8(v) => v,
        TileData::F32(_) => {
            return Err(Error::Precondition("normalize expects a uint8 tile".into()))
        }
    };
    let data: Vec<f32> = values.iter().map(|&v| (v as f64 / 127.5 - 1.0) as f32).collect();
    let mut out = Tile::new_f32(tile.bands, tile.height, tile.width, data)?;
    out.labels = tile.labels.clone();
    Ok(out)
}

/// Inverse of [`normalize`]: (v+1)*127.5 rounded to the nearest uint8.
pub fn denormalize(tile: &Tile) -> Result<Tile> {
    let values = match &tile.data {
        TileData::F32(v) => v,
        TileData::U8(_) => {
            return Err(Error::Precondition("denormalize expects a float32 tile".into()))
        }
    };
    let data: Vec<u8> =
        values.iter().map(|&v| ((v as f64 + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8).collect();
    let mut out = Tile::new_u8(tile.bands, tile.height, tile.width, data)?;
    out.labels = tile.labels.clone();
    Ok(out)
}

/// Clamp-and-round f64 network output (normalized range) to a uint8 tile.
pub fn denormalize_values(values: &[f64], bands: usize, height: usize, width: usize) -> Result<Tile> {
    let data: Vec<u8> =
        values.iter().map(|&v| ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8).collect();
    Tile::new_u8(bands, height, width, data)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (4.0 * sigma).ceil() as usize;
    let mut k: Vec<f64> = (0..=2 * r)
        .map(|i| {
            let d = i as f64 - r as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    for v in &mut k {
        *v /= s;
    }
    k
}

fn smooth_plane(src: &[f64], h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let r = kernel.len() / 2;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..w {
            let mut s = 0.0;
            for (ki, kv) in kernel.iter().enumerate() {
                let ix = reflect_index(x as isize + ki as isize - r as isize, w);
                s += kv * row[ix];
            }
            tmp[y * w + x] = s;
        }
    }
    let mut out = vec![0.0; h * w];
    for x in 0..w {
        for y in 0..h {
            let mut s = 0.0;
            for (ki, kv) in kernel.iter().enumerate() {
                let iy = reflect_index(y as isize + ki as isize - r as isize, h);
                s += kv * tmp[iy * w + x];
            }
            out[y * w + x] = s;
        }
    }
    out
}

/// Per-band 2-D Gaussian blur, kernel truncated at radius ceil(4*sigma) and
/// renormalized to unit mass, reflection padding at the borders. The square
/// truncation makes the kernel separable, so the blur runs as two 1-D passes.
/// uint8 tiles are filtered in f64 and rounded back; labels pass through.
pub fn gaussian_smooth(tile: &Tile, sigma: f64) -> Result<Tile> {
    if !(sigma > 0.0) {
        return Err(Error::Precondition("gaussian_smooth needs sigma > 0".into()));
    }
    let kernel = gaussian_kernel(sigma);
    let (h, w) = (tile.height, tile.width);
    let hw = h * w;
    let src = tile.to_f64();
    let mut out = Vec::with_capacity(src.len());
    for b in 0..tile.bands {
        out.extend(smooth_plane(&src[b * hw..(b + 1) * hw], h, w, &kernel));
    }
    let data = match &tile.data {
        TileData::U8(_) => {
            TileData::U8(out.iter().map(|&v| v.round().clamp(0.0, 255.0) as u8).collect())
        }
        TileData::F32(_) => TileData::F32(out.iter().map(|&v| v as f32).collect()),
    };
    let mut smoothed = Tile::new(tile.bands, h, w, data)?;
    smoothed.labels = tile.labels.clone();
    Ok(smoothed)
}

/// Per-band value counts over a sequence of uint8 tiles.
pub fn histogram(tiles: &[Tile]) -> Result<Vec<[u64; 256]>> {
    let Some(first) = tiles.first() else {
        return Ok(Vec::new());
    };
    let bands = first.bands;
    let mut counts = vec![[0u64; 256]; bands];
    for tile in tiles {
        if tile.bands != bands {
            return Err(Error::shape(format!(
                "histogram over mixed band counts: {} vs {}",
                bands, tile.bands
            )));
        }
        let values = match &tile.data {
            TileData::U8(v) => v,
            TileData::F32(_) => {
                return Err(Error::Precondition("histogram expects uint8 tiles".into()))
            }
        };
        let hw = tile.pixels_per_band();
        for b in 0..bands {
            for &v in &values[b * hw..(b + 1) * hw] {
                counts[b][v as usize] += 1;
            }
        }
    }
    Ok(counts)
}

/// Write per-band counts as `band,value,count` rows, all 256 values per band.
pub fn write_histogram_csv(counts: &[[u64; 256]], path: &Path) -> Result<()> {
    let mut out = String::from("band,value,count\n");
    for (b, band) in counts.iter().enumerate() {
        for (v, c) in band.iter().enumerate() {
            out.push_str(&format!("{b},{v},{c}\n"));
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_histogram_csv(path: &Path) -> Result<Vec<[u64; 256]>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some("band,value,count") => {}
        _ => return Err(Error::Format(format!("{}: expected band,value,count header", path.display()))),
    }
    let mut counts: Vec<[u64; 256]> = Vec::new();
    for (ln, line) in lines.enumerate() {
        let mut parts = line.split(',');
        let parse = |s: Option<&str>| -> Result<u64> {
            s.and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Format(format!("{}: bad row {}", path.display(), ln + 2)))
        };
        let b = parse(parts.next())? as usize;
        let v = parse(parts.next())? as usize;
        let c = parse(parts.next())?;
        if parts.next().is_some() || v > 255 {
            return Err(Error::Format(format!("{}: bad row {}", path.display(), ln + 2)));
        }
        while counts.len() <= b {
            counts.push([0u64; 256]);
        }
        counts[b][v] = c;
    }
    Ok(counts)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Domain::Source),
            "target" => Ok(Domain::Target),
            other => Err(Error::Format(format!("unknown domain {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(Error::Format(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub domain: Domain,
    pub split: Split,
    pub label_path: Option<PathBuf>,
}

/// Dataset index. Entry paths are stored as written (usually relative);
/// [`Manifest::resolve`] joins them onto the directory the manifest was
/// loaded from.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub base: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

fn csv_safe(p: &Path) -> Result<&str> {
    let s = p
        .to_str()
        .ok_or_else(|| Error::Format(format!("path {} is not valid UTF-8", p.display())))?;
    if s.contains(',') || s.contains('\n') || s.contains('\r') {
        return Err(Error::Format(format!("path {s:?} contains CSV delimiter characters")));
    }
    Ok(s)
}

impl Manifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::from("path,domain,split,label_path\n");
        for e in &self.entries {
            let lp = match &e.label_path {
                Some(p) => csv_safe(p)?,
                None => "",
            };
            out.push_str(&format!(
                "{},{},{},{}\n",
                csv_safe(&e.path)?,
                e.domain.as_str(),
                e.split.as_str(),
                lp
            ));
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Manifest> {
        let text = fs::read_to_string(path)?;
        let base = path.parent().unwrap_or_else(|| Path::new("")).to_path_buf();
        let mut lines = text.lines();
        match lines.next() {
            Some("path,domain,split,label_path") => {}
            _ => {
                return Err(Error::Format(format!(
                    "{}: expected path,domain,split,label_path header",
                    path.display()
                )))
            }
        }
        let mut entries = Vec::new();
        for (ln, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 4 {
                return Err(Error::Format(format!(
                    "{}: row {} has {} fields, expected 4",
                    path.display(),
                    ln + 2,
                    parts.len()
                )));
            }
            entries.push(ManifestEntry {
                path: PathBuf::from(parts[0]),
                domain: Domain::parse(parts[1])?,
                split: Split::parse(parts[2])?,
                label_path: if parts[3].is_empty() { None } else { Some(PathBuf::from(parts[3])) },
            });
        }
        Ok(Manifest { base, entries })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    pub fn select(&self, domain: Domain, split: Split) -> Vec<&ManifestEntry> {
        self.entries
            .iter()
            .filter(|e| e.domain == domain && e.split == split)
            .collect()
    }

    /// Check that every referenced file exists and parses as a tile header.
    pub fn validate(&self) -> Result<()> {
        for e in &self.entries {
            read_tile(&self.resolve(&e.path))?;
            if let Some(lp) = &e.label_path {
                let t = read_tile(&self.resolve(lp))?;
                if t.bands != 1 {
                    return Err(Error::data(format!(
                        "label raster {} must have a single band",
                        lp.display()
                    )));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn float_tile_file_is_header_plus_payload() {
        let dir = tmp();
        let p = dir.path().join("t.mbt");
        let tile = Tile::new_f32(4, 2, 2, vec![0.5; 16]).unwrap();
        write_tile(&tile, &p).unwrap();
        assert_eq!(fs::metadata(&p).unwrap().len(), 84);
        assert_eq!(read_tile(&p).unwrap(), tile);
    }

    #[test]
    fn u8_roundtrip_with_labels() {
        let dir = tmp();
        let p = dir.path().join("t.mbt");
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data: Vec<u8> = (0..4 * 8 * 8).map(|_| rng.gen()).collect();
        let labels: Vec<u8> = (0..64).map(|_| rng.gen_range(0..5)).collect();
        let tile = Tile::new_u8(4, 8, 8, data).unwrap().with_labels(labels).unwrap();
        write_tile(&tile, &p).unwrap();
        assert!(dir.path().join("t.labels.mbt").exists());
        assert_eq!(read_tile(&p).unwrap(), tile);
    }

    #[test]
    fn rewriting_without_labels_drops_sibling() {
        let dir = tmp();
        let p = dir.path().join("t.mbt");
        let tile = Tile::new_u8(1, 4, 4, vec![1; 16]).unwrap().with_labels(vec![0; 16]).unwrap();
        write_tile(&tile, &p).unwrap();
        let plain = Tile::new_u8(1, 4, 4, vec![2; 16]).unwrap();
        write_tile(&plain, &p).unwrap();
        assert!(!dir.path().join("t.labels.mbt").exists());
        assert_eq!(read_tile(&p).unwrap(), plain);
    }

    #[test]
    fn bad_magic_is_a_format_error() {
        let dir = tmp();
        let p = dir.path().join("bad.mbt");
        fs::write(&p, b"XXXX\x01\x00\x00\x00\x01\x00\x00\x00\x01\x00\x00\x00\x00\x00\x00\x00\x00")
            .unwrap();
        assert!(matches!(read_tile(&p), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_payload_is_corrupt() {
        let dir = tmp();
        let p = dir.path().join("t.mbt");
        let tile = Tile::new_u8(2, 4, 4, vec![7; 32]).unwrap();
        write_tile(&tile, &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(read_tile(&p), Err(Error::Corrupt(_))));
    }

    #[test]
    fn normalize_endpoints_and_midpoint() {
        let tile = Tile::new_u8(1, 1, 3, vec![0, 255, 102]).unwrap();
        let n = normalize(&tile).unwrap();
        let TileData::F32(v) = &n.data else { panic!("expected f32") };
        assert_eq!(v[0], -1.0);
        assert_eq!(v[1], 1.0);
        assert!((v[2] - (-0.2)).abs() < 1e-7);
        assert!(matches!(normalize(&n), Err(Error::Precondition(_))));
    }

    #[test]
    fn denormalize_recovers_every_u8_value() {
        let data: Vec<u8> = (0..=255).collect();
        let tile = Tile::new_u8(1, 16, 16, data.clone()).unwrap();
        let back = denormalize(&normalize(&tile).unwrap()).unwrap();
        let TileData::U8(v) = &back.data else { panic!("expected u8") };
        assert_eq!(v, &data);
    }

    #[test]
    fn smooth_keeps_constant_bands() {
        let tile = Tile::new_f32(2, 16, 16, vec![42.0; 512]).unwrap();
        let s = gaussian_smooth(&tile, 1.5).unwrap();
        let TileData::F32(v) = &s.data else { panic!() };
        for &x in v {
            assert!((x - 42.0).abs() < 1e-4);
        }
    }

    #[test]
    fn smooth_impulse_reproduces_kernel() {
        let (h, w) = (33, 33);
        let mut data = vec![0.0f32; h * w];
        data[16 * w + 16] = 1.0;
        let tile = Tile::new_f32(1, h, w, data).unwrap();
        let s = gaussian_smooth(&tile, 1.0).unwrap();
        let TileData::F32(v) = &s.data else { panic!() };
        let k = gaussian_kernel(1.0);
        let r = k.len() / 2;
        for dy in -(r as isize)..=(r as isize) {
            for dx in -(r as isize)..=(r as isize) {
                let expect = k[(dy + r as isize) as usize] * k[(dx + r as isize) as usize];
                let got = v[((16 + dy) * w as isize + 16 + dx) as usize] as f64;
                assert!((got - expect).abs() < 1e-7, "at ({dy},{dx}): {got} vs {expect}");
            }
        }
        // mass far from the impulse is zero
        assert_eq!(v[0], 0.0);
    }

    #[test]
    fn smooth_preserves_mean_away_from_borders() {
        // constant background plus a bump that stays 2r away from every edge,
        // so no reflected sample ever sees non-constant data
        let (h, w) = (64, 64);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut data = vec![100.0f32; h * w];
        for y in 16..48 {
            for x in 16..48 {
                data[y * w + x] += rng.gen::<f32>() * 50.0;
            }
        }
        let tile = Tile::new_f32(1, h, w, data.clone()).unwrap();
        let s = gaussian_smooth(&tile, 1.0).unwrap();
        let TileData::F32(v) = &s.data else { panic!() };
        let mean_in: f64 = data.iter().map(|&x| x as f64).sum::<f64>() / (h * w) as f64;
        let mean_out: f64 = v.iter().map(|&x| x as f64).sum::<f64>() / (h * w) as f64;
        assert!((mean_in - mean_out).abs() < 1e-6, "{mean_in} vs {mean_out}");
    }

    #[test]
    fn smooth_commutes_with_band_swap() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let band_a: Vec<f32> = (0..256).map(|_| rng.gen::<f32>() * 100.0).collect();
        let band_b: Vec<f32> = (0..256).map(|_| rng.gen::<f32>() * 100.0).collect();
        let ab = Tile::new_f32(2, 16, 16, [band_a.clone(), band_b.clone()].concat()).unwrap();
        let ba = Tile::new_f32(2, 16, 16, [band_b, band_a].concat()).unwrap();
        let s_ab = gaussian_smooth(&ab, 1.0).unwrap();
        let s_ba = gaussian_smooth(&ba, 1.0).unwrap();
        let TileData::F32(vab) = &s_ab.data else { panic!() };
        let TileData::F32(vba) = &s_ba.data else { panic!() };
        assert_eq!(&vab[..256], &vba[256..]);
        assert_eq!(&vab[256..], &vba[..256]);
    }

    #[test]
    fn smooth_rejects_nonpositive_sigma() {
        let tile = Tile::new_u8(1, 8, 8, vec![0; 64]).unwrap();
        assert!(matches!(gaussian_smooth(&tile, 0.0), Err(Error::Precondition(_))));
    }

    #[test]
    fn histogram_counts_constant_tile() {
        let tile = Tile::new_u8(4, 2, 2, vec![7; 16]).unwrap();
        let h = histogram(std::slice::from_ref(&tile)).unwrap();
        assert_eq!(h.len(), 4);
        for band in &h {
            assert_eq!(band[7], 4);
            assert_eq!(band.iter().sum::<u64>(), 4);
        }
        // additivity
        let h2 = histogram(&[tile.clone(), tile]).unwrap();
        for (b1, b2) in h.iter().zip(&h2) {
            for (c1, c2) in b1.iter().zip(b2.iter()) {
                assert_eq!(c1 * 2, *c2);
            }
        }
    }

    #[test]
    fn histogram_of_nothing_is_empty() {
        assert!(histogram(&[]).unwrap().is_empty());
    }

    #[test]
    fn histogram_rejects_mixed_bands() {
        let a = Tile::new_u8(2, 2, 2, vec![0; 8]).unwrap();
        let b = Tile::new_u8(3, 2, 2, vec![0; 12]).unwrap();
        assert!(matches!(histogram(&[a, b]), Err(Error::Shape(_))));
    }

    #[test]
    fn histogram_csv_roundtrip() {
        let dir = tmp();
        let p = dir.path().join("hist.csv");
        let tile = Tile::new_u8(2, 4, 4, (0..32).map(|i| (i * 3) as u8).collect()).unwrap();
        let h = histogram(std::slice::from_ref(&tile)).unwrap();
        write_histogram_csv(&h, &p).unwrap();
        assert_eq!(read_histogram_csv(&p).unwrap(), h);
    }

    #[test]
    fn manifest_roundtrip_and_selection() {
        let dir = tmp();
        let p = dir.path().join("manifest.csv");
        let m = Manifest {
            base: dir.path().to_path_buf(),
            entries: vec![
                ManifestEntry {
                    path: "a.mbt".into(),
                    domain: Domain::Source,
                    split: Split::Train,
                    label_path: Some("a.labels.mbt".into()),
                },
                ManifestEntry {
                    path: "b.mbt".into(),
                    domain: Domain::Target,
                    split: Split::Val,
                    label_path: None,
                },
            ],
        };
        m.save(&p).unwrap();
        let loaded = Manifest::load(&p).unwrap();
        assert_eq!(loaded.entries, m.entries);
        assert_eq!(loaded.base, dir.path());
        assert_eq!(loaded.select(Domain::Source, Split::Train).len(), 1);
        assert_eq!(loaded.select(Domain::Target, Split::Train).len(), 0);
        assert_eq!(loaded.resolve(Path::new("a.mbt")), dir.path().join("a.mbt"));
    }

    #[test]
    fn manifest_rejects_comma_paths() {
        let dir = tmp();
        let m = Manifest {
            base: PathBuf::new(),
            entries: vec![ManifestEntry {
                path: "a,b.mbt".into(),
                domain: Domain::Source,
                split: Split::Train,
                label_path: None,
            }],
        };
        assert!(matches!(m.save(&dir.path().join("m.csv")), Err(Error::Format(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn tile_roundtrip_is_identity(
            bands in 1usize..5,
            h in 1usize..12,
            w in 1usize..12,
            f32_dtype in proptest::bool::ANY,
            with_labels in proptest::bool::ANY,
            seed in 0u64..1000,
        ) {
            let dir = tmp();
            let p = dir.path().join("t.mbt");
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = bands * h * w;
            let data = if f32_dtype {
                TileData::F32((0..n).map(|_| rng.gen::<f32>() * 200.0 - 100.0).collect())
            } else {
                TileData::U8((0..n).map(|_| rng.gen()).collect())
            };
            let mut tile = Tile::new(bands, h, w, data).unwrap();
            if with_labels {
                tile = tile.with_labels((0..h * w).map(|_| rng.gen_range(0..5)).collect()).unwrap();
            }
            write_tile(&tile, &p).unwrap();
            prop_assert_eq!(read_tile(&p).unwrap(), tile);
        }

        #[test]
        fn normalize_stays_inside_unit_range(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<u8> = (0..64).map(|_| rng.gen()).collect();
            let tile = Tile::new_u8(1, 8, 8, data).unwrap();
            let n = normalize(&tile).unwrap();
            let TileData::F32(v) = &n.data else { unreachable!() };
            for &x in v {
                prop_assert!((-1.0..=1.0).contains(&x));
            }
            let back = denormalize(&n).unwrap();
            prop_assert_eq!(back.data, tile.data);
        }
    }
}
