//! On-disk formats. Multi-byte fields are little-endian except PGM samples,
//! which follow the PGM convention (big-endian when 16-bit).
//!
//! | ext      | layout |
//! |----------|--------|
//! | `.bfs`   | `BFS1`, u32 width, u32 height, u32 K, K bit-packed planes (rows padded to whole bytes, bit `c % 8` of byte `c / 8`), u16 thresholds |
//! | `.dict`  | `DCT1`, u32 atom_dim, u32 num_atoms, f64 atoms column-major |
//! | `.mlnet` | `MLN1`, u32 T, u32 atom_dim, u32 m, per layer f64 A, Q, W (row-major) and θ |
//! | `.pfm`   | grayscale Portable FloatMap, negative scale (little-endian), bottom row first |
//! | `.pgm`   | binary `P5`, 8- or 16-bit |

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Array3};

use crate::error::{Error, Result};
use crate::mlnet::{LayerParams, MLNetParams};
use crate::sensor::{BinaryFrameStack, Psf, ThresholdMap};
use crate::sparse::Dictionary;

const BFS_MAGIC: &[u8; 4] = b"BFS1";
const DICT_MAGIC: &[u8; 4] = b"DCT1";
const MLNET_MAGIC: &[u8; 4] = b"MLN1";

/// Upper bound on any single decoded dimension, to fail fast on garbage headers.
const MAX_DIM: u32 = 1 << 20;

struct Reader<R> {
    inner: R,
    kind: &'static str,
}

impl<R: Read> Reader<R> {
    fn exact(&mut self, buf: &mut [u8]) -> Result<()> {
        self.inner.read_exact(buf).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => Error::format(self.kind, "truncated"),
            _ => Error::format(self.kind, e.to_string()),
        })
    }

    fn magic(&mut self, want: &[u8; 4]) -> Result<()> {
        let mut m = [0u8; 4];
        self.exact(&mut m)?;
        if &m != want {
            return Err(Error::format(self.kind, format!("bad magic {m:?}")));
        }
        Ok(())
    }

    fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    fn dim(&mut self, what: &str) -> Result<usize> {
        let v = self.u32()?;
        if v == 0 || v > MAX_DIM {
            return Err(Error::format(self.kind, format!("{what} {v} out of range")));
        }
        Ok(v as usize)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let mut buf = vec![0u8; n * 8];
        self.exact(&mut buf)?;
        Ok(buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn end(&mut self) -> Result<()> {
        let mut b = [0u8; 1];
        match self.inner.read(&mut b) {
            Ok(0) => Ok(()),
            Ok(_) => Err(Error::format(self.kind, "trailing bytes")),
            Err(e) => Err(Error::format(self.kind, e.to_string())),
        }
    }
}

fn put_f64s<W: Write>(w: &mut W, vals: impl IntoIterator<Item = f64>) -> std::io::Result<()> {
    for v in vals {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn u32_of(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::invalid(format!("{what} {v} does not fit in u32")))
}

fn io_err(e: std::io::Error) -> Error {
    Error::io("<stream>", e)
}

pub fn write_bfs<W: Write>(w: &mut W, stack: &BinaryFrameStack) -> Result<()> {
    let (k, rows, cols) = stack.frames().dim();
    let mut out = Vec::with_capacity(16 + k * rows * cols.div_ceil(8) + 2 * rows * cols);
    out.extend_from_slice(BFS_MAGIC);
    out.extend_from_slice(&u32_of(cols, "width")?.to_le_bytes());
    out.extend_from_slice(&u32_of(rows, "height")?.to_le_bytes());
    out.extend_from_slice(&u32_of(k, "frame count")?.to_le_bytes());
    let row_bytes = cols.div_ceil(8);
    for plane in stack.frames().outer_iter() {
        for row in plane.rows() {
            let mut packed = vec![0u8; row_bytes];
            for (c, b) in row.iter().enumerate() {
                packed[c / 8] |= (b & 1) << (c % 8);
            }
            out.extend_from_slice(&packed);
        }
    }
    for q in stack.thresholds().data().iter() {
        out.extend_from_slice(&q.to_le_bytes());
    }
    w.write_all(&out).map_err(io_err)
}

pub fn read_bfs<R: Read>(r: R) -> Result<BinaryFrameStack> {
    let mut rd = Reader { inner: r, kind: "bfs" };
    rd.magic(BFS_MAGIC)?;
    let cols = rd.dim("width")?;
    let rows = rd.dim("height")?;
    let k = rd.dim("frame count")?;
    let row_bytes = cols.div_ceil(8);
    let mut planes = vec![0u8; k * rows * row_bytes];
    rd.exact(&mut planes)?;
    let frames = Array3::from_shape_fn((k, rows, cols), |(f, r, c)| {
        (planes[(f * rows + r) * row_bytes + c / 8] >> (c % 8)) & 1
    });
    let mut qbytes = vec![0u8; rows * cols * 2];
    rd.exact(&mut qbytes)?;
    rd.end()?;
    let q: Vec<u16> = qbytes.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();
    if q.contains(&0) {
        return Err(Error::format("bfs", "zero threshold"));
    }
    let thresholds = ThresholdMap::new(Array2::from_shape_vec((rows, cols), q).expect("shape"))?;
    BinaryFrameStack::new(frames, thresholds)
}

pub fn write_dict<W: Write>(w: &mut W, dict: &Dictionary) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(DICT_MAGIC);
    out.extend_from_slice(&u32_of(dict.atom_dim(), "atom_dim")?.to_le_bytes());
    out.extend_from_slice(&u32_of(dict.num_atoms(), "num_atoms")?.to_le_bytes());
    put_f64s(&mut out, dict.atoms().t().iter().cloned()).map_err(io_err)?;
    w.write_all(&out).map_err(io_err)
}

pub fn read_dict<R: Read>(r: R) -> Result<Dictionary> {
    let mut rd = Reader { inner: r, kind: "dict" };
    rd.magic(DICT_MAGIC)?;
    let n = rd.dim("atom_dim")?;
    let m = rd.dim("num_atoms")?;
    let vals = rd.f64s(n * m)?;
    rd.end()?;
    let atoms = Array2::from_shape_vec((m, n), vals).expect("shape").reversed_axes();
    Dictionary::new(atoms.as_standard_layout().to_owned())
}

/// Tied parameters are written once per layer and read back untied. A
/// trained operator is not part of the format and is rejected.
pub fn write_mlnet<W: Write>(w: &mut W, params: &MLNetParams) -> Result<()> {
    params.validate()?;
    if params.h.is_some() {
        return Err(Error::invalid("networks with a trained operator cannot be stored as .mlnet"));
    }
    if params.num_layers == 0 {
        return Err(Error::invalid(".mlnet needs at least one layer"));
    }
    let mut out = Vec::new();
    out.extend_from_slice(MLNET_MAGIC);
    out.extend_from_slice(&u32_of(params.num_layers, "layer count")?.to_le_bytes());
    out.extend_from_slice(&u32_of(params.atom_dim(), "atom_dim")?.to_le_bytes());
    out.extend_from_slice(&u32_of(params.num_atoms(), "num_atoms")?.to_le_bytes());
    for t in 0..params.num_layers {
        let l = params.layer(t);
        put_f64s(&mut out, l.a.iter().cloned()).map_err(io_err)?;
        put_f64s(&mut out, l.q.iter().cloned()).map_err(io_err)?;
        put_f64s(&mut out, l.w.iter().cloned()).map_err(io_err)?;
        put_f64s(&mut out, l.theta.iter().cloned()).map_err(io_err)?;
    }
    w.write_all(&out).map_err(io_err)
}

pub fn read_mlnet<R: Read>(r: R) -> Result<MLNetParams> {
    let mut rd = Reader { inner: r, kind: "mlnet" };
    rd.magic(MLNET_MAGIC)?;
    let t = rd.dim("layer count")?;
    let n = rd.dim("atom_dim")?;
    let m = rd.dim("num_atoms")?;
    let mut layers = Vec::with_capacity(t);
    for _ in 0..t {
        let a = Array2::from_shape_vec((n, m), rd.f64s(n * m)?).expect("shape");
        let q = Array2::from_shape_vec((n, m), rd.f64s(n * m)?).expect("shape");
        let w = Array2::from_shape_vec((m, n), rd.f64s(n * m)?).expect("shape");
        let theta = Array1::from(rd.f64s(m)?);
        layers.push(LayerParams { a, q, w, theta });
    }
    rd.end()?;
    let params = MLNetParams {
        num_layers: t,
        tied: false,
        layers,
        h: None,
    };
    params.validate().map_err(|e| Error::format("mlnet", e.to_string()))?;
    Ok(params)
}

/// Grayscale PFM. Values are stored as `f32`.
pub fn write_pfm<W: Write>(w: &mut W, img: &Array2<f64>) -> Result<()> {
    let (rows, cols) = img.dim();
    let mut out = format!("Pf\n{cols} {rows}\n-1.0\n").into_bytes();
    for r in (0..rows).rev() {
        for c in 0..cols {
            out.extend_from_slice(&(img[[r, c]] as f32).to_le_bytes());
        }
    }
    w.write_all(&out).map_err(io_err)
}

fn header_tokens<R: Read>(rd: &mut Reader<R>, count: usize) -> Result<Vec<String>> {
    // whitespace-separated tokens, '#' comments, one whitespace byte after the last
    let mut tokens = Vec::new();
    let mut cur = String::new();
    let mut comment = false;
    loop {
        let mut b = [0u8; 1];
        rd.exact(&mut b)?;
        let ch = b[0] as char;
        if comment {
            if ch == '\n' || ch == '\r' {
                comment = false;
            }
            continue;
        }
        if ch == '#' && cur.is_empty() {
            comment = true;
        } else if ch.is_ascii_whitespace() {
            if !cur.is_empty() {
                tokens.push(std::mem::take(&mut cur));
                if tokens.len() == count {
                    return Ok(tokens);
                }
            }
        } else {
            cur.push(ch);
            if cur.len() > 64 {
                return Err(Error::format(rd.kind, "header token too long"));
            }
        }
    }
}

fn parse_dim(kind: &'static str, tok: &str) -> Result<usize> {
    match tok.parse::<u32>() {
        Ok(v) if v > 0 && v <= MAX_DIM => Ok(v as usize),
        _ => Err(Error::format(kind, format!("bad dimension '{tok}'"))),
    }
}

pub fn read_pfm<R: Read>(r: R) -> Result<Array2<f64>> {
    let mut rd = Reader { inner: r, kind: "pfm" };
    let tok = header_tokens(&mut rd, 4)?;
    if tok[0] != "Pf" {
        return Err(Error::format("pfm", format!("expected grayscale 'Pf', got '{}'", tok[0])));
    }
    let cols = parse_dim("pfm", &tok[1])?;
    let rows = parse_dim("pfm", &tok[2])?;
    let scale: f64 = tok[3]
        .parse()
        .map_err(|_| Error::format("pfm", format!("bad scale '{}'", tok[3])))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::format("pfm", "scale must be nonzero"));
    }
    let little = scale < 0.0;
    let mut buf = vec![0u8; rows * cols * 4];
    rd.exact(&mut buf)?;
    rd.end()?;
    let mut img = Array2::zeros((rows, cols));
    for (i, ch) in buf.chunks_exact(4).enumerate() {
        let b: [u8; 4] = ch.try_into().expect("4 bytes");
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        img[[rows - 1 - i / cols, i % cols]] = v as f64;
    }
    Ok(img)
}

/// Raw PGM samples and the declared maximum value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pgm {
    pub data: Array2<u16>,
    pub maxval: u16,
}

impl Pgm {
    /// Samples scaled so that `maxval` maps to `peak`.
    pub fn to_intensity(&self, peak: f64) -> Array2<f64> {
        self.data.mapv(|v| v as f64 / self.maxval as f64 * peak)
    }

    /// Quantizes `[0, peak]` onto `0..=maxval`, clipping outside values.
    pub fn from_intensity(img: &Array2<f64>, peak: f64, maxval: u16) -> Result<Self> {
        if !(peak > 0.0) || maxval == 0 {
            return Err(Error::invalid("PGM conversion needs peak > 0 and maxval >= 1"));
        }
        let data = img.mapv(|v| {
            let s = (v / peak * maxval as f64).round();
            if s.is_nan() {
                0
            } else {
                s.clamp(0.0, maxval as f64) as u16
            }
        });
        Ok(Self { data, maxval })
    }
}

pub fn write_pgm<W: Write>(w: &mut W, pgm: &Pgm) -> Result<()> {
    let (rows, cols) = pgm.data.dim();
    if pgm.maxval == 0 || pgm.data.iter().any(|v| *v > pgm.maxval) {
        return Err(Error::invalid("PGM samples exceed maxval"));
    }
    let mut out = format!("P5\n{cols} {rows}\n{}\n", pgm.maxval).into_bytes();
    for v in pgm.data.iter() {
        if pgm.maxval < 256 {
            out.push(*v as u8);
        } else {
            out.extend_from_slice(&v.to_be_bytes());
        }
    }
    w.write_all(&out).map_err(io_err)
}

pub fn read_pgm<R: Read>(r: R) -> Result<Pgm> {
    let mut rd = Reader { inner: r, kind: "pgm" };
    let tok = header_tokens(&mut rd, 4)?;
    if tok[0] != "P5" {
        return Err(Error::format("pgm", format!("expected binary 'P5', got '{}'", tok[0])));
    }
    let cols = parse_dim("pgm", &tok[1])?;
    let rows = parse_dim("pgm", &tok[2])?;
    let maxval: u16 = match tok[3].parse() {
        Ok(v) if v > 0 => v,
        _ => return Err(Error::format("pgm", format!("bad maxval '{}'", tok[3]))),
    };
    let wide = maxval >= 256;
    let mut buf = vec![0u8; rows * cols * if wide { 2 } else { 1 }];
    rd.exact(&mut buf)?;
    rd.end()?;
    let vals: Vec<u16> = if wide {
        buf.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
    } else {
        buf.iter().map(|v| *v as u16).collect()
    };
    if vals.iter().any(|v| *v > maxval) {
        return Err(Error::format("pgm", "sample exceeds maxval"));
    }
    Ok(Pgm {
        data: Array2::from_shape_vec((rows, cols), vals).expect("shape"),
        maxval,
    })
}

/// Whitespace-separated rows of numbers; blank lines and `#` comments ignored.
pub fn parse_matrix_text(text: &str) -> Result<Array2<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let row = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::format("matrix text", format!("line {}: {e}", i + 1)))?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::format("matrix text", format!("line {} has {} values, expected {}", i + 1, row.len(), first.len())));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::format("matrix text", "no rows"));
    }
    let (r, c) = (rows.len(), rows[0].len());
    Ok(Array2::from_shape_vec((r, c), rows.into_iter().flatten().collect()).expect("shape"))
}

/// One line per row in shortest round-trip form, so parsing recovers the
/// values exactly.
pub fn matrix_text(m: &Array2<f64>) -> String {
    let mut out = String::new();
    for row in m.rows() {
        let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

pub fn read_psf_text(text: &str) -> Result<Psf> {
    Psf::from_kernel(parse_matrix_text(text)?)
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| Error::io(path, e))
}

/// Writes through a buffer and reports I/O failures against `path`.
fn save_with(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    match f(&mut w) {
        Err(Error::Io { source, .. }) => return Err(Error::io(path, source)),
        other => other?,
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn load_with<T>(path: &Path, f: impl FnOnce(BufReader<File>) -> Result<T>) -> Result<T> {
    f(open(path)?).map_err(|e| match e {
        Error::Format { kind, reason } => Error::Format {
            kind,
            reason: format!("{}: {reason}", path.display()),
        },
        other => other,
    })
}

pub fn save_bfs(path: &Path, stack: &BinaryFrameStack) -> Result<()> {
    save_with(path, |w| write_bfs(w, stack))
}

pub fn load_bfs(path: &Path) -> Result<BinaryFrameStack> {
    load_with(path, read_bfs)
}

pub fn save_dict(path: &Path, dict: &Dictionary) -> Result<()> {
    save_with(path, |w| write_dict(w, dict))
}

pub fn load_dict(path: &Path) -> Result<Dictionary> {
    load_with(path, read_dict)
}

pub fn save_mlnet(path: &Path, params: &MLNetParams) -> Result<()> {
    save_with(path, |w| write_mlnet(w, params))
}

pub fn load_mlnet(path: &Path) -> Result<MLNetParams> {
    load_with(path, read_mlnet)
}

pub fn save_pfm(path: &Path, img: &Array2<f64>) -> Result<()> {
    save_with(path, |w| write_pfm(w, img))
}

pub fn load_pfm(path: &Path) -> Result<Array2<f64>> {
    load_with(path, read_pfm)
}

pub fn save_pgm(path: &Path, pgm: &Pgm) -> Result<()> {
    save_with(path, |w| write_pgm(w, pgm))
}

pub fn load_pgm(path: &Path) -> Result<Pgm> {
    load_with(path, read_pgm)
}

pub fn load_psf(path: &Path) -> Result<Psf> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    read_psf_text(&text)
}

/// Loads an image by extension: `.pfm` and `.txt` as-is, `.pgm` scaled to
/// `peak`.
pub fn load_image(path: &Path, peak: f64) -> Result<Array2<f64>> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("pfm") => load_pfm(path),
        Some("pgm") => Ok(load_pgm(path)?.to_intensity(peak)),
        Some("txt") => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            parse_matrix_text(&text).map_err(|e| match e {
                Error::Format { kind, reason } => Error::Format {
                    kind,
                    reason: format!("{}: {reason}", path.display()),
                },
                other => other,
            })
        }
        _ => Err(Error::invalid(format!("{}: expected a .pfm, .pgm or .txt image", path.display()))),
    }
}

/// Saves an image by extension: `.pfm` as f32, `.pgm` as 16-bit over
/// `[0, peak]`, `.txt` at full precision.
pub fn save_image(path: &Path, img: &Array2<f64>, peak: f64) -> Result<()> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("pfm") => save_pfm(path, img),
        Some("pgm") => save_pgm(path, &Pgm::from_intensity(img, peak, u16::MAX)?),
        Some("txt") => save_text(path, &matrix_text(img)),
        _ => Err(Error::invalid(format!("{}: expected a .pfm, .pgm or .txt image", path.display()))),
    }
}

pub fn save_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlnet::init_from_ista_tied;
    use proptest::prelude::*;

    fn stack_strategy() -> impl Strategy<Value = BinaryFrameStack> {
        (1usize..4, 1usize..12, 1usize..20).prop_flat_map(|(k, r, c)| {
            (
                proptest::collection::vec(0u8..2, k * r * c),
                proptest::collection::vec(1u16..=u16::MAX, r * c),
            )
                .prop_map(move |(bits, q)| {
                    BinaryFrameStack::new(
                        Array3::from_shape_vec((k, r, c), bits).unwrap(),
                        ThresholdMap::new(Array2::from_shape_vec((r, c), q).unwrap()).unwrap(),
                    )
                    .unwrap()
                })
        })
    }

    proptest! {
        #[test]
        fn bfs_round_trip(stack in stack_strategy()) {
            let mut buf = Vec::new();
            write_bfs(&mut buf, &stack).unwrap();
            prop_assert_eq!(read_bfs(&buf[..]).unwrap(), stack);
        }

        #[test]
        fn bfs_bit_layout(stack in stack_strategy()) {
            let mut buf = Vec::new();
            write_bfs(&mut buf, &stack).unwrap();
            let (k, rows, cols) = stack.frames().dim();
            let row_bytes = cols.div_ceil(8);
            for f in 0..k {
                for r in 0..rows {
                    for c in 0..cols {
                        let byte = buf[16 + (f * rows + r) * row_bytes + c / 8];
                        prop_assert_eq!((byte >> (c % 8)) & 1, stack.frames()[[f, r, c]]);
                    }
                }
            }
        }

        #[test]
        fn pgm_round_trip(rows in 1usize..9, cols in 1usize..9, maxval in prop_oneof![Just(255u16), Just(1023u16), Just(u16::MAX)], vals in proptest::collection::vec(any::<u16>(), 81)) {
            let data = Array2::from_shape_fn((rows, cols), |(r, c)| vals[r * 9 + c].min(maxval));
            let pgm = Pgm { data, maxval };
            let mut buf = Vec::new();
            write_pgm(&mut buf, &pgm).unwrap();
            prop_assert_eq!(read_pgm(&buf[..]).unwrap(), pgm);
        }

        #[test]
        fn pfm_round_trip(rows in 1usize..9, cols in 1usize..9, vals in proptest::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 81)) {
            let img = Array2::from_shape_fn((rows, cols), |(r, c)| vals[r * 9 + c] as f64);
            let mut buf = Vec::new();
            write_pfm(&mut buf, &img).unwrap();
            prop_assert_eq!(read_pfm(&buf[..]).unwrap(), img);
        }
    }


    #[test]
    fn matrix_text_round_trip_is_exact() {
        let m = Array2::from_shape_fn((3, 4), |(i, j)| (i as f64 + 0.1) / (j as f64 + 3.0) * 1e-7 + j as f64);
        assert_eq!(parse_matrix_text(&matrix_text(&m)).unwrap(), m);
    }
    #[test]
    fn bfs_header_and_padding() {
        let frames = Array3::from_shape_fn((2, 1, 9), |(f, _, c)| ((c + f) % 2) as u8);
        let stack = BinaryFrameStack::new(frames, ThresholdMap::constant((1, 9), 3).unwrap()).unwrap();
        let mut buf = Vec::new();
        write_bfs(&mut buf, &stack).unwrap();
        assert_eq!(&buf[..4], b"BFS1");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 9);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(buf[12..16].try_into().unwrap()), 2);
        // frame 0: bits 0,2,4,6,8 clear -> 1,3,5,7 set
        assert_eq!(buf[16], 0b1010_1010);
        assert_eq!(buf[17], 0);
        assert_eq!(buf[18], 0b0101_0101);
        assert_eq!(buf[19], 1);
        assert_eq!(buf.len(), 16 + 4 + 18);
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let stack = BinaryFrameStack::new(Array3::zeros((1, 2, 2)), ThresholdMap::constant((2, 2), 1).unwrap()).unwrap();
        let mut buf = Vec::new();
        write_bfs(&mut buf, &stack).unwrap();
        assert!(matches!(read_bfs(&buf[..buf.len() - 1]), Err(Error::Format { .. })));
        let mut extra = buf.clone();
        extra.push(0);
        assert!(read_bfs(&extra[..]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_bfs(&bad[..]).is_err());
        let mut zero_q = buf.clone();
        let n = zero_q.len();
        zero_q[n - 2] = 0;
        zero_q[n - 1] = 0;
        assert!(read_bfs(&zero_q[..]).is_err());
        assert!(read_pfm(&b"PF\n1 1\n-1.0\n\0\0\0\0"[..]).is_err());
        assert!(read_pgm(&b"P2\n1 1\n255\n0"[..]).is_err());
    }

    #[test]
    fn dict_round_trip_and_layout() {
        let atoms = Array2::from_shape_vec((2, 2), vec![1.0, 0.0, 0.0, -1.0]).unwrap();
        let d = Dictionary::new(atoms).unwrap();
        let mut buf = Vec::new();
        write_dict(&mut buf, &d).unwrap();
        assert_eq!(&buf[..4], b"DCT1");
        assert_eq!(buf.len(), 12 + 32);
        // column-major: second value is D[1][0]
        assert_eq!(f64::from_le_bytes(buf[20..28].try_into().unwrap()), 0.0);
        assert_eq!(f64::from_le_bytes(buf[36..44].try_into().unwrap()), -1.0);
        assert_eq!(read_dict(&buf[..]).unwrap(), d);
    }

    #[test]
    fn mlnet_tied_reads_back_untied() {
        let d = Dictionary::new(Array2::eye(4)).unwrap();
        let p = init_from_ista_tied(&d, 0.1, 0.5, 3, true);
        let mut buf = Vec::new();
        write_mlnet(&mut buf, &p).unwrap();
        assert_eq!(buf.len(), 16 + 3 * 8 * (3 * 16 + 4));
        let back = read_mlnet(&buf[..]).unwrap();
        assert_eq!(back, p.untied());
        let mut with_h = p.clone();
        with_h.h = Some(Array2::eye(4));
        assert!(write_mlnet(&mut Vec::new(), &with_h).is_err());
    }

    #[test]
    fn matrix_text_parsing() {
        let m = parse_matrix_text("# psf\n0.25 0.25\n\n0.25 0.25 # row\n").unwrap();
        assert_eq!(m, Array2::from_elem((2, 2), 0.25));
        assert!(parse_matrix_text("1 2\n3\n").is_err());
        assert!(parse_matrix_text("a b").is_err());
        assert!(read_psf_text("0 0\n0 0").is_err());
    }

    #[test]
    fn pgm_intensity_scaling() {
        let img = Array2::from_shape_vec((1, 3), vec![0.0, 5.0, 12.0]).unwrap();
        let pgm = Pgm::from_intensity(&img, 10.0, 255).unwrap();
        assert_eq!(pgm.data.as_slice().unwrap(), &[0, 128, 255]);
        let back = pgm.to_intensity(10.0);
        assert!((back[[0, 1]] - 5.0).abs() < 10.0 / 255.0);
    }

    #[test]
    fn file_helpers_name_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope.bfs");
        let err = load_bfs(&missing).unwrap_err();
        assert!(err.to_string().contains("nope.bfs"));
        let p = dir.path().join("x.pfm");
        let img = Array2::from_elem((2, 3), 1.5);
        save_image(&p, &img, 2.0).unwrap();
        assert_eq!(load_image(&p, 2.0).unwrap(), img);
    }
}
