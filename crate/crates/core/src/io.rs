//! On-disk formats: AAT1 tensors, named-tensor checkpoints, binary PGM
//! masks and cine directories.
//!
//! AAT1 layout: magic `AAT1`, `u32` ndim, `ndim` × `u32` dims, then `f32`
//! payload, all little-endian and row-major. Checkpoints are a text index
//! (`key=value` metadata, one `tensor <name> <bytes>` line per tensor, a
//! `end` line) followed by the concatenated AAT1 blobs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::cine::{CineSequence, GroundTruth};
use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::mask::MaskImage;
use crate::nn::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"AAT1";
const CHECKPOINT_MAGIC: &str = "AATCKPT 1";
const MAX_NDIM: usize = 8;

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.ndim() + 4 * t.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

fn read_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    let b = bytes
        .get(at..at + 4)
        .ok_or_else(|| Error::malformed(what, "truncated header"))?;
    Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
}

/// Decodes one AAT1 tensor; returns it with the number of bytes consumed.
pub fn decode_tensor_prefix(bytes: &[u8]) -> Result<(Tensor, usize)> {
    const WHAT: &str = "AAT1 tensor";
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(Error::malformed(WHAT, "missing AAT1 magic"));
    }
    let ndim = read_u32(bytes, 4, WHAT)? as usize;
    if ndim > MAX_NDIM {
        return Err(Error::malformed(WHAT, format!("ndim {ndim} exceeds {MAX_NDIM}")));
    }
    let mut shape = Vec::with_capacity(ndim);
    for i in 0..ndim {
        shape.push(read_u32(bytes, 8 + 4 * i, WHAT)? as usize);
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::malformed(WHAT, "dimension product overflows"))?;
    let start = 8 + 4 * ndim;
    let end = numel
        .checked_mul(4)
        .and_then(|n| n.checked_add(start))
        .ok_or_else(|| Error::malformed(WHAT, "payload size overflows"))?;
    let payload = bytes
        .get(start..end)
        .ok_or_else(|| Error::malformed(WHAT, format!("expected {numel} values, payload truncated")))?;
    let data: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::malformed(WHAT, "non-finite value in payload"));
    }
    Ok((Tensor::new(shape, data)?, end))
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let (t, used) = decode_tensor_prefix(bytes)?;
    if used != bytes.len() {
        return Err(Error::malformed("AAT1 tensor", format!("{} trailing bytes", bytes.len() - used)));
    }
    Ok(t)
}

/// Writes through a sibling temporary file and a rename, so readers never
/// see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn save_tensor(path: &Path, t: &Tensor) -> Result<()> {
    write_atomic(path, &encode_tensor(t))
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    decode_tensor(&read(path)?).map_err(|e| in_file(path, e))
}

fn in_file(path: &Path, e: Error) -> Error {
    match e {
        Error::Malformed { what, detail } => Error::Malformed {
            what: format!("{what} in {}", path.display()),
            detail,
        },
        other => other,
    }
}

pub fn save_flow(path: &Path, f: &FlowField) -> Result<()> {
    save_tensor(path, f.as_tensor())
}

pub fn load_flow(path: &Path) -> Result<FlowField> {
    FlowField::from_tensor(load_tensor(path)?).map_err(|e| in_file(path, as_malformed("flow field", e)))
}

fn as_malformed(what: &str, e: Error) -> Error {
    match e {
        Error::Io { .. } | Error::Malformed { .. } => e,
        other => Error::malformed(what, other.to_string()),
    }
}

/// Named parameters plus free-form `key=value` metadata.
#[derive(Clone, Debug, Default)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn new(params: ParamStore) -> Self {
        Self {
            meta: BTreeMap::new(),
            params,
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.insert(key.to_string(), value.to_string());
        self
    }

    pub fn meta_value<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self
            .meta
            .get(key)
            .ok_or_else(|| Error::malformed("checkpoint", format!("missing metadata `{key}`")))?;
        raw.parse()
            .map_err(|_| Error::malformed("checkpoint", format!("bad value `{raw}` for `{key}`")))
    }

    pub fn encode(&self) -> Vec<u8> {
        let blobs: Vec<Vec<u8>> = self.params.params().iter().map(|p| encode_tensor(&p.tensor)).collect();
        let mut head = format!("{CHECKPOINT_MAGIC}\n");
        for (k, v) in &self.meta {
            head.push_str(&format!("{k}={v}\n"));
        }
        for (p, b) in self.params.params().iter().zip(&blobs) {
            head.push_str(&format!("tensor {} {}\n", p.name, b.len()));
        }
        head.push_str("end\n");
        let mut out = head.into_bytes();
        for b in blobs {
            out.extend_from_slice(&b);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        const WHAT: &str = "checkpoint";
        let mut pos = 0;
        let mut next_line = || -> Result<&str> {
            let rest = &bytes[pos..];
            let nl = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| Error::malformed(WHAT, "unterminated index"))?;
            pos += nl + 1;
            std::str::from_utf8(&rest[..nl]).map_err(|_| Error::malformed(WHAT, "index is not UTF-8"))
        };
        if next_line()? != CHECKPOINT_MAGIC {
            return Err(Error::malformed(WHAT, "missing checkpoint header"));
        }
        let mut meta = BTreeMap::new();
        let mut entries = Vec::new();
        loop {
            let line = next_line()?;
            if line == "end" {
                break;
            }
            if let Some(rest) = line.strip_prefix("tensor ") {
                let (name, len) = rest
                    .rsplit_once(' ')
                    .ok_or_else(|| Error::malformed(WHAT, format!("bad tensor entry `{line}`")))?;
                let len: usize = len
                    .parse()
                    .map_err(|_| Error::malformed(WHAT, format!("bad tensor length in `{line}`")))?;
                entries.push((name.to_string(), len));
            } else if let Some((k, v)) = line.split_once('=') {
                meta.insert(k.to_string(), v.to_string());
            } else {
                return Err(Error::malformed(WHAT, format!("unrecognized index line `{line}`")));
            }
        }
        let mut params = ParamStore::new();
        for (name, len) in entries {
            let blob = bytes
                .get(pos..pos + len)
                .ok_or_else(|| Error::malformed(WHAT, format!("tensor `{name}` truncated")))?;
            params
                .insert(name, decode_tensor(blob)?)
                .map_err(|e| as_malformed(WHAT, e))?;
            pos += len;
        }
        if pos != bytes.len() {
            return Err(Error::malformed(WHAT, "trailing bytes after last tensor"));
        }
        Ok(Self { meta, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&read(path)?).map_err(|e| in_file(path, e))
    }
}

/// Binary PGM (P5): 0 background, 255 foreground.
pub fn encode_pgm(mask: &MaskImage) -> Vec<u8> {
    let (h, w) = mask.grid();
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(mask.values().iter().map(|&v| if v >= 0.5 { 255u8 } else { 0 }));
    out
}

/// Reads a P5 mask; pixels at or above half the maximum are foreground.
pub fn decode_pgm(bytes: &[u8]) -> Result<MaskImage> {
    const WHAT: &str = "PGM mask";
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::malformed(WHAT, "truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(Error::malformed(WHAT, format!("expected P5, found `{}`", fields[0])));
    }
    let num = |s: &str| -> Result<usize> {
        s.parse()
            .map_err(|_| Error::malformed(WHAT, format!("bad header field `{s}`")))
    };
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if w == 0 || h == 0 || maxval == 0 || maxval > 255 {
        return Err(Error::malformed(WHAT, "unsupported size or maxval"));
    }
    // exactly one whitespace byte separates the header from the raster
    let raster = bytes
        .get(pos + 1..)
        .filter(|r| r.len() == w * h)
        .ok_or_else(|| Error::malformed(WHAT, format!("expected {} raster bytes", w * h)))?;
    let data = raster
        .iter()
        .map(|&b| if 2 * b as usize >= maxval { 1.0 } else { 0.0 })
        .collect();
    MaskImage::soft(Tensor::new(vec![h, w], data)?)
}

pub fn save_mask(path: &Path, mask: &MaskImage) -> Result<()> {
    write_atomic(path, &encode_pgm(mask))
}

pub fn load_mask(path: &Path) -> Result<MaskImage> {
    decode_pgm(&read(path)?).map_err(|e| in_file(path, e))
}

/// Parses `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_key_values(text: &str, what: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::malformed(what, format!("line {}: expected key=value", i + 1)))?;
        let k = k.trim();
        if out.insert(k.to_string(), v.trim().to_string()).is_some() {
            return Err(Error::malformed(what, format!("line {}: duplicate key `{k}`", i + 1)));
        }
    }
    Ok(out)
}

pub const MANIFEST: &str = "manifest.txt";
const ED_MASK_FILE: &str = "ed_mask.pgm";

fn frame_file(n: usize) -> String {
    format!("frame_{n:03}.aat")
}

fn mask_file(n: usize) -> String {
    format!("mask_{n:03}.pgm")
}

fn pairwise_file(n: usize) -> String {
    format!("flow_pair_{n:03}.aat")
}

fn composite_file(n: usize) -> String {
    format!("flow_comp_{n:03}.aat")
}

fn manifest_text(cine: &CineSequence) -> String {
    let (h, w) = cine.grid();
    let mut s = format!(
        "frames={}\nheight={h}\nwidth={w}\nspacing_mm={}\ned_mask={ED_MASK_FILE}\n",
        cine.len(),
        cine.pixel_spacing
    );
    if cine.ground_truth.is_some() {
        s.push_str("ground_truth=masks,pairwise,composite\n");
    }
    s
}

/// Writes a whole directory tree atomically (file names may contain `/`): everything goes to a sibling
/// staging directory which is renamed into place at the end. `dir` must
/// not exist.
pub fn write_dir_atomic(dir: &Path, files: &[(String, Vec<u8>)]) -> Result<()> {
    if dir.exists() {
        return Err(Error::invalid(format!("output `{}` already exists", dir.display())));
    }
    let mut staging = dir.as_os_str().to_owned();
    staging.push(format!(".partial{}", std::process::id()));
    let staging = PathBuf::from(staging);
    let result = (|| {
        fs::create_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
        for (name, bytes) in files {
            let p = staging.join(name);
            if let Some(parent) = p.parent() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
        }
        fs::rename(&staging, dir).map_err(|e| Error::io(dir, e))
    })();
    if result.is_err() {
        let _ = fs::remove_dir_all(&staging);
    }
    result
}

/// Serializes a cine into its directory layout.
pub fn cine_files(cine: &CineSequence) -> Vec<(String, Vec<u8>)> {
    let mut files = vec![
        (MANIFEST.to_string(), manifest_text(cine).into_bytes()),
        (ED_MASK_FILE.to_string(), encode_pgm(&cine.ed_mask)),
    ];
    for (n, f) in cine.frames.iter().enumerate() {
        files.push((frame_file(n), encode_tensor(f)));
    }
    if let Some(gt) = &cine.ground_truth {
        for (n, m) in gt.masks.iter().enumerate() {
            files.push((mask_file(n), encode_pgm(m)));
        }
        for (i, f) in gt.pairwise.iter().enumerate() {
            files.push((pairwise_file(i + 1), encode_tensor(f.as_tensor())));
        }
        for (i, f) in gt.composite.iter().enumerate() {
            files.push((composite_file(i + 1), encode_tensor(f.as_tensor())));
        }
    }
    files
}

pub fn write_cine(dir: &Path, cine: &CineSequence) -> Result<()> {
    cine.validate()?;
    write_dir_atomic(dir, &cine_files(cine))
}

pub fn read_cine(dir: &Path) -> Result<CineSequence> {
    let manifest_path = dir.join(MANIFEST);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let what = format!("cine manifest {}", manifest_path.display());
    let kv = parse_key_values(&text, &what)?;
    let get = |k: &str| -> Result<&String> {
        kv.get(k)
            .ok_or_else(|| Error::malformed(what.clone(), format!("missing key `{k}`")))
    };
    let int = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| Error::malformed(what.clone(), format!("`{k}` is not a non-negative integer")))
    };
    let frames = int("frames")?;
    let (h, w) = (int("height")?, int("width")?);
    let spacing: f64 = get("spacing_mm")?
        .parse()
        .map_err(|_| Error::malformed(what.clone(), "`spacing_mm` is not a number"))?;
    for k in kv.keys() {
        if !["frames", "height", "width", "spacing_mm", "ed_mask", "ground_truth"].contains(&k.as_str()) {
            return Err(Error::malformed(what.clone(), format!("unknown key `{k}`")));
        }
    }
    if frames < 2 || !(spacing > 0.0) {
        return Err(Error::malformed(what.clone(), "need frames >= 2 and spacing_mm > 0"));
    }
    let grid_check = |shape: &[usize], file: &str| -> Result<()> {
        if shape != [h, w] {
            return Err(Error::malformed(
                format!("{} in {}", file, dir.display()),
                format!("grid {shape:?} disagrees with manifest {h}x{w}"),
            ));
        }
        Ok(())
    };
    let mut images = Vec::with_capacity(frames);
    for n in 0..frames {
        let t = load_tensor(&dir.join(frame_file(n)))?;
        grid_check(t.shape(), &frame_file(n))?;
        images.push(t);
    }
    let ed_name = kv.get("ed_mask").map(String::as_str).unwrap_or(ED_MASK_FILE);
    let ed_mask = load_mask(&dir.join(ed_name))?;
    grid_check(&[ed_mask.height(), ed_mask.width()], ed_name)?;
    let cine = CineSequence::new(images, spacing, ed_mask).map_err(|e| as_malformed(&what, e))?;
    if !kv.contains_key("ground_truth") {
        return Ok(cine);
    }
    let mut gt = GroundTruth {
        masks: Vec::with_capacity(frames),
        pairwise: Vec::with_capacity(frames - 1),
        composite: Vec::with_capacity(frames - 1),
    };
    for n in 0..frames {
        gt.masks.push(load_mask(&dir.join(mask_file(n)))?);
    }
    for n in 1..frames {
        gt.pairwise.push(load_flow(&dir.join(pairwise_file(n)))?);
        gt.composite.push(load_flow(&dir.join(composite_file(n)))?);
    }
    cine.with_ground_truth(gt).map_err(|e| as_malformed(&what, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_phantom, PhantomConfig};

    #[test]
    fn tensor_layout() {
        let t = Tensor::new(vec![2, 1], vec![1.0, -2.5]).unwrap();
        let b = encode_tensor(&t);
        let mut want = b"AAT1".to_vec();
        for v in [2u32, 2, 1] {
            want.extend_from_slice(&v.to_le_bytes());
        }
        want.extend_from_slice(&1.0f32.to_le_bytes());
        want.extend_from_slice(&(-2.5f32).to_le_bytes());
        assert_eq!(b, want);
        assert_eq!(decode_tensor(&b).unwrap(), t);
    }

    #[test]
    fn tensor_rejects_damage() {
        let b = encode_tensor(&Tensor::zeros(&[3, 3]));
        assert!(matches!(decode_tensor(&b[..b.len() - 1]), Err(Error::Malformed { .. })));
        assert!(matches!(decode_tensor(b"AAT2\0\0\0\0"), Err(Error::Malformed { .. })));
        let mut extra = b.clone();
        extra.push(0);
        assert!(decode_tensor(&extra).is_err());
        let mut huge = b"AAT1".to_vec();
        huge.extend_from_slice(&2u32.to_le_bytes());
        huge.extend_from_slice(&u32::MAX.to_le_bytes());
        huge.extend_from_slice(&u32::MAX.to_le_bytes());
        assert!(decode_tensor(&huge).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut p = ParamStore::new();
        p.insert("a.weight", Tensor::new(vec![2, 2], vec![0.5, 1.0, -1.0, 2.0]).unwrap()).unwrap();
        p.insert("a bias", Tensor::new(vec![1], vec![0.25]).unwrap()).unwrap();
        let ck = Checkpoint::new(p).with_meta("kind", "test").with_meta("latent_dim", 32);
        let back = Checkpoint::decode(&ck.encode()).unwrap();
        assert_eq!(back.meta_value::<usize>("latent_dim").unwrap(), 32);
        assert_eq!(back.params.params().len(), 2);
        assert_eq!(back.params.get("a bias").unwrap().tensor.data(), &[0.25]);
        assert_eq!(back.encode(), ck.encode());
        assert!(Checkpoint::decode(b"AATCKPT 1\ntensor x 99\nend\n").is_err());
        assert!(Checkpoint::decode(b"hello\n").is_err());
    }

    #[test]
    fn pgm_round_trip() {
        let m = MaskImage::from_fn(5, 7, |y, x| (x + y) % 3 == 0);
        let b = encode_pgm(&m);
        assert!(b.starts_with(b"P5\n7 5\n255\n"));
        assert_eq!(decode_pgm(&b).unwrap(), m);
        assert!(decode_pgm(b"P2\n1 1\n255\n\0").is_err());
        assert!(decode_pgm(b"P5\n2 2\n255\n\0").is_err());
        let commented = b"P5 # mask\n1 1\n255\n\xff";
        assert!(decode_pgm(commented).unwrap().get(0, 0));
    }

    #[test]
    fn cine_round_trip() {
        let p = generate_phantom(&PhantomConfig {
            frames: 3,
            ..Default::default()
        })
        .unwrap();
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("cine");
        write_cine(&dir, &p.cine).unwrap();
        assert!(write_cine(&dir, &p.cine).is_err());
        let back = read_cine(&dir).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(back.ed_mask, p.cine.ed_mask);
        for (a, b) in back.frames.iter().zip(&p.cine.frames) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() < 1e-6);
            }
        }
        assert_eq!(back.ground_truth.unwrap().masks, p.cine.ground_truth.unwrap().masks);
    }

    #[test]
    fn corrupt_manifest_is_malformed() {
        let p = generate_phantom(&PhantomConfig {
            frames: 2,
            ..Default::default()
        })
        .unwrap();
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("cine");
        write_cine(&dir, &p.cine.weakly_labelled()).unwrap();
        fs::write(dir.join(MANIFEST), "frames=two\n").unwrap();
        assert!(matches!(read_cine(&dir), Err(Error::Malformed { .. })));
        fs::write(dir.join(MANIFEST), "frames=2\nheight=64\nwidth=32\nspacing_mm=1\n").unwrap();
        assert!(matches!(read_cine(&dir), Err(Error::Malformed { .. })));
    }
}
