//! Shape-estimate construction and file I/O.
//!
//! A shape estimate is an image-sized rendering of geometric information:
//! either a colored stickman drawn from body joints or a single-channel
//! edge map. This module also provides the 8-crop in-plane normalization
//! (fixed-size crops around each limb, black where a limb is missing) and
//! bit-exact binary PPM/PGM image files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Joint order of the synthetic profile.
pub const JOINT_NAMES: [&str; 9] = [
    "head", "neck", "pelvis", "l_elbow", "l_hand", "r_elbow", "r_hand", "l_foot", "r_foot",
];

pub const JOINT_COUNT: usize = JOINT_NAMES.len();

/// The eight limbs (joint-index pairs) whose crops feed the in-plane
/// normalization and whose segments form the stickman.
pub const LIMBS: [(usize, usize); 8] = [
    (0, 1), // head - neck
    (1, 2), // neck - pelvis
    (1, 3), // neck - l_elbow
    (3, 4), // l_elbow - l_hand
    (1, 5), // neck - r_elbow
    (5, 6), // r_elbow - r_hand
    (2, 7), // pelvis - l_foot
    (2, 8), // pelvis - r_foot
];

/// Convert HSV (`h` in degrees, `s`/`v` in `[0,1]`) to RGB.
pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f32; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let i = h.floor() as i32 % 6;
    let f = h - h.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    let (r, g, b) = match i {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [r as f32, g as f32, b as f32]
}

/// RGB to HSV; returns `(h_degrees, s, v)`.
pub fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        60.0 * (((g - b) / d).rem_euclid(6.0))
    } else if max == g {
        60.0 * ((b - r) / d + 2.0)
    } else {
        60.0 * ((r - g) / d + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

/// Fixed stickman palette: eight maximally separated hues, one per limb.
pub fn stickman_palette() -> [[f32; 3]; 8] {
    let mut out = [[0.0; 3]; 8];
    for (i, c) in out.iter_mut().enumerate() {
        *c = hsv_to_rgb(i as f64 * 45.0, 1.0, 1.0);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Joint {
    pub x: f32,
    pub y: f32,
    pub visible: bool,
}

/// Ordered joints of one figure (synthetic profile: 9 joints, 8 limbs).
#[derive(Clone, Debug, PartialEq)]
pub struct KeypointSet {
    pub joints: Vec<Joint>,
}

impl KeypointSet {
    pub fn new(joints: Vec<Joint>) -> Result<Self> {
        if joints.len() != JOINT_COUNT {
            return Err(Error::Data(format!(
                "keypoint set has {} joints, profile expects {}",
                joints.len(),
                JOINT_COUNT
            )));
        }
        Ok(KeypointSet { joints })
    }

    pub fn all_invisible(size: usize) -> Self {
        let _ = size;
        KeypointSet {
            joints: vec![
                Joint {
                    x: 0.0,
                    y: 0.0,
                    visible: false
                };
                JOINT_COUNT
            ],
        }
    }

    /// Serialize as `x0 y0 v0 x1 y1 v1 ...` (no image id).
    pub fn fields(&self) -> String {
        let mut s = String::new();
        for j in &self.joints {
            let _ = write!(s, "{:?} {:?} {} ", j.x, j.y, if j.visible { 1 } else { 0 });
        }
        s.pop();
        s
    }

    fn parse_fields(fields: &[&str], file: &str, line: usize) -> Result<Self> {
        if fields.len() != 3 * JOINT_COUNT {
            return Err(Error::Parse {
                file: file.to_string(),
                line,
                msg: format!(
                    "expected {} joint fields (x y v per joint), got {}",
                    3 * JOINT_COUNT,
                    fields.len()
                ),
            });
        }
        let mut joints = Vec::with_capacity(JOINT_COUNT);
        for j in 0..JOINT_COUNT {
            let parse = |s: &str, what: &str| -> Result<f32> {
                s.parse::<f32>().map_err(|_| Error::Parse {
                    file: file.to_string(),
                    line,
                    msg: format!("bad {what} `{s}`"),
                })
            };
            let x = parse(fields[3 * j], "x coordinate")?;
            let y = parse(fields[3 * j + 1], "y coordinate")?;
            let visible = match fields[3 * j + 2] {
                "0" => false,
                "1" => true,
                other => {
                    return Err(Error::Parse {
                        file: file.to_string(),
                        line,
                        msg: format!("visibility must be 0 or 1, got `{other}`"),
                    })
                }
            };
            joints.push(Joint { x, y, visible });
        }
        Ok(KeypointSet { joints })
    }
}

/// Parse a keypoint file: one record per line,
/// `image_id x0 y0 v0 x1 y1 v1 ...`, whitespace separated.
pub fn parse_keypoints(path: &Path) -> Result<Vec<(String, KeypointSet)>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    parse_keypoint_text(&text, &path.display().to_string())
}

pub fn parse_keypoint_text(text: &str, file: &str) -> Result<Vec<(String, KeypointSet)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let id = fields[0].to_string();
        let set = KeypointSet::parse_fields(&fields[1..], file, line_no)?;
        out.push((id, set));
    }
    Ok(out)
}

fn dist_point_segment(px: f32, py: f32, ax: f32, ay: f32, bx: f32, by: f32) -> f32 {
    let (dx, dy) = (bx - ax, by - ay);
    let len_sq = dx * dx + dy * dy;
    let t = if len_sq <= f32::EPSILON {
        0.0
    } else {
        (((px - ax) * dx + (py - ay) * dy) / len_sq).clamp(0.0, 1.0)
    };
    let (cx, cy) = (ax + t * dx, ay + t * dy);
    ((px - cx) * (px - cx) + (py - cy) * (py - cy)).sqrt()
}

const STICKMAN_THICKNESS: f32 = 1.5;
const JOINT_RADIUS: f32 = 1.5;

/// Rasterize the joint set as an anti-aliased colored stickman
/// (`[3, size, size]`, values in `[0, 1]`). Limbs with an invisible
/// endpoint are skipped; an all-invisible set yields a black map.
/// Overlaps compose with a per-channel max, so the result does not depend
/// on draw order.
pub fn render_stickman(k: &KeypointSet, size: usize, palette: &[[f32; 3]; 8]) -> Tensor<f32> {
    let mut data = vec![0.0f32; 3 * size * size];
    let mut paint = |cx_lo: f32,
                     cy_lo: f32,
                     cx_hi: f32,
                     cy_hi: f32,
                     reach: f32,
                     color: [f32; 3],
                     cover: &dyn Fn(f32, f32) -> f32| {
        let x0 = (cx_lo - reach).floor().max(0.0) as usize;
        let y0 = (cy_lo - reach).floor().max(0.0) as usize;
        let x1 = ((cx_hi + reach).ceil() as usize + 1).min(size);
        let y1 = ((cy_hi + reach).ceil() as usize + 1).min(size);
        for py in y0..y1 {
            for px in x0..x1 {
                let c = cover(px as f32 + 0.5, py as f32 + 0.5);
                if c <= 0.0 {
                    continue;
                }
                for (ch, &col) in color.iter().enumerate() {
                    let idx = ch * size * size + py * size + px;
                    data[idx] = data[idx].max((c * col).min(1.0));
                }
            }
        }
    };

    for (li, &(a, b)) in LIMBS.iter().enumerate() {
        let (ja, jb) = (&k.joints[a], &k.joints[b]);
        if !ja.visible || !jb.visible {
            continue;
        }
        let color = palette[li % palette.len()];
        let reach = STICKMAN_THICKNESS / 2.0 + 1.0;
        paint(
            ja.x.min(jb.x),
            ja.y.min(jb.y),
            ja.x.max(jb.x),
            ja.y.max(jb.y),
            reach,
            color,
            &|px, py| {
                let d = dist_point_segment(px, py, ja.x, ja.y, jb.x, jb.y);
                (STICKMAN_THICKNESS / 2.0 + 0.5 - d).clamp(0.0, 1.0)
            },
        );
        // Joint discs at both limb endpoints, in the limb's color.
        for j in [ja, jb] {
            paint(j.x, j.y, j.x, j.y, JOINT_RADIUS + 1.0, color, &|px, py| {
                let d = ((px - j.x) * (px - j.x) + (py - j.y) * (py - j.y)).sqrt();
                (JOINT_RADIUS + 0.5 - d).clamp(0.0, 1.0)
            });
        }
    }
    Tensor::new(vec![3, size, size], data).expect("sized buffer")
}

/// Sobel edge map on luminance, normalized to `[0, 1]`, with responses
/// below `threshold` zeroed. Border samples replicate, so a constant image
/// produces an all-zero map and adding a constant changes nothing.
pub fn extract_edges(x: &Tensor<f32>, threshold: f32) -> Result<Tensor<f32>> {
    let (n, c, h, w) = x.dims_nchw()?;
    if n != 1 || c != 3 {
        return Err(Error::ShapeMismatch(format!(
            "extract_edges expects one [3, H, W] image, got {:?}",
            x.shape()
        )));
    }
    let plane = h * w;
    let mut lum_plane = vec![0.0f32; plane];
    for (i, l) in lum_plane.iter_mut().enumerate() {
        *l = 0.299 * x.data()[i] + 0.587 * x.data()[plane + i] + 0.114 * x.data()[2 * plane + i];
    }
    let lum = |yy: isize, xx: isize| -> f32 {
        let yy = yy.clamp(0, h as isize - 1) as usize;
        let xx = xx.clamp(0, w as isize - 1) as usize;
        lum_plane[yy * w + xx]
    };
    let mut mag = vec![0.0f32; plane];
    let mut max = 0.0f32;
    for yy in 0..h as isize {
        for xx in 0..w as isize {
            // The two column/row sums share the same expression shape, so a
            // constant image cancels to exactly zero.
            let east = lum(yy - 1, xx + 1) + 2.0 * lum(yy, xx + 1) + lum(yy + 1, xx + 1);
            let west = lum(yy - 1, xx - 1) + 2.0 * lum(yy, xx - 1) + lum(yy + 1, xx - 1);
            let south = lum(yy + 1, xx - 1) + 2.0 * lum(yy + 1, xx) + lum(yy + 1, xx + 1);
            let north = lum(yy - 1, xx - 1) + 2.0 * lum(yy - 1, xx) + lum(yy - 1, xx + 1);
            let gx = east - west;
            let gy = south - north;
            let g = (gx * gx + gy * gy).sqrt();
            mag[(yy as usize) * w + xx as usize] = g;
            max = max.max(g);
        }
    }
    if max > 1e-6 {
        for v in mag.iter_mut() {
            *v = (*v / max).clamp(0.0, 1.0);
            if *v < threshold {
                *v = 0.0;
            }
        }
    } else {
        mag.fill(0.0);
    }
    Tensor::new(vec![1, h, w], mag)
}

/// Bilinear sample of channel plane `data` (size `h x w`) at a fractional
/// position, clamping out-of-range neighbors.
fn bilinear(data: &[f32], h: usize, w: usize, y: f32, x: f32) -> f32 {
    let x0f = x.floor();
    let y0f = y.floor();
    let fx = x - x0f;
    let fy = y - y0f;
    let clamp_x = |v: isize| v.clamp(0, w as isize - 1) as usize;
    let clamp_y = |v: isize| v.clamp(0, h as isize - 1) as usize;
    let (x0, x1) = (clamp_x(x0f as isize), clamp_x(x0f as isize + 1));
    let (y0, y1) = (clamp_y(y0f as isize), clamp_y(y0f as isize + 1));
    let v00 = data[y0 * w + x0];
    let v01 = data[y0 * w + x1];
    let v10 = data[y1 * w + x0];
    let v11 = data[y1 * w + x1];
    v00 * (1.0 - fx) * (1.0 - fy) + v01 * fx * (1.0 - fy) + v10 * (1.0 - fx) * fy + v11 * fx * fy
}

/// In-plane normalization: for each of the 8 limbs, crop the axis-aligned
/// bounding box of its endpoints (expanded by a 25% margin, clipped to the
/// image) and resize it bilinearly to `crop_size`. Limbs with an invisible
/// endpoint become black crops. Output is `[24, crop_size, crop_size]`.
pub fn limb_crops(x: &Tensor<f32>, k: &KeypointSet, crop_size: usize) -> Result<Tensor<f32>> {
    let (n, c, h, w) = x.dims_nchw()?;
    if n != 1 || c != 3 {
        return Err(Error::ShapeMismatch(format!(
            "limb_crops expects one [3, H, W] image, got {:?}",
            x.shape()
        )));
    }
    let plane = h * w;
    let mut out = vec![0.0f32; 24 * crop_size * crop_size];
    for (li, &(a, b)) in LIMBS.iter().enumerate() {
        let (ja, jb) = (&k.joints[a], &k.joints[b]);
        if !ja.visible || !jb.visible {
            continue; // black crop
        }
        let (mut x0, mut x1) = (ja.x.min(jb.x), ja.x.max(jb.x));
        let (mut y0, mut y1) = (ja.y.min(jb.y), ja.y.max(jb.y));
        let margin = (0.25 * (x1 - x0).max(y1 - y0)).max(2.0);
        x0 = (x0 - margin).max(0.0);
        y0 = (y0 - margin).max(0.0);
        x1 = (x1 + margin).min(w as f32);
        y1 = (y1 + margin).min(h as f32);
        let sx = (x1 - x0) / crop_size as f32;
        let sy = (y1 - y0) / crop_size as f32;
        for ch in 0..3 {
            let src = &x.data()[ch * plane..(ch + 1) * plane];
            let dst_base = (li * 3 + ch) * crop_size * crop_size;
            for py in 0..crop_size {
                let sy_pos = y0 + (py as f32 + 0.5) * sy - 0.5;
                for px in 0..crop_size {
                    let sx_pos = x0 + (px as f32 + 0.5) * sx - 0.5;
                    out[dst_base + py * crop_size + px] = bilinear(src, h, w, sy_pos, sx_pos);
                }
            }
        }
    }
    Tensor::new(vec![24, crop_size, crop_size], out)
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write a `[3, H, W]` tensor as binary 8-bit PPM (P6).
pub fn save_ppm(path: &Path, x: &Tensor<f32>) -> Result<()> {
    let (n, c, h, w) = x.dims_nchw()?;
    if n != 1 || c != 3 {
        return Err(Error::ShapeMismatch(format!(
            "save_ppm expects one [3, H, W] image, got {:?}",
            x.shape()
        )));
    }
    let plane = h * w;
    let mut bytes = format!("P6\n{} {}\n255\n", w, h).into_bytes();
    bytes.reserve(3 * plane);
    for i in 0..plane {
        for ch in 0..3 {
            bytes.push(quantize(x.data()[ch * plane + i]));
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Write a `[1, H, W]` tensor as binary 8-bit PGM (P5).
pub fn save_pgm(path: &Path, x: &Tensor<f32>) -> Result<()> {
    let (n, c, h, w) = x.dims_nchw()?;
    if n != 1 || c != 1 {
        return Err(Error::ShapeMismatch(format!(
            "save_pgm expects one [1, H, W] map, got {:?}",
            x.shape()
        )));
    }
    let mut bytes = format!("P5\n{} {}\n255\n", w, h).into_bytes();
    bytes.extend(x.data().iter().map(|&v| quantize(v)));
    fs::write(path, bytes)?;
    Ok(())
}

/// Consume one whitespace-separated header token, skipping `#` comments.
fn header_token<'a>(bytes: &'a [u8], pos: &mut usize, path: &Path) -> Result<&'a [u8]> {
    let err = |msg: &str| Error::Data(format!("{}: {msg}", path.display()));
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(err("truncated header"));
    }
    Ok(&bytes[start..*pos])
}

fn parse_netpbm(path: &Path, magic: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let err = |msg: String| Error::Data(format!("{}: {msg}", path.display()));
    let mut pos = 0;
    let tok = header_token(&bytes, &mut pos, path)?;
    if tok != magic {
        return Err(err(format!(
            "bad magic `{}`, expected `{}`",
            String::from_utf8_lossy(tok),
            String::from_utf8_lossy(magic)
        )));
    }
    let parse_num = |tok: &[u8]| -> Result<usize> {
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| err("bad header number".into()))
    };
    let w = parse_num(header_token(&bytes, &mut pos, path)?)?;
    let h = parse_num(header_token(&bytes, &mut pos, path)?)?;
    let maxval = parse_num(header_token(&bytes, &mut pos, path)?)?;
    if maxval != 255 {
        return Err(err(format!("unsupported maxval {maxval} (only 255)")));
    }
    // Exactly one whitespace byte separates the header from the payload.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(err("missing header terminator".into()));
    }
    pos += 1;
    let channels = if magic == b"P6" { 3 } else { 1 };
    let need = w * h * channels;
    if bytes.len() - pos < need {
        return Err(err(format!(
            "truncated payload: need {need} bytes, have {}",
            bytes.len() - pos
        )));
    }
    Ok((w, h, bytes[pos..pos + need].to_vec()))
}

/// Load a binary PPM (P6) as `[3, H, W]` in `[0, 1]`.
pub fn load_ppm(path: &Path) -> Result<Tensor<f32>> {
    let (w, h, payload) = parse_netpbm(path, b"P6")?;
    let plane = w * h;
    let mut data = vec![0.0f32; 3 * plane];
    for i in 0..plane {
        for ch in 0..3 {
            data[ch * plane + i] = payload[3 * i + ch] as f32 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// Load a binary PGM (P5) as `[1, H, W]` in `[0, 1]`.
pub fn load_pgm(path: &Path) -> Result<Tensor<f32>> {
    let (w, h, payload) = parse_netpbm(path, b"P5")?;
    let data: Vec<f32> = payload.iter().map(|&b| b as f32 / 255.0).collect();
    Tensor::new(vec![1, h, w], data)
}

/// Where a manifest entry gets its shape estimate from.
#[derive(Clone, Debug)]
pub enum ShapeSource {
    Keypoints(KeypointSet),
    EdgePath(PathBuf),
}

#[derive(Clone, Debug)]
pub struct ManifestEntry {
    pub id: String,
    pub image_path: PathBuf,
    pub shape: ShapeSource,
}

/// Parse a dataset manifest: one line per sample, either
/// `image_path<TAB>image_id x0 y0 v0 ...` or `image_path<TAB>edge_path`.
/// Relative paths resolve against the manifest's directory.
pub fn parse_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    let dir = path.parent().unwrap_or(Path::new(""));
    let file = path.display().to_string();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim_end();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (img, rest) = line.split_once('\t').ok_or_else(|| Error::Parse {
            file: file.clone(),
            line: line_no,
            msg: "expected `image_path<TAB>...`".into(),
        })?;
        let image_path = dir.join(img);
        let fields: Vec<&str> = rest.split_whitespace().collect();
        if fields.is_empty() {
            return Err(Error::Parse {
                file: file.clone(),
                line: line_no,
                msg: "empty shape column".into(),
            });
        }
        if fields.len() == 1 {
            let id = Path::new(img)
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| img.to_string());
            out.push(ManifestEntry {
                id,
                image_path,
                shape: ShapeSource::EdgePath(dir.join(fields[0])),
            });
        } else {
            let set = KeypointSet::parse_fields(&fields[1..], &file, line_no)?;
            out.push(ManifestEntry {
                id: fields[0].to_string(),
                image_path,
                shape: ShapeSource::Keypoints(set),
            });
        }
    }
    Ok(out)
}
