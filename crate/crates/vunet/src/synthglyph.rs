//! Procedural glyph benchmark.
//!
//! Each sample is an articulated stick figure with independently sampled
//! pose (root position, torso angle, four limb angles, scale) and
//! appearance (three part colors, stripe texture, background gray). Because
//! both factor sets are known exactly, a perfect shape/appearance transfer
//! has a computable oracle target: render the source appearance under the
//! target pose. Small fixed-hue marker discs at every joint make joint
//! re-localization on generated images well-posed.
//!
//! Pose parameters are stored as canvas fractions so a pose renders at any
//! resolution.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::par;
use crate::rng::{stable_hash, Rng};
use crate::shapeio::{hsv_to_rgb, save_ppm, Joint, KeypointSet, JOINT_COUNT};
use crate::tensor::Tensor;

/// Pose factor: everything geometric about one figure.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GlyphPose {
    /// Pelvis position as canvas fractions.
    pub root: (f64, f64),
    /// Torso tilt from vertical, radians.
    pub torso_angle: f64,
    /// Left arm, right arm, left leg, right leg: swing from straight down.
    pub limb_angles: [f64; 4],
    pub scale: f64,
}

/// Appearance factor: colors and texture, independent of pose.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GlyphAppearance {
    pub body_hsv: (f64, f64, f64),
    pub limb_hsv: (f64, f64, f64),
    pub head_hsv: (f64, f64, f64),
    /// Full stripe periods across the canvas diagonal, in `[0, 4]`.
    pub stripe_freq: f64,
    pub stripe_phase: f64,
    /// Background gray level.
    pub background: f64,
}

// Body geometry as canvas fractions (times `scale`).
const TORSO_LEN: f64 = 0.25;
const HEAD_GAP: f64 = 0.065;
const HEAD_RADIUS: f64 = 0.085;
const ARM_LEN: f64 = 0.24;
const LEG_LEN: f64 = 0.28;
const TORSO_RADIUS: f64 = 0.058;
const LIMB_RADIUS: f64 = 0.032;

/// Fixed marker hues, one per joint, drawn on top of the figure. These are
/// part of the glyph design (like colored mittens), not of the sampled
/// appearance, so a joint detector can key on them.
pub const MARKER_HUES: [f64; JOINT_COUNT] =
    [0.0, 40.0, 80.0, 120.0, 160.0, 200.0, 240.0, 280.0, 320.0];

/// Marker disc radius in pixels at canvas size `size`.
pub fn marker_radius(size: usize) -> f64 {
    0.05 * size as f64
}

/// Minimum pairwise hue separation of the three appearance colors.
pub const HUE_SEPARATION: f64 = 15.0;

fn hue_dist(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(360.0);
    d.min(360.0 - d)
}

/// Draw pose and appearance from independent distributions.
pub fn sample_factors(rng: &mut Rng) -> (GlyphPose, GlyphAppearance) {
    let pose = GlyphPose {
        root: (rng.range(0.40, 0.60), rng.range(0.52, 0.62)),
        torso_angle: rng.range(-0.22, 0.22),
        limb_angles: [
            rng.range(0.45, 1.25),
            rng.range(0.45, 1.25),
            rng.range(0.10, 0.50),
            rng.range(0.10, 0.50),
        ],
        scale: rng.range(0.90, 1.08),
    };
    // Hues are re-sampled until pairwise separated so each appearance is
    // identifiable.
    let (bh, lh, hh) = loop {
        let bh = rng.range(0.0, 360.0);
        let lh = rng.range(0.0, 360.0);
        let hh = rng.range(0.0, 360.0);
        if hue_dist(bh, lh) >= HUE_SEPARATION
            && hue_dist(bh, hh) >= HUE_SEPARATION
            && hue_dist(lh, hh) >= HUE_SEPARATION
        {
            break (bh, lh, hh);
        }
    };
    let mut sv = |_: ()| (rng.range(0.50, 0.85), rng.range(0.55, 0.90));
    let (bs, bv) = sv(());
    let (ls, lv) = sv(());
    let (hs, hv) = sv(());
    let appearance = GlyphAppearance {
        body_hsv: (bh, bs, bv),
        limb_hsv: (lh, ls, lv),
        head_hsv: (hh, hs, hv),
        stripe_freq: rng.range(0.0, 4.0),
        stripe_phase: rng.range(0.0, std::f64::consts::TAU),
        background: rng.range(0.08, 0.35),
    };
    (pose, appearance)
}

/// Joint positions in pixel coordinates at canvas size `size`; the head
/// joint sits at the head-disc center. A joint closer than 2 px to the
/// border (or outside) is marked invisible.
pub fn pose_joints(pose: &GlyphPose, size: usize) -> KeypointSet {
    let s = size as f64;
    let sc = pose.scale * s;
    let (rx, ry) = (pose.root.0 * s, pose.root.1 * s);
    let up = (pose.torso_angle.sin(), -pose.torso_angle.cos());
    let neck = (rx + TORSO_LEN * sc * up.0, ry + TORSO_LEN * sc * up.1);
    let head = (
        neck.0 + (HEAD_GAP + HEAD_RADIUS) * sc * up.0,
        neck.1 + (HEAD_GAP + HEAD_RADIUS) * sc * up.1,
    );
    // Limbs swing from straight down; arms mirror left/right.
    let swing = |base: (f64, f64), angle: f64, len: f64, toward_left: bool| {
        let sgn = if toward_left { -1.0 } else { 1.0 };
        (
            base.0 + sgn * angle.sin() * len * sc,
            base.1 + angle.cos() * len * sc,
        )
    };
    let l_hand = swing(neck, pose.limb_angles[0], ARM_LEN, true);
    let r_hand = swing(neck, pose.limb_angles[1], ARM_LEN, false);
    let l_elbow = ((neck.0 + l_hand.0) / 2.0, (neck.1 + l_hand.1) / 2.0);
    let r_elbow = ((neck.0 + r_hand.0) / 2.0, (neck.1 + r_hand.1) / 2.0);
    let l_foot = swing((rx, ry), pose.limb_angles[2], LEG_LEN, true);
    let r_foot = swing((rx, ry), pose.limb_angles[3], LEG_LEN, false);

    let points = [
        head,
        neck,
        (rx, ry),
        l_elbow,
        l_hand,
        r_elbow,
        r_hand,
        l_foot,
        r_foot,
    ];
    let joints = points
        .iter()
        .map(|&(x, y)| {
            let visible = x >= 2.0 && x <= s - 2.0 && y >= 2.0 && y <= s - 2.0;
            Joint {
                x: x as f32,
                y: y as f32,
                visible,
            }
        })
        .collect();
    KeypointSet { joints }
}

fn dist_segment(px: f64, py: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len_sq = dx * dx + dy * dy;
    let t = if len_sq <= f64::EPSILON {
        0.0
    } else {
        (((px - a.0) * dx + (py - a.1) * dy) / len_sq).clamp(0.0, 1.0)
    };
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    ((px - cx) * (px - cx) + (py - cy) * (py - cy)).sqrt()
}

struct Capsule {
    a: (f64, f64),
    b: (f64, f64),
    radius: f64,
    color: [f32; 3],
    striped: bool,
}

/// Render the figure and also return its anti-aliased coverage field
/// (`[1, size, size]`), which depends on the pose alone.
pub fn render_glyph_with_coverage(
    pose: &GlyphPose,
    appearance: &GlyphAppearance,
    size: usize,
) -> (Tensor<f32>, Tensor<f32>) {
    let s = size as f64;
    let sc = pose.scale * s;
    let k = pose_joints(pose, size);
    let p = |i: usize| (k.joints[i].x as f64, k.joints[i].y as f64);

    let body = hsv_to_rgb(
        appearance.body_hsv.0,
        appearance.body_hsv.1,
        appearance.body_hsv.2,
    );
    let limb = hsv_to_rgb(
        appearance.limb_hsv.0,
        appearance.limb_hsv.1,
        appearance.limb_hsv.2,
    );
    let head = hsv_to_rgb(
        appearance.head_hsv.0,
        appearance.head_hsv.1,
        appearance.head_hsv.2,
    );

    let mut parts = vec![
        // Torso capsule pelvis-neck.
        Capsule {
            a: p(2),
            b: p(1),
            radius: TORSO_RADIUS * sc,
            color: body,
            striped: true,
        },
    ];
    // Limb capsules: neck-hand and pelvis-foot (elbows sit on the segment).
    for (a, b) in [(1, 4), (1, 6), (2, 7), (2, 8)] {
        parts.push(Capsule {
            a: p(a),
            b: p(b),
            radius: LIMB_RADIUS * sc,
            color: limb,
            striped: true,
        });
    }
    // Head disc.
    parts.push(Capsule {
        a: p(0),
        b: p(0),
        radius: HEAD_RADIUS * sc,
        color: head,
        striped: true,
    });
    // Joint markers, fixed hues, on top, never striped. The radius tracks
    // the figure scale so the marker-to-figure area ratio stays put.
    let mr = marker_radius(size) * pose.scale;
    for (j, &hue) in MARKER_HUES.iter().enumerate() {
        parts.push(Capsule {
            a: p(j),
            b: p(j),
            radius: mr,
            color: hsv_to_rgb(hue, 1.0, 1.0),
            striped: false,
        });
    }

    let bg = appearance.background as f32;
    let mut img = vec![bg; 3 * size * size];
    let mut coverage = vec![0.0f32; size * size];
    let diag = std::f64::consts::SQRT_2 * s;
    for part in &parts {
        let reach = part.radius + 1.0;
        let x0 = ((part.a.0.min(part.b.0) - reach).floor().max(0.0)) as usize;
        let y0 = ((part.a.1.min(part.b.1) - reach).floor().max(0.0)) as usize;
        let x1 = (((part.a.0.max(part.b.0) + reach).ceil() as usize) + 1).min(size);
        let y1 = (((part.a.1.max(part.b.1) + reach).ceil() as usize) + 1).min(size);
        for py in y0..y1 {
            for px in x0..x1 {
                let (cx, cy) = (px as f64 + 0.5, py as f64 + 0.5);
                let d = dist_segment(cx, cy, part.a, part.b);
                let alpha = (part.radius + 0.5 - d).clamp(0.0, 1.0) as f32;
                if alpha <= 0.0 {
                    continue;
                }
                let modulation = if part.striped && appearance.stripe_freq > 0.0 {
                    let u = (cx + cy) / (2.0 * diag) * std::f64::consts::SQRT_2;
                    let phase = std::f64::consts::TAU * appearance.stripe_freq * u
                        + appearance.stripe_phase;
                    (1.0 - 0.3 * (0.5 + 0.5 * phase.sin())) as f32
                } else {
                    1.0
                };
                let idx = py * size + px;
                coverage[idx] = coverage[idx].max(alpha);
                for ch in 0..3 {
                    let dst = &mut img[ch * size * size + idx];
                    *dst = *dst * (1.0 - alpha) + part.color[ch] * modulation * alpha;
                }
            }
        }
    }
    (
        Tensor::new(vec![3, size, size], img).expect("sized buffer"),
        Tensor::new(vec![1, size, size], coverage).expect("sized buffer"),
    )
}

/// Deterministic rasterization of one glyph.
pub fn render_glyph(pose: &GlyphPose, appearance: &GlyphAppearance, size: usize) -> Tensor<f32> {
    render_glyph_with_coverage(pose, appearance, size).0
}

/// The image a perfect transfer would produce: target pose, source
/// appearance.
pub fn oracle_transfer_target(
    pose: &GlyphPose,
    appearance: &GlyphAppearance,
    size: usize,
) -> Tensor<f32> {
    render_glyph(pose, appearance, size)
}

fn floats_csv(vals: &[f64]) -> String {
    let mut s = String::new();
    for (i, v) in vals.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        let _ = write!(s, "{v:?}");
    }
    s
}

fn parse_floats_csv(s: &str, want: usize, file: &str, line: usize) -> Result<Vec<f64>> {
    let vals: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Parse {
            file: file.to_string(),
            line,
            msg: format!("bad float list: {e}"),
        })?;
    if vals.len() != want {
        return Err(Error::Parse {
            file: file.to_string(),
            line,
            msg: format!("expected {want} floats, got {}", vals.len()),
        });
    }
    Ok(vals)
}

impl GlyphPose {
    pub fn to_csv(&self) -> String {
        floats_csv(&[
            self.root.0,
            self.root.1,
            self.torso_angle,
            self.limb_angles[0],
            self.limb_angles[1],
            self.limb_angles[2],
            self.limb_angles[3],
            self.scale,
        ])
    }

    pub fn from_csv(s: &str, file: &str, line: usize) -> Result<Self> {
        let v = parse_floats_csv(s, 8, file, line)?;
        Ok(GlyphPose {
            root: (v[0], v[1]),
            torso_angle: v[2],
            limb_angles: [v[3], v[4], v[5], v[6]],
            scale: v[7],
        })
    }
}

impl GlyphAppearance {
    pub fn to_csv(&self) -> String {
        floats_csv(&[
            self.body_hsv.0,
            self.body_hsv.1,
            self.body_hsv.2,
            self.limb_hsv.0,
            self.limb_hsv.1,
            self.limb_hsv.2,
            self.head_hsv.0,
            self.head_hsv.1,
            self.head_hsv.2,
            self.stripe_freq,
            self.stripe_phase,
            self.background,
        ])
    }

    pub fn from_csv(s: &str, file: &str, line: usize) -> Result<Self> {
        let v = parse_floats_csv(s, 12, file, line)?;
        Ok(GlyphAppearance {
            body_hsv: (v[0], v[1], v[2]),
            limb_hsv: (v[3], v[4], v[5]),
            head_hsv: (v[6], v[7], v[8]),
            stripe_freq: v[9],
            stripe_phase: v[10],
            background: v[11],
        })
    }
}

/// 90/10 train/validation split by seeded hash of the image id.
pub fn is_validation(seed: u64, image_id: &str) -> bool {
    stable_hash(seed, &format!("split.{image_id}")).is_multiple_of(10)
}

/// Read `seed=` back out of a manifest written by [`generate_dataset`].
pub fn manifest_seed(path: &Path) -> Result<u64> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    for line in text.lines() {
        if let Some(rest) = line.strip_prefix("# synthglyph") {
            for tok in rest.split_whitespace() {
                if let Some(v) = tok.strip_prefix("seed=") {
                    return v
                        .parse()
                        .map_err(|_| Error::Data(format!("bad seed in {}", path.display())));
                }
            }
        }
    }
    Err(Error::Data(format!(
        "{}: no `# synthglyph seed=` header",
        path.display()
    )))
}

/// Generate `n` samples: PPM images, one manifest (with keypoint records)
/// and one factors sidecar keyed by image id. Sample `i` draws from the rng
/// stream `(seed, "sample", i)`, so regeneration is bitwise identical and
/// generation can fan out over threads.
pub fn generate_dataset(n: usize, size: usize, seed: u64, out_dir: &Path) -> Result<PathBuf> {
    let images = out_dir.join("images");
    fs::create_dir_all(&images)?;

    let rendered: Vec<(String, GlyphPose, GlyphAppearance, Tensor<f32>, KeypointSet)> =
        par::map_indexed(n, |i| {
            let mut rng = Rng::derive_indexed(seed, "sample", i as u64);
            let (pose, appearance) = sample_factors(&mut rng);
            let img = render_glyph(&pose, &appearance, size);
            let joints = pose_joints(&pose, size);
            (format!("g{i:05}"), pose, appearance, img, joints)
        });

    let mut manifest = format!("# synthglyph seed={seed} size={size} n={n}\n");
    let mut factors = String::from("# image_id\tpose\tappearance\n");
    for (id, pose, appearance, img, joints) in &rendered {
        let rel = format!("images/{id}.ppm");
        save_ppm(&out_dir.join(&rel), img)?;
        let _ = writeln!(manifest, "{rel}\t{id} {}", joints.fields());
        let _ = writeln!(factors, "{id}\t{}\t{}", pose.to_csv(), appearance.to_csv());
    }
    let manifest_path = out_dir.join("manifest.tsv");
    fs::write(&manifest_path, manifest)?;
    fs::write(out_dir.join("factors.tsv"), factors)?;
    Ok(manifest_path)
}

/// Load the factors sidecar.
pub fn load_factors(path: &Path) -> Result<Vec<(String, GlyphPose, GlyphAppearance)>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    let file = path.display().to_string();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim_end();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut cols = line.split('\t');
        let (id, pose_s, app_s) = match (cols.next(), cols.next(), cols.next()) {
            (Some(a), Some(b), Some(c)) => (a, b, c),
            _ => {
                return Err(Error::Parse {
                    file,
                    line: line_no,
                    msg: "expected `id<TAB>pose<TAB>appearance`".into(),
                })
            }
        };
        out.push((
            id.to_string(),
            GlyphPose::from_csv(pose_s, &file, line_no)?,
            GlyphAppearance::from_csv(app_s, &file, line_no)?,
        ));
    }
    Ok(out)
}
