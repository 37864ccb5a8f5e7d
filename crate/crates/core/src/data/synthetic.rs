//! Procedural occluded re-identification dataset.
//!
//! Each identity is a fixed parameter set (part colours, stripe pattern,
//! build, accessory). Cameras differ in background, static scene clutter
//! and a colour gain. Occluded images get an object in front of the figure
//! covering 20–60% of its bounding box.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::image::Image;
use super::manifest::{Manifest, Record, Split};
use crate::error::{Error, Result};
use crate::params::stream_rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OccluderKind {
    Rectangles,
    Bars,
    ScenePatches,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    /// Training identities; ids `0..num_identities`.
    pub num_identities: usize,
    pub images_per_identity: usize,
    /// Held-out identities for query/gallery, ids offset by `num_identities`.
    pub num_test_identities: usize,
    pub query_per_identity: usize,
    pub gallery_per_identity: usize,
    pub num_cameras: usize,
    /// Probability that a query image is occluded.
    pub occlusion_rate: f64,
    /// Probability that a training image is occluded.
    pub train_occlusion_rate: f64,
    pub occluder_kinds: Vec<OccluderKind>,
    pub image_height: usize,
    pub image_width: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_identities: 10,
            images_per_identity: 8,
            num_test_identities: 10,
            query_per_identity: 2,
            gallery_per_identity: 4,
            num_cameras: 4,
            occlusion_rate: 1.0,
            train_occlusion_rate: 0.3,
            occluder_kinds: vec![
                OccluderKind::Rectangles,
                OccluderKind::Bars,
                OccluderKind::ScenePatches,
            ],
            image_height: 64,
            image_width: 32,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_identities == 0 || self.images_per_identity == 0 || self.num_cameras == 0 {
            return bad(
                "num_identities, images_per_identity and num_cameras must be positive".into(),
            );
        }
        if self.num_test_identities > 0
            && (self.query_per_identity == 0 || self.gallery_per_identity < 2)
        {
            return bad("each test identity needs >= 1 query and >= 2 gallery images".into());
        }
        if self.num_test_identities > 0 && self.num_cameras < 2 {
            return bad("query/gallery splits need at least 2 cameras".into());
        }
        for (name, r) in [
            ("occlusion_rate", self.occlusion_rate),
            ("train_occlusion_rate", self.train_occlusion_rate),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return bad(format!("{name} must be in [0, 1], got {r}"));
            }
        }
        if self.occluder_kinds.is_empty()
            && (self.occlusion_rate > 0.0 || self.train_occlusion_rate > 0.0)
        {
            return bad("occluder_kinds is empty but occlusion is requested".into());
        }
        if self.image_height < 16 || self.image_width < 8 {
            return bad(format!(
                "image size {}×{} too small",
                self.image_height, self.image_width
            ));
        }
        Ok(())
    }
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor();
    let f = h - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn random_colour(rng: &mut ChaCha8Rng) -> [f64; 3] {
    hsv(
        rng.random::<f64>(),
        rng.random_range(0.45..0.95),
        rng.random_range(0.35..0.95),
    )
}

/// Fixed appearance of one identity.
#[derive(Clone, Debug)]
struct Identity {
    skin: [f64; 3],
    hair: [f64; 3],
    top: [f64; 3],
    stripe: [f64; 3],
    stripe_period: usize,
    stripe_phase: usize,
    bottom: [f64; 3],
    shoes: [f64; 3],
    /// Figure width as a fraction of image width.
    build: f64,
    bag: Option<[f64; 3]>,
}

impl Identity {
    fn sample(seed: u64, id: usize) -> Self {
        let mut rng = stream_rng(seed, &format!("synthetic/identity/{id}"));
        let skin_tone = rng.random_range(0.35..0.85);
        Identity {
            skin: [skin_tone, skin_tone * 0.78, skin_tone * 0.62],
            hair: hsv(rng.random_range(0.0..0.12), 0.6, rng.random_range(0.1..0.5)),
            top: random_colour(&mut rng),
            stripe: random_colour(&mut rng),
            stripe_period: rng.random_range(3..7),
            stripe_phase: rng.random_range(0..6),
            bottom: random_colour(&mut rng),
            shoes: hsv(rng.random::<f64>(), 0.3, rng.random_range(0.1..0.6)),
            build: rng.random_range(0.42..0.68),
            bag: rng.random_bool(0.5).then(|| random_colour(&mut rng)),
        }
    }
}

/// Fixed look of one camera view.
#[derive(Clone, Debug)]
struct Camera {
    floor: [f64; 3],
    wall: [f64; 3],
    gain: [f64; 3],
    clutter: Vec<(f64, f64, f64, f64, [f64; 3])>,
}

impl Camera {
    fn sample(seed: u64, cam: usize) -> Self {
        let mut rng = stream_rng(seed, &format!("synthetic/camera/{cam}"));
        let base = rng.random::<f64>();
        let clutter = (0..rng.random_range(2..5))
            .map(|_| {
                let w = rng.random_range(0.08..0.3);
                let h = rng.random_range(0.15..0.6);
                (
                    rng.random_range(0.0..1.0 - w),
                    rng.random_range(0.05..0.9 - h),
                    w,
                    h,
                    random_colour(&mut rng),
                )
            })
            .collect();
        Camera {
            floor: hsv(base + 0.5, 0.2, rng.random_range(0.3..0.6)),
            wall: hsv(
                base,
                rng.random_range(0.1..0.35),
                rng.random_range(0.45..0.85),
            ),
            gain: [
                rng.random_range(0.85..1.15),
                rng.random_range(0.85..1.15),
                rng.random_range(0.85..1.15),
            ],
            clutter,
        }
    }
}

struct Frame {
    top: usize,
    bottom: usize,
    left: usize,
    right: usize,
}

fn frac(v: f64, n: usize) -> usize {
    ((v * n as f64).round() as usize).min(n)
}

fn render_background(img: &mut Image, cam: &Camera, rng: &mut ChaCha8Rng) {
    let (h, w) = (img.height, img.width);
    let horizon = frac(rng.random_range(0.55..0.7), h);
    img.fill_rect(0, 0, horizon, w, cam.wall);
    img.fill_rect(horizon, 0, h - horizon, w, cam.floor);
    let dx = rng.random_range(-0.08..0.08);
    for &(x, y, cw, ch, c) in &cam.clutter {
        let x0 = ((x + dx).clamp(0.0, 1.0) * w as f64) as usize;
        img.fill_rect(frac(y, h), x0, frac(ch, h).max(1), frac(cw, w).max(1), c);
    }
}

fn render_figure(img: &mut Image, who: &Identity, rng: &mut ChaCha8Rng) -> Frame {
    let (h, w) = (img.height, img.width);
    let height = rng.random_range(0.78..0.92);
    let top = frac(rng.random_range(0.02..(0.98 - height)), h);
    let fig_h = frac(height, h);
    let fig_w = frac(who.build + rng.random_range(-0.04..0.04), w).max(4);
    let cx = frac(0.5 + rng.random_range(-0.1..0.1), w);
    let left = cx.saturating_sub(fig_w / 2).min(w - fig_w);
    let at = |f: f64| top + frac(f, fig_h);

    let head_w = (fig_w * 2 / 5).max(2);
    let head_x = left + (fig_w - head_w) / 2;
    img.fill_rect(at(0.0), head_x, at(0.04) - at(0.0), head_w, who.hair);
    img.fill_rect(at(0.04), head_x, at(0.15) - at(0.04), head_w, who.skin);
    let (t0, t1) = (at(0.15), at(0.52));
    for y in t0..t1.min(h) {
        let striped = (y - t0 + who.stripe_phase) % who.stripe_period == 0;
        img.fill_rect(
            y,
            left,
            1,
            fig_w,
            if striped { who.stripe } else { who.top },
        );
    }
    let arm = (fig_w / 6).max(1);
    img.fill_rect(at(0.45), left, at(0.52) - at(0.45), arm, who.skin);
    img.fill_rect(
        at(0.45),
        left + fig_w - arm,
        at(0.52) - at(0.45),
        arm,
        who.skin,
    );
    let (l0, l1) = (at(0.52), at(0.95));
    let leg_w = (fig_w * 2 / 5).max(1);
    img.fill_rect(l0, left + fig_w / 10, l1 - l0, leg_w, who.bottom);
    img.fill_rect(
        l0,
        left + fig_w - fig_w / 10 - leg_w,
        l1 - l0,
        leg_w,
        who.bottom,
    );
    img.fill_rect(
        l0,
        left + fig_w / 10,
        at(0.6) - l0,
        fig_w - 2 * (fig_w / 10),
        who.bottom,
    );
    img.fill_rect(
        l1,
        left + fig_w / 10,
        at(1.0) - l1,
        fig_w - 2 * (fig_w / 10),
        who.shoes,
    );
    if let Some(bag) = who.bag {
        let bw = (fig_w / 4).max(2);
        let side = if rng.random_bool(0.5) {
            left.saturating_sub(bw / 2)
        } else {
            (left + fig_w - bw / 2).min(w - bw)
        };
        img.fill_rect(at(0.3), side, at(0.55) - at(0.3), bw, bag);
    }
    Frame {
        top,
        bottom: (top + fig_h).min(h),
        left,
        right: (left + fig_w).min(w),
    }
}

/// Paints an occluder over `frame` and returns the covered fraction of the frame.
fn render_occluder(
    img: &mut Image,
    frame: &Frame,
    kind: OccluderKind,
    cam: &Camera,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let (h, w) = (img.height, img.width);
    let fh = frame.bottom - frame.top;
    let fw = frame.right - frame.left;
    let target = rng.random_range(0.2..0.6);
    let mut covered = vec![false; h * w];
    let mut paint = |img: &mut Image,
                     y0: usize,
                     x0: usize,
                     rh: usize,
                     rw: usize,
                     colour: &dyn Fn(usize, usize) -> [f64; 3]| {
        for y in y0..(y0 + rh).min(h) {
            for x in x0..(x0 + rw).min(w) {
                img.set(y, x, colour(y, x));
                covered[y * w + x] = true;
            }
        }
    };
    match kind {
        OccluderKind::Rectangles => {
            let c = random_colour(rng);
            match rng.random_range(0..3) {
                0 => {
                    let rh = frac(target, fh).max(1);
                    paint(img, frame.bottom - rh, 0, rh, w, &|_, _| c);
                }
                1 => {
                    let rw = frac(target, fw).max(1);
                    paint(
                        img,
                        frame.top,
                        frame.left.saturating_sub(2),
                        fh,
                        rw + 2,
                        &|_, _| c,
                    );
                }
                _ => {
                    let rw = frac(target, fw).max(1);
                    paint(
                        img,
                        frame.top,
                        frame.right.saturating_sub(rw),
                        fh,
                        w,
                        &|_, _| c,
                    );
                }
            }
        }
        OccluderKind::Bars => {
            let c = random_colour(rng);
            if rng.random_bool(0.5) {
                let n = rng.random_range(2..4usize);
                let bw = (frac(target, fw) / n).max(1);
                let gap = fw / n;
                let off = rng.random_range(0..gap.max(1));
                for i in 0..n {
                    paint(img, 0, frame.left + off + i * gap, h, bw, &|_, _| c);
                }
            } else {
                let bh = frac(target, fh).max(1);
                let y0 = frame.top + rng.random_range(0..(fh - bh).max(1));
                paint(img, y0, 0, bh, w, &|_, _| c);
            }
        }
        OccluderKind::ScenePatches => {
            let (_, _, _, _, base) = cam.clutter[rng.random_range(0..cam.clutter.len())];
            let alt = cam.wall;
            let period = rng.random_range(2..5usize);
            let rh = frac(target, fh).max(1);
            let y0 = if rng.random_bool(0.7) {
                frame.bottom - rh
            } else {
                frame.top
            };
            let x0 = frame
                .left
                .saturating_sub(frac(rng.random_range(0.0..0.2), w));
            let rw = (fw + frac(0.2, w)).min(w - x0);
            paint(img, y0, x0, rh, rw, &|y, x| {
                if (x / period + y / period) % 2 == 0 {
                    base
                } else {
                    alt
                }
            });
        }
    }
    let mut hit = 0;
    for y in frame.top..frame.bottom {
        for x in frame.left..frame.right {
            hit += covered[y * w + x] as usize;
        }
    }
    hit as f64 / (fh * fw).max(1) as f64
}

fn finish(img: &mut Image, cam: &Camera, rng: &mut ChaCha8Rng) {
    for px in img.data.chunks_exact_mut(3) {
        for (v, g) in px.iter_mut().zip(cam.gain) {
            *v = (*v * g + rng.random_range(-0.03..0.03)).clamp(0.0, 1.0);
        }
    }
}

/// One rendered sample and its metadata.
pub struct Rendered {
    pub image: Image,
    pub occluded: bool,
    pub occluded_fraction: f64,
}

/// Renders identity `id` seen by `camera`; stream `key` seeds the pose and occluder.
pub fn render(
    spec: &SyntheticSpec,
    id: usize,
    camera: usize,
    occlude: bool,
    key: &str,
) -> Rendered {
    let who = Identity::sample(spec.seed, id);
    let cam = Camera::sample(spec.seed, camera);
    let mut rng = stream_rng(spec.seed, &format!("synthetic/image/{key}"));
    let mut img = Image::new(spec.image_height, spec.image_width);
    render_background(&mut img, &cam, &mut rng);
    let frame = render_figure(&mut img, &who, &mut rng);
    let mut fraction = 0.0;
    if occlude {
        let kind = spec.occluder_kinds[rng.random_range(0..spec.occluder_kinds.len())];
        fraction = render_occluder(&mut img, &frame, kind, &cam, &mut rng);
    }
    finish(&mut img, &cam, &mut rng);
    Rendered {
        image: img,
        occluded: occlude,
        occluded_fraction: fraction,
    }
}

struct Planned {
    split: Split,
    id: usize,
    camera: usize,
    occluded: bool,
    key: String,
}

fn plan(spec: &SyntheticSpec) -> Vec<Planned> {
    let mut out = Vec::new();
    let mut rng = stream_rng(spec.seed, "synthetic/plan");
    for id in 0..spec.num_identities {
        for n in 0..spec.images_per_identity {
            out.push(Planned {
                split: Split::Train,
                id,
                camera: n % spec.num_cameras,
                occluded: rng.random_bool(spec.train_occlusion_rate),
                key: format!("train/{id}/{n}"),
            });
        }
    }
    for t in 0..spec.num_test_identities {
        let id = spec.num_identities + t;
        let first = t % spec.num_cameras;
        for n in 0..spec.gallery_per_identity {
            let camera = (first + n) % spec.num_cameras;
            out.push(Planned {
                split: Split::Gallery,
                id,
                camera,
                occluded: false,
                key: format!("gallery/{id}/{n}"),
            });
        }
        for n in 0..spec.query_per_identity {
            // Query cameras avoid `first`, so a cross-camera gallery match always exists.
            let camera = (first + 1 + n % (spec.num_cameras - 1)) % spec.num_cameras;
            let occluded = rng.random_bool(spec.occlusion_rate);
            out.push(Planned {
                split: Split::Query,
                id,
                camera,
                occluded,
                key: format!("query/{id}/{n}"),
            });
        }
    }
    out
}

/// Renders the dataset into `out_dir` and writes `manifest.jsonl` there.
pub fn generate_synthetic(spec: &SyntheticSpec, out_dir: &Path) -> Result<Manifest> {
    spec.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut records = Vec::new();
    let mut counters = std::collections::BTreeMap::new();
    for p in plan(spec) {
        let n = counters.entry((p.split, p.id)).or_insert(0usize);
        let rel = PathBuf::from("images").join(p.split.as_str()).join(format!(
            "{:04}_c{}_{:03}.png",
            p.id,
            p.camera + 1,
            *n
        ));
        *n += 1;
        let r = render(spec, p.id, p.camera, p.occluded, &p.key);
        r.image.save_png(&out_dir.join(&rel))?;
        records.push(Record {
            path: rel,
            identity_id: p.id,
            camera_id: p.camera,
            split: p.split,
            occluded: p.occluded,
        });
    }
    let manifest = Manifest {
        records,
        root: out_dir.to_path_buf(),
    };
    manifest.write(&out_dir.join(super::manifest::MANIFEST_FILE))?;
    Ok(manifest)
}
