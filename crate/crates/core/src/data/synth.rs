//! Procedural shape scenes over a smooth noise background.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{GenSpec, Sample};
use crate::Tensor;

/// Shape classes in label order, after background (0).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Disk,
    Rectangle,
    Triangle,
    Ring,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [ShapeKind::Disk, ShapeKind::Rectangle, ShapeKind::Triangle, ShapeKind::Ring];

    pub fn label(self) -> usize {
        self as usize + 1
    }

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Disk => "disk",
            ShapeKind::Rectangle => "rectangle",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Ring => "ring",
        }
    }
}

pub fn class_name(class: usize) -> &'static str {
    match class {
        0 => "background",
        c => ShapeKind::ALL.get(c - 1).map_or("unknown", |k| k.name()),
    }
}

/// A placed shape in pixel coordinates (pixel `i` covers `[i, i+1)`).
#[derive(Clone, Debug)]
pub struct Shape {
    pub kind: ShapeKind,
    pub cx: f64,
    pub cy: f64,
    /// Radius for disks and rings, half-extent otherwise.
    pub r: f64,
    /// Rectangle half-height ratio, ring inner-radius ratio.
    pub aspect: f64,
    pub angle: f64,
    pub color: [f64; 3],
}

impl Shape {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        match self.kind {
            ShapeKind::Disk => dx * dx + dy * dy <= self.r * self.r,
            ShapeKind::Ring => {
                let d2 = dx * dx + dy * dy;
                let inner = self.r * self.aspect;
                d2 <= self.r * self.r && d2 >= inner * inner
            }
            ShapeKind::Rectangle => dx.abs() <= self.r && dy.abs() <= self.r * self.aspect,
            ShapeKind::Triangle => {
                let v: Vec<(f64, f64)> = (0..3)
                    .map(|k| {
                        let a = self.angle + k as f64 * std::f64::consts::TAU / 3.0;
                        (self.cx + self.r * a.cos(), self.cy + self.r * a.sin())
                    })
                    .collect();
                let side = |(ax, ay): (f64, f64), (bx, by): (f64, f64)| (bx - ax) * (y - ay) - (by - ay) * (x - ax);
                let s = [side(v[0], v[1]), side(v[1], v[2]), side(v[2], v[0])];
                s.iter().all(|&t| t >= 0.0) || s.iter().all(|&t| t <= 0.0)
            }
        }
    }
}

/// Per-sample stream derived from the global seed and the sample id.
pub fn sample_rng(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

struct Background {
    base: [f64; 3],
    // (fx, fy, phase, amplitude) per channel
    waves: Vec<[(f64, f64, f64, f64); 3]>,
}

impl Background {
    fn draw(rng: &mut ChaCha8Rng) -> Self {
        let base = [rng.gen_range(0.25..0.75), rng.gen_range(0.25..0.75), rng.gen_range(0.25..0.75)];
        let waves = (0..3)
            .map(|_| {
                let mut w = [(0.0, 0.0, 0.0, 0.0); 3];
                for c in w.iter_mut() {
                    *c = (
                        rng.gen_range(-2.5..2.5),
                        rng.gen_range(-2.5..2.5),
                        rng.gen_range(0.0..std::f64::consts::TAU),
                        rng.gen_range(0.02..0.07),
                    );
                }
                w
            })
            .collect();
        Background { base, waves }
    }

    fn at(&self, c: usize, u: f64, v: f64) -> f64 {
        let mut val = self.base[c];
        for w in &self.waves {
            let (fx, fy, ph, amp) = w[c];
            val += amp * (std::f64::consts::TAU * (fx * u + fy * v) + ph).cos();
        }
        val
    }
}

/// Draws one shape of `kind` that fits a `size`×`size` canvas and contrasts
/// with the background base colour.
fn draw_shape(rng: &mut ChaCha8Rng, kind: ShapeKind, size: usize, bg: &[f64; 3]) -> Shape {
    let s = size as f64;
    let r = rng.gen_range(0.1 * s..0.25 * s);
    let cx = rng.gen_range(r * 0.5..s - r * 0.5);
    let cy = rng.gen_range(r * 0.5..s - r * 0.5);
    let aspect = match kind {
        ShapeKind::Rectangle => rng.gen_range(0.5..1.0),
        ShapeKind::Ring => rng.gen_range(0.45..0.65),
        _ => 1.0,
    };
    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
    let mut color = [0.0; 3];
    for _ in 0..32 {
        color = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
        let dist: f64 = color.iter().zip(bg).map(|(a, b)| (a - b).abs()).sum::<f64>() / 3.0;
        if dist >= 0.25 {
            break;
        }
    }
    Shape { kind, cx, cy, r, aspect, angle, color }
}

/// Random shapes for one scene, back to front.
pub fn draw_shapes(rng: &mut ChaCha8Rng, spec: &GenSpec, count: usize, bg: &[f64; 3]) -> Vec<Shape> {
    let kinds = &ShapeKind::ALL[..spec.classes - 1];
    (0..count)
        .map(|_| {
            let kind = kinds[rng.gen_range(0..kinds.len())];
            draw_shape(rng, kind, spec.size, bg)
        })
        .collect()
}

/// Rasterizes `shapes` over the background at pixel centres.
fn render(id: u64, size: usize, bg: &Background, shapes: &[Shape]) -> Sample {
    let hw = size * size;
    let mut image = vec![0.0; 3 * hw];
    let mut label = vec![0usize; hw];
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let (u, v) = (px / size as f64, py / size as f64);
            let mut rgb = [bg.at(0, u, v), bg.at(1, u, v), bg.at(2, u, v)];
            let mut cls = 0;
            for s in shapes {
                if s.contains(px, py) {
                    rgb = s.color;
                    cls = s.kind.label();
                }
            }
            for c in 0..3 {
                image[c * hw + y * size + x] = rgb[c].clamp(0.0, 1.0);
            }
            label[y * size + x] = cls;
        }
    }
    Sample { id, image: Tensor::new(&[3, size, size], image).expect("sized"), label }
}

/// The scene for sample `id`: 1 to 4 shapes drawn from the spec's classes.
pub fn generate_sample(seed: u64, id: u64, spec: &GenSpec) -> Sample {
    let mut rng = sample_rng(seed, id);
    let bg = Background::draw(&mut rng);
    let n = rng.gen_range(spec.min_shapes..=spec.max_shapes);
    let shapes = draw_shapes(&mut rng, spec, n, &bg.base);
    render(id, spec.size, &bg, &shapes)
}

/// Renders explicit shapes over the background sample `id` would get.
pub fn render_scene(seed: u64, id: u64, spec: &GenSpec, shapes: &[Shape]) -> Sample {
    let mut rng = sample_rng(seed, id);
    let bg = Background::draw(&mut rng);
    render(id, spec.size, &bg, shapes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> GenSpec {
        GenSpec::default()
    }

    #[test]
    fn empty_scene_is_background() {
        let s = render_scene(3, 0, &spec(), &[]);
        assert!(s.label.iter().all(|&l| l == 0));
        assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn centered_disk_area() {
        let size = 64;
        for r in [5.0, 10.0, 17.5, 25.0] {
            let disk = Shape {
                kind: ShapeKind::Disk,
                cx: size as f64 / 2.0,
                cy: size as f64 / 2.0,
                r,
                aspect: 1.0,
                angle: 0.0,
                color: [1.0, 0.0, 0.0],
            };
            let s = render_scene(0, 0, &GenSpec { size, ..spec() }, &[disk]);
            let count = s.label.iter().filter(|&&l| l == 1).count() as f64;
            let area = std::f64::consts::PI * r * r;
            assert!((count - area).abs() / area < 0.05, "r={r}: {count} vs {area}");
        }
    }

    #[test]
    fn later_shapes_occlude() {
        let big = Shape { kind: ShapeKind::Rectangle, cx: 32.0, cy: 32.0, r: 20.0, aspect: 1.0, angle: 0.0, color: [0.0; 3] };
        let small = Shape { kind: ShapeKind::Disk, r: 5.0, color: [1.0; 3], ..big.clone() };
        let s = render_scene(0, 0, &spec(), &[big.clone(), small.clone()]);
        assert_eq!(s.label[32 * 64 + 32], 1);
        assert_eq!(s.label[32 * 64 + 45], 2);
        let s = render_scene(0, 0, &spec(), &[small, big]);
        assert_eq!(s.label[32 * 64 + 32], 2);
    }

    #[test]
    fn shape_pixels_take_shape_colour() {
        let ring = Shape { kind: ShapeKind::Ring, cx: 30.0, cy: 34.0, r: 12.0, aspect: 0.5, angle: 0.0, color: [0.9, 0.1, 0.4] };
        let s = render_scene(2, 9, &spec(), &[ring.clone()]);
        let hw = 64 * 64;
        for y in 0..64 {
            for x in 0..64 {
                let (dx, dy) = (x as f64 + 0.5 - 30.0, y as f64 + 0.5 - 34.0);
                let d = (dx * dx + dy * dy).sqrt();
                let inside = (6.0..=12.0).contains(&d);
                let i = y * 64 + x;
                assert_eq!(s.label[i] == 4, inside, "({x},{y})");
                if inside {
                    assert_eq!([s.image.data()[i], s.image.data()[hw + i], s.image.data()[2 * hw + i]], ring.color);
                }
            }
        }
    }

    #[test]
    fn deterministic_and_id_dependent() {
        let a = generate_sample(7, 3, &spec());
        let b = generate_sample(7, 3, &spec());
        assert_eq!(a.image.data(), b.image.data());
        assert_eq!(a.label, b.label);
        let c = generate_sample(7, 4, &spec());
        assert_ne!(a.image.data(), c.image.data());
    }

    #[test]
    fn triangle_contains_centroid_not_far_point() {
        let t = Shape { kind: ShapeKind::Triangle, cx: 10.0, cy: 10.0, r: 5.0, aspect: 1.0, angle: 0.3, color: [0.0; 3] };
        assert!(t.contains(10.0, 10.0));
        assert!(!t.contains(16.0, 16.0));
        let ring = Shape { kind: ShapeKind::Ring, aspect: 0.5, ..t };
        assert!(!ring.contains(10.0, 10.0));
        assert!(ring.contains(14.0, 10.0));
    }
}
