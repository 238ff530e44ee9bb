use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const EMOTIONS: [&str; 7] = [
    "neutral",
    "happy",
    "sad",
    "surprised",
    "fearful",
    "disgusted",
    "angry",
];
pub const NUM_EMOTIONS: usize = EMOTIONS.len();
pub const IDENTITY_DIM: usize = 3;
pub const MIN_SIZE: usize = 8;

const BACKGROUND: f64 = 0.05;
const EYE_INK: f64 = 0.12;
const STROKE_INK: f64 = 0.06;
const EDGE: f64 = 0.35;

/// Fractional rectangles (rows, cols) that contain every emotion stroke.
const MOUTH_BOX: [f64; 4] = [0.55, 0.93, 0.15, 0.85];
const BROW_BOX: [f64; 4] = [0.06, 0.42, 0.08, 0.92];

/// Identity parameters (face width, eye spacing, skin tone) in `[-1, 1]`
/// and an emotion class.
#[derive(Clone, Debug, PartialEq)]
pub struct FaceSpec {
    pub identity: [f64; IDENTITY_DIM],
    pub emotion: usize,
}

impl FaceSpec {
    pub fn new(identity: [f64; IDENTITY_DIM], emotion: usize) -> Self {
        Self { identity, emotion }
    }
}

pub fn emotion_name(label: usize) -> Option<&'static str> {
    EMOTIONS.get(label).copied()
}

pub fn emotion_index(name: &str) -> Option<usize> {
    EMOTIONS.iter().position(|e| *e == name)
}

#[derive(Clone, Copy)]
struct Expression {
    curve: f64,
    open: f64,
    tilt: f64,
    brow_angle: f64,
    brow_raise: f64,
}

fn expression(emotion: usize) -> Expression {
    let e = |curve, open, tilt, brow_angle, brow_raise| Expression {
        curve,
        open,
        tilt,
        brow_angle,
        brow_raise,
    };
    match emotion {
        0 => e(0.0, 0.0, 0.0, 0.0, 0.0),
        1 => e(1.0, 0.35, 0.0, 0.0, 0.1),
        2 => e(-1.0, 0.0, 0.0, -1.0, 0.0),
        3 => e(0.0, 1.0, 0.0, 0.0, 1.0),
        4 => e(-0.4, 0.55, 0.0, -0.7, 0.7),
        5 => e(-0.3, 0.15, 0.9, 0.5, -0.4),
        _ => e(-0.2, 0.0, 0.0, 1.0, -0.8),
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn inside(frac: [f64; 4], size: f64, y: f64, x: f64) -> bool {
    y >= frac[0] * size && y <= frac[1] * size && x >= frac[2] * size && x <= frac[3] * size
}

/// True at pixels where emotion strokes may be drawn (mouth and brow boxes).
pub fn emotion_mask(size: usize) -> Vec<bool> {
    let s = size as f64;
    let mut m = Vec::with_capacity(size * size);
    for r in 0..size {
        for c in 0..size {
            let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
            m.push(inside(MOUTH_BOX, s, y, x) || inside(BROW_BOX, s, y, x));
        }
    }
    m
}

/// Renders a grayscale face as a `[size·size]` tensor in `[0, 1]`.
pub fn render_face(spec: &FaceSpec, size: usize) -> Result<Tensor> {
    if size < MIN_SIZE {
        return Err(Error::Range(format!(
            "render size {size} below minimum {MIN_SIZE}"
        )));
    }
    if spec.emotion >= NUM_EMOTIONS {
        return Err(Error::Label {
            label: spec.emotion,
            num_classes: NUM_EMOTIONS,
        });
    }
    if spec.identity.iter().any(|p| !(-1.0..=1.0).contains(p)) {
        return Err(Error::Range(format!(
            "identity parameters {:?} outside [-1, 1]",
            spec.identity
        )));
    }
    let s = size as f64;
    let [width, spacing, tone] = spec.identity;
    let ex = expression(spec.emotion);

    let (cx, cy) = (0.5 * s, 0.5 * s);
    let rx = s * (0.34 + 0.06 * width);
    let ry = s * 0.44;
    let skin = 0.62 + 0.2 * tone;
    let eye_dx = s * (0.17 + 0.045 * spacing);
    let eye_y = 0.42 * s;
    let eye_r = 0.075 * s;

    let mouth_y = 0.74 * s;
    let mouth_hw = 0.2 * s;
    let (amp, gape, thick) = (0.055 * s, 0.08 * s, 0.035 * s);
    let brow_y = 0.25 * s;
    let brow_dx = 0.19 * s;
    let brow_hl = 0.12 * s;
    let (raise, slope) = (0.06 * s, 0.065 * s);
    let soft = EDGE * s / 16.0;

    let mut data = Vec::with_capacity(size * size);
    for r in 0..size {
        for c in 0..size {
            let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
            let rho = (((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2)).sqrt();
            let face = sigmoid((1.0 - rho) * rx / soft);
            let mut v = BACKGROUND * (1.0 - face) + skin * face;
            for side in [-1.0, 1.0] {
                let d = ((x - cx - side * eye_dx).powi(2) + (y - eye_y).powi(2)).sqrt();
                let a = sigmoid((eye_r - d) / soft);
                v = v * (1.0 - a) + EYE_INK * a;
            }

            let mut ink: f64 = 0.0;
            if inside(MOUTH_BOX, s, y, x) {
                let u = (x - cx) / mouth_hw;
                let taper = sigmoid((1.0 - u.abs()) * mouth_hw / soft);
                let w = (1.0 - u * u).max(0.0);
                let centre = mouth_y + ex.curve * amp * (w - 0.5) + ex.tilt * amp * u;
                let half = thick + ex.open * gape * w.sqrt();
                ink = ink.max(taper * sigmoid((half - (y - centre).abs()) / soft));
            }
            if inside(BROW_BOX, s, y, x) {
                for side in [-1.0, 1.0] {
                    // v runs from the outer end (-1) to the inner end (+1)
                    let t = -side * (x - cx - side * brow_dx) / brow_hl;
                    let taper = sigmoid((1.0 - t.abs()) * brow_hl / soft);
                    let centre = brow_y - ex.brow_raise * raise + ex.brow_angle * slope * t;
                    ink = ink.max(taper * sigmoid((thick - (y - centre).abs()) / soft));
                }
            }
            v = v * (1.0 - ink) + STROKE_INK * ink;
            data.push(v.clamp(0.0, 1.0));
        }
    }
    Tensor::new(&[size * size], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;

    #[test]
    fn deterministic() {
        let spec = FaceSpec::new([0.3, -0.2, 0.5], 4);
        assert_eq!(
            render_face(&spec, 16).unwrap(),
            render_face(&spec, 16).unwrap()
        );
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(render_face(&FaceSpec::new([0.0; 3], 0), 7).is_err());
        assert!(render_face(&FaceSpec::new([0.0; 3], 7), 16).is_err());
        assert!(render_face(&FaceSpec::new([1.5, 0.0, 0.0], 0), 16).is_err());
    }

    #[test]
    fn emotion_changes_stay_inside_masks() {
        let mut rng = RngStream::new(11, 0);
        let mask = emotion_mask(16);
        for _ in 0..50 {
            let id = [
                rng.uniform() * 2.0 - 1.0,
                rng.uniform() * 2.0 - 1.0,
                rng.uniform() * 2.0 - 1.0,
            ];
            let a = rng.uniform_int(0, NUM_EMOTIONS - 1);
            let b = rng.uniform_int(0, NUM_EMOTIONS - 1);
            let xa = render_face(&FaceSpec::new(id, a), 16).unwrap();
            let xb = render_face(&FaceSpec::new(id, b), 16).unwrap();
            for (i, (p, q)) in xa.data().iter().zip(xb.data()).enumerate() {
                if !mask[i] {
                    assert_eq!(p, q, "pixel {i} changed outside the emotion mask");
                }
            }
        }
    }

    #[test]
    fn every_pair_of_classes_is_visibly_different() {
        let id = [0.0; 3];
        let imgs: Vec<Tensor> = (0..NUM_EMOTIONS)
            .map(|e| render_face(&FaceSpec::new(id, e), 16).unwrap())
            .collect();
        for i in 0..NUM_EMOTIONS {
            for j in i + 1..NUM_EMOTIONS {
                assert!(
                    imgs[i].sub(&imgs[j]).norm() > 0.5,
                    "{} vs {}",
                    EMOTIONS[i],
                    EMOTIONS[j]
                );
            }
        }
    }

    #[test]
    fn pixel_range_sweep() {
        let mut rng = RngStream::new(5, 1);
        for _ in 0..10_000 {
            let id = [
                rng.uniform() * 2.0 - 1.0,
                rng.uniform() * 2.0 - 1.0,
                rng.uniform() * 2.0 - 1.0,
            ];
            let x = render_face(&FaceSpec::new(id, rng.uniform_int(0, 6)), 16).unwrap();
            assert!(x.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn names_round_trip() {
        for (i, n) in EMOTIONS.iter().enumerate() {
            assert_eq!(emotion_index(n), Some(i));
            assert_eq!(emotion_name(i), Some(*n));
        }
    }
}
