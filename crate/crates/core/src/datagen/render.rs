//! Analytic toy scenes with exact ground truth under any lighting.
//!
//! World coordinates: the image covers the unit square of the `z = 0` plane,
//! pixel `(y, x)` sits at `((x + ½)/W, (y + ½)/H, 0)`, and the camera looks
//! down `-z` so the view vector is `(0, 0, 1)`.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::image::ImageTensor;
use crate::rng::Rng;
use crate::{Error, Result};

pub const FALLOFF_BETA: f64 = 1.0;
pub const DEFAULT_SHININESS: f64 = 16.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Luminaire {
    /// Grid position in unit-square coordinates.
    pub position: [f64; 2],
    pub height: f64,
    pub max_intensity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub y0: usize,
    pub x0: usize,
    pub y1: usize,
    pub x1: usize,
    pub value: [f32; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyScene {
    pub height: usize,
    pub width: usize,
    pub albedo: ImageTensor,
    /// Interleaved unit normals, `H·W·3`.
    pub normals: Vec<[f64; 3]>,
    pub luminaires: Vec<Luminaire>,
    pub ambient_range: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LightingParams {
    pub ambient: f64,
    pub lamp_states: Vec<f64>,
    pub specular_strength: f64,
    pub shininess: f64,
}

impl LightingParams {
    pub fn ambient_only(ambient: f64, lamps: usize) -> Self {
        Self {
            ambient,
            lamp_states: vec![0.0; lamps],
            specular_strength: 0.0,
            shininess: DEFAULT_SHININESS,
        }
    }

    pub fn validate(&self, scene: &ToyScene) -> Result<()> {
        if !(0.0..=1.0).contains(&self.ambient) {
            return Err(Error::invalid(format!("ambient {} outside [0, 1]", self.ambient)));
        }
        if self.lamp_states.len() != scene.luminaires.len() {
            return Err(Error::invalid(format!(
                "{} lamp states for {} luminaires",
                self.lamp_states.len(),
                scene.luminaires.len()
            )));
        }
        if self.lamp_states.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(Error::invalid("lamp states must lie in [0, 1]"));
        }
        if !(self.specular_strength >= 0.0) || !(self.shininess > 0.0) {
            return Err(Error::invalid("specular strength must be >= 0 and shininess > 0"));
        }
        Ok(())
    }
}

/// Normals for the three plane orientations a toy room uses.
const FLOOR: [f64; 3] = [0.0, 0.0, 1.0];
const BACK_WALL: [f64; 3] = [0.0, 0.6, 0.8];
const SIDE_WALL: [f64; 3] = [0.6, 0.0, 0.8];

impl ToyScene {
    /// A random room: floor with a back wall band along the top edge and a
    /// side wall band on one side, a flat background albedo overlaid with
    /// 3 to 6 rectangles, and 2 or 3 luminaires.
    pub fn random(rng: &mut Rng, height: usize, width: usize) -> Result<ToyScene> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("scene dims must be positive"));
        }
        let mut rects = vec![Rect {
            y0: 0,
            x0: 0,
            y1: height,
            x1: width,
            value: random_color(rng),
        }];
        for _ in 0..rng.random_range(3..=6) {
            let h = rng.random_range(height / 6..=height / 2).max(1);
            let w = rng.random_range(width / 6..=width / 2).max(1);
            let y0 = rng.random_range(0..=height - h);
            let x0 = rng.random_range(0..=width - w);
            rects.push(Rect {
                y0,
                x0,
                y1: y0 + h,
                x1: x0 + w,
                value: random_color(rng),
            });
        }
        let wall = rng.random_range(height / 8..=height / 4);
        let side = rng.random_range(width / 8..=width / 4);
        let side_left = rng.random_bool(0.5);
        let normals = (0..height * width)
            .map(|i| {
                let (y, x) = (i / width, i % width);
                if y < wall {
                    unit(BACK_WALL)
                } else if (side_left && x < side) || (!side_left && x >= width - side) {
                    let mut n = SIDE_WALL;
                    if !side_left {
                        n[0] = -n[0];
                    }
                    unit(n)
                } else {
                    FLOOR
                }
            })
            .collect();
        let luminaires = (0..rng.random_range(2..=3))
            .map(|_| Luminaire {
                position: [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)],
                height: rng.random_range(0.15..0.4),
                max_intensity: rng.random_range(0.5..1.0),
            })
            .collect();
        Ok(ToyScene {
            height,
            width,
            albedo: albedo_from_rects(height, width, &rects)?,
            normals,
            luminaires,
            ambient_range: [0.1, 0.4],
        })
    }

    /// A random lighting condition: ambient drawn from the scene's range, each
    /// lamp on with probability 0.6 at a random dimmer level.
    pub fn random_lighting(&self, rng: &mut Rng) -> LightingParams {
        let [lo, hi] = self.ambient_range;
        LightingParams {
            ambient: if hi > lo { rng.random_range(lo..hi) } else { lo },
            lamp_states: self
                .luminaires
                .iter()
                .map(|_| if rng.random_bool(0.6) { rng.random_range(0.4..=1.0) } else { 0.0 })
                .collect(),
            specular_strength: rng.random_range(0.0..0.3),
            shininess: DEFAULT_SHININESS,
        }
    }

    pub fn world_position(&self, y: usize, x: usize) -> [f64; 3] {
        [
            (x as f64 + 0.5) / self.width as f64,
            (y as f64 + 0.5) / self.height as f64,
            0.0,
        ]
    }

    pub fn normal_map(&self) -> Vec<[f64; 3]> {
        self.normals.clone()
    }
}

/// `I = clamp(albedo·[ambient + Σ s_j·max(0, n·l_j)/(1 + β d_j²)] + spec, 0, 1)`
/// with a Phong lobe `spec = k_s Σ s_j·max(0, r_j·v)^shininess/(1 + β d_j²)`.
/// Lamp strength `s_j` is the lamp state times its maximum intensity.
pub fn render_toy(scene: &ToyScene, params: &LightingParams) -> Result<ImageTensor> {
    params.validate(scene)?;
    let (h, w) = (scene.height, scene.width);
    let mut data = Vec::with_capacity(h * w * 3);
    let view = [0.0, 0.0, 1.0];
    for y in 0..h {
        for x in 0..w {
            let p = scene.world_position(y, x);
            let n = scene.normals[y * w + x];
            let mut diffuse = params.ambient;
            let mut spec = 0.0;
            for (lamp, &state) in scene.luminaires.iter().zip(&params.lamp_states) {
                let s = state * lamp.max_intensity;
                if s == 0.0 {
                    continue;
                }
                let to_lamp = [
                    lamp.position[0] - p[0],
                    lamp.position[1] - p[1],
                    lamp.height - p[2],
                ];
                let d2 = dot(to_lamp, to_lamp);
                let l = scale(to_lamp, 1.0 / d2.sqrt());
                let ndl = dot(n, l);
                let falloff = 1.0 + FALLOFF_BETA * d2;
                diffuse += s * ndl.max(0.0) / falloff;
                if params.specular_strength > 0.0 && ndl > 0.0 {
                    let r = sub(scale(n, 2.0 * ndl), l);
                    spec += s * dot(r, view).max(0.0).powf(params.shininess) / falloff;
                }
            }
            spec *= params.specular_strength;
            for c in 0..3 {
                let a = scene.albedo.get(y, x, c) as f64;
                data.push((a * diffuse + spec).clamp(0.0, 1.0) as f32);
            }
        }
    }
    ImageTensor::new(h, w, 3, data)
}

fn albedo_from_rects(h: usize, w: usize, rects: &[Rect]) -> Result<ImageTensor> {
    let mut data = vec![0f32; h * w * 3];
    for r in rects {
        for y in r.y0..r.y1.min(h) {
            for x in r.x0..r.x1.min(w) {
                data[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&r.value);
            }
        }
    }
    ImageTensor::new(h, w, 3, data)
}

fn random_color(rng: &mut Rng) -> [f32; 3] {
    [
        rng.random_range(0.2..0.95),
        rng.random_range(0.2..0.95),
        rng.random_range(0.2..0.95),
    ]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn scale(a: [f64; 3], s: f64) -> [f64; 3] {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn unit(a: [f64; 3]) -> [f64; 3] {
    scale(a, 1.0 / dot(a, a).sqrt())
}
