//! Deterministic synthetic street scenes.
//!
//! Every class is drawn from one or more templates (a parametric surface
//! with a height range, a footprint range, a point budget and an intensity
//! distribution). A class with two templates is *bimodal*: its instances
//! come in two disjoint height regimes, e.g. adults and children.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::cloud::PointCloud;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeFamily {
    /// Horizontal plane covering the whole scene extent.
    Ground,
    /// Thin vertical rectangle; the footprint is its length.
    Wall,
    /// Box surface without the bottom face; width is 45% of the length.
    Box,
    /// Lateral surface of a vertical cylinder; the footprint is its diameter.
    Cylinder,
    /// Ellipsoid resting on the ground.
    Ellipsoid,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Span {
    pub min: f32,
    pub max: f32,
}

impl Span {
    pub const fn new(min: f32, max: f32) -> Self {
        Span { min, max }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f32 {
        if self.max > self.min {
            rng.random_range(self.min..=self.max)
        } else {
            self.min
        }
    }

    fn disjoint(&self, other: &Span) -> bool {
        self.max < other.min || other.max < self.min
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Template {
    pub family: ShapeFamily,
    pub height: Span,
    pub footprint: Span,
    pub points: (u32, u32),
    pub intensity_mean: f32,
    pub intensity_std: f32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassSpec {
    pub name: String,
    pub templates: Vec<Template>,
    /// Inclusive range of instances per scene.
    pub instances: (u32, u32),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSceneConfig {
    /// Class `k` of the list has label `k + 1`.
    pub classes: Vec<ClassSpec>,
    /// Scenes cover `[-extent, extent]²` in the ground plane.
    pub extent: f32,
    /// Standard deviation of the isotropic coordinate jitter, in meters.
    pub jitter: f32,
    pub seed: u64,
}

impl SyntheticSceneConfig {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Labels of the classes with two templates.
    pub fn bimodal_classes(&self) -> Vec<u16> {
        self.classes
            .iter()
            .enumerate()
            .filter(|(_, c)| c.templates.len() == 2)
            .map(|(i, _)| i as u16 + 1)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::Config(
                "synthetic scenes need at least one class".into(),
            ));
        }
        if !(self.extent > 0.0) || !(self.jitter >= 0.0) {
            return Err(Error::Config(
                "extent must be positive and jitter non-negative".into(),
            ));
        }
        for (i, class) in self.classes.iter().enumerate() {
            let name = &class.name;
            match class.templates.len() {
                0 => return Err(Error::Config(format!("class {i} ({name}) has no template"))),
                1 => {}
                2 => {
                    let (a, b) = (&class.templates[0], &class.templates[1]);
                    if !a.height.disjoint(&b.height) {
                        return Err(Error::Config(format!(
                            "bimodal class {name} needs disjoint height ranges"
                        )));
                    }
                    if class.instances.0 < 2 {
                        return Err(Error::Config(format!(
                            "bimodal class {name} needs at least two instances per scene"
                        )));
                    }
                }
                n => {
                    return Err(Error::Config(format!(
                        "class {name} has {n} templates; at most two are supported"
                    )))
                }
            }
            if class.instances.0 > class.instances.1 {
                return Err(Error::Config(format!("class {name}: empty instance range")));
            }
            for t in &class.templates {
                if t.points.0 == 0 || t.points.0 > t.points.1 || t.height.min > t.height.max {
                    return Err(Error::Config(format!(
                        "class {name}: invalid template ranges"
                    )));
                }
            }
        }
        Ok(())
    }

    /// The default six-class street scene with one bimodal class ("person").
    ///
    /// The persons' two regimes bracket the vegetation heights, so one
    /// hyperplane in feature space has a hard time covering both.
    pub fn street(seed: u64) -> Self {
        let t = |family, h: (f32, f32), fp: (f32, f32), pts: (u32, u32), i: (f32, f32)| Template {
            family,
            height: Span::new(h.0, h.1),
            footprint: Span::new(fp.0, fp.1),
            points: pts,
            intensity_mean: i.0,
            intensity_std: i.1,
        };
        let class = |name: &str, templates, instances| ClassSpec {
            name: name.into(),
            templates,
            instances,
        };
        use ShapeFamily::*;
        SyntheticSceneConfig {
            classes: vec![
                class(
                    "ground",
                    vec![t(Ground, (0.0, 0.0), (0.0, 0.0), (300, 360), (0.30, 0.05))],
                    (1, 1),
                ),
                class(
                    "building",
                    vec![t(Wall, (2.5, 4.0), (3.0, 6.0), (160, 220), (0.55, 0.05))],
                    (1, 2),
                ),
                class(
                    "car",
                    vec![t(Box, (1.3, 1.6), (3.5, 4.5), (140, 180), (0.70, 0.05))],
                    (1, 2),
                ),
                class(
                    "person",
                    vec![
                        t(Cylinder, (1.6, 1.9), (0.40, 0.50), (70, 90), (0.42, 0.05)),
                        t(Ellipsoid, (0.9, 1.2), (0.50, 0.60), (50, 70), (0.42, 0.05)),
                    ],
                    (2, 3),
                ),
                class(
                    "pole",
                    vec![t(
                        Cylinder,
                        (3.0, 4.5),
                        (0.12, 0.20),
                        (50, 70),
                        (0.62, 0.05),
                    )],
                    (1, 2),
                ),
                class(
                    "vegetation",
                    vec![t(
                        Ellipsoid,
                        (1.3, 1.5),
                        (0.9, 1.3),
                        (80, 110),
                        (0.45, 0.05),
                    )],
                    (1, 2),
                ),
            ],
            extent: 8.0,
            jitter: 0.02,
            seed,
        }
    }
}

/// Generates one scene. The result is a pure function of `(cfg, seed)`;
/// `cfg.seed` is not consulted so one config can drive many scenes.
pub fn generate_synthetic_scene(cfg: &SyntheticSceneConfig, seed: u64) -> Result<PointCloud> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = Normal::new(0.0f32, cfg.jitter.max(1e-9)).expect("valid jitter");
    let mut coords = Vec::new();
    let mut intensity = Vec::new();
    let mut labels = Vec::new();
    let mut placed: Vec<([f32; 2], f32)> = Vec::new();

    for (ci, class) in cfg.classes.iter().enumerate() {
        let label = ci as u16 + 1;
        let n_inst = rng.random_range(class.instances.0..=class.instances.1);
        for k in 0..n_inst {
            // Bimodal classes show both templates whenever they have two instances.
            let template = if class.templates.len() == 2 && k < 2 {
                &class.templates[k as usize]
            } else {
                &class.templates[rng.random_range(0..class.templates.len())]
            };
            let height = template.height.sample(&mut rng);
            let footprint = template.footprint.sample(&mut rng);
            let n_points = rng.random_range(template.points.0..=template.points.1) as usize;
            let center = if template.family == ShapeFamily::Ground {
                [0.0, 0.0]
            } else {
                place(&mut rng, &mut placed, cfg.extent, footprint * 0.5)
            };
            let yaw = rng.random_range(0.0..core::f32::consts::TAU);
            let noise = Normal::new(template.intensity_mean, template.intensity_std.max(1e-9))
                .expect("valid std");
            for _ in 0..n_points {
                let local =
                    sample_surface(&mut rng, template.family, height, footprint, cfg.extent);
                let (s, c) = (libm::sinf(yaw), libm::cosf(yaw));
                let mut p = if template.family == ShapeFamily::Ground {
                    local
                } else {
                    [
                        center[0] + c * local[0] - s * local[1],
                        center[1] + s * local[0] + c * local[1],
                        local[2],
                    ]
                };
                for v in &mut p {
                    *v += jitter.sample(&mut rng);
                }
                coords.push(p);
                intensity.push(noise.sample(&mut rng).clamp(0.0, 1.0));
                labels.push(label);
            }
        }
    }
    PointCloud::new(coords, Some(intensity), Some(labels))
}

fn place<R: Rng + ?Sized>(
    rng: &mut R,
    placed: &mut Vec<([f32; 2], f32)>,
    extent: f32,
    radius: f32,
) -> [f32; 2] {
    let lim = (extent - radius).max(0.0);
    let mut best = [0.0, 0.0];
    for _ in 0..64 {
        let c = [rng.random_range(-lim..=lim), rng.random_range(-lim..=lim)];
        best = c;
        let clear = placed.iter().all(|(q, r)| {
            let (dx, dy) = (q[0] - c[0], q[1] - c[1]);
            let gap = r + radius + 0.3;
            dx * dx + dy * dy > gap * gap
        });
        if clear {
            break;
        }
    }
    placed.push((best, radius));
    best
}

fn sample_surface<R: Rng + ?Sized>(
    rng: &mut R,
    family: ShapeFamily,
    height: f32,
    footprint: f32,
    extent: f32,
) -> [f32; 3] {
    match family {
        ShapeFamily::Ground => [
            rng.random_range(-extent..=extent),
            rng.random_range(-extent..=extent),
            0.0,
        ],
        ShapeFamily::Wall => [
            rng.random_range(-0.5..=0.5) * footprint,
            0.0,
            rng.random::<f32>() * height,
        ],
        ShapeFamily::Box => {
            let (l, w, h) = (footprint, footprint * 0.45, height);
            // Pick a face proportionally to its area: top, two sides, two ends.
            let areas = [l * w, l * h, l * h, w * h, w * h];
            let total: f32 = areas.iter().sum();
            let mut u = rng.random::<f32>() * total;
            let mut face = 0;
            while face < 4 && u > areas[face] {
                u -= areas[face];
                face += 1;
            }
            let (a, b) = (rng.random::<f32>() - 0.5, rng.random::<f32>());
            match face {
                0 => [a * l, (b - 0.5) * w, h],
                1 => [a * l, -0.5 * w, b * h],
                2 => [a * l, 0.5 * w, b * h],
                3 => [-0.5 * l, a * w, b * h],
                _ => [0.5 * l, a * w, b * h],
            }
        }
        ShapeFamily::Cylinder => {
            let theta = rng.random_range(0.0..core::f32::consts::TAU);
            let r = footprint * 0.5;
            [
                r * libm::cosf(theta),
                r * libm::sinf(theta),
                rng.random::<f32>() * height,
            ]
        }
        ShapeFamily::Ellipsoid => {
            // Direction from a normalized Gaussian vector, upper 90% of the shell.
            let normal = Normal::new(0.0f32, 1.0).expect("unit normal");
            loop {
                let d = [normal.sample(rng), normal.sample(rng), normal.sample(rng)];
                let n = libm::sqrtf(d[0] * d[0] + d[1] * d[1] + d[2] * d[2]);
                if n < 1e-6 {
                    continue;
                }
                let z = d[2] / n;
                if z < -0.8 {
                    continue;
                }
                let (rx, rz) = (footprint * 0.5, height * 0.5);
                break [rx * d[0] / n, rx * d[1] / n, rz + rz * z];
            }
        }
    }
}

/// Derives the seed of scene `index` from a dataset seed (SplitMix64).
pub fn scene_seed(base: u64, index: u64) -> u64 {
    let mut z = base.wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(index.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
