//! Synthetic two-domain identity images.
//!
//! Every identity is a figure built from coloured parts (head, hair, upper
//! body with an optional pattern, legs, shoes, optional bag) on a textured
//! background. Views jitter position, width, brightness and noise. A
//! domain applies a global colour shift, a box blur and its own background
//! texture, which is what separates source from target.

use awb_tensor::RngStream;
use rayon::prelude::*;

use super::{Dataset, ImageRecord, Split};
use crate::error::{invalid, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct DomainTransform {
    /// Added to every RGB value in [0,1] units.
    pub color_shift: [f64; 3],
    pub blur_radius: usize,
    pub texture_seed: u64,
}

impl Default for DomainTransform {
    fn default() -> Self {
        Self { color_shift: [0.0; 3], blur_radius: 0, texture_seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDomainSpec {
    pub name: String,
    pub n_identities: usize,
    pub views_per_identity: usize,
    pub height: usize,
    pub width: usize,
    pub transform: DomainTransform,
    /// Seed of the identity appearances.
    pub identity_seed: u64,
    /// Fractions of each identity's views in train and query; the rest
    /// go to the gallery.
    pub train_fraction: f64,
    pub query_fraction: f64,
}

impl SyntheticDomainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_identities < 2 {
            return Err(invalid!("a domain needs at least two identities"));
        }
        if self.height < 8 || self.width < 4 {
            return Err(invalid!("image size {}×{} is too small", self.height, self.width));
        }
        if self.name.is_empty() || self.name.contains(char::is_whitespace) {
            return Err(invalid!("domain name {:?} must be a single token", self.name));
        }
        let (q, g) = self.split_counts();
        let t = self.views_per_identity.saturating_sub(q + g);
        if self.train_fraction < 0.0 || self.query_fraction < 0.0 || self.train_fraction + self.query_fraction > 1.0 {
            return Err(invalid!("split fractions must be non-negative and sum to at most 1"));
        }
        if q == 0 || g == 0 || t == 0 {
            return Err(invalid!(
                "{} views split into {t} train / {q} query / {g} gallery; each must be non-empty",
                self.views_per_identity
            ));
        }
        Ok(())
    }

    /// Query and gallery views per identity.
    pub fn split_counts(&self) -> (usize, usize) {
        let v = self.views_per_identity as f64;
        let train = (v * self.train_fraction).round() as usize;
        let query = (v * self.query_fraction).round() as usize;
        let query = query.min(self.views_per_identity.saturating_sub(train));
        (query, self.views_per_identity.saturating_sub(train + query))
    }
}

#[derive(Clone, Copy, Debug)]
struct Rgb([f64; 3]);

impl Rgb {
    fn random(rng: &mut RngStream) -> Self {
        Rgb([rng.uniform(), rng.uniform(), rng.uniform()])
    }
}

#[derive(Clone, Copy, Debug)]
enum Pattern {
    Solid,
    Stripes { color: Rgb, period: usize },
    Split { color: Rgb },
}

#[derive(Clone, Debug)]
struct Appearance {
    skin: Rgb,
    hair: Rgb,
    upper: Rgb,
    pattern: Pattern,
    lower: Rgb,
    shoes: Rgb,
    bag: Option<(Rgb, bool)>,
    torso_width: f64,
    leg_top: f64,
}

fn appearance(rng: &mut RngStream) -> Appearance {
    const SKIN: [[f64; 3]; 4] = [[0.96, 0.80, 0.69], [0.87, 0.67, 0.52], [0.65, 0.46, 0.33], [0.40, 0.27, 0.18]];
    let skin = Rgb(SKIN[rng.uniform_int(0, SKIN.len() - 1)]);
    let hair = Rgb::random(rng);
    let upper = Rgb::random(rng);
    let pattern = match rng.uniform_int(0, 2) {
        0 => Pattern::Solid,
        1 => Pattern::Stripes { color: Rgb::random(rng), period: rng.uniform_int(3, 6) },
        _ => Pattern::Split { color: Rgb::random(rng) },
    };
    let lower = Rgb::random(rng);
    let shoes = Rgb::random(rng);
    let bag = (rng.uniform() < 0.5).then(|| (Rgb::random(rng), rng.uniform() < 0.5));
    Appearance {
        skin,
        hair,
        upper,
        pattern,
        lower,
        shoes,
        bag,
        torso_width: 0.38 + 0.16 * rng.uniform(),
        leg_top: 0.52 + 0.08 * rng.uniform(),
    }
}

/// Per-view jitter.
struct View {
    dx: f64,
    dy: f64,
    width_scale: f64,
    brightness: f64,
    bg_phase: f64,
}

/// Domain background: a base colour modulated by a product of sinusoids.
struct Texture {
    base: [f64; 3],
    fy: f64,
    fx: f64,
}

impl Texture {
    fn new(seed: u64) -> Self {
        let mut tr = RngStream::new(seed, 7);
        let base = [0.25 + 0.5 * tr.uniform(), 0.25 + 0.5 * tr.uniform(), 0.25 + 0.5 * tr.uniform()];
        Self { base, fy: 0.2 + 0.6 * tr.uniform(), fx: 0.2 + 0.6 * tr.uniform() }
    }

    fn at(&self, y: usize, x: usize, phase: f64) -> [f64; 3] {
        let s = (self.fy * y as f64 + phase).sin() * (self.fx * x as f64 + 0.5 * phase).cos();
        [self.base[0] + 0.12 * s, self.base[1] + 0.12 * s, self.base[2] - 0.12 * s]
    }
}

fn render(a: &Appearance, v: &View, t: &DomainTransform, tex: &Texture, h: usize, w: usize, noise: &mut RngStream) -> Vec<u8> {
    let mut img = vec![0.0f64; 3 * h * w];
    let (hf, wf) = (h as f64, w as f64);
    for y in 0..h {
        for x in 0..w {
            // Normalized figure coordinates: u across (centre 0), s down.
            let u = (x as f64 + 0.5 - wf / 2.0 - v.dx) / (wf * v.width_scale);
            let s = (y as f64 + 0.5 - v.dy) / hf;
            let half_torso = a.torso_width / 2.0;
            let color = if ((u / 0.13).powi(2) + ((s - 0.14) / 0.075).powi(2)) <= 1.0 {
                Some(if s < 0.11 { a.hair } else { a.skin })
            } else if (0.21..a.leg_top).contains(&s) && u.abs() <= half_torso {
                Some(match a.pattern {
                    Pattern::Solid => a.upper,
                    Pattern::Stripes { color, period } => {
                        if ((s * hf) as usize / period) % 2 == 0 { a.upper } else { color }
                    }
                    Pattern::Split { color } => {
                        if u < 0.0 { a.upper } else { color }
                    }
                })
            } else if (a.leg_top..0.92).contains(&s) && u.abs() <= half_torso * 0.85 && u.abs() >= 0.02 {
                Some(a.lower)
            } else if (0.92..0.97).contains(&s) && u.abs() <= half_torso * 0.9 && u.abs() >= 0.02 {
                Some(a.shoes)
            } else {
                match a.bag {
                    Some((c, left)) if (0.3..0.5).contains(&s) && {
                        let side = if left { -u } else { u };
                        side > half_torso && side <= half_torso + 0.14
                    } => Some(c),
                    _ => None,
                }
            };
            let rgb = color.map_or_else(|| tex.at(y, x, v.bg_phase), |c| c.0);
            for ch in 0..3 {
                img[ch * h * w + y * w + x] = rgb[ch] * v.brightness;
            }
        }
    }
    for (ch, plane) in img.chunks_mut(h * w).enumerate() {
        for p in plane.iter_mut() {
            *p += t.color_shift[ch];
        }
    }
    if t.blur_radius > 0 {
        for plane in img.chunks_mut(h * w) {
            box_blur(plane, h, w, t.blur_radius);
        }
    }
    img.iter()
        .map(|&p| {
            let p = p + 0.03 * noise.normal();
            (p.clamp(0.0, 1.0) * 255.0).round() as u8
        })
        .collect()
}

/// Separable box blur with edge clamping.
fn box_blur(plane: &mut [f64], h: usize, w: usize, r: usize) {
    let r = r as isize;
    let n = (2 * r + 1) as f64;
    let at = |i: isize, len: usize| i.clamp(0, len as isize - 1) as usize;
    let mut tmp = vec![0.0; plane.len()];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = (-r..=r).map(|d| plane[y * w + at(x as isize + d, w)]).sum::<f64>() / n;
        }
    }
    for y in 0..h {
        for x in 0..w {
            plane[y * w + x] = (-r..=r).map(|d| tmp[at(y as isize + d, h) * w + x]).sum::<f64>() / n;
        }
    }
}

/// Render one domain. Image ids start at `first_image_id`; each identity's
/// views are shuffled and split into train, query and gallery.
pub fn generate_dataset(spec: &SyntheticDomainSpec, first_image_id: usize) -> Result<Dataset> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let (nq, _) = spec.split_counts();
    let v = spec.views_per_identity;
    let ntrain = v - nq - spec.split_counts().1;
    let root = RngStream::new(spec.identity_seed, 0);
    let texture = RngStream::new(spec.transform.texture_seed, 1);
    let tex = Texture::new(spec.transform.texture_seed);
    let per_identity: Vec<Vec<(Split, Vec<u8>)>> = (0..spec.n_identities)
        .into_par_iter()
        .map(|id| {
            let mut rng = root.derive(id as u64);
            let look = appearance(&mut rng);
            let mut order: Vec<usize> = (0..v).collect();
            rng.shuffle(&mut order);
            let mut split_of = vec![Split::Gallery; v];
            for (rank, &view) in order.iter().enumerate() {
                split_of[view] = if rank < ntrain {
                    Split::Train
                } else if rank < ntrain + nq {
                    Split::Query
                } else {
                    Split::Gallery
                };
            }
            let mut bg = texture.derive(id as u64);
            (0..v)
                .map(|view| {
                    let mut vr = rng.derive(1000 + view as u64);
                    let jitter = View {
                        dx: (vr.uniform() - 0.5) * 0.2 * w as f64,
                        dy: (vr.uniform() - 0.5) * 0.08 * h as f64,
                        width_scale: 0.9 + 0.2 * vr.uniform(),
                        brightness: 0.85 + 0.3 * vr.uniform(),
                        bg_phase: 6.283 * bg.uniform(),
                    };
                    (split_of[view], render(&look, &jitter, &spec.transform, &tex, h, w, &mut vr))
                })
                .collect()
        })
        .collect();

    let mut ds = Dataset { height: h, width: w, records: Vec::new(), pixels: Vec::new() };
    let mut image_id = first_image_id;
    for (identity, views) in per_identity.into_iter().enumerate() {
        for (split, px) in views {
            ds.records.push(ImageRecord {
                image_id,
                identity,
                domain: spec.name.clone(),
                split,
                path: format!("{}/{:06}.rgb", spec.name, image_id),
            });
            ds.pixels.push(px);
            image_id += 1;
        }
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> SyntheticDomainSpec {
        SyntheticDomainSpec {
            name: "src".into(),
            n_identities: 4,
            views_per_identity: 10,
            height: 32,
            width: 16,
            transform: DomainTransform::default(),
            identity_seed: 3,
            train_fraction: 0.7,
            query_fraction: 0.1,
        }
    }

    #[test]
    fn deterministic_and_split() {
        let a = generate_dataset(&spec(), 0).unwrap();
        let b = generate_dataset(&spec(), 0).unwrap();
        assert_eq!(a.pixels, b.pixels);
        assert_eq!(a.records.len(), 40);
        let q = a.records.iter().filter(|r| r.split == Split::Query).count();
        let g = a.records.iter().filter(|r| r.split == Split::Gallery).count();
        assert_eq!((q, g), (4, 8));
    }

    #[test]
    fn rejects_empty_splits() {
        let mut s = spec();
        s.views_per_identity = 3;
        assert!(s.validate().is_err());
        s = spec();
        s.n_identities = 1;
        assert!(s.validate().is_err());
    }

    #[test]
    fn blur_preserves_constants() {
        let mut p = vec![0.5; 12];
        box_blur(&mut p, 3, 4, 1);
        assert!(p.iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }
}
