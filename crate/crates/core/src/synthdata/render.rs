use super::scene::{Primitive, PrimitiveKind, SceneSpec};

pub const IMAGE_SIZE: usize = 32;
/// Ray origins sit this far in front of the origin along the view direction.
const CAMERA_DISTANCE: f64 = 3.0;
const AMBIENT: f64 = 0.3;
const DIFFUSE: f64 = 0.7;

/// One rendered image plus its camera angles.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedView {
    pub azimuth: f32,
    pub elevation: f32,
    pub height: usize,
    pub width: usize,
    /// Row-major RGBA, alpha is the object mask.
    pub rgba: Vec<u8>,
}

impl RenderedView {
    pub fn pixel(&self, row: usize, col: usize) -> [u8; 4] {
        let i = (row * self.width + col) * 4;
        [self.rgba[i], self.rgba[i + 1], self.rgba[i + 2], self.rgba[i + 3]]
    }

    pub fn mask(&self) -> Vec<bool> {
        self.rgba.chunks_exact(4).map(|p| p[3] != 0).collect()
    }

    /// RGB as a `[3, H, W]` planar vector scaled to `[-1, 1]`.
    pub fn to_signed_chw(&self) -> Vec<f64> {
        let hw = self.height * self.width;
        let mut out = vec![0.0; 3 * hw];
        for (i, px) in self.rgba.chunks_exact(4).enumerate() {
            for c in 0..3 {
                out[c * hw + i] = px[c] as f64 / 127.5 - 1.0;
            }
        }
        out
    }
}

/// Orthographic camera on the view sphere looking at the origin.
///
/// Camera space: `x` right, `y` up, `z` toward the camera.
#[derive(Clone, Copy, Debug)]
pub struct Camera {
    pub right: [f64; 3],
    pub up: [f64; 3],
    pub back: [f64; 3],
}

impl Camera {
    pub fn new(azimuth_deg: f64, elevation_deg: f64) -> Self {
        let (sa, ca) = azimuth_deg.to_radians().sin_cos();
        let (se, ce) = elevation_deg.to_radians().sin_cos();
        let back = [ce * sa, se, ce * ca];
        let right = [ca, 0.0, -sa];
        let up = cross(back, right);
        Self { right, up, back }
    }

    pub fn to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        [dot(p, self.right), dot(p, self.up), dot(p, self.back)]
    }

    pub fn to_world(&self, p: [f64; 3]) -> [f64; 3] {
        let mut w = [0.0; 3];
        for (i, wi) in w.iter_mut().enumerate() {
            *wi = p[0] * self.right[i] + p[1] * self.up[i] + p[2] * self.back[i];
        }
        w
    }
}

/// Image-plane coordinate of a pixel center, in `[-1, 1]`.
pub fn pixel_to_plane(row: usize, col: usize, height: usize, width: usize) -> (f64, f64) {
    let u = -1.0 + (col as f64 + 0.5) * 2.0 / width as f64;
    let v = 1.0 - (row as f64 + 0.5) * 2.0 / height as f64;
    (u, v)
}

/// Inverse of [`pixel_to_plane`], returning fractional pixel coordinates.
pub fn plane_to_pixel(u: f64, v: f64, height: usize, width: usize) -> (f64, f64) {
    let col = (u + 1.0) * width as f64 / 2.0 - 0.5;
    let row = (1.0 - v) * height as f64 / 2.0 - 0.5;
    (row, col)
}

#[derive(Clone, Copy, Debug)]
pub struct Hit {
    pub primitive: usize,
    /// Hit point in camera space.
    pub point: [f64; 3],
    /// Unit surface normal in camera space.
    pub normal: [f64; 3],
}

/// Primitive with its geometry expressed in camera space.
struct CamPrimitive {
    kind: PrimitiveKind,
    center: [f64; 3],
    axes: [[f64; 3]; 3],
    extents: [f64; 3],
}

fn to_camera_space(cam: &Camera, p: &Primitive) -> CamPrimitive {
    let axes = p.axes().map(|a| cam.to_camera(a));
    CamPrimitive {
        kind: p.kind,
        center: cam.to_camera(p.center),
        axes,
        extents: p.extents,
    }
}

/// Nearest ray hit at image-plane point `(u, v)`.
pub fn cast(spec: &SceneSpec, cam: &Camera, u: f64, v: f64) -> Option<Hit> {
    let prims: Vec<_> = spec.primitives.iter().map(|p| to_camera_space(cam, p)).collect();
    cast_prepared(&prims, u, v)
}

fn cast_prepared(prims: &[CamPrimitive], u: f64, v: f64) -> Option<Hit> {
    let origin = [u, v, CAMERA_DISTANCE];
    let mut best: Option<(f64, Hit)> = None;
    for (i, p) in prims.iter().enumerate() {
        let found = match p.kind {
            PrimitiveKind::Sphere => hit_sphere(p, origin),
            PrimitiveKind::Cuboid => hit_box(p, origin),
            PrimitiveKind::Cylinder => hit_cylinder(p, origin),
        };
        if let Some((s, normal)) = found {
            if best.as_ref().is_none_or(|(bs, _)| s < *bs) {
                let point = [u, v, CAMERA_DISTANCE - s];
                best = Some((s, Hit { primitive: i, point, normal }));
            }
        }
    }
    best.map(|(_, h)| h)
}

/// Ray direction is `-z`, so the ray parameter `s` is `CAMERA_DISTANCE - z`.
fn hit_sphere(p: &CamPrimitive, o: [f64; 3]) -> Option<(f64, [f64; 3])> {
    let r = p.extents[0];
    let dx = o[0] - p.center[0];
    let dy = o[1] - p.center[1];
    let rem = r * r - dx * dx - dy * dy;
    if rem < 0.0 {
        return None;
    }
    let z = p.center[2] + rem.sqrt();
    let n = [dx / r, dy / r, (z - p.center[2]) / r];
    Some((o[2] - z, n))
}

fn hit_box(p: &CamPrimitive, o: [f64; 3]) -> Option<(f64, [f64; 3])> {
    let dir = [0.0, 0.0, -1.0];
    let w = sub(o, p.center);
    let mut near = f64::NEG_INFINITY;
    let mut far = f64::INFINITY;
    let mut normal = [0.0; 3];
    for (axis, &h) in p.axes.iter().zip(&p.extents) {
        let oi = dot(w, *axis);
        let di = dot(dir, *axis);
        if di.abs() < 1e-12 {
            if oi.abs() > h {
                return None;
            }
            continue;
        }
        let (mut t0, mut t1) = ((-h - oi) / di, (h - oi) / di);
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
        }
        if t0 > near {
            near = t0;
            let sign = if di > 0.0 { -1.0 } else { 1.0 };
            normal = axis.map(|a| a * sign);
        }
        far = far.min(t1);
    }
    (near <= far && near > 0.0).then_some((near, normal))
}

fn hit_cylinder(p: &CamPrimitive, o: [f64; 3]) -> Option<(f64, [f64; 3])> {
    let dir = [0.0, 0.0, -1.0];
    let axis = p.axes[1];
    let (r, hh) = (p.extents[0], p.extents[1]);
    let w = sub(o, p.center);
    let wa = dot(w, axis);
    let da = dot(dir, axis);
    let wp = sub(w, axis.map(|a| a * wa));
    let dp = sub(dir, axis.map(|a| a * da));
    let mut best: Option<(f64, [f64; 3])> = None;
    let mut consider = |s: f64, n: [f64; 3]| {
        if s > 0.0 && best.is_none_or(|(bs, _)| s < bs) {
            best = Some((s, n));
        }
    };
    let a = dot(dp, dp);
    if a > 1e-12 {
        let b = 2.0 * dot(wp, dp);
        let c = dot(wp, wp) - r * r;
        let disc = b * b - 4.0 * a * c;
        if disc >= 0.0 {
            let s = (-b - disc.sqrt()) / (2.0 * a);
            let along = wa + s * da;
            if along.abs() <= hh {
                let radial = add(wp, dp.map(|d| d * s));
                consider(s, radial.map(|x| x / r));
            }
        }
    }
    if da.abs() > 1e-12 {
        for sign in [-1.0, 1.0] {
            let s = (sign * hh - wa) / da;
            let radial = add(wp, dp.map(|d| d * s));
            if dot(radial, radial) <= r * r {
                consider(s, axis.map(|x| x * sign));
            }
        }
    }
    best
}

/// Fixed light direction in camera space (upper left, toward the viewer).
fn light() -> [f64; 3] {
    normalize([-0.4, 0.6, 0.7])
}

/// Renders an RGBA view; the scene is lit from a camera-fixed direction.
pub fn render_view(spec: &SceneSpec, azimuth: f32, elevation: f32) -> RenderedView {
    render_view_sized(spec, azimuth, elevation, IMAGE_SIZE, IMAGE_SIZE)
}

pub fn render_view_sized(
    spec: &SceneSpec,
    azimuth: f32,
    elevation: f32,
    height: usize,
    width: usize,
) -> RenderedView {
    let cam = Camera::new(azimuth as f64, elevation as f64);
    let prims: Vec<_> = spec.primitives.iter().map(|p| to_camera_space(&cam, p)).collect();
    let l = light();
    let mut rgba = vec![255u8; height * width * 4];
    for row in 0..height {
        for col in 0..width {
            let i = (row * width + col) * 4;
            let (u, v) = pixel_to_plane(row, col, height, width);
            match cast_prepared(&prims, u, v) {
                Some(hit) => {
                    let albedo = spec.primitives[hit.primitive].albedo;
                    let shade = AMBIENT + DIFFUSE * dot(hit.normal, l).max(0.0);
                    for c in 0..3 {
                        rgba[i + c] = (albedo[c] as f64 * shade).round().min(255.0) as u8;
                    }
                    rgba[i + 3] = 255;
                }
                None => rgba[i + 3] = 0,
            }
        }
    }
    RenderedView {
        azimuth,
        elevation,
        height,
        width,
        rgba,
    }
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn add(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalize(a: [f64; 3]) -> [f64; 3] {
    let n = dot(a, a).sqrt();
    a.map(|x| x / n)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(kind: PrimitiveKind, center: [f64; 3], extents: [f64; 3], yaw: f64) -> SceneSpec {
        SceneSpec {
            seed: 0,
            primitives: vec![Primitive {
                kind,
                center,
                extents,
                yaw,
                albedo: [200, 100, 50],
            }],
        }
    }

    #[test]
    fn empty_scene_is_white_and_transparent() {
        let v = render_view(&SceneSpec::empty(0), 0.0, 30.0);
        assert!(v.rgba.chunks_exact(4).all(|p| p == [255, 255, 255, 0]));
    }

    #[test]
    fn centered_sphere_is_azimuth_invariant() {
        let s = single(PrimitiveKind::Sphere, [0.0; 3], [0.5, 0.0, 0.0], 0.0);
        let base = render_view(&s, 0.0, 30.0);
        assert!(base.mask().iter().any(|&m| m));
        for k in 1..12 {
            let v = render_view(&s, 30.0 * k as f32, 30.0);
            assert_eq!(v.rgba, base.rgba, "azimuth {}", 30 * k);
        }
    }

    #[test]
    fn alpha_is_binary_and_background_white() {
        for seed in 0..20 {
            let spec = super::super::scene::generate_object(seed);
            let v = render_view(&spec, 60.0, 30.0);
            for p in v.rgba.chunks_exact(4) {
                assert!(p[3] == 0 || p[3] == 255);
                if p[3] == 0 {
                    assert_eq!(&p[..3], &[255, 255, 255]);
                }
            }
        }
    }

    #[test]
    fn camera_round_trip() {
        let cam = Camera::new(47.0, 30.0);
        let p = [0.3, -0.2, 0.7];
        let back = cam.to_world(cam.to_camera(p));
        for i in 0..3 {
            assert!((back[i] - p[i]).abs() < 1e-12);
        }
        let (r, c) = plane_to_pixel(pixel_to_plane(5, 9, 32, 32).0, pixel_to_plane(5, 9, 32, 32).1, 32, 32);
        assert!((r - 5.0).abs() < 1e-12 && (c - 9.0).abs() < 1e-12);
    }

    #[test]
    fn cylinder_seen_from_above_is_a_disc() {
        let s = single(PrimitiveKind::Cylinder, [0.0; 3], [0.5, 0.3, 0.0], 0.0);
        let v = render_view_sized(&s, 0.0, 90.0, 64, 64);
        let area = v.mask().iter().filter(|&&m| m).count() as f64;
        let expected = std::f64::consts::PI * 0.25 * (64.0 * 64.0 / 4.0);
        assert!((area - expected).abs() / expected < 0.05, "{area} vs {expected}");
    }
}
