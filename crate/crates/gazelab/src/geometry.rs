//! Gaze geometry: (yaw, pitch) directions in degrees, angular distances via
//! unit vectors, and the per-eye vergence offset for a flat target plane.

/// A gaze or target direction as `[yaw_deg, pitch_deg]`.
pub type Dir = [f64; 2];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Eye {
    Left,
    Right,
}

impl Eye {
    pub const BOTH: [Eye; 2] = [Eye::Left, Eye::Right];

    pub fn index(self) -> usize {
        match self {
            Eye::Left => 0,
            Eye::Right => 1,
        }
    }
}

pub fn deg_to_rad(d: f64) -> f64 {
    d * std::f64::consts::PI / 180.0
}

pub fn rad_to_deg(r: f64) -> f64 {
    r * 180.0 / std::f64::consts::PI
}

/// Unit view vector for a direction: x right, y up, z forward.
pub fn unit_vector(d: Dir) -> [f64; 3] {
    let (yaw, pitch) = (deg_to_rad(d[0]), deg_to_rad(d[1]));
    [
        pitch.cos() * yaw.sin(),
        pitch.sin(),
        pitch.cos() * yaw.cos(),
    ]
}

/// Angular distance in degrees between two directions, computed as
/// atan2(|u x v|, u . v) on the unit view vectors. That form stays accurate
/// for the sub-degree separations accuracy metrics live at, where plain
/// acos(dot) loses half the mantissa.
pub fn angular_distance_deg(a: Dir, b: Dir) -> f64 {
    let u = unit_vector(a);
    let v = unit_vector(b);
    let dot = u[0] * v[0] + u[1] * v[1] + u[2] * v[2];
    let cx = u[1] * v[2] - u[2] * v[1];
    let cy = u[2] * v[0] - u[0] * v[2];
    let cz = u[0] * v[1] - u[1] * v[0];
    let cross = (cx * cx + cy * cy + cz * cz).sqrt();
    rad_to_deg(cross.atan2(dot))
}

/// Half-interpupillary distance over target depth; the tangent of the central
/// vergence half-angle.
fn vergence_ratio(ipd_mm: f64, depth_cm: f64) -> f64 {
    (ipd_mm / 2000.0) / (depth_cm / 100.0)
}

/// Central (straight-ahead) per-eye horizontal vergence magnitude in degrees:
/// atan((ipd_mm/2000)/(depth_cm/100)).
pub fn vergence_center_deg(ipd_mm: f64, depth_cm: f64) -> f64 {
    rad_to_deg(vergence_ratio(ipd_mm, depth_cm).atan())
}

/// Constant per-eye vergence term as a `[yaw, pitch]` vector: horizontal
/// component +vergence_center_deg for the left eye, negative for the right,
/// zero vertically.
pub fn vergence_term_deg(eye: Eye, ipd_mm: f64, depth_cm: f64) -> Dir {
    let v = vergence_center_deg(ipd_mm, depth_cm);
    match eye {
        Eye::Left => [v, 0.0],
        Eye::Right => [-v, 0.0],
    }
}
