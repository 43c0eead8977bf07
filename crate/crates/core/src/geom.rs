/// A point or displacement in meters, `[x, y, z]`.
pub type Point3 = [f64; 3];

pub fn add(a: Point3, b: Point3) -> Point3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn scale(a: Point3, k: f64) -> Point3 {
    [a[0] * k, a[1] * k, a[2] * k]
}

pub fn distance(a: Point3, b: Point3) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
}

pub fn norm(a: Point3) -> f64 {
    distance(a, [0.0; 3])
}

pub fn is_finite(a: Point3) -> bool {
    a.iter().all(|v| v.is_finite())
}
