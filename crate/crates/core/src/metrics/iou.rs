use crate::pointcloud::Aabb;
use crate::{Error, Result};

/// Intersection over union of two axis-aligned boxes.
pub fn aabb_iou(a: &Aabb, b: &Aabb) -> Result<f64> {
    for bx in [a, b] {
        if bx.size.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Argument(format!("box size must be positive, got {:?}", bx.size)));
        }
    }
    let (amin, amax, bmin, bmax) = (a.min(), a.max(), b.min(), b.max());
    let inter: f64 = (0..3).map(|i| (amax[i].min(bmax[i]) - amin[i].max(bmin[i])).max(0.0)).product();
    let union = a.volume() + b.volume() - inter;
    Ok((inter / union).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cube(x: f64) -> Aabb {
        Aabb { center: [x, 0.0, 0.0], size: [2.0; 3] }
    }

    #[test]
    fn examples() {
        assert_eq!(aabb_iou(&cube(0.0), &cube(0.0)).unwrap(), 1.0);
        assert_eq!(aabb_iou(&cube(0.0), &cube(5.0)).unwrap(), 0.0);
        assert_eq!(aabb_iou(&cube(0.0), &cube(1.0)).unwrap(), 1.0 / 3.0);
        let flat = Aabb { center: [0.0; 3], size: [1.0, 0.0, 1.0] };
        assert!(aabb_iou(&flat, &cube(0.0)).is_err());
    }
}
