//! Synthetic demo scenes with hidden ground-truth materials.

use crate::emfield::EmProperties;
use crate::error::{Error, Result};
use crate::geometry::{SceneBuilder, SceneGeometry, Vec3};

pub const CONCRETE: EmProperties = EmProperties::new(5.24, 0.46, 0.3, 0.1);
pub const PLASTERBOARD: EmProperties = EmProperties::new(2.73, 0.027, 0.15, 0.2);
pub const METAL_PANEL: EmProperties = EmProperties::new(3.0, 15.0, 0.05, 0.05);
pub const ABSORBER: EmProperties = EmProperties::new(1.3, 0.002, 0.1, 0.3);

pub const CAT_CONCRETE: i64 = 0;
pub const CAT_PLASTERBOARD: i64 = 1;
pub const CAT_METAL: i64 = 2;
pub const CAT_ABSORBER: i64 = 3;

fn with_materials(b: SceneBuilder) -> SceneBuilder {
    b.category(CAT_CONCRETE, "concrete", Some(CONCRETE))
        .category(CAT_PLASTERBOARD, "plasterboard", Some(PLASTERBOARD))
        .category(CAT_ABSORBER, "absorber", Some(ABSORBER))
}

fn cells(len: f64, cell: Option<f64>) -> usize {
    cell.map_or(1, |c| (len / c).ceil().max(1.0) as usize)
}

/// Inward-facing faces of `[0,w]×[0,d]×[0,h]`, in the order floor, ceiling,
/// x = 0, x = w, y = 0, y = d, each with its category.
fn room_faces(b: &mut SceneBuilder, w: f64, d: f64, h: f64, cell: Option<f64>, cats: [i64; 6]) {
    let (ex, ey, ez) = (Vec3::new(w, 0.0, 0.0), Vec3::new(0.0, d, 0.0), Vec3::new(0.0, 0.0, h));
    let o = Vec3::ZERO;
    let (nx, ny, nz) = (cells(w, cell), cells(d, cell), cells(h, cell));
    b.rect(o, ex, ey, nx, ny, cats[0]);
    b.rect(ez, ey, ex, ny, nx, cats[1]);
    b.rect(o, ey, ez, ny, nz, cats[2]);
    b.rect(ex, ez, ey, nz, ny, cats[3]);
    b.rect(o, ez, ex, nz, nx, cats[4]);
    b.rect(ey, ex, ez, nx, nz, cats[5]);
}

const ROOM_CATS: [i64; 6] = [
    CAT_CONCRETE,
    CAT_PLASTERBOARD,
    CAT_CONCRETE,
    CAT_ABSORBER,
    CAT_PLASTERBOARD,
    CAT_ABSORBER,
];

/// Rectangular room; `cell` subdivides faces into squares of about that
/// size (`None` gives two triangles per face).
pub fn shoebox(w: f64, d: f64, h: f64, cell: Option<f64>) -> Result<SceneGeometry> {
    if !(w > 0.0 && d > 0.0 && h > 0.0) {
        return Err(Error::Config(format!("room dimensions must be positive: {w}×{d}×{h}")));
    }
    let mut b = with_materials(SceneBuilder::new());
    room_faces(&mut b, w, d, h, cell, ROOM_CATS);
    b.build()
}

/// 10 × 6 × 3 m room with a 0.1 m plasterboard partition at x = 6 running
/// from y = 0 to y = 3.5.
pub fn partitioned_room(cell: Option<f64>) -> Result<SceneGeometry> {
    let (w, d, h) = (10.0, 6.0, 3.0);
    let mut b = with_materials(SceneBuilder::new());
    room_faces(&mut b, w, d, h, cell, ROOM_CATS);
    let (y1, x0, x1) = (3.5, 5.95, 6.05);
    let ey = Vec3::new(0.0, y1, 0.0);
    let ez = Vec3::new(0.0, 0.0, h);
    let (ny, nz) = (cells(y1, cell), cells(h, cell));
    b.rect(Vec3::new(x0, 0.0, 0.0), ez, ey, nz, ny, CAT_PLASTERBOARD);
    b.rect(Vec3::new(x1, 0.0, 0.0), ey, ez, ny, nz, CAT_PLASTERBOARD);
    b.rect(
        Vec3::new(x0, y1, 0.0),
        ez,
        Vec3::new(x1 - x0, 0.0, 0.0),
        nz,
        1,
        CAT_PLASTERBOARD,
    );
    b.build()
}

/// 10 × 6 × 3 m room whose back wall (y = 6) is metal for x < 5 and
/// absorber for x ≥ 5; the wall is cut into `cols` columns.
pub fn two_material_wall(cols: usize) -> Result<SceneGeometry> {
    let (w, d, h) = (10.0, 6.0, 3.0);
    let mut b = with_materials(SceneBuilder::new()).category(CAT_METAL, "metal", Some(METAL_PANEL));
    let (ex, ey, ez) = (Vec3::new(w, 0.0, 0.0), Vec3::new(0.0, d, 0.0), Vec3::new(0.0, 0.0, h));
    b.rect(Vec3::ZERO, ex, ey, 1, 1, CAT_CONCRETE);
    b.rect(ez, ey, ex, 1, 1, CAT_CONCRETE);
    b.rect(Vec3::ZERO, ey, ez, 1, 1, CAT_CONCRETE);
    b.rect(ex, ez, ey, 1, 1, CAT_CONCRETE);
    b.rect(Vec3::ZERO, ez, ex, 1, 1, CAT_CONCRETE);
    b.rect_with(ey, ex, ez, cols.max(2), 1, |s, _| {
        if s < 0.5 {
            CAT_METAL
        } else {
            CAT_ABSORBER
        }
    });
    b.build()
}

/// Named demo scenes for the command line.
pub fn by_name(name: &str, cell: Option<f64>) -> Result<SceneGeometry> {
    match name {
        "shoebox" => shoebox(10.0, 6.0, 3.0, cell),
        "partitioned" => partitioned_room(cell),
        "two-material-wall" => two_material_wall(8),
        other => Err(Error::Config(format!(
            "unknown scene '{other}' (expected shoebox, partitioned, two-material-wall)"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shoebox_shape() {
        let s = shoebox(10.0, 6.0, 3.0, None).unwrap();
        assert_eq!(s.len(), 12);
        let c = s.bounds.center();
        // every normal points into the room
        for f in &s.facets {
            assert!(f.normal.dot(c - f.centroid()) > 0.0);
        }
        let t = s.truth_materials.as_ref().unwrap();
        assert_eq!(t[&CAT_CONCRETE], CONCRETE);
        assert!(shoebox(0.0, 1.0, 1.0, None).is_err());
    }

    #[test]
    fn subdivided_shoebox() {
        let s = shoebox(10.0, 6.0, 3.0, Some(1.0)).unwrap();
        // 2·(60 + 18 + 30) cells, two triangles each
        assert_eq!(s.len(), 2 * 2 * (60 + 18 + 30));
        let area: f64 = s.facets.iter().map(|f| f.patch_area).sum();
        assert!((area - 2.0 * (60.0 + 18.0 + 30.0)).abs() < 1e-9);
    }

    #[test]
    fn partition_faces_outward() {
        let s = partitioned_room(None).unwrap();
        assert_eq!(s.len(), 18);
        assert!(!s.is_visible(Vec3::new(5.0, 1.0, 1.0), Vec3::new(7.0, 1.0, 1.0)));
        assert!(s.is_visible(Vec3::new(5.0, 5.0, 1.0), Vec3::new(7.0, 5.0, 1.0)));
    }

    #[test]
    fn two_material_labels() {
        let s = two_material_wall(8).unwrap();
        let back: Vec<_> = s.facets.iter().filter(|f| f.centroid().y > 5.99).collect();
        assert_eq!(back.len(), 16);
        for f in back {
            let want = if f.centroid().x < 5.0 { CAT_METAL } else { CAT_ABSORBER };
            assert_eq!(f.category, want);
        }
        assert!(by_name("nope", None).is_err());
    }
}
