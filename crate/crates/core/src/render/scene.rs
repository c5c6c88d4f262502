use rand::Rng;

use super::geometry::Vec3;
use super::{Category, LightSpec, Motion, ObjectSpec, PlaneSpec, SceneSpec, Shape};
use crate::rng::{stream, substream, StreamRng};

fn vivid_color(rng: &mut StreamRng) -> Vec3 {
    // one or two dominant channels, the rest dark
    let mut c = [0.0; 3];
    for v in &mut c {
        *v = rng.gen_range(0.05..0.2);
    }
    let k = rng.gen_range(0..3);
    c[k] = rng.gen_range(0.8..0.95);
    if rng.gen_bool(0.35) {
        c[(k + 1) % 3] = rng.gen_range(0.7..0.9);
    }
    Vec3::new(c[0], c[1], c[2])
}

fn muted_color(rng: &mut StreamRng) -> Vec3 {
    Vec3::new(
        rng.gen_range(0.35..0.65),
        rng.gen_range(0.35..0.65),
        rng.gen_range(0.35..0.65),
    )
}

fn light_from(rng: &mut StreamRng, elevation_deg: (f64, f64)) -> Vec3 {
    // never from behind the camera, so shadows fall beside the object
    let az: f64 = rng.gen_range(60.0f64..300.0).to_radians();
    let el: f64 = rng.gen_range(elevation_deg.0..elevation_deg.1).to_radians();
    -Vec3::new(el.cos() * az.sin(), el.sin(), el.cos() * az.cos()).normalized()
}

fn resting(shape: Shape, x: f64, z: f64, size: Vec3, ground: f64) -> Vec3 {
    let lift = match shape {
        Shape::Sphere => size.x,
        Shape::Box | Shape::Billboard => size.y,
    };
    Vec3::new(x, ground + lift, z)
}

/// Samples a scene of the given category from `seed`.
///
/// The target sits near the middle of the stage with a saturated colour;
/// one or two muted distractors stand to the sides. Lighting, reflective
/// planes and target material depend on the category.
pub fn sample_scene(category: Category, seed: u64) -> SceneSpec {
    let mut rng = substream(seed, stream::SCENE, 0);
    let ground_y = 0.0;
    let g = rng.gen_range(0.5..0.62);
    let ground_color = Vec3::new(
        g + rng.gen_range(-0.04..0.04),
        g + rng.gen_range(-0.04..0.04),
        g + rng.gen_range(-0.04..0.04),
    );
    let background = [
        Vec3::new(
            rng.gen_range(0.35..0.5),
            rng.gen_range(0.5..0.65),
            rng.gen_range(0.8..0.92),
        ),
        Vec3::new(
            rng.gen_range(0.78..0.86),
            rng.gen_range(0.8..0.88),
            rng.gen_range(0.82..0.9),
        ),
    ];

    let target_shape = match category {
        Category::LightSource => Shape::Sphere,
        _ if rng.gen_bool(0.3) => Shape::Box,
        _ => Shape::Sphere,
    };
    let target_size = match target_shape {
        Shape::Sphere => Vec3::new(rng.gen_range(0.55..0.8), 0.0, 0.0),
        _ => Vec3::new(
            rng.gen_range(0.45..0.65),
            rng.gen_range(0.45..0.7),
            rng.gen_range(0.45..0.65),
        ),
    };
    let (tx, tz) = (rng.gen_range(-0.5..0.5), rng.gen_range(-0.4..0.3));
    let mut target = ObjectSpec {
        shape: target_shape,
        center: resting(target_shape, tx, tz, target_size, ground_y),
        size: target_size,
        color: vivid_color(&mut rng),
        alpha: 1.0,
        emission: 0.0,
        motion: Motion {
            velocity: Vec3::new(rng.gen_range(-0.02..0.02), 0.0, rng.gen_range(-0.015..0.015)),
        },
    };

    let mut objects = Vec::new();
    let n_distract = rng.gen_range(1..=2);
    let first_side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    for k in 0..n_distract {
        let side = if k == 0 { first_side } else { -first_side };
        let shape = match rng.gen_range(0..3) {
            0 => Shape::Sphere,
            1 => Shape::Box,
            _ => Shape::Billboard,
        };
        let size = match shape {
            Shape::Sphere => Vec3::new(rng.gen_range(0.35..0.55), 0.0, 0.0),
            Shape::Box => Vec3::new(
                rng.gen_range(0.3..0.5),
                rng.gen_range(0.3..0.6),
                rng.gen_range(0.3..0.5),
            ),
            Shape::Billboard => Vec3::new(rng.gen_range(0.3..0.5), rng.gen_range(0.4..0.7), 0.0),
        };
        let x = side * rng.gen_range(2.0..2.5);
        let z = rng.gen_range(-1.0..0.2);
        objects.push(ObjectSpec {
            shape,
            center: resting(shape, x, z, size, ground_y),
            size,
            color: muted_color(&mut rng),
            alpha: 1.0,
            emission: 0.0,
            motion: Motion::default(),
        });
    }

    let (elevation, ambient, diffuse) = match category {
        Category::Common => ((60.0, 80.0), 0.9, 0.0),
        Category::Shadow => ((30.0, 45.0), 0.3, 0.65),
        Category::LightSource => ((55.0, 75.0), 0.45, 0.0),
        Category::Reflection => ((50.0, 70.0), 0.35, 0.5),
        Category::Mirror => ((50.0, 70.0), 0.35, 0.5),
        Category::Translucent => ((50.0, 70.0), 0.35, 0.5),
    };
    let light = LightSpec {
        direction: light_from(&mut rng, elevation),
        ambient,
        diffuse,
    };

    let mut mirror_plane = None;
    let mut water_plane = None;
    match category {
        Category::LightSource => {
            target.emission = rng.gen_range(0.6..1.0);
            target.color = Vec3::new(
                rng.gen_range(0.85..0.95),
                rng.gen_range(0.6..0.85),
                rng.gen_range(0.1..0.3),
            );
        }
        Category::Translucent => target.alpha = rng.gen_range(0.55..0.8),
        Category::Reflection => {
            water_plane = Some(PlaneSpec {
                normal: Vec3::UP,
                offset: ground_y,
                attenuation: rng.gen_range(0.5..0.6),
                tint: ground_color,
                bounds: None,
            });
        }
        Category::Mirror => {
            let z = rng.gen_range(-1.6..-1.3);
            mirror_plane = Some(PlaneSpec {
                normal: Vec3::new(0.0, 0.0, 1.0),
                offset: z,
                attenuation: rng.gen_range(0.75..0.9),
                tint: Vec3::new(0.7, 0.72, 0.75),
                bounds: Some([-2.2, 2.2, ground_y, ground_y + 2.4]),
            });
            // keep distractors clear of the glass
            for o in &mut objects {
                o.center.z = o.center.z.max(z + 0.8);
            }
        }
        Category::Common | Category::Shadow => {}
    }

    let target_object_id = rng.gen_range(0..=objects.len());
    objects.insert(target_object_id, target);

    SceneSpec {
        category,
        objects,
        target_object_id,
        light,
        ground_y,
        ground_color,
        background,
        mirror_plane,
        water_plane,
        seed,
    }
}
