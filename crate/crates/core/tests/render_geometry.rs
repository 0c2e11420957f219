use damd_core::imaging::RgbImage;
use damd_core::morphable::{generate_synthetic_model, rotation_from_euler, EulerPose, ParamVector, NUM_EXP, NUM_ID};
use damd_core::render::{rasterize, rasterize_triangles, Background, Framebuffer};

/// Two overlapping "cheek" sheets, one in front of the head center and
/// one behind, posed by yaw and mapped into a 64×64 frame.
fn cheeks(yaw_deg: f64) -> Framebuffer {
    let model = [
        [-0.6, -0.5, 0.5],
        [0.4, -0.5, 0.5],
        [-0.1, 0.5, 0.5],
        [-0.4, -0.5, -0.5],
        [0.6, -0.5, -0.5],
        [0.1, 0.5, -0.5],
    ];
    let r = rotation_from_euler(0.0, yaw_deg.to_radians(), 0.0);
    let verts: Vec<[f64; 3]> = model
        .iter()
        .map(|v| {
            let p = [0, 1, 2].map(|i| (0..3).map(|j| r[(i, j)] * v[j]).sum::<f64>());
            [32.0 + 40.0 * p[0], 32.0 + 40.0 * p[1], p[2]]
        })
        .collect();
    let colors = vec![[1.0, 0.0, 0.0]; 3].into_iter().chain(vec![[0.0, 0.0, 1.0]; 3]).collect::<Vec<_>>();
    let mut fb = Framebuffer::new(RgbImage::new(64, 64, [0.0; 3]));
    rasterize_triangles(&mut fb, &verts, &colors, &[[0, 1, 2], [3, 4, 5]]).unwrap();
    fb
}

#[test]
fn yaw_half_turn_swaps_the_winning_sheet() {
    let front = cheeks(0.0);
    let back = cheeks(180.0);
    // the overlap sits at the frame center in both poses
    let i = 32 * 64 + 32;
    assert_eq!(front.owner[i], Some(0));
    assert_eq!(back.owner[i], Some(1));
    assert!(front.depth[i] > 0.0 && back.depth[i] > 0.0);
    let red = front.color.get(32, 32);
    let blue = back.color.get(32, 32);
    assert!(red[0] > 0.0 && red[2] == 0.0);
    assert!(blue[2] > 0.0 && blue[0] == 0.0);
}

#[test]
fn seen_from_behind_the_face_is_shaded_ambient() {
    let model = generate_synthetic_model(3, 600).unwrap();
    let render = |yaw: f64| {
        let mut pose = EulerPose { f: 24.0, yaw, ..EulerPose::identity() };
        let c = 32.0 / pose.f;
        let r = pose.rotation();
        pose.t3d = [0, 1, 2].map(|i| r[(0, i)] * c + r[(1, i)] * c);
        let p = ParamVector::from_parts(&pose, &[0.0; NUM_ID], &[0.0; NUM_EXP]).unwrap();
        rasterize(&model, &p, 64, 64, Background::Flat([0.0; 3])).unwrap()
    };
    let mean_brightness = |fb: &Framebuffer| {
        let covered: Vec<usize> = (0..64 * 64).filter(|&i| fb.owner[i].is_some()).collect();
        let sum: f64 =
            covered.iter().map(|&i| fb.color.data()[3 * i..3 * i + 3].iter().map(|&v| f64::from(v)).sum::<f64>()).sum();
        (covered.len(), sum / covered.len() as f64)
    };
    let (n0, b0) = mean_brightness(&render(0.0));
    let (n180, b180) = mean_brightness(&render(std::f64::consts::PI));
    assert!(n0 > 500 && n180 > 500);
    // back faces keep only the ambient fifth of the texture
    assert!(b180 < 0.35 * b0, "front {b0}, back {b180}");
}
