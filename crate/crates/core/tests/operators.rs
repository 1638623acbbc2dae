use lri3d::harmonics::EulerTriple;
use lri3d::kernels::{synthesize_kernel, HarmonicCoefficients, RadialProfileSet, VoxelKernel};
use lri3d::operators::{
    conv3d, g_lri, g_lri_stack, global_ri_feature, s_lri, s_lri_stack, sse, KernelSource,
};
use lri3d::rotations::{build_rotation_set, RotationLabel, SignedPermutation};
use lri3d::volume::Volume;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_volume(shape: [usize; 3], rng: &mut impl Rng) -> Volume {
    Volume::from_fn(shape, |_, _, _| rng.gen_range(-1.0..1.0))
}

fn m24_permutations() -> Vec<SignedPermutation> {
    build_rotation_set(RotationLabel::M24)
        .matrices()
        .iter()
        .map(|m| SignedPermutation::from_matrix(m).expect("right-angle rotation"))
        .collect()
}

fn steerable_filter(rng: &mut impl Rng, n: usize) -> (HarmonicCoefficients, RadialProfileSet) {
    (
        HarmonicCoefficients::random(n, 2.0 / ((n + 1) * (n + 1)) as f64, rng),
        RadialProfileSet::random(7, n, false, rng).unwrap(),
    )
}

#[test]
fn g_lri_is_equivariant_under_m24() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let input = random_volume([16; 3], &mut rng);
    let kernel = VoxelKernel::free(random_volume([7; 3], &mut rng)).unwrap();
    let set = build_rotation_set(RotationLabel::M24);
    let out = g_lri(&input, &kernel, &set, 1).unwrap();
    for p in m24_permutations() {
        let rotated = g_lri(&input.rotate_exact(&p).unwrap(), &kernel, &set, 1).unwrap();
        assert!(rotated.max_abs_diff(&out.rotate_exact(&p).unwrap()) < 1e-12);
    }
}

#[test]
fn s_lri_and_sse_are_equivariant_under_m24() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let input = random_volume([16; 3], &mut rng);
    let (c, h) = steerable_filter(&mut rng, 3);
    let set = build_rotation_set(RotationLabel::M24);
    let out = s_lri(&input, &c, &h, &set, 1).unwrap();
    let energies: Vec<Volume> = (0..=3).map(|n| sse(&input, &h, n, 1).unwrap().volume).collect();
    for p in m24_permutations() {
        let turned = input.rotate_exact(&p).unwrap();
        let rotated = s_lri(&turned, &c, &h, &set, 1).unwrap();
        assert!(rotated.max_abs_diff(&out.rotate_exact(&p).unwrap()) < 1e-12);
        for (n, e) in energies.iter().enumerate() {
            let got = sse(&turned, &h, n, 1).unwrap().volume;
            assert!(got.max_abs_diff(&e.rotate_exact(&p).unwrap()) < 1e-12);
        }
    }
}

#[test]
fn steering_matches_rotated_voxel_kernels() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let input = random_volume([14; 3], &mut rng);
    let set = build_rotation_set(RotationLabel::M24);
    for n in [1, 3, 5] {
        let (c, h) = steerable_filter(&mut rng, n);
        let kernel = synthesize_kernel(&c, &h).unwrap();
        let steered = s_lri_stack(&input, &c, &h, &set, 1).unwrap();
        let rotated = g_lri_stack(&input, &kernel, &set, 1).unwrap();
        for (a, b) in steered.volumes.iter().zip(&rotated.volumes) {
            let diff = a.zip_map(b, |x, y| x - y).unwrap();
            assert!(diff.norm() / b.norm() < 1e-10);
        }
    }
}

#[test]
fn isotropic_kernels_commute_with_right_angle_rotations() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let input = random_volume([12; 3], &mut rng);
    let profile: Vec<f64> = (0..7).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let iso = Volume::from_fn([7; 3], |x, y, z| {
        let r = ((x as f64 - 3.0).powi(2) + (y as f64 - 3.0).powi(2) + (z as f64 - 3.0).powi(2)).sqrt();
        lri3d::kernels::radial_interpolate(&profile, r)
    });
    let out = conv3d(&input, &iso, 1).unwrap();
    for p in m24_permutations() {
        let got = conv3d(&input.rotate_exact(&p).unwrap(), &iso, 1).unwrap();
        assert!(got.max_abs_diff(&out.rotate_exact(&p).unwrap()) < 1e-12);
    }
}

#[test]
fn directional_kernels_break_plain_equivariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let input = random_volume([12; 3], &mut rng);
    let (c, h) = steerable_filter(&mut rng, 2);
    let kernel = synthesize_kernel(&c, &h).unwrap();
    let out = conv3d(&input, &kernel.volume, 1).unwrap();
    let worst = m24_permutations()
        .iter()
        .map(|p| {
            let got = conv3d(&input.rotate_exact(p).unwrap(), &kernel.volume, 1).unwrap();
            got.max_abs_diff(&out.rotate_exact(p).unwrap())
        })
        .fold(0.0, f64::max);
    assert!(worst > 1e-3);
}

#[test]
fn local_rotation_of_centered_pattern_keeps_center_response() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let background = random_volume([15; 3], &mut rng);
    let pattern = random_volume([7; 3], &mut rng);
    let (c, h) = steerable_filter(&mut rng, 3);
    let kernel = synthesize_kernel(&c, &h).unwrap();
    let set = build_rotation_set(RotationLabel::M24);
    let place = |p: &Volume| {
        let mut v = background.clone();
        for x in 0..7 {
            for y in 0..7 {
                for z in 0..7 {
                    v.set(x + 4, y + 4, z + 4, p.get(x, y, z));
                }
            }
        }
        v
    };
    let reference = place(&pattern);
    let s_ref = s_lri(&reference, &c, &h, &set, 1).unwrap().get(4, 4, 4);
    let g_ref = g_lri(&reference, &kernel, &set, 1).unwrap().get(4, 4, 4);
    let e_ref = sse(&reference, &h, 2, 1).unwrap().volume.get(4, 4, 4);
    for p in m24_permutations() {
        let local = place(&pattern.rotate_exact(&p).unwrap());
        assert!((s_lri(&local, &c, &h, &set, 1).unwrap().get(4, 4, 4) - s_ref).abs() < 1e-12);
        assert!((g_lri(&local, &kernel, &set, 1).unwrap().get(4, 4, 4) - g_ref).abs() < 1e-12);
        assert!((sse(&local, &h, 2, 1).unwrap().volume.get(4, 4, 4) - e_ref).abs() < 1e-12);
    }
}

#[test]
fn operators_commute_with_translations() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let input = random_volume([13; 3], &mut rng);
    let shift = [2usize, 1, 3];
    let shifted = input
        .crop(shift, [13 - shift[0], 13 - shift[1], 13 - shift[2]])
        .unwrap();
    let (c, h) = steerable_filter(&mut rng, 2);
    let set = build_rotation_set(RotationLabel::M24);
    let a = s_lri(&input, &c, &h, &set, 1).unwrap();
    let b = s_lri(&shifted, &c, &h, &set, 1).unwrap();
    let overlap = b.shape();
    let a = a.crop(shift, overlap).unwrap();
    assert!(a.max_abs_diff(&b) < 1e-12);
    let ea = sse(&input, &h, 2, 1).unwrap().volume.crop(shift, overlap).unwrap();
    let eb = sse(&shifted, &h, 2, 1).unwrap().volume;
    assert!(ea.max_abs_diff(&eb) < 1e-12);
}

#[test]
fn global_feature_is_invariant_to_whole_volume_rotation() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let input = random_volume([14; 3], &mut rng);
    let (c, h) = steerable_filter(&mut rng, 3);
    let kernel = synthesize_kernel(&c, &h).unwrap();
    let set = build_rotation_set(RotationLabel::M24);
    let steered = KernelSource::Steered { coeffs: &c, profiles: &h };
    let s0 = global_ri_feature(&input, steered, &set, 1).unwrap();
    let g0 = global_ri_feature(&input, KernelSource::Voxel(&kernel), &set, 1).unwrap();
    for p in m24_permutations() {
        let turned = input.rotate_exact(&p).unwrap();
        assert!((global_ri_feature(&turned, steered, &set, 1).unwrap() - s0).abs() < 1e-12);
        assert!((global_ri_feature(&turned, KernelSource::Voxel(&kernel), &set, 1).unwrap() - g0).abs() < 1e-12);
    }
}

#[test]
fn global_feature_sees_local_rotations_that_local_pooling_ignores() {
    // two patterns at fixed places: rotating only one of them in place
    // leaves the locally pooled map unchanged at both centers, but the
    // rotation-invariant global feature moves
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let segment = Volume::from_fn([7; 3], |x, y, _| if x == 3 && y == 3 { 1.0 } else { 0.0 });
    let (c, h) = steerable_filter(&mut rng, 3);
    let set = build_rotation_set(RotationLabel::M24);
    let build = |second: &Volume| {
        let mut v = Volume::cube(21);
        for x in 0..7 {
            for y in 0..7 {
                for z in 0..7 {
                    v.set(x + 2, y + 2, z + 2, segment.get(x, y, z));
                    v.set(x + 12, y + 12, z + 12, second.get(x, y, z));
                }
            }
        }
        v
    };
    let aligned = build(&segment);
    let quarter = SignedPermutation::from_matrix(&EulerTriple::new(0.0, std::f64::consts::FRAC_PI_2, 0.0).to_matrix()).unwrap();
    let crossed = build(&segment.rotate_exact(&quarter).unwrap());
    let la = s_lri(&aligned, &c, &h, &set, 1).unwrap();
    let lc = s_lri(&crossed, &c, &h, &set, 1).unwrap();
    for p in [[2usize, 2, 2], [12, 12, 12]] {
        assert!((la.get(p[0], p[1], p[2]) - lc.get(p[0], p[1], p[2])).abs() < 1e-12);
    }
    let steered = KernelSource::Steered { coeffs: &c, profiles: &h };
    let ga = global_ri_feature(&aligned, steered, &set, 1).unwrap();
    let gc = global_ri_feature(&crossed, steered, &set, 1).unwrap();
    assert!((ga - gc).abs() > 1e-6);
}

#[test]
fn constant_input_energy_by_degree() {
    // exact zero for n = 1..3 by the octahedral symmetry of the grid;
    // degree 4 carries an octahedral invariant and need not vanish
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let h = RadialProfileSet::random(7, 5, false, &mut rng).unwrap();
    let constant = Volume::from_fn([9; 3], |_, _, _| 1.0);
    for n in 1..=5 {
        let e = sse(&constant, &h, n, 1).unwrap().volume.data()[0];
        println!("degree {n}: constant-input energy {e:.3e}");
        if n <= 3 {
            assert!(e < 1e-9);
        }
    }
}
