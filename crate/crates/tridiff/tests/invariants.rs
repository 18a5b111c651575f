//! Property tests for the serialization and probability invariants.

use proptest::prelude::*;
use tridiff::diffusion::{posterior, reverse_step_distribution};
use tridiff::mesh::Mesh;
use tridiff::obj::{parse_obj, write_obj};
use tridiff::schedule::NoiseSchedule;
use tridiff::soup::{canonical_order, QuantFace, QuantizedTriangleSoup};

fn arb_mesh() -> impl Strategy<Value = Mesh> {
    let vertex = prop::array::uniform3(-100.0f64..100.0);
    (3usize..24).prop_flat_map(move |n| {
        let vertices = prop::collection::vec(vertex.clone(), n);
        let face = prop::array::uniform3(0..n);
        let faces = prop::collection::vec(face, 1..32).prop_map(|fs| {
            fs.into_iter()
                .filter(|f| f[0] != f[1] && f[1] != f[2] && f[0] != f[2])
                .collect::<Vec<_>>()
        });
        (vertices, faces)
            .prop_filter("at least one face", |(_, f)| !f.is_empty())
            .prop_map(|(vertices, faces)| Mesh { vertices, faces })
    })
}

fn arb_soup() -> impl Strategy<Value = (Vec<QuantFace>, usize)> {
    let coord = 0u16..16;
    let face = prop::array::uniform3(prop::array::uniform3(coord));
    prop::collection::vec(face, 1..12).prop_map(|faces| {
        let capacity = faces.len() + 3;
        (faces, capacity)
    })
}

proptest! {
    #[test]
    fn obj_write_then_parse_is_identity(mesh in arb_mesh()) {
        let round = parse_obj(write_obj(&mesh).as_bytes()).unwrap();
        prop_assert_eq!(round, mesh);
    }

    #[test]
    fn canonical_order_is_stable_under_face_permutation_and_rotation(
        (faces, capacity) in arb_soup(),
        perm_seed in 0u64..1000,
    ) {
        let soup = QuantizedTriangleSoup::new(faces.clone(), 4, 0, capacity).unwrap();
        let canon = canonical_order(&soup);
        // Idempotent.
        prop_assert_eq!(&canonical_order(&canon), &canon);

        // Permute faces and cyclically rotate each one.
        let mut shuffled = faces;
        let mut rng = tridiff::rng::Rng::new(perm_seed);
        for i in (1..shuffled.len()).rev() {
            let j = rng.next_below(i + 1);
            shuffled.swap(i, j);
        }
        for f in &mut shuffled {
            let r = rng.next_below(3);
            *f = [f[r % 3], f[(r + 1) % 3], f[(r + 2) % 3]];
        }
        let soup2 = QuantizedTriangleSoup::new(shuffled, 4, 0, capacity).unwrap();
        prop_assert_eq!(&canonical_order(&soup2), &canon);
    }

    #[test]
    fn posterior_is_normalized(
        betas in prop::collection::vec(1e-4f64..0.9, 2..20),
        c in 2usize..24,
        picks in prop::array::uniform3(0usize..1_000_000),
    ) {
        let schedule = NoiseSchedule::from_betas(betas).unwrap();
        let t = 2 + picks[0] % (schedule.timesteps() - 1);
        let xt = (picks[1] % c) as u16;
        let x0 = (picks[2] % c) as u16;
        let dist = posterior(xt, x0, t, &schedule, c).unwrap();
        let sum: f64 = dist.probs().iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-9);
        prop_assert!(dist.probs().iter().all(|&p| p >= 0.0));
    }

    #[test]
    fn reverse_step_is_normalized_for_random_logits(
        betas in prop::collection::vec(1e-4f64..0.9, 2..16),
        logits in prop::collection::vec(-10.0f64..10.0, 2..32),
        picks in prop::array::uniform2(0usize..1_000_000),
    ) {
        let schedule = NoiseSchedule::from_betas(betas).unwrap();
        let t = 2 + picks[0] % (schedule.timesteps() - 1);
        let xt = (picks[1] % logits.len()) as u16;
        let dist = reverse_step_distribution(xt, &logits, t, &schedule).unwrap();
        let sum: f64 = dist.probs().iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-9);
    }
}
