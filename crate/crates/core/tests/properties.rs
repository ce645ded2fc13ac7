//! Property tests over the geometry and optics invariants.

use proptest::prelude::*;

use pasyn_core::augment::{argmax_decode, one_hot};
use pasyn_core::forearm::hflip_copy_augment;
use pasyn_core::labelmap::LabelMap;
use pasyn_core::mc::{homogeneous_volume, simulate_fluence, SourceSpec};
use pasyn_core::optics::mixed_mua;
use pasyn_core::spectra::ChromophoreSpectra;
use pasyn_core::Rng64;

fn arb_labelmap() -> impl Strategy<Value = LabelMap> {
    ((2usize..24), (2usize..24), proptest::collection::vec(1u8..=7, 4..576)).prop_map(
        |(nx, nz, mut seed_data)| {
            seed_data.resize(nx * nz, 3);
            LabelMap {
                nx,
                nz,
                spacing_mm: 0.16,
                data: seed_data,
            }
        },
    )
}

proptest! {
    #[test]
    fn one_hot_round_trips(map in arb_labelmap()) {
        let t = one_hot(&map).unwrap();
        let back = argmax_decode(&t, map.spacing_mm).unwrap();
        prop_assert_eq!(back, map);
    }

    #[test]
    fn hflip_augment_doubles_and_preserves_histograms(map in arb_labelmap()) {
        let out = hflip_copy_augment(std::slice::from_ref(&map)).unwrap();
        prop_assert_eq!(out.len(), 2);
        prop_assert_eq!(out[0].class_histogram(), map.class_histogram());
        prop_assert_eq!(out[1].class_histogram(), map.class_histogram());
        prop_assert_eq!(out[1].hflip(), map);
    }

    #[test]
    fn mixed_mua_linear_in_vb(
        so2 in 0.0f64..1.0,
        vb in 0.001f64..0.5,
        water in 0.0f64..0.5,
        wl in 700.0f64..850.0,
    ) {
        let spectra = ChromophoreSpectra::builtin();
        let baseline = mixed_mua(so2, 0.0, water, 0.0, wl, &spectra).unwrap();
        let one = mixed_mua(so2, vb, water, 0.0, wl, &spectra).unwrap();
        let two = mixed_mua(so2, 2.0 * vb, water, 0.0, wl, &spectra).unwrap();
        let lhs = two - baseline;
        let rhs = 2.0 * (one - baseline);
        prop_assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0));
    }
}

/// Energy ledger closes on random heterogeneous volumes.
#[test]
fn energy_ledger_on_random_volumes() {
    let mut rng = Rng64::new(314);
    for trial in 0..5 {
        let (nx, ny, nz) = (
            4 + rng.below(10),
            4 + rng.below(10),
            4 + rng.below(10),
        );
        let mut vol = homogeneous_volume((nx, ny, nz), 0.4, 800.0, 0.01, 0.0, 0.0);
        for i in 0..vol.voxel_count() {
            vol.mua[i] = rng.uniform(0.005, 0.6) as f32;
            vol.mus[i] = rng.uniform(0.0, 8.0) as f32;
            vol.g[i] = rng.uniform(-0.3, 0.95) as f32;
        }
        let source = SourceSpec {
            aperture_mm: (rng.uniform(0.0, 2.0), rng.uniform(0.0, 2.0)),
            divergence_deg: rng.uniform(0.0, 30.0),
            photon_count: 3_000,
            base_seed: trial,
            ..Default::default()
        };
        let f = simulate_fluence(&vol, &source, 2).unwrap();
        let total = f.deposited_weight + f.escaped_weight;
        assert!(
            (total - 1.0).abs() < 1e-6,
            "trial {trial}: ledger total {total}"
        );
    }
}
