use std::collections::BTreeSet;

use agnet::data::{render, split_811, synth_generate, SyntheticSpec};
use agnet::head::{age_group_bin, AttributeSchema};
use agnet::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn clean(resolution: usize) -> SyntheticSpec {
    SyntheticSpec {
        resolution,
        a_min: 16,
        a_max: 77,
        noise_sigma: 0.0,
        seed: 0,
        train: 1,
        val: 0,
        test: 0,
    }
}

fn image(spec: &SyntheticSpec, age: i32, gender: usize, ethnicity: usize) -> Tensor {
    render(spec, age, gender, ethnicity, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
}

/// Sign changes of the radial term along the downward radius of channel 0,
/// with the left/right ramp subtracted.
fn radial_sign_changes(img: &Tensor, gender: usize) -> usize {
    let res = img.shape()[1];
    let half = res as f64 / 2.0;
    let x = res / 2;
    let ramp = if gender == 0 { 0.2 } else { -0.2 } * (x as f64 + 0.5 - half) / half;
    let signs: Vec<bool> = (res / 2..res)
        .map(|y| img.data()[y * res + x] - 0.5 - ramp > 0.0)
        .collect();
    signs.windows(2).filter(|w| w[0] != w[1]).count()
}

#[test]
fn youngest_age_has_one_radial_cycle() {
    let spec = clean(64);
    assert_eq!(radial_sign_changes(&image(&spec, 16, 0, 0), 0), 2);
    assert_eq!(radial_sign_changes(&image(&spec, 77, 0, 0), 0), 14);
}

#[test]
fn radial_frequency_estimate_grows_with_age() {
    let spec = clean(96);
    let counts: Vec<usize> = (16..=77)
        .step_by(5)
        .map(|age| radial_sign_changes(&image(&spec, age, 0, 0), 0))
        .collect();
    assert!(counts.windows(2).all(|w| w[0] <= w[1]), "{counts:?}");
    assert!(counts.last() > counts.first());
}

#[test]
fn gender_mirrors_the_image() {
    let spec = clean(32);
    for eth in 0..4 {
        let a = image(&spec, 40, 0, eth);
        let b = image(&spec, 40, 1, eth);
        let res = 32;
        for c in 0..3 {
            for y in 0..res {
                for x in 0..res {
                    let i = (c * res + y) * res + x;
                    let j = (c * res + y) * res + (res - 1 - x);
                    assert_eq!(a.data()[i], b.data()[j]);
                }
            }
        }
        let half_mean = |t: &Tensor, right: bool| {
            let mut s = 0.0;
            for (i, v) in t.data().iter().enumerate() {
                if ((i % res) >= res / 2) == right {
                    s += v;
                }
            }
            s
        };
        assert!(half_mean(&a, true) > half_mean(&a, false));
        assert!(half_mean(&b, true) < half_mean(&b, false));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn splits_are_disjoint_exhaustive_and_seeded(n in 10usize..400, seed in any::<u64>()) {
        let items: Vec<usize> = (0..n).collect();
        let (train, val, test) = split_811(&items, seed).unwrap();
        prop_assert_eq!(val.len(), n / 10);
        prop_assert_eq!(test.len(), n / 10);
        let all: BTreeSet<usize> = train.iter().chain(&val).chain(&test).copied().collect();
        prop_assert_eq!(all.len(), n);
        prop_assert_eq!(train.len() + val.len() + test.len(), n);
        prop_assert_eq!(split_811(&items, seed).unwrap(), (train, val, test));
    }

    #[test]
    fn synthetic_images_are_bounded_and_reproducible(
        seed in any::<u64>(),
        index in 0usize..20,
        noise in 0.0f64..0.5,
        resolution in 4usize..20,
    ) {
        let spec = SyntheticSpec { resolution, noise_sigma: noise, seed, train: 20, ..clean(resolution) };
        let s = synth_generate(&spec, index).unwrap();
        prop_assert!((16..=77).contains(&s.age));
        prop_assert!(s.gender < 2 && s.ethnicity < 4);
        prop_assert_eq!(s.image.shape(), &[3, resolution, resolution]);
        prop_assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(synth_generate(&spec, index).unwrap(), s);
    }
}

#[test]
fn age_groups_partition_each_dataset_range() {
    for schema in [AttributeSchema::morph(), AttributeSchema::utkface(), AttributeSchema::lap2016()] {
        let bins: Vec<usize> = (schema.a_min..=schema.a_max)
            .map(|a| age_group_bin(a, &schema).unwrap())
            .collect();
        assert!(bins.windows(2).all(|w| w[1] == w[0] || w[1] == w[0] + 1), "{}", schema.name);
        assert_eq!(bins[0], 0);
        assert_eq!(*bins.last().unwrap(), schema.age_groups() - 1);
        assert!(age_group_bin(schema.a_min - 1, &schema).is_err());
        assert!(age_group_bin(schema.a_max + 1, &schema).is_err());
    }
}
