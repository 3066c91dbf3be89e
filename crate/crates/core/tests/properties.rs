use ndarray::Array2;
use proptest::prelude::*;

use einet::engine::{self, VarRole};
use einet::expfam::ExpFamily;
use einet::io::{self, DType, LoadOptions, ModelFile};
use einet::oracle::{expand, random_fixture, FixtureSpec};
use einet::trainer::{em_stochastic_step, TrainerConfig};

fn discrete_spec() -> FixtureSpec {
    FixtureSpec {
        max_vars: 5,
        family: Some(ExpFamily::Categorical { num_states: 3 }),
        ..FixtureSpec::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn marginals_sum_out_one_variable(seed in 0u64..10_000, var_pick in 0usize..8) {
        let f = random_fixture(seed, &discrete_spec());
        let d = f.net.d_vars();
        let v = var_pick % d;
        let mut marg = vec![false; d];
        marg[v] = true;
        let got = engine::forward(&f.net, f.x.view(), &marg).unwrap().log_likelihood;
        for (b, row) in f.x.outer_iter().enumerate() {
            let mut total = 0.0;
            for s in 0..3 {
                let mut x = row.to_owned();
                x[v] = s as f64;
                let x = x.insert_axis(ndarray::Axis(0));
                total += engine::forward(&f.net, x.view(), &vec![false; d]).unwrap().log_likelihood[0].exp();
            }
            prop_assert!((got[b] - total.ln()).abs() < 1e-9);
        }
    }

    #[test]
    fn forward_matches_oracle_on_random_masks(seed in 0u64..10_000, mask_bits in 0u32..256) {
        let f = random_fixture(seed, &FixtureSpec::default());
        let d = f.net.d_vars();
        let marg: Vec<bool> = (0..d).map(|v| mask_bits >> v & 1 == 1).collect();
        let got = engine::forward(&f.net, f.x.view(), &marg).unwrap().log_likelihood;
        let sc = expand(&f.net);
        for (b, row) in f.x.outer_iter().enumerate() {
            prop_assert!((got[b] - sc.eval(&row.to_vec(), &marg)).abs() < 1e-9);
        }
    }

    #[test]
    fn model_round_trip_is_bitwise(seed in 0u64..10_000) {
        let f = random_fixture(seed, &FixtureSpec::default());
        let bytes = io::model_to_bytes(&ModelFile::new(f.net.clone()));
        let back = io::model_from_bytes(&bytes).unwrap();
        let net = &back.mixture.components[0];
        prop_assert_eq!(net, &f.net);
        let marg = vec![false; net.d_vars()];
        let a = engine::forward(&f.net, f.x.view(), &marg).unwrap().log_likelihood;
        let b = engine::forward(net, f.x.view(), &marg).unwrap().log_likelihood;
        prop_assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn any_single_byte_flip_is_detected(seed in 0u64..1_000, pos_frac in 0.0f64..1.0) {
        let f = random_fixture(seed, &FixtureSpec::default());
        let mut bytes = io::model_to_bytes(&ModelFile::new(f.net));
        let pos = ((bytes.len() - 1) as f64 * pos_frac) as usize;
        bytes[pos] ^= 0x5a;
        prop_assert!(io::model_from_bytes(&bytes).is_err());
    }

    #[test]
    fn csv_and_binary_loaders_agree(values in proptest::collection::vec(0u8..=255, 1..60), cols in 1usize..6) {
        let n = values.len() / cols;
        prop_assume!(n > 0);
        let x = Array2::from_shape_fn((n, cols), |(i, j)| values[i * cols + j] as f64);
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("x.csv");
        let u8_path = dir.path().join("x.u8");
        let f32_path = dir.path().join("x.f32");
        io::save_csv(&csv, &x).unwrap();
        io::save_dataset_binary(&u8_path, &x, DType::U8).unwrap();
        io::save_dataset_binary(&f32_path, &x, DType::F32).unwrap();
        let raw = LoadOptions { scale_u8: false };
        let from_csv = io::load_dataset(&csv, raw).unwrap();
        prop_assert_eq!(&from_csv, &io::load_dataset(&u8_path, raw).unwrap());
        prop_assert_eq!(&from_csv, &io::load_dataset(&f32_path, raw).unwrap());
        let scaled = io::load_dataset(&u8_path, LoadOptions::default()).unwrap();
        prop_assert_eq!(scaled, from_csv.mapv(|v| v / 255.0));
    }

    #[test]
    fn em_keeps_weights_on_the_simplex(seed in 0u64..10_000, lambda in 0.0f64..=1.0) {
        let f = random_fixture(seed, &FixtureSpec::default());
        let mut net = f.net.clone();
        let cfg = TrainerConfig::default();
        em_stochastic_step(&mut net, f.x.view(), lambda, &cfg).unwrap();
        prop_assert!(net.check_weights(cfg.eps_w, 1e-9).is_ok());
        prop_assert!(net.params.all_finite().is_none());
    }

    #[test]
    fn conditionals_are_normalized(seed in 0u64..10_000) {
        let f = random_fixture(seed, &discrete_spec());
        let d = f.net.d_vars();
        prop_assume!(d >= 2);
        let mut roles = vec![VarRole::Evidence; d];
        roles[0] = VarRole::Query;
        let x = Array2::from_shape_fn((3, d), |(s, v)| if v == 0 { s as f64 } else { f.x[[0, v]] });
        let ll = engine::conditional_log_density(&f.net, x.view(), &roles).unwrap();
        prop_assert!((ll.iter().map(|v| v.exp()).sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn seeded_sampling_is_reproducible(seed in 0u64..10_000, sample_seed in 0u64..100) {
        let f = random_fixture(seed, &FixtureSpec::default());
        let a = engine::sample(&f.net, 5, sample_seed);
        let b = engine::sample(&f.net, 5, sample_seed);
        prop_assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
        if let Some(support) = f.net.family.support() {
            prop_assert!(a.iter().all(|v| support.contains(v)));
        }
    }
}
