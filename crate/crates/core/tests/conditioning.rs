use aim_core::block::{block_forward, BlockWeights, MambaDims};
use aim_core::conditioning::{
    cond_param_count, regress_modulation, AdaLnSingle, AdaLnVanilla, CondWeights, GroupSpec,
};
use aim_core::ssm::Discretization;
use aim_core::tensor::{Rng, Stream, Tensor};
use proptest::prelude::*;

fn embedding(d: usize, rng: &mut Rng) -> Vec<f64> {
    (0..d).map(|_| rng.normal()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn one_group_is_adaln_single(seed in any::<u64>(), layers in 1usize..7, d in 1usize..9) {
        let mut rng = Rng::derive(seed, Stream::Test, &[]);
        let w = CondWeights::<f64>::random(&GroupSpec::new(layers, 1, d).unwrap(), 0.5, &mut rng);
        let single = AdaLnSingle { w: w.w[0].clone(), b: w.b.clone() };
        let c = embedding(d, &mut rng);
        for i in 0..layers {
            prop_assert_eq!(regress_modulation(&c, &w, i).unwrap(), single.modulation(&c, i).unwrap());
        }
    }

    #[test]
    fn one_group_per_layer_is_vanilla_adaln(seed in any::<u64>(), layers in 1usize..7, d in 1usize..9) {
        let mut rng = Rng::derive(seed, Stream::Test, &[]);
        let w = CondWeights::<f64>::random(&GroupSpec::new(layers, layers, d).unwrap(), 0.5, &mut rng);
        let vanilla = AdaLnVanilla { w: w.w.clone(), b: w.b.clone() };
        let c = embedding(d, &mut rng);
        for i in 0..layers {
            prop_assert_eq!(regress_modulation(&c, &w, i).unwrap(), vanilla.modulation(&c, i).unwrap());
        }
    }

    #[test]
    fn cond_params_grow_with_groups(layers in 2usize..49, d in 1usize..64) {
        let counts: Vec<usize> = (1..=layers).map(|g| cond_param_count(&GroupSpec::new(layers, g, d).unwrap())).collect();
        prop_assert!(counts.windows(2).all(|w| w[0] < w[1]));
    }
}

#[test]
fn degenerate_blocks_match_bitwise() {
    let mut rng = Rng::derive(4, Stream::Test, &[]);
    let dims = MambaDims::new(6, 2, 4, 4, None).unwrap();
    let block = BlockWeights::<f64>::init(&dims, &mut rng);
    let x = Tensor::randn(vec![10, 6], 1.0, &mut rng);
    let c = embedding(6, &mut rng);
    for groups in [1, 4] {
        let w = CondWeights::<f64>::random(&GroupSpec::new(4, groups, 6).unwrap(), 0.4, &mut rng);
        for i in 0..4 {
            let reference = if groups == 1 {
                AdaLnSingle { w: w.w[0].clone(), b: w.b.clone() }.modulation(&c, i).unwrap()
            } else {
                AdaLnVanilla { w: w.w.clone(), b: w.b.clone() }.modulation(&c, i).unwrap()
            };
            let ours = regress_modulation(&c, &w, i).unwrap();
            let a = block_forward(&x, &block, &ours, Discretization::Zoh).unwrap();
            let b = block_forward(&x, &block, &reference, Discretization::Zoh).unwrap();
            assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }
}

#[test]
fn layers_in_one_group_differ_only_by_bias() {
    let mut rng = Rng::derive(8, Stream::Test, &[]);
    let spec = GroupSpec::new(4, 2, 3).unwrap();
    let mut w = CondWeights::<f64>::random(&spec, 0.5, &mut rng);
    let c = embedding(3, &mut rng);
    w.b[1] = w.b[0].clone();
    w.b[2] = w.b[0].clone();
    assert_eq!(regress_modulation(&c, &w, 0).unwrap(), regress_modulation(&c, &w, 1).unwrap());
    assert_ne!(regress_modulation(&c, &w, 1).unwrap(), regress_modulation(&c, &w, 2).unwrap());
}
