mod common;

use common::*;
use pcnn::network::{build_model, ModelSpec};
use pcnn::proj_conv::ProjConvLayer;
use pcnn::projection::{compute_omega, project_kernel, DiscreteSet, OmegaNorm};
use pcnn::tensor::{conv2d, Kernel4, KernelShape, Shape4};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn omega_strategy() -> impl Strategy<Value = DiscreteSet> {
    prop::collection::btree_set(-1000i32..1000, 2..6)
        .prop_map(|s| DiscreteSet::new(s.into_iter().map(|v| v as f32 / 100.0).collect()).unwrap())
}

fn ones_like(k: &Kernel4) -> Kernel4 {
    Kernel4::filled(k.shape(), 1.0)
}

proptest! {
    #[test]
    fn projection_lands_in_omega(omega in omega_strategy(), xs in prop::collection::vec(-20.0f32..20.0, 1..64)) {
        for x in xs {
            prop_assert!(omega.contains(omega.project(x)));
        }
    }

    #[test]
    fn projection_is_monotone(omega in omega_strategy(), a in -20.0f32..20.0, b in -20.0f32..20.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(omega.project(lo) <= omega.project(hi));
    }

    #[test]
    fn project_kernel_is_idempotent(seed in any::<u64>(), a in 0.01f32..2.0) {
        let mut r = rng(seed);
        let c = kernel(KernelShape::new(3, 2, 3, 3), || r.gen_range(-3.0..3.0));
        let omega = DiscreteSet::binary(a).unwrap();
        let once = project_kernel(&c, &ones_like(&c), &omega).unwrap();
        let twice = project_kernel(&once, &ones_like(&c), &omega).unwrap();
        prop_assert_eq!(&once, &twice);
        prop_assert!(once.data().iter().all(|&v| omega.contains(v)));
    }

    #[test]
    fn omega_ignores_kernel_order_and_signs(seed in any::<u64>(), kernel_l1 in any::<bool>()) {
        let mut r = rng(seed);
        let norm = if kernel_l1 { OmegaNorm::KernelL1 } else { OmegaNorm::MeanAbs };
        let shape = KernelShape::new(4, 2, 3, 3);
        let c = kernel(shape, || r.gen_range(-2.0..2.0));
        let base = compute_omega(&[&c], norm).unwrap();

        let mut order: Vec<usize> = (0..4).collect();
        order.shuffle(&mut r);
        let permuted: Vec<f32> = order.iter().flat_map(|&o| c.kernel(o).to_vec()).collect();
        let permuted = Kernel4::new(shape, permuted).unwrap();
        let flipped: Vec<f32> = c.data().iter().map(|&v| if r.gen_bool(0.5) { -v } else { v }).collect();
        let flipped = Kernel4::new(shape, flipped).unwrap();
        prop_assert_eq!(&compute_omega(&[&permuted], norm).unwrap(), &base);
        prop_assert_eq!(&compute_omega(&[&flipped], norm).unwrap(), &base);
    }

    #[test]
    fn layer_output_has_i_times_j_channels(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (i, j, in_base) = (r.gen_range(1..5), r.gen_range(1..4), r.gen_range(1..4));
        let c = kernel(KernelShape::new(i, in_base, 3, 3), || r.gen_range(-1.0..1.0));
        let w: Vec<f32> = (0..9 * j).map(|_| r.gen_range(0.5..1.5)).collect();
        let layer = ProjConvLayer::new("l", c, w, 1, 1, r.gen_bool(0.5)).unwrap();
        let (h, wd) = (r.gen_range(3..8), r.gen_range(3..8));
        let x = tensor(Shape4::new(2, in_base * j, h, wd), || r.gen_range(-2.0..2.0));
        let (y, cache) = layer.forward(&x).unwrap();
        prop_assert_eq!(y.shape(), Shape4::new(2, i * j, h, wd));
        for ch in &cache.c_hat {
            prop_assert!(ch.data().iter().all(|&v| cache.omega.contains(v)));
        }
    }

    #[test]
    fn single_unit_projection_on_quantized_kernels_is_plain_conv(seed in any::<u64>(), a in 0.05f32..1.5) {
        let mut r = rng(seed);
        let shape = KernelShape::new(r.gen_range(1..4), r.gen_range(1..4), 3, 3);
        let c = kernel(shape, || if r.gen_bool(0.5) { a } else { -a });
        let layer = ProjConvLayer::new("l", c.clone(), vec![1.0; 9], 1, 1, false).unwrap();
        let x = tensor(Shape4::new(1, shape.in_ch, 5, 5), || r.gen_range(-2.0..2.0));
        prop_assert_eq!(layer.forward_eval(&x).unwrap(), conv2d(&x, &c, 1, 1).unwrap());
    }
}

#[test]
fn parameter_count_is_affine_in_j() {
    for spec in [ModelSpec::small_cnn as fn(usize) -> ModelSpec, |j| ModelSpec::wrn22(4, j)] {
        let count = |j| build_model(&spec(j), 0).unwrap().param_count() as i64;
        let (c1, c2, c3, c4) = (count(1), count(2), count(3), count(4));
        assert_eq!(c2 - c1, c3 - c2);
        assert_eq!(c3 - c2, c4 - c3);
        assert!(c2 > c1);
    }
}
