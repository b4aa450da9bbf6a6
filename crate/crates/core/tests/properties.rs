use lnfold_core::cbwc::{ccwt_grouped, ccwt_linear, check_ccc, fold_bias, CenteringFamily};
use lnfold_core::tensor::ops::{layer_norm, linear_forward, rms_norm};
use lnfold_core::tensor::{mean, Tensor};
use lnfold_core::verify::{flops_estimate, FlopVariant, NormLayer};
use proptest::prelude::*;

fn matrix(max_rows: usize, max_cols: usize) -> impl Strategy<Value = Tensor> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(|(r, c)| {
        prop::collection::vec(-10.0f64..10.0, r * c).prop_map(move |d| Tensor::new(vec![r, c], d).unwrap())
    })
}

proptest! {
    #[test]
    fn ccwt_is_idempotent(w in matrix(8, 6)) {
        let v = ccwt_linear(&w).unwrap();
        let vv = ccwt_linear(&v).unwrap();
        prop_assert!(vv.max_abs_diff(&v) <= 4.0 * f64::EPSILON * w.max_abs().max(1.0));
        prop_assert!(check_ccc(&v, CenteringFamily::LinearColumns, 1e-9 * w.max_abs().max(1.0)).unwrap());
    }

    #[test]
    fn centered_layer_output_is_zero_mean(
        w in matrix(8, 5),
        x in prop::collection::vec(-2.0f64..2.0, 5),
        b in prop::collection::vec(-2.0f64..2.0, 8),
    ) {
        let (m, n) = (w.shape()[0], w.shape()[1]);
        let x = Tensor::from_vec(x[..n].to_vec());
        let b = fold_bias(&Tensor::from_vec(b[..m].to_vec()));
        let y = linear_forward(&ccwt_linear(&w).unwrap(), Some(&b), &x).unwrap();
        let scale = y.max_abs().max(1.0) * 10.0 * n as f64;
        prop_assert!(mean(y.data()).abs() <= 8.0 * m as f64 * f64::EPSILON * scale);
    }

    #[test]
    fn grouped_centering_zeroes_each_group(w in matrix(4, 4), groups in 1usize..=4) {
        prop_assume!(w.shape()[0] % groups == 0);
        let rows = w.shape()[0] * 3;
        let tall = Tensor::new(vec![rows, w.shape()[1]], w.data().repeat(3)).unwrap();
        prop_assume!(rows % groups == 0);
        let v = ccwt_grouped(&tall, groups).unwrap();
        prop_assert!(check_ccc(&v, CenteringFamily::GroupedColumns(groups), 1e-9 * 10.0).unwrap());
    }

    #[test]
    fn layer_norm_equals_rms_norm_on_zero_mean_input(
        raw in prop::collection::vec(-5.0f64..5.0, 2..64),
        eps in prop::sample::select(vec![0.0, 1e-6, 1e-5, 1e-2]),
    ) {
        let m = mean(&raw);
        let x = Tensor::from_vec(raw.iter().map(|v| v - m).collect());
        prop_assume!(x.max_abs() > 1e-3);
        let a = layer_norm(&x, eps, None, None).unwrap();
        let b = rms_norm(&x, eps, None, None).unwrap();
        prop_assert!(a.max_abs_diff(&b) <= 8.0 * f64::EPSILON * a.max_abs().max(1.0));
    }

    #[test]
    fn flop_counts_are_nonnegative_and_rms_is_cheaper(d in 1u64..100_000, g in 1u64..64) {
        for v in [FlopVariant::Naive, FlopVariant::Welford] {
            let ln = flops_estimate(NormLayer::LayerNorm, v, d, Some(g)).unwrap();
            let rms = flops_estimate(NormLayer::RmsNorm, v, d, Some(g)).unwrap();
            prop_assert!(rms.ticks() < ln.ticks());
        }
    }
}
