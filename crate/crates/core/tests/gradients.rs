mod common;

use tailforge::nnkernel::gradcheck;

#[test]
fn analytic_gradients_match_central_differences() {
    for seed in 0..4 {
        let (params, batch) = common::gradcheck_draw(seed);
        let err = gradcheck(&params, &batch, 1e-5, seed).unwrap();
        assert!(err < 1e-5, "draw {seed}: relative error {err}");
    }
}
