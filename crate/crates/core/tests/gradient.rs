mod common;

use afnas::nn::{forward_train, network_backward, QuantMode};
use common::{finite_difference_gradient, random_small_case, relative_gradient_error};

#[test]
fn backward_matches_central_differences() {
    for seed in 0..6 {
        let (net, batch, targets) = random_small_case(1000 + seed);
        let cache = forward_train(&net, &batch, QuantMode::Surrogate).unwrap();
        let analytic = network_backward(&net, &cache, &targets).unwrap().flatten();
        let numeric = finite_difference_gradient(&net, &batch, &targets, 1e-5);
        let (err, kept) = relative_gradient_error(&analytic, &numeric);
        assert!(kept * 2 > analytic.len(), "seed {seed}: only {kept}/{} coordinates usable", analytic.len());
        assert!(err < 1e-4, "seed {seed}: relative error {err}");
    }
}
