mod common;

use common::gradcheck::*;
use lbadmm::network::Architecture;

#[test]
fn finite_differences_on_every_layer_kind() {
    for (kind, arch) in layer_kind_cases() {
        let params = random_params(&arch, 17);
        assert!(params.flatten().len() <= 200, "{kind} has too many parameters");
        let (x, labels) = random_batch(&arch, 4, 23);
        let (err, count) = max_fd_error(&arch, &params, &x, &labels);
        assert!(err < 1e-4, "{kind}: max relative error {err} over {count} coordinates");
    }
}

#[test]
fn two_layer_mlp_matches_scalar_reference() {
    let arch = Architecture::mlp(vec![7], &[5, 4]).unwrap();
    for seed in 0..5 {
        let params = random_params(&arch, seed);
        let (x, labels) = random_batch(&arch, 4, 100 + seed);
        let fast = arch.loss(&params, &x, &labels).unwrap();
        let slow = reference_mlp_loss(
            params.weights[0].data(),
            params.biases[0].as_ref().unwrap().data(),
            params.weights[1].data(),
            params.biases[1].as_ref().unwrap().data(),
            (7, 5, 4),
            x.data(),
            &labels,
        );
        assert!((fast - slow).abs() < 1e-10, "{fast} vs {slow}");
    }
}

#[test]
fn mnist_sized_cnn_gradient_spot_check() {
    // full-size CNN: compare a handful of coordinates only
    let arch = Architecture::mnist_cnn();
    let mut params = random_params(&arch, 5);
    let (x, labels) = random_batch(&arch, 2, 6);
    let (_, grads) = arch.loss_and_grad(&params, &x, &labels).unwrap();
    for (layer, idx) in [(0usize, 7usize), (1, 300), (2, 1000)] {
        let orig = params.weights[layer].data()[idx];
        params.weights[layer].data_mut()[idx] = orig + STEP;
        let up = arch.loss(&params, &x, &labels).unwrap();
        params.weights[layer].data_mut()[idx] = orig - STEP;
        let down = arch.loss(&params, &x, &labels).unwrap();
        params.weights[layer].data_mut()[idx] = orig;
        let fd = (up - down) / (2.0 * STEP);
        let g = grads.weights[layer].data()[idx];
        assert!(rel_err(g, fd) < 1e-4, "layer {layer} idx {idx}: {g} vs {fd}");
    }
}
