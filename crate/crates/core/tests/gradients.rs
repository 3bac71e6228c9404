//! Every loss against central finite differences.

mod common;

use common::grad_suite;
use common::FD_TOL;

fn check(name: &str, err: f64) {
    assert!(err <= FD_TOL, "{name}: worst relative error {err:e}");
}

#[test]
fn cross_entropy_gradient() {
    check("cross-entropy", grad_suite::cross_entropy());
}

#[test]
fn latent_loss_gradient() {
    check("latent", grad_suite::latent());
}

#[test]
fn consistency_gradient_through_projection() {
    check("consistency", grad_suite::consistency());
}

#[test]
fn adversarial_gradient() {
    check("adversarial", grad_suite::adversarial());
}

#[test]
fn discriminator_gradient() {
    check("discriminator", grad_suite::discriminator());
}
