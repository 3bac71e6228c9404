//! Closed-form cases of the latent loss, the co-occurrence statistic and the projection.

mod common;

use common::criteria;

#[test]
fn latent_loss_closed_forms() {
    criteria::latent_analytics().assert("latent analytics");
}

#[test]
fn ema_and_projection() {
    criteria::ema_projection().assert("EMA and projection");
}

#[test]
fn semantic_to_latent_contract() {
    criteria::projection_contract().assert("projection contract");
}
