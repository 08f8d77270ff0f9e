//! Class colors are an affine function of the embeddings, so a least-squares
//! fit on seen classes must predict the unseen colors.

mod common;

#[test]
fn seen_fit_predicts_unseen_colors() {
    let worst = common::linear_recovery_error();
    assert!(worst < 1e-6, "max unseen color error {worst:e}");
}
