//! Optimized convolution kernels against direct nested loops; the cases live
//! in `cases/conv_oracle.rs` so the acceptance run can replay them.

#[path = "cases/conv_oracle.rs"]
mod cases;

#[test]
fn conv_matches_direct_loops() {
    cases::conv_matches_direct_loops()
}

#[test]
fn deconv_matches_direct_loops() {
    cases::deconv_matches_direct_loops()
}

#[test]
fn transposed_convolution_is_the_adjoint() {
    cases::transposed_convolution_is_the_adjoint()
}

#[test]
fn every_case_is_wired() {
    assert_eq!(cases::CASES.len(), 3);
}
