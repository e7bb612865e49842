mod common;

#[test]
fn closed_form_losses() {
    common::oracles::assert_loss_oracles();
}

#[test]
fn text_metrics_on_fixed_pairs() {
    common::oracles::assert_text_oracles();
}
