mod common;

#[test]
fn reduced_model_tracks_plain_lstm_reference() {
    let (model, reference) = common::reduction_losses(20, 3);
    for (step, (a, b)) in model.iter().zip(&reference).enumerate() {
        assert!(
            (a - b).abs() < 1e-8,
            "step {step}: model {a} vs reference {b}"
        );
    }
    assert!(model.last() < model.first(), "{model:?}");
}
