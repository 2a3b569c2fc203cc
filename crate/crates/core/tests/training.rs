use mwq_core::nn::train::{evaluate, train, TrainConfig};
use mwq_core::nn::{synthetic_shapes, Model, ToySpec};

#[test]
fn full_precision_reaches_97_percent_on_shapes() {
    let (tr, te) = synthetic_shapes(2100, 11).unwrap().split_tail(600).unwrap();
    let spec = ToySpec {
        input: [1, 16, 16],
        classes: 3,
        enhance: None,
    };
    let mut model = Model::toy(&spec, 0).unwrap();
    let before = evaluate(&mut model, &te, 256).unwrap();
    let log = train(&mut model, &tr, &te, &TrainConfig::default()).unwrap();
    assert_eq!(log.len(), 10);
    let acc = log.last().unwrap().test_acc;
    assert!(acc >= 97.0, "accuracy {acc:.2} (from {before:.2})");
    assert!(log.last().unwrap().train_loss < log[0].train_loss);
}
