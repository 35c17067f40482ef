use heatseg_bench::{hco_fixture, random_field};

#[test]
fn hco_fixture_preserves_shape_and_is_finite() {
    let (layer, store) = hco_fixture(&[16, 12], 5);
    let x = random_field(&[3, 16, 12], 9);
    let y = layer.forward(&store, &x).unwrap();
    assert_eq!(y.shape(), x.shape());
    assert!(y.data().iter().all(|v| v.is_finite()));
}

#[test]
fn different_seeds_give_different_fields() {
    assert_ne!(random_field(&[4, 4], 1), random_field(&[4, 4], 2));
}
