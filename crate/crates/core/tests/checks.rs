use letlab_core::checks::{run, Scope, GRADCHECK_THRESHOLD, SEEDS};

#[test]
fn primitive_suite_passes() {
    let r = run(Scope::Primitives).unwrap();
    assert!(r.pass(), "{r}");
    assert!(r.items.iter().any(|i| i.name == "causal_attention"));
    assert!(r.items.iter().any(|i| i.name == "interpolate_last_dim"));
}

#[test]
fn loss_suite_covers_every_loss_over_twenty_seeds() {
    let r = run(Scope::Losses).unwrap();
    assert!(r.pass(), "{r}");
    for name in ["nll", "rkd", "proj_cosine/mean", "proj_logsum/mean", "let_total_cosine", "let_total_logsum"] {
        let item = r.items.iter().find(|i| i.name == name).unwrap_or_else(|| panic!("missing {name}"));
        assert_eq!(item.cases, SEEDS);
        assert!(item.worst < GRADCHECK_THRESHOLD);
    }
}

#[test]
fn model_suite_passes() {
    let r = run(Scope::Model).unwrap();
    assert!(r.pass(), "{r}");
}

#[test]
fn reports_are_reproducible() {
    let a = run(Scope::Losses).unwrap();
    let b = run(Scope::Losses).unwrap();
    assert_eq!(a.to_string(), b.to_string());
}
