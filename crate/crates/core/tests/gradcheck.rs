use xfmamba::checks::{run, Scope};

fn assert_all_pass(scope: Scope) {
    let records = run(scope, None);
    assert!(!records.is_empty());
    for r in &records {
        assert!(r.passed, "{} failed: {r:?}", r.name);
    }
}

#[test]
fn op_scope() {
    let records = run(Scope::Op, None);
    assert!(records.iter().all(|r| r.passed), "{records:#?}");
    for op in [
        "matmul",
        "layernorm",
        "dwconv2d",
        "selective_scan",
        "channel_select",
        "cross_entropy",
    ] {
        assert!(records.iter().any(|r| r.name == op), "missing {op}");
    }
}

#[test]
fn block_scope() {
    assert_all_pass(Scope::Block);
}

#[test]
fn model_scope() {
    assert_all_pass(Scope::Model);
}

#[test]
fn corrupted_rule_fails_its_own_check_only() {
    let records = run(Scope::Op, Some("softplus"));
    let failed: Vec<&str> = records.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    assert_eq!(failed, ["softplus"]);
}

#[test]
fn corrupted_scan_rule_breaks_blocks() {
    let records = run(Scope::Block, Some("selective_scan"));
    assert!(records.iter().all(|r| !r.passed), "{records:#?}");
}
