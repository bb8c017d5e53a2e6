#[path = "common/gradcases.rs"]
mod gradcases;

#[test]
fn every_op_matches_central_differences() {
    let mut bad = Vec::new();
    for i in 0..50 {
        let c = gradcases::case(i);
        let err = gradcases::check(&c);
        if err > 1e-3 {
            bad.push(format!("case {i} ({}): rel err {err:.2e}", c.name));
        }
    }
    assert!(bad.is_empty(), "{}", bad.join("\n"));
}
