//! Full verification suite: runs every criterion at its pinned tolerance
//! and prints one pass/fail line per criterion.

use fraclab_core::acceptance;

#[test]
fn acceptance_suite() {
    let outcomes = acceptance::run_all();
    let mut all_passed = true;
    for outcome in &outcomes {
        println!("{}", outcome.table_line());
        all_passed &= outcome.passed;
    }
    assert!(
        all_passed,
        "criteria failed: {:?}",
        outcomes
            .iter()
            .filter(|o| !o.passed)
            .map(|o| format!("{} ({}): {}", o.id, o.label, o.measured))
            .collect::<Vec<_>>()
    );
}
