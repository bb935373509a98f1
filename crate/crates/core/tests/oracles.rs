//! Fast paths against brute-force references.

use fedicra_core::oracle::{run_suite, Case};

fn check(suite: &str) {
    let cases = run_suite(suite, 2024).unwrap();
    let worst = cases
        .iter()
        .max_by(|a, b| (a.error / a.tolerance.max(1e-300)).total_cmp(&(b.error / b.tolerance.max(1e-300))))
        .unwrap();
    println!("{}: {} cases, worst {} error {:.3e} (tol {:.0e})", suite, cases.len(), worst.name, worst.error, worst.tolerance);
    let failed: Vec<&Case> = cases.iter().filter(|c| !c.passed).collect();
    assert!(failed.is_empty(), "{:#?}", failed);
}

#[test]
fn finite_differences() {
    check("grad");
}

#[test]
fn boruvka_matches_kruskal() {
    check("mst");
}

#[test]
fn tree_filter_matches_all_pairs() {
    check("treefilter");
}

#[test]
fn gated_crf_matches_double_loop() {
    check("crf");
}

#[test]
fn hd95_matches_all_pairs() {
    check("metrics");
}
