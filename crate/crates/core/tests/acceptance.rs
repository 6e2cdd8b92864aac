// SPDX-License-Identifier: MIT OR Apache-2.0

use attn_ident::acceptance::{verify, CriterionResult};
use attn_ident::simplex::DEFAULT_SCALE;

// Set ACCEPTANCE_OUT to keep the CSVs; otherwise a temp dir is used.
#[test]
fn acceptance_criteria() {
    let tmp = tempfile::tempdir().unwrap();
    let out = std::env::var_os("ACCEPTANCE_OUT").map_or_else(|| tmp.path().to_path_buf(), Into::into);
    let print = |r: &CriterionResult| {
        println!("{} {}: {}", r.id, if r.passed { "PASS" } else { "FAIL" }, r.detail);
    };
    let results = verify(&out, 0, None, DEFAULT_SCALE, print).unwrap();
    assert_eq!(results.len(), 10);
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.id.as_str()).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
