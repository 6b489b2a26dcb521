//! Rendered programs and SQL against checked-in files. Set `NNSQL_BLESS=1`
//! to rewrite them after an intended change.

mod common;

use std::fs;

#[test]
fn golden_files_match() {
    let bless = std::env::var_os("NNSQL_BLESS").is_some();
    let mut stale = Vec::new();
    for (name, text) in common::golden_texts() {
        let path = common::golden_path(name);
        if bless {
            fs::write(&path, &text).unwrap();
            continue;
        }
        let want = fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        if want != text {
            stale.push(name);
        }
    }
    assert!(stale.is_empty(), "golden files differ: {stale:?}");
}

#[test]
fn goldens_are_lf_and_end_with_newline() {
    for (name, _) in common::golden_texts() {
        let bytes = fs::read(common::golden_path(name)).unwrap();
        assert!(!bytes.contains(&b'\r'), "{name}");
        assert_eq!(bytes.last(), Some(&b'\n'), "{name}");
    }
}
