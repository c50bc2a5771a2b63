use rljp_core::synthetic::generate;

#[test]
fn bundled_fixture_matches_generator() {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/synthetic_60.jsonl");
    let expected = generate(15).join("\n") + "\n";
    if std::env::var_os("RLJP_REGENERATE_FIXTURES").is_some() {
        std::fs::write(path, &expected).unwrap();
    }
    assert_eq!(std::fs::read_to_string(path).unwrap(), expected);
}
