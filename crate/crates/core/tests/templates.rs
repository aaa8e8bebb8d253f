mod common;

use common::{fixture_dir, golden_mismatches, render_templates};

#[test]
fn templates_match_golden_files() {
    if std::env::var_os("CQF_BLESS").is_some() {
        std::fs::create_dir_all(fixture_dir()).unwrap();
        for (name, text) in render_templates() {
            std::fs::write(fixture_dir().join(name), text).unwrap();
        }
    }
    assert_eq!(golden_mismatches(), Vec::<String>::new());
}

#[test]
fn judge_history_has_one_marker_pair_per_turn() {
    let (_, judge) = render_templates().pop().unwrap();
    let history = judge.split("\n\n").next().unwrap();
    assert_eq!(history.matches("Human:").count(), 3);
    assert_eq!(history.matches("AI:").count(), 3);
}
