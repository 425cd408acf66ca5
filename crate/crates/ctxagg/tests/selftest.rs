use ctxagg::selftest::{catalogue, run};

#[test]
fn every_worked_example_holds() {
    let outcomes = run(&catalogue());
    let failed: Vec<String> = outcomes
        .iter()
        .filter_map(|o| {
            o.error
                .as_ref()
                .map(|e| format!("{}/{}: {e}", o.module, o.name))
        })
        .collect();
    assert!(failed.is_empty(), "{}", failed.join("\n"));
}
