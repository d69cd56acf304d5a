//! Regenerates the bundled synthetic fixture:
//! `cargo run -p whitener-cli --example make_fixture -- crates/cli/fixtures/heteroscedastic.csv`

use whitener_cli::fixtures::{heteroscedastic_csv, FIXTURE_ROWS, FIXTURE_SEED};

fn main() -> std::io::Result<()> {
    let path = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "crates/cli/fixtures/heteroscedastic.csv".to_string());
    std::fs::write(&path, heteroscedastic_csv(FIXTURE_ROWS, FIXTURE_SEED))?;
    eprintln!("wrote {path}");
    Ok(())
}
