//! Runs the gradient-check suite over every tensor operation and attack loss
//! and prints the table the `gradcheck` command prints.

use advshield::cli::format_gradcheck;
use advshield::gradcheck::run_suite;
use advshield::models::init_models;

fn main() -> advshield::Result<()> {
    let items = run_suite(&init_models(7), 0)?;
    print!("{}", format_gradcheck(&items));
    Ok(())
}
