//! Prints the full default run config as TOML, a starting point for
//! `jetdistill pretrain --config`.

use jetdistill::config::RunConfig;

fn main() {
    print!("{}", RunConfig::default().to_toml());
}
