//! Running a benchmark config from code and printing the CSV it produces.
//! The same config runs from the command line with
//! `speckv-lab bench --config examples/configs/recall.toml --out results`.

use speckv_lab::bench::{write_csv, BenchConfig, BenchRunner};

fn main() -> speckv_lab::Result<()> {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/examples/configs/recall.toml");
    let mut config = BenchConfig::load(std::path::Path::new(path))?;
    config.count = 5;
    let records = BenchRunner::new(config).run()?;
    let mut out = Vec::new();
    write_csv(&mut out, &records)?;
    print!("{}", String::from_utf8_lossy(&out));
    Ok(())
}
