//! Write a random checkpoint, print its manifest, read it back.
//!
//! cargo run --example checkpoint_roundtrip -- [path]

use guided_decode::run::describe_manifest;
use guided_decode::weights_io::{load_checkpoint, random_checkpoint, read_manifest, save_checkpoint};
use guided_decode::ModelConfig;

fn main() -> anyhow::Result<()> {
    let path = std::env::args()
        .nth(1)
        .map(std::path::PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("toy.scfg"));
    let params = random_checkpoint(&ModelConfig::toy(), 42)?;
    save_checkpoint(&path, &params)?;

    let bytes = std::fs::read(&path)?;
    let manifest = read_manifest(&bytes)?;
    print!("{}", describe_manifest(&manifest));
    println!("file {} bytes, payload starts at {}", bytes.len(), manifest.header_len);

    let (_, loaded) = load_checkpoint(&path)?;
    assert_eq!(loaded, params);
    println!("round trip of {} is bitwise exact", path.display());
    Ok(())
}
