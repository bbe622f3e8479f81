//! Saves a model as a content-addressed checkpoint, reloads it, and shows how
//! corruption is reported.

use shiftlab::harness::checkpoint::{decode, load_checkpoint, save_in_dir, CheckpointMeta};
use shiftlab::models::{init, ModelSpec};

fn main() -> shiftlab::Result<()> {
    let dir = std::env::temp_dir().join("shiftlab-checkpoint-demo");
    let params = init(&ModelSpec::small_cnn(1, 8, 10), 1)?;
    let meta = CheckpointMeta::new("demo").with_seed("init", 1);
    let (path, hash) = save_in_dir(&dir, &params, &meta)?;
    println!("saved {} ({} parameters)", path.display(), params.num_params());
    println!("payload sha256 {hash}");

    let back = load_checkpoint(&path)?;
    println!("reloaded identical: {}", back.params == params);

    let mut bytes = std::fs::read(&path)?;
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    match decode(&bytes) {
        Ok(_) => println!("corruption went unnoticed"),
        Err(e) => println!("flipped one payload bit: {e}"),
    }
    bytes.truncate(20);
    if let Err(e) = decode(&bytes) {
        println!("truncated file: {e}");
    }
    Ok(())
}
