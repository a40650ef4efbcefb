//! Checkpoint round trip and what loading reports for damaged files.

use rgbtseg::config::{AblationFlags, ModelConfig};
use rgbtseg::model::Segmenter;
use rgbtseg::train::{decode_checkpoint, encode_checkpoint};

fn main() -> rgbtseg::Result<()> {
    let cfg = ModelConfig {
        image_size: 32,
        patch: 4,
        dim: 32,
        depth: 2,
        ..Default::default()
    };
    let (params, _) = Segmenter::build(&cfg, &AblationFlags::default())?;
    let bytes = encode_checkpoint(&params);
    let back = decode_checkpoint(&bytes)?;
    println!("{} tensors, {} bytes, round trip equal: {}", params.len(), bytes.len(), back == params);
    println!("re-encoded bytes identical: {}", encode_checkpoint(&back) == bytes);

    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    let mut flipped = bytes.clone();
    flipped[bytes.len() / 2] ^= 0x10;
    for (what, data) in [
        ("empty file", &bytes[..0]),
        ("bad magic", &bad_magic[..]),
        ("truncated", &bytes[..bytes.len() - 9]),
        ("flipped bit", &flipped[..]),
    ] {
        match decode_checkpoint(data) {
            Ok(_) => println!("{what:<12} accepted"),
            Err(e) => println!("{what:<12} {e}"),
        }
    }
    Ok(())
}
