//! Writes a synthetic benchmark corpus.
//!
//! `cargo run --example make_corpus -- <dir> [count] [size] [seed]`

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let dir = args.next().ok_or("usage: make_corpus <dir> [count] [size] [seed]")?;
    let count = args.next().map_or(Ok(50), |v| v.parse())?;
    let size = args.next().map_or(Ok(256), |v| v.parse())?;
    let seed = args.next().map_or(Ok(0), |v| v.parse())?;
    let paths = imgtrace::corpus::write_corpus(&dir, count, size, seed)?;
    println!("wrote {} images to {dir}", paths.len());
    Ok(())
}
