//! Scan time against sequence length; each doubling should roughly double
//! the median time.

fn main() -> seglstm::Result<()> {
    let csv = seglstm::cli::bench_scan(&[128, 256, 512, 1024], 32, 3, 0)?;
    print!("{csv}");
    Ok(())
}
