//! Encodes a segment matrix as PEMB, shows the header and decodes it again.

use protoscope::embedstore::{decode_pemb, encode_pemb, SegmentMatrix, PEMB_HEADER_LEN};

fn main() -> protoscope::Result<()> {
    let m = SegmentMatrix::from_rows(&[vec![0.5, -1.25, 3.0], vec![1e-3, 0.0, -7.5]])?;
    let bytes = encode_pemb(&m)?;
    println!("{} bytes: header {:02x?}", bytes.len(), &bytes[..PEMB_HEADER_LEN]);
    let back = decode_pemb(&bytes)?;
    println!("decoded {} x {}: {:?}", back.n_segments(), back.dim(), back.values());
    assert_eq!(encode_pemb(&back)?, bytes);

    let mut truncated = bytes.clone();
    truncated.pop();
    println!("truncated file: {}", decode_pemb(&truncated).unwrap_err());
    Ok(())
}
