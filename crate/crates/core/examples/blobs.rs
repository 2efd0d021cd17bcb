//! Write and read the tensor and packed-weight blob formats.

use xnor_bnn::binarize::{pack_sign_rows, unpack};
use xnor_bnn::tensor::{fill_random, random_matrix};
use xnor_bnn::{FloatTensor, PackedBitMatrix};

fn main() -> xnor_bnn::Result<()> {
    let dir = std::env::temp_dir().join("xnor-bnn-blobs");
    std::fs::create_dir_all(&dir)?;

    let input = fill_random([2, 3, 32, 32], 42)?;
    let path = dir.join("input.blob");
    input.save(&path)?;
    let bytes = std::fs::metadata(&path)?.len();
    assert_eq!(FloatTensor::load(&path)?, input);
    println!(
        "{}: {bytes} bytes (32-byte header + {} f32)",
        path.display(),
        input.len()
    );

    let packed = pack_sign_rows(&random_matrix(16, 27, 1));
    let path = dir.join("weights.pbm");
    packed.save(&path)?;
    let back = PackedBitMatrix::load(&path)?;
    assert_eq!(back, packed);
    println!(
        "{}: {} bytes (17-byte header + {} words), first row {:?}",
        path.display(),
        std::fs::metadata(&path)?.len(),
        packed.words().len(),
        &unpack(&back).row(0)[..8]
    );
    Ok(())
}
