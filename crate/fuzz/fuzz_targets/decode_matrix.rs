#![no_main]

use libfuzzer_sys::fuzz_target;
use promptta::featio::{decode_matrix, encode_matrix};

fuzz_target!(|data: &[u8]| {
    if let Ok(matrix) = decode_matrix(data) {
        // Accepted input must survive a re-encode.
        let bytes = encode_matrix(&matrix).expect("decoded matrix re-encodes");
        assert_eq!(decode_matrix(&bytes).expect("round trip"), matrix);
    }
});
