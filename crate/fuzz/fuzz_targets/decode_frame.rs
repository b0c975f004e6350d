#![no_main]
use dqsgd::quant::{decode, encode, NormPrecision, QuantizerConfig};
use libfuzzer_sys::fuzz_target;

// Header: codec selector, precision selector, dimension; the rest is the frame.
fuzz_target!(|data: &[u8]| {
    let [codec, precision, dim, frame @ ..] = data else {
        return;
    };
    let cfg = match codec {
        0 => QuantizerConfig::sign_only(),
        c => QuantizerConfig::ewu(2 + (c - 1) % 31).unwrap(),
    };
    let precision = if precision & 1 == 1 { NormPrecision::F64 } else { NormPrecision::F32 };
    let cfg = cfg.with_precision(precision);
    let dim = 1 + *dim as usize % 64;
    if let Ok(q) = decode(frame, dim, &cfg) {
        let bytes = encode(&q).expect("decoded frame re-encodes");
        assert_eq!(bytes.len(), frame.len());
        assert_eq!(decode(&bytes, dim, &cfg).unwrap(), q);
    }
});
