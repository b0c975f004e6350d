//! Runs the checked-in fuzz corpus through the same assertions as the fuzz targets.

use std::fs;
use std::path::PathBuf;

use dqsgd::config::{parse_config, to_config_string};
use dqsgd::quant::{decode, encode, NormPrecision, QuantizerConfig};

fn corpus(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<_> = fs::read_dir(&dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    out
}

#[test]
fn frame_seeds_decode_and_round_trip() {
    let seeds = corpus("decode_frame");
    assert!(!seeds.is_empty());
    for (name, data) in seeds {
        let [codec, precision, dim, frame @ ..] = data.as_slice() else { panic!("{name}: short seed") };
        let cfg = match codec {
            0 => QuantizerConfig::sign_only(),
            c => QuantizerConfig::ewu(2 + (c - 1) % 31).unwrap(),
        }
        .with_precision(if precision & 1 == 1 { NormPrecision::F64 } else { NormPrecision::F32 });
        let dim = 1 + *dim as usize % 64;
        let q = decode(frame, dim, &cfg).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(encode(&q).unwrap(), frame, "{name}");
    }
}

#[test]
fn config_seeds_round_trip() {
    for (name, data) in corpus("parse_config") {
        let text = String::from_utf8(data).unwrap();
        match parse_config(&text) {
            Ok(spec) => assert_eq!(parse_config(&to_config_string(&spec)).unwrap(), spec, "{name}"),
            Err(errs) => assert!(name == "errors" && errs.len() >= 3, "{name}: {errs:?}"),
        }
    }
}
