//! PRISM explicit files read back by a parser written against the format
//! grammar, plus a file-level round trip.

mod common;

use bisimcert::checker::prism::{export_prism, import_prism, render_prism, with_suffix};
use bisimcert::checker::LatentMc;
use bisimcert::latent::LatentMdp;
use bisimcert::Error;
use common::prism_text::{ints, rebuild, same_model};

#[test]
fn exported_fixture_parses_back_to_the_same_model() {
    let (m, pi) = common::four_state();
    let files = render_prism(&m, Some(&pi), None).unwrap().files;
    let rebuilt = rebuild(&files, m.n_bits, m.n_ap);
    same_model(&m, &rebuilt);

    let mc = LatentMc::induced(&m, &pi).unwrap();
    let mut lines = files["_mc.tra"].lines();
    let header = ints(lines.next().unwrap());
    assert_eq!(header[0], mc.len());
    let mut dense = vec![vec![0.0; mc.len()]; mc.len()];
    for line in lines {
        let tok: Vec<&str> = line.split_whitespace().collect();
        dense[tok[0].parse::<usize>().unwrap()][tok[1].parse::<usize>().unwrap()] = tok[2].parse().unwrap();
    }
    assert_eq!(dense, common::dense_of(&mc));
    let mut srew = files["_mc.srew"].lines();
    srew.next();
    for line in srew {
        let tok: Vec<&str> = line.split_whitespace().collect();
        let i: usize = tok[0].parse().unwrap();
        assert_eq!(tok[1].parse::<f64>().unwrap(), mc.rewards[i]);
    }
}

#[test]
fn written_files_round_trip_bit_identically() {
    let (m, pi) = common::four_state();
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first");
    let second = dir.path().join("second");
    let written = export_prism(&m, Some(&pi), &first).unwrap();
    let back = import_prism(&first).unwrap();
    assert_eq!(back.to_json(), m.to_json());
    export_prism(&back, Some(&pi), &second).unwrap();
    for path in written {
        let suffix = path.to_str().unwrap().strip_prefix(first.to_str().unwrap()).unwrap().to_string();
        if suffix == ".meta.json" {
            continue;
        }
        let a = std::fs::read(&path).unwrap();
        let b = std::fs::read(with_suffix(&second, &suffix)).unwrap();
        assert_eq!(a, b, "{suffix}");
    }
}

#[test]
fn missing_pairs_block_export_until_smoothed() {
    let (m, _) = common::four_state();
    let mut doc: serde_json::Value = serde_json::from_str(&m.to_json()).unwrap();
    let keep = |e: &serde_json::Value| !(e[0] == 3 && e[1] == 1);
    for key in ["transitions", "rewards"] {
        let v: Vec<_> = doc[key].as_array().unwrap().iter().filter(|e| keep(e)).cloned().collect();
        doc[key] = serde_json::Value::Array(v);
    }
    let partial = LatentMdp::from_json(&doc.to_string()).unwrap();
    match render_prism(&partial, None, None) {
        Err(Error::UnsupportedPair { state: 3, action: 1 }) => {}
        other => panic!("expected the missing pair to be reported, got {other:?}"),
    }
    let smoothed = partial.smoothed_add_one();
    let files = render_prism(&smoothed, None, None).unwrap().files;
    let rebuilt = rebuild(&files, smoothed.n_bits, smoothed.n_ap);
    same_model(&smoothed, &rebuilt);
}
