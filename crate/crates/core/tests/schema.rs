//! Serialized documents carry exactly the keys their schema files declare.

use dsol::grid::{GridFunction, Lattice, Mask};
use dsol::tensor::{Decomposition, Tensor4};
use serde_json::Value;
use std::collections::BTreeSet;

fn schema(name: &str) -> Value {
    let path = format!("{}/schema/{name}.schema.json", env!("CARGO_MANIFEST_DIR"));
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn keys(v: &Value) -> BTreeSet<String> {
    v.as_object().unwrap().keys().cloned().collect()
}

fn assert_matches(doc: &Value, name: &str) {
    let s = schema(name);
    let declared = keys(&s["properties"]);
    let required: BTreeSet<String> =
        s["required"].as_array().unwrap().iter().map(|k| k.as_str().unwrap().to_string()).collect();
    let present = keys(doc);
    assert!(present.is_subset(&declared), "{name}: undeclared keys {:?}", present.difference(&declared));
    assert!(required.is_subset(&present), "{name}: missing keys {:?}", required.difference(&present));
}

const DIAG: &str = r#"{"N":2,"n":2,
  "B_factors":[[[1,0],[0,0]],[[0,0],[0,1]]],
  "A_factors":[[[1,0],[0,0]],[[1,0],[0,0]]]}"#;

#[test]
fn decomposition_and_tensor_documents_follow_their_schemas() {
    let d: Decomposition = serde_json::from_str(DIAG).unwrap();
    assert_matches(&serde_json::to_value(&d).unwrap(), "decomposition");
    let t: Tensor4 = d.reconstruct();
    assert_matches(&serde_json::to_value(&t).unwrap(), "tensor4");
}

#[test]
fn grid_header_follows_its_schema() {
    for mask in [Mask::Rect, Mask::Disc { center: vec![0.5, 0.5], radius: 0.4 }] {
        let lattice = Lattice::new(vec![4, 5], vec![0.25, 0.2], vec![0.0, 0.0], mask).unwrap();
        let g = GridFunction::from_fn(lattice, 1, |x| vec![x[0]]);
        let mut bytes = Vec::new();
        g.write_to(&mut bytes).unwrap();
        let line = bytes.split(|&b| b == b'\n').next().unwrap();
        let header: Value = serde_json::from_slice(line).unwrap();
        assert_matches(&header, "grid_header");
        assert_eq!(header["byte_order"], "little");
    }
}
