use crossing_profiler_web::{augmentation_json, positional_encoding_grid, scene_json};
use serde_json::Value;

#[test]
fn scene_curves_share_a_grid_and_peak() {
    let v: Value = serde_json::from_str(&scene_json(0.3, 20.0, 1).unwrap()).unwrap();
    let n = v["samples"].as_u64().unwrap() as usize;
    for key in ["profiler", "gps", "pitch", "accel_z"] {
        assert_eq!(v[key]["values"].as_array().unwrap().len(), n, "{key}");
    }
    assert_eq!(v["peak_index"].as_u64().unwrap() as usize, n / 2);
}

#[test]
fn augmentation_children_partition_the_parent() {
    let v: Value = serde_json::from_str(&augmentation_json(0.25, 15.0, 3).unwrap()).unwrap();
    let n = v["original"]["values"].as_array().unwrap().len();
    let e = v["even"]["values"].as_array().unwrap().len();
    let o = v["odd"]["values"].as_array().unwrap().len();
    assert_eq!(e + o, n);
    assert_eq!(v["noisy"]["values"].as_array().unwrap().len(), n);
}

#[test]
fn bad_scene_reports_an_error() {
    assert!(scene_json(-1.0, 20.0, 0).unwrap_err().contains("hump_height"));
}

#[test]
fn encoding_grid_is_row_major() {
    let g = positional_encoding_grid(4, 6).unwrap();
    assert_eq!(g.len(), 24);
    assert_eq!(g[0], 0.0);
    assert_eq!(g[1], 1.0);
    assert!((g[6] - 1f64.sin()).abs() < 1e-15);
}
