#![no_main]

use graft_core::data::load_csv_from_reader;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ds) = load_csv_from_reader(data, "time", "event") {
        assert_eq!(ds.times.len(), ds.features.nrows());
        assert!(ds.times.iter().all(|t| t.is_finite() && *t > 0.0));
        assert!(ds.features.iter().all(|v| v.is_finite()));
    }
});
