#![no_main]

use graft_core::model_io::ModelFile;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(file) = ModelFile::from_slice(data) else {
        return;
    };
    // anything accepted must survive a write/read cycle unchanged
    if let Ok(text) = file.to_string() {
        let back = ModelFile::from_slice(text.as_bytes()).expect("re-read of written model");
        assert_eq!(back.to_string().unwrap(), text);
    }
});
