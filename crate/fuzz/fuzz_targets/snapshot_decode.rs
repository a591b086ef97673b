#![no_main]
use libfuzzer_sys::fuzz_target;
use radial_bnn::layers::PosteriorSnapshot;

fuzz_target!(|data: &[u8]| {
    if let Ok(snap) = PosteriorSnapshot::from_bytes(data) {
        let bytes = snap.to_bytes();
        let again = PosteriorSnapshot::from_bytes(&bytes).expect("re-encoded snapshot decodes");
        assert_eq!(again.to_bytes(), bytes);
        let _ = snap.to_network();
    }
});
