#![no_main]
use libfuzzer_sys::fuzz_target;
use radial_bnn::harness::{metrics_to_string, read_metrics};

fuzz_target!(|data: &[u8]| {
    if let Ok((n_tasks, records)) = read_metrics(data) {
        let text = metrics_to_string(n_tasks, &records).expect("read records re-serialize");
        let (n, again) = read_metrics(text.as_bytes()).expect("written metrics read back");
        assert_eq!(n, n_tasks);
        assert_eq!(metrics_to_string(n, &again).unwrap(), text);
    }
});
