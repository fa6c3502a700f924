#![no_main]

use libfuzzer_sys::fuzz_target;
use tbd_core::eval_metrics::{read_metrics_csv, RunRecord};

fuzz_target!(|data: &[u8]| {
    if let Ok(record) = RunRecord::read_csv(data) {
        // compare bytes, not records: NaN fields are legal and never equal
        let mut first = Vec::new();
        record.write_csv(&mut first).unwrap();
        let mut second = Vec::new();
        RunRecord::read_csv(first.as_slice())
            .unwrap()
            .write_csv(&mut second)
            .unwrap();
        assert_eq!(first, second);
    }
    let _ = read_metrics_csv(data);
});
