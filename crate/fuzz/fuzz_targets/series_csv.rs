#![no_main]

use libfuzzer_sys::fuzz_target;
use qctc::observables::TimeSeries;

fuzz_target!(|data: &[u8]| {
    if let Ok(ts) = TimeSeries::read_csv(data) {
        let mut buf = Vec::new();
        ts.write_csv(&mut buf).expect("writable");
        let again = TimeSeries::read_csv(buf.as_slice()).expect("round trip parses");
        assert_eq!(ts.times, again.times);
    }
});
