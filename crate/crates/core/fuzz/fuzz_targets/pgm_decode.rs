#![no_main]

use libfuzzer_sys::fuzz_target;
use tbd_core::pgm::{Pgm, PgmEncoding};

fuzz_target!(|data: &[u8]| {
    if let Ok(pgm) = Pgm::decode(data) {
        // anything accepted must survive a re-encode
        for encoding in [PgmEncoding::Raw, PgmEncoding::Plain] {
            assert_eq!(Pgm::decode(&pgm.encode(encoding)).unwrap(), pgm);
        }
    }
});
