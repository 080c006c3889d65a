#![no_main]

use libfuzzer_sys::fuzz_target;
use simsl::io::read_dataset_from;

// The CSV ingestion path must reject arbitrary bytes with an error, never a
// panic. The first input byte picks the column-selection mode.
fuzz_target!(|data: &[u8]| {
    let Some((&mode, rest)) = data.split_first() else { return };
    match mode % 3 {
        0 => {
            let _ = read_dataset_from(rest, "y", "a", None);
        }
        1 => {
            let cols = vec!["x1".to_string(), "x2".to_string()];
            let _ = read_dataset_from(rest, "y", "a", Some(&cols));
        }
        _ => {
            // Header names taken from the input itself.
            let text = String::from_utf8_lossy(rest);
            let mut fields = text.lines().next().unwrap_or("").split(',');
            let outcome = fields.next().unwrap_or("y").to_string();
            let dose = fields.next().unwrap_or("a").to_string();
            let _ = read_dataset_from(rest, &outcome, &dose, None);
        }
    }
});
