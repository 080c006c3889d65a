#![no_main]

use libfuzzer_sys::fuzz_target;
use simsl::SimslConfig;

// Fit settings come from user-supplied JSON; parsing and validation must
// never panic. The trailing byte varies the covariate count validate sees.
fuzz_target!(|data: &[u8]| {
    let Some((&p, rest)) = data.split_last() else { return };
    let Ok(config) = serde_json::from_slice::<SimslConfig>(rest) else { return };
    let _ = config.validate(1 + p as usize);
});
