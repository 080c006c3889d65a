#![no_main]

use libfuzzer_sys::fuzz_target;
use simsl::io::ModelDocument;

// Model documents arrive from disk, so deserialization plus the semantic
// checks in into_model must hold up against arbitrary bytes, and a document
// that passes them must support prediction without panicking.
fuzz_target!(|data: &[u8]| {
    let Ok(doc) = serde_json::from_slice::<ModelDocument>(data) else { return };
    let Ok(model) = doc.into_model() else { return };
    let p = model.beta.len();
    let x = ndarray::Array2::<f64>::zeros((1, p));
    let mid = 0.5 * (model.a_range.0 + model.a_range.1);
    let a = ndarray::Array1::from(vec![mid]);
    let _ = model.predict_surface(x.view(), a.view());
    let _ = model.predict_mean(x.view(), a.view());
    let _ = model.partial_deriv_u(x.view(), a.view());
});
