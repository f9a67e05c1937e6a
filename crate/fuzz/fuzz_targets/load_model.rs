#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(m) = kinloop::model::load_model_str(text) {
            // anything accepted must be usable
            let q = m.reference_configuration();
            let z = nalgebra::DVector::zeros(m.nv);
            let _ = kinloop::rba::forward_kinematics(&m, &q, &z, &z);
        }
    }
});
