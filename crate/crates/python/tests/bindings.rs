use pyo3::ffi::c_str;
use pyo3::prelude::*;
use trimodal::trimodal;

fn run(code: &std::ffi::CStr) {
    pyo3::append_to_inittab!(trimodal);
    Python::initialize();
    Python::attach(|py| {
        if let Err(e) = py.run(code, None, None) {
            e.print(py);
            panic!("python snippet failed");
        }
    });
}

#[test]
fn module_round_trip() {
    run(c_str!(
        r#"
import trimodal
f = trimodal.PsychometricFit("weibull", 3.0, 2.5)
assert abs(f.eval(f.threshold(0.8)) - 0.8) < 1e-12
p = trimodal.predict(100.0, model="m1")
assert abs(p["audio_pct"] - 36.72) < 1e-9
s = trimodal.Session("a", "p", seed=1, deterministic_clock=True)
state, outcome = s.set_level("audio", 3)
assert outcome in ("applied", "compensated") and state["audio_idx"] == 3, (state, outcome)
try:
    s.set_level("visual", 200)
    raise SystemExit(1)
except trimodal.TrimodalError:
    pass
s.commit()
assert s.position == 1 and len(s.records()) == 1
try:
    trimodal.visual_cost(0)
    raise SystemExit(1)
except trimodal.TrimodalError:
    pass
"#
    ));
}
