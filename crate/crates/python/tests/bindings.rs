use pyo3::prelude::*;

use voltreg_python::voltreg_module;

fn run(code: &std::ffi::CStr) -> PyResult<()> {
    Python::attach(|py| py.run(code, None, None))
}

#[test]
fn module_round_trip() {
    pyo3::append_to_inittab!(voltreg_module);
    Python::initialize();

    run(c"
import voltreg
f = voltreg.Feeder.generate('tree,N=6', seed=2)
assert f.bus_count == 6
g = voltreg.Feeder.parse(f.emit())
assert g.lines == f.lines
a, ai = f.a(), f.a_inv()
for i in range(6):
    for j in range(6):
        s = sum(a[i][k] * ai[k][j] for k in range(6))
        assert abs(s - (i == j)) < 1e-9
t = voltreg.simulate(f, theorem1_steps=True, rounds=200)
assert len(t) == 201
assert t.bits()[-1] == 200 * 12
fes, merit = t.fes(), t.merit()
assert all(x <= y for x, y in zip(fes, merit))
violated, report = t.certify(0.1)
assert not violated, report
s = t.summary(0.1)
assert s.rounds == 200 and 'final fes' in str(s)
assert t.to_csv().startswith('t,bus,v,')
").unwrap();

    run(c"
import voltreg
f = voltreg.Feeder.generate('paper', seed=0)
t = voltreg.simulate(f, controller='vclbp', alpha=0.2, beta=1e-5, plant='distflow',
                     dynamic=(2, 50, 0.75, 1.25), seed=3)
assert len(t) == 101
assert t.summary().max_q_phy_violation == 0.0
assert voltreg.projection_identities(1.0, -2.0, 0.5, 0.5, 1.0) == (True, True, True)
").unwrap();

    let err = run(c"
import voltreg
voltreg.Feeder.parse('buses=1 v0=1\\nedge 0 1 r=0.1 x=-0.2\\n')
");
    let msg = err.unwrap_err().to_string();
    assert!(msg.contains("ValueError") && msg.contains("line 2"), "{msg}");
}
