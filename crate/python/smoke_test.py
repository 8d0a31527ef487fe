"""Smoke test for the smpc_py extension.

Build and install first:
    maturin build --release -m crates/python/Cargo.toml
    pip install target/wheels/smpc_py-*.whl
"""

import math

import smpc_py


def main():
    assert abs(smpc_py.chi2_quantile(1, 0.8) - 1.6423744151) < 1e-8

    hw = smpc_py.stationary_half_width(
        a=[[1.0, 1.0], [0.0, 1.0]],
        b=[[0.5], [1.0]],
        k=[[-0.2, -0.6]],
        sigma_w=[[0.25, 0.5], [0.5, 1.0]],
        p=0.8,
        direction=[0.0, 1.0],
        dim=1,
    )
    assert abs(hw - 1.53) < 0.005, hw

    sol = smpc_py.solve_qp(
        h=[[2.0, 0.0], [0.0, 2.0]],
        g=[-2.0, -4.0],
        a_in=[[1.0, 1.0]],
        b_in=[1.0],
    )
    assert sol["status"] == "optimal", sol
    assert max(abs(v - t) for v, t in zip(sol["y"], [0.0, 1.0])) < 1e-8

    checks = smpc_py.validate("double_integrator")
    assert all(c["passed"] for c in checks), checks

    doc = smpc_py.run("double_integrator", variants=["rec", "nom"], trials=20, seed=3, horizon=10)
    assert [v["variant"] for v in doc["variants"]] == ["rec", "nom"]
    assert all(math.isfinite(v["j_cl_x0"]) for v in doc["variants"])

    trial = smpc_py.simulate_trial("double_integrator", "rec", seed=1)
    assert len(trial["x"]) == 101 and len(trial["x"][0]) == 2
    assert set(trial["outcome"]) <= {"optimal", "reset", "fallback"}

    try:
        smpc_py.run("moon_lander")
    except ValueError as e:
        assert "scenario" in str(e)
    else:
        raise AssertionError("unknown scenario accepted")

    print("smoke test passed")


if __name__ == "__main__":
    main()
