"""Smoke test for the `srsq` Python extension.

Build first:  maturin develop --release -m crates/py/Cargo.toml
Then run:     python python/smoke_test.py
"""

import os
import tempfile

import srsq


def main():
    perms = srsq.role_permutations()
    assert [p[1] for p in perms] == ["cab", "cba", "acb", "abc", "bca", "bac"], perms

    cuts, counts = srsq.quantile_bins([float(v) for v in range(1, 101)], 5)
    assert cuts == [21.0, 41.0, 61.0, 81.0] and counts == [20] * 5
    assert srsq.proportional_targets([50] * 5, 99) == [20, 20, 20, 20, 19]

    raw = srsq.generate_synthetic(
        {"n_schools": 2000, "seed": 7, "correlation": [[1, 0.5, 0], [0.5, 1, 0], [0, 0, 1]]}
    )
    assert len(raw) == 2000 and not raw.is_standardized
    pop = raw.standardize()
    z = pop.z("var_a")
    assert abs(sum(z) / len(z)) < 1e-9

    design = srsq.build_design(pop, 1)
    assert sum(design.stratum_targets) == 100 and sum(design.quota_caps) == 100
    assert design.is_feasible
    sid = pop.school_ids[0]
    assert design.agreement_probability(sid) in (0.5, 0.25)

    rep = design.run_replication(0, master_seed=1)
    assert rep == design.run_replication(0, master_seed=1)
    for method in ("srs", "srsq"):
        c = rep[method]["counts"]
        assert c["contacted"] == c["excluded_by_quota"] + c["invited"]
        assert c["invited"] == c["declined"] + c["agreed"]
    assert rep["srs"]["counts"]["excluded_by_quota"] == 0

    res = srsq.simulate_population(raw, replications=50, master_seed=3)
    avg = res["populations"][0]["averaged"]
    srs_bias = avg["srs"]["auxiliary"]["bias_abs"]
    srsq_bias = avg["srsq"]["auxiliary"]["bias_abs"]
    assert srsq_bias < srs_bias, (srs_bias, srsq_bias)

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "pop.csv")
        raw.write_csv(path)
        loaded = srsq.load_population(path)
        assert loaded.school_ids == raw.school_ids
        out = srsq.simulate(
            {"population": {"csv": path}, "replications": 5, "permutations": [2]},
            output_dir=os.path.join(tmp, "out"),
        )
        assert os.path.isfile(os.path.join(tmp, "out", "metrics.csv"))
        assert out["populations"][0]["cells"][0]["roles"] == "cba"

    try:
        srsq.build_design(pop, 7)
    except ValueError:
        pass
    else:
        raise AssertionError("permutation 7 accepted")

    print(f"smoke test ok: aux |bias| SRS {srs_bias:.4f} vs SRSQ {srsq_bias:.4f}")


if __name__ == "__main__":
    main()
