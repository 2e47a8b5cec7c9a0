"""Smoke test for the monoguard_py extension module.

Build and install first:  pip install ./crates/python
"""

import monoguard_py as mg


def main():
    data = mg.Dataset.synthetic(n_features=300, n_samples=1500, mean_density=20, n_rules=8, malware_fraction=0.1, seed=3)
    train, test = data.split(0.2, 1)
    assert len(train) + len(test) == len(data)
    assert data.n_features == 300 and data.n_malware > 0

    base = mg.Model.train(train, hidden=[16, 16], epochs=20, batch_size=100, learning_rate=0.05, seed=1)
    metrics = base.evaluate(test)
    assert 0.0 <= metrics["accuracy"] <= 1.0
    attack = base.attack(test)
    assert attack["success"] <= attack["detected"]

    hard = mg.Model.train(
        train, hidden=[16, 16], head="sigmoid", epochs=20, batch_size=100, learning_rate=1e-3,
        optimizer="adam", hard_scope="all_weights", init="abs_glorot_normal", seed=1,
    )
    assert hard.negative_mass() == 0.0
    assert hard.attack(test)["mr"] == 0.0
    cert = hard.certify(test, trials=500)
    assert cert["structural"] and cert["behavioral"], cert

    clamped = base.project_nonnegative()
    assert clamped.negative_mass() == 0.0

    x, _ = test.sample(0)
    assert mg.fallback(hard, base, x) in ("benign", "malware")
    assert 0.0 <= base.p_malware(x) <= 1.0

    assert mg.n1(-2.0) == 2.0 and mg.n1(3.0) == 0.0
    assert mg.n2(-2.0) == 4.0

    rate = mg.transfer(base, hard, test)
    assert 0.0 <= rate <= 1.0
    print(f"ok: base mr {attack['mr']:.3f}, hard mr 0, transfer {rate:.3f}")


if __name__ == "__main__":
    main()
