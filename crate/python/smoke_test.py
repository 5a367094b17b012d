"""Smoke test for the demandkit Python bindings.

Build and install the extension first:

    pip install maturin
    maturin develop -m crates/python/Cargo.toml

then run `python python/smoke_test.py`.
"""

import math
import os
import tempfile

import demandkit_py as dk

TINY = """
seed = 5

[simulation]
count = 200
zero_shot_fraction = 0.05

[stage1]
hidden = 16
embedding_dim = 8
epochs = 2

[stage1.optimizer]
warmup_steps = 5

[stage2]
kappa = 2
n_max = 20
epochs = 2

[stage2.quadrature]
points = 128

[stage2.optimizer]
warmup_steps = 5

[sweep]
sample_size = 5
"""


def check_primitives():
    g = dk.ValuationParams(0.0, 1.0)
    assert abs(g.cdf(0.0) - 0.5) < 1e-12
    assert abs(g.quantile(0.975) - 1.959963984540054) < 1e-8
    p = dk.ValuationParams(9.0, 0.4, [0.2, 0.1])
    assert p.normalizing_constant > 0.0
    draws = p.sample(1000, seed=3)
    assert draws == p.sample(1000, seed=3)

    model = dk.StructuralModel(n_min=1, n_max=40, j_max=5)
    advisory, bids = model.predict(p, [0.0] * 40)
    assert len(bids) == 4
    assert all(a > b for a, b in zip(bids, bids[1:]))
    assert advisory > bids[0]

    m = dk.compute_metrics([math.log(110), math.log(180), math.log(400)],
                           [math.log(100), math.log(200), math.log(400)])
    assert abs(m["mdape"] - 10.0) < 1e-9
    assert abs(m["mape"] - 20.0 / 3.0) < 1e-9


def check_pipeline():
    with tempfile.TemporaryDirectory() as d:
        cfg = dk.RunConfig(TINY, out=d)
        assert len(cfg.hash()) == 64
        dk.simulate(cfg)
        dk.train(cfg, "stage1")
        dk.train(cfg, "stage2")
        written = dk.evaluate(cfg)
        assert any(w.endswith("metrics.csv") for w in written)
        with open(os.path.join(d, "metrics.csv")) as f:
            header = f.readline().strip()
        assert header == "model,rank,n,rmse_log,r2,mape,mdape,hit,bias"
        emb = dk.load_embeddings(os.path.join(d, "models", "stage1_embeddings.dev"))
        assert all(len(v) == 8 for v in emb.values())
        dk.sweep(cfg, oracle=True)

        try:
            dk.RunConfig("[stage1]\nepocs = 3\n")
        except dk.ConfigError:
            pass
        else:
            raise AssertionError("unknown key accepted")

        empty = dk.RunConfig(TINY, out=os.path.join(d, "empty"))
        try:
            dk.evaluate(empty)
        except dk.DataError:
            pass
        else:
            raise AssertionError("missing dataset accepted")


if __name__ == "__main__":
    check_primitives()
    check_pipeline()
    print(f"demandkit {dk.__version__}: python smoke test passed")
