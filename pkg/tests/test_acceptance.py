"""Acceptance gate: every release-blocking criterion, one test each.

The desk-scale benchmark (criterion 7) dominates the runtime; its twenty
training runs are computed once in a session fixture and shared by the
assertions. A summary line per criterion is printed at the end of the
pytest run (see conftest.py).
"""

import json
import math
import os
import time

import numpy as np
import pytest

from conftest import record_criterion
from fedtraffic.aggregation import (
    AggregatorConfig,
    ParamMatrix,
    fedavg,
    graph_fedavg,
    layout_for_arch,
    mp_fedavg,
)
from fedtraffic.cli import main as cli_main
from fedtraffic.data import generate_synthetic
from fedtraffic.fedsim import FedConfig, run
from fedtraffic.graph import (
    ROW_NORMALIZED,
    SYM_NORMALIZED,
    build_operator,
    is_connected,
    make_graph,
    ring_graph,
)
from fedtraffic.model import (
    AdamState,
    GruArch,
    backward,
    forward_batch,
    init_params,
    masked_mse_batch,
    train_epochs,
)

SCALAR_LAYOUT = layout_for_arch(GruArch(1, 1, 1, 1, 1))

# desk-scale benchmark shape (criterion 7); model size and batch are free
# parameters at desk scale and are pinned here
BENCH_NODES = 20
BENCH_STEPS = 4000
BENCH_MISSING = 0.05
BENCH_ROUNDS = 5
BENCH_EPOCHS = 3
BENCH_SEEDS = (0, 1, 2, 3, 4)
BENCH_HIDDEN = 16
BENCH_BATCH = 128
BENCH_WORKERS = 2


def random_weighted_graph(rng, max_nodes=12):
    n = int(rng.integers(2, max_nodes + 1))
    edges = []
    for i in range(n):
        for j in range(i + 1, n):
            if rng.random() < 0.5:
                w = float(rng.uniform(0.1, 2.0))
                edges.append((i, j, w))
                edges.append((j, i, w))
    return make_graph(n, edges, symmetrize=True)


def brute_force_rows(g, values, kind, hops, alpha=None):
    """Per-client double-loop evaluation of the aggregation formulas."""
    n = g.n_nodes
    a = [[0.0] * n for _ in range(n)]
    for s, d, w in g.edges:
        a[s][d] = w
    for i in range(n):
        a[i][i] += 1.0
    deg = [sum(row) for row in a]
    cur = [list(r) for r in values]
    p = len(cur[0])
    for _ in range(hops):
        nxt = []
        for i in range(n):
            row = []
            for k in range(p):
                if kind == "row":
                    acc = sum(a[i][j] / deg[i] * cur[j][k] for j in range(n))
                else:
                    acc = alpha * sum(
                        a[i][j] / (math.sqrt(deg[i]) * math.sqrt(deg[j])) * cur[j][k]
                        for j in range(n)
                    ) + (1.0 - alpha) * cur[i][k]
                row.append(acc)
            nxt.append(row)
        cur = nxt
    return np.array(cur)


def test_criterion_operator_oracle_suite():
    """graph_fedavg and mp_fedavg match the brute-force per-client formulas."""
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(200):
        g = random_weighted_graph(rng)
        p = int(rng.integers(1, 8))
        values = rng.standard_normal((g.n_nodes, p))
        hops = int(rng.integers(0, 4))
        alpha = float(rng.uniform(0.0, 1.0))
        x = ParamMatrix(values=values, layout=SCALAR_LAYOUT)
        got = graph_fedavg(x, build_operator(g, ROW_NORMALIZED), hops).values
        want = brute_force_rows(g, values, "row", hops)
        worst = max(worst, np.abs(got - want).max())
        got = mp_fedavg(x, build_operator(g, SYM_NORMALIZED), alpha, hops).values
        want = brute_force_rows(g, values, "sym", hops, alpha)
        worst = max(worst, np.abs(got - want).max())
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-10 and elapsed < 10.0
    record_criterion("operator oracle suite (200 graphs)", ok,
                     f"max err {worst:.2e}, {elapsed:.1f}s")
    assert worst < 1e-10
    assert elapsed < 10.0


def test_criterion_analytic_fixtures():
    path = make_graph(3, [(0, 1, 1.0), (1, 2, 1.0)], symmetrize=True)
    x = ParamMatrix(values=np.array([[0.0], [3.0], [6.0]]), layout=SCALAR_LAYOUT)
    out = graph_fedavg(x, build_operator(path, ROW_NORMALIZED), 1)
    exact = np.array_equal(out.values, np.array([[1.5], [3.0], [4.5]]))

    rng = np.random.default_rng(7)
    xr = ParamMatrix(values=rng.standard_normal((3, 9)), layout=SCALAR_LAYOUT)
    mp_same = mp_fedavg(xr, build_operator(path, SYM_NORMALIZED), 0.0, 3)
    bitwise = mp_same.values.tobytes() == xr.values.tobytes()

    edges = [(i, j, 1.0) for i in range(3) for j in range(3) if i != j]
    complete = make_graph(3, edges, symmetrize=True)
    diff = np.abs(
        graph_fedavg(xr, build_operator(complete, ROW_NORMALIZED), 1).values
        - fedavg(xr).values
    ).max()

    ok = exact and bitwise and diff < 1e-12
    record_criterion("analytic fixtures", ok,
                     f"path exact={exact}, alpha0 bitwise={bitwise}, complete diff {diff:.1e}")
    assert exact
    assert bitwise
    assert diff < 1e-12


def test_criterion_consensus_convergence():
    rng = np.random.default_rng(99)
    worst = 0.0
    checked = 0
    while checked < 20:
        g = random_weighted_graph(rng)
        if not is_connected(g):
            continue
        checked += 1
        values = rng.standard_normal((g.n_nodes, 5))
        out = graph_fedavg(
            ParamMatrix(values=values, layout=SCALAR_LAYOUT),
            build_operator(g, ROW_NORMALIZED), 1000,
        ).values
        a = g.adjacency()
        np.fill_diagonal(a, a.diagonal() + 1.0)
        deg = a.sum(axis=1)
        target = (deg / deg.sum()) @ values
        worst = max(worst, np.abs(out - target[None, :]).max())
    ok = worst < 1e-6
    record_criterion("consensus convergence (20 graphs, L=1000)", ok, f"max dev {worst:.2e}")
    assert worst < 1e-6


def test_criterion_gradient_check():
    arch = GruArch(input_dim=1, hidden_dim=8, num_layers=2, horizon_in=4, horizon_out=4)
    t0 = time.perf_counter()
    eps = 1e-5
    worst = 0.0
    for seed in range(5):
        model = init_params(arch, seed)
        rng = np.random.default_rng(1000 + seed)
        x = rng.standard_normal((2, arch.horizon_in, 1))
        y = rng.standard_normal((2, arch.horizon_out, 1))
        mask = rng.random(y.shape) > 0.25
        y_hat, tape = forward_batch(model, x)
        _, d_y = masked_mse_batch(y_hat, y, mask)
        grads = backward(tape, d_y)
        for key, p in model.params.items():
            g = grads[key]
            it = np.nditer(p, flags=["multi_index"])
            for _ in it:
                idx = it.multi_index
                orig = p[idx]
                p[idx] = orig + eps
                l1, _ = masked_mse_batch(forward_batch(model, x)[0], y, mask)
                p[idx] = orig - eps
                l2, _ = masked_mse_batch(forward_batch(model, x)[0], y, mask)
                p[idx] = orig
                fd = (l1 - l2) / (2 * eps)
                rel = abs(fd - g[idx]) / max(abs(fd), abs(g[idx]), 1e-6)
                worst = max(worst, rel)
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-4 and elapsed < 60.0
    record_criterion("gradient check (5 seeds, all parameters)", ok,
                     f"worst rel err {worst:.2e}, {elapsed:.1f}s")
    assert worst < 1e-4
    assert elapsed < 60.0


def test_criterion_overfit_sanity():
    t = np.arange(200)
    series = np.sin(2 * np.pi * t / 48.0)
    starts = [0, 29, 61, 97]

    class Split:
        inputs = np.stack([series[s : s + 12] for s in starts])[:, :, None]
        targets = np.stack([series[s + 12 : s + 24] for s in starts])[:, :, None]
        target_mask = np.ones_like(targets, dtype=bool)

    arch = GruArch(input_dim=1, hidden_dim=16, num_layers=2, horizon_in=12, horizon_out=12)
    model = init_params(arch, seed=0)
    state = AdamState.init(model)
    _, _, losses = train_epochs(model, state, Split(), 500, 4, seed=0)
    ok = losses[-1] < 1e-3
    record_criterion("overfit sanity (4 sequences, 500 epochs)", ok,
                     f"final MSE {losses[-1]:.2e}")
    assert losses[-1] < 1e-3


def _write_desk_config(tmp_path, data_dir, out_dir, workers=1):
    cfg = {
        "schema_version": 1,
        "mode": "federated",
        "dataset": str(data_dir / "series.csv"),
        "graph": str(data_dir / "graph.csv"),
        "arch": {"input_dim": 1, "hidden_dim": 4, "num_layers": 2,
                 "horizon_in": 4, "horizon_out": 4},
        "rounds": 2,
        "local_epochs": 1,
        "batch_size": 64,
        "aggregator": {"kind": "graphfedavg", "hops": 1},
        "seed": 0,
        "workers": workers,
        "splits": [0.6, 0.2, 0.2],
        "output_dir": str(out_dir),
    }
    path = tmp_path / f"cfg_w{workers}_{out_dir.name}.json"
    path.write_text(json.dumps(cfg))
    return path


def test_criterion_determinism(tmp_path):
    data_dir = tmp_path / "data"
    assert cli_main(["generate", "--out", str(data_dir), "--nodes", "4",
                     "--steps", "200", "--graph", "ring", "--seed", "0"]) == 0

    logs = []
    for name in ("one", "two"):
        out_dir = tmp_path / name
        cfg = _write_desk_config(tmp_path, data_dir, out_dir)
        assert cli_main(["train", str(cfg), "--no-figures"]) == 0
        records = [json.loads(l) for l in (out_dir / "results.jsonl").read_text().splitlines()]
        for rec in records:
            rec.pop("seconds")  # wall time is the one nondeterministic field
        logs.append(records)
    identical = logs[0] == logs[1]

    finals = {}
    for workers in (1, 4):
        out_dir = tmp_path / f"w{workers}"
        cfg = _write_desk_config(tmp_path, data_dir, out_dir, workers=workers)
        assert cli_main(["train", str(cfg), "--no-figures"]) == 0
        final = json.loads((out_dir / "results.jsonl").read_text().splitlines()[-1])
        finals[workers] = final["test"]["rmse"]
    worker_gap = abs(finals[1] - finals[4])

    ok = identical and worker_gap < 1e-9
    record_criterion("determinism (log replay + worker counts)", ok,
                     f"logs identical={identical}, worker gap {worker_gap:.1e}")
    assert identical
    assert worker_gap < 1e-9


@pytest.fixture(scope="session")
def desk_benchmark():
    """Twenty desk-scale runs: 4 strategies x 5 seeds."""
    arch = GruArch(input_dim=1, hidden_dim=BENCH_HIDDEN, num_layers=2,
                   horizon_in=12, horizon_out=12)
    strategies = {
        "local": ("local", AggregatorConfig(kind="fedavg")),
        "fedavg": ("federated", AggregatorConfig(kind="fedavg")),
        "graphfedavg": ("federated", AggregatorConfig(kind="graphfedavg", hops=1)),
        "mpfedavg": ("federated", AggregatorConfig(kind="mpfedavg", hops=1, alpha=0.8)),
    }
    graph = ring_graph(BENCH_NODES)
    results = {name: [] for name in strategies}
    t0 = time.perf_counter()
    for seed in BENCH_SEEDS:
        dataset_template = None
        for name, (mode, aggregator) in strategies.items():
            ds = generate_synthetic(BENCH_NODES, BENCH_STEPS, graph, seed=seed,
                                    missing_rate=BENCH_MISSING)
            config = FedConfig(
                arch=arch, rounds=BENCH_ROUNDS, local_epochs=BENCH_EPOCHS,
                batch_size=BENCH_BATCH, aggregator=aggregator, seed=seed,
                mode=mode, worker_count=BENCH_WORKERS,
            )
            reports = run(config, graph, ds)
            results[name].append(reports[-1].metrics["test"].rmse)
    elapsed = time.perf_counter() - t0
    return results, elapsed


def test_criterion_desk_scale_ordering(desk_benchmark):
    results, elapsed = desk_benchmark
    means = {name: float(np.mean(vals)) for name, vals in results.items()}
    graph_ok = means["graphfedavg"] < means["fedavg"]
    mp_ok = means["mpfedavg"] < means["fedavg"]
    time_ok = elapsed < 15 * 60
    gap = means["fedavg"] - means["local"]
    graph_vs_local = sum(
        g < l for g, l in zip(results["graphfedavg"], results["local"])
    )

    detail = (
        f"mean test RMSE: local={means['local']:.4f} fedavg={means['fedavg']:.4f} "
        f"graphfedavg={means['graphfedavg']:.4f} mpfedavg={means['mpfedavg']:.4f}; "
        f"fedavg-local gap {gap:+.4f} (reported, direction not asserted); "
        f"graphfedavg<local in {graph_vs_local}/5 seeds; {elapsed/60:.1f} min"
    )
    record_criterion("desk-scale aggregation ordering", graph_ok and mp_ok and time_ok, detail)
    assert graph_ok, detail
    assert mp_ok, detail
    assert time_ok, detail


def test_criterion_full_scale_optional():
    """Full METR-LA / PEMS-BAY reproduction; runs only when data is present."""
    metr = os.environ.get("FEDTRAFFIC_METRLA_DIR")
    pems = os.environ.get("FEDTRAFFIC_PEMSBAY_DIR")
    if not metr and not pems:
        record_criterion("full-scale reproduction (optional)", True,
                         "skipped: no converted dataset (set FEDTRAFFIC_METRLA_DIR / "
                         "FEDTRAFFIC_PEMSBAY_DIR)")
        pytest.skip("full-scale data not available; see README for the recipe")
    pytest.fail("full-scale runs are driven via the CLI; see README")
