import json

import numpy as np
import pytest

from fedtraffic.aggregation import AggregatorConfig, layout_for_arch
from fedtraffic.data import generate_synthetic
from fedtraffic.errors import ConfigError, TrainingDiverged
from fedtraffic.fedsim import (
    FedConfig,
    build_splits,
    config_hash,
    evaluate_checkpoints,
    run,
    run_centralized,
)
from fedtraffic.graph import make_graph, ring_graph
from fedtraffic.model import AdamState, GruArch, init_params, load_checkpoint, params_equal, train_epochs

ARCH = GruArch(input_dim=1, hidden_dim=4, num_layers=2, horizon_in=4, horizon_out=4)


def tiny_config(**kw):
    defaults = dict(
        arch=ARCH, rounds=2, local_epochs=1, batch_size=64, lr=1e-3,
        aggregator=AggregatorConfig(kind="fedavg"), seed=0, mode="federated",
        worker_count=1, splits=(0.6, 0.2, 0.2),
    )
    defaults.update(kw)
    return FedConfig(**defaults)


def tiny_world(n_nodes=3, n_steps=150, seed=0, missing=0.0):
    g = ring_graph(max(n_nodes, 2)) if n_nodes > 1 else make_graph(1, [])
    if n_nodes == 1:
        g = make_graph(1, [])
        rng = np.random.default_rng(seed)
        from fedtraffic.data import TrafficDataset

        values = 55 + 8 * np.sin(np.arange(n_steps) / 10)[None, :] + rng.standard_normal((1, n_steps))
        return g, TrafficDataset(values=values, mask=np.ones((1, n_steps), dtype=bool))
    ds = generate_synthetic(n_nodes, n_steps, g, seed=seed, missing_rate=missing)
    return g, ds


def final_models(checkpoint_dir, n_nodes):
    return [load_checkpoint(checkpoint_dir / f"client_{i:04d}.npz")[0] for i in range(n_nodes)]


class TestLocalMode:
    def test_local_equals_manual_train_epochs_bitwise(self, tmp_path):
        g, ds = tiny_world()
        config = tiny_config(mode="local", rounds=2, local_epochs=1)
        run(config, g, ds, checkpoint_dir=tmp_path)
        got = final_models(tmp_path, 3)

        g2, ds2 = tiny_world()
        splits = build_splits(config, ds2)
        base = init_params(config.arch, config.seed)
        for node in range(3):
            model = base.copy()
            opt = AdamState.init(model, lr=config.lr)
            rng = np.random.default_rng([config.seed, node])
            # R rounds of E epochs through one continued stream == R*E epochs
            model, opt, _ = train_epochs(
                model, opt, splits["train"].for_node(node),
                epochs=config.rounds * config.local_epochs,
                batch_size=config.batch_size, seed=rng,
            )
            assert params_equal(model, got[node])

    def test_graph_hops_zero_is_bitwise_local(self, tmp_path):
        g, ds = tiny_world()
        cfg_local = tiny_config(mode="local")
        run(cfg_local, g, ds, checkpoint_dir=tmp_path / "local")
        for kind in ("graphfedavg", "mpfedavg"):
            g2, ds2 = tiny_world()
            cfg = tiny_config(aggregator=AggregatorConfig(kind=kind, hops=0, alpha=0.8))
            run(cfg, g2, ds2, checkpoint_dir=tmp_path / kind)
            for a, b in zip(final_models(tmp_path / "local", 3), final_models(tmp_path / kind, 3)):
                assert params_equal(a, b)


class TestFederated:
    def test_complete_graph_graphfedavg_matches_fedavg_bitwise(self, tmp_path):
        edges = [(i, j, 1.0) for i in range(3) for j in range(3) if i != j]
        g = make_graph(3, edges, symmetrize=True)
        _, ds = tiny_world()
        run(tiny_config(aggregator=AggregatorConfig(kind="fedavg")), g, ds,
            checkpoint_dir=tmp_path / "fa", log_path=tmp_path / "fa.jsonl")
        _, ds2 = tiny_world()
        run(tiny_config(aggregator=AggregatorConfig(kind="graphfedavg", hops=1)), g, ds2,
            checkpoint_dir=tmp_path / "gfa", log_path=tmp_path / "gfa.jsonl")
        for a, b in zip(final_models(tmp_path / "fa", 3), final_models(tmp_path / "gfa", 3)):
            assert params_equal(a, b)
        # logs agree on everything except the aggregator name and timing
        for la, lb in zip((tmp_path / "fa.jsonl").read_text().splitlines(),
                          (tmp_path / "gfa.jsonl").read_text().splitlines()):
            ra, rb = json.loads(la), json.loads(lb)
            for rec in (ra, rb):
                rec.pop("seconds"), rec.pop("aggregator"), rec.pop("config_hash")
            assert ra == rb

    def test_fedavg_broadcasts_identical_models(self, tmp_path):
        g, ds = tiny_world()
        run(tiny_config(), g, ds, checkpoint_dir=tmp_path)
        models = final_models(tmp_path, 3)
        assert params_equal(models[0], models[1])
        assert params_equal(models[0], models[2])

    def test_graph_aware_personalizes(self, tmp_path):
        g, ds = tiny_world(n_nodes=4)
        run(tiny_config(aggregator=AggregatorConfig(kind="graphfedavg", hops=1)),
            g, ds, checkpoint_dir=tmp_path)
        models = final_models(tmp_path, 4)
        assert not params_equal(models[0], models[1])

    def test_fedavg_preserves_column_mean_each_round(self, tmp_path):
        g, ds = tiny_world()
        run(tiny_config(rounds=2), g, ds, param_dump_dir=tmp_path)
        for round_idx in (1, 2):
            pre = np.loadtxt(tmp_path / f"round_{round_idx:03d}_collected.csv",
                             delimiter=",", skiprows=1)
            post = np.loadtxt(tmp_path / f"round_{round_idx:03d}_aggregated.csv",
                              delimiter=",", skiprows=1)
            p = layout_for_arch(ARCH).total_len
            pre_mat = pre[:, 2].reshape(3, p)
            post_mat = post[:, 2].reshape(3, p)
            np.testing.assert_allclose(pre_mat.mean(axis=0), post_mat.mean(axis=0),
                                       atol=1e-10, rtol=0)

    def test_worker_counts_agree(self, tmp_path):
        results = {}
        for workers in (1, 4):
            g, ds = tiny_world(n_nodes=4)
            cfg = tiny_config(worker_count=workers,
                              aggregator=AggregatorConfig(kind="graphfedavg", hops=1))
            reports = run(cfg, g, ds)
            results[workers] = [r.metrics["test"].rmse for r in reports]
        assert abs(results[1][-1] - results[4][-1]) < 1e-9
        assert results[1] == results[4]  # in practice bitwise

    def test_one_report_per_round_plus_final_record(self, tmp_path):
        g, ds = tiny_world()
        log = tmp_path / "results.jsonl"
        reports = run(tiny_config(rounds=3), g, ds, log_path=log)
        assert [r.round for r in reports] == [1, 2, 3]
        records = [json.loads(line) for line in log.read_text().splitlines()]
        assert [r["record"] for r in records] == ["round", "round", "round", "final"]
        assert records[-1]["round"] == 3
        assert records[-1]["test"] == records[-2]["test"]

    def test_replay_same_final_metrics(self):
        outs = []
        for _ in range(2):
            g, ds = tiny_world()
            outs.append(run(tiny_config(), g, ds)[-1].metrics["test"].rmse)
        assert outs[0] == outs[1]

    def test_mode_and_graph_validation(self):
        g, ds = tiny_world()
        with pytest.raises(ConfigError):
            run(tiny_config(mode="centralized"), g, ds)
        with pytest.raises(ConfigError):
            run(tiny_config(aggregator=AggregatorConfig(kind="graphfedavg")), None, ds)
        g5 = ring_graph(5)
        with pytest.raises(ConfigError):
            run(tiny_config(), g5, ds)

    def test_divergence_aborts_with_client_context(self):
        g, ds = tiny_world()
        with pytest.raises(TrainingDiverged, match="client"):
            run(tiny_config(lr=1e200, rounds=1, local_epochs=2), g, ds)


class TestCentralized:
    def test_single_node_matches_local_bitwise(self, tmp_path):
        g, ds = tiny_world(n_nodes=1)
        cfg = tiny_config(mode="centralized")
        run_centralized(cfg, ds, checkpoint_dir=tmp_path / "central")
        central, _ = load_checkpoint(tmp_path / "central" / "model.npz")

        g2, ds2 = tiny_world(n_nodes=1)
        cfg_local = tiny_config(mode="local")
        run(cfg_local, None, ds2, checkpoint_dir=tmp_path / "local")
        local, _ = load_checkpoint(tmp_path / "local" / "client_0000.npz")
        assert params_equal(central, local)

    def test_deterministic(self):
        outs = []
        for _ in range(2):
            _, ds = tiny_world(n_nodes=3)
            outs.append(run_centralized(tiny_config(mode="centralized"), ds)[-1].metrics["test"].rmse)
        assert outs[0] == outs[1]


class TestEvaluateCheckpoints:
    def test_matches_logged_final_metrics(self, tmp_path):
        g, ds = tiny_world()
        cfg = tiny_config()
        reports = run(cfg, g, ds, checkpoint_dir=tmp_path)
        g2, ds2 = tiny_world()
        report, per_step = evaluate_checkpoints(cfg, ds2, tmp_path, split_name="test")
        assert abs(report.rmse - reports[-1].metrics["test"].rmse) < 1e-9
        assert abs(report.mae - reports[-1].metrics["test"].mae) < 1e-9
        assert len(per_step) == ARCH.horizon_out

    def test_arch_mismatch_rejected(self, tmp_path):
        from fedtraffic.errors import LayoutError

        g, ds = tiny_world()
        cfg = tiny_config()
        run(cfg, g, ds, checkpoint_dir=tmp_path)
        other = tiny_config(arch=GruArch(1, 5, 2, 4, 4))
        g2, ds2 = tiny_world()
        with pytest.raises(LayoutError):
            evaluate_checkpoints(other, ds2, tmp_path)


def test_config_hash_stable_and_sensitive():
    a = tiny_config()
    b = tiny_config()
    c = tiny_config(seed=1)
    assert config_hash(a) == config_hash(b)
    assert config_hash(a) != config_hash(c)


def test_config_validation():
    with pytest.raises(ConfigError):
        tiny_config(rounds=0)
    with pytest.raises(ConfigError):
        tiny_config(local_epochs=-1)
    with pytest.raises(ConfigError):
        tiny_config(mode="gossip")
    with pytest.raises(ConfigError):
        tiny_config(precision="float16")
