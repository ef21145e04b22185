import numpy as np
import pytest
import torch

from entd import models
from entd.kernels import chol_psd, gram
from entd.pg import make_sites
from entd.tensordata import EntryBatch, synth_binary, synth_count
from entd.trainer import (
    CheckpointError,
    TrainConfig,
    TrainingError,
    fit,
    init_state,
    load_checkpoint,
    save_checkpoint,
)
from entd.vgauss import NaturalGaussian, kl_to_prior, ng_step


def small_config(**kw):
    base = dict(
        model="ented", rank=2, inducing_u=8, inducing_v=6, batch_size=16,
        epochs=2, lr=1e-2, seed=0,
    )
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def binary_tensor():
    return synth_binary((5, 5, 5), 2, seed=3)[0]


@pytest.fixture(scope="module")
def count_tensor():
    return synth_count((5, 5, 5), 2, zeta=20.0, seed=3)[0]


class TestConfig:
    def test_rejects_bad_model(self):
        with pytest.raises(ValueError):
            TrainConfig(model="cp")

    def test_ented_needs_ortho_points(self):
        with pytest.raises(ValueError):
            TrainConfig(model="ented", inducing_v=0)

    def test_probit_needs_bernoulli(self):
        with pytest.raises(ValueError):
            TrainConfig(model="gptf-probit", likelihood="negbin")

    def test_ng_rate_range(self):
        with pytest.raises(ValueError):
            TrainConfig(ng_rate=0.0)


class TestInit:
    def test_prior_kl_zero(self, binary_tensor):
        _, state = init_state(small_config(), binary_tensor)
        fac = chol_psd(gram(state.kernel, state.inducing, state.inducing))
        assert abs(float(kl_to_prior(state.qu, fac))) < 1e-8

    def test_deterministic(self, binary_tensor):
        f1, s1 = init_state(small_config(), binary_tensor)
        f2, s2 = init_state(small_config(), binary_tensor)
        assert all(torch.equal(a, b) for a, b in zip(f1.factors, f2.factors))
        assert torch.equal(s1.inducing, s2.inducing)
        assert torch.equal(s1.qu.eta2, s2.qu.eta2)

    def test_too_many_inducing(self, binary_tensor):
        cfg = small_config(inducing_u=binary_tensor.nnz + 1)
        with pytest.raises(ValueError, match="exceeds"):
            init_state(cfg, binary_tensor)

    def test_kind_mismatch(self, count_tensor):
        with pytest.raises(ValueError, match="does not match"):
            init_state(small_config(likelihood="bernoulli"), count_tensor)

    def test_probit_state_type(self, binary_tensor):
        _, state = init_state(small_config(model="gptf-probit"), binary_tensor)
        assert isinstance(state, models.ProbitState)


class TestFit:
    def test_zero_epochs(self, binary_tensor):
        report = fit(small_config(epochs=0), binary_tensor)
        assert report.records == []
        _, fresh = init_state(small_config(epochs=0), binary_tensor)
        assert torch.equal(report.state.inducing, fresh.inducing)

    @pytest.mark.parametrize("model", ["gptf-probit", "gptf-pg", "ented"])
    def test_elbo_trace_deterministic(self, binary_tensor, model):
        cfg = small_config(model=model, epochs=2)
        a = [r.elbo for r in fit(cfg, binary_tensor).records]
        b = [r.elbo for r in fit(cfg, binary_tensor).records]
        assert a == b

    def test_count_fit_runs(self, count_tensor):
        cfg = small_config(likelihood="negbin", epochs=1)
        report = fit(cfg, count_tensor)
        assert len(report.records) == 1
        assert np.isfinite(report.records[0].elbo)

    def test_eta2_stays_nd_through_training(self, binary_tensor):
        cfg = small_config(epochs=2, ng_rate=1.0)
        report = fit(cfg, binary_tensor)
        for q in (report.state.qu, report.state.qv):
            evals = np.linalg.eigvalsh(q.eta2.numpy())
            assert (evals < 0).all()

    def test_eta2_nd_fuzzed_configs(self):
        # NaturalGaussian construction re-verifies negative definiteness on
        # every NG step, so surviving a fit is the property
        rng = np.random.default_rng(99)
        small_bin = synth_binary((4, 4, 4), 2, seed=1)[0]
        small_cnt = synth_count((4, 4, 4), 2, zeta=5.0, seed=1)[0]
        for trial in range(100):
            model = ["gptf-pg", "ented"][int(rng.integers(2))]
            kind = ["binary", "count"][int(rng.integers(2))]
            tensor = small_bin if kind == "binary" else small_cnt
            cfg = TrainConfig(
                model=model,
                likelihood="bernoulli" if kind == "binary" else "negbin",
                rank=int(rng.integers(1, 4)),
                inducing_u=int(rng.integers(2, 9)),
                inducing_v=int(rng.integers(1, 7)),
                batch_size=int(rng.integers(8, 65)),
                epochs=1,
                lr=float(10 ** rng.uniform(-4, -1)),
                ng_rate=float(rng.uniform(0.05, 1.0)),
                zeta=5.0,
                seed=int(rng.integers(1000)),
            )
            report = fit(cfg, tensor)
            qs = [report.state.qu]
            if model == "ented":
                qs.append(report.state.qv)
            for q in qs:
                assert (np.linalg.eigvalsh(q.eta2.numpy()) < 0).all()

    def test_nonfinite_guard(self, binary_tensor):
        # NaN factors blow up the objective on the first batch
        cfg = small_config(epochs=1)
        factors, state = init_state(cfg, binary_tensor)
        factors.factors[0][0, 0] = float("nan")
        batch = EntryBatch(binary_tensor.indices[:4], binary_tensor.values[:4], 1.0)
        sites = make_sites(batch.values, "binary", None, np.ones(4))
        val = models.solve_elbo(state, factors, batch, sites)
        assert not np.isfinite(float(val))

    def test_log_stream(self, binary_tensor, tmp_path):
        import json

        path = tmp_path / "log.jsonl"
        with open(path, "w") as fh:
            fit(small_config(epochs=2), binary_tensor, log_stream=fh)
        lines = [json.loads(l) for l in path.read_text().splitlines()]
        assert [l["epoch"] for l in lines] == [0, 1]
        assert all(set(l) == {"epoch", "elbo", "seconds"} for l in lines)

    def test_early_stop_breaks(self, binary_tensor):
        # full batch with frozen factors: coordinate ascent converges and the
        # flat ELBO trace triggers the stop well before the budget
        cfg = small_config(
            epochs=60, batch_size=200, lr=1e-30, ng_rate=1.0, early_stop=True
        )
        report = fit(cfg, binary_tensor)
        assert len(report.records) < 60


def sweep_elbo(state, factors, batch, kind, zeta, rho=1.0):
    """One full-batch coordinate sweep (c, q(u)[, q(v)]); returns new ELBO."""
    with torch.no_grad():
        inputs = models.assemble_inputs(factors, batch.indices)
        if isinstance(state, models.SolveState):
            geo = models.solve_geometry(state, inputs)
            c = models.solve_local_update(state, geo)
        else:
            geo = models.svgp_geometry(state, inputs)
            c = models.pg_local_update(state, geo)
        sites = make_sites(batch.values, kind, zeta, c.numpy())
        if isinstance(state, models.SolveState):
            t1, t2 = models.solve_ng_target_u(state, geo, batch, sites)
            state.qu = ng_step(state.qu, t1, t2, rho)
            t1, t2 = models.solve_ng_target_v(state, geo, batch, sites)
            state.qv = ng_step(state.qv, t1, t2, rho)
            return float(models.solve_elbo(state, factors, batch, sites))
        t1, t2 = models.pg_ng_targets(state, geo, batch, sites)
        state.qu = ng_step(state.qu, t1, t2, rho)
        return float(models.pg_elbo(state, factors, batch, sites))


class TestCoordinateAscent:
    @pytest.mark.parametrize("model", ["gptf-pg", "ented"])
    @pytest.mark.parametrize("kind", ["binary", "count"])
    def test_monotone_sweeps(self, model, kind, binary_tensor, count_tensor):
        tensor = binary_tensor if kind == "binary" else count_tensor
        cfg = small_config(
            model=model,
            likelihood="bernoulli" if kind == "binary" else "negbin",
            epochs=0,
        )
        factors, state = init_state(cfg, tensor)
        batch = EntryBatch(tensor.indices, tensor.values, 1.0)
        prev = -np.inf
        for _ in range(12):
            now = sweep_elbo(state, factors, batch, kind, cfg.zeta)
            assert now >= prev - 1e-8
            prev = now


class TestCheckpoint:
    def test_round_trip_bytes(self, binary_tensor, tmp_path):
        cfg = small_config(epochs=1)
        report = fit(cfg, binary_tensor)
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(report.state, report.factors, cfg, p1)
        state, factors, _ = load_checkpoint(p1)
        save_checkpoint(state, factors, cfg, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_manifest_lists_each_array_once(self, binary_tensor, tmp_path):
        cfg = small_config(epochs=0)
        report = fit(cfg, binary_tensor)
        path = tmp_path / "c.ckpt"
        save_checkpoint(report.state, report.factors, cfg, path)
        _, _, manifest = load_checkpoint(path)
        names = [a["name"] for a in manifest["arrays"]]
        assert len(names) == len(set(names))
        assert {"factor_0", "inducing", "qu_eta1", "qv_eta2"} <= set(names)

    def test_truncated_payload(self, binary_tensor, tmp_path):
        cfg = small_config(epochs=0)
        report = fit(cfg, binary_tensor)
        path = tmp_path / "d.ckpt"
        save_checkpoint(report.state, report.factors, cfg, path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-16])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(path)

    def test_version_mismatch(self, binary_tensor, tmp_path):
        import json
        import struct

        cfg = small_config(epochs=0)
        report = fit(cfg, binary_tensor)
        path = tmp_path / "e.ckpt"
        save_checkpoint(report.state, report.factors, cfg, path)
        raw = path.read_bytes()
        (hlen,) = struct.unpack("<Q", raw[:8])
        manifest = json.loads(raw[8 : 8 + hlen])
        manifest["version"] = 999
        blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
        path.write_bytes(struct.pack("<Q", len(blob)) + blob + raw[8 + hlen :])
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(path)

    @pytest.mark.parametrize("model", ["gptf-probit", "gptf-pg", "ented"])
    def test_state_round_trip_all_models(self, binary_tensor, tmp_path, model):
        cfg = small_config(model=model, epochs=1)
        report = fit(cfg, binary_tensor)
        path = tmp_path / "f.ckpt"
        save_checkpoint(report.state, report.factors, cfg, path)
        state, factors, _ = load_checkpoint(path)
        inputs = models.assemble_inputs(factors, binary_tensor.indices[:10])
        a = models.posterior_f(report.state, inputs)
        b = models.posterior_f(state, inputs)
        assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])


class TestDeterminism:
    def test_bit_identical_checkpoints(self, binary_tensor, tmp_path):
        cfg = small_config(epochs=2)
        p1, p2 = tmp_path / "r1.ckpt", tmp_path / "r2.ckpt"
        r1 = fit(cfg, binary_tensor)
        save_checkpoint(r1.state, r1.factors, cfg, p1)
        r2 = fit(cfg, binary_tensor)
        save_checkpoint(r2.state, r2.factors, cfg, p2)
        assert p1.read_bytes() == p2.read_bytes()


def _median_epoch_seconds(tensor, p, epochs=3):
    cfg = TrainConfig(
        model="gptf-pg", likelihood="bernoulli", rank=2, inducing_u=p,
        inducing_v=0, batch_size=128, epochs=epochs, lr=1e-3, seed=0,
    )
    report = fit(cfg, tensor)
    return float(np.median([r.seconds for r in report.records]))


class TestEpochCostScaling:
    def test_linear_in_n(self):
        # per-epoch cost ~ N at fixed p: log-log slope 1.0 +- 0.15
        sizes = {(10, 10, 10): None, (25, 20, 20): None, (50, 50, 40): None}
        times, ns = [], []
        for shape in sizes:
            tensor, _ = synth_binary(shape, 2, seed=0)
            ns.append(tensor.nnz)
            times.append(_median_epoch_seconds(tensor, p=64))
        slope = np.polyfit(np.log(ns), np.log(times), 1)[0]
        assert abs(slope - 1.0) < 0.15, (ns, times, slope)

    def test_quadratic_in_p(self):
        # difference two data sizes to cancel the per-epoch p^3 solves, leaving
        # the N p^2 interpolation work: log-log slope 2.0 +- 0.3
        small, _ = synth_binary((10, 10, 10), 2, seed=0)
        large, _ = synth_binary((20, 20, 20), 2, seed=0)
        ps = [64, 128, 256, 512]
        diffs = []
        for p in ps:
            t_small = _median_epoch_seconds(small, p)
            t_large = _median_epoch_seconds(large, p)
            diffs.append(t_large - t_small)
        slope = np.polyfit(np.log(ps), np.log(diffs), 1)[0]
        assert abs(slope - 2.0) < 0.3, (ps, diffs, slope)
