import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import reference as ref
from srnn import diffcore as dc
from srnn.config import PRESETS, RunConfig, build_config
from srnn.datapipe import pad_batch
from srnn.diffcore import Tensor, grad_check
from srnn.generative import GenerativeParams, ModelDims
from srnn.inference import InferenceParams, draw_noise
from srnn.neural import GaussianDiag
from srnn.objective import (AnnealSchedule, anneal_beta, build_model, diagnose, elbo_sequence, evaluate,
                            kl_diag_gaussian, load_model, train)


def gauss(mean, logvar):
    return GaussianDiag(Tensor(np.asarray(mean, float)), Tensor(np.asarray(logvar, float)))


def tiny(kind="bernoulli", mode="smooth", resq=True, seed=0, x_dim=4):
    dims = ModelDims(x_dim=x_dim, z_dim=2, d_dim=3, a_dim=3, prior_hidden=(4,), emission_hidden=(4,),
                     q_hidden=(4,), emission=kind, mode=mode, resq=resq)
    return GenerativeParams(dims, np.random.default_rng([seed, 0])), InferenceParams(dims, np.random.default_rng([seed, 1]))


def seqs(kind, n, lengths, x_dim=4, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        T = lengths[i % len(lengths)]
        out.append((rng.random((T, x_dim)) < 0.3).astype(float) if kind == "bernoulli"
                   else rng.standard_normal((T, x_dim)))
    return out


class TestKl:
    def test_identical_is_zero(self):
        g = gauss([[0.3, -1.0]], [[0.2, -0.7]])
        assert kl_diag_gaussian(g, g).data[0] == 0.0

    def test_unit_shift(self):
        assert kl_diag_gaussian(gauss([[1.0]], [[0.0]]), gauss([[0.0]], [[0.0]])).data[0] == 0.5

    def test_shape_and_variance_errors(self):
        with pytest.raises(dc.ShapeError):
            kl_diag_gaussian(gauss([[0.0]], [[0.0]]), gauss([[0.0, 0.0]], [[0.0, 0.0]]))
        with pytest.raises(ValueError):
            kl_diag_gaussian(gauss([[0.0]], [[-800.0]]), gauss([[0.0]], [[0.0]]))

    def test_monte_carlo(self):
        rng = np.random.default_rng(0)
        mq, mp = rng.standard_normal(3), rng.standard_normal(3)
        lq, lp = rng.uniform(-1, 1, 3), rng.uniform(-1, 1, 3)
        z = mq + np.exp(0.5 * lq) * rng.standard_normal((200_000, 3))
        logr = (-0.5 * (lq + (z - mq) ** 2 / np.exp(lq))).sum(1) - (-0.5 * (lp + (z - mp) ** 2 / np.exp(lp))).sum(1)
        exact = kl_diag_gaussian(gauss(mq[None], lq[None]), gauss(mp[None], lp[None])).data[0]
        assert abs(logr.mean() - exact) <= 3 * logr.std(ddof=1) / math.sqrt(len(logr))

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(-5, 5), min_size=4, max_size=4))
    def test_non_negative(self, v):
        assert kl_diag_gaussian(gauss([v[:2]], [v[2:]]), gauss([[0.1, -0.2]], [[0.3, 0.0]])).data[0] >= -1e-12

    def test_gradient(self):
        f = lambda a, b, c, d: dc.sum(kl_diag_gaussian(GaussianDiag(a, b), GaussianDiag(c, d)))
        rng = np.random.default_rng(1)
        assert grad_check(f, [rng.standard_normal((2, 3)) for _ in range(4)]) <= 1e-5


class TestAnneal:
    def test_examples(self):
        assert anneal_beta(AnnealSchedule(), 0) == 0.2
        assert anneal_beta(AnnealSchedule(0.2, 0.0003), 1000) == pytest.approx(0.5, abs=1e-15)
        assert anneal_beta(AnnealSchedule(0.2, 0.0001), 8000) == 1.0

    def test_negative_index(self):
        with pytest.raises(ValueError):
            anneal_beta(AnnealSchedule(), -1)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(0, 1), st.floats(0, 0.01), st.integers(0, 100_000))
    def test_monotone_and_capped(self, start, inc, idx):
        s = AnnealSchedule(start, inc)
        assert anneal_beta(s, idx) <= anneal_beta(s, idx + 1) <= 1.0

    def test_preset_increments(self):
        assert PRESETS["blizzard"]["beta_increment"] == 0.0001
        assert PRESETS["timit"]["beta_increment"] == 0.0003


class TestElbo:
    def test_zero_model_single_step(self):
        gen, inf = tiny(x_dim=88)
        for store in (gen.params, inf.params):
            store.load_arrays({k: np.zeros_like(v) for k, v in store.arrays().items()})
        x = (np.random.default_rng(0).random((1, 88)) < 0.2).astype(float)
        br = elbo_sequence(gen, inf, pad_batch([x]))
        assert br.recon[0, 0] == pytest.approx(-88 * math.log(2), rel=1e-14)
        assert br.kl[0, 0] == 0.0
        assert br.total == pytest.approx(-60.997, abs=1e-3)

    @pytest.mark.parametrize("kind,mode,resq", [("bernoulli", "smooth", True), ("gaussian", "smooth", False),
                                                ("gaussian", "filt", True), ("bernoulli", "filt", False)])
    def test_matches_reference(self, kind, mode, resq):
        gen, inf = tiny(kind, mode, resq, seed=3)
        data = seqs(kind, 3, [5, 2, 4], seed=4)
        batch = pad_batch(data)
        noise = draw_noise(9, batch.ids, batch.T, 2)
        br = elbo_sequence(gen, inf, batch, noise=noise)
        for i, x in enumerate(data):
            total, recon, kl = ref.elbo(gen.params.arrays(), inf.params.arrays(), gen.dims, x, noise[i])
            assert br.elbo_per_sequence[i] == pytest.approx(total, rel=1e-12)
            np.testing.assert_allclose(br.kl[i, :len(x)], kl, rtol=1e-11, atol=1e-14)

    def test_beta_zero_is_recon(self):
        gen, inf = tiny()
        br = elbo_sequence(gen, inf, pad_batch(seqs("bernoulli", 2, [4, 3])), beta=0.0)
        assert br.objective.item() == pytest.approx(br.recon.sum(), rel=1e-14)

    def test_objective_uses_beta(self):
        gen, inf = tiny()
        br = elbo_sequence(gen, inf, pad_batch(seqs("bernoulli", 2, [4, 3])), beta=0.3)
        assert br.objective.item() == pytest.approx(br.recon.sum() - 0.3 * br.kl.sum(), rel=1e-12)

    def test_padding_is_invisible(self):
        gen, inf = tiny("gaussian")
        data = seqs("gaussian", 3, [3, 6, 2])
        alone = [elbo_sequence(gen, inf, pad_batch([s], ids=[i]), seed=2).elbo_per_sequence[0]
                 for i, s in enumerate(data)]
        batch = pad_batch(data, T_max=9)
        batch.x[batch.mask == 0] = 1e6
        together = elbo_sequence(gen, inf, batch, seed=2)
        np.testing.assert_allclose(together.elbo_per_sequence, alone, rtol=0, atol=1e-12)
        assert np.all(together.recon[batch.mask == 0] == 0) and np.all(together.kl[batch.mask == 0] == 0)

    def test_kl_non_negative(self):
        gen, inf = tiny()
        assert np.all(elbo_sequence(gen, inf, pad_batch(seqs("bernoulli", 3, [5]))).kl >= 0)

    def test_chunks_share_d_path(self):
        gen, inf = tiny("gaussian")
        batch = pad_batch(seqs("gaussian", 2, [8]))
        whole = elbo_sequence(gen, inf, batch)
        first, second = batch.window(0, 4), batch.window(4, 8)
        a = elbo_sequence(gen, inf, first)
        b = elbo_sequence(gen, inf, second, z0=a.final_z, d0=a.final_d)
        np.testing.assert_allclose(b.final_d, whole.final_d, rtol=0, atol=1e-14)
        assert np.isfinite(a.total + b.total)

    def test_end_to_end_gradient(self):
        gen, inf = tiny("gaussian")
        batch = pad_batch(seqs("gaussian", 2, [4], x_dim=4, seed=5))
        noise = np.random.default_rng(6).standard_normal((2, 4, 2))
        gnames, inames = gen.params.names(), inf.params.names()
        n = len(gnames)

        def f(*ps):
            gen.params._entries.update(dict(zip(gnames, ps[:n])))
            inf.params._entries.update(dict(zip(inames, ps[n:])))
            return elbo_sequence(gen, inf, batch, noise=noise).objective

        # jitter: zero biases put first-step pre-activations exactly on the rectifier kink
        rng = np.random.default_rng(7)
        values = [p.data + 0.1 * rng.standard_normal(p.data.shape)
                  for p in [gen.params[k] for k in gnames] + [inf.params[k] for k in inames]]
        assert grad_check(f, values) <= 1e-4


def small_config(**kw):
    base = dict(z_dim=2, d_dim=4, a_dim=4, prior_hidden=(8,), emission_hidden=(8,), q_hidden=(8,),
                batch_size=4, epochs=2, seed=1)
    base.update(kw)
    return RunConfig(**base)


class TestTrain:
    def test_zero_learning_rate_leaves_params(self):
        cfg = small_config(learning_rate=0.0, max_updates=1)
        data = seqs("bernoulli", 4, [5, 3])
        gen, inf = build_model(cfg, 4)
        before = {**gen.params.arrays(), **{"i" + k: v for k, v in inf.params.arrays().items()}}
        res = train(cfg, data, gen=gen, inf=inf)
        after = {**gen.params.arrays(), **{"i" + k: v for k, v in inf.params.arrays().items()}}
        assert res.updates == 1
        for k in before:
            np.testing.assert_array_equal(before[k], after[k])

    def test_constant_dataset_recon_goes_to_zero(self):
        cfg = small_config(learning_rate=0.01, batch_size=8, epochs=200)
        data = [np.zeros((10, 4)) for _ in range(8)]
        res = train(cfg, data)
        assert res.rows[-1]["recon"] > -0.5

    def test_artifacts_and_reproducibility(self, tmp_path):
        cfg = small_config(epochs=3)
        tr, va = seqs("bernoulli", 6, [5, 4, 7]), seqs("bernoulli", 2, [3], seed=1)
        train(cfg, tr, va, out_dir=tmp_path / "a")
        train(cfg, tr, va, out_dir=tmp_path / "b")
        for name in ("best.ckpt", "last.ckpt", "metrics.csv", "config.txt"):
            assert (tmp_path / "a" / name).exists()

        def strip(p):
            lines = p.read_text().splitlines()
            return [l.rsplit(",", 1)[0] for l in lines]

        assert strip(tmp_path / "a" / "metrics.csv") == strip(tmp_path / "b" / "metrics.csv")
        lines = (tmp_path / "a" / "metrics.csv").read_text().splitlines()
        assert lines[0].startswith("# srnn-metrics v1")
        assert lines[1] == "kind,update,epoch,beta,train_elbo_per_step,recon,kl,wallclock_s"
        betas = [float(l.split(",")[3]) for l in lines[2:] if l.startswith("train")]
        assert betas == sorted(betas) and betas[0] == 0.2

    def test_checkpoint_roundtrip(self, tmp_path):
        cfg = small_config(epochs=1)
        tr = seqs("bernoulli", 4, [5])
        res = train(cfg, tr, tr, out_dir=tmp_path)
        gen, inf, loaded_cfg, meta = load_model(tmp_path / "best.ckpt")
        assert loaded_cfg == cfg
        a = evaluate(res.gen, res.inf, tr)
        b = evaluate(gen, inf, tr)
        assert a.per_step == b.per_step

    def test_bptt_chunks(self):
        cfg = small_config(bptt_chunk=3, max_updates=5)
        res = train(cfg, seqs("bernoulli", 4, [7]))
        assert res.updates == 5 and all(np.isfinite(r["train_elbo_per_step"]) for r in res.rows)

    def test_phi_only_training_freezes_theta(self):
        cfg = small_config(max_updates=3)
        gen, inf = build_model(cfg, 4)
        theta = gen.params.arrays()
        phi = inf.params.arrays()
        train(cfg, seqs("bernoulli", 4, [5]), gen=gen, inf=inf, train_generative=False)
        for k, v in gen.params.arrays().items():
            np.testing.assert_array_equal(v, theta[k])
        assert any(not np.array_equal(v, phi[k]) for k, v in inf.params.arrays().items())


class TestEvaluate:
    def test_batch_size_invariance(self):
        gen, inf = tiny()
        data = seqs("bernoulli", 7, [5, 9, 2])
        a, b = evaluate(gen, inf, data, batch_size=1), evaluate(gen, inf, data, batch_size=32)
        assert abs(a.per_step - b.per_step) <= 1e-10
        np.testing.assert_allclose(a.sequence_elbos, b.sequence_elbos, rtol=0, atol=1e-10)

    def test_discrete_elbo_non_positive(self):
        gen, inf = tiny()
        assert evaluate(gen, inf, seqs("bernoulli", 3, [4])).per_step <= 0

    def test_empty(self):
        gen, inf = tiny()
        with pytest.raises(ValueError):
            evaluate(gen, inf, [])

    def test_diagnose_rows(self):
        gen, inf = tiny()
        data = seqs("bernoulli", 3, [4, 6, 2])
        rows = diagnose(gen, inf, data)
        assert rows.shape == (6, 4)
        np.testing.assert_array_equal(rows[:, 0], np.arange(1, 7))
        np.testing.assert_array_equal(rows[:, 3], [3, 3, 2, 2, 1, 1])
        res = evaluate(gen, inf, data)
        total = float(np.sum((rows[:, 2] - rows[:, 1]) * rows[:, 3]))
        assert total == pytest.approx(res.per_step * res.n_steps, rel=1e-12)
