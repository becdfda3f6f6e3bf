"""Training loop tests: forward recomposition, variants, optimizers, eval."""

import csv
from dataclasses import replace

import numpy as np
import pytest

import importlib

from gyroshot import autodiff as ad
from gyroshot import metrics, netmods

# the package re-exports the train() function under the submodule's name,
# so the module itself must be fetched explicitly
tr = importlib.import_module("gyroshot.train")
from gyroshot.episodes import EpisodeSpec, SyntheticConfig, generate_synthetic, sample_episode
from gyroshot.errors import ConfigError, TrainingDivergedError
from gyroshot.geometry import BallConfig, einstein_midpoint, geodesic_distance
from gyroshot.netmods import ModelBundle, ModelConfig

BALL = BallConfig(c=0.5)
MODEL = ModelConfig(in_dim=3, grid=(2, 2), feat_dim=4, enc_hidden=6, relation_filters=4)


def tiny_dataset(seed=0):
    cfg = SyntheticConfig(
        n_classes=5, samples_per_class=8, patch_dim=3, grid=(2, 2), n_modes=1, seed=seed
    )
    return generate_synthetic(cfg, BALL)


def tiny_cfg(**kw):
    base = dict(ball=BALL, n_way=2, k_shot=2, n_query=2, epochs=1,
                tasks_per_epoch=3, val_fraction=0.0, seed=1)
    base.update(kw)
    return tr.TrainConfig(**base)


def tiny_episode(cfg, seed=4):
    ds = tiny_dataset()
    return sample_episode(ds, cfg.episode_spec(seed=seed)), ds


class TestTrainConfig:
    def test_validation(self):
        with pytest.raises(ConfigError):
            tiny_cfg(optimizer="lbfgs")
        with pytest.raises(ConfigError):
            tiny_cfg(objective="margin")
        with pytest.raises(ConfigError):
            tiny_cfg(temperature=0.0)
        with pytest.raises(ConfigError):
            tiny_cfg(val_fraction=1.0)

    def test_variant_switches(self):
        cfg = tiny_cfg()
        assert cfg.variant("prototype").objective == "prototype"
        v = cfg.variant("p2s_uniform")
        assert not v.use_fphi and not v.use_fomega and v.use_fzeta
        v = cfg.variant("p2s_relation")
        assert v.use_fphi and not v.use_fomega
        assert cfg.variant("euclidean_ap2s").euclidean_mode
        assert not cfg.variant("ap2s_mean_s2s").use_fzeta
        full = cfg.variant("app2s")
        assert full.use_fphi and full.use_fomega and full.use_fzeta
        assert not full.euclidean_mode and full.objective == "app2s"

    def test_variant_resets_previous_overrides(self):
        cfg = tiny_cfg(use_fphi=False, euclidean_mode=True)
        v = cfg.variant("app2s")
        assert v.use_fphi and not v.euclidean_mode

    def test_unknown_variant(self):
        with pytest.raises(ConfigError):
            tiny_cfg().variant("unknown")

    def test_trainable_modules(self):
        assert tr.trainable_modules(tiny_cfg(objective="prototype")) == ("encoder",)
        assert set(tr.trainable_modules(tiny_cfg())) == {
            "encoder", "relation", "signature", "s2s"
        }
        assert set(tr.trainable_modules(tiny_cfg(use_fphi=False))) == {"encoder", "s2s"}
        assert set(tr.trainable_modules(tiny_cfg(use_fomega=False))) == {
            "encoder", "relation", "s2s"
        }
        assert set(tr.trainable_modules(tiny_cfg(use_fzeta=False))) == {
            "encoder", "relation", "signature"
        }


class TestEpisodeForward:
    def test_full_pipeline_recomposition(self):
        """The batched forward must equal a per-query manual recomposition."""
        cfg = tiny_cfg()
        episode, _ = tiny_episode(cfg)
        bundle = ModelBundle(MODEL, seed=2)
        _, info = tr.episode_forward(episode, bundle, cfg)

        n, k_eff, hw, _ = episode.support.shape
        feat = MODEL.feat_dim
        enc_s = bundle.encoder(episode.support.reshape(-1, hw, 3), BALL)
        enc_q = bundle.encoder(episode.query.reshape(-1, hw, 3), BALL)
        s_cls = np.asarray(enc_s).reshape(n, k_eff, hw, feat)
        for m in range(enc_q.shape[0]):
            qbar = einstein_midpoint(enc_q[m], BALL, axis=-2)
            proj = netmods.project_support(enc_s, qbar, BALL)  # (n*k_eff, hw, feat)
            refined = bundle.signature.refine(proj)
            refined = np.asarray(refined).reshape(n, k_eff, hw, feat)
            sig = netmods.class_signature(refined)
            proj5 = proj.reshape(n, k_eff, hw, feat)
            w = np.asarray(netmods.relation_scores(proj5, sig, bundle.relation))
            d, svals = metrics.adaptive_p2s(
                enc_q[m][None], s_cls, w, bundle.s2s, BALL, return_parts=True,
            )
            np.testing.assert_allclose(info["weights"][m], w, atol=1e-12)
            np.testing.assert_allclose(info["s2s"][m], np.asarray(svals), atol=1e-12)
            np.testing.assert_allclose(info["distances"][m], np.asarray(d), atol=1e-12)

    def test_loss_matches_cross_entropy_of_distances(self):
        cfg = tiny_cfg(temperature=2.0)
        episode, _ = tiny_episode(cfg)
        bundle = ModelBundle(MODEL, seed=3)
        loss, info = tr.episode_forward(episode, bundle, cfg)
        logits = -info["distances"] / 2.0
        logz = np.log(np.exp(logits - logits.max(axis=-1, keepdims=True)).sum(axis=-1))
        logp = logits - logits.max(axis=-1, keepdims=True) - logz[:, None]
        expect = -logp[np.arange(len(info["labels"])), info["labels"]].mean()
        assert float(loss) == pytest.approx(expect, rel=1e-12)
        assert info["loss"] == pytest.approx(expect, rel=1e-12)

    def test_loss_is_var_on_tape(self):
        cfg = tiny_cfg()
        episode, _ = tiny_episode(cfg)
        bundle = ModelBundle(MODEL, seed=4)
        tape = ad.Tape()
        pvars = {"encoder": {k: tape.var(v) for k, v in bundle.encoder.params.items()}}
        loss = tr.episode_loss(episode, bundle, cfg, params=pvars)
        assert isinstance(loss, ad.Var)
        ad.backward(loss)
        assert any(np.any(v.grad != 0) for v in pvars["encoder"].values())

    def test_uniform_weights_without_fphi(self):
        cfg = tiny_cfg(use_fphi=False)
        episode, _ = tiny_episode(cfg)
        _, info = tr.episode_forward(episode, ModelBundle(MODEL, seed=5), cfg)
        np.testing.assert_array_equal(info["weights"], 0.5)

    def test_mean_s2s_without_fzeta(self):
        cfg = tiny_cfg(use_fzeta=False)
        episode, _ = tiny_episode(cfg)
        bundle = ModelBundle(MODEL, seed=6)
        _, info = tr.episode_forward(episode, bundle, cfg)
        enc_q = bundle.encoder(episode.query.reshape(-1, 4, 3), BALL)
        enc_s = bundle.encoder(episode.support.reshape(-1, 4, 3), BALL)
        n, k_eff = episode.support.shape[:2]
        s_cls = np.asarray(enc_s).reshape(n, k_eff, 4, MODEL.feat_dim)
        D = metrics.pairwise_matrix(enc_q[0], s_cls[1, 0], BALL)
        assert info["s2s"][0, 1, 0] == pytest.approx(float(np.mean(D)), rel=1e-12)

    def test_prototype_objective_recomposition(self):
        cfg = tiny_cfg(objective="prototype")
        episode, _ = tiny_episode(cfg)
        bundle = ModelBundle(MODEL, seed=7)
        _, info = tr.episode_forward(episode, bundle, cfg)
        assert info["s2s"] is None and info["weights"] is None
        n, k_eff, hw, _ = episode.support.shape
        enc_s = bundle.encoder(episode.support.reshape(-1, hw, 3), BALL)
        enc_q = bundle.encoder(episode.query.reshape(-1, hw, 3), BALL)
        emb_s = einstein_midpoint(enc_s, BALL, axis=-2).reshape(n, k_eff, -1)
        for m in range(enc_q.shape[0]):
            q_emb = einstein_midpoint(enc_q[m], BALL, axis=-2)
            for j in range(n):
                proto = einstein_midpoint(emb_s[j], BALL, axis=-2)
                expect = float(geodesic_distance(q_emb, proto, BALL))
                assert info["distances"][m, j] == pytest.approx(expect, rel=1e-12)

    def test_euclidean_mode_uses_flat_distance(self):
        cfg = tiny_cfg(objective="prototype", euclidean_mode=True)
        episode, _ = tiny_episode(cfg)
        bundle = ModelBundle(MODEL, seed=8)
        _, info = tr.episode_forward(episode, bundle, cfg)
        n, k_eff, hw, _ = episode.support.shape
        enc_s = bundle.encoder(episode.support.reshape(-1, hw, 3), BALL)
        enc_q = bundle.encoder(episode.query.reshape(-1, hw, 3), BALL)
        emb_s = einstein_midpoint(enc_s, BALL, axis=-2).reshape(n, k_eff, -1)
        q_emb = einstein_midpoint(enc_q[0], BALL, axis=-2)
        proto = einstein_midpoint(emb_s[0], BALL, axis=-2)
        expect = 2.0 * np.linalg.norm(q_emb - proto)
        assert info["distances"][0, 0] == pytest.approx(expect, rel=1e-12)

    def test_predictions_are_argmin(self):
        cfg = tiny_cfg()
        episode, _ = tiny_episode(cfg)
        _, info = tr.episode_forward(episode, ModelBundle(MODEL, seed=9), cfg)
        np.testing.assert_array_equal(info["predictions"], info["distances"].argmin(axis=-1))
        assert info["accuracy"] == np.mean(info["predictions"] == info["labels"])

    def test_prototype_baseline_predictions(self):
        cfg = tiny_cfg()
        episode, _ = tiny_episode(cfg)
        bundle = ModelBundle(MODEL, seed=10)
        preds = tr.prototype_baseline(episode, bundle, cfg)
        _, info = tr.episode_forward(episode, bundle, replace(cfg, objective="prototype"))
        np.testing.assert_array_equal(preds, info["predictions"])

    def test_gradient_with_dropout_mask_fixed(self):
        """FD check through the train-mode path (dropout active, same mask)."""
        cfg = tiny_cfg()
        episode, _ = tiny_episode(cfg)
        bundle = ModelBundle(MODEL, seed=11)

        def f(w1):
            params = {"relation": dict(bundle.relation.params)}
            params["relation"]["conv1_w"] = w1
            return tr.episode_loss(
                episode, bundle, cfg, params=params, train=True,
                rng=np.random.default_rng(99),
            )

        report = ad.finite_diff_check(f, bundle.relation.params["conv1_w"], tol=1e-3)
        assert report.passed, report


class TestOptimizers:
    def test_sgd_step(self):
        opt = tr.Sgd(lr=0.1, weight_decay=0.5)
        p = {"a": np.array([2.0])}
        opt.step(p, {"a": np.array([1.0])}, scale=1.0)
        # g_total = 1 + 0.5 * 2 = 2; p = 2 - 0.1 * 2
        np.testing.assert_allclose(p["a"], [1.8])

    def test_sgd_scale(self):
        opt = tr.Sgd(lr=0.1)
        p = {"a": np.array([1.0])}
        opt.step(p, {"a": np.array([1.0])}, scale=0.1)
        np.testing.assert_allclose(p["a"], [0.99])

    def test_adam_first_step_is_signed_lr(self):
        opt = tr.Adam(lr=0.01)
        p = {"a": np.array([1.0, -1.0])}
        opt.step(p, {"a": np.array([3.0, -0.2])}, scale=1.0)
        # bias-corrected first step ~ lr * sign(g)
        np.testing.assert_allclose(p["a"], [1.0 - 0.01, -1.0 + 0.01], atol=1e-6)

    def test_adam_state_per_parameter(self):
        opt = tr.Adam(lr=0.01)
        p = {"a": np.zeros(2), "b": np.zeros(3)}
        opt.step(p, {"a": np.ones(2), "b": np.ones(3)})
        assert set(opt.m) == {"a", "b"}
        assert opt.m["b"].shape == (3,)

    def test_make_optimizer(self):
        assert isinstance(tr.make_optimizer(tiny_cfg(optimizer="sgd")), tr.Sgd)
        assert isinstance(tr.make_optimizer(tiny_cfg(optimizer="adam")), tr.Adam)


class TestTrainLoop:
    def test_deterministic_repeat(self):
        ds = tiny_dataset()
        cfg = tiny_cfg(epochs=2, tasks_per_epoch=2)
        a = tr.train(ds, cfg, MODEL)
        b = tr.train(ds, cfg, MODEL)
        for k, v in a.bundle.state_dict().items():
            np.testing.assert_array_equal(v, b.bundle.state_dict()[k], err_msg=k)
        assert a.metrics_rows == b.metrics_rows
        assert a.val_history == b.val_history

    def test_warm_start_from_state(self):
        ds = tiny_dataset()
        cfg = tiny_cfg()
        base = tr.train(ds, cfg, MODEL)
        state = base.bundle.state_dict()
        a = tr.train(ds, cfg, MODEL, init_state=state)
        b = tr.train(ds, cfg, MODEL, init_state=state)
        for k, v in a.bundle.state_dict().items():
            np.testing.assert_array_equal(v, b.bundle.state_dict()[k], err_msg=k)
        assert a.metrics_rows == b.metrics_rows
        # the continuation actually trains on from the loaded weights
        assert any(
            not np.array_equal(v, state[k]) for k, v in a.bundle.named_params().items()
        )
        fresh = tr.train(ds, cfg, MODEL)
        assert any(
            not np.array_equal(v, fresh.bundle.state_dict()[k])
            for k, v in a.bundle.named_params().items()
        )

    def test_metrics_rows_layout(self):
        result = tr.train(tiny_dataset(), tiny_cfg(epochs=2, tasks_per_epoch=3), MODEL)
        assert [(e, t) for e, t, _, _ in result.metrics_rows] == [
            (e, t) for e in range(2) for t in range(3)
        ]

    def test_on_episode_hook(self):
        seen = []
        tr.train(tiny_dataset(), tiny_cfg(), MODEL, on_episode=seen.append)
        assert len(seen) == 3
        assert {"distances", "s2s", "weights", "accuracy", "loss"} <= set(seen[0])

    def test_best_accuracy_is_max_of_history(self):
        result = tr.train(tiny_dataset(), tiny_cfg(epochs=3, tasks_per_epoch=2), MODEL)
        assert result.best_val_accuracy == max(result.val_history)

    def test_parameters_change(self):
        ds = tiny_dataset()
        cfg = tiny_cfg()
        init = ModelBundle(MODEL, seed=cfg.seed).state_dict()
        result = tr.train(ds, cfg, MODEL)
        assert any(
            not np.array_equal(v, init[k]) for k, v in result.bundle.named_params().items()
        )

    def test_prototype_variant_trains_encoder_only(self):
        ds = tiny_dataset()
        cfg = tiny_cfg().variant("prototype")
        init = ModelBundle(MODEL, seed=cfg.seed).state_dict()
        result = tr.train(ds, cfg, MODEL)
        final = result.bundle.state_dict()
        assert not np.array_equal(final["encoder.w1"], init["encoder.w1"])
        np.testing.assert_array_equal(final["s2s.w1"], init["s2s.w1"])
        np.testing.assert_array_equal(final["relation.conv1_w"], init["relation.conv1_w"])

    def test_divergence_raises(self, monkeypatch):
        def exploding(*args, **kwargs):
            return None, {"loss": float("nan"), "accuracy": 0.0}

        monkeypatch.setattr(tr, "episode_forward", exploding)
        with pytest.raises(TrainingDivergedError, match="nan"):
            tr.train(tiny_dataset(), tiny_cfg(), MODEL)

    def test_validation_split_used(self):
        ds = tiny_dataset()
        cfg = tiny_cfg(val_fraction=0.4, val_tasks=2)  # 5 classes -> 2 held out
        train_ds, val_ds = tr.split_classes(ds, cfg)
        np.testing.assert_array_equal(train_ds.classes, [0, 1, 2])
        np.testing.assert_array_equal(val_ds.classes, [3, 4])
        result = tr.train(ds, cfg, MODEL)
        assert len(result.val_history) == cfg.epochs

    def test_split_none_when_too_few_classes(self):
        ds = tiny_dataset()
        train_ds, val_ds = tr.split_classes(ds, tiny_cfg(val_fraction=0.1))
        assert val_ds is None
        assert train_ds.classes.size == 5


class TestEvaluate:
    def test_report_shape_and_determinism(self):
        ds = tiny_dataset()
        cfg = tiny_cfg()
        bundle = ModelBundle(MODEL, seed=12)
        a = tr.evaluate(ds, bundle, cfg, n_epochs=2, tasks_per_epoch=3)
        b = tr.evaluate(ds, bundle, cfg, n_epochs=2, tasks_per_epoch=3)
        assert a.n_tasks == 6
        np.testing.assert_array_equal(a.per_task, b.per_task)
        np.testing.assert_array_equal(a.per_task_loss, b.per_task_loss)
        assert 0.0 <= a.mean_accuracy <= 1.0
        assert a.mean_loss == pytest.approx(a.per_task_loss.mean())

    def test_explicit_seed_changes_stream(self):
        ds = tiny_dataset()
        cfg = tiny_cfg()
        bundle = ModelBundle(MODEL, seed=12)
        a = tr.evaluate(ds, bundle, cfg, n_epochs=1, tasks_per_epoch=4, seed=1)
        b = tr.evaluate(ds, bundle, cfg, n_epochs=1, tasks_per_epoch=4, seed=2)
        assert not np.array_equal(a.per_task_loss, b.per_task_loss)

    def test_summarize(self):
        assert tr.summarize([]) == (0.0, 0.0)
        assert tr.summarize([0.7]) == (0.7, 0.0)
        mean, ci = tr.summarize([0.0, 1.0])
        assert mean == 0.5
        assert ci == pytest.approx(1.96 * np.std([0.0, 1.0], ddof=1) / np.sqrt(2))

    def test_chance_accuracy_on_unstructured_data(self):
        # all classes share one center, so labels carry no information and
        # any model (trained or not) scores at chance on 5-way tasks
        synth = SyntheticConfig(
            n_classes=6, samples_per_class=10, patch_dim=3, grid=(2, 2),
            n_modes=1, class_spread=0.0, mode_spread=0.0, within_spread=0.4,
            seed=3,
        )
        ds = generate_synthetic(synth, BALL)
        cfg = tiny_cfg(n_way=5)
        bundle = ModelBundle(MODEL, seed=21)
        report = tr.evaluate(ds, bundle, cfg, n_epochs=1, tasks_per_epoch=60, seed=5)
        assert 0.08 <= report.mean_accuracy <= 0.32

    def test_outlier_episodes_flow_through(self):
        ds = tiny_dataset()
        cfg = tiny_cfg(n_way=2)
        bundle = ModelBundle(MODEL, seed=13)
        report = tr.evaluate(ds, bundle, cfg, n_epochs=1, tasks_per_epoch=2, n_outliers=2)
        assert report.n_tasks == 2


class TestRobustness:
    def test_empty_variants_rejected(self):
        with pytest.raises(ConfigError, match="variant"):
            tr.run_robustness(tiny_dataset(), {})

    def test_grid_rows(self):
        ds = tiny_dataset()
        cfg = tiny_cfg()
        variants = {
            "app2s": (ModelBundle(MODEL, seed=14), cfg),
            "prototype": (ModelBundle(MODEL, seed=14), cfg.variant("prototype")),
        }
        rows = tr.run_robustness(
            ds, variants, outlier_grid=(0, 1), n_epochs=1, tasks_per_epoch=2
        )
        assert [(r["variant"], r["n_outliers"]) for r in rows] == [
            ("app2s", 0), ("app2s", 1), ("prototype", 0), ("prototype", 1)
        ]
        for r in rows:
            assert 0.0 <= r["accuracy"] <= 1.0 and r["ci95"] >= 0.0


class TestCsvWriters:
    def test_metrics_roundtrip(self, tmp_path):
        rows = [(0, 0, 0.5, 1.234567890123456789), (0, 1, 1.0, 0.1)]
        path = tmp_path / "m.csv"
        tr.write_metrics_csv(rows, path)
        with open(path, newline="") as f:
            back = list(csv.reader(f))
        assert back[0] == ["epoch", "task", "accuracy", "loss"]
        assert float(back[1][3]) == rows[0][3]  # repr() roundtrips exactly
        assert len(back) == 3

    def test_robustness_roundtrip(self, tmp_path):
        rows = [{"variant": "a", "n_outliers": 2, "accuracy": 0.625, "ci95": 0.03125}]
        path = tmp_path / "r.csv"
        tr.write_robustness_csv(rows, path)
        with open(path, newline="") as f:
            back = list(csv.reader(f))
        assert back[0] == ["variant", "n_outliers", "accuracy", "ci95"]
        assert back[1] == ["a", "2", "0.625", "0.03125"]
