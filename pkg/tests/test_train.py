import io

import numpy as np
import pytest

from binspot.data import (
    FeatureDataset,
    FormatError,
    gen_toy_dataset,
    load_features,
    save_features,
)
from binspot.model import ModelConfig, ThinnableFsmn, desk_config, make_teacher
from binspot.serial import load_checkpoint, save_checkpoint
from binspot.train import (
    SGD,
    TrainConfig,
    cosine_lr,
    evaluate,
    parameter_hash,
    run_training,
    softmax_cross_entropy,
    total_loss,
    train_step,
)


def tiny_config():
    return ModelConfig(
        num_classes=4, num_blocks=4, delta_set=(1, 2, 4), backbone_dim=8,
        hidden_dim=12, input_time=8, input_freq=10, head_channels=(3, 3),
    )


def tiny_dataset(seed=0, per_class=6, split="train"):
    return gen_toy_dataset(seed, per_class=per_class, time_steps=8, freq_bins=10,
                           split=split)


class TestCosineLr:
    def test_start_is_base(self):
        assert cosine_lr(0, 100, 0.05) == 0.05

    def test_end_is_zero(self):
        assert cosine_lr(100, 100, 0.05) == pytest.approx(0.0, abs=1e-17)

    def test_midpoint_is_half(self):
        assert cosine_lr(50, 100, 0.05) == pytest.approx(0.025)

    def test_step_beyond_total_rejected(self):
        with pytest.raises(ValueError):
            cosine_lr(101, 100, 0.05)

    def test_monotone_nonincreasing(self):
        vals = [cosine_lr(s, 200, 0.1) for s in range(201)]
        assert all(a >= b for a, b in zip(vals, vals[1:]))


class TestTotalLoss:
    def test_variant_weights(self):
        ce = {1: 1.0, 2: 1.0, 4: 1.0}
        fid = {1: 0.0, 2: 0.0, 4: 0.0}
        assert total_loss(ce, fid, 0.5) == pytest.approx(1.0 + 0.5 + 0.125)

    def test_gamma_zero_is_pure_ce(self):
        ce = {1: 2.0, 2: 4.0}
        fid = {1: 100.0, 2: 100.0}
        assert total_loss(ce, fid, 0.0) == 2.0 + 0.5 * 4.0

    def test_documented_arithmetic(self):
        ce = {1: 1.0, 2: 1.0, 4: 1.0}
        fid = {1: 1.0, 2: 1.0, 4: 1.0}
        assert total_loss(ce, fid, 0.01) == pytest.approx(1.64125)

    def test_missing_delta_entry(self):
        with pytest.raises(ValueError):
            total_loss({1: 1.0, 2: 1.0}, {1: 0.0}, 0.01)


class TestCrossEntropy:
    def test_uniform_logits(self):
        logits = np.zeros((2, 4))
        loss, grad = softmax_cross_entropy(logits, np.array([0, 3]))
        assert loss == pytest.approx(np.log(4))
        assert grad.shape == (2, 4)

    def test_gradient_sums_to_zero_per_row(self):
        rng = np.random.default_rng(0)
        logits = rng.standard_normal((5, 3))
        _, grad = softmax_cross_entropy(logits, rng.integers(0, 3, 5))
        np.testing.assert_allclose(grad.sum(axis=1), 0, atol=1e-12)

    def test_extreme_logits_stable(self):
        logits = np.array([[1000.0, -1000.0]])
        loss, grad = softmax_cross_entropy(logits, np.array([0]))
        assert np.isfinite(loss) and np.all(np.isfinite(grad))


class TestSgd:
    def test_zero_grads_leave_params_unchanged(self):
        model = ThinnableFsmn(tiny_config(), seed=0)
        before = {k: v.copy() for k, v in model.store.params.items()}
        model.store.zero_grads()
        SGD().step(model.store, lr=0.5)
        for k, v in model.store.params.items():
            assert np.array_equal(v, before[k]), k

    def test_momentum_accumulates(self):
        model = ThinnableFsmn(tiny_config(), seed=0)
        opt = SGD(momentum=0.9)
        name = "cls.b"
        model.store.zero_grads()
        model.store.add_grad(name, np.ones_like(model.store.params[name]))
        p0 = model.store.params[name].copy()
        opt.step(model.store, lr=0.1)
        np.testing.assert_allclose(model.store.params[name], p0 - 0.1)
        model.store.zero_grads()
        opt.step(model.store, lr=0.1)  # velocity decays without fresh grads
        np.testing.assert_allclose(model.store.params[name], p0 - 0.1 - 0.09)


class TestToyData:
    def test_same_seed_identical(self):
        a = gen_toy_dataset(3, per_class=5)
        b = gen_toy_dataset(3, per_class=5)
        assert np.array_equal(a.features, b.features)
        assert np.array_equal(a.labels, b.labels)

    def test_splits_differ(self):
        a = gen_toy_dataset(3, per_class=5, split="train")
        b = gen_toy_dataset(3, per_class=5, split="test")
        assert not np.array_equal(a.features, b.features)

    def test_noiseless_classes_linearly_separable_by_band_energy(self):
        ds = gen_toy_dataset(1, per_class=3, noise=0.0)
        centers = [(c + 1) * 40 / 5 for c in range(4)]
        for feat, label in zip(ds.features, ds.labels):
            band_energy = [
                feat[:, max(0, int(m) - 2) : int(m) + 3].sum() for m in centers
            ]
            assert int(np.argmax(band_energy)) == label

    def test_two_layer_float_baseline_reaches_99_percent(self):
        """Sanity oracle: mean-pooled features + tiny MLP separate the task."""
        ds = gen_toy_dataset(5, per_class=50)
        x = ds.features.mean(axis=1)  # (N, F)
        y = ds.labels
        rng = np.random.default_rng(0)
        w1 = rng.standard_normal((40, 16)) * 0.2
        b1 = np.zeros(16)
        w2 = rng.standard_normal((16, 4)) * 0.2
        b2 = np.zeros(4)
        for _ in range(300):
            h = np.maximum(x @ w1 + b1, 0)
            logits = h @ w2 + b2
            loss, g = softmax_cross_entropy(logits, y)
            gh = g @ w2.T * (h > 0)
            w2 -= 0.5 * (h.T @ g)
            b2 -= 0.5 * g.sum(axis=0)
            w1 -= 0.5 * (x.T @ gh)
            b1 -= 0.5 * gh.sum(axis=0)
        acc = np.mean(
            np.argmax(np.maximum(x @ w1 + b1, 0) @ w2 + b2, axis=1) == y
        )
        assert acc >= 0.99

    def test_per_class_validated(self):
        with pytest.raises(ValueError):
            gen_toy_dataset(0, per_class=0)


class TestFeatureFiles:
    def test_round_trip(self, tmp_path):
        ds = tiny_dataset(seed=2)
        path = tmp_path / "f.bftr"
        save_features(path, ds)
        back = load_features(path)
        np.testing.assert_allclose(back.features, ds.features, atol=1e-6)
        assert np.array_equal(back.labels, ds.labels)
        assert back.num_classes == ds.num_classes

    def test_corrupted_magic(self, tmp_path):
        path = tmp_path / "f.bftr"
        save_features(path, tiny_dataset())
        blob = bytearray(path.read_bytes())
        blob[:4] = b"NOPE"
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError):
            load_features(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "f.bftr"
        save_features(path, tiny_dataset())
        path.write_bytes(path.read_bytes()[:-7])
        with pytest.raises(FormatError):
            load_features(path)

    def test_header_length_mismatch(self, tmp_path):
        path = tmp_path / "f.bftr"
        save_features(path, tiny_dataset())
        blob = bytearray(path.read_bytes())
        blob[8:12] = (999).to_bytes(4, "little")  # lie about the count
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError):
            load_features(path)


class TestCheckpoint:
    def test_save_load_save_byte_identical(self, tmp_path):
        model = ThinnableFsmn(tiny_config(), seed=4)
        opt = SGD()
        model.store.zero_grads()
        model.store.add_grad("cls.b", np.ones(4))
        opt.step(model.store, lr=0.1)
        p1 = tmp_path / "a.ckpt"
        p2 = tmp_path / "b.ckpt"
        save_checkpoint(p1, model, opt.state_dict(), epoch=3)
        loaded, opt_state, epoch = load_checkpoint(p1)
        assert epoch == 3
        save_checkpoint(p2, loaded, opt_state, epoch=epoch)
        assert p1.read_bytes() == p2.read_bytes()

    def test_load_restores_quantized_behaviour(self, tmp_path):
        model = ThinnableFsmn(tiny_config(), seed=5)
        x = np.random.default_rng(6).standard_normal((2, 8, 10))
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, model)
        loaded, _, _ = load_checkpoint(path)
        a, _ = model.forward(x, 1)
        b, _ = loaded.forward(x, 1)
        # float32 rounding in the file format is the only divergence
        np.testing.assert_allclose(a, b, atol=1e-4)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, ThinnableFsmn(tiny_config(), seed=0))
        blob = bytearray(path.read_bytes())
        blob[:4] = b"XXXX"
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_truncated_file(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, ThinnableFsmn(tiny_config(), seed=0))
        path.write_bytes(path.read_bytes()[:-20])
        with pytest.raises(FormatError):
            load_checkpoint(path)


class TestTrainStep:
    def test_metrics_fields_and_recombination(self):
        cfg = tiny_config()
        model = ThinnableFsmn(cfg, seed=7)
        teacher = make_teacher(cfg, seed=8)
        ds = tiny_dataset(seed=9)
        m = train_step(model, teacher, ds.features[:8], ds.labels[:8],
                       SGD(), lr=0.05, gamma=0.01)
        assert set(m["ce"]) == {1, 2, 4} and set(m["fid"]) == {1, 2, 4}
        assert m["loss_total"] == total_loss(m["ce"], m["fid"], 0.01)

    def test_ratio_clamped_after_step(self):
        cfg = tiny_config()
        model = ThinnableFsmn(cfg, seed=10)
        model.store.params["neck.ratio"][0] = 1.99
        ds = tiny_dataset(seed=11)
        opt = SGD(momentum=0.0)
        for _ in range(3):
            train_step(model, None, ds.features[:8], ds.labels[:8],
                       opt, lr=5.0, gamma=0.0)
            r = model.store.params["neck.ratio"][0]
            assert 0.1 <= r <= 2.0


class TestRunTraining:
    def test_identical_seeds_identical_metrics(self):
        cfg = tiny_config()
        ds = tiny_dataset(seed=12, per_class=8)
        streams = []
        for _ in range(2):
            model = ThinnableFsmn(cfg, seed=13)
            buf = io.StringIO()
            run_training(model, None, ds,
                         TrainConfig(epochs=2, batch_size=8, gamma=0.0, seed=13),
                         metrics_fh=buf)
            streams.append(buf.getvalue())
        assert streams[0] == streams[1]
        header = streams[0].splitlines()[0]
        assert header == "step,lr,loss_total,loss_ce_d1,loss_fid_d1,loss_ce_d2,loss_fid_d2,loss_ce_d4,loss_fid_d4"

    def test_teacher_hash_constant_over_run(self):
        cfg = tiny_config()
        teacher = make_teacher(cfg, seed=14)
        h0 = parameter_hash(teacher)
        model = ThinnableFsmn(cfg, seed=15)
        run_training(model, teacher, tiny_dataset(seed=16),
                     TrainConfig(epochs=1, batch_size=8, gamma=0.01, seed=16))
        assert parameter_hash(teacher) == h0

    def test_lr_follows_cosine_schedule(self):
        cfg = tiny_config()
        ds = tiny_dataset(seed=17, per_class=8)  # 32 examples
        model = ThinnableFsmn(cfg, seed=18)
        tc = TrainConfig(epochs=2, batch_size=8, gamma=0.0, seed=18, base_lr=0.2)
        hist = run_training(model, None, ds, tc)
        total = len(hist)
        for step, m in enumerate(hist):
            assert m["lr"] == cosine_lr(step, total, 0.2)


class TestEvaluate:
    def test_constant_predictor_on_single_class(self):
        cfg = tiny_config()
        model = ThinnableFsmn(cfg, seed=19)
        ds = tiny_dataset(seed=20)
        only = FeatureDataset(ds.features[ds.labels == 2], ds.labels[ds.labels == 2],
                              num_classes=4)
        logits, _ = model.forward(only.features, 1)
        forced = int(np.argmax(logits[0]))
        if np.all(np.argmax(logits, axis=1) == forced) and forced == 2:
            assert evaluate(model, only, 1) == 1.0  # pragma: no cover

        # force the constant prediction via the classifier bias
        model.store.params["cls.w"][...] = 0
        model.store.params["cls.b"][...] = 0
        model.store.params["cls.b"][2] = 10.0
        assert evaluate(model, only, 1) == 1.0

    def test_matches_brute_force_recount(self):
        cfg = tiny_config()
        model = ThinnableFsmn(cfg, seed=21)
        ds = tiny_dataset(seed=22)
        acc = evaluate(model, ds, 2)
        logits, _ = model.forward(ds.features, 2)
        brute = float(np.mean(np.argmax(logits, axis=1) == ds.labels))
        assert acc == pytest.approx(brute)

    def test_random_model_near_chance_on_balanced_data(self):
        cfg = tiny_config()
        ds = tiny_dataset(seed=23, per_class=64)
        accs = [evaluate(ThinnableFsmn(cfg, seed=s), ds, 1) for s in range(3)]
        # 3-sigma binomial band around 0.25 for n=256, pooled over 3 models
        assert 0.25 - 4 * np.sqrt(0.25 * 0.75 / 256) <= np.mean(accs) <= 0.25 + 4 * np.sqrt(
            0.25 * 0.75 / 256
        )

    def test_empty_dataset_rejected(self):
        ds = FeatureDataset(np.zeros((0, 8, 10)), np.zeros(0, dtype=int), 4)
        with pytest.raises(ValueError):
            evaluate(ThinnableFsmn(tiny_config(), seed=0), ds, 1)
