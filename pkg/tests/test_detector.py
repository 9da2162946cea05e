import numpy as np
import pytest

from mcpad import detector as det
from mcpad.detector import AdamConfig, AdamState, DetectorModel
from mcpad.errors import CorruptFileError, DegenerateAnchorError, UnlearnableDatasetError
from mcpad.geometry import AnchorGrid, BBox
from mcpad.loss import FocalConfig
from mcpad.preprocess import CompositeImage

SMALL_GRID = AnchorGrid(16, (16.0, 32.0), (1.0,), 64, 64)


def composite(planes):
    return CompositeImage(np.asarray(planes, dtype=np.uint8))


def toy_scene(rng, cls, size=64):
    """Noisy background with one square: bright and raised for class 0, flat for class 1."""
    planes = rng.integers(60, 90, (3, size, size))
    s = int(rng.integers(16, 32))
    x, y = (int(v) for v in rng.integers(0, size - s, 2))
    if cls == 0:
        planes[:, y : y + s, x : x + s] = rng.integers(170, 210, (3, s, s))
    else:
        planes[0, y : y + s, x : x + s] = rng.integers(170, 210, (s, s))
    return composite(planes), [(BBox(x, y, x + s, y + s), cls)]


def toy_set(seed, n):
    rng = np.random.default_rng(seed)
    return [toy_scene(rng, i % 2) for i in range(n)]


def brute_stats(img, box):
    """Direct pixel loops over the rounded, clipped support."""
    x0, y0 = (int(np.floor(max(v, 0) + 0.5)) for v in (box.x_min, box.y_min))
    x1 = int(np.floor(min(box.x_max, img.width) + 0.5))
    y1 = int(np.floor(min(box.y_max, img.height) + 0.5))
    w, h = x1 - x0, y1 - y0
    cx0, cx1, cy0, cy1 = x0 + w // 4, x1 - w // 4, y0 + h // 4, y1 - h // 4
    out = []
    means, stds, contrasts, cells = [], [], [], []
    for p in img.planes.astype(float):
        vals = [p[y, x] for y in range(y0, y1) for x in range(x0, x1)]
        m = sum(vals) / len(vals)
        means.append(m)
        stds.append((sum((v - m) ** 2 for v in vals) / len(vals)) ** 0.5)
        inner = [p[y, x] for y in range(cy0, cy1) for x in range(cx0, cx1)]
        ring = [p[y, x] for y in range(y0, y1) for x in range(x0, x1) if not (cy0 <= y < cy1 and cx0 <= x < cx1)]
        contrasts.append(sum(inner) / len(inner) - sum(ring) / len(ring) if ring and inner else 0.0)
        xs = [x0 + w * i // 3 for i in range(4)]
        ys = [y0 + h * i // 3 for i in range(4)]
        for i in range(3):
            for j in range(3):
                c = [p[y, x] for y in range(ys[i], ys[i + 1]) for x in range(xs[j], xs[j + 1])]
                cells.append(sum(c) / len(c) if c else m)
    out = means + stds + contrasts
    out += [abs(means[0] - means[1]), abs(means[0] - means[2]), abs(means[1] - means[2])]
    return np.array(out + cells)


class TestFeatures:
    def test_layout_sizes(self):
        assert det.NUM_STATS == 39
        assert det.NUM_FEATURES == 39 + 39 * 40 // 2
        assert det.FEATURE_DIM == det.NUM_FEATURES + 1

    def test_constant_image(self):
        img = composite(np.full((3, 32, 32), 128))
        f = det.extract_features(img, BBox(4, 4, 20, 20))
        assert f[:3].tolist() == [128] * 3
        assert f[3:12].tolist() == [0] * 9
        assert f[-1] == 1.0

    def test_deterministic(self):
        rng = np.random.default_rng(0)
        img = composite(rng.integers(0, 256, (3, 32, 32)))
        a = det.extract_features(img, BBox(3, 5, 29, 17))
        assert det.extract_features(img, BBox(3, 5, 29, 17)).tobytes() == a.tobytes()

    @pytest.mark.parametrize(
        "box",
        [BBox(0, 0, 4, 4), BBox(1, 0, 3, 4), BBox(0.4, 1.6, 3.2, 4), BBox(-2, -2, 2, 3), BBox(2, 2, 9, 9), BBox(3, 0, 4, 1)],
    )
    def test_matches_pixel_loops(self, box):
        rng = np.random.default_rng(1)
        img = composite(rng.integers(0, 256, (3, 4, 4)))
        got = det.anchor_statistics(img, box.as_array()[None])[0]
        np.testing.assert_allclose(got, brute_stats(img, box), rtol=0, atol=1e-9)

    def test_anchor_outside_image(self):
        img = composite(np.zeros((3, 8, 8)))
        with pytest.raises(DegenerateAnchorError):
            det.extract_features(img, BBox(20, 20, 30, 30))

    def test_pair_products_order(self):
        z = np.array([[2.0, 3.0, 5.0]])
        assert det.pair_products(z).tolist() == [[4, 6, 10, 9, 15, 25]]

    def test_normalization_moments(self):
        scenes = [det.prepare_scene(img, gt, SMALL_GRID) for img, gt in toy_set(0, 4)]
        mean, std = det.fit_normalization(scenes)
        model = DetectorModel(SMALL_GRID, mean, std, np.zeros((2, det.FEATURE_DIM)), np.zeros((4, det.FEATURE_DIM)))
        f = model.normalize(np.concatenate([s.stats for s in scenes]))[:, :-1]
        varying = f.std(axis=0) > 0
        assert np.abs(f.mean(axis=0)).max() < 1e-9
        assert np.abs(f.std(axis=0)[varying] - 1).max() < 1e-9


class TestForward:
    def test_zero_model_is_half(self):
        img = composite(np.random.default_rng(2).integers(0, 256, (3, 64, 64)))
        probs, _, anchors = det.predict(DetectorModel.zeros(SMALL_GRID), img)
        assert probs.shape == (len(anchors), 2) and np.all(probs == 0.5)
        dets = det.forward(DetectorModel.zeros(SMALL_GRID), img, 0.5)
        assert len(dets) == len(anchors)
        assert all(d.label == det.BONAFIDE and d.probability == 0.5 for d in dets)

    def test_saturated_bias(self):
        img = composite(np.full((3, 16, 16), 50))
        model = DetectorModel.zeros(AnchorGrid(16, (16.0,), (1.0,), 16, 16))
        model.w_cls[0, -1] = 60.0
        model.w_cls[1, -1] = -60.0
        [d] = det.forward(model, img)
        assert d.label == det.BONAFIDE and d.probability == pytest.approx(1.0, abs=1e-15)
        assert d.box == BBox(0, 0, 16, 16)

    def test_threshold_filters(self):
        img = composite(np.full((3, 16, 16), 50))
        model = DetectorModel.zeros(AnchorGrid(16, (16.0,), (1.0,), 16, 16))
        model.w_cls[:, -1] = -3.0
        assert det.forward(model, img, 0.5) == []

    def test_linear_heads_match_dot_product(self):
        rng = np.random.default_rng(3)
        img = composite(rng.integers(0, 256, (3, 32, 32)))
        grid = AnchorGrid(16, (16.0,), (1.0,), 32, 32)
        model = DetectorModel(
            grid,
            rng.normal(100, 10, det.NUM_FEATURES),
            rng.uniform(1, 5, det.NUM_FEATURES),
            rng.normal(0, 0.01, (2, det.FEATURE_DIM)),
            rng.normal(0, 0.01, (4, det.FEATURE_DIM)),
        )
        probs, deltas, anchors = det.predict(model, img)
        for i in (0, 3):
            raw = det.extract_features(img, BBox.from_array(anchors[i]))[:-1]
            z = (raw - model.feat_mean[:39]) / model.feat_std[:39]
            prods = [z[a] * z[b] for a in range(39) for b in range(a, 39)]
            f = np.concatenate([z, (np.array(prods) - model.feat_mean[39:]) / model.feat_std[39:], [1.0]])
            np.testing.assert_allclose(probs[i], 1 / (1 + np.exp(-(model.w_cls @ f))), rtol=1e-12)
            np.testing.assert_allclose(deltas[i], model.w_reg @ f, rtol=1e-12, atol=1e-15)


class TestAdam:
    def test_zero_gradient(self):
        p = {"w": np.array([1.0, -2.0])}
        new, state = det.adam_step(p, {"w": np.zeros(2)}, AdamState(), AdamConfig(lr=0.1))
        assert new["w"].tolist() == [1.0, -2.0] and state.step == 1

    def test_first_step_is_sign_sized(self):
        cfg = AdamConfig(lr=0.01)
        g = np.array([3.0, -0.5, 1e-3])
        new, _ = det.adam_step({"w": np.zeros(3)}, {"w": g}, AdamState(), cfg)
        np.testing.assert_allclose(new["w"], -cfg.lr * g / (np.abs(g) + cfg.eps), rtol=1e-12)

    def test_does_not_mutate_inputs(self):
        p, g = {"w": np.ones(2)}, {"w": np.ones(2)}
        det.adam_step(p, g, AdamState(), AdamConfig())
        assert p["w"].tolist() == [1, 1]

    def test_minimizes_quadratic(self):
        target = np.array([0.3, -0.7])
        p, state, cfg = {"w": np.zeros(2)}, AdamState(), AdamConfig(lr=0.01)
        for _ in range(2000):
            p, state = det.adam_step(p, {"w": 2 * (p["w"] - target)}, state, cfg)
        np.testing.assert_allclose(p["w"], target, atol=1e-3)

    @pytest.mark.parametrize("kw", [{"lr": 0}, {"beta1": 1.0}, {"beta2": -0.1}, {"eps": 0}, {"epochs": 0}])
    def test_config_validation(self, kw):
        with pytest.raises(ValueError):
            AdamConfig(**kw)


class TestGradients:
    def test_end_to_end_finite_differences(self):
        scenes = [det.prepare_scene(img, gt, SMALL_GRID) for img, gt in toy_set(4, 2)]
        mean, std = det.fit_normalization(scenes)
        model = det.init_model(SMALL_GRID, mean, std, seed=5)
        rng = np.random.default_rng(6)
        model = model.with_params({"w_cls": model.w_cls + rng.normal(0, 0.05, model.w_cls.shape), "w_reg": rng.normal(0, 0.05, model.w_reg.shape)})
        _, grads = det.detector_loss(model, scenes)
        h = 1e-4
        worst = 0.0
        for _ in range(50):
            key = "w_cls" if rng.random() < 0.5 else "w_reg"
            idx = tuple(int(rng.integers(n)) for n in model.params[key].shape)
            vals = []
            for sign in (1, -1):
                p = {k: v.copy() for k, v in model.params.items()}
                p[key][idx] += sign * h
                vals.append(det.detector_loss(model.with_params(p), scenes)[0][0])
            num = (vals[0] - vals[1]) / (2 * h)
            an = grads[key][idx]
            worst = max(worst, abs(an - num) / max(abs(an), abs(num), 1e-12))
        assert worst < 1e-4


class TestTrain:
    def test_descends_on_separable_data(self):
        data = toy_set(7, 8)
        res = det.train(data, AdamConfig(epochs=50, seed=1), grid=SMALL_GRID)
        assert len(res.history) == 50 and res.selected_epoch == 50
        assert res.history[-1].train_loss < res.initial_loss

    def test_same_seed_same_bytes(self):
        data = toy_set(8, 4)
        cfg = AdamConfig(epochs=3, seed=2)
        a = det.train(data, cfg, grid=SMALL_GRID, val=data[:2])
        b = det.train(data, cfg, grid=SMALL_GRID, val=data[:2])
        assert det.model_to_bytes(a.model) == det.model_to_bytes(b.model)
        assert [h.dev_loss for h in a.history] == [h.dev_loss for h in b.history]

    def test_selects_min_dev_epoch(self):
        data = toy_set(9, 6)
        res = det.train(data, AdamConfig(epochs=6, seed=3), grid=SMALL_GRID, val=toy_set(10, 2))
        dev = [h.dev_loss for h in res.history]
        assert res.selected_epoch == 1 + dev.index(min(dev))

    def test_no_positives(self):
        img, _ = toy_scene(np.random.default_rng(0), 0)
        with pytest.raises(UnlearnableDatasetError):
            det.train([(img, [])], grid=SMALL_GRID)
        with pytest.raises(UnlearnableDatasetError):
            det.train([], grid=SMALL_GRID)


class TestPersistence:
    def trained(self):
        return det.train(toy_set(11, 2), AdamConfig(epochs=1), grid=SMALL_GRID).model

    def test_round_trip_bit_exact(self, tmp_path):
        model = self.trained()
        det.save_model(model, tmp_path / "m.bin")
        back = det.load_model(tmp_path / "m.bin")
        for k in ("feat_mean", "feat_std", "w_cls", "w_reg"):
            assert getattr(back, k).tobytes() == getattr(model, k).tobytes()
        assert (back.grid.stride, back.grid.scales, back.grid.aspect_ratios) == (16, (16.0, 32.0), (1.0,))
        assert det.model_to_bytes(back) == (tmp_path / "m.bin").read_bytes()

    @pytest.mark.parametrize(
        "mutate,msg",
        [
            (lambda b: b[:10], "truncated"),
            (lambda b: b"XXXX" + b[4:], "magic"),
            (lambda b: b[:4] + b"\x09\x00" + b[6:], "version"),
            (lambda b: b[:-8], "expected"),
        ],
    )
    def test_corrupt(self, tmp_path, mutate, msg):
        p = tmp_path / "bad.bin"
        p.write_bytes(mutate(det.model_to_bytes(DetectorModel.zeros())))
        with pytest.raises(CorruptFileError, match=msg):
            det.load_model(p)

    def test_missing(self, tmp_path):
        with pytest.raises(CorruptFileError):
            det.load_model(tmp_path / "none.bin")
