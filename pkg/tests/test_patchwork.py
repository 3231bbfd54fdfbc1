import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from epinet import layers as L
from epinet import patchwork as P
from epinet.errors import ConfigError, DimensionError, EpinetError, PackingError, RangeError
from epinet.net import build_network, class_t
from oracles import single_level_crops


def small_net(seed=0, dtype=np.float32):
    """Window 11, stride 4: epitomic(W3, V4, s2) -> ReLU -> epitomic(W3, V4, s2) -> FC -> FC."""
    blocks = [("epitomic", dict(in_channels=1, out_channels=3, filter_size=3, epitome_size=4,
                                input_stride=2)),
              ("relu", dict(channels=3)),
              ("epitomic", dict(in_channels=3, out_channels=4, filter_size=3, epitome_size=4,
                                input_stride=2)),
              ("relu", dict(channels=4)),
              ("fc", dict(in_shape=(4, 2, 2), out_features=5)),
              ("relu", dict(channels=5)),
              ("fc", dict(in_shape=(5,), out_features=3))]
    net = build_network(blocks, (1, 11, 11), 3, seed=seed, dtype=dtype)
    rng = np.random.default_rng(seed)
    for _, w in net.named_params():
        w[...] = rng.standard_normal(w.shape).astype(dtype)
    return net


def pyramid_patchwork(seed=0, sizes=(30, 26, 22, 18, 15, 12), gutter=3, stride=4):
    rng = np.random.default_rng(seed)
    img = rng.standard_normal((1, sizes[0], sizes[0])).astype(np.float32)
    scales = [s / sizes[0] for s in sizes]
    pyr = P.build_pyramid(img, scales)
    return P.pack_patchwork(pyr, gutter=gutter, stride=stride)


class TestPyramid:
    def test_single_level_identity(self):
        img = np.random.default_rng(0).standard_normal((3, 9, 7))
        pyr = P.build_pyramid(img, [1.0])
        assert np.array_equal(pyr.levels[0].image, img)

    def test_constant_downscale(self):
        img = np.full((2, 8, 8), 0.7)
        out = P.build_pyramid(img, [0.5]).levels[0].image
        assert out.shape == (2, 4, 4) and np.allclose(out, 0.7)

    def test_checkerboard_hand_computed(self):
        board = (np.indices((4, 4)).sum(axis=0) % 2).astype(float)[None]
        out = P.resize_bilinear(board, 2, 2)
        assert np.allclose(out, 0.5)

    def test_scales_strictly_decreasing(self):
        with pytest.raises(ConfigError):
            P.build_pyramid(np.zeros((1, 8, 8)), [1.0, 1.0])

    def test_degenerate_level(self):
        with pytest.raises(DimensionError):
            P.build_pyramid(np.zeros((1, 8, 8)), [1.0, 0.01])

    def test_subcrop_rejected_by_default(self):
        with pytest.raises(DimensionError) as e:
            P.build_pyramid(np.zeros((1, 20, 20)), [1.0, 0.5], min_size=16)
        assert e.value.code == "subcrop"

    def test_subcrop_skip_warns(self):
        pyr = P.build_pyramid(np.zeros((1, 20, 20)), [1.0, 0.5], min_size=16,
                              allow_subcrop="skip")
        assert len(pyr.levels) == 1 and pyr.warnings

    def test_aspect_scales_rows_only(self):
        pyr = P.build_pyramid(np.zeros((1, 20, 30)), [1.0], aspect=0.5)
        assert pyr.levels[0].shape == (10, 30)

    def test_square_levels(self):
        pyr = P.build_pyramid(np.zeros((1, 20, 30)), [1.0, 0.5], square=True)
        assert [lv.shape for lv in pyr.levels] == [(30, 30), (15, 15)]


def paper_pyramid():
    sizes = (400, 300, 220, 160, 120, 90)
    levels = [P.Level(s / 400, np.zeros((1, s, s), np.float32)) for s in sizes]
    return P.Pyramid(levels, (400, 400))


class TestPacking:
    def test_single_level_gutter(self):
        pyr = P.Pyramid([P.Level(1.0, np.zeros((1, 400, 400)))], (400, 400))
        pw = P.pack_patchwork(pyr, gutter=8)
        assert pw.shape == (416, 416)
        assert (pw.placements[0].x, pw.placements[0].y) == (8, 8)

    def test_paper_six_squares_fit_720(self):
        pw = P.pack_patchwork(paper_pyramid(), gutter=0)
        h, w = pw.shape
        assert h <= 720 and w <= 720
        self._assert_disjoint(pw)

    def test_deterministic(self):
        a = P.pack_patchwork(paper_pyramid(), gutter=4)
        b = P.pack_patchwork(paper_pyramid(), gutter=4)
        assert a.placements == b.placements

    def test_stride_rounding(self):
        pw = pyramid_patchwork(stride=8)
        assert pw.shape[0] % 8 == 0 and pw.shape[1] % 8 == 0

    def test_overflow_reports_required_size(self):
        with pytest.raises(PackingError) as e:
            P.pack_patchwork(paper_pyramid(), gutter=0, max_size=(500, 500))
        h, w = e.value.required
        assert max(h, w) > 500

    def test_gutters_hold_fill_and_sentinel(self):
        pw = P.pack_patchwork(P.build_pyramid(np.ones((1, 10, 10)), [1.0, 0.6]), gutter=2,
                              fill=-5.0)
        gut = pw.level_map < 0
        assert gut.any() and np.all(pw.canvas[0][gut] == -5.0)
        y, x = np.argwhere(gut)[0]
        assert P.map_canvas_to_image(pw, int(x), int(y)) is P.SENTINEL

    def test_manifest(self):
        pw = P.pack_patchwork(P.Pyramid([P.Level(1.0, np.zeros((1, 400, 400)))], (400, 400)),
                              gutter=8)
        assert pw.manifest() == "level=0 scale=1 x=8 y=8 w=400 h=400\n"

    @staticmethod
    def _assert_disjoint(pw):
        h, w = pw.shape
        cover = np.zeros((h, w), int)
        for p in pw.placements:
            assert p.x >= 0 and p.y >= 0 and p.x + p.w <= w and p.y + p.h <= h
            cover[p.y:p.y + p.h, p.x:p.x + p.w] += 1
        assert cover.max() == 1

    @settings(max_examples=40, deadline=None)
    @given(sizes=st.lists(st.tuples(st.integers(1, 40), st.integers(1, 40)), min_size=1,
                          max_size=6),
           gutter=st.integers(0, 5), stride=st.integers(1, 4))
    def test_random_levels_disjoint_round_trip(self, sizes, gutter, stride):
        levels = [P.Level(1.0 - 0.1 * i, np.zeros((1, h, w))) for i, (h, w) in enumerate(sizes)]
        pw = P.pack_patchwork(P.Pyramid(levels, sizes[0]), gutter=gutter, stride=stride)
        self._assert_disjoint(pw)
        for p in pw.placements:
            assert p.x >= gutter and p.y >= gutter
            for (lx, ly) in [(0, 0), (p.w - 1, p.h - 1), (p.w // 2, p.h // 3)]:
                cx, cy = P.map_image_to_canvas(pw, lx, ly, pw.scales[p.level])
                assert P.map_canvas_to_image(pw, cx, cy) == (lx, ly, pw.scales[p.level])


class TestMapping:
    def test_origin(self):
        pw = pyramid_patchwork()
        for p in pw.placements:
            assert P.map_canvas_to_image(pw, p.x, p.y) == (0, 0, pw.scales[p.level])

    def test_round_trip_random(self):
        pw = pyramid_patchwork()
        rng = np.random.default_rng(0)
        inside = np.argwhere(pw.level_map >= 0)
        for y, x in inside[rng.choice(len(inside), 1000)]:
            lx, ly, s = P.map_canvas_to_image(pw, int(x), int(y))
            assert P.map_image_to_canvas(pw, lx, ly, s) == (x, y)

    def test_out_of_range(self):
        pw = pyramid_patchwork()
        with pytest.raises(RangeError):
            P.map_canvas_to_image(pw, -1, 0)
        with pytest.raises(RangeError):
            P.map_canvas_to_image(pw, 0, pw.shape[0])
        with pytest.raises(RangeError):
            P.map_image_to_canvas(pw, 999, 0, 1.0)

    def test_canvas_point_to_image(self):
        pw = pyramid_patchwork()
        p = pw.placement_of(1)
        fy, fx = pw.pyramid.factors(1)
        x, y, lev = P.canvas_point_to_image(pw, p.x + 5.0, p.y + 2.5)
        assert lev == 1 and np.isclose(x, 5 / fx) and np.isclose(y, 2.5 / fy)


class TestConvolutionalize:
    def test_crop_sized_equal(self):
        net = small_net()
        conv = P.convolutionalize_fc(net)
        x = np.random.default_rng(1).standard_normal((3, 1, 11, 11)).astype(np.float32)
        a = net.forward(x)
        b = conv.forward(x)
        assert b.shape == (3, 3, 1, 1)
        assert np.allclose(a, b[:, :, 0, 0], rtol=0, atol=1e-6)

    def test_one_more_stride(self):
        conv = P.convolutionalize_fc(small_net())
        y = conv.forward(np.zeros((1, 1, 15, 19), np.float32))
        assert y.shape[2:] == (2, 3)

    def test_crop_enumeration(self):
        net = small_net(seed=2, dtype=np.float64)
        conv = P.convolutionalize_fc(net)
        x = np.random.default_rng(3).standard_normal((1, 1, 27, 23))
        dense = conv.forward(x)[0]
        for r in range(dense.shape[1]):
            for c in range(dense.shape[2]):
                if 4 * r + 11 > 27 or 4 * c + 11 > 23:
                    continue
                ref = net.forward(x[:, :, 4 * r:4 * r + 11, 4 * c:4 * c + 11])[0]
                assert np.allclose(dense[:, r, c], ref, rtol=0, atol=1e-10)

    def test_original_untouched(self):
        net = small_net()
        before = {k: v.copy() for k, v in net.named_params()}
        conv = P.convolutionalize_fc(net)
        for _, w in conv.named_params():
            w += 1
        assert all(np.array_equal(before[k], v) for k, v in net.named_params())

    def test_unknown_geometry(self):
        from epinet.net import Network
        net = Network([L.FullyConnected((4,), 2)], (4,), 2)
        with pytest.raises(EpinetError) as e:
            P.convolutionalize_fc(net)
        assert e.value.code == "convert"

    def test_class_t_converts(self):
        conv = P.convolutionalize_fc(class_t())
        assert conv.convolutional and conv.stride == 4


class TestMilHead:
    def test_single_position(self):
        m = np.array([[[2.0]], [[-1.0]]])
        best, pos = P.mil_max_head(m)
        assert best.tolist() == [2.0, -1.0] and pos.tolist() == [[0, 0], [0, 0]]

    def test_tie_first_row_major(self):
        m = np.zeros((1, 2, 3))
        m[0, 0, 2] = m[0, 1, 0] = 5.0
        _, pos = P.mil_max_head(m)
        assert pos.tolist() == [[0, 2]]

    def test_exhaustive_scan(self):
        rng = np.random.default_rng(0)
        m = rng.standard_normal((4, 5, 6))
        mask = rng.random((5, 6)) < 0.6
        best, pos = P.mil_max_head(m, mask)
        for c in range(4):
            vals = [(m[c, r, q], r, q) for r in range(5) for q in range(6) if mask[r, q]]
            top = max(v for v, _, _ in vals)
            first = next((r, q) for v, r, q in vals if v == top)
            assert best[c] == top and tuple(pos[c]) == first

    def test_all_masked(self):
        with pytest.raises(EpinetError) as e:
            P.mil_max_head(np.zeros((1, 2, 2)), np.zeros((2, 2), bool))
        assert e.value.code == "masked"

    def test_backward_routes_to_winner(self):
        g = P.mil_max_backward(np.array([1.5, -2.0]), np.array([[0, 1], [1, 0]]), (2, 2))
        assert g[0].tolist() == [[0, 1.5], [0, 0]] and g[1].tolist() == [[0, 0], [-2.0, 0]]

    def test_patchwork_consistency(self):
        net = small_net(seed=4)
        conv = P.convolutionalize_fc(net)
        pw = pyramid_patchwork(seed=5)
        maps = conv.forward(pw.canvas[None])[0]
        mask = P.valid_positions(pw, 11, 4, maps.shape[1:])
        assert np.array_equal(mask, single_level_crops(pw, 11, 4, maps.shape[1:]))
        best, _ = P.mil_max_head(maps, mask)
        crops = np.stack([pw.canvas[:, 4 * r:4 * r + 11, 4 * c:4 * c + 11]
                          for r, c in np.argwhere(mask)])
        ref = net.forward(crops).max(axis=0)
        assert np.allclose(best, ref, rtol=0, atol=1e-5)


class TestBagLoss:
    def _xent(self, s, y):
        z = s - s.max()
        return float(np.log(np.exp(z).sum()) - z[y])

    def test_k1_modes_agree(self):
        s = np.random.default_rng(0).standard_normal((1, 4))
        vals = [P.bag_loss(s, 2, m) for m in P.BAG_MODES]
        for loss, g in vals[1:]:
            assert np.isclose(loss, vals[0][0]) and np.allclose(g, vals[0][1])

    def test_mil_dominant_instance(self):
        s = np.full((3, 4), -50.0)
        s[1] = [1.0, 2.0, 0.5, -1.0]
        loss, _ = P.bag_loss(s, 1, "mil")
        assert np.isclose(loss, self._xent(s[1], 1))

    @pytest.mark.parametrize("mode", P.BAG_MODES)
    def test_direct_formula(self, mode):
        rng = np.random.default_rng(1)
        s = rng.standard_normal((5, 4))
        loss, g = P.bag_loss(s, 3, mode)
        if mode == "sum":
            ref = sum(self._xent(r, 3) for r in s)
        elif mode == "average":
            ref = self._xent(s.mean(axis=0), 3)
        else:
            ref = self._xent(s.max(axis=0), 3)
            winners = np.zeros_like(s, bool)
            winners[s.argmax(axis=0), np.arange(4)] = True
            assert not g[~winners].any()
        assert np.isclose(loss, ref, rtol=1e-12)

    def test_empty_bag(self):
        with pytest.raises(DimensionError):
            P.bag_loss(np.zeros((0, 3)), 0, "mil")

    def test_unknown_mode(self):
        with pytest.raises(ConfigError):
            P.bag_loss(np.zeros((1, 3)), 0, "median")

    def test_mil_monotone_under_weaker_instances(self):
        rng = np.random.default_rng(2)
        s = rng.standard_normal((3, 4))
        weaker = s.min(axis=0, keepdims=True) - 1.0
        l0, _ = P.bag_loss(s, 0, "mil")
        l1, _ = P.bag_loss(np.vstack([s, weaker]), 0, "mil")
        assert l1 == l0


class TestLocalize:
    def _pw(self):
        img = np.zeros((1, 40, 40), np.float32)
        return P.pack_patchwork(P.build_pyramid(img, [1.0, 0.5]), gutter=4, stride=4)

    def test_full_frame_prior(self):
        pw = self._pw()
        box = P.localize(pw, (3, 2), P.BoxPrior(1.0, 1.0), 8, 4)
        assert box == (0.0, 0.0, 40.0, 40.0)

    def test_centered_half_box(self):
        pw = self._pw()
        p = pw.placement_of(0)
        # window of 8 centred on level pixel (20, 20): origin (16, 16)
        pos = ((p.y + 16) // 4, (p.x + 16) // 4)
        assert (p.y + 16) % 4 == 0 and (p.x + 16) % 4 == 0
        box = P.localize(pw, pos, P.BoxPrior(0.5, 0.5), 8, 4)
        assert box == (10.0, 10.0, 20.0, 20.0)

    def test_per_class_prior(self):
        pw = self._pw()
        priors = {0: P.BoxPrior(1.0, 1.0), 1: P.BoxPrior(0.25, 0.25)}
        assert P.localize(pw, (3, 2), priors, 8, 4, label=1)[2] == 10.0

    def test_window_prior_fit_and_apply(self):
        windows = [(0, 0, 10, 10), (5, 5, 20, 20)]
        boxes = [(2, 2, 5, 5), (10, 10, 10, 10)]
        prior = P.fit_box_prior(windows, boxes)
        assert np.isclose(prior.width, 0.5) and prior.relative == "window"

    def test_gutter_position(self):
        pw = self._pw()
        with pytest.raises(EpinetError) as e:
            P.localize(pw, (0, 0), P.BoxPrior(), 8, 4)
        assert e.value.code == "sentinel"


class TestMilTraining:
    def test_loss_decreases_and_predicts(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((12, 1, 16, 16)).astype(np.float32)
        y = rng.integers(0, 3, 12)
        from epinet.net import TrainConfig
        conv = P.convolutionalize_fc(small_net(seed=1))
        for _, w in conv.named_params():
            w *= 0.3
        hist = []
        scorer = P.train_patchwork(conv, x, y, TrainConfig(lr=0.01, batch_size=4, seed=0),
                                   [1.0, 0.75], gutter=2, epochs=4,
                                   callback=lambda r: hist.append(r["loss"]))
        assert hist[-1] < hist[0]
        probs = P.predict_patchwork(scorer, x)
        assert probs.shape == (12, 3) and np.allclose(probs.sum(axis=1), 1)
