import hashlib

import numpy as np
import pytest

from pointtrack import attention
from pointtrack import model as M
from pointtrack.errors import ConfigError, ShapeError, ValidationError
from pointtrack.numerics import MlpParams, mlp, relative_error
from pointtrack.sampling import FeaturePyramid

TINY = dict(d=8, n_heads=2, n_points=2, n_levels=2, n_encoder=1, n_decoder=2, window=3,
            image_size=(16, 16))


def tiny(**kw):
    return M.ModelConfig(**{**TINY, **kw})


def digest(*arrays):
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


def hand_bilinear(grid, x, y):
    """grid (H, W, C); clamp-to-edge bilinear at normalized (x, y)."""
    H, W, _ = grid.shape
    u, v = x * W - 0.5, y * H - 0.5
    i0, j0 = int(np.floor(v)), int(np.floor(u))
    fy, fx = v - i0, u - j0
    out = 0
    for di, wy in ((0, 1 - fy), (1, fy)):
        for dj, wx in ((0, 1 - fx), (1, fx)):
            i = min(max(i0 + di, 0), H - 1)
            j = min(max(j0 + dj, 0), W - 1)
            out = out + wy * wx * grid[i, j]
    return out


def hand_ln(x, g, b):
    mu = x.mean()
    var = ((x - mu) ** 2).mean()
    return (x - mu) / np.sqrt(var + 1e-5) * g + b


def hand_mlp(p: MlpParams, x):
    for i, (w, b) in enumerate(zip(p.weights, p.biases)):
        x = w @ x + b
        if i < len(p.weights) - 1:
            x = np.maximum(x, 0)
    return x


class TestConfig:
    def test_defaults(self):
        cfg = M.ModelConfig()
        assert (cfg.d, cfg.n_heads, cfg.n_points, cfg.n_levels) == (64, 4, 4, 2)
        assert (cfg.n_decoder, cfg.n_encoder, cfg.window, cfg.image_size) == (5, 2, 8, (64, 64))

    @pytest.mark.parametrize("bad", [dict(mode="both"), dict(n_decoder=0), dict(d=30),
                                     dict(n_levels=3)])
    def test_rejected(self, bad):
        with pytest.raises(ConfigError):
            M.ModelConfig(**bad)

    def test_roundtrip(self, tmp_path):
        cfg = tiny(mode="cost_volume_baseline", temporal_attn=False)
        cfg.save(tmp_path / "model.cfg")
        assert M.ModelConfig.load(tmp_path / "model.cfg") == cfg


class TestPyramid:
    def test_shapes(self, rng):
        cfg = M.ModelConfig(n_encoder=1)
        P = M.init_params(cfg)
        pyr = M.build_feature_pyramid(rng.random((3, 64, 64)), P, cfg)
        assert [m.data.shape for m in pyr.maps] == [(64, 16, 16), (64, 8, 8)]
        assert [m.stride for m in pyr.maps] == [4, 8]

    def test_no_encoder_is_backbone(self, rng):
        cfg = tiny(n_encoder=0)
        P = M.init_params(cfg, dtype=np.float64)
        img = rng.random((3, 16, 16))
        raw, _ = M.backbone_forward(img[None], P, cfg)
        pyr = M.build_feature_pyramid(img, P, cfg)
        for m, r in zip(pyr.maps, raw):
            np.testing.assert_array_equal(m.data, r[0])

    def test_indivisible(self, rng):
        cfg = tiny()
        with pytest.raises(ShapeError):
            M.build_feature_pyramid(rng.random((3, 20, 16)), M.init_params(cfg), cfg)

    def test_deterministic(self, rng):
        cfg = tiny()
        img = rng.random((3, 16, 16))
        a = M.build_feature_pyramid(img, M.init_params(cfg, seed=5), cfg)
        b = M.build_feature_pyramid(img, M.init_params(cfg, seed=5), cfg)
        assert digest(*(m.data for m in a.maps)) == digest(*(m.data for m in b.maps))

    def test_conv_matches_direct_sum(self, rng):
        x = rng.normal(size=(1, 2, 4, 4))
        w = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        y, _ = M.conv3x3_s2_forward(x, w, b)
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        for o in range(3):
            for i in range(2):
                for j in range(2):
                    ref = (w[o] * xp[0, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3]).sum() + b[o]
                    assert y[0, o, i, j] == pytest.approx(ref, rel=1e-12)


class TestPointQueries:
    def pyrs(self, rng, cfg, P, n=2):
        return [M.build_feature_pyramid(rng.random((3, 16, 16)), P, cfg) for _ in range(n)]

    def test_empty(self, rng):
        cfg = tiny()
        P = M.init_params(cfg, dtype=np.float64)
        q = M.prepare_point_queries(self.pyrs(rng, cfg, P), [], P, cfg)
        assert q.f.shape == (2, 0, 8) and q.l.shape == (2, 0, 2)

    def test_identical_starts(self, rng):
        cfg = tiny()
        P = M.init_params(cfg, dtype=np.float64)
        q = M.prepare_point_queries(self.pyrs(rng, cfg, P), [(1, (0.3, 0.6)), (1, (0.3, 0.6))], P, cfg)
        np.testing.assert_array_equal(q.f[:, 0], q.f[:, 1])
        np.testing.assert_array_equal(q.emerged, [[False, False], [True, True]])

    def test_constant_pyramid(self, rng):
        cfg = tiny()
        P = M.init_params(cfg, dtype=np.float64)
        c = rng.normal(size=(2, 8))
        pyr = FeaturePyramid.from_arrays([np.broadcast_to(c[0][:, None, None], (8, 4, 4)).copy(),
                                          np.broadcast_to(c[1][:, None, None], (8, 2, 2)).copy()],
                                         (4, 8), (16, 16))
        expected = mlp(MlpParams.from_flat(P, "qinit"), c.reshape(-1))
        for xy in rng.random((5, 2)):
            q = M.prepare_point_queries([pyr], [(0, xy)], P, cfg)
            np.testing.assert_allclose(q.f[0, 0], expected, rtol=1e-12)

    def test_start_out_of_range(self, rng):
        cfg = tiny()
        P = M.init_params(cfg)
        with pytest.raises(ValidationError):
            M.prepare_point_queries(self.pyrs(rng, cfg, P), [(2, (0.5, 0.5))], P, cfg)


class TestDecoderLayer:
    def test_quiet_layer_only_runs_ffn(self, rng):
        cfg = tiny(self_attn=False, temporal_attn=False, mode="no_position_update")
        P = M.init_params(cfg, dtype=np.float64)
        P["dec.0.ca.output_w"][...] = 0
        P["dec.0.ca.output_b"][...] = 0
        pyr = M.build_feature_pyramid(rng.random((3, 16, 16)), P, cfg)
        q = M.PointQueries(rng.normal(size=(1, 3, 8)), rng.random((1, 3, 2)), np.ones((1, 3), bool))
        out, rec = M.decoder_layer(q, [pyr], P, cfg, 0)
        np.testing.assert_array_equal(out.l, q.l)
        np.testing.assert_array_equal(rec.apu_positions, q.l)
        y = np.stack([hand_ln(f, P["dec.0.ln_ff.g"], P["dec.0.ln_ff.b"]) for f in q.f[0]])
        ffn = np.stack([hand_mlp(MlpParams.from_flat(P, "dec.0.ffn"), v) for v in y])
        np.testing.assert_allclose(out.f[0], q.f[0] + ffn, rtol=1e-12)

    def test_shapes_preserved(self, rng):
        cfg = tiny(n_decoder=3)
        P = M.init_params(cfg, dtype=np.float64)
        pyrs = [M.build_feature_pyramid(rng.random((3, 16, 16)), P, cfg) for _ in range(3)]
        q = M.PointQueries(rng.normal(size=(3, 4, 8)), rng.random((3, 4, 2)), np.ones((3, 4), bool))
        for j in range(3):
            q, _ = M.decoder_layer(q, pyrs, P, cfg, j)
            assert q.f.shape == (3, 4, 8) and q.l.shape == (3, 4, 2)

    def test_matches_hand_trace(self, rng):
        cfg = M.ModelConfig(d=4, n_heads=1, n_points=2, n_levels=1, n_encoder=0, n_decoder=1,
                            window=1, image_size=(16, 16), self_attn=False, temporal_attn=False)
        P = M.init_params(cfg, seed=2, dtype=np.float64)
        for k in P:
            if k.startswith("dec.0"):
                P[k] = rng.normal(size=P[k].shape) * 0.5
        P["dec.0.ca.offset_w"] *= 0.1
        fmap = rng.normal(size=(4, 4, 4))
        pyr = FeaturePyramid.from_arrays([fmap], (4,), (16, 16))
        f = rng.normal(size=4)
        l = np.array([0.41, 0.57])
        q = M.PointQueries(f[None, None], l[None, None], np.ones((1, 1), bool))
        out, rec = M.decoder_layer(q, [pyr], P, cfg, 0)

        g = lambda n: P[f"dec.0.{n}"]
        y = hand_ln(f, g("ln_ca.g"), g("ln_ca.b"))
        off = (g("ca.offset_w") @ y + g("ca.offset_b")).reshape(2, 2)
        value = np.einsum("oc,chw->hwo", g("ca.value_w"), fmap) + g("ca.value_b")
        s = [hand_bilinear(value, *(l + off[k])) for k in range(2)]
        qv = g("ca.query_w") @ y + g("ca.query_b")
        logit = np.array([qv @ s[k] for k in range(2)])
        e = np.exp(logit / 2 - (logit / 2).max())
        w = e / e.sum()
        f1 = f + g("ca.output_w") @ (w[0] * s[0] + w[1] * s[1]) + g("ca.output_b")
        z = logit / 2
        z = z + hand_mlp(MlpParams.from_flat(P, "dec.0.ca.dis"), z)
        e = np.exp(z - z.max())
        wp = e / e.sum()
        l_apu = l + wp[0] * off[0] + wp[1] * off[1]
        f2 = f1 + hand_mlp(MlpParams.from_flat(P, "dec.0.ffn"), hand_ln(f1, g("ln_ff.g"), g("ln_ff.b")))
        l_out = l_apu + hand_mlp(MlpParams.from_flat(P, "dec.0.pos"), hand_ln(f2, g("ln_pos.g"), g("ln_pos.b")))

        np.testing.assert_allclose(rec.apu_positions[0, 0], l_apu, rtol=1e-12)
        np.testing.assert_allclose(out.f[0, 0], f2, rtol=1e-12)
        np.testing.assert_allclose(out.l[0, 0], l_out, rtol=1e-12)


class TestVisibilityHead:
    @pytest.mark.parametrize("bias,prob", [(0.0, 0.5), (20.0, 1.0), (-20.0, 0.0)])
    def test_scripted_logit(self, rng, bias, prob):
        cfg = tiny()
        P = M.init_params(cfg, dtype=np.float64)
        P["vis.mlp.1.W"][...] = 0
        P["vis.mlp.1.b"][...] = bias
        p = M.visibility_head(rng.normal(size=(3, 8)), P)
        np.testing.assert_allclose(p, prob, atol=1e-8)
        assert np.all((p >= 0.5) == (bias >= 0))


class TestForwardWindow:
    def run(self, rng, cfg, n_frames, seeds=None, P=None):
        P = P if P is not None else M.init_params(cfg, seed=1, dtype=np.float64)
        frames = rng.random((n_frames, 3, 16, 16))
        seeds = seeds or M.QuerySeeds.starts([0, 0, 0], [[0.3, 0.4], [0.6, 0.55], [0.5, 0.7]])
        return M.forward_window(frames, seeds, P, cfg), frames, seeds, P

    def test_single_frame(self, rng):
        out, *_ = self.run(rng, tiny(), 1)
        assert out.positions.shape == (2, 1, 3, 2)
        assert out.vis_logits.shape == (1, 3)

    def test_layer_bookkeeping(self, rng):
        cfg = tiny(n_decoder=4)
        out, *_ = self.run(rng, cfg, 3)
        assert out.n_layers == 4 == len(out.records)
        np.testing.assert_array_equal(out.final_positions, out.records[-1].positions)

    def test_bit_identical(self, rng):
        cfg = tiny()
        a, frames, seeds, P = self.run(rng, cfg, 3)
        b = M.forward_window(frames, seeds, M.init_params(cfg, seed=1, dtype=np.float64), cfg)
        assert digest(a.positions, a.apu_positions, a.features, a.vis_logits) == \
            digest(b.positions, b.apu_positions, b.features, b.vis_logits)

    def test_too_many_frames(self, rng):
        with pytest.raises(ShapeError):
            self.run(rng, tiny(window=2), 3)

    def test_frames_independent_without_temporal_attention(self, rng):
        cfg = tiny(temporal_attn=False)
        seeds = M.QuerySeeds.handoff(rng.normal(size=(3, 8)), rng.random((3, 2)))
        out, frames, seeds, P = self.run(rng, cfg, 3, seeds=seeds)
        perm = [2, 0, 1]
        out2 = M.forward_window(frames[perm], seeds, P, cfg)
        np.testing.assert_allclose(out2.positions, out.positions[:, perm], rtol=1e-12, atol=1e-14)
        np.testing.assert_allclose(out2.vis_logits, out.vis_logits[perm], rtol=1e-12, atol=1e-14)

    def test_apu_mode_never_touches_cost_volume(self, rng, monkeypatch):
        def forbidden(*a, **k):
            raise AssertionError("cost-volume path reached")

        for name in ("aggregate_cost_forward", "aggregate_cost_baseline", "cost_volume_forward",
                     "compute_cost_volume"):
            monkeypatch.setattr(attention, name, forbidden)
        self.run(rng, tiny(mode="apu"), 3)
        with pytest.raises(AssertionError):
            self.run(rng, tiny(mode="cost_volume_baseline"), 3)

    def test_zero_points(self, rng):
        out, *_ = self.run(rng, tiny(), 2, seeds=M.QuerySeeds.starts([], np.zeros((0, 2))))
        assert out.positions.shape == (2, 2, 0, 2)


@pytest.mark.parametrize("overrides", [
    dict(mode="apu"),
    dict(mode="cost_volume_baseline", key_aware=False),
    dict(mode="no_position_update", n_levels=1, n_encoder=2),
])
def test_window_gradients(rng, overrides):
    """End-to-end finite differences on sampled entries of every parameter."""
    cfg = tiny(**overrides)
    P = M.init_params(cfg, seed=3, dtype=np.float64)
    for k in P:  # wake the zero-initialised heads
        if k.endswith((".pos.1.W", "dis.1.W", ".cv.1.W")):
            P[k] = rng.normal(size=P[k].shape) * 0.1
    frames = rng.random((3, 3, 16, 16))
    seeds = M.QuerySeeds.starts([0, 1, 0], [[0.3, 0.4], [0.6, 0.55], [0.47, 0.7]])
    out = M.forward_window(frames, seeds, P, cfg, keep_cache=True)
    gp, ga = rng.normal(size=out.positions.shape), rng.normal(size=out.apu_positions.shape)
    gv = rng.normal(size=out.vis_logits.shape)

    def loss():
        o = M.forward_window(frames, seeds, P, cfg)
        return float((o.positions * gp).sum() + (o.apu_positions * ga).sum() + (o.vis_logits * gv).sum())

    G = M.backward_window(out, gp, ga, gv, P, cfg)
    assert set(G) == set(P)
    eps = 1e-6
    for k, v in P.items():
        picks = {tuple(rng.integers(0, s) for s in v.shape) for _ in range(3)}
        num, ana = [], []
        for i in picks:
            old = v[i]
            v[i] = old + eps
            a = loss()
            v[i] = old - eps
            b = loss()
            v[i] = old
            num.append((a - b) / (2 * eps))
            ana.append(G[k][i])
        num, ana = np.array(num), np.array(ana)
        if max(np.abs(num).max(), np.abs(ana).max()) < 1e-7:
            continue  # both vanish (e.g. key biases); nothing to compare
        assert relative_error(ana, num) < 1e-4, k
