import numpy as np
import pytest

from mtsa import numkit as nk
from mtsa.attn_ref import ScaleFns, TsaParams, tsa_naive
from mtsa.masks import make_mask
from mtsa.mtsa_fast import (
    AttentionConfig, ContainerError, MtsaParams, default_mask_assignment, load_params,
    mtsa_forward, normalized_token2token, sample_dropout, save_params, tsa_head_fast,
)


def biased_head(rng, d_e, d_i, d_h, d_a):
    p = TsaParams.init(d_e, d_i, d_h, d_a, rng)
    p.b_s1 = rng.normal(0, 0.5, p.b_s1.shape)
    p.b_s2 = rng.normal(0, 0.5, p.b_s2.shape)
    return p


def naive_composition(x, params: MtsaParams, fns):
    n = x.shape[-1]
    heads = [tsa_naive(x, make_mask(kind, n), p, fns)
             for kind, p in zip(params.mask_assignment, params.heads)]
    return params.W_o @ np.concatenate(heads, axis=-2)


class TestConfig:
    @pytest.mark.parametrize("field,value", [("d_e", 0), ("h", 0), ("p_ad", 0.0), ("p_ad", 1.5)])
    def test_invalid(self, field, value):
        kwargs = dict(d_e=2, d_i=2, d_h=2, d_a=2)
        kwargs[field] = value
        with pytest.raises(nk.ConfigError):
            AttentionConfig(**kwargs)

    def test_stabilize_defaults(self):
        assert AttentionConfig(1, 1, 1, 1).use_stabilize
        both_log = ScaleFns("log_sigmoid", "log_sigmoid")
        assert not AttentionConfig(1, 1, 1, 1, fns=both_log).use_stabilize
        assert AttentionConfig(1, 1, 1, 1, fns=both_log, stabilize=True).use_stabilize

    def test_json_round_trip(self):
        cfg = AttentionConfig(3, 4, 5, 6, h=2, fns=ScaleFns("identity", "log_sigmoid", "elu"), p_ad=0.5)
        assert AttentionConfig.from_json(cfg.to_json()) == cfg

    @pytest.mark.parametrize("h,expected", [(1, ["forward"]), (2, ["forward", "backward"]),
                                            (3, ["forward", "forward", "backward"])])
    def test_default_assignment(self, h, expected):
        assert default_mask_assignment(h) == expected

    def test_params_shape_checks(self, rng):
        cfg = AttentionConfig(3, 2, 2, 2, h=2)
        p = MtsaParams.init(cfg, rng)
        with pytest.raises(nk.DimensionError):
            MtsaParams(p.heads, np.eye(3))
        with pytest.raises(nk.DimensionError):
            MtsaParams(p.heads, p.W_o, ["forward"])


class TestHeadFast:
    def test_single_token(self, rng):
        p = biased_head(rng, 4, 3, 2, 3)
        x = rng.standard_normal((4, 1))
        np.testing.assert_allclose(tsa_head_fast(x, make_mask("none", 1), p, ScaleFns()),
                                   p.W_t3 @ x, atol=1e-15)

    @pytest.mark.parametrize("kind,col", [("forward", 0), ("backward", -1)])
    def test_fully_masked_column_zero(self, rng, kind, col):
        p = biased_head(rng, 4, 3, 2, 3)
        out = tsa_head_fast(rng.standard_normal((4, 5)), make_mask(kind, 5), p, ScaleFns())
        assert not out[:, col].any()

    def test_matches_naive_example(self, rng):
        p = biased_head(rng, 5, 3, 4, 3)
        x = rng.standard_normal((5, 6))
        mask = make_mask("forward", 6)
        fns = ScaleFns("log_sigmoid", "identity")
        diff = np.abs(tsa_head_fast(x, mask, p, fns) - tsa_naive(x, mask, p, fns)).max()
        assert diff <= 1e-9

    @pytest.mark.parametrize("sigma_t", ["log_sigmoid", "identity"])
    @pytest.mark.parametrize("sigma_s", ["log_sigmoid", "identity"])
    @pytest.mark.parametrize("kind", ["forward", "backward", "none", "window:2"])
    def test_matches_naive_batched(self, rng, sigma_t, sigma_s, kind):
        p = biased_head(rng, 5, 4, 3, 2)
        x = rng.standard_normal((3, 5, 9))
        mask = make_mask(kind, 9)
        fns = ScaleFns(sigma_t, sigma_s)
        np.testing.assert_allclose(tsa_head_fast(x, mask, p, fns), tsa_naive(x, mask, p, fns),
                                   rtol=0, atol=1e-9)

    def test_stabilisation_invariance(self, rng):
        for trial in range(20):
            p = biased_head(rng, 6, 4, 5, 3)
            x = rng.standard_normal((6, 8)) * 1.5
            mask = make_mask(["forward", "backward", "none"][trial % 3], 8)
            for fns in (ScaleFns("log_sigmoid", "identity"), ScaleFns("identity", "identity"),
                        ScaleFns("log_sigmoid", "log_sigmoid")):
                on = tsa_head_fast(x, mask, p, fns, stabilize=True)
                off = tsa_head_fast(x, mask, p, fns, stabilize=False)
                assert np.abs(on - off).max() <= 1e-9

    def test_overflow_needs_stabilisation(self, rng):
        p = biased_head(rng, 2, 2, 2, 2)
        p.b_s2[:] = 800.0
        x = rng.standard_normal((2, 3))
        fns = ScaleFns("log_sigmoid", "identity")
        with pytest.raises(nk.NumericError):
            tsa_head_fast(x, make_mask("none", 3), p, fns, stabilize=False)
        out = tsa_head_fast(x, make_mask("none", 3), p, fns, stabilize=True)
        np.testing.assert_allclose(out, tsa_naive(x, make_mask("none", 3), p, fns), atol=1e-9)

    def test_shape_errors(self, rng):
        p = biased_head(rng, 4, 3, 2, 3)
        with pytest.raises(nk.DimensionError):
            tsa_head_fast(rng.standard_normal((3, 5)), make_mask("none", 5), p, ScaleFns())
        with pytest.raises(nk.DimensionError):
            tsa_head_fast(rng.standard_normal((4, 5)), make_mask("none", 4), p, ScaleFns())

    @pytest.mark.parametrize("n,d_i,d_h,d_a", [(1, 1, 1, 1), (16, 4, 8, 4), (64, 16, 64, 16), (96, 8, 2, 8)])
    def test_memory_bound(self, rng, n, d_i, d_h, d_a):
        p = biased_head(rng, 7, d_i, d_h, d_a)
        x = rng.standard_normal((7, n))
        fast = nk.AllocMeter()
        tsa_head_fast(x, make_mask("forward", n), p, ScaleFns(), kernel=nk.Kernel(meter=fast))
        assert fast.peak_floats <= 6 * (n * n + n * (d_i + d_h + d_a))
        naive = nk.AllocMeter()
        tsa_naive(x, make_mask("forward", n), p, ScaleFns(), naive)
        assert naive.peak_floats >= 2 * n * n * d_h

    def test_normalised_token2token_columns(self, rng):
        p = biased_head(rng, 4, 3, 2, 3)
        x = rng.standard_normal((4, 7)) * 3
        for kind in ("forward", "backward", "none"):
            mask = make_mask(kind, 7)
            w = normalized_token2token(x, mask, p, ScaleFns())
            assert w.min() >= 0 and w.max() <= 1
            live = mask.multiplicative.any(axis=0)
            assert np.all(np.abs(w.sum(axis=0)[live] - 1) <= 1e-12)
            assert np.all(w.sum(axis=0)[~live] == 0)


class TestMtsaForward:
    def test_single_head_identity_output(self, rng):
        cfg = AttentionConfig(4, 3, 2, 3, h=1)
        p = MtsaParams.init(cfg, rng, ["none"])
        p.W_o = np.eye(2)
        x = rng.standard_normal((4, 5))
        np.testing.assert_array_equal(mtsa_forward(x, p, cfg),
                                      tsa_head_fast(x, make_mask("none", 5), p.heads[0], cfg.fns))

    def test_fw_bw_single_token_is_zero(self, rng):
        cfg = AttentionConfig(4, 3, 2, 3, h=2)
        p = MtsaParams.init(cfg, rng)
        out = mtsa_forward(rng.standard_normal((4, 1)), p, cfg)
        assert out.shape == (4, 1) and not out.any()

    def test_matches_naive_composition(self, rng):
        cfg = AttentionConfig(4, 3, 2, 3, h=2)
        p = MtsaParams.init(cfg, rng)
        for head in p.heads:
            head.b_s1 = rng.normal(0, 0.5, head.b_s1.shape)
            head.b_s2 = rng.normal(0, 0.5, head.b_s2.shape)
        x = rng.standard_normal((4, 5))
        assert np.abs(mtsa_forward(x, p, cfg) - naive_composition(x, p, cfg.fns)).max() <= 1e-9

    @pytest.mark.parametrize("h", [1, 2, 4])
    def test_output_shape(self, rng, h):
        cfg = AttentionConfig(5, 3, 4, 2, h=h)
        p = MtsaParams.init(cfg, rng)
        assert mtsa_forward(rng.standard_normal((5, 6)), p, cfg).shape == (h * 4, 6)
        assert mtsa_forward(rng.standard_normal((3, 5, 6)), p, cfg).shape == (3, h * 4, 6)

    def test_parallel_heads_bitwise(self, rng):
        cfg = AttentionConfig(5, 3, 4, 2, h=4)
        p = MtsaParams.init(cfg, rng)
        x = rng.standard_normal((5, 12))
        np.testing.assert_array_equal(mtsa_forward(x, p, cfg), mtsa_forward(x, p, cfg, parallel=True))

    def test_single_precision(self, rng):
        cfg = AttentionConfig(5, 3, 4, 2, h=2, dtype="f32")
        p = MtsaParams.init(cfg, rng)
        x = rng.standard_normal((5, 9)).astype(np.float32)
        out = mtsa_forward(x, p, cfg)
        assert out.dtype == np.float32
        ref = naive_composition(x.astype(np.float64), p, cfg.fns)
        assert np.abs(out - ref).max() <= 1e-4 * max(np.abs(ref).max(), 1.0)

    @pytest.mark.parametrize("direction", ["forward", "backward"])
    def test_causality(self, rng, direction):
        cfg = AttentionConfig(4, 3, 3, 2, h=2)
        for _ in range(30):
            n = int(rng.integers(2, 10))
            p = MtsaParams.init(cfg, rng, [direction, direction])
            x = rng.standard_normal((4, n))
            j = int(rng.integers(0, n))
            hidden = range(j + 1, n) if direction == "forward" else range(0, j)
            if not hidden:
                continue
            i = int(rng.choice(list(hidden)))
            y = x.copy()
            y[:, i] += rng.standard_normal(4) * 3
            base, moved = mtsa_forward(x, p, cfg), mtsa_forward(y, p, cfg)
            assert np.abs(base[:, j] - moved[:, j]).max() <= 1e-12


class TestDropout:
    def test_full_keep_is_ones(self, rng):
        d = sample_dropout(AttentionConfig(2, 2, 3, 2), 4, rng)
        assert np.all(d.mask_X == 1) and np.all(d.mask_R == 1)

    def test_full_keep_bitwise(self, rng):
        cfg = AttentionConfig(4, 3, 2, 3, h=2, p_ad=1.0)
        p = MtsaParams.init(cfg, rng)
        x = rng.standard_normal((4, 6))
        np.testing.assert_array_equal(mtsa_forward(x, p, cfg, nk.make_rng(1), train=True),
                                      mtsa_forward(x, p, cfg))

    def test_keep_rate(self):
        # 1000 x 100 and 317 x 317: at least 10^5 draws per mask
        cfg = AttentionConfig(2, 2, 1000, 2, p_ad=0.81)
        d = sample_dropout(cfg, 317, nk.make_rng(5))
        assert d.mask_X.size >= 100_000 and d.mask_R.size >= 100_000
        rate = np.count_nonzero(d.mask_X) / d.mask_X.size
        assert abs(rate - 0.9) <= 0.005
        np.testing.assert_allclose(np.unique(d.mask_X), [0.0, 1 / 0.9])
        assert abs(np.count_nonzero(d.mask_R) / d.mask_R.size - 0.9) <= 0.005

    def test_eval_ignores_dropout(self, rng):
        cfg = AttentionConfig(4, 3, 2, 3, h=2, p_ad=0.5)
        p = MtsaParams.init(cfg, rng)
        x = rng.standard_normal((4, 6))
        ref = mtsa_forward(x, p, cfg)
        np.testing.assert_array_equal(mtsa_forward(x, p, cfg, nk.make_rng(3), train=False), ref)
        assert not np.array_equal(mtsa_forward(x, p, cfg, nk.make_rng(3), train=True), ref)

    def test_training_needs_rng(self, rng):
        cfg = AttentionConfig(4, 3, 2, 3, p_ad=0.5)
        p = MtsaParams.init(cfg, rng)
        with pytest.raises(nk.ConfigError):
            mtsa_forward(rng.standard_normal((4, 3)), p, cfg, train=True)

    def test_same_seed_same_output(self, rng):
        cfg = AttentionConfig(4, 3, 2, 3, h=2, p_ad=0.6)
        p = MtsaParams.init(cfg, rng)
        x = rng.standard_normal((4, 6))
        a = mtsa_forward(x, p, cfg, nk.make_rng(8), train=True)
        b = mtsa_forward(x, p, cfg, nk.make_rng(8), train=True)
        np.testing.assert_array_equal(a, b)


class TestContainer:
    def test_round_trip(self, rng, tmp_path):
        cfg = AttentionConfig(4, 3, 2, 5, h=3, fns=ScaleFns("identity", "log_sigmoid", "tanh"))
        p = MtsaParams.init(cfg, rng, ["forward", "none", "window:2"])
        path = tmp_path / "p.bin"
        save_params(path, p, cfg)
        assert path.read_bytes()[:5] == b"MTSA1"
        q, cfg2 = load_params(path)
        assert cfg2 == cfg and q.mask_assignment == p.mask_assignment
        for name, value in p.named().items():
            np.testing.assert_array_equal(q.named()[name], value)

    def test_f32_round_trip(self, rng, tmp_path):
        cfg = AttentionConfig(3, 2, 2, 2, dtype="f32")
        p = MtsaParams.init(cfg, rng)
        save_params(tmp_path / "p.bin", p, cfg)
        q, _ = load_params(tmp_path / "p.bin")
        assert q.W_o.dtype == np.float32
        np.testing.assert_array_equal(q.W_o, p.W_o)

    def test_corrupt(self, rng, tmp_path):
        cfg = AttentionConfig(3, 2, 2, 2)
        save_params(tmp_path / "p.bin", MtsaParams.init(cfg, rng), cfg)
        blob = (tmp_path / "p.bin").read_bytes()
        (tmp_path / "p.bin").write_bytes(b"XXXXX" + blob[5:])
        with pytest.raises(ContainerError):
            load_params(tmp_path / "p.bin")
        (tmp_path / "p.bin").write_bytes(blob[:-8])
        with pytest.raises(ContainerError):
            load_params(tmp_path / "p.bin")

    def test_missing_sidecar(self, tmp_path):
        (tmp_path / "p.bin").write_bytes(b"MTSA1")
        with pytest.raises(ContainerError):
            load_params(tmp_path / "p.bin")
