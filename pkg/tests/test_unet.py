import numpy as np
import pytest
import torch

from synhat.unet import (
    DJTGBlock,
    DriftBranch,
    GCFiLM,
    JitterBranch,
    LSTUNet,
    UNetConfig,
    count_macs,
    gc_film,
    motion_features,
    parameter_census,
    timestep_embedding,
)


def small_cfg(in_channels=3, conditional=False, context_dim=0):
    return UNetConfig(in_channels=in_channels, base_channels=16,
                      channel_multipliers=(1, 2), blocks_per_scale=1,
                      embedding_dim=16, conditional=conditional,
                      context_dim=context_dim)


class TestTimestepEmbedding:
    def test_deterministic(self):
        a = timestep_embedding(13, 32)
        b = timestep_embedding(13, 32)
        assert torch.equal(a, b)

    def test_zero_step(self):
        e = timestep_embedding(0, 32)[0]
        assert torch.all(e[:16] == 0.0)  # sin half
        assert torch.all(e[16:] == 1.0)  # cos half

    def test_distinct_over_full_range(self):
        embs = timestep_embedding(torch.arange(0, 1001), 32)
        uniq = {tuple(v.tolist()) for v in embs}
        assert len(uniq) == 1001
        diffs = (embs[1:] - embs[:-1]).abs().max(dim=1).values
        assert torch.all(diffs > 0)


class TestJitterBranch:
    def test_zero_first_half_gives_zero_output(self):
        jb = JitterBranch(4)
        with torch.no_grad():
            jb.conv.weight[:4].zero_()
            jb.conv.bias[:4].zero_()
        out = jb(torch.randn(2, 4, 16))
        assert torch.all(out == 0)

    def test_output_strictly_inside_unit_interval(self):
        jb = JitterBranch(8)
        out = jb(torch.randn(2, 8, 32))
        assert out.abs().max() < 1.0
        # saturated inputs can round to exactly 1 in float32 but never exceed it
        out = jb(torch.randn(2, 8, 32) * 100)
        assert out.abs().max() <= 1.0

    def test_impulse_support_equals_dilated_receptive_field(self):
        # direct convolution oracle: kernel 3 at dilation d touches {p-d, p, p+d}
        for d in (1, 2, 4):
            jb = JitterBranch(1, dilation=d)
            with torch.no_grad():
                jb.conv.bias.zero_()
            x = torch.zeros(1, 1, 64)
            p = 30
            x[0, 0, p] = 1.0
            out = jb(x)[0, 0]
            support = set(torch.nonzero(out.abs() > 0).flatten().tolist())
            assert support <= {p - d, p, p + d}
            assert len(support) > 0

    def test_shape_preserved(self):
        jb = JitterBranch(6, dilation=2)
        assert jb(torch.randn(3, 6, 40)).shape == (3, 6, 40)


class TestDriftBranch:
    def test_zero_input_constant_map(self):
        db = DriftBranch(4)
        out = db(torch.zeros(1, 4, 16))
        # constant along time: SiLU of a bias-only affine map
        assert torch.allclose(out, out[:, :, :1].expand_as(out))

    def test_depthwise_independence(self):
        db = DriftBranch(5)
        x = torch.randn(1, 5, 20)
        base = db.depthwise_features(x)
        for c in range(5):
            bump = x.clone()
            bump[0, c] += 1.0
            delta = (db.depthwise_features(bump) - base).abs().sum(dim=-1)[0]
            changed = torch.nonzero(delta > 1e-9).flatten().tolist()
            assert changed == [c]

    def test_parameter_count_below_standard_conv(self):
        c, k = 16, 3
        drift_params = sum(p.numel() for p in DriftBranch(c, k).parameters())
        standard = c * c * k + c  # weight + bias, arithmetic oracle
        assert drift_params < standard


class TestMotionFeatures:
    def test_constant_sequence(self):
        x = torch.full((1, 2, 20), 3.0)
        m = motion_features(x)
        assert torch.all(m[0, 0] == 0)  # velocity
        assert torch.all(m[0, 1] == 0)  # curvature

    def test_linear_ramp(self):
        t = torch.arange(20, dtype=torch.float32)
        x = t.reshape(1, 1, -1) * 0.5
        m = motion_features(x)
        vel, cur = m[0, 0], m[0, 1]
        assert torch.allclose(vel[1:-1], torch.full((18,), 0.5), atol=1e-6)
        assert torch.all(vel[1:-1] > 0)
        assert torch.allclose(cur[1:-1], torch.zeros(18), atol=1e-6)

    def test_quadratic_second_difference_oracle(self):
        t = torch.arange(30, dtype=torch.float32)
        x = (t ** 2).reshape(1, 1, -1)
        cur = motion_features(x)[0, 1]
        # finite-difference oracle: x_{t+1} - 2 x_t + x_{t-1} = 2 for t^2
        assert torch.allclose(cur[1:-1], torch.full((28,), 2.0), atol=1e-4)

    def test_variance_positive_for_noisy_input(self):
        x = torch.randn(1, 3, 50)
        assert motion_features(x)[0, 2].mean() > 0


class TestGCFiLM:
    def test_disabled_is_bitwise_identity(self):
        ft = torch.randn(2, 4, 8)
        assert gc_film(ft) is ft

    def test_gamma_minus_one_zeroes_output(self):
        ft = torch.randn(2, 4, 8)
        out = gc_film(ft, gamma=torch.full((2, 4, 1), -1.0),
                      beta=torch.zeros(2, 4, 1))
        assert torch.all(out == 0)

    def test_random_affine_relation_elementwise(self, rng):
        ft = torch.randn(2, 4, 8, dtype=torch.float64)
        gamma = torch.randn(2, 4, 1, dtype=torch.float64)
        beta = torch.randn(2, 4, 1, dtype=torch.float64)
        out = gc_film(ft, gamma, beta)
        expected = (1 + gamma) * ft + beta  # direct formula oracle
        assert torch.allclose(out, expected)

    def test_module_matches_functional(self):
        film = GCFiLM(context_dim=6, channels=4)
        ft = torch.randn(2, 4, 8)
        ctx = torch.randn(2, 6)
        gamma, beta = film.net(ctx).unsqueeze(-1).chunk(2, dim=1)
        assert torch.allclose(film(ft, ctx), (1 + gamma) * ft + beta)


class TestDJTGBlock:
    def make(self, channels=8, context_dim=0):
        return DJTGBlock(channels, emb_dim=16, dilation=2, context_dim=context_dim)

    def test_alpha_in_unit_interval_and_shapes(self):
        blk = self.make()
        x = torch.randn(2, 8, 32)
        emb = torch.randn(2, 16)
        fused, parts = blk.forward_detailed(x, emb)
        assert fused.shape == x.shape
        assert torch.all(parts["alpha"] >= 0) and torch.all(parts["alpha"] <= 1)

    def test_fusion_is_exact_convex_combination(self):
        blk = self.make()
        x = torch.randn(2, 8, 32)
        emb = torch.randn(2, 16)
        fused, parts = blk.forward_detailed(x, emb)
        manual = parts["alpha"] * parts["jitter"] + (1 - parts["alpha"]) * parts["drift"]
        assert torch.allclose(fused, manual)

    def test_forced_alpha_selects_branches(self, monkeypatch):
        blk = self.make()
        x = torch.randn(1, 8, 16)
        emb = torch.randn(1, 16)
        jit, drf = blk.jitter(x), blk.drift(x)
        for forced, expected in [(1.0, jit), (0.0, drf), (0.5, 0.5 * (jit + drf))]:
            monkeypatch.setattr(blk, "fusion_weights",
                                lambda x_, e_, v=forced: torch.full_like(x_, v))
            assert torch.allclose(blk(x, emb), expected)

    def test_convex_bound(self):
        blk = self.make()
        x = torch.randn(3, 8, 24)
        emb = torch.randn(3, 16)
        fused, parts = blk.forward_detailed(x, emb)
        bound = torch.maximum(parts["jitter"].abs(), parts["drift"].abs())
        assert torch.all(fused.abs() <= bound + 1e-6)

    def test_context_modulates_both_branches(self):
        blk = self.make(context_dim=5)
        x = torch.randn(1, 8, 16)
        emb = torch.randn(1, 16)
        ctx = torch.randn(1, 5)
        _, parts = blk.forward_detailed(x, emb, ctx)
        gamma, beta = blk.film.net(ctx).unsqueeze(-1).chunk(2, dim=1)
        assert torch.allclose(parts["jitter"], (1 + gamma) * blk.jitter(x) + beta)
        assert torch.allclose(parts["drift"], (1 + gamma) * blk.drift(x) + beta)


class TestLSTUNet:
    def test_shape_preserved_across_lengths(self):
        model = LSTUNet(small_cfg())
        model.eval()
        with torch.no_grad():
            for length in (8, 12, 16, 33, 60, 168, 250, 512):
                x = torch.randn(2, 3, length)
                y = model(x, 5)
                assert y.shape == (2, 3, length)

    def test_unconditional_ignores_condition(self):
        model = LSTUNet(small_cfg())
        model.eval()
        x = torch.randn(2, 3, 32)
        with torch.no_grad():
            a = model(x, 3, torch.randn(2, 7))
            b = model(x, 3, torch.randn(2, 7) * 100)
        assert torch.equal(a, b)

    def test_conditional_context_changes_output(self):
        model = LSTUNet(small_cfg(in_channels=6, conditional=True, context_dim=8))
        model.eval()
        x = torch.randn(2, 6, 32)
        with torch.no_grad():
            a = model(x, 3, torch.randn(2, 8))
            b = model(x, 3, torch.randn(2, 8) + 5)
        assert not torch.equal(a, b)

    def test_all_parameter_gradients_finite_nonzero(self):
        model = LSTUNet(small_cfg())
        x = torch.randn(2, 3, 32)
        loss = model(x, 7).pow(2).mean()
        loss.backward()
        for name, p in model.named_parameters():
            assert p.grad is not None, name
            assert torch.all(torch.isfinite(p.grad)), name
            assert p.grad.abs().max() > 0, name

    def test_gradient_finite_difference_spot_check(self):
        torch.manual_seed(0)
        model = LSTUNet(UNetConfig(in_channels=3, base_channels=8,
                                   channel_multipliers=(1, 2), blocks_per_scale=1,
                                   embedding_dim=8)).double()
        model.eval()
        x = torch.randn(1, 3, 16, dtype=torch.float64)

        def loss_fn():
            return model(x, 5).pow(2).mean()

        loss_fn().backward()
        params = list(model.named_parameters())
        gen = np.random.default_rng(1)
        h = 1e-4
        checked = 0
        for k in gen.choice(len(params), size=10, replace=False):
            name, p = params[k]
            idx = tuple(gen.integers(0, s) for s in p.shape)
            auto = p.grad[idx].item()
            with torch.no_grad():
                orig = p[idx].item()
                p[idx] = orig + h
                up = loss_fn().item()
                p[idx] = orig - h
                dn = loss_fn().item()
                p[idx] = orig
            fd = (up - dn) / (2 * h)
            denom = max(abs(auto), abs(fd), 1e-12)
            assert abs(auto - fd) / denom < 1e-2, name
            checked += 1
        assert checked == 10

    def test_parameter_census_differs_only_at_stem(self):
        a = parameter_census(LSTUNet(small_cfg(in_channels=3)))
        b = parameter_census(LSTUNet(small_cfg(in_channels=6)))
        diff = [(na, sa, sb) for (na, sa), (nb, sb) in zip(a, b) if sa != sb]
        assert [d[0] for d in diff] == ["stem.weight"]
        assert diff[0][1][1] == 3 and diff[0][2][1] == 6

    def test_conditional_flag_only_adds_film_parameters(self):
        a = dict(parameter_census(LSTUNet(small_cfg(in_channels=6))))
        b = dict(parameter_census(
            LSTUNet(small_cfg(in_channels=6, conditional=True, context_dim=8))))
        extra = set(b) - set(a)
        assert extra and all("film" in name for name in extra)
        assert all(b[k] == v for k, v in a.items())

    def test_macs_scale_with_length(self):
        model = LSTUNet(small_cfg())
        n = torch.tensor([5, 5])
        m64 = count_macs(model, torch.randn(2, 3, 64), n)
        m128 = count_macs(model, torch.randn(2, 3, 128), n)
        assert m128 / m64 == pytest.approx(2.0, rel=0.1)
