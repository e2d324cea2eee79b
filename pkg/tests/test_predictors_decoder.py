import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from performsinger import numerics as nx
from performsinger.decoder import DiffusionError, DiffusionSchedule, MelDecoder, MelNormalizer
from performsinger.predictors import (
    RVQ,
    DurationPredictor,
    PitchPredictor,
    PredictorError,
    StyleExtractor,
    durations_from_log,
    f0_stats,
    f0_to_target,
    length_regulate,
    target_to_f0,
)


def rnd(*shape, seed=0):
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=nx.DTYPE)


# ------------------------------------------------------------------ duration


def test_duration_predictor_shape():
    dp = DurationPredictor(16).double()
    assert dp(rnd(1, 7, 16)).shape == (1, 7, 1)


def test_durations_from_log_rounds_and_clamps():
    d = durations_from_log(torch.log(torch.tensor([0.2, 1.4, 2.6, 10.0], dtype=nx.DTYPE)))
    assert d.tolist() == [1, 1, 3, 10]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 6), min_size=1, max_size=10).filter(lambda d: sum(d) > 0))
def test_length_regulate_property(durations):
    x = rnd(len(durations), 3, seed=len(durations))
    y = length_regulate(x, durations)
    assert y.shape[0] == sum(durations)
    start = 0
    for row, d in zip(x, durations):
        assert torch.equal(y[start : start + d], row.expand(d, -1))
        start += d


def test_length_regulate_errors():
    with pytest.raises(PredictorError):
        length_regulate(rnd(3, 2), [0, 0, 0])
    with pytest.raises(nx.ShapeError):
        length_regulate(rnd(3, 2), [1, 2])
    with pytest.raises(PredictorError):
        length_regulate(rnd(2, 2), [1, -1])


# --------------------------------------------------------------------- pitch


def test_f0_target_roundtrip_and_interpolation():
    f0 = np.array([200.0, 0.0, 0.0, 250.0])
    uv = f0 > 0
    mu, sigma = f0_stats(np.log(np.array([220.0, 220.0, 260.0])), 0.05)
    target = f0_to_target(f0, uv, mu, sigma)
    back = target_to_f0(target, mu, sigma)
    assert np.allclose(back[uv], f0[uv])
    # gap filled linearly in log-F0
    assert np.allclose(np.log(back[1:3]), np.interp([1, 2], [0, 3], np.log([200.0, 250.0])))


def test_f0_stats_floor_and_all_rest():
    assert f0_stats(np.full(5, np.log(300.0)), 0.05)[1] == 0.05
    assert f0_stats(np.full(3, np.nan), 0.05) == (float(np.log(220.0)), 0.05)


def test_pitch_predictor_losses_and_sampling(tiny_cfg):
    torch.manual_seed(0)
    pp = PitchPredictor(tiny_cfg).double()
    feat = rnd(1, 9, 16)
    noise_loss, uv_loss = pp.train_loss(feat, rnd(1, 9, seed=1), torch.ones(1, 9, dtype=nx.DTYPE), 3, rnd(1, 9, seed=2))
    assert noise_loss >= 0 and uv_loss >= 0
    x0, voiced = pp.sample(feat, seed=5)
    x0b, _ = pp.sample(feat, seed=5)
    assert x0.shape == (1, 9) and voiced.dtype == torch.bool
    assert torch.equal(x0, x0b)


# ----------------------------------------------------------------------- RVQ


def brute_force_codes(z, books):
    codes, residual = [], z.clone()
    for book in books:
        row_codes = []
        for r in residual:
            dists = [float(((r - e) ** 2).sum()) for e in book]
            row_codes.append(int(np.argmin(dists)))
        idx = torch.tensor(row_codes)
        codes.append(idx)
        residual = residual - book[idx]
    return torch.stack(codes, 1)


def test_rvq_matches_brute_force_and_energy_decreases():
    torch.manual_seed(0)
    rvq = RVQ(3, 16, 8).double()
    z = rnd(40, 8) * 0.3
    codes, zq, commit = rvq(z)
    assert torch.equal(codes, brute_force_codes(z, rvq.codebooks.detach()))
    energies = rvq.residual_energies(z)
    assert torch.all(energies[1:] <= energies[:-1] + 1e-15)
    assert commit >= 0


def test_rvq_straight_through_gradient():
    rvq = RVQ(2, 8, 4).double()
    z = rnd(5, 4).requires_grad_(True)
    _, zq, _ = rvq(z)
    w = rnd(5, 4, seed=3)
    (zq * w).sum().backward()
    assert torch.allclose(z.grad, w, atol=1e-10)


def test_rvq_tie_breaks_to_lowest_index():
    rvq = RVQ(1, 2, 2).double()
    with torch.no_grad():
        rvq.learned.copy_(torch.tensor([[[1.0, 0.0]]]))
    # (0.5, 0) is equidistant from the zero entry and (1, 0)
    codes, _, _ = rvq(torch.tensor([[0.5, 0.0]], dtype=nx.DTYPE))
    assert codes.tolist() == [[0]]


def test_rvq_zero_entry_is_pinned():
    rvq = RVQ(2, 4, 3).double()
    assert torch.equal(rvq.codebooks[:, 0], torch.zeros(2, 3, dtype=nx.DTYPE))
    assert rvq.codebooks.shape == (2, 4, 3)


def test_style_extractor(tiny_cfg):
    torch.manual_seed(0)
    se = StyleExtractor(tiny_cfg).double()
    style, codes, commit = se(rnd(1, 22, 80), rnd(1, 13, 16))
    assert style.shape == (1, 13, 16)
    assert codes.shape == (6, tiny_cfg.rvq.books)  # ceil(22 / 4) latent rows
    with pytest.raises(PredictorError):
        se(rnd(1, 5, 80), rnd(1, 3, 16))


# ------------------------------------------------------------------- decoder


def test_schedule_sanity():
    s = DiffusionSchedule(100, 1e-4, 0.06)
    assert torch.all(s.betas[1:] > s.betas[:-1])
    assert torch.all(s.alpha_bar[1:] < s.alpha_bar[:-1])
    assert torch.all(s.posterior_var >= 0)
    with pytest.raises(DiffusionError):
        s.ab(0)
    with pytest.raises(DiffusionError):
        s.ab(101)


def test_q_sample_zero_noise_and_inversion():
    s = DiffusionSchedule()
    x0 = rnd(3, 80)
    assert torch.equal(s.q_sample(x0, 40, torch.zeros_like(x0)), torch.sqrt(s.ab(40)) * x0)
    for t in (1, 37, 100):
        n = rnd(3, 80, seed=t)
        assert torch.max(torch.abs(s.predict_x0(s.q_sample(x0, t, n), t, n) - x0)) < 1e-10


def test_posterior_recovers_x0_direction():
    s = DiffusionSchedule()
    x0 = rnd(4)
    mean, var = s.posterior(x0, x0 * torch.sqrt(s.ab(1)), 1)
    assert torch.allclose(mean, x0) and float(var) == 0.0


def test_normalizer_roundtrip():
    n = MelNormalizer(np.log(1e-5), 5.0)
    x = rnd(10, 80) * 3
    assert torch.max(torch.abs(n.denorm(n.norm(x)) - x)) < 1e-12
    assert float(n.norm(torch.tensor(np.log(1e-5)))) == pytest.approx(-1.0, abs=1e-15)
    assert float(n.norm(torch.tensor(5.0, dtype=nx.DTYPE))) == pytest.approx(1.0, abs=1e-15)


def test_decoder_oracle_denoiser_gives_zero_loss(tiny_cfg):
    tiny_cfg.decoder.target = "eps"
    dec = MelDecoder(tiny_cfg).double()
    noise = rnd(1, 6, 80, seed=2)
    dec.denoiser.forward = lambda x_t, t, cond: noise
    assert float(dec.train_loss(rnd(1, 6, 80), rnd(1, 6, 16), rnd(1, 16), 4, noise)) == 0.0


def test_clean_target_with_exact_estimate_recovers_shrunk_noise():
    s = DiffusionSchedule()
    x0, n = rnd(2, 5, seed=1) * 0.4, rnd(2, 5, seed=2)
    for t in (1, 10, 100):
        ab = s.ab(t)
        x_t = s.q_sample(x0, t, n)
        est = s.noise_estimate(lambda x, steps: x0, x_t, t, "x0", tolerance=0.03, data_rms=0.4)
        shrink = 1.0 / (1.0 + float(ab / (1 - ab)) * 0.03**2)
        assert torch.allclose(est, shrink * n, atol=1e-10)
        # the same network seen through the eps target returns its raw output
        assert torch.equal(s.noise_estimate(lambda x, steps: n, x_t, t, "eps"), n)
    with pytest.raises(DiffusionError):
        s.noise_estimate(lambda x, steps: x, x0, 1, "v")


def test_weighted_step_distribution():
    s = DiffusionSchedule()
    assert torch.allclose(s.step_probs("eps"), torch.full((100,), 0.01, dtype=nx.DTYPE))
    p = s.step_probs("x0", tolerance=0.03, floor=0.2).numpy()
    ab = np.cumprod(1.0 - np.linspace(1e-4, 0.06, 100))
    weight = [a / (1 - a) * (1.0 / (1.0 + a / (1 - a) * 0.03**2)) ** 2 for a in ab]
    expected = 0.002 + 0.8 * np.array(weight) / sum(weight)
    assert np.allclose(p, expected, rtol=1e-12) and p.sum() == pytest.approx(1.0)
    # the weight on the clean error peaks where the noise level meets the tolerance
    assert int(np.argmax(p)) + 1 == int(np.argmin(np.abs(np.sqrt((1 - ab) / ab) - 0.03))) + 1


def test_decoder_decode_shape_and_determinism(tiny_cfg):
    torch.manual_seed(0)
    dec = MelDecoder(tiny_cfg).double()
    cond, sf = rnd(1, 7, 16), rnd(1, 16)
    a, b = dec.decode(cond, sf, seed=3), dec.decode(cond, sf, seed=3)
    assert a.shape == (1, 7, 80) and torch.equal(a, b)
    with pytest.raises(nx.ShapeError):
        dec.train_loss(rnd(1, 6, 80), rnd(1, 5, 16), sf, 1, rnd(1, 6, 80))
