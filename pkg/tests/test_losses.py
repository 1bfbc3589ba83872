"""Loss tests: fixed-point anchors, exact invariances, gradient checks."""

import numpy as np
import pytest
import torch

from tseforge.losses import (LossConfig, multitask_loss, pair_loss, si_snr_loss,
                             snr_loss)

from util_grad import fd_directional_error


def snr_oracle(est, ref, eps=1e-6):
    """Independent numpy computation of the SNR loss."""
    p_ref = float(np.sum(ref * ref))
    p_err = float(np.sum((ref - est) ** 2))
    return -10.0 * np.log10(p_ref / (p_err + eps * p_ref))


def si_snr_oracle(est, ref, eps=1e-6):
    """Independent numpy projection-based SI-SNR loss."""
    est = est - est.mean()
    ref = ref - ref.mean()
    s = (est @ ref) / (ref @ ref) * ref
    e = est - s
    q = float(s @ s + e @ e)
    return -10.0 * np.log10((float(s @ s) + eps * q) / (float(e @ e) + eps * q))


def exact_snr_pair(snr_db, n=4000, seed=0):
    """Construct (est, ref) with snr_loss exactly -snr_db (up to epsilon)."""
    rng = np.random.default_rng(seed)
    ref = rng.normal(size=n)
    noise = rng.normal(size=n)
    noise -= (noise @ ref) / (ref @ ref) * ref  # orthogonalize
    noise *= np.sqrt((ref @ ref) * 10 ** (-snr_db / 10) / (noise @ noise))
    return ref + noise, ref


class TestSnrLoss:
    def test_perfect_estimate_hits_floor(self):
        x = torch.randn(1000, generator=torch.Generator().manual_seed(0))
        loss = snr_loss(x, x)
        np.testing.assert_allclose(loss.item(), -60.0, atol=1e-4)

    def test_zero_estimate_is_zero_db(self):
        x = torch.randn(1000, generator=torch.Generator().manual_seed(1))
        np.testing.assert_allclose(snr_loss(torch.zeros(1000), x).item(), 0.0, atol=1e-4)

    def test_constructed_10db_pair(self):
        est, ref = exact_snr_pair(10.0)
        loss = snr_loss(torch.from_numpy(est), torch.from_numpy(ref))
        np.testing.assert_allclose(loss.item(), -10.0, atol=0.01)

    def test_matches_oracle_on_random_pairs(self):
        rng = np.random.default_rng(2)
        for _ in range(5):
            est, ref = rng.normal(size=500), rng.normal(size=500)
            got = snr_loss(torch.from_numpy(est), torch.from_numpy(ref)).item()
            np.testing.assert_allclose(got, snr_oracle(est, ref), atol=1e-6)

    def test_empty_reference_rejected(self):
        with pytest.raises(ValueError, match="empty reference"):
            snr_loss(torch.zeros(0), torch.zeros(0))

    def test_batch_is_mean_of_samples(self):
        g = torch.Generator().manual_seed(3)
        a, b = torch.randn(2, 400, generator=g).double()
        ra, rb = torch.randn(2, 400, generator=g).double()
        batched = snr_loss(torch.stack([a, b]), torch.stack([ra, rb]))
        single = (snr_loss(a, ra) + snr_loss(b, rb)) / 2
        torch.testing.assert_close(batched, single, rtol=0, atol=1e-9)


class TestSiSnrLoss:
    def test_scale_invariance_exact(self):
        g = torch.Generator().manual_seed(4)
        est = torch.randn(800, generator=g).double()
        ref = torch.randn(800, generator=g).double()
        a = si_snr_loss(est, ref)
        b = si_snr_loss(3.7 * est, ref)
        np.testing.assert_allclose(a.item(), b.item(), atol=1e-6)

    def test_scaled_reference_hits_floor(self):
        ref = torch.randn(500, generator=torch.Generator().manual_seed(5)).double()
        loss = si_snr_loss(3.7 * ref, ref)
        np.testing.assert_allclose(loss.item(), -60.0, atol=1e-3)

    def test_orthogonal_estimate_maximally_bad(self):
        rng = np.random.default_rng(6)
        ref = rng.normal(size=600)
        est = rng.normal(size=600)
        ref -= ref.mean()
        est -= est.mean()
        est -= (est @ ref) / (ref @ ref) * ref  # exactly orthogonal, zero-mean
        loss = si_snr_loss(torch.from_numpy(est), torch.from_numpy(ref))
        np.testing.assert_allclose(loss.item(), 60.0, atol=1e-3)

    def test_matches_projection_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(5):
            est, ref = rng.normal(size=700), rng.normal(size=700)
            got = si_snr_loss(torch.from_numpy(est), torch.from_numpy(ref)).item()
            np.testing.assert_allclose(got, si_snr_oracle(est, ref), atol=1e-6)


class TestGradients:
    def test_snr_loss_fd(self):
        for seed in range(5):
            g = torch.Generator().manual_seed(seed)
            est = torch.randn(300, generator=g, dtype=torch.float64, requires_grad=True)
            ref = torch.randn(300, generator=g, dtype=torch.float64)
            err = fd_directional_error(lambda: snr_loss(est, ref), [est], seed=seed)
            assert err < 1e-3

    def test_si_snr_loss_fd(self):
        for seed in range(5):
            g = torch.Generator().manual_seed(seed + 50)
            est = torch.randn(300, generator=g, dtype=torch.float64, requires_grad=True)
            ref = torch.randn(300, generator=g, dtype=torch.float64)
            err = fd_directional_error(lambda: si_snr_loss(est, ref), [est], seed=seed)
            assert err < 1e-3


class TestMultitask:
    def test_endpoints(self):
        l1, l0 = torch.tensor(-3.0), torch.tensor(-7.0)
        assert multitask_loss(l1, l0, alpha=1.0).item() == -3.0
        assert multitask_loss(l1, l0, alpha=0.0).item() == -7.0

    def test_halfway_is_mean(self):
        l1, l0 = torch.tensor(-3.1), torch.tensor(-6.9)
        np.testing.assert_allclose(multitask_loss(l1, l0, 0.5).item(), -5.0, atol=1e-6)

    def test_affine_in_alpha(self):
        g = torch.Generator().manual_seed(8)
        l1 = torch.randn((), generator=g).double()
        l0 = torch.randn((), generator=g).double()
        ends = {a: multitask_loss(l1, l0, a).item() for a in (0.0, 1.0)}
        for a in (0.25, 0.5, 0.75):
            expected = a * ends[1.0] + (1 - a) * ends[0.0]
            np.testing.assert_allclose(multitask_loss(l1, l0, a).item(), expected, atol=1e-9)

    def test_alpha_out_of_range_rejected(self):
        with pytest.raises(ValueError, match="alpha"):
            multitask_loss(torch.tensor(0.0), torch.tensor(0.0), alpha=1.5)
        with pytest.raises(ValueError, match="alpha"):
            LossConfig(alpha=-0.1)


class TestPairLoss:
    def test_equal_weights_average_the_terms(self):
        g = torch.Generator().manual_seed(9)
        est = torch.randn(400, generator=g).double()
        ref = torch.randn(400, generator=g).double()
        combined = pair_loss(est, ref, LossConfig())
        expected = 0.5 * snr_loss(est, ref) + 0.5 * si_snr_loss(est, ref)
        torch.testing.assert_close(combined, expected, rtol=0, atol=1e-9)
