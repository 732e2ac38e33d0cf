"""Session mechanics: parameter resolution, ledger identities, loss bounds."""

import math

import numpy as np
import pytest

from privmarket import (
    InvalidParameterError,
    InvalidStateError,
    Ledger,
    MarketClosedError,
    MarketParams,
    TradeRejectedError,
    close_market,
    lambda_star,
    loss_bounds,
    low_bit,
    noise_scale_K,
    open_market,
)


def test_lambda_star_worked_values():
    assert lambda_star(16, 0.1, 0.1, 1.0, 1) == pytest.approx(
        0.0007661531640903023, rel=1e-12
    )
    assert lambda_star(16, 0.2, 0.05, 1.0, 2) == pytest.approx(
        0.0006177016040625219, rel=1e-12
    )
    assert lambda_star(64, 0.3, 0.1, 1.0, 2) == pytest.approx(
        0.0005631436172173787, rel=1e-12
    )
    # independent arithmetic for the first: 0.1 * 1 / (4 sqrt2 * 1 * 4 * ln 320)
    assert lambda_star(16, 0.1, 0.1, 1.0, 1) == pytest.approx(
        0.1 / (16.0 * math.sqrt(2.0) * math.log(320.0)), rel=1e-12
    )


def test_lambda_star_validation():
    with pytest.raises(InvalidParameterError):
        lambda_star(1, 0.1, 0.1, 1.0, 1)
    with pytest.raises(InvalidParameterError):
        lambda_star(16, 0.0, 0.1, 1.0, 1)
    with pytest.raises(InvalidParameterError):
        lambda_star(16, 0.1, 1.0, 1.0, 1)
    with pytest.raises(InvalidParameterError):
        lambda_star(16, 0.1, 0.1, -1.0, 1)


def test_noise_scale_K_values():
    assert noise_scale_K(16, 1.0, 2) == pytest.approx(16.0, rel=1e-12)
    assert noise_scale_K(16, 1.0, 1) == pytest.approx(8.0 * math.sqrt(2.0), rel=1e-12)
    assert noise_scale_K(64, 0.5, 2) == pytest.approx(48.0, rel=1e-12)


def test_loss_bounds_worked_values():
    lam = lambda_star(16, 0.1, 0.1, 1.0, 1)
    lb = loss_bounds(lam, 16, noise_scale_K(16, 1.0, 1), fee=0.1, B1=0.0)
    assert lb.ntl_bound == pytest.approx(0.2773770740509606, rel=1e-12)
    assert lb.wc_bound == pytest.approx(-1.0452458518980787, rel=1e-12)
    assert lb.fee_threshold == pytest.approx(0.002209708691207961, rel=1e-12)
    assert lb.fee_sufficient

    lam = lambda_star(16, 0.2, 0.05, 1.0, 2)
    lb = loss_bounds(lam, 16, noise_scale_K(16, 1.0, 2), fee=0.2, B1=math.log(2))
    assert lb.ntl_bound == pytest.approx(0.3162632212800112, rel=1e-12)
    assert lb.fee_threshold == pytest.approx(0.2 / 64.0, rel=1e-12)

    # single-arrival horizon has no stacking, so no noise-loss term
    lb = loss_bounds(0.5, 1, 4.0, fee=0.0, B1=math.log(2))
    assert lb.ntl_bound == 0.0 and lb.fee_sufficient
    with pytest.raises(InvalidParameterError):
        loss_bounds(0.0, 16, 1.0, fee=0.1, B1=0.0)


def test_default_lambda_always_fee_covered():
    # at lam = lambda_star and fee = alpha the sufficiency condition always holds
    for T in (8, 64, 512, 4096):
        for alpha in (0.05, 0.2):
            for gamma in (0.05, 0.1):
                for eps in (0.5, 1.0):
                    for d in (1, 2, 3):
                        lam = lambda_star(T, alpha, gamma, eps, d)
                        lb = loss_bounds(
                            lam, T, noise_scale_K(T, eps, d), fee=alpha, B1=math.log(d)
                        )
                        assert lb.fee_sufficient


def test_market_params_resolution():
    p = MarketParams(d=2, epsilon=1.0, alpha=0.2, gamma=0.05, T=16)
    assert p.fee == 0.2
    assert p.lam == pytest.approx(0.0006177016040625219, rel=1e-12)
    assert p.lam == p.lam_star
    assert p.B1 == pytest.approx(math.log(2))

    with pytest.raises(InvalidParameterError):
        MarketParams(d=2, epsilon=1.0, alpha=0.2, gamma=0.05, T=16, lam=0.01)
    loose = MarketParams(
        d=2, epsilon=1.0, alpha=0.2, gamma=0.05, T=16, lam=0.01, allow_unsafe_lambda=True
    )
    assert loose.lam == 0.01
    with pytest.raises(InvalidParameterError):
        MarketParams(d=2, epsilon=1.0, alpha=0.2, gamma=0.05, T=16, lam=0.0,
                     allow_unsafe_lambda=True)
    with pytest.raises(InvalidParameterError):
        MarketParams(d=2, epsilon=1.0, alpha=0.2, gamma=0.05, T=16, fee=-0.1)


def _unsafe_params(**kw):
    base = dict(
        d=2, epsilon=1.0, alpha=0.2, gamma=0.05, T=4, fee=0.05, lam=1.0,
        noise_off=True, allow_unsafe_lambda=True,
    )
    base.update(kw)
    return MarketParams(**base)


def test_single_trade_worked_ledger():
    session = open_market(_unsafe_params(), rng=0)
    session.step(np.array([1.0, 0.0]))
    ledger = close_market(session, outcome=0)
    assert ledger.trade_payments == pytest.approx(0.6201145069582775, abs=1e-12)
    assert ledger.payouts == pytest.approx(1.0)
    assert ledger.mm_loss == pytest.approx(0.3798854930417225, abs=1e-12)
    assert ledger.ntl == 0.0
    assert ledger.fees == pytest.approx(0.05)
    assert ledger.designer_loss == pytest.approx(0.3298854930417225, abs=1e-12)
    assert ledger.arrivals == 1
    # losing outcome flips the sign of the designer's fortune
    session = open_market(_unsafe_params(), rng=0)
    session.step(np.array([1.0, 0.0]))
    ledger = close_market(session, outcome=1)
    assert ledger.mm_loss == pytest.approx(-0.6201145069582775, abs=1e-12)


def test_trade_validation():
    session = open_market(_unsafe_params(), rng=0)
    with pytest.raises(TradeRejectedError):
        session.step(np.array([1.0, 0.6]))  # l1 norm 1.6
    with pytest.raises(TradeRejectedError):
        session.step(np.array([1.0, 0.0, 0.0]))
    with pytest.raises(TradeRejectedError):
        session.step(np.array([np.nan, 0.0]))
    assert session.arrivals == 0  # rejected trades leave no trace


def test_full_and_closed_errors():
    session = open_market(_unsafe_params(T=2), rng=0)
    session.step(np.array([1.0, 0.0]))
    session.step(np.array([0.0, -1.0]))
    assert session.is_full
    with pytest.raises(MarketClosedError):
        session.step(np.array([1.0, 0.0]))
    close_market(session, 0)
    with pytest.raises(MarketClosedError):
        session.step(np.array([1.0, 0.0]))
    with pytest.raises(InvalidStateError):
        close_market(session, 0)


def test_published_state_tracks_noise():
    params = MarketParams(d=2, epsilon=1.0, alpha=0.3, gamma=0.1, T=32)
    session = open_market(params, rng=7)
    rng = np.random.default_rng(11)
    for _ in range(32):
        dq = np.zeros(2)
        dq[rng.integers(2)] = rng.choice([-1.0, 1.0])
        session.step(dq)
        gap = session.q_hat - session.q_true - session.noise.held_sum()
        assert float(np.max(np.abs(gap))) < 1e-9
    assert len(session.published_states) == 33
    assert len(session.published_prices) == 33
    assert session.max_share_gap() > 0.0
    assert session.max_price_gap() > 0.0


def test_noise_off_publishes_truth():
    params = MarketParams(d=2, epsilon=1.0, alpha=0.3, gamma=0.1, T=8, noise_off=True)
    session = open_market(params, rng=0)
    for _ in range(8):
        session.step(np.array([1.0, 0.0]))
    assert session.max_share_gap() == 0.0
    assert session.max_price_gap() == 0.0
    ledger = close_market(session, 0)
    assert ledger.ntl == 0.0


def test_payment_telescoping_and_sellback():
    params = MarketParams(d=3, epsilon=0.5, alpha=0.2, gamma=0.05, T=64)
    session = open_market(params, rng=3)
    rng = np.random.default_rng(5)
    for _ in range(64):
        dq = np.zeros(3)
        dq[rng.integers(3)] = rng.choice([-1.0, 1.0])
        session.step(dq)
    ledger = close_market(session, 1)
    # after full sell-back the published state collapses onto the truth
    assert session.q_hat == pytest.approx(session.q_true, abs=1e-9)
    total_in = ledger.trade_payments + session.noise_buy_total - session.noise_sell_total
    collected = session.cost.cost(session.q_true) - session.cost.cost(session.q_init)
    assert total_in == pytest.approx(collected, abs=1e-8)


def test_ledger_identities():
    params = MarketParams(d=2, epsilon=1.0, alpha=0.3, gamma=0.1, T=16)
    for seed in range(5):
        session = open_market(params, rng=seed)
        rng = np.random.default_rng(100 + seed)
        for _ in range(16):
            dq = np.zeros(2)
            dq[rng.integers(2)] = rng.choice([-1.0, 1.0])
            session.step(dq)
        ledger = close_market(session, 0)
        assert ledger.designer_loss == ledger.mm_loss + ledger.ntl - ledger.fees
        physical = ledger.payouts - ledger.trade_payments - ledger.fees
        assert ledger.designer_loss == pytest.approx(physical, abs=1e-8)


def test_bundle_loss_pathwise_bound():
    # each bundle's realized loss obeys |loss| <= lam * span * ||z||_inf where
    # span counts the arrivals between purchase and sale
    params = MarketParams(d=2, epsilon=1.0, alpha=0.3, gamma=0.1, T=32)
    for seed in range(20):
        session = open_market(params, rng=seed)
        rng = np.random.default_rng(200 + seed)
        for _ in range(32):
            dq = np.zeros(2)
            dq[rng.integers(2)] = rng.choice([-1.0, 1.0])
            session.step(dq)
        close_market(session, 0)
        for bundle in session.noise.bundles.values():
            span = bundle.sold_at - bundle.time
            cap = params.lam * span * float(np.max(np.abs(bundle.value)))
            assert abs(bundle.realized_loss) <= cap * (1 + 1e-9) + 1e-12
            if bundle.sold_at != session.noise.t:
                assert span == low_bit(bundle.time)


def test_zero_arrival_close():
    session = open_market(_unsafe_params(), rng=0)
    ledger = close_market(session, 0)
    assert ledger == Ledger(
        mm_loss=0.0, ntl=0.0, fees=0.0, designer_loss=0.0,
        payouts=0.0, trade_payments=0.0, arrivals=0,
    )


def test_initial_shares_handoff():
    q0 = np.array([2.0, 0.0])
    session = open_market(_unsafe_params(), initial_shares=q0, rng=0)
    start = session.published_prices[0]
    expect = np.exp(q0) / np.exp(q0).sum()
    assert start == pytest.approx(expect, abs=1e-12)
    session.step(np.array([0.0, 1.0]))
    ledger = close_market(session, 1)
    cost = session.cost
    assert ledger.mm_loss == pytest.approx(
        1.0 - (cost.cost(q0 + np.array([0.0, 1.0])) - cost.cost(q0)), abs=1e-12
    )
    with pytest.raises(InvalidParameterError):
        open_market(_unsafe_params(), initial_shares=np.zeros(3), rng=0)


def test_ledger_combine():
    a = Ledger(1.0, 2.0, 0.5, 2.5, 3.0, 1.0, 4)
    b = Ledger(-1.0, 0.0, 0.25, -1.25, 0.0, 2.0, 6)
    c = Ledger.combine([a, b])
    assert c == Ledger(0.0, 2.0, 0.75, 1.25, 3.0, 3.0, 10)


def test_open_market_seeding():
    params = MarketParams(d=2, epsilon=1.0, alpha=0.3, gamma=0.1, T=4)
    a = open_market(params, rng=42)
    b = open_market(params, rng=42)
    a.step(np.array([1.0, 0.0]))
    b.step(np.array([1.0, 0.0]))
    assert np.array_equal(a.q_hat, b.q_hat)
    c = open_market(params, rng=np.random.default_rng(42))
    c.step(np.array([1.0, 0.0]))
    assert np.array_equal(a.q_hat, c.q_hat)
