import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lighttune.ff_core import BLER_CLASSES, InputError, MlpModel, init_model, predict_label
from lighttune.finetune import FineTuneConfig, FineTuneState
from lighttune.link_adapt import (
    CqiTable,
    EmptyPeriodError,
    LinkFeatures,
    OllaState,
    PeriodOutcome,
    TableBaseline,
    bler_predict,
    cqi_floor,
    cqi_tune,
    empirical_bler,
    fa_md_rates,
    olla_step,
    olla_update,
    prediction_error,
    rank_window,
    ri_cqi_tune,
    se_rank_select,
    throughput,
)

TABLE = CqiTable.standard()


def feats(cqi=10, ri=2):
    return LinkFeatures(10.0, 5.0, 30.0, 10.0, 9.5, (9.0, 9.1, 9.2), ri, cqi, 52, 2)


def feedback(n_ack=45, n_nack=5, bits=1000.0):
    calls = []

    def cb(rank, cqi):
        calls.append((rank, cqi))
        total = n_ack + n_nack
        return PeriodOutcome(n_ack, n_nack, n_nack / total if total else None, bits)

    cb.calls = calls
    return cb


# --- measurements -----------------------------------------------------------


def test_empirical_bler():
    assert empirical_bler(7, 3) == 0.3
    assert empirical_bler(10, 0) == 0.0
    assert empirical_bler(0, 5) == 1.0
    with pytest.raises(EmptyPeriodError):
        empirical_bler(0, 0)
    with pytest.raises(InputError):
        empirical_bler(-1, 3)


def test_prediction_error():
    assert prediction_error(0.3, 0.3) == 0.0
    assert prediction_error(0.9, 0.0) == 0.9
    assert prediction_error(0.2, 0.5) == pytest.approx(0.3)
    with pytest.raises(InputError):
        prediction_error(1.2, 0.0)


def test_throughput():
    assert throughput(0, 50, 2, 10, TABLE, 52, 600) == 0.0
    assert throughput(0, 0, 2, 10, TABLE, 52, 600) == 0.0
    assert throughput(50, 0, 2, 7, TABLE, 52, 600) == 2 * throughput(50, 0, 1, 7, TABLE, 52, 600)
    # CQI 7: 16QAM, rate 378/1024; 40 of 50 ACKed
    expected = 0.8 * 1 * 4 * (378 / 1024) * 52 * 12 * 600
    assert throughput(40, 10, 1, 7, TABLE, 52, 600) == pytest.approx(expected, rel=1e-4)


def test_fa_md_rates():
    assert fa_md_rates([(0.1, 0.1), (0.9, 0.95)], 0.9) == (0.0, 0.0)
    assert fa_md_rates([(1.0, 0.1), (1.0, 0.5)], 0.9) == (1.0, None)
    assert fa_md_rates([(0.9, 0.1), (0.0, 0.1), (0.0, 0.95), (0.9, 0.95)], 0.9) == (0.5, 0.5)
    with pytest.raises(InputError):
        fa_md_rates([], 0.9)


def test_fa_md_matches_naive_counter():
    rng = np.random.default_rng(0)
    log = [(float(a), float(b)) for a, b in zip(rng.choice(BLER_CLASSES.values, 500), rng.random(500))]
    fa_n = fa_d = md_n = md_d = 0
    for p_hat, p in log:
        if p < 0.9:
            fa_d += 1
            fa_n += p_hat >= 0.9
    for p_hat, p in log:
        if p >= 0.9:
            md_d += 1
            md_n += p_hat < 0.9
    fa, md = fa_md_rates(log, 0.9)
    assert fa == fa_n / fa_d and md == md_n / md_d


def test_cqi_table():
    se = TABLE.se_values()
    assert len(se) == 15 and all(b > a for a, b in zip(se, se[1:]))
    assert TABLE.se(1) == pytest.approx(2 * 78 / 1024)
    assert TABLE.se(15) == pytest.approx(6 * 948 / 1024)


def test_features_flatten_to_twelve():
    v = feats().to_vector()
    assert v.shape == (12,)
    assert feats().with_cqi(3).cqi == 3 and feats().with_rank(4).ri == 4
    with pytest.raises(InputError):
        LinkFeatures(10.0, 5.0, 30.0, 10.0, 9.5, (9.0, 9.1), 1, 3, 52, 2)
    with pytest.raises(InputError):
        feats(cqi=16)


# --- prediction and back-off ------------------------------------------------


def test_bler_predict_zero_model():
    assert bler_predict(MlpModel.zeros([13, 4]), feats(), BLER_CLASSES) == 0.0


def test_bler_predict_matches_predict_label():
    rng = np.random.default_rng(2)
    for _ in range(1000):
        m = MlpModel([rng.normal(size=(6, 14)), rng.normal(size=(4, 7))])
        x = rng.normal(size=12)
        assert bler_predict(m, x, BLER_CLASSES) == predict_label(m, x, BLER_CLASSES)[0]


def fixed_prediction_model(value):
    """Model that predicts ``value`` for every input.

    Two label-only units ``relu(y - lo)`` and ``relu(y - hi)`` around the
    class feed ``relu(u1 - 1000 u2)``, a bump that is positive only between
    ``lo`` and ``hi``.
    """
    c = BLER_CLASSES.as_array()
    k = int(np.flatnonzero(np.isclose(c, value))[0])
    lo = c[k] - 0.05
    hi = c[k] + 0.05
    th1 = np.zeros((2, 14))
    th1[0, 12], th1[0, 13] = 1.0, -lo
    th1[1, 12], th1[1, 13] = 1.0, -hi
    th2 = np.array([[1.0, -1e3, 0.0]])
    return MlpModel([th1, th2])


@pytest.mark.parametrize("value", [0.0, 0.2, 0.5, 0.9])
def test_fixed_prediction_model(value):
    m = fixed_prediction_model(value)
    for x in np.random.default_rng(0).normal(size=(10, 12)):
        assert predict_label(m, x, BLER_CLASSES)[0] == value


def test_cqi_tune_immediate_break():
    m = fixed_prediction_model(0.2)
    fb = feedback()
    cqi, _, _, tele = cqi_tune(m, 9, feats(9), 8, 0.9, FineTuneConfig(delta=1.0), BLER_CLASSES, fb)
    assert cqi == 9 and tele.predictions == 1
    assert fb.calls == [(2, 9)]


def test_cqi_tune_single_step_floor():
    m = fixed_prediction_model(0.9)
    cqi, _, _, tele = cqi_tune(m, 9, feats(9), 8, 0.9, FineTuneConfig(delta=1.0), BLER_CLASSES, feedback())
    assert cqi == 8
    # one prediction at CQI 9; the guard stops the loop at the floor, and
    # fine-tuning predicts once more on the transmitted features
    assert tele.predictions == 2


def test_cqi_tune_stuck_predictor_walks_to_floor():
    m = fixed_prediction_model(0.9)
    cqi, _, _, tele = cqi_tune(m, 15, feats(15), 1, 0.9, FineTuneConfig(delta=1.0), BLER_CLASSES, feedback())
    assert cqi == 1
    assert tele.predictions == 14 + 1


def test_cqi_tune_never_changes_rank():
    fb = feedback()
    cqi_tune(fixed_prediction_model(0.9), 12, feats(12, ri=3), 11, 0.9, FineTuneConfig(), BLER_CLASSES, fb)
    assert fb.calls[0][0] == 3


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 15), st.integers(0, 14), st.sampled_from([0.0, 0.5, 0.9]))
def test_cqi_monotonicity(cqi_in, k, value):
    floor = max(cqi_in - k, 1)
    cqi, _, _, _ = cqi_tune(fixed_prediction_model(value), cqi_in, feats(cqi_in), floor, 0.9, FineTuneConfig(delta=1.0),
                            BLER_CLASSES, feedback())
    assert floor <= cqi <= cqi_in


def test_cqi_tune_coupling_to_trigger():
    m = init_model([13, 8, 8], seed=0)
    cfg = FineTuneConfig(delta=0.3)
    state = FineTuneState.fresh(m, cfg)
    for n_nack in range(0, 51, 5):
        _, m2, state, tele = cqi_tune(m, 10, feats(10), 9, 0.9, cfg, BLER_CLASSES, feedback(50 - n_nack, n_nack), state=state)
        assert tele.triggered == (abs(tele.p_hat - tele.p_true) >= cfg.delta)
        assert (not m2.equal(m)) == tele.triggered
        m = m2


def test_cqi_tune_empty_period_skips_finetune():
    m = init_model([13, 8], seed=0)
    _, m2, _, tele = cqi_tune(m, 10, feats(10), 9, 0.9, FineTuneConfig(delta=0.0), BLER_CLASSES, feedback(0, 0, 0.0))
    assert m2 is m and tele.p_true is None and not tele.triggered


def test_cqi_tune_input_errors():
    m = init_model([13, 8])
    with pytest.raises(InputError):
        cqi_tune(m, 5, feats(5), 0, 0.9, FineTuneConfig(), BLER_CLASSES, feedback())
    with pytest.raises(InputError):
        cqi_tune(m, 5, feats(5), 6, 0.9, FineTuneConfig(), BLER_CLASSES, feedback())
    with pytest.raises(InputError):
        cqi_tune(m, 5, feats(5), 4, 0.0, FineTuneConfig(), BLER_CLASSES, feedback())


def test_cqi_floor():
    assert cqi_floor(10) == 9 and cqi_floor(1) == 1 and cqi_floor(3, 5) == 1


# --- rank selection ---------------------------------------------------------


def test_rank_window():
    assert list(rank_window(4, 4)) == [2, 3, 4]
    assert list(rank_window(1, 4)) == [1, 2, 3]
    assert list(rank_window(3, 4)) == [2, 3, 4]
    assert list(rank_window(2, 2)) == [1, 2]
    for r_max in range(1, 5):
        for r in range(1, r_max + 1):
            assert 1 <= len(rank_window(r, r_max)) <= 3
    with pytest.raises(InputError):
        rank_window(5, 4)


class _SeTable:
    def __init__(self, se):
        self._se = se

    def se(self, cqi):
        return self._se[cqi]


def test_se_rank_select_hand_cases():
    assert se_rank_select({1: 1, 2: 2}, _SeTable({1: 4.0, 2: 1.9}), 2) == 1
    assert se_rank_select({1: 1, 2: 1, 3: 1, 4: 1}, TABLE, 4) == 4
    with pytest.raises(InputError):
        se_rank_select({1: 5}, TABLE, 2)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(1, 15), min_size=4, max_size=4))
def test_se_rank_select_brute_force(cqis):
    per_rank = {i + 1: c for i, c in enumerate(cqis)}
    products = [(i * TABLE.se(per_rank[i]), -i) for i in range(1, 5)]
    assert se_rank_select(per_rank, TABLE, 4) == -max(products)[1]


def test_ri_cqi_tune_reduces_to_table():
    per_rank = {1: 12, 2: 10, 3: 7, 4: 4}
    fb = feedback()
    r, cqi, _, _, tele = ri_cqi_tune(fixed_prediction_model(0.0), 4, per_rank, feats(4, ri=4), 1, 0.9, 4,
                                     FineTuneConfig(delta=1.0), BLER_CLASSES, fb, table=TABLE)
    window = {i: per_rank[i] for i in rank_window(4, 4)}
    best = max(window, key=lambda i: (i * TABLE.se(window[i]), -i))
    assert (r, cqi) == (best, per_rank[best])
    assert [t[0] for t in tele.rank_trace] == [2, 3, 4]
    assert fb.calls == [(r, cqi)]


def test_ri_cqi_tune_prediction_count_bound():
    per_rank = {1: 12, 2: 10, 3: 7, 4: 4}
    floors = {i: cqi_floor(c) for i, c in per_rank.items()}
    _, _, _, _, tele = ri_cqi_tune(fixed_prediction_model(0.9), 3, per_rank, feats(7, ri=3), floors, 0.9, 4,
                                   FineTuneConfig(delta=1.0), BLER_CLASSES, feedback(), table=TABLE)
    # one prediction per window rank, plus one for fine-tuning the winner
    assert tele.predictions <= 3 * 1 + 1


# --- OLLA -------------------------------------------------------------------


def test_olla_coupling():
    s = OllaState(step_up=0.5, target=0.1)
    assert s.step_down == pytest.approx(0.0556, abs=1e-4)
    assert s.step_down == pytest.approx(0.5 / 9)


def test_olla_alternating_stream():
    s = OllaState(step_up=0.5, target=0.1)
    n = 10
    for _ in range(n):
        s = olla_step(olla_step(s, ack=False), ack=True)
    assert s.offset == pytest.approx(n * (0.5 - 0.5 / 9))


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 50), st.integers(0, 50), st.floats(-5, 5))
def test_olla_update_equals_single_steps(n_ack, n_nack, start):
    s = OllaState(offset=start, step_up=0.1, bound=1e9)
    seq = s
    for _ in range(n_nack):
        seq = olla_step(seq, ack=False)
    for _ in range(n_ack):
        seq = olla_step(seq, ack=True)
    assert olla_update(s, n_ack, n_nack).offset == pytest.approx(seq.offset, abs=1e-9)


def test_olla_offset_is_clamped():
    s = OllaState(step_up=0.1, bound=2.0)
    s = olla_update(s, 0, 1000)
    assert s.offset == 2.0
    s = olla_update(s, 100000, 0)
    assert s.offset == -2.0


def test_olla_zero_drift_at_target():
    rng = np.random.default_rng(0)
    s = OllaState(step_up=0.1, target=0.1, bound=1e9)
    offsets = []
    for nack in rng.random(200_000) < 0.1:
        s = olla_step(s, ack=not nack)
        offsets.append(s.offset)
    offsets = np.abs(np.array(offsets))
    # a zero-drift walk grows like sqrt(n): 4x the steps, about 2x the spread
    early, late = offsets[:50_000].mean(), offsets.mean()
    assert late < 4 * early
    assert abs(s.offset) < 0.1 * 200_000 * 0.1 * 0.05


def test_table_baseline_monotone_in_offset():
    b = TableBaseline()
    cqis = [b.cqi_for_rank(15.0, 2, off) for off in np.linspace(-5, 5, 11)]
    assert cqis == sorted(cqis, reverse=True)
    r, cqi, per_rank = b.select(15.0, TABLE)
    assert per_rank[r] == cqi and r == se_rank_select(per_rank, TABLE, 4)
