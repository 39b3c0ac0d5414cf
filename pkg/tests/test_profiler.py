import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from warcflow.profiler import (
    InsufficientData,
    UndefinedRatio,
    measure_rates,
    recommend_ratio,
)


def pstats(kept, wall, read=None):
    return {"records_kept": kept, "records_read": read or kept, "wall_time": wall}


def cstats(samples, busy, wall=None):
    return {"samples_processed": samples, "busy_time": busy,
            "wall_time": wall if wall is not None else busy}


@pytest.mark.parametrize("producer,consumer,expected", [
    (250.0, 1000.0, 4),
    (300.0, 1000.0, 4),   # ceil(3.33)
    (1000.0, 1000.0, 1),
    (1001.0, 1000.0, 1),
    (100.0, 101.0, 2),    # strictly above 1x rounds up
])
def test_ratio_pinned(producer, consumer, expected):
    assert recommend_ratio(producer, consumer) == expected


def test_ratio_undefined_on_nonpositive():
    with pytest.raises(UndefinedRatio):
        recommend_ratio(0.0, 100.0)
    with pytest.raises(UndefinedRatio):
        recommend_ratio(100.0, 0.0)
    with pytest.raises(UndefinedRatio):
        recommend_ratio(-5.0, 100.0)


@settings(max_examples=100, deadline=None)
@given(st.floats(0.001, 1e6), st.floats(0.001, 1e6))
def test_ratio_is_least_sufficient_count(pr, cr):
    k = recommend_ratio(pr, cr)
    assert k * pr >= cr * (1 - 1e-9)
    if k > 1:
        assert (k - 1) * pr < cr * (1 + 1e-9)


def test_measure_rates_means_across_workers():
    report = measure_rates(
        [pstats(500, 2.0), pstats(300, 1.0)],  # rates 250 and 300
        cstats(4000, 4.0))
    assert report.producer_rate == pytest.approx(275.0)
    assert report.consumer_rate == pytest.approx(1000.0)
    assert report.recommended_ratio == 4
    assert report.error is None


def test_measure_rates_selectivity():
    report = measure_rates(
        [pstats(30, 2.0, read=120), pstats(10, 2.0, read=40)],
        cstats(40, 2.0))
    assert report.selectivity == pytest.approx(40 / 160)


def test_measurement_floor():
    with pytest.raises(InsufficientData):
        measure_rates([pstats(100, 0.5)], cstats(100, 2.0))
    with pytest.raises(InsufficientData):
        measure_rates([pstats(100, 2.0)], cstats(100, 2.0, wall=0.2))
    with pytest.raises(InsufficientData):
        measure_rates([], cstats(100, 2.0))


def test_zero_consumer_rate_reports_error_not_crash():
    report = measure_rates([pstats(100, 2.0)], cstats(0, 0.0, wall=2.0))
    assert report.consumer_rate == 0.0
    assert report.recommended_ratio is None
    assert report.error
    assert report.to_dict()["recommended_ratio"] is None


def test_zero_producer_rate_reports_error_not_crash():
    report = measure_rates([pstats(0, 2.0, read=50)], cstats(100, 1.5))
    assert report.producer_rate == 0.0
    assert report.recommended_ratio is None
    assert report.error
