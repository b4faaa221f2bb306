import pytest

from geco.bench import BenchError, bench, bench_instance
from geco.ot import SolverConfig


def test_report_shape_is_stable():
    r1 = bench([20, 30], runs=100, warmup=1, threads=2)
    r2 = bench([20, 30], runs=100, warmup=1, threads=2)

    def shape(obj):
        if isinstance(obj, dict):
            return {k: shape(v) for k, v in obj.items()}
        if isinstance(obj, list):
            return [shape(v) for v in obj]
        return type(obj).__name__

    assert shape(r1) == shape(r2)
    row = r1["results"][0]
    assert row["side"] == 20 and row["runs"] == 100
    assert row["single_thread"]["std_ms"] >= 0
    assert row["multi_thread"]["threads"] == 2
    assert row["single_thread"]["min_ms"] <= row["single_thread"]["mean_ms"] <= row["single_thread"]["max_ms"]


def test_bench_validation():
    with pytest.raises(BenchError):
        bench([20], runs=10)
    with pytest.raises(BenchError):
        bench([])
    with pytest.raises(BenchError):
        bench_instance(1, SolverConfig())


def test_instance_is_seeded():
    c1, _ = bench_instance(10, SolverConfig(), seed=4)
    c2, _ = bench_instance(10, SolverConfig(), seed=4)
    assert c1.entries.tobytes() == c2.entries.tobytes()
