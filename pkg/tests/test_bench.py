import pytest

from tmsrep.bench import run_bench
from tmsrep.graph import build_model


@pytest.fixture
def model(tiny_config):
    return build_model(tiny_config)


class TestRunBench:
    def test_stats_ordering(self, model):
        stats = run_bench(model, frames=50, repeats=20, warmup=2, runs=2)
        assert stats.p5_us <= stats.median_us <= stats.p95_us
        assert stats.min_us <= stats.mean_us <= stats.max_us
        assert stats.model_tag == "regular"
        assert stats.total_seconds > 0

    def test_single_repeat_degenerates(self, model):
        stats = run_bench(model, frames=10, repeats=1, warmup=0, runs=1)
        assert stats.p5_us == stats.median_us == stats.p95_us

    def test_json_schema_stable(self, model):
        d = run_bench(model, frames=10, repeats=2, warmup=0, runs=1).as_dict()
        assert {"mean_us", "median_us", "p5_us", "p95_us", "repeats", "warmup", "frames",
                "total_seconds", "model_tag", "note"} <= set(d)

    @pytest.mark.parametrize("kwargs", [{"repeats": 0}, {"runs": 0}, {"warmup": -1}])
    def test_bad_arguments(self, model, kwargs):
        with pytest.raises(ValueError):
            run_bench(model, **{"frames": 10, **kwargs})

    def test_frame_scaling(self, built_models):
        # per-inference time roughly doubles with the frame count
        regular, _ = built_models("rep-e-tms-tdnn")
        short = run_bench(regular, frames=200, repeats=5, warmup=1, runs=1).median_us
        long = run_bench(regular, frames=400, repeats=5, warmup=1, runs=1).median_us
        assert 2 * 0.7 <= long / short <= 2 * 1.3
