import pytest

from aptlm import plotting
from aptlm.storage import MetricsLog

PNG = b"\x89PNG"


def test_loss_curves(tmp_path):
    log = MetricsLog(tmp_path / "metrics.csv")
    for stage in (0, 1):
        for step in range(40):
            log.append({"step": step, "stage": stage, "task": "AT", "loss": 1.0 / (step + 1)})
    path = plotting.loss_curves(tmp_path / "metrics.csv")
    assert path == tmp_path / "metrics.png" and path.read_bytes()[:4] == PNG
    MetricsLog(tmp_path / "empty.csv")
    with pytest.raises(ValueError):
        plotting.loss_curves(tmp_path / "empty.csv")


def test_ablation_bars_tolerates_failed_arm(tmp_path):
    rows = [{"arm": "a", "x": 0.5, "y": 0.2}, {"arm": "b", "x": float("nan"), "y": 0.9}]
    assert plotting.ablation_bars(rows, ("x", "y"), tmp_path / "bars.png", "axis").read_bytes()[:4] == PNG


@pytest.mark.parametrize("results", [{2: 0.7, 4: 0.9}, {"a": {2: 0.5}, "b": {2: 0.6, 5: 0.3}}, {}])
def test_fewshot_sweep(tmp_path, results):
    assert plotting.fewshot_sweep(results, tmp_path / "s.png").read_bytes()[:4] == PNG
