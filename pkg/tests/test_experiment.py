import csv

import numpy as np
import pytest

from proxdiff import experiment
from proxdiff.config import parse_config
from proxdiff.errors import StageError
from proxdiff.experiment import read_points, reference_samples, run_experiment, write_points

TINY = """
experiment_id = tiny
target = ring
iters = 30
batch = 32
hidden = 16
depth = 1
steps = 4, 10
samplers = pda-hybrid, sde-euler
seeds = 0, 1
eval_samples = 40
"""

WITH_GRPO = TINY.replace("seeds = 0, 1", "seeds = 0") + """
reward = mode-dist
grpo = true
grpo.updates = 2
grpo.group = 4
grpo.prompts_per_batch = 2
grpo.accum = 1
"""


def run(text, out):
    return run_experiment(parse_config(text + f"\noutput_dir = {out}\n"))


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def tiny_runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("exp")
    return run(TINY, base / "a"), run(TINY, base / "b")


def test_metrics_rows(tiny_runs):
    rows = read_csv(tiny_runs[0] / "metrics.csv")
    assert len(rows) == 2 * 2 * 2  # samplers x step counts x seeds
    assert list(rows[0]) == experiment.METRIC_FIELDS
    cells = {(r["sampler"], r["K"], r["seed"]) for r in rows}
    assert len(cells) == 8
    assert all(float(r["energy_distance"]) == float(r["energy_distance"]) for r in rows)
    assert all(r["stage"] == "pretrain" and r["mean_reward"] == "" for r in rows)


def test_byte_identical_reruns(tiny_runs):
    a, b = tiny_runs
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
    for f in sorted((a / "samples").iterdir()):
        assert f.read_bytes() == (b / "samples" / f.name).read_bytes()
    for f in sorted((a / "checkpoints").iterdir()):
        assert f.read_bytes() == (b / "checkpoints" / f.name).read_bytes()


def test_manifest_lists_every_artifact(tiny_runs):
    out = tiny_runs[0]
    text = (out / "manifest.txt").read_text()
    assert "| experiment_id = tiny" in text
    listed = {line.split("  ", 1)[1]: line.split("  ", 1)[0]
              for line in text.splitlines() if not line.startswith(("#", "|"))}
    files = {p.relative_to(out).as_posix() for p in out.rglob("*")
             if p.is_file() and p.name != "manifest.txt"}
    assert set(listed) == files
    assert listed["metrics.csv"] == experiment.sha256_file(out / "metrics.csv")
    assert {"curves/prox-seed0.csv", "curves/score-seed1.csv",
            "checkpoints/pretrain-prox-seed0.ckpt", "timings.csv"} <= files


def test_grpo_stage(tmp_path):
    out = run(WITH_GRPO, tmp_path / "g")
    rows = read_csv(out / "metrics.csv")
    stages = [r["stage"] for r in rows]
    assert stages.count("pretrain") == 4 and stages.count("grpo") == 2
    assert all(r["sampler"] == "pda-hybrid" for r in rows if r["stage"] == "grpo")
    assert all(r["mean_reward"] != "" for r in rows)
    assert len(read_csv(out / "curves" / "grpo-seed0.csv")) == 2
    assert (out / "checkpoints" / "grpo-prox-seed0.ckpt").is_file()


def test_missing_pretrain_checkpoint_is_named(tmp_path, monkeypatch):
    real = experiment.save_checkpoint

    def skip_prox(net, meta, path):
        if "prox" not in str(path):
            return real(net, meta, path)

    monkeypatch.setattr(experiment, "save_checkpoint", skip_prox)
    with pytest.raises(StageError, match="pretrain-prox-seed0.ckpt") as info:
        run(WITH_GRPO, tmp_path / "m")
    assert info.value.stage == "grpo" and info.value.seed == 0


def test_points_roundtrip_and_cap(tmp_path):
    pts = np.random.default_rng(0).normal(size=(50, 2)) * 1e-7
    assert np.array_equal(read_points(write_points(tmp_path / "p.csv", pts)), pts)
    capped = read_points(write_points(tmp_path / "q.csv", pts, max_rows=10))
    assert capped.shape == (10, 2)


def test_reference_samples_deterministic():
    from proxdiff.targets import ring_target
    a, la = reference_samples(ring_target(), 30, 5)
    b, lb = reference_samples(ring_target(), 30, 5)
    assert np.array_equal(a, b) and np.array_equal(la, lb) and len(a) == 60
