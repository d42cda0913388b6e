import csv
import json
import shutil

import pytest

from bdlab.checkpoint import load_checkpoint, to_bytes
from bdlab.cli import main
from bdlab.metrics import MetricsRow, write_metrics_csv

TINY = {
    "model": {"hidden": 16, "blocks": 1, "time_dim": 8},
    "pretrain": {"iterations": 200, "batch_size": 32, "eval_every": 100},
    "finetune": {"iterations": 60, "checkpoint_every": 20},
    "metrics": {"samples": 20, "sampler_steps": 10, "sigma1_samples": 8},
    "probe": {"draws": 4},
}


def write_config(directory, kind="ring", **sections):
    raw = {"name": f"tiny-{kind}", "data": {"kind": kind}, "pretrained": "pre/pretrained.bdlab"}
    for name, fields in {**TINY, **sections}.items():
        raw[name] = {**raw.get(name, {}), **fields}
    path = directory / f"{kind}.json"
    path.write_text(json.dumps(raw), encoding="utf-8")
    return path


@pytest.fixture(scope="module")
def ring_run(tmp_path_factory):
    """Pretrain plus BNN-off and BNN-on fine-tunes of a tiny ring config."""
    root = tmp_path_factory.mktemp("cli")
    cfg = write_config(root)
    assert main(["pretrain", "--config", str(cfg), "--out", str(root / "pre")]) == 0
    for arm in ("off", "on"):
        for seed in (0, 1):
            code = main(["finetune", "--config", str(cfg), "--bnn", arm, "--seed", str(seed), "--out", str(root / f"ft_{arm}")])
            assert code == 0
    return root, cfg


def manifest(path):
    return json.loads((path / "manifest.json").read_text(encoding="utf-8"))


class TestExitCodes:
    def test_missing_config(self, tmp_path, capsys):
        assert main(["pretrain", "--config", str(tmp_path / "none.json"), "--out", str(tmp_path)]) == 2
        assert "not found" in capsys.readouterr().err

    def test_invalid_field(self, tmp_path, capsys):
        cfg = write_config(tmp_path, model={"hidden": 0})
        assert main(["pretrain", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
        assert "model" in capsys.readouterr().err

    def test_usage_errors(self, tmp_path):
        assert main([]) == 2
        assert main(["finetune", "--config", "x.json", "--out", str(tmp_path), "--bnn", "maybe"]) == 2

    def test_missing_pretrained(self, tmp_path):
        cfg = write_config(tmp_path)
        assert main(["finetune", "--config", str(cfg), "--out", str(tmp_path / "ft")]) == 2

    def test_divergence(self, tmp_path, capsys):
        cfg = write_config(tmp_path, pretrain={"lr": 1e4, "iterations": 50})
        assert main(["pretrain", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 3
        assert "numeric failure" in capsys.readouterr().err

    def test_help(self, capsys):
        assert main(["--help"]) == 0
        assert "pretrain" in capsys.readouterr().out


class TestPretrain:
    def test_outputs(self, ring_run):
        root, cfg = ring_run
        pre = root / "pre"
        m = manifest(pre)
        assert m["stage"] == "pretrain" and m["status"] == {"pretrain": "complete"}
        assert {o["path"] for o in m["outputs"]} == {"pretrained.bdlab", "pretrain_loss.csv", "config.json"}
        model, sched, meta = load_checkpoint(pre / "pretrained.bdlab")
        assert to_bytes(model, sched, meta) == (pre / "pretrained.bdlab").read_bytes()

    def test_rerun_same_hash(self, ring_run, tmp_path):
        root, cfg = ring_run
        assert main(["pretrain", "--config", str(cfg), "--out", str(tmp_path / "again")]) == 0
        assert manifest(tmp_path / "again")["config_hash"] == manifest(root / "pre")["config_hash"]
        assert (tmp_path / "again" / "pretrained.bdlab").read_bytes() == (root / "pre" / "pretrained.bdlab").read_bytes()


class TestFinetune:
    def test_bnn_off_has_no_variational_parameters(self, ring_run):
        root, _ = ring_run
        m = manifest(root / "ft_off" / "seed_0")
        assert m["bnn"] is False and m["variational_parameters"] == 0 and m["variational_tensors"] == 0

    def test_bnn_on(self, ring_run):
        root, _ = ring_run
        m = manifest(root / "ft_on" / "seed_1")
        assert m["bnn"] is True and m["variational_parameters"] > 0 and m["seed"] == 1
        assert m["pretrained_sha256"] == manifest(root / "pre")["outputs"][0]["sha256"]

    def test_outputs(self, ring_run):
        root, _ = ring_run
        run = root / "ft_off" / "seed_0"
        names = sorted(p.name for p in run.iterdir())
        assert names == [
            "ckpt_000000.bdlab", "ckpt_000020.bdlab", "ckpt_000040.bdlab", "ckpt_000060.bdlab",
            "config.json", "manifest.json", "metrics.csv",
        ]
        with (run / "metrics.csv").open(encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        assert [int(r["iteration"]) for r in rows] == [0, 20, 40, 60]
        assert json.loads((run / "config.json").read_text())["adapter"]["bayesian"] is False

    def test_lambda_override(self, ring_run, tmp_path):
        root, cfg = ring_run
        out = tmp_path / "lam"
        assert main(["finetune", "--config", str(cfg), "--bnn", "on", "--lambda", "0.1", "--out", str(out)]) == 0
        m = manifest(out / "seed_0")
        assert m["lambda"] == 0.1 and m["config_hash"] != manifest(root / "ft_on" / "seed_0")["config_hash"]
        assert main(["finetune", "--config", str(cfg), "--lambda", "-1", "--out", str(out)]) == 2


class TestProbe:
    @pytest.mark.parametrize("kind, n", [("zero", 1), ("scale", 4)])
    def test_records(self, ring_run, tmp_path, capsys, kind, n):
        root, cfg = ring_run
        ckpt = root / "ft_off" / "seed_0" / "ckpt_000060.bdlab"
        assert main(["probe", "--config", str(cfg), "--checkpoint", str(ckpt), "--kind", kind, "--out", str(tmp_path)]) == 0
        lines = (tmp_path / f"probe_{kind}.jsonl").read_text(encoding="utf-8").splitlines()
        recs = [json.loads(x) for x in lines]
        assert len(recs) == n and all(r["checkpoint_iteration"] == 60 for r in recs)
        assert f"{kind} probe" in capsys.readouterr().out

    def test_unknown_kind(self, ring_run, tmp_path):
        root, cfg = ring_run
        ckpt = root / "pre" / "pretrained.bdlab"
        assert main(["probe", "--config", str(cfg), "--checkpoint", str(ckpt), "--kind", "bogus", "--out", str(tmp_path)]) == 2

    def test_delta_needs_rasters(self, ring_run, tmp_path):
        root, cfg = ring_run
        ckpt = root / "pre" / "pretrained.bdlab"
        assert main(["probe", "--config", str(cfg), "--checkpoint", str(ckpt), "--kind", "delta", "--out", str(tmp_path)]) == 2

    def test_delta_zero_magnitude(self, tmp_path):
        cfg = write_config(tmp_path, kind="raster", pretrain={"iterations": 20, "eval_every": 10}, probe={"magnitude": 0.0, "draws": 4})
        assert main(["pretrain", "--config", str(cfg), "--out", str(tmp_path / "pre")]) == 0
        ckpt = tmp_path / "pre" / "pretrained.bdlab"
        assert main(["probe", "--config", str(cfg), "--checkpoint", str(ckpt), "--kind", "delta", "--out", str(tmp_path / "p")]) == 0
        (rec,) = [json.loads(x) for x in (tmp_path / "p" / "probe_delta.jsonl").read_text().splitlines()]
        assert rec["ratio"] == 0.0 and rec["region_residual"] == pytest.approx(rec["baseline_residual"])


class TestReport:
    def test_paired_arms(self, ring_run, tmp_path, capsys):
        root, _ = ring_run
        # four checkpoints are too few for the detector, so each run's manifest is
        # paired with a longer monotone series
        csvs = []
        for arm in ("off", "on"):
            for s in (0, 1):
                run = tmp_path / "runs" / arm / f"seed_{s}"
                run.mkdir(parents=True)
                shutil.copy(root / f"ft_{arm}" / f"seed_{s}" / "manifest.json", run)
                rows = [MetricsRow(i * 10, 0.5 + 0.01 * i, 1.0, 1.0) for i in range(6)]
                csvs.append(str(write_metrics_csv(run / "metrics.csv", rows)))
        assert main(["report", *csvs, "--out", str(tmp_path)]) == 0
        with (tmp_path / "comparison.csv").open(encoding="utf-8") as fh:
            table = list(csv.DictReader(fh))
        assert [(r["arm"], r["seeds"]) for r in table] == [("bnn-off", "2"), ("bnn-on", "2")]
        out = capsys.readouterr().out
        assert out.count("no corruption detected") == 4
        corruption = json.loads((tmp_path / "corruption.json").read_text())
        assert len(corruption) == 4 and not any(c["detected"] for c in corruption)
        with (tmp_path / "long.csv").open(encoding="utf-8") as fh:
            long = list(csv.DictReader(fh))
        assert len(long) == 4 * 6 * 6 and set(long[0]) == {"run", "arm", "seed", "iteration", "metric", "value"}

    def test_detects_dip(self, tmp_path, capsys):
        values = [0.5, 0.7, 0.8, 0.6, 0.5, 0.5, 0.7, 0.8, 0.8]
        path = write_metrics_csv(tmp_path / "dip.csv", [MetricsRow(i * 80, v, 1.0, 1.0) for i, v in enumerate(values)])
        assert main(["report", str(path), "--out", str(tmp_path / "r")]) == 0
        out = capsys.readouterr().out
        assert "corruption detected" in out and "no corruption" not in out
        (rec,) = json.loads((tmp_path / "r" / "corruption.json").read_text())
        assert rec["arm"] == "unknown" and rec["trough_iteration"] in (320, 400)

    def test_schema_mismatch(self, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text("iteration,score\n0,1\n", encoding="utf-8")
        assert main(["report", str(bad), "--out", str(tmp_path / "r")]) == 2

    def test_missing_csv(self, tmp_path):
        assert main(["report", str(tmp_path / "none.csv"), "--out", str(tmp_path / "r")]) == 2
