import json

import numpy as np
import pytest

from prextract import campaign
from prextract.campaign import ASR_COLUMNS, SUMMARY_COLUMNS, emit_plot_data, read_csv, run_campaign
from prextract.config import parse_config
from prextract.extraction import RunRecord

from helpers import TINY


def tiny(**overrides):
    doc = json.loads(json.dumps(TINY))
    doc.update(overrides)
    return parse_config(doc)


def test_single_cell_campaign(tmp_path):
    cfg = tiny(methods=["RS"], seeds=[0], extraction={"budgets": [50], "itera": 5, "train": {"epochs": 2}})
    res = run_campaign(cfg, tmp_path)
    assert len(res.records) == 1 and len(res.summary) == 1
    rows = read_csv(tmp_path / "summary.csv")
    assert list(rows[0]) == SUMMARY_COLUMNS
    assert rows[0]["method"] == "RS" and rows[0]["budget"] == "50" and rows[0]["spend"] == "50"
    assert list(read_csv(tmp_path / "asr.csv")[0]) == ASR_COLUMNS
    rec = RunRecord.load(tmp_path / "runs" / "RS_b50_seed0.json")
    assert rec.to_dict() == res.records[0].to_dict()
    assert (tmp_path / "runs" / rec.checkpoint).exists()


def test_rerun_is_byte_identical_and_thread_independent(tmp_path):
    run_campaign(tiny(), tmp_path / "a")
    run_campaign(tiny(), tmp_path / "b", threads=2)
    for name in ("summary.csv", "asr.csv", "victims.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    rows = read_csv(tmp_path / "a" / "summary.csv")
    assert [(r["seed"], r["method"], r["budget"]) for r in rows] == [
        (s, m, b) for s in "01" for m in ("RS", "SimCLR") for b in ("20", "40")]
    assert all(float(r["currency"]) == 0.0 for r in rows)


def test_cached_artifacts_reused(tmp_path):
    cfg = tiny(seeds=[0])
    run_campaign(cfg, tmp_path)
    first = (tmp_path / "summary.csv").read_bytes()
    run_campaign(cfg, tmp_path)
    assert (tmp_path / "summary.csv").read_bytes() == first
    assert len(list((tmp_path / "victims").glob("*.ckpt"))) == 1


def test_failed_cell_recorded_and_campaign_continues(tmp_path, monkeypatch):
    real = campaign.run_cell

    def flaky(cfg, spec, budget, seed, *a, **kw):
        if spec.name == "SimCLR" and budget == 40:
            raise RuntimeError("boom")
        return real(cfg, spec, budget, seed, *a, **kw)

    monkeypatch.setattr(campaign, "run_cell", flaky)
    res = run_campaign(tiny(seeds=[0]), tmp_path)
    assert len(res.summary) == 2 * 2 - 1
    (fail,) = read_csv(tmp_path / "failures.csv")
    assert fail["method"] == "SimCLR" and fail["budget"] == "40" and "boom" in fail["error"]


def test_thread_count_env(monkeypatch):
    monkeypatch.setenv("PREXTRACT_THREADS", "3")
    assert campaign.thread_count() == 3
    monkeypatch.setenv("PREXTRACT_THREADS", "x")
    with pytest.raises(ValueError):
        campaign.thread_count()


# ---------------------------------------------------------------- plot data

def fake_summary():
    rng = np.random.default_rng(0)
    return [{"method": m, "budget": str(b), "seed": str(s), "fidelity": f"{rng.uniform():.6f}"}
            for m in ("RS", "MoCo") for b in (400, 100, 200) for s in range(5)]


def test_plot_series_sorted_and_aggregated(tmp_path):
    summary = fake_summary()
    asr = [{"method": "RS", "budget": str(b), "seed": str(s), "epsilon": str(e), "asr": str(0.1 * s + e)}
           for b in (100, 400) for s in range(3) for e in (0.24, 0.03)]
    written = emit_plot_data(summary, asr, tmp_path)
    assert sorted(p.name for p in written) == ["asr_RS.csv", "fidelity_MoCo.csv", "fidelity_RS.csv"]
    series = read_csv(tmp_path / "fidelity_RS.csv")
    assert [r["budget"] for r in series] == ["100", "200", "400"]
    for r in series:
        vals = [float(x["fidelity"]) for x in summary if x["method"] == "RS" and x["budget"] == r["budget"]]
        mean = sum(vals) / len(vals)
        std = (sum((v - mean) ** 2 for v in vals) / (len(vals) - 1)) ** 0.5
        assert float(r["mean"]) == pytest.approx(mean, abs=1e-6)
        assert float(r["std"]) == pytest.approx(std, abs=1e-6) and r["n"] == "5"
    eps_rows = read_csv(tmp_path / "asr_RS.csv")
    assert [float(r["epsilon"]) for r in eps_rows] == [0.03, 0.24]
    assert float(eps_rows[0]["mean"]) == pytest.approx(0.13, abs=1e-6)


def test_plot_empty_writes_nothing(tmp_path):
    assert emit_plot_data([], [], tmp_path / "plot") == []
    assert not (tmp_path / "plot").exists()
