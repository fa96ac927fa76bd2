import csv
import json

import numpy as np
import pytest
import torch

from uaspk.harness.analysis import (
    analyze,
    check_model,
    compare_scale_forms,
    mean_scale_by_epoch,
    precision_profile,
    read_samples,
    scale_form_rows,
    scale_histograms,
    sigma_trajectories,
    sigma_vs_difficulty,
    sigma_vs_duration,
)
from uaspk.harness.data import profile_utterance
from uaspk.harness.evaluate import RHO_OPTIONS, embed_utterances, evaluate, metrics_record, rho_value
from uaspk.losses import LambdaVariant
from uaspk.model import SpeakerModel
from uaspk.scoring import Trial, cosine

from conftest import small_model_cfg


def header(path):
    with open(path) as fh:
        return next(csv.reader(fh))


def test_precision_profile_rows(small_run, small_dataset):
    model = small_run[0].model
    levels = [0.25, 1.0, 4.0]
    x, bounds = profile_utterance(small_dataset.cfg, levels, frames_per_segment=20)
    rows, rho = precision_profile(model, x, bounds, levels)
    assert [r["level"] for r in rows] == levels and [(r["start"], r["stop"]) for r in rows] == bounds
    assert all(r["mean_precision"] > 0 for r in rows)
    assert -1.0 <= rho <= 1.0
    assert not model.training


def test_flat_profile_on_uniform_corruption(small_run, small_dataset):
    levels = [0.5] * 6
    x, bounds = profile_utterance(small_dataset.cfg, levels)
    rows, rho = precision_profile(small_run[0].model, x, bounds, levels)
    prec = [r["mean_precision"] for r in rows]
    assert rho is None
    assert (max(prec) - min(prec)) / np.mean(prec) < 0.05


def test_sigma_correlations(small_run, small_dataset):
    model = small_run[0].model
    rows, r = sigma_vs_difficulty(model, small_dataset.train)
    assert len(rows) == 24 and -1 <= r <= 1
    assert all(row["sigma_mean"] > 0 and -2 <= row["dcos"] <= 2 for row in rows)
    rows, r = sigma_vs_duration(model, small_dataset.train)
    assert [row["n_frames"] for row in rows] == [u.n_frames for u in small_dataset.train]


def test_sample_sections(small_run):
    samples = small_run[0].report.samples
    hist = scale_histograms(samples, bins=5)
    for e in range(1, 7):
        counts = [h["count"] for h in hist if h["epoch"] == e]
        assert len(counts) == 5 and sum(counts) == 24
    means = mean_scale_by_epoch(samples)
    assert sorted(means) == list(range(1, 7))
    assert means[3] == pytest.approx(np.mean([s["s_u"] for s in samples if s["epoch"] == 3]))
    traj = sigma_trajectories(samples, n=2)
    assert len(traj) == 2 * 6 and traj[0]["epoch"] == 1
    one = sigma_trajectories(samples, utt_ids=["tr002-001"])
    assert {t["utt_id"] for t in one} == {"tr002-001"}


def test_read_samples_roundtrip(small_run):
    result, out = small_run
    assert read_samples(out / "telemetry_samples.csv") == result.report.samples


def test_scale_forms():
    phi = torch.tensor([[1.0, 2.0], [0.5, -1.0]], dtype=torch.float64)
    stable, exact = compare_scale_forms(phi, torch.zeros_like(phi), 1.0)
    assert torch.all(stable == 1.0) and torch.all(exact == 1.0)


def test_scale_form_rows(small_run, small_dataset):
    rows = scale_form_rows(small_run[0].model, small_dataset.train[:5], LambdaVariant("one_minus_dcos"))
    assert len(rows) == 5 and all(0 < r["stable"] and 0 < r["exact"] for r in rows)


def test_analyze_writes_sections(small_run, small_dataset, tmp_path):
    result, _ = small_run
    summary = analyze(result.model, small_dataset, tmp_path, samples=result.report.samples)
    assert set(summary) == {"precision_profile_spearman", "sigma_dcos_pearson", "sigma_duration_pearson"}
    assert header(tmp_path / "precision_profile.csv") == ["segment", "start", "stop", "level", "mean_precision"]
    assert header(tmp_path / "sigma_vs_dcos.csv") == ["utt_id", "sigma_mean", "dcos"]
    assert header(tmp_path / "sigma_vs_duration.csv") == ["utt_id", "n_frames", "sigma_mean"]
    assert header(tmp_path / "scale_histograms.csv") == ["epoch", "bin_lo", "bin_hi", "count"]
    assert header(tmp_path / "sigma_trajectories.csv") == ["utt_id", "epoch", "sigma_mean"]


def test_analyze_mean_pooling_has_no_sigma_sections(small_dataset, tmp_path):
    model = SpeakerModel(small_model_cfg(pooling="mean"))
    summary = analyze(model, small_dataset, tmp_path)
    assert list(summary) == ["precision_profile_spearman"]
    assert not (tmp_path / "sigma_vs_dcos.csv").exists()


def test_analyze_rejects_nan_model(small_dataset, tmp_path):
    model = SpeakerModel(small_model_cfg())
    with torch.no_grad():
        model.classifier[0, 0] = float("nan")
    with pytest.raises(ValueError, match="classifier"):
        check_model(model)
    with pytest.raises(ValueError):
        analyze(model, small_dataset, tmp_path)


# -- evaluate -------------------------------------------------------------------

def test_rho_values(small_run):
    model = small_run[0].model
    assert rho_value("0", model) == 0.0 and rho_value("1", model) == 1.0
    assert rho_value("inv_d", model) == 1 / 4
    assert rho_value("alpha", model) == float(model.alpha.detach())
    with pytest.raises(ValueError):
        rho_value("2", model)


def test_evaluate_all_options(small_run, small_dataset, tmp_path):
    model = small_run[0].model
    res = evaluate(model, small_dataset.eval, small_dataset.trials, RHO_OPTIONS, out_dir=tmp_path)
    assert list(res) == list(RHO_OPTIONS)
    for opt, r in res.items():
        assert 0 <= r["eer"] <= 1 and r["min_dcf"] >= 0 and r["n_trials"] == 36
        assert (tmp_path / f"scores_rho_{opt}.txt").exists() and (tmp_path / f"det_rho_{opt}.csv").exists()
    record = json.loads((tmp_path / "metrics.json").read_text())
    assert record == json.loads(json.dumps(metrics_record(res)))
    assert set(record["0"]) == {"eer", "min_dcf", "rho", "n_trials", "det_points_path"}


def test_rho_zero_matches_plain_cosine(small_run, small_dataset, tmp_path):
    model = small_run[0].model
    evaluate(model, small_dataset.eval, small_dataset.trials, ["0"], out_dir=tmp_path)
    emb = embed_utterances(model, small_dataset.eval)
    lines = (tmp_path / "scores_rho_0.txt").read_text().splitlines()
    for t, line in zip(small_dataset.trials, lines):
        assert float(line.split()[2]) == cosine(emb[t.enroll_id].phi_s, emb[t.test_id].phi_s)


def test_self_trials_score_one(small_run, small_dataset):
    utts = small_dataset.eval[:3]
    trials = [Trial(u.utt_id, u.utt_id, True) for u in utts] + [Trial(utts[0].utt_id, utts[1].utt_id, False)]
    res = evaluate(small_run[0].model, utts, trials, ["0"])
    assert res["0"]["det"][0].far == 1.0
    emb = embed_utterances(small_run[0].model, utts)
    assert all(cosine(emb[u.utt_id].phi_s, emb[u.utt_id].phi_s) == 1.0 for u in utts)


def test_evaluate_unknown_id(small_run, small_dataset):
    with pytest.raises(KeyError, match="nope"):
        evaluate(small_run[0].model, small_dataset.eval, [Trial("nope", small_dataset.eval[0].utt_id, True)])
