"""Trial scoring of a trained model under the uncertainty-aware cosine."""
import os

from ..pooling import EmbeddingWithUncertainty
from ..scoring import det_curve, eer, min_dcf, score_trials, write_det_csv, write_metrics, write_scores

RHO_OPTIONS = ("0", "inv_d", "alpha", "1")


def rho_value(option, model):
    option = str(option)
    if option == "0":
        return 0.0
    if option == "inv_d":
        return 1.0 / model.cfg.d_out
    if option == "alpha":
        return float(model.alpha.detach())
    if option == "1":
        return 1.0
    raise ValueError(f"unknown rho option {option!r}; expected one of {RHO_OPTIONS}")


def embed_utterances(model, utterances):
    """``{utt_id: EmbeddingWithUncertainty}`` in eval mode."""
    emb = model.extract([u.features for u in utterances])
    return {u.utt_id: EmbeddingWithUncertainty(emb.phi_s[i], emb.sigma_s[i]) for i, u in enumerate(utterances)}


def evaluate(model, utterances, trials, rho_options=RHO_OPTIONS, out_dir=None):
    """EER, minDCF and DET for each rho option.

    ``utterances`` must cover every id in ``trials``; a missing id raises
    ``KeyError``.  With ``out_dir`` the scores, DET points and a metrics
    JSON are written per option.
    """
    needed = {t.enroll_id for t in trials} | {t.test_id for t in trials}
    pool = [u for u in utterances if u.utt_id in needed]
    missing = needed - {u.utt_id for u in pool}
    if missing:
        raise KeyError(f"no features for trial utterances: {sorted(missing)[:5]}")
    emb = embed_utterances(model, pool)
    results = {}
    for opt in rho_options:
        rho = rho_value(opt, model)
        ss = score_trials(trials, emb, rho)
        det = det_curve(ss)
        det_path = None
        if out_dir:
            os.makedirs(out_dir, exist_ok=True)
            det_path = os.path.join(out_dir, f"det_rho_{opt}.csv")
            write_scores(os.path.join(out_dir, f"scores_rho_{opt}.txt"), trials, ss)
            write_det_csv(det_path, det)
        results[str(opt)] = {"rho": rho, "eer": eer(ss), "min_dcf": min_dcf(ss), "det": det,
                             "n_trials": len(trials), "det_points_path": det_path}
    if out_dir:
        write_metrics(os.path.join(out_dir, "metrics.json"), metrics_record(results))
    return results


def metrics_record(results):
    keys = ("eer", "min_dcf", "rho", "n_trials", "det_points_path")
    return {opt: {k: v[k] for k in keys} for opt, v in results.items()}
