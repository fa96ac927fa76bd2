import sys

import pytest

from uaspk.encoder import EncoderConfig, MVAConfig
from uaspk.harness import SyntheticDatasetConfig, TrainingConfig, generate_dataset, train
from uaspk.model import ModelConfig

SMALL_DATA = dict(n_speakers=4, utts_per_speaker=6, frames_per_utt=(10, 20), feature_dim=6,
                  n_eval_speakers=3, eval_utts_per_speaker=3, seed=1)


def small_model_cfg(n_classes=4, **kw):
    enc = EncoderConfig(feature_dim=6, trunk_widths=[8], trunk_activations=["relu"], embed_dim=4,
                        mva=MVAConfig(n_heads=2, d_model=8, d_ff=8))
    return ModelConfig(n_classes=n_classes, encoder=enc, d_out=4, **kw)


def small_training_cfg(**kw):
    base = dict(epochs=6, batch_size=8, optimizer="adam", learning_rate=1e-3, lr_final=1e-4, seed=1)
    base.update(kw)
    return TrainingConfig(**base)


@pytest.fixture(scope="session")
def small_dataset():
    return generate_dataset(SyntheticDatasetConfig(**SMALL_DATA))


@pytest.fixture(scope="session")
def small_run(small_dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("small_run")
    result = train(small_dataset, small_training_cfg(loss="uaam+svl"), small_model_cfg(), out_dir=str(out))
    return result, out


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
