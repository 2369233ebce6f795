"""Shared fixtures: the generated suites and a fully trained checkpoint.

Training takes tens of minutes on one core, so the checkpoint is cached under
.cache/ keyed by a fingerprint of the training recipe; delete the directory
to force a retrain after code changes.
"""

import hashlib
import json
from pathlib import Path

import pytest

from memvos.model import ModelConfig, SegModel
from memvos.synthgen import SUITE_SIZES, generate, standard_suites
from memvos.training import default_phase1, default_phase2, train

ACCEPT_PHASE1 = dict(steps=900, batch_size=2, seed=11)
ACCEPT_PHASE2 = dict(steps=2000, batch_size=2, seed=12)
ACCEPT_MODEL_SEED = 1


def _recipe_fingerprint() -> str:
    payload = json.dumps({
        "model": ModelConfig().to_dict(),
        "phase1": ACCEPT_PHASE1,
        "phase2": ACCEPT_PHASE2,
        "suites": SUITE_SIZES,
        "specs": {name: [s.to_json() for s in splits["train"]]
                  for name, splits in standard_suites().items()},
    }, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


@pytest.fixture(scope="session")
def suite_records():
    """All suites rendered in memory: {suite: {split: [SequenceRecord]}}."""
    out = {}
    for name, splits in standard_suites().items():
        out[name] = {split: [generate(s) for s in specs]
                     for split, specs in splits.items()}
    return out


@pytest.fixture(scope="session")
def trained_model(suite_records):
    """The checkpoint behind every learned-behavior criterion."""
    cache = Path(__file__).resolve().parent.parent / ".cache"
    cache.mkdir(exist_ok=True)
    ckpt = cache / f"acceptance-{_recipe_fingerprint()}.npz"
    if ckpt.exists():
        return SegModel.load_checkpoint(ckpt)
    records = (suite_records["short-easy"]["train"]
               + suite_records["long-lra"]["train"])
    model = SegModel(ModelConfig(), seed=ACCEPT_MODEL_SEED)
    model, _ = train(model, records, default_phase1(**ACCEPT_PHASE1),
                     default_phase2(**ACCEPT_PHASE2))
    model.save_checkpoint(ckpt)
    return model


@pytest.fixture(scope="session")
def trained_checkpoint_path(trained_model, tmp_path_factory):
    p = tmp_path_factory.mktemp("ckpt") / "trained.npz"
    trained_model.save_checkpoint(p)
    return p
