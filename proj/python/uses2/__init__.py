# Copyright 2026 The uses2 Authors
# License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)
"""Python access to the uses2 speech enhancement library."""

import json

from . import _core
from ._core import Error, build_corpus, istft, loss, lr_at, read_wav, sdr, si_sdr, stft, write_wav

__all__ = [
    "Error",
    "Model",
    "build_corpus",
    "evaluate",
    "istft",
    "loss",
    "lr_at",
    "read_wav",
    "sdr",
    "si_sdr",
    "stft",
    "write_wav",
]


class Model:
    """Enhancement model backed by the C++ implementation."""

    def __init__(self, core):
        self._core = core

    @classmethod
    def build(cls, config=None, seed=0):
        return cls(_core.Model.build(json.dumps(config or {"variant": "comp"}), seed))

    @classmethod
    def load(cls, ckpt_dir):
        return cls(_core.Model.load(str(ckpt_dir)))

    def save(self, ckpt_dir):
        self._core.save(str(ckpt_dir))

    def enhance(self, mixture, rate_hz):
        return self._core.enhance(mixture, rate_hz)

    @property
    def config(self):
        return json.loads(self._core.config_json)

    @property
    def num_params(self):
        return self._core.num_params

    def stats(self):
        return json.loads(self._core.stats_json())


def evaluate(manifest, model=None):
    """Scores a manifest; without a model the noisy reference channel is scored."""
    return json.loads(_core.evaluate_json(model._core if model else None, str(manifest)))
