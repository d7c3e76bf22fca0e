import numpy as np
import pytest
import torch

from unitflow import benchkit, units

torch.set_num_threads(1)


def make_tone(freq_hz: float, duration_s: float, sample_rate: int = 16000, amp: float = 0.5):
    n = int(round(duration_s * sample_rate))
    t = np.arange(n) / sample_rate
    return amp * np.sin(2 * np.pi * freq_hz * t)


@pytest.fixture(scope="session")
def mini_corpus(tmp_path_factory):
    """Small paired corpus plus codebook shared by fast tests."""
    root = tmp_path_factory.mktemp("mini_corpus")
    manifest_path = benchkit.build_corpus(
        root,
        n_train=6,
        n_test=2,
        script_len=(3, 5),
        degrade_cfg=benchkit.DegradeConfig(severity=0.5),
        seed=123,
    )
    manifest = benchkit.load_manifest(manifest_path)
    bank = benchkit.default_bank()
    from unitflow import dsp

    mats = [
        benchkit.mel_to_features(dsp.read_mel(manifest.abspath(e.clean_mel)).frames, bank)
        for e in manifest.split("train")
    ]
    codebook = units.fit_kmeans(np.vstack(mats), 8, seed=5, n_init=2)
    return manifest, codebook
