import pytest

from unitflow import config
from unitflow.errors import InvalidInput


def test_defaults_load_without_file():
    rc = config.load_config()
    assert rc.get("run", "seed") == 0
    assert rc.get("model", "layers") == 4
    assert rc.get("sway", "s") == -1.0
    mc = rc.model_config()
    assert mc.unit_vocab == rc.get("run", "k") + 2


def test_file_overrides_defaults(tmp_path):
    p = tmp_path / "x.cfg"
    p.write_text("[run]\nk = 8\n\n[pretrain]\npeak_lr = 5e-3\n")
    rc = config.load_config(p)
    assert rc.get("run", "k") == 8
    assert rc.get("pretrain", "peak_lr") == 5e-3
    # Untouched values keep their defaults.
    assert rc.get("model", "dim") == 128


def test_cli_overrides_beat_file(tmp_path):
    p = tmp_path / "x.cfg"
    p.write_text("[run]\nseed = 3\n")
    rc = config.load_config(p, overrides={("run", "seed"): "9"})
    assert rc.get("run", "seed") == 9


def test_unknown_section_and_key_rejected(tmp_path):
    p = tmp_path / "bad.cfg"
    p.write_text("[nonsense]\nx = 1\n")
    with pytest.raises(InvalidInput):
        config.load_config(p)
    p.write_text("[run]\nbogus_key = 1\n")
    with pytest.raises(InvalidInput):
        config.load_config(p)


def test_int_keys_reject_floats(tmp_path):
    p = tmp_path / "bad.cfg"
    p.write_text("[run]\nk = 8.5\n")
    with pytest.raises(InvalidInput):
        config.load_config(p)


def test_missing_file_raises(tmp_path):
    with pytest.raises(InvalidInput):
        config.load_config(tmp_path / "absent.cfg")


def test_derived_config_objects():
    rc = config.load_config()
    tc = rc.train_config("pretrain")
    assert tc.stage == "pretrain"
    assert tc.total_updates == rc.get("pretrain", "total_updates")
    ft = rc.train_config("finetune", ablation_mode="mel_input")
    assert ft.ablation_mode == "mel_input"
    sw = rc.sway_config()
    assert sw.n_steps == rc.get("sway", "n_steps")
    dc = rc.degrade_config(seed=5)
    assert dc.seed == 5
    assert dc.severity == rc.get("degrade", "severity")
    ms = rc.mask_spec()
    assert 0 < ms.min_frac <= ms.max_frac <= 1.0


def test_config_hash_stability(tmp_path):
    a = config.load_config()
    b = config.load_config()
    assert a.config_hash() == b.config_hash()
    p = tmp_path / "x.cfg"
    p.write_text("[run]\nseed = 12345\n")
    c = config.load_config(p)
    assert c.config_hash() != a.config_hash()
