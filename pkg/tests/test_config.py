import pytest

from spkadapt._validation import ValidationError
from spkadapt.config import CONFIG_DIR_ENV, SCHEMA, RunConfig, resolve_config, shipped_configs


def test_defaults_cover_schema():
    cfg = RunConfig()
    for section, keys in SCHEMA.items():
        assert set(cfg[section]) == set(keys)


def test_unknown_key_and_section_rejected():
    with pytest.raises(ValidationError):
        RunConfig.from_text("[model]\nwidth = 3\n")
    with pytest.raises(ValidationError):
        RunConfig.from_text("[extras]\nx = 1\n")


def test_typed_parsing():
    cfg = RunConfig.from_text(
        "[run]\nseed = 5\n[augmentation]\nspeed_factors = 0.9, 1.1\ntime_mask = off\n"
        "[eval]\nsnrs = clean, 18.0, 0\n[schedule]\nmax_steps = none\n"
    )
    assert cfg.seed == 5
    assert cfg["augmentation"]["speed_factors"] == (0.9, 1.1)
    assert cfg["augmentation"]["time_mask"] is False
    assert cfg["eval"]["snrs"] == ("clean", "18", "0")
    assert cfg["schedule"]["max_steps"] is None


@pytest.mark.parametrize("text", ["[run]\nseed = abc\n", "[model]\narch = rnn\n", "[features]\nnormalize = maybe\n",
                                  "not an ini"])
def test_bad_values(text):
    with pytest.raises(ValidationError):
        RunConfig.from_text(text)


def test_overrides():
    cfg = RunConfig().apply_overrides(["model.arch=transformer", "decode.beam=4"])
    assert cfg["model"]["arch"] == "transformer" and cfg["decode"]["beam"] == 4
    with pytest.raises(ValidationError):
        cfg.apply_overrides(["beam=4"])
    with pytest.raises(ValidationError):
        cfg.apply_overrides(["decode.width=4"])


def test_text_round_trip_and_hash():
    cfg = resolve_config("transformer_swbd")
    back = RunConfig.from_text(cfg.to_text())
    assert back.values == cfg.values
    assert back.hash() == cfg.hash()
    assert len(cfg.hash()) == 12
    assert cfg.apply_overrides(["run.seed=9"]).hash() != back.hash()


def test_provenance_names_hash_and_seed():
    cfg = RunConfig()
    p = cfg.provenance()
    assert cfg.hash() in p and "seed=0" in p and p.startswith("spkadapt ")


def test_shipped_configs_load():
    names = shipped_configs()
    assert {"w2v2_libri.ini", "w2v2_swbd.ini", "transformer_libri.ini", "transformer_swbd.ini",
            "toy_w2v2.ini", "toy_transformer.ini"} <= set(names)
    for n in names:
        resolve_config(n)


def test_shipped_recipe_values():
    libri, swbd = resolve_config("transformer_libri"), resolve_config("transformer_swbd")
    assert libri["decode"]["lm_weight"] == 0.6 and swbd["decode"]["lm_weight"] == 0.3
    assert libri["decode"]["beam"] == swbd["decode"]["beam"] == 60
    assert libri["schedule"]["warmup_steps"] == 25000
    assert (libri["model"]["lm_d_model"], libri["model"]["lm_d_ff"]) == (768, 3072)
    assert (swbd["model"]["lm_d_model"], swbd["model"]["lm_d_ff"]) == (264, 1024)
    w2v2 = resolve_config("w2v2_swbd")
    assert w2v2["optimizer"]["kind"] == "adadelta" and w2v2["optimizer"]["rho"] == 0.95


def test_resolution_order(tmp_path, monkeypatch):
    (tmp_path / "toy_w2v2.ini").write_text("[run]\nseed = 77\n")
    monkeypatch.setenv(CONFIG_DIR_ENV, str(tmp_path))
    assert resolve_config("toy_w2v2").seed == 77
    monkeypatch.delenv(CONFIG_DIR_ENV)
    assert resolve_config("toy_w2v2").seed != 77
    assert resolve_config(str(tmp_path / "toy_w2v2.ini")).seed == 77
    with pytest.raises(ValidationError):
        resolve_config("nope")
