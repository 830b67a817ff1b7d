import pytest

from ragcap.config import (ConfigError, KEY_TO_FIELD, PipelineConfig,
                           config_hash, load_config, resolved_text)


def test_published_defaults():
    cfg = PipelineConfig()
    assert cfg.similarity_threshold == 0.7
    assert cfg.triplet_margin == 0.3
    assert cfg.triplet_batch == 128
    assert cfg.triplet_epochs == 200
    assert cfg.triplet_lr == 1e-4
    assert cfg.embed_dropout == 0.3
    assert cfg.retrieval_k == 5
    assert cfg.decoder_lambda == 0.1
    assert cfg.decoder_batch == 512
    assert cfg.decoder_epochs == 200
    assert cfg.decoder_lr_max == 1e-4
    assert cfg.decoder_lr_min == 1e-6
    assert cfg.decoder_lr_period == 20
    assert cfg.decoder_dropout == 0.3
    assert cfg.decoder_d_r == 60
    assert cfg.generate_beam == 4
    assert cfg.init_std == 0.02


def test_load_config_overrides(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("# comment\n\ntriplet.epochs = 3\ndecoder.lr_max = 5e-3\n")
    cfg = load_config(str(path))
    assert cfg.triplet_epochs == 3
    assert cfg.decoder_lr_max == 5e-3
    assert cfg.triplet_margin == 0.3  # untouched default


def test_unknown_key_rejected(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("triplet.momentum = 0.9\n")
    with pytest.raises(ConfigError, match="unknown key"):
        load_config(str(path))


def test_bad_value_rejected(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("triplet.epochs = many\n")
    with pytest.raises(ConfigError, match="bad value"):
        load_config(str(path))


def test_missing_equals_rejected(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("triplet.epochs 3\n")
    with pytest.raises(ConfigError, match="key=value"):
        load_config(str(path))


def test_missing_file_is_config_error():
    with pytest.raises(ConfigError):
        load_config("/nonexistent/config.cfg")


def test_int_keys_parse_as_int(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("decoder.epochs = 7\nretrieval.K = 3\n")
    cfg = load_config(str(path))
    assert isinstance(cfg.decoder_epochs, int) and cfg.decoder_epochs == 7
    assert isinstance(cfg.retrieval_k, int) and cfg.retrieval_k == 3


def test_resolved_text_covers_all_keys_sorted():
    text = resolved_text(PipelineConfig())
    lines = text.strip().split("\n")
    keys = [line.split("=")[0] for line in lines]
    assert keys == sorted(KEY_TO_FIELD)


def test_hash_changes_with_config():
    a = PipelineConfig()
    b = PipelineConfig(triplet_epochs=5)
    assert config_hash(a) != config_hash(b)
    assert config_hash(a) == config_hash(PipelineConfig())


def test_shipped_desk_config_loads():
    import os
    path = os.path.join(os.path.dirname(__file__), "..", "configs",
                        "desk.cfg")
    cfg = load_config(path)
    assert cfg.triplet_epochs == 120
    assert cfg.decoder_d_r == 8
