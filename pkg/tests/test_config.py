import pytest

from sfrec.config import ConfigError, ExperimentConfig, load_config


def write(tmp_path, text):
    path = tmp_path / "run.conf"
    path.write_text(text, encoding="utf-8")
    return path


def test_empty_file_yields_all_defaults(tmp_path):
    cfg = load_config(write(tmp_path, ""))
    assert cfg == ExperimentConfig()
    assert (cfg.dim, cfg.batch_size, cfg.lr, cfg.l2) == (32, 256, 5e-4, 1e-4)
    assert (cfg.mlp_layers, cfg.threshold, cfg.seeds) == (3, 5, 3)


def test_no_file_at_all_is_fine():
    assert load_config() == ExperimentConfig()


def test_file_values_parse_with_comments_and_blanks(tmp_path):
    cfg = load_config(
        write(
            tmp_path,
            """
            # experiment knobs
            lr = 0.001
            variant = f2s   # ablation
            eval_ks = 5,10,20
            record_timing = false
            dataset = /data/ratings.dat
            """,
        )
    )
    assert cfg.lr == 0.001
    assert cfg.variant == "f2s"
    assert cfg.eval_ks == [5, 10, 20]
    assert cfg.record_timing is False
    assert cfg.dataset == "/data/ratings.dat"


def test_cli_override_beats_file_value(tmp_path):
    path = write(tmp_path, "threshold = 5\n")
    assert load_config(path, {"threshold": "3"}).threshold == 3
    assert load_config(path, {"threshold": 7}).threshold == 7


def test_negative_lr_rejected(tmp_path):
    with pytest.raises(ConfigError, match="lr"):
        load_config(write(tmp_path, "lr = -1\n"))


def test_unknown_key_rejected(tmp_path):
    with pytest.raises(ConfigError, match="learning_rate"):
        load_config(write(tmp_path, "learning_rate = 0.01\n"))
    with pytest.raises(ConfigError, match="nope"):
        load_config(None, {"nope": "1"})


def test_unparsable_value_is_named(tmp_path):
    with pytest.raises(ConfigError, match="dim"):
        load_config(write(tmp_path, "dim = large\n"))
    with pytest.raises(ConfigError, match="record_timing"):
        load_config(write(tmp_path, "record_timing = maybe\n"))


def test_missing_equals_sign_reports_line(tmp_path):
    with pytest.raises(ConfigError, match=":2:"):
        load_config(write(tmp_path, "lr = 0.01\nthreshold 5\n"))


def test_constraint_violations_are_named():
    with pytest.raises(ConfigError, match="variant"):
        load_config(None, {"variant": "both_ways"})
    with pytest.raises(ConfigError, match="precision"):
        load_config(None, {"precision": "float16"})
    with pytest.raises(ConfigError, match="eval_ks"):
        load_config(None, {"eval_ks": "0,5"})
    with pytest.raises(ConfigError, match="min_seq_len"):
        load_config(None, {"min_seq_len": "10"})
    with pytest.raises(ConfigError, match="threshold"):
        load_config(None, {"threshold": "0"})


def test_mlp_hidden_ladder_tracks_layer_count():
    assert ExperimentConfig(mlp_layers=3).mlp_hidden() == (64, 32)
    assert ExperimentConfig(mlp_layers=1).mlp_hidden() == ()
    assert ExperimentConfig(mlp_layers=4).mlp_hidden() == (64, 32, 16)
