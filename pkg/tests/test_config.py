import pytest

from imci.config import DEFAULTS, DESCRIPTIONS, Config


def test_every_key_is_documented():
    assert DEFAULTS.keys() == DESCRIPTIONS.keys()


def test_parse_types_values_and_ignores_comments():
    cfg = Config.parse("""
        # replay
        phase1.workers = 8
        poll.interval_ms = 2.5   # trailing comment
        compaction.enabled = yes
        log.sync = none
    """)
    assert cfg["phase1.workers"] == 8
    assert cfg["poll.interval_ms"] == 2.5
    assert cfg["compaction.enabled"] is True
    assert cfg["log.sync"] == "none"
    assert cfg["phase2.workers"] == DEFAULTS["phase2.workers"]


@pytest.mark.parametrize("text", ["phase1.wrokers = 2", "phase1.workers = two", "phase1.workers",
                                  "compaction.enabled = maybe"])
def test_parse_rejects_with_line_number(text):
    with pytest.raises(ValueError, match=r"<config>:1"):
        Config.parse(text)


def test_unknown_key_is_a_key_error():
    with pytest.raises(KeyError):
        Config({"no.such.key": 1})


def test_dump_round_trips():
    cfg = Config({"precommit.threshold": 17, "checkpoint.replay_image": False})
    assert Config.parse(cfg.dump()) == cfg


def test_overrides_beat_file(tmp_path):
    p = tmp_path / "imci.conf"
    p.write_text("phase1.workers = 3\nphase2.workers = 5\n")
    cfg = Config.load(p, {"phase2.workers": "7", "tables": None})
    assert (cfg["phase1.workers"], cfg["phase2.workers"], cfg["tables"]) == (3, 7, DEFAULTS["tables"])
    assert Config.load(tmp_path / "missing.conf") == Config()


def test_replay_config_mapping():
    rc = Config({"phase1.workers": 2, "precommit.threshold": 9, "group.size": 64}).replay_config()
    assert (rc.phase1_workers, rc.precommit_threshold, rc.group_size) == (2, 9, 64)
