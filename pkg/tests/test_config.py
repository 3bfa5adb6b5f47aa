import pytest

from adiag import config as cfgmod
from adiag.errors import ConfigError


def test_parse_text_types_and_comments():
    vals = cfgmod.parse_text(
        "# a comment\n\npreset = desk\nn_ad=3\nthinning=0.9\nuse_batchnorm=false\nactivation=relu\n"
    )
    assert vals == {"preset": "desk", "n_ad": 3, "thinning": 0.9, "use_batchnorm": False, "activation": "relu"}


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="cfg:2: unknown config key .bogus."):
        cfgmod.parse_text("n_ad=3\nbogus=1\n", "cfg")


@pytest.mark.parametrize("text", ["n_ad=three", "use_batchnorm=maybe", "thinning=", "preset=huge", "no_equals"])
def test_bad_values_rejected(text):
    with pytest.raises(ConfigError):
        cfgmod.parse_text(text)


def test_preset_and_overrides():
    run = cfgmod.build(overrides={"preset": "desk", "n_ad": 5, "epochs": 7})
    g = run.gen_config()
    assert (g.nodes_target, g.n_ad, g.n_nc) == (128, 5, 20)
    assert run.train_config().epochs == 7


def test_file_then_flag_precedence(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("seed=4\nepochs=9\n")
    run = cfgmod.build(p, {"seed": 11})
    assert run.train_config().seed == 11 and run.gen_config().seed == 11
    assert run.train_config().epochs == 9


def test_manifest_text_round_trips(tmp_path):
    run = cfgmod.build(overrides={"preset": "desk", "lr": 0.0025, "use_batchnorm": False})
    text = run.to_text(["header line"])
    assert text.startswith("# header line\n")
    again = cfgmod.RunConfig(cfgmod.parse_text(text))
    assert again.resolved() == run.resolved()


def test_every_gen_and_train_field_is_a_key():
    from adiag.synthgen import GenConfig
    from adiag.train import TrainConfig

    for name in GenConfig.field_names() + TrainConfig.field_names():
        assert name in cfgmod.KEYS
