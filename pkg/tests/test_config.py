"""Configuration document parsing and validation."""

from pathlib import Path

import pytest

from manidp.config import ConfigError, RunConfig, parse_config
from manidp.training import TrainConfig

SAMPLE = Path(__file__).resolve().parents[1] / "docs" / "sample-run.cfg"


# -- defaults and the golden sample ------------------------------------------------


def test_empty_document_yields_all_defaults():
    assert parse_config("") == RunConfig()


def test_comments_and_blank_lines_are_ignored():
    text = "\n# full-line comment\n\n[train]\n\nwarmup_epochs = 2\nepochs = 7  # trailing comment\n"
    assert parse_config(text).train.epochs == 7


def test_sample_config_matches_documented_defaults():
    # the reference document writes out every default explicitly, so parsing
    # it must land on the same resolved configuration as an empty document
    parsed = parse_config(SAMPLE.read_text(encoding="utf-8"))
    defaults = RunConfig()
    assert parsed.train == defaults.train
    assert parsed.network_spec() == defaults.network_spec()
    assert parsed.augmentation() == defaults.augmentation()
    for field in ("dataset", "data_dir", "mode", "adaptive", "group_lasso_weight",
                  "out_dir", "checkpoint_every"):
        assert getattr(parsed, field) == getattr(defaults, field), field


def test_full_override_document():
    text = """
    [data]
    dataset = cifar10
    data_dir = /tmp/somewhere
    augment = true
    crop_pad = 3
    flip = false
    [model]
    stem_channels = 8
    gated_channels = 8, 12
    gated_strides = 2, 1
    kernel_size = 5
    stem_stride = 2
    reduction_ratio = 2
    [train]
    mode = static-baseline
    group_lasso_weight = 0.01
    eta = 0.25
    warmup_epochs = 2
    epochs = 4
    learning_rate = 0.05
    lr_milestones = 0.5,
    lr_decay = 0.2
    lr_warmup_epochs = 1
    momentum = 0.8
    weight_decay = 0.001
    batch_size = 64
    lambda_prime = 0.01
    gamma = 5.0
    adaptive = no
    seed = 9
    [output]
    out_dir = /tmp/out
    checkpoint_every = 2
    """
    config = parse_config(text)
    assert config.dataset == "cifar10"
    assert config.data_dir == "/tmp/somewhere"
    assert config.augmentation() == (True, 3, False)
    spec = config.network_spec()
    assert spec.in_channels == 3 and spec.num_classes == 10
    assert spec.stem_channels == 8
    assert spec.gated_channels == (8, 12)
    assert spec.gated_strides == (2, 1)
    assert spec.kernel_size == 5 and spec.stem_stride == 2
    assert spec.reduction_ratio == 2
    assert config.mode == "static-baseline"
    assert config.group_lasso_weight == 0.01
    assert config.adaptive is False
    assert config.out_dir == "/tmp/out"
    assert config.checkpoint_every == 2
    assert config.train == TrainConfig(
        eta=0.25, warmup_epochs=2, epochs=4, learning_rate=0.05,
        lr_milestones=(0.5,), lr_decay=0.2, lr_warmup_epochs=1,
        momentum=0.8, weight_decay=0.001, batch_size=64,
        lambda_prime=0.01, gamma=5.0, seed=9,
    )


def test_keys_and_sections_are_case_insensitive():
    config = parse_config("[TRAIN]\nETA = 0.3\n")
    assert config.train.eta == 0.3


def test_last_duplicate_key_wins():
    config = parse_config("[train]\nepochs = 3\nepochs = 11\n")
    assert config.train.epochs == 11


# -- structural errors ------------------------------------------------------------


def test_unknown_section_names_the_line():
    with pytest.raises(ConfigError, match=r"line 2: unknown section \[nonsense\]"):
        parse_config("# header\n[nonsense]\n")


def test_unknown_key_names_section_and_line():
    with pytest.raises(ConfigError, match=r"line 2: train\.cadence: unknown key"):
        parse_config("[train]\ncadence = 3\n")


def test_key_in_wrong_section_is_unknown():
    with pytest.raises(ConfigError, match=r"data\.epochs: unknown key"):
        parse_config("[data]\nepochs = 3\n")


def test_key_before_any_section_is_rejected():
    with pytest.raises(ConfigError, match=r"line 1: key outside any \[section\]"):
        parse_config("epochs = 3\n")


def test_line_without_equals_is_rejected():
    with pytest.raises(ConfigError, match=r"line 2: expected 'key = value'"):
        parse_config("[train]\nepochs\n")


# -- value errors ------------------------------------------------------------------


@pytest.mark.parametrize(
    "line, fragment",
    [
        ("epochs = three", "train.epochs"),
        ("learning_rate = fast", "train.learning_rate"),
        ("adaptive = maybe", "train.adaptive"),
        ("lr_milestones = a, b", "train.lr_milestones"),
    ],
)
def test_unparsable_values_name_the_key(line, fragment):
    with pytest.raises(ConfigError, match=fragment):
        parse_config(f"[train]\n{line}\n")


def test_constraint_violation_names_the_culprit_line():
    with pytest.raises(ConfigError, match=r"line 3: train\.eta: eta must lie in"):
        parse_config("[train]\nepochs = 5\neta = 1.5\n")


def test_unknown_dataset_is_rejected():
    with pytest.raises(ConfigError, match="dataset"):
        parse_config("[data]\ndataset = imagenet\n")


def test_unknown_mode_is_rejected():
    with pytest.raises(ConfigError, match="mode"):
        parse_config("[train]\nmode = blended\n")


def test_static_baseline_requires_group_lasso_weight():
    with pytest.raises(ConfigError, match="group_lasso_weight"):
        parse_config("[train]\nmode = static-baseline\n")
    config = parse_config("[train]\nmode = static-baseline\ngroup_lasso_weight = 0.1\n")
    assert config.group_lasso_weight == 0.1


def test_negative_crop_pad_is_rejected():
    with pytest.raises(ConfigError, match="crop_pad"):
        parse_config("[data]\ncrop_pad = -1\n")


# -- resolved defaults --------------------------------------------------------------


def test_augmentation_defaults_per_dataset():
    assert parse_config("[data]\ndataset = cifar10\n").augmentation() == (True, 4, True)
    assert parse_config("[data]\ndataset = digits\n").augmentation() == (False, 2, False)
    assert parse_config("[data]\ndataset = mnist\n").augmentation() == (False, 2, False)


def test_augmentation_explicit_toggles_override_dataset_defaults():
    config = parse_config("[data]\ndataset = mnist\naugment = yes\ncrop_pad = 1\n")
    assert config.augmentation() == (True, 1, False)
    config = parse_config("[data]\ndataset = cifar10\naugment = off\n")
    assert config.augmentation() == (False, 4, True)


def test_network_spec_channel_counts_per_dataset():
    assert parse_config("[data]\ndataset = cifar10\n").network_spec().in_channels == 3
    assert parse_config("[data]\ndataset = digits\n").network_spec().in_channels == 1
